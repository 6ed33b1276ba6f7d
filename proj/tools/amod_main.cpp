#include <iostream>
#include <string>
#include <vector>

#include "amod/cli.hpp"

int main(int argc, char** argv) {
  return amod::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
