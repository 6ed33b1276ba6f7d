#include <iostream>

#include "CLI11.hpp"
#include "demo_fixture.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write the 30-sample mock-backed demo project", "amod-fixture"};
  std::string dir;
  amod::demo::FixtureOptions opts;
  app.add_option("dir", dir, "Target directory")->required();
  app.add_option("--seed", opts.seed, "Split seed written into the config");
  app.add_option("--k", opts.k, "Retrieved cases per prompt");
  CLI11_PARSE(app, argc, argv);
  try {
    const auto m = amod::demo::write_demo_fixture(dir, opts);
    std::cout << "fixture: " << m.train.size() << " train, " << m.test.size() << " test, "
              << m.stubborn.size() << " scripted to stay mislabeled -> " << dir << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
