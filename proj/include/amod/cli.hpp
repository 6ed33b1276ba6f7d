#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace amod::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Parses `args` (program name first) and runs one pipeline stage.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace amod::cli
