#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace spectrum_xai::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Entry point behind the spectrum_xai binary. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spectrum_xai::cli
