#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace ipf {

inline constexpr std::string_view kToolVersion = "0.3.0";

// Exit codes: 0 success, 1 usage, 2 data, 3 numerical.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

// Runs one `ipf` invocation. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ipf
