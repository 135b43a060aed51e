#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace layerfuse::cli {

// Exit codes: 0 success, 1 invalid flags or inputs, 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace layerfuse::cli
