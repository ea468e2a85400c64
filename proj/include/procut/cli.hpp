#pragma once

#include <exception>
#include <iosfwd>
#include <string>
#include <vector>

namespace procut {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitInput = 2;
inline constexpr int kExitGateway = 3;
inline constexpr int kExitMismatch = 4;

/// Exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

/// Runs `procut <args...>` (program name excluded). Results go to `out`,
/// diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace procut
