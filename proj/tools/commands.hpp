#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fimode::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs `fim-ode` with `args` (program name excluded) and returns the exit
/// code: 0 success, 1 runtime failure, 2 usage or configuration error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace fimode::cli
