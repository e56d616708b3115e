#pragma once

#include <string>
#include <vector>

#include "clipn/error.hpp"

namespace clipn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;

/// args excludes the program name. Diagnostics go to stderr.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

/// 2 for configuration mistakes, 3 for unreadable or inconsistent data.
int exit_code_for(ErrorCode code) noexcept;

/// Shortest decimal that round-trips to the same double.
std::string format_double(double v);

}  // namespace clipn::cli
