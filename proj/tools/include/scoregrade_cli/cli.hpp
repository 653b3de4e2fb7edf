#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace scoregrade::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Default root for run directories when --out is not given.
inline constexpr const char* kOutEnv = "SCOREGRADE_OUT";

/// Parses and runs one subcommand. Never throws.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace scoregrade::cli
