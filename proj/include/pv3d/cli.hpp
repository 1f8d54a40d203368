#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pv3d {

// Exit codes of the pv3d command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;     // bad flag, config file or parameter
inline constexpr int kExitData = 3;       // missing or malformed input data
inline constexpr int kExitNumerical = 4;  // non-finite loss or divergence
inline constexpr int kExitLocked = 5;     // output directory held by another run

/// Runs one subcommand. `args` excludes the program name. Progress goes to
/// `out`; on failure a single JSON line goes to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace pv3d
