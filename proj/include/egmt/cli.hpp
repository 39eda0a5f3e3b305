#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace egmt::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

// Parses argv[1..] as one subcommand and runs it. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace egmt::cli
