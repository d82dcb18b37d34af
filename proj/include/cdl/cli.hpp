#pragma once

#include <iosfwd>

namespace cdl::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Runs one subcommand: score, split, train, generate, evaluate or diversity.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cdl::cli
