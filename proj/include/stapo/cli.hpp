#pragma once

#include <iosfwd>

namespace stapo::cli {

enum ExitCode : int {
  kSuccess = 0,
  kUsageError = 1,
  kVerificationFailure = 2,
  kRuntimeAbort = 3,
};

// Entry point behind the `stapo` binary: generate, train, verify, classify
// and analyze subcommands.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stapo::cli
