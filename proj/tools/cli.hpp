#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace anerf::cli {

/// Exit codes for failures raised by the library.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kInvalidInput = 2,
  kIoFailure = 3,
  kParseFailure = 4,
  kVersionMismatch = 5,
  kNumericalFailure = 6,
};

/// Parses and runs one subcommand. Usage errors use CLI11's exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace anerf::cli
