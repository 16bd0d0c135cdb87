#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace barcodemae::cli {

/// Exit codes by failure class.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kCheckpointError = 4,
  kDivergence = 5,
};

/// Runs one `barcodemae` command. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace barcodemae::cli
