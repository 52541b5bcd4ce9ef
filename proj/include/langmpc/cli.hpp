#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace langmpc::cli {

enum ExitCode { kOk = 0, kTaskFailed = 1, kConfigError = 2 };

/// Entry point of the `langmpc` executable; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace langmpc::cli
