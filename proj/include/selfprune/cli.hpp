#pragma once

#include <string>
#include <vector>

namespace selfprune {

// Command-line entry point; `args` excludes the program name. Returns the
// process exit code: 0 success, 1 runtime failure, 2 usage error.
int run_cli(std::vector<std::string> args);

}  // namespace selfprune
