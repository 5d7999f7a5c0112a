#pragma once

#include <string>
#include <vector>

namespace dqkd {

// Command-line surface. Returns the process exit code: 0 on success, 2 for
// usage/input errors, 1 for runtime failures.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace dqkd
