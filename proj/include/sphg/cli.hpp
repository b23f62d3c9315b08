#pragma once

#include <string>
#include <vector>

namespace sphg {

// Entry point shared by the binary and the tests; args exclude the program
// name. Exit codes: 0 success, 1 bad config/input data, 2 missing input,
// 3 numeric failure, 4 internal invariant breach.
int cli_main(const std::vector<std::string>& args);

}  // namespace sphg
