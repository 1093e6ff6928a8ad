#pragma once

#include <string>
#include <vector>

namespace fruitform {

/// Entry point behind the `fruitform` binary. Exit codes: 0 success,
/// 1 IO/runtime failure, 2 validation or flag error.
int run_cli(const std::vector<std::string>& args);

} // namespace fruitform
