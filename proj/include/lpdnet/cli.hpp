#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lpdnet {

// Dispatch for the `lpd` command line tool. Returns the process exit code:
// 0 success, 1 usage error, 2 data error, 3 numeric failure.
int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lpdnet
