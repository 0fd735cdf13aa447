#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace paln::cli {

enum ExitCode : int { ok = 0, runtime_error = 1, usage_error = 2 };

/// Runs one command line (without the program name). Human-readable output goes
/// to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace paln::cli
