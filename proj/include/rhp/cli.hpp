#pragma once

#include <string>
#include <vector>

namespace rhp {

/// Runs the command line tool. `args` excludes the program name. Returns the exit code.
///
/// Every subcommand writes into `--out`. A `FAILED` marker is created first and only
/// removed once all outputs are complete; on error it holds the message.
int cli(const std::vector<std::string>& args);

}  // namespace rhp
