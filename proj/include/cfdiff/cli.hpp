#pragma once

namespace cfdiff::cli {

/// Parses arguments, runs one subcommand and maps errors to exit codes:
/// 0 success, 1 runtime failure, 2 config error, 3 missing dependency,
/// 4 quality gate.
int run(int argc, char** argv);

}  // namespace cfdiff::cli
