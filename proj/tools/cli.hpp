#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qusec::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Runs one command line (without the program name). Subcommands: train,
/// attack, evaluate, sweep, report. Every run appends a JSON line to the run
/// log (--run-log, else $QSN_RUN_LOG, else ./qusec-runs.jsonl).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qusec::cli
