#pragma once

#include <iosfwd>
#include <string_view>

#include "app/run_config.hpp"

namespace app {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfigError = 2,
  kExitNumericalError = 3,
};

// Each command echoes the effective config to <run_dir>/config.txt first.
// Errors are thrown; run_command maps them to exit codes.

/// <data_path> plus a <data_path>.meta.json sidecar.
void cmd_gen_data(const RunConfig& cfg);

/// logs/steps.csv, logs/epochs.csv, checkpoints/{best,last}.ckpt and
/// reports/train_summary.json.
void cmd_train(const RunConfig& cfg);

/// reports/metrics.json, reports/metrics.csv, reports/operating_points.csv
/// and reports/embeddings.jsonl, computed on the eval split.
void cmd_eval(const RunConfig& cfg);

/// reports/gradcheck.txt, also printed to `out`. Returns true iff all pass.
bool cmd_gradcheck(const RunConfig& cfg, std::ostream& out);

/// Runs one of gen-data, train, eval, gradcheck and returns its exit code.
int run_command(std::string_view command, const RunConfig& cfg, std::ostream& out);

}  // namespace app
