#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "fedsplit/config.hpp"

namespace fedsplit {

// Each command writes its artifacts plus the fully resolved config
// (config.resolved.txt) and a run manifest (manifest.json: resolved config,
// input hashes, output list, wall-clock) into its output directory.

// Scenario shards: per-client train/test CSVs plus a JSON index.
void cmd_partition(const ExperimentConfig& cfg, const std::string& out_dir);

// Character n-gram vocabulary from the configured data source.
void cmd_build_vocab(const ExperimentConfig& cfg, const std::string& out_path);

// Split MLM pre-training over the configured transport. Writes
// checkpoint.fswt (client + server parts) and pretrain_log.jsonl.
void cmd_pretrain(const ExperimentConfig& cfg, const std::string& shards_dir,
                  const std::string& vocab_path, const std::string& out_dir);

// Federated fine-tuning from a pre-trained checkpoint. Writes model.fswt
// (full model) and reports.jsonl with per-(round, client) metrics.
void cmd_finetune(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                  const std::string& shards_dir, const std::string& vocab_path,
                  const std::string& out_dir);

// Evaluates a fine-tuned checkpoint on a labeled CSV; prints one JSON object.
ClientMetrics cmd_evaluate(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                           const std::string& vocab_path, const std::string& csv_path,
                           std::ostream& out);

// Cross-run comparison: accuracy_vs_round.csv (round, run, acc, tpr, fpr,
// f1, auc) and summary.csv with the final-round aggregate per run.
void cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

// FNV-1a 64 hash of a file's bytes, as fixed-width hex.
std::string file_hash(const std::string& path);

}  // namespace fedsplit
