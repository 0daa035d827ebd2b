#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fedsplit/rng.hpp"

namespace fedsplit {

struct UrlRecord {
  std::string url;
  int label = 0;  // 0 benign, 1 malicious
};

struct ClientShard {
  int client_id = 0;
  std::vector<UrlRecord> train;
  std::vector<UrlRecord> test;

  int64_t sample_count() const { return static_cast<int64_t>(train.size()); }
};

enum class ScenarioKind { IID, NonIID2, NonIID3 };

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::IID;
  double alpha = 0.7;  // Dirichlet concentration
  int clients = 10;
  uint64_t seed = 0;
};

ScenarioKind scenario_from_string(const std::string& name);
std::string scenario_to_string(ScenarioKind kind);

// CSV with header "url,label". The label is everything after the last comma,
// so URLs containing commas survive a round-trip.
std::vector<UrlRecord> load_csv(const std::string& path);
void save_csv(const std::string& path, const std::vector<UrlRecord>& records);

// Balanced synthetic URL corpus with a planted token family: malicious URLs
// carry a planted host token with probability signal_p, benign with
// probability 1-signal_p, so Bayes accuracy is about signal_p.
std::vector<UrlRecord> synthesize_corpus(int n, double signal_p, uint64_t seed);
// The planted tokens, exposed so tests can certify the signal.
const std::vector<std::string>& planted_tokens();

// Global shuffle then round-robin; shard sizes differ by at most one.
std::vector<std::vector<UrlRecord>> partition_iid(const std::vector<UrlRecord>& records,
                                                  int clients, Rng& rng);

// Per-label Dirichlet(alpha) proportions realized by largest-remainder
// rounding; empty shards are repaired by moving one record from the largest.
std::vector<std::vector<UrlRecord>> partition_dirichlet(const std::vector<UrlRecord>& records,
                                                        int clients, double alpha, Rng& rng);

// One Dirichlet proportion row per label, drawn from rng.
std::vector<std::vector<double>> draw_dirichlet_matrix(int num_labels, int clients, double alpha,
                                                       Rng& rng);
// Deterministic largest-remainder realization of a proportion matrix.
std::vector<std::vector<UrlRecord>> partition_by_proportions(
    const std::vector<UrlRecord>& records, int clients,
    const std::vector<std::vector<double>>& proportions);

// Deterministic stratified train/test split.
std::pair<std::vector<UrlRecord>, std::vector<UrlRecord>> stratified_split(
    const std::vector<UrlRecord>& records, double test_fraction, Rng& rng);

// Realizes the three evaluation scenarios over disjoint train/test inputs.
// NonIID3 applies a single Dirichlet draw to both splits.
std::vector<ClientShard> make_scenario(const ScenarioSpec& spec,
                                       const std::vector<UrlRecord>& train,
                                       const std::vector<UrlRecord>& test);

// Shard manifests: one train/test CSV pair per client plus a JSON index.
void save_shards(const std::string& dir, const std::vector<ClientShard>& shards);
std::vector<ClientShard> load_shards(const std::string& dir);

}  // namespace fedsplit
