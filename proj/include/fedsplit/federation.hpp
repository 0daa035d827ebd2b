#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedsplit/adam.hpp"
#include "fedsplit/data.hpp"
#include "fedsplit/metrics.hpp"
#include "fedsplit/model.hpp"
#include "fedsplit/tokenizer.hpp"
#include "fedsplit/transport.hpp"

namespace fedsplit {

// ---- Client sampling ----

struct RoundPlan {
  int round = 0;
  std::vector<int> selected;  // ascending client ids, sampled without replacement
  int local_epochs = 1;
  int batch_size = 32;
};

// |selected| = round(fraction * total), minimum 1.
std::vector<int> sample_clients(int total, double fraction, Rng& rng);

// ---- FedAvg ----

struct WeightedParams {
  int client_id = 0;
  int64_t sample_count = 0;  // n_k
  const NamedTensors* params = nullptr;
};

// Sample-count weighted average, summed in ascending client-id order with
// double accumulation. All contributions must share names and shapes.
NamedTensors fedavg(std::vector<WeightedParams> contributions);

// ---- Adaptive local aggregation ----

struct AlaConfig {
  float lr = 0.1f;          // gradient step on the aggregation weights K
  int window = 5;           // loss-variance window
  double tau = 1e-4;        // variance threshold
  double data_fraction = 0.2;  // fraction s of the client's train shard
  int cap = 50;             // refinement step cap
  bool refine = true;       // tests disable refinement to check merge identities
};

struct AlaState {
  NamedTensors k;  // element-wise aggregation weights, clipped to [0, 1]
  bool initialized = false;
};

struct AlaReport {
  int steps = 0;
  double final_variance = 0.0;
  bool cap_hit = false;
};

// W_hat = W_local + (W_global - W_local) .* K, with exact passthrough at
// K == 0 and K == 1 so the degenerate merges are bit-identical.
NamedTensors ala_merge(const NamedTensors& local, const NamedTensors& global,
                       const NamedTensors& k);

// Builds the refinement loss for step `step` over the init subset; the
// callable must return a scalar loss wired to the merged parameters.
using AlaLossFn = std::function<Tensor(const NamedTensors& merged, int step)>;

// Refines state.k by gradient steps dLoss/dW_hat .* (W_global - W_local)
// until the variance of the last `window` losses drops below tau or the step
// cap is hit, then returns the merged weights.
NamedTensors ala_initialize(const NamedTensors& local, const NamedTensors& global,
                            AlaState& state, const AlaConfig& cfg, const AlaLossFn& loss_fn,
                            AlaReport* report = nullptr);

// ---- Batch construction (shared by split, monolithic and local training) ----

struct MlmBatch {
  TokenBatch tokens;        // ids are the corrupted inputs
  std::vector<int> labels;  // original ids at selected positions, else ignore
};

struct ClsBatch {
  TokenBatch tokens;
  std::vector<int> labels;  // one binary label per row
};

// Deterministic per-(seed, round, epoch) shuffling and masking. Client id is
// deliberately absent from the stream derivation so clients with identical
// shards produce identical batches.
std::vector<MlmBatch> make_mlm_batches(const std::vector<UrlRecord>& records, const Vocab& vocab,
                                       int max_len, int batch_size, const MlmRule& rule,
                                       uint64_t seed, int round, int epoch);
std::vector<ClsBatch> make_cls_batches(const std::vector<UrlRecord>& records, const Vocab& vocab,
                                       int max_len, int batch_size, uint64_t seed, int round,
                                       int epoch);

// ---- Split pre-training (Algorithm 1) ----

enum class TransportKind { Inproc, Socket };

struct PretrainOptions {
  ModelConfig model;
  AdamConfig adam;  // lr 5e-5 default
  MlmRule mlm;
  int rounds = 10;
  double fraction = 1.0;
  int local_epochs = 1;
  int batch_size = 64;
  uint64_t seed = 0;
};

struct RoundLoss {
  int round = 0;
  int client_id = 0;
  double mlm_loss = 0.0;  // mean over the client's batches this round
};

struct PretrainResult {
  NamedTensors client_weights;
  NamedTensors server_weights;
  std::vector<RoundLoss> losses;
};

// Full wire-protocol path: per-client sessions against a compute/federation
// server, per-client server copies, end-of-round aggregation of both parts.
PretrainResult run_pretrain(const PretrainOptions& options,
                            const std::vector<ClientShard>& shards, const Vocab& vocab,
                            TransportKind transport);

// Same math on in-process tensors with no serialization; the equivalence
// oracle for the wire path and the centralized baseline when given one shard.
PretrainResult run_pretrain_monolithic(const PretrainOptions& options,
                                       const std::vector<ClientShard>& shards,
                                       const Vocab& vocab);

// ---- FedAvg fine-tuning (Algorithm 2) ----

struct FinetuneOptions {
  ModelConfig model;
  AdamConfig adam;  // lr 2e-6 default
  int rounds = 30;
  double fraction = 0.5;
  int local_epochs = 5;
  int batch_size = 32;
  bool ala = false;
  AlaConfig ala_cfg;
  FreezeMask freeze;
  uint64_t seed = 0;
  int max_workers = 4;  // per-round client fan-out; does not affect results
};

struct RoundReportRecord {
  int round = 0;
  int client_id = 0;
  std::string split = "test";
  ClientMetrics metrics;
};

struct FinetuneResult {
  NamedTensors global;  // aggregated full model
  std::vector<RoundReportRecord> reports;
  std::vector<AlaReport> ala_reports;
};

FinetuneResult run_finetune(const FinetuneOptions& options,
                            const std::vector<ClientShard>& shards, const Vocab& vocab,
                            const NamedTensors& initial);

// Evaluates a full model (client.* + server.* + head.*) on labeled records.
ClientMetrics evaluate_model(const NamedTensors& params, const ModelConfig& config,
                             const std::vector<UrlRecord>& records, const Vocab& vocab,
                             int batch_size = 64);

}  // namespace fedsplit
