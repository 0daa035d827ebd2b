#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fedsplit/adam.hpp"
#include "fedsplit/tensor.hpp"

namespace fedsplit {

struct ModelConfig {
  int vocab_size = 1000;
  int hidden_size = 64;
  int num_layers = 2;
  int num_heads = 2;
  int ff_size = 128;
  int max_len = 64;
  float attention_dropout = 0.1f;
  float hidden_dropout = 0.2f;
  uint64_t seed = 0;

  // "tiny" for tests and desk-scale runs, "paper-shape" for embedding shape
  // parity with the reference configuration (vocab 1000, hidden 768).
  static ModelConfig preset(const std::string& name);
  void validate() const;
};

// The partitioned network. Canonical parameter names:
//   client.tok_emb, client.pos_emb, client.ln.{g,b}
//   server.layer{i}.{q,k,v,o,ff1,ff2}.{w,b}, server.layer{i}.{ln1,ln2}.{g,b}
//   server.mlm.{w,b}
//   head.{w,b}
struct SplitModel {
  ModelConfig config;
  NamedTensors client;  // embeddings
  NamedTensors server;  // encoder blocks + MLM head
  NamedTensors head;    // binary classifier

  // All three parts merged into one canonically named set (copies handles).
  NamedTensors all() const;
};

// Truncated-normal (sigma=0.02) weights, zero biases, unit layer-norm gains;
// deterministic under config.seed.
SplitModel init_model(const ModelConfig& config);

// Token batch in row-major (batch, seq_len) layout.
struct TokenBatch {
  int batch = 0;
  int seq_len = 0;
  std::vector<int> ids;
  std::vector<int> attention_mask;
};

// Embedding side: token + learned position embeddings, layer norm, dropout
// (train mode only). Output Z has shape (batch, seq_len, hidden).
Tensor client_forward(const NamedTensors& client, const ModelConfig& config,
                      const TokenBatch& batch, bool train, Rng& rng);

// Post-norm encoder stack over Z; padded key positions receive a -inf
// attention bias. Returns (hidden states, MLM logits); the MLM projection is
// skipped (empty tensor) when want_mlm is false.
std::pair<Tensor, Tensor> server_forward(const NamedTensors& server, const ModelConfig& config,
                                         const Tensor& z, const TokenBatch& batch, bool train,
                                         Rng& rng, bool want_mlm = true);

// Binary logits from the position-0 ([CLS]) hidden vector.
Tensor classifier_forward(const NamedTensors& head, const Tensor& hidden);

// Per-parameter freeze set; frozen parameters are excluded from optimizer
// updates.
struct FreezeMask {
  std::set<std::string> frozen;

  static FreezeMask none() { return {}; }
  static FreezeMask all_of(const NamedTensors& params);
  // Freezes encoder blocks lo..hi inclusive.
  static FreezeMask encoder_layers(const ModelConfig& config, int lo, int hi);

  // Unknown parameter names are a config error.
  void validate(const NamedTensors& params) const;
};

int64_t param_count(const NamedTensors& params);

}  // namespace fedsplit
