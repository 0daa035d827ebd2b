#include "fedsplit/model.hpp"

#include <cmath>

#include "fedsplit/errors.hpp"

namespace fedsplit {

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "tiny") {
    cfg.hidden_size = 64;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.ff_size = 128;
  } else if (name == "paper-shape") {
    cfg.hidden_size = 768;
    cfg.num_layers = 2;
    cfg.num_heads = 12;
    cfg.ff_size = 3072;
  } else {
    throw ConfigError("unknown model preset '" + name + "'");
  }
  return cfg;
}

void ModelConfig::validate() const {
  if (vocab_size < 6 || hidden_size < 1 || num_layers < 1 || num_heads < 1 || ff_size < 1 ||
      max_len < 3) {
    throw ConfigError("model config: all sizes must be positive (vocab >= 6, max_len >= 3)");
  }
  if (hidden_size % num_heads != 0) {
    throw ConfigError("model config: hidden_size " + std::to_string(hidden_size) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (attention_dropout < 0.0f || attention_dropout >= 1.0f || hidden_dropout < 0.0f ||
      hidden_dropout >= 1.0f) {
    throw ConfigError("model config: dropout rates must lie in [0, 1)");
  }
}

NamedTensors SplitModel::all() const {
  NamedTensors out = client;
  out.insert(server.begin(), server.end());
  out.insert(head.begin(), head.end());
  return out;
}

namespace {

Tensor init_weight(const std::vector<int>& shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
  for (auto& v : t.data()) v = static_cast<float>(rng.truncated_normal(0.02));
  return t;
}

std::string layer_key(int i, const std::string& leaf) {
  return "server.layer" + std::to_string(i) + "." + leaf;
}

}  // namespace

SplitModel init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(Rng::derive(config.seed, {kStreamInit}));
  const int h = config.hidden_size;
  SplitModel m;
  m.config = config;
  m.client["client.tok_emb"] = init_weight({config.vocab_size, h}, rng);
  m.client["client.pos_emb"] = init_weight({config.max_len, h}, rng);
  m.client["client.ln.g"] = Tensor::full({h}, 1.0f, true);
  m.client["client.ln.b"] = Tensor::zeros({h}, true);
  for (int i = 0; i < config.num_layers; ++i) {
    for (const char* proj : {"q", "k", "v", "o"}) {
      m.server[layer_key(i, std::string(proj) + ".w")] = init_weight({h, h}, rng);
      m.server[layer_key(i, std::string(proj) + ".b")] = Tensor::zeros({h}, true);
    }
    m.server[layer_key(i, "ff1.w")] = init_weight({h, config.ff_size}, rng);
    m.server[layer_key(i, "ff1.b")] = Tensor::zeros({config.ff_size}, true);
    m.server[layer_key(i, "ff2.w")] = init_weight({config.ff_size, h}, rng);
    m.server[layer_key(i, "ff2.b")] = Tensor::zeros({h}, true);
    for (const char* ln : {"ln1", "ln2"}) {
      m.server[layer_key(i, std::string(ln) + ".g")] = Tensor::full({h}, 1.0f, true);
      m.server[layer_key(i, std::string(ln) + ".b")] = Tensor::zeros({h}, true);
    }
  }
  m.server["server.mlm.w"] = init_weight({h, config.vocab_size}, rng);
  m.server["server.mlm.b"] = Tensor::zeros({config.vocab_size}, true);
  m.head["head.w"] = init_weight({h, 2}, rng);
  m.head["head.b"] = Tensor::zeros({2}, true);
  return m;
}

namespace {

const Tensor& get(const NamedTensors& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("model: missing parameter '" + name + "'");
  return it->second;
}

void check_batch(const TokenBatch& batch, const ModelConfig& config) {
  if (batch.batch <= 0 || batch.seq_len <= 0 ||
      batch.ids.size() != static_cast<size_t>(batch.batch) * batch.seq_len ||
      batch.attention_mask.size() != batch.ids.size()) {
    throw DimensionError("token batch: inconsistent batch/seq_len/ids sizes");
  }
  if (batch.seq_len > config.max_len) {
    throw InputError("token batch: seq_len " + std::to_string(batch.seq_len) +
                     " exceeds max_len " + std::to_string(config.max_len));
  }
}

// Additive attention bias, -1e9 at padded key positions, broadcast to
// (batch*heads, L, L). No gradient flows through it.
Tensor attention_bias(const TokenBatch& batch, int heads) {
  const int b = batch.batch, l = batch.seq_len;
  std::vector<float> bias(static_cast<size_t>(b) * heads * l * l, 0.0f);
  for (int bi = 0; bi < b; ++bi) {
    for (int key = 0; key < l; ++key) {
      if (batch.attention_mask[static_cast<size_t>(bi) * l + key]) continue;
      for (int hi = 0; hi < heads; ++hi) {
        float* row0 = bias.data() + (static_cast<size_t>(bi) * heads + hi) * l * l;
        for (int query = 0; query < l; ++query) row0[static_cast<size_t>(query) * l + key] = -1e9f;
      }
    }
  }
  return Tensor::from_data({b * heads, l, l}, std::move(bias));
}

}  // namespace

Tensor client_forward(const NamedTensors& client, const ModelConfig& config,
                      const TokenBatch& batch, bool train, Rng& rng) {
  check_batch(batch, config);
  const int b = batch.batch, l = batch.seq_len, h = config.hidden_size;
  std::vector<int> pos_ids(batch.ids.size());
  for (int bi = 0; bi < b; ++bi) {
    for (int li = 0; li < l; ++li) pos_ids[static_cast<size_t>(bi) * l + li] = li;
  }
  Tensor tok = embedding(get(client, "client.tok_emb"), batch.ids);
  Tensor pos = embedding(get(client, "client.pos_emb"), pos_ids);
  Tensor x = layer_norm(add(tok, pos), get(client, "client.ln.g"), get(client, "client.ln.b"));
  x = dropout(x, config.hidden_dropout, rng, train);
  return reshape(x, {b, l, h});
}

std::pair<Tensor, Tensor> server_forward(const NamedTensors& server, const ModelConfig& config,
                                         const Tensor& z, const TokenBatch& batch, bool train,
                                         Rng& rng, bool want_mlm) {
  check_batch(batch, config);
  const int b = batch.batch, l = batch.seq_len, h = config.hidden_size;
  if (z.rank() != 3 || z.dim(0) != b || z.dim(1) != l || z.dim(2) != h) {
    throw DimensionError("server_forward: Z shape " + shape_str(z.shape()) +
                         " does not match batch (" + std::to_string(b) + ", " + std::to_string(l) +
                         ", " + std::to_string(h) + ")");
  }
  const int heads = config.num_heads;
  const int dh = h / heads;
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  const Tensor bias = attention_bias(batch, heads);

  Tensor x = reshape(z, {b * l, h});  // flat rows for all projections
  for (int i = 0; i < config.num_layers; ++i) {
    auto key = [i](const std::string& leaf) { return layer_key(i, leaf); };
    auto project = [&](const char* proj) {
      Tensor p = add_bias(matmul(x, get(server, key(std::string(proj) + ".w"))),
                          get(server, key(std::string(proj) + ".b")));
      return split_heads(reshape(p, {b, l, h}), heads);
    };
    Tensor q = project("q");
    Tensor k = project("k");
    Tensor v = project("v");
    Tensor scores = scale(matmul(q, transpose_last2(k)), inv_sqrt_dh);
    Tensor probs = softmax(add(scores, bias), 2);
    probs = dropout(probs, config.attention_dropout, rng, train);
    Tensor context = reshape(merge_heads(matmul(probs, v), heads), {b * l, h});
    Tensor attn = add_bias(matmul(context, get(server, key("o.w"))), get(server, key("o.b")));
    attn = dropout(attn, config.hidden_dropout, rng, train);
    x = layer_norm(add(x, attn), get(server, key("ln1.g")), get(server, key("ln1.b")));
    Tensor ff = gelu(add_bias(matmul(x, get(server, key("ff1.w"))), get(server, key("ff1.b"))));
    ff = add_bias(matmul(ff, get(server, key("ff2.w"))), get(server, key("ff2.b")));
    ff = dropout(ff, config.hidden_dropout, rng, train);
    x = layer_norm(add(x, ff), get(server, key("ln2.g")), get(server, key("ln2.b")));
  }
  Tensor hidden = reshape(x, {b, l, h});
  Tensor logits;
  if (want_mlm) {
    logits = reshape(add_bias(matmul(x, get(server, "server.mlm.w")), get(server, "server.mlm.b")),
                     {b, l, config.vocab_size});
  }
  return {hidden, logits};
}

Tensor classifier_forward(const NamedTensors& head, const Tensor& hidden) {
  return add_bias(matmul(take_position0(hidden), get(head, "head.w")), get(head, "head.b"));
}

FreezeMask FreezeMask::all_of(const NamedTensors& params) {
  FreezeMask mask;
  for (const auto& [name, t] : params) mask.frozen.insert(name);
  return mask;
}

FreezeMask FreezeMask::encoder_layers(const ModelConfig& config, int lo, int hi) {
  if (lo < 0 || hi >= config.num_layers || lo > hi) {
    throw ConfigError("freeze: layer range " + std::to_string(lo) + ".." + std::to_string(hi) +
                      " invalid for " + std::to_string(config.num_layers) + " layers");
  }
  FreezeMask mask;
  for (int i = lo; i <= hi; ++i) {
    for (const char* proj : {"q", "k", "v", "o", "ff1", "ff2"}) {
      mask.frozen.insert(layer_key(i, std::string(proj) + ".w"));
      mask.frozen.insert(layer_key(i, std::string(proj) + ".b"));
    }
    for (const char* ln : {"ln1", "ln2"}) {
      mask.frozen.insert(layer_key(i, std::string(ln) + ".g"));
      mask.frozen.insert(layer_key(i, std::string(ln) + ".b"));
    }
  }
  return mask;
}

void FreezeMask::validate(const NamedTensors& params) const {
  for (const auto& name : frozen) {
    if (!params.count(name)) throw ConfigError("freeze: unknown parameter '" + name + "'");
  }
}

int64_t param_count(const NamedTensors& params) {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

}  // namespace fedsplit
