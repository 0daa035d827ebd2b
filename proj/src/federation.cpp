#include "fedsplit/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <numeric>
#include <thread>

#include "fedsplit/errors.hpp"

namespace fedsplit {

namespace {

NamedTensors clone_params(const NamedTensors& params) {
  NamedTensors out;
  for (const auto& [name, t] : params) out[name] = t.clone();
  return out;
}

// Overwrites parameter storage in place so optimizer state keyed by the same
// handles stays valid.
void assign_params(NamedTensors& dst, const NamedTensors& src) {
  for (auto& [name, t] : dst) {
    auto it = src.find(name);
    if (it == src.end()) throw ConfigError("assign: missing parameter '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw DimensionError("assign: shape mismatch for '" + name + "'");
    }
    t.data() = it->second.data();
    t.zero_grad();
  }
}

double window_variance(const std::deque<double>& losses) {
  const double n = static_cast<double>(losses.size());
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / n;
  double acc = 0.0;
  for (double v : losses) acc += (v - mean) * (v - mean);
  return acc / n;
}

}  // namespace

std::vector<int> sample_clients(int total, double fraction, Rng& rng) {
  if (total <= 0) throw ConfigError("sample_clients: total must be positive");
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ConfigError("sample_clients: fraction must be in (0, 1]");
  }
  int m = static_cast<int>(std::lround(fraction * total));
  m = std::max(1, std::min(m, total));
  std::vector<int> ids(static_cast<size_t>(total));
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < m; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(total - i)));
    std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
  }
  ids.resize(static_cast<size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

NamedTensors fedavg(std::vector<WeightedParams> contributions) {
  if (contributions.empty()) throw ConfigError("fedavg: no contributions");
  std::sort(contributions.begin(), contributions.end(),
            [](const WeightedParams& a, const WeightedParams& b) {
              return a.client_id < b.client_id;
            });
  int64_t total = 0;
  for (const auto& c : contributions) {
    if (c.params == nullptr) throw ConfigError("fedavg: null contribution");
    if (c.sample_count <= 0) throw ConfigError("fedavg: sample counts must be positive");
    total += c.sample_count;
    if (c.params->size() != contributions.front().params->size()) {
      throw DimensionError("fedavg: contributions disagree on parameter names");
    }
  }
  // All-identical contributions average to themselves exactly, so idle rounds
  // and replicated clients leave the global state bit-for-bit unchanged.
  bool identical = true;
  for (size_t i = 1; identical && i < contributions.size(); ++i) {
    for (const auto& [name, t] : *contributions.front().params) {
      auto it = contributions[i].params->find(name);
      if (it == contributions[i].params->end() || it->second.data() != t.data()) {
        identical = false;
        break;
      }
    }
  }
  if (identical) return clone_params(*contributions.front().params);

  NamedTensors out;
  for (const auto& [name, first] : *contributions.front().params) {
    std::vector<double> acc(static_cast<size_t>(first.size()), 0.0);
    for (const auto& c : contributions) {
      auto it = c.params->find(name);
      if (it == c.params->end() || it->second.shape() != first.shape()) {
        throw DimensionError("fedavg: contributions disagree on '" + name + "'");
      }
      const double coef = static_cast<double>(c.sample_count) / static_cast<double>(total);
      const auto& data = it->second.data();
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += coef * static_cast<double>(data[i]);
    }
    std::vector<float> avg(acc.size());
    for (size_t i = 0; i < acc.size(); ++i) avg[i] = static_cast<float>(acc[i]);
    Tensor t = Tensor::from_data(first.shape(), std::move(avg));
    t.set_requires_grad(first.requires_grad());
    out[name] = t;
  }
  return out;
}

// ---- ALA ----

NamedTensors ala_merge(const NamedTensors& local, const NamedTensors& global,
                       const NamedTensors& k) {
  NamedTensors out;
  for (const auto& [name, wl] : local) {
    auto ig = global.find(name);
    auto ik = k.find(name);
    if (ig == global.end() || ik == k.end()) {
      throw ConfigError("ala_merge: missing parameter '" + name + "'");
    }
    const auto& gl = ig->second.data();
    const auto& lo = wl.data();
    const auto& kw = ik->second.data();
    if (gl.size() != lo.size() || kw.size() != lo.size()) {
      throw DimensionError("ala_merge: shape mismatch for '" + name + "'");
    }
    std::vector<float> merged(lo.size());
    for (size_t i = 0; i < lo.size(); ++i) {
      if (kw[i] == 1.0f) {
        merged[i] = gl[i];
      } else if (kw[i] == 0.0f) {
        merged[i] = lo[i];
      } else {
        merged[i] = lo[i] + (gl[i] - lo[i]) * kw[i];
      }
    }
    Tensor t = Tensor::from_data(wl.shape(), std::move(merged));
    t.set_requires_grad(wl.requires_grad());
    out[name] = t;
  }
  return out;
}

NamedTensors ala_initialize(const NamedTensors& local, const NamedTensors& global,
                            AlaState& state, const AlaConfig& cfg, const AlaLossFn& loss_fn,
                            AlaReport* report) {
  if (local.size() != global.size()) {
    throw ConfigError("ala_initialize: local/global parameter sets differ");
  }
  if (!state.initialized) {
    for (const auto& [name, t] : local) {
      state.k[name] = Tensor::full(t.shape(), 1.0f);
    }
    state.initialized = true;
  }
  AlaReport rep;
  if (cfg.refine) {
    if (!loss_fn) throw ConfigError("ala_initialize: refinement requires a loss function");
    std::deque<double> losses;
    bool converged = false;
    for (int step = 0; step < cfg.cap; ++step) {
      NamedTensors merged = ala_merge(local, global, state.k);
      for (auto& [name, t] : merged) t.set_requires_grad(true);
      Tensor loss = loss_fn(merged, step);
      loss.backward();
      for (auto& [name, t] : merged) {
        if (!t.has_grad()) continue;
        const auto& g = t.grad();
        const auto& lo = local.at(name).data();
        const auto& gl = global.at(name).data();
        auto& kw = state.k[name].data();
        for (size_t i = 0; i < kw.size(); ++i) {
          kw[i] -= cfg.lr * g[i] * (gl[i] - lo[i]);
          kw[i] = std::min(1.0f, std::max(0.0f, kw[i]));
        }
      }
      losses.push_back(static_cast<double>(loss.item()));
      if (static_cast<int>(losses.size()) > cfg.window) losses.pop_front();
      ++rep.steps;
      if (static_cast<int>(losses.size()) == cfg.window) {
        rep.final_variance = window_variance(losses);
        if (rep.final_variance < cfg.tau) {
          converged = true;
          break;
        }
      }
    }
    rep.cap_hit = !converged && rep.steps == cfg.cap;
  }
  if (report != nullptr) *report = rep;
  return ala_merge(local, global, state.k);
}

// ---- Batch construction ----

namespace {

std::vector<size_t> shuffled_order(size_t n, Rng& rng) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  for (size_t i = n; i > 1; --i) {
    const size_t j = rng.uniform_int(i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

TokenBatch pack_batch(const std::vector<EncodedSequence>& rows, int max_len) {
  TokenBatch tb;
  tb.batch = static_cast<int>(rows.size());
  tb.seq_len = max_len;
  tb.ids.reserve(rows.size() * static_cast<size_t>(max_len));
  tb.attention_mask.reserve(rows.size() * static_cast<size_t>(max_len));
  for (const auto& row : rows) {
    tb.ids.insert(tb.ids.end(), row.ids.begin(), row.ids.end());
    tb.attention_mask.insert(tb.attention_mask.end(), row.attention_mask.begin(),
                             row.attention_mask.end());
  }
  return tb;
}

}  // namespace

std::vector<MlmBatch> make_mlm_batches(const std::vector<UrlRecord>& records, const Vocab& vocab,
                                       int max_len, int batch_size, const MlmRule& rule,
                                       uint64_t seed, int round, int epoch) {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  Rng shuffle_rng(Rng::derive(seed, {kStreamShuffle, static_cast<uint64_t>(round),
                                     static_cast<uint64_t>(epoch)}));
  Rng mask_rng(
      Rng::derive(seed, {kStreamMask, static_cast<uint64_t>(round), static_cast<uint64_t>(epoch)}));
  const auto order = shuffled_order(records.size(), shuffle_rng);
  std::vector<MlmBatch> batches;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(order.size(), start + static_cast<size_t>(batch_size));
    std::vector<EncodedSequence> rows;
    MlmBatch mb;
    for (size_t i = start; i < stop; ++i) {
      EncodedSequence enc = encode(records[order[i]].url, vocab, max_len);
      MaskedBatch masked = apply_mlm_mask(enc, vocab, mask_rng, rule);
      EncodedSequence corrupted{masked.input_ids, enc.attention_mask};
      rows.push_back(std::move(corrupted));
      mb.labels.insert(mb.labels.end(), masked.labels.begin(), masked.labels.end());
    }
    mb.tokens = pack_batch(rows, max_len);
    batches.push_back(std::move(mb));
  }
  return batches;
}

std::vector<ClsBatch> make_cls_batches(const std::vector<UrlRecord>& records, const Vocab& vocab,
                                       int max_len, int batch_size, uint64_t seed, int round,
                                       int epoch) {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  Rng shuffle_rng(Rng::derive(seed, {kStreamShuffle, static_cast<uint64_t>(round),
                                     static_cast<uint64_t>(epoch)}));
  const auto order = shuffled_order(records.size(), shuffle_rng);
  std::vector<ClsBatch> batches;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(order.size(), start + static_cast<size_t>(batch_size));
    std::vector<EncodedSequence> rows;
    ClsBatch cb;
    for (size_t i = start; i < stop; ++i) {
      rows.push_back(encode(records[order[i]].url, vocab, max_len));
      cb.labels.push_back(records[order[i]].label);
    }
    cb.tokens = pack_batch(rows, max_len);
    batches.push_back(std::move(cb));
  }
  return batches;
}

// ---- Split pre-training ----

namespace {

std::vector<int32_t> to_i32(const std::vector<int>& v) {
  return std::vector<int32_t>(v.begin(), v.end());
}

std::vector<int> to_int(const std::vector<int32_t>& v) {
  return std::vector<int>(v.begin(), v.end());
}

// One MLM step on the server side of the cut: forward from the received
// activations, loss, backward, optimizer step. Returns (dZ, batch loss).
std::pair<Tensor, double> server_mlm_step(NamedTensors& server_copy, const ModelConfig& config,
                                          const Tensor& z, const TokenBatch& tb,
                                          const std::vector<int>& labels, Rng& rng, Adam& adam) {
  auto [hidden, logits] = server_forward(server_copy, config, z, tb, true, rng, true);
  (void)hidden;
  Tensor flat = reshape(logits, {tb.batch * tb.seq_len, config.vocab_size});
  Tensor loss = cross_entropy(flat, labels);
  loss.backward();
  adam.step(server_copy);
  Tensor dz = Tensor::from_data(z.shape(), z.has_grad() ? z.grad()
                                                        : std::vector<float>(z.size(), 0.0f));
  return {dz, static_cast<double>(loss.item())};
}

// Client runtime for the wire protocol: register, then follow RoundStart /
// WeightsDown / Shutdown from the server.
void pretrain_client_main(int client_id, const PretrainOptions& opt, const ClientShard& shard,
                          const Vocab& vocab, Channel& chan) {
  SplitModel init = init_model(opt.model);
  NamedTensors client = init.client;
  Adam adam(opt.adam);
  WeightsUp reg;
  reg.round = 0;
  reg.client_id = static_cast<uint32_t>(client_id);
  reg.sample_count = static_cast<uint64_t>(shard.sample_count());
  reg.tensors = client;
  chan.send_msg(reg);
  for (;;) {
    WireMessage msg = chan.recv_msg();
    if (auto* down = std::get_if<WeightsDown>(&msg)) {
      assign_params(client, down->tensors);
      continue;
    }
    auto* ctl = std::get_if<Control>(&msg);
    if (ctl == nullptr) throw ProtocolError("client: unexpected message from server");
    if (ctl->kind == ControlKind::Shutdown) {
      chan.close();
      return;
    }
    if (ctl->kind != ControlKind::RoundStart) continue;
    const int t = static_cast<int>(ctl->round);
    Rng rng(Rng::derive(opt.seed, {kStreamClient, static_cast<uint64_t>(t)}));
    for (int e = 0; e < opt.local_epochs; ++e) {
      auto batches = make_mlm_batches(shard.train, vocab, opt.model.max_len, opt.batch_size,
                                      opt.mlm, opt.seed, t, e);
      for (auto& batch : batches) {
        Tensor z = client_forward(client, opt.model, batch.tokens, true, rng);
        ActivationBatch ab;
        ab.round = static_cast<uint32_t>(t);
        ab.client_id = static_cast<uint32_t>(client_id);
        ab.z = z;
        ab.attention_mask = to_i32(batch.tokens.attention_mask);
        ab.labels = to_i32(batch.labels);
        chan.send_msg(ab);
        WireMessage reply = chan.recv_msg();
        auto* grad = std::get_if<ActivationGrad>(&reply);
        if (grad == nullptr) throw ProtocolError("client: expected activation gradient");
        z.backward(grad->dz.data());
        adam.step(client);
      }
    }
    WeightsUp up;
    up.round = static_cast<uint32_t>(t);
    up.client_id = static_cast<uint32_t>(client_id);
    up.sample_count = static_cast<uint64_t>(shard.sample_count());
    up.tensors = client;
    chan.send_msg(up);
  }
}

// Per-session server state; one handler thread per connected client.
struct Session {
  std::unique_ptr<Channel> chan;
  std::mutex send_mu;
  int client_id = -1;
  int64_t sample_count = 0;

  NamedTensors server_copy;  // deployed from the global server part
  std::unique_ptr<Adam> adam;
  Rng rng{0};

  std::mutex mu;
  std::condition_variable cv;
  bool uploaded = false;
  NamedTensors upload;
  double loss_sum = 0.0;
  int64_t loss_batches = 0;

  void send(const WireMessage& msg) {
    std::lock_guard<std::mutex> lock(send_mu);
    chan->send_msg(msg);
  }
};

void server_session_loop(Session& s, const PretrainOptions& opt) {
  try {
    for (;;) {
      WireMessage msg = s.chan->recv_msg();
      if (auto* ab = std::get_if<ActivationBatch>(&msg)) {
        Tensor z = ab->z;
        z.set_requires_grad(true);
        TokenBatch tb;
        tb.batch = z.dim(0);
        tb.seq_len = z.dim(1);
        tb.ids.assign(static_cast<size_t>(tb.batch) * tb.seq_len, 0);
        tb.attention_mask = to_int(ab->attention_mask);
        auto [dz, loss] =
            server_mlm_step(s.server_copy, opt.model, z, tb, to_int(ab->labels), s.rng, *s.adam);
        {
          std::lock_guard<std::mutex> lock(s.mu);
          s.loss_sum += loss;
          ++s.loss_batches;
        }
        ActivationGrad reply;
        reply.round = ab->round;
        reply.client_id = ab->client_id;
        reply.dz = dz;
        s.send(reply);
      } else if (auto* up = std::get_if<WeightsUp>(&msg)) {
        std::lock_guard<std::mutex> lock(s.mu);
        s.upload = up->tensors;
        s.uploaded = true;
        s.cv.notify_all();
      } else {
        throw ProtocolError("server: unexpected message from client");
      }
    }
  } catch (const SessionError&) {
    // Peer departed after shutdown; the session is complete.
  }
}

PretrainResult pretrain_drive(const PretrainOptions& opt, std::vector<ClientShard> const& shards,
                              std::vector<std::unique_ptr<Session>>& sessions) {
  const int total = static_cast<int>(sessions.size());
  // Registration: the first frame on every session carries the client id,
  // sample count and the client-part weights.
  for (auto& s : sessions) {
    WireMessage msg = s->chan->recv_msg();
    auto* reg = std::get_if<WeightsUp>(&msg);
    if (reg == nullptr || reg->round != 0) throw ProtocolError("server: expected registration");
    s->client_id = static_cast<int>(reg->client_id);
    s->sample_count = static_cast<int64_t>(reg->sample_count);
    s->upload = reg->tensors;
  }
  std::sort(sessions.begin(), sessions.end(),
            [](const auto& a, const auto& b) { return a->client_id < b->client_id; });
  for (int i = 0; i < total; ++i) {
    if (sessions[static_cast<size_t>(i)]->client_id != i) {
      throw ProtocolError("server: client ids must be distinct and contiguous");
    }
  }

  std::vector<WeightedParams> init_contribs;
  for (auto& s : sessions) {
    init_contribs.push_back({s->client_id, std::max<int64_t>(1, s->sample_count), &s->upload});
  }
  NamedTensors global_client = fedavg(init_contribs);
  NamedTensors global_server = init_model(opt.model).server;
  for (auto& s : sessions) {
    s->uploaded = false;
    s->upload.clear();
    WeightsDown down;
    down.round = 0;
    down.tensors = global_client;
    s->send(down);
  }

  std::vector<std::thread> handlers;
  handlers.reserve(sessions.size());
  for (auto& s : sessions) {
    handlers.emplace_back([&s, &opt] { server_session_loop(*s, opt); });
  }

  PretrainResult result;
  for (int t = 1; t <= opt.rounds; ++t) {
    Rng sample_rng(Rng::derive(opt.seed, {kStreamSample, static_cast<uint64_t>(t)}));
    const auto selected = sample_clients(total, opt.fraction, sample_rng);
    for (int k : selected) {
      Session& s = *sessions[static_cast<size_t>(k)];
      if (s.server_copy.empty()) {
        s.server_copy = clone_params(global_server);
        s.adam = std::make_unique<Adam>(opt.adam);
      } else {
        assign_params(s.server_copy, global_server);
      }
      s.rng = Rng(Rng::derive(opt.seed, {kStreamServer, static_cast<uint64_t>(t)}));
      {
        std::lock_guard<std::mutex> lock(s.mu);
        s.uploaded = false;
        s.loss_sum = 0.0;
        s.loss_batches = 0;
      }
      Control start;
      start.kind = ControlKind::RoundStart;
      start.round = static_cast<uint32_t>(t);
      s.send(start);
    }
    for (int k : selected) {
      Session& s = *sessions[static_cast<size_t>(k)];
      std::unique_lock<std::mutex> lock(s.mu);
      s.cv.wait(lock, [&s] { return s.uploaded; });
      RoundLoss rl;
      rl.round = t;
      rl.client_id = k;
      rl.mlm_loss = s.loss_batches > 0 ? s.loss_sum / static_cast<double>(s.loss_batches) : 0.0;
      result.losses.push_back(rl);
    }
    std::vector<WeightedParams> client_contribs, server_contribs;
    for (int k : selected) {
      Session& s = *sessions[static_cast<size_t>(k)];
      const int64_t n = std::max<int64_t>(1, s.sample_count);
      client_contribs.push_back({k, n, &s.upload});
      server_contribs.push_back({k, n, &s.server_copy});
    }
    global_client = fedavg(client_contribs);
    global_server = fedavg(server_contribs);
    for (auto& s : sessions) {
      WeightsDown down;
      down.round = static_cast<uint32_t>(t);
      down.tensors = global_client;
      s->send(down);
    }
  }
  for (auto& s : sessions) {
    Control bye;
    bye.kind = ControlKind::Shutdown;
    bye.round = static_cast<uint32_t>(opt.rounds);
    s->send(bye);
  }
  for (auto& h : handlers) h.join();
  for (auto& s : sessions) s->chan->close();

  (void)shards;
  result.client_weights = std::move(global_client);
  result.server_weights = std::move(global_server);
  return result;
}

}  // namespace

PretrainResult run_pretrain(const PretrainOptions& options, const std::vector<ClientShard>& shards,
                            const Vocab& vocab, TransportKind transport) {
  if (shards.empty()) throw ConfigError("pretrain: at least one client shard is required");
  options.model.validate();
  if (options.rounds < 0) throw ConfigError("pretrain: rounds must be non-negative");
  if (options.local_epochs <= 0) throw ConfigError("pretrain: local_epochs must be positive");
  if (static_cast<int>(vocab.size()) != options.model.vocab_size) {
    throw ConfigError("pretrain: vocabulary size does not match model vocab_size");
  }

  const int total = static_cast<int>(shards.size());
  std::vector<std::unique_ptr<Session>> sessions(static_cast<size_t>(total));
  std::vector<std::unique_ptr<Channel>> client_ends(static_cast<size_t>(total));

  std::unique_ptr<Listener> listener;
  if (transport == TransportKind::Socket) {
    listener = listen_loopback(0);
  }

  std::vector<std::thread> clients;
  clients.reserve(static_cast<size_t>(total));
  std::exception_ptr client_error;
  std::mutex error_mu;
  for (int k = 0; k < total; ++k) {
    if (transport == TransportKind::Inproc) {
      auto [a, b] = make_inproc_pair();
      auto session = std::make_unique<Session>();
      session->chan = std::move(a);
      sessions[static_cast<size_t>(k)] = std::move(session);
      client_ends[static_cast<size_t>(k)] = std::move(b);
    }
  }
  const int port = listener ? listener->port() : 0;
  for (int k = 0; k < total; ++k) {
    clients.emplace_back([&, k] {
      try {
        std::unique_ptr<Channel> chan;
        if (transport == TransportKind::Socket) {
          chan = connect_loopback(port);
        } else {
          chan = std::move(client_ends[static_cast<size_t>(k)]);
        }
        pretrain_client_main(k, options, shards[static_cast<size_t>(k)], vocab, *chan);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!client_error) client_error = std::current_exception();
      }
    });
  }
  if (transport == TransportKind::Socket) {
    for (int k = 0; k < total; ++k) {
      auto session = std::make_unique<Session>();
      session->chan = listener->accept();
      sessions[static_cast<size_t>(k)] = std::move(session);
    }
  }

  PretrainResult result;
  std::exception_ptr driver_error;
  try {
    result = pretrain_drive(options, shards, sessions);
  } catch (...) {
    driver_error = std::current_exception();
    for (auto& s : sessions) {
      if (s && s->chan) s->chan->close();
    }
  }
  for (auto& c : clients) c.join();
  if (driver_error) std::rethrow_exception(driver_error);
  if (client_error) std::rethrow_exception(client_error);
  return result;
}

PretrainResult run_pretrain_monolithic(const PretrainOptions& options,
                                       const std::vector<ClientShard>& shards,
                                       const Vocab& vocab) {
  if (shards.empty()) throw ConfigError("pretrain: at least one client shard is required");
  options.model.validate();
  if (options.rounds < 0) throw ConfigError("pretrain: rounds must be non-negative");
  if (options.local_epochs <= 0) throw ConfigError("pretrain: local_epochs must be positive");
  if (static_cast<int>(vocab.size()) != options.model.vocab_size) {
    throw ConfigError("pretrain: vocabulary size does not match model vocab_size");
  }

  const int total = static_cast<int>(shards.size());
  std::vector<NamedTensors> client_parts(static_cast<size_t>(total));
  std::vector<NamedTensors> server_copies(static_cast<size_t>(total));
  std::vector<std::unique_ptr<Adam>> adam_c(static_cast<size_t>(total));
  std::vector<std::unique_ptr<Adam>> adam_s(static_cast<size_t>(total));
  for (int k = 0; k < total; ++k) {
    client_parts[static_cast<size_t>(k)] = init_model(options.model).client;
    adam_c[static_cast<size_t>(k)] = std::make_unique<Adam>(options.adam);
  }

  std::vector<WeightedParams> init_contribs;
  for (int k = 0; k < total; ++k) {
    init_contribs.push_back({k, std::max<int64_t>(1, shards[static_cast<size_t>(k)].sample_count()),
                             &client_parts[static_cast<size_t>(k)]});
  }
  NamedTensors global_client = fedavg(init_contribs);
  NamedTensors global_server = init_model(options.model).server;
  for (int k = 0; k < total; ++k) {
    assign_params(client_parts[static_cast<size_t>(k)], global_client);
  }

  PretrainResult result;
  for (int t = 1; t <= options.rounds; ++t) {
    Rng sample_rng(Rng::derive(options.seed, {kStreamSample, static_cast<uint64_t>(t)}));
    const auto selected = sample_clients(total, options.fraction, sample_rng);
    for (int k : selected) {
      auto& server_copy = server_copies[static_cast<size_t>(k)];
      if (server_copy.empty()) {
        server_copy = clone_params(global_server);
        adam_s[static_cast<size_t>(k)] = std::make_unique<Adam>(options.adam);
      } else {
        assign_params(server_copy, global_server);
      }
      Rng rng_c(Rng::derive(options.seed, {kStreamClient, static_cast<uint64_t>(t)}));
      Rng rng_s(Rng::derive(options.seed, {kStreamServer, static_cast<uint64_t>(t)}));
      double loss_sum = 0.0;
      int64_t loss_batches = 0;
      auto& client = client_parts[static_cast<size_t>(k)];
      for (int e = 0; e < options.local_epochs; ++e) {
        auto batches =
            make_mlm_batches(shards[static_cast<size_t>(k)].train, vocab, options.model.max_len,
                             options.batch_size, options.mlm, options.seed, t, e);
        for (auto& batch : batches) {
          Tensor z = client_forward(client, options.model, batch.tokens, true, rng_c);
          auto [dz, loss] = server_mlm_step(server_copy, options.model, z, batch.tokens,
                                            batch.labels, rng_s, *adam_s[static_cast<size_t>(k)]);
          (void)dz;  // the joint backward already reached the client part
          adam_c[static_cast<size_t>(k)]->step(client);
          loss_sum += loss;
          ++loss_batches;
        }
      }
      RoundLoss rl;
      rl.round = t;
      rl.client_id = k;
      rl.mlm_loss = loss_batches > 0 ? loss_sum / static_cast<double>(loss_batches) : 0.0;
      result.losses.push_back(rl);
    }
    std::vector<WeightedParams> client_contribs, server_contribs;
    for (int k : selected) {
      const int64_t n = std::max<int64_t>(1, shards[static_cast<size_t>(k)].sample_count());
      client_contribs.push_back({k, n, &client_parts[static_cast<size_t>(k)]});
      server_contribs.push_back({k, n, &server_copies[static_cast<size_t>(k)]});
    }
    global_client = fedavg(client_contribs);
    global_server = fedavg(server_contribs);
    for (int k = 0; k < total; ++k) {
      assign_params(client_parts[static_cast<size_t>(k)], global_client);
    }
  }
  result.client_weights = std::move(global_client);
  result.server_weights = std::move(global_server);
  return result;
}

// ---- Evaluation ----

ClientMetrics evaluate_model(const NamedTensors& params, const ModelConfig& config,
                             const std::vector<UrlRecord>& records, const Vocab& vocab,
                             int batch_size) {
  if (records.empty()) throw InputError("evaluate: no records");
  if (batch_size <= 0) throw ConfigError("evaluate: batch_size must be positive");
  NoGradGuard guard;
  Rng dummy(0);
  std::vector<double> probs;
  std::vector<int> labels;
  std::vector<ScoredPrediction> scored;
  double loss_sum = 0.0;
  for (size_t start = 0; start < records.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(records.size(), start + static_cast<size_t>(batch_size));
    std::vector<EncodedSequence> rows;
    std::vector<int> batch_labels;
    for (size_t i = start; i < stop; ++i) {
      rows.push_back(encode(records[i].url, vocab, config.max_len));
      batch_labels.push_back(records[i].label);
    }
    TokenBatch tb = pack_batch(rows, config.max_len);
    Tensor z = client_forward(params, config, tb, false, dummy);
    auto [hidden, mlm] = server_forward(params, config, z, tb, false, dummy, false);
    (void)mlm;
    Tensor logits = classifier_forward(params, hidden);
    Tensor p = softmax(logits, 1);
    Tensor loss = cross_entropy(logits, batch_labels);
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch_labels.size());
    for (size_t i = 0; i < batch_labels.size(); ++i) {
      const double pos = static_cast<double>(p.data()[i * 2 + 1]);
      probs.push_back(pos);
      labels.push_back(batch_labels[i]);
      scored.push_back({pos, batch_labels[i]});
    }
  }
  const MetricSet m = metrics(confusion(probs, labels));
  ClientMetrics out;
  out.acc = m.acc;
  out.tpr = m.tpr;
  out.fpr = m.fpr;
  out.f1 = m.f1;
  out.loss = loss_sum / static_cast<double>(records.size());
  const bool has_pos = std::count(labels.begin(), labels.end(), 1) > 0;
  const bool has_neg = std::count(labels.begin(), labels.end(), 0) > 0;
  // AUC is undefined on a single-class shard; report the chance value.
  out.auc = (has_pos && has_neg) ? auc(scored) : 0.5;
  return out;
}

// ---- FedAvg fine-tuning ----

FinetuneResult run_finetune(const FinetuneOptions& options, const std::vector<ClientShard>& shards,
                            const Vocab& vocab, const NamedTensors& initial) {
  if (shards.empty()) throw ConfigError("finetune: at least one client shard is required");
  options.model.validate();
  if (options.rounds <= 0) throw ConfigError("finetune: rounds must be positive");
  if (options.local_epochs <= 0) throw ConfigError("finetune: local_epochs must be positive");
  if (static_cast<int>(vocab.size()) != options.model.vocab_size) {
    throw ConfigError("finetune: vocabulary size does not match model vocab_size");
  }
  options.freeze.validate(initial);

  const int total = static_cast<int>(shards.size());
  NamedTensors global = clone_params(initial);
  std::vector<NamedTensors> local_prev(static_cast<size_t>(total));
  std::vector<AlaState> ala_states(static_cast<size_t>(total));
  FinetuneResult result;
  std::mutex ala_mu;

  for (int t = 1; t <= options.rounds; ++t) {
    Rng sample_rng(Rng::derive(options.seed, {kStreamSample, static_cast<uint64_t>(t)}));
    const auto selected = sample_clients(total, options.fraction, sample_rng);
    std::vector<NamedTensors> trained(selected.size());

    auto train_one = [&](size_t si) {
      const int k = selected[si];
      const ClientShard& shard = shards[static_cast<size_t>(k)];
      NamedTensors local;
      if (options.ala && !local_prev[static_cast<size_t>(k)].empty()) {
        if (shard.train.empty()) {
          throw ConfigError("finetune: adaptive initialization needs a non-empty train shard");
        }
        const auto init_n = static_cast<size_t>(std::max<int64_t>(
            1, static_cast<int64_t>(std::ceil(options.ala_cfg.data_fraction *
                                              static_cast<double>(shard.train.size())))));
        std::vector<UrlRecord> subset(shard.train.begin(),
                                      shard.train.begin() + static_cast<int64_t>(std::min(
                                                                init_n, shard.train.size())));
        std::vector<ClsBatch> probe;
        for (size_t start = 0; start < subset.size();
             start += static_cast<size_t>(options.batch_size)) {
          const size_t stop =
              std::min(subset.size(), start + static_cast<size_t>(options.batch_size));
          std::vector<EncodedSequence> rows;
          ClsBatch cb;
          for (size_t i = start; i < stop; ++i) {
            rows.push_back(encode(subset[i].url, vocab, options.model.max_len));
            cb.labels.push_back(subset[i].label);
          }
          cb.tokens = pack_batch(rows, options.model.max_len);
          probe.push_back(std::move(cb));
        }
        Rng dummy(0);
        AlaLossFn loss_fn = [&](const NamedTensors& merged, int step) {
          const ClsBatch& cb = probe[static_cast<size_t>(step) % probe.size()];
          Tensor z = client_forward(merged, options.model, cb.tokens, false, dummy);
          auto [hidden, mlm] =
              server_forward(merged, options.model, z, cb.tokens, false, dummy, false);
          (void)mlm;
          return cross_entropy(classifier_forward(merged, hidden), cb.labels);
        };
        AlaReport rep;
        local = ala_initialize(local_prev[static_cast<size_t>(k)], global,
                               ala_states[static_cast<size_t>(k)], options.ala_cfg, loss_fn, &rep);
        std::lock_guard<std::mutex> lock(ala_mu);
        result.ala_reports.push_back(rep);
      } else {
        local = clone_params(global);
      }
      Adam adam(options.adam);
      Rng rng(Rng::derive(options.seed, {kStreamClient, static_cast<uint64_t>(t)}));
      for (int e = 0; e < options.local_epochs; ++e) {
        auto batches = make_cls_batches(shard.train, vocab, options.model.max_len,
                                        options.batch_size, options.seed, t, e);
        for (auto& batch : batches) {
          Tensor z = client_forward(local, options.model, batch.tokens, true, rng);
          auto [hidden, mlm] =
              server_forward(local, options.model, z, batch.tokens, true, rng, false);
          (void)mlm;
          Tensor loss = cross_entropy(classifier_forward(local, hidden), batch.labels);
          loss.backward();
          adam.step(local, options.freeze.frozen);
        }
      }
      if (options.ala) local_prev[static_cast<size_t>(k)] = clone_params(local);
      trained[si] = std::move(local);
    };

    const int workers =
        std::max(1, std::min<int>(options.max_workers, static_cast<int>(selected.size())));
    if (workers == 1) {
      for (size_t si = 0; si < selected.size(); ++si) train_one(si);
    } else {
      std::atomic<size_t> next{0};
      std::vector<std::thread> pool;
      std::exception_ptr err;
      std::mutex err_mu;
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          for (;;) {
            const size_t si = next.fetch_add(1);
            if (si >= selected.size()) return;
            try {
              train_one(si);
            } catch (...) {
              std::lock_guard<std::mutex> lock(err_mu);
              if (!err) err = std::current_exception();
            }
          }
        });
      }
      for (auto& th : pool) th.join();
      if (err) std::rethrow_exception(err);
    }

    std::vector<WeightedParams> contribs;
    for (size_t si = 0; si < selected.size(); ++si) {
      contribs.push_back({selected[si],
                          std::max<int64_t>(1, shards[static_cast<size_t>(selected[si])].sample_count()),
                          &trained[si]});
    }
    global = fedavg(contribs);

    for (int k = 0; k < total; ++k) {
      const ClientShard& shard = shards[static_cast<size_t>(k)];
      if (shard.test.empty()) continue;
      RoundReportRecord rec;
      rec.round = t;
      rec.client_id = k;
      rec.split = "test";
      rec.metrics = evaluate_model(global, options.model, shard.test, vocab, options.batch_size);
      result.reports.push_back(rec);
    }
  }
  result.global = std::move(global);
  return result;
}

}  // namespace fedsplit
