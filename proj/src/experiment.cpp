#include "fedsplit/experiment.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "fedsplit/checkpoint.hpp"
#include "fedsplit/errors.hpp"
#include "fedsplit/metrics.hpp"

namespace fedsplit {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << bytes;
}

// The corpus named by data.source: synthetic or a labeled CSV on disk.
std::vector<UrlRecord> load_corpus(const ExperimentConfig& cfg) {
  if (cfg.data_source == "synth") {
    return synthesize_corpus(cfg.data_n, cfg.data_p, cfg.seed);
  }
  return load_csv(cfg.data_source);
}

void write_resolved_config(const ExperimentConfig& cfg, const std::string& dir) {
  std::ostringstream out;
  for (const auto& [key, value] : cfg.resolved()) out << key << "=" << value << "\n";
  write_file((fs::path(dir) / "config.resolved.txt").string(), out.str());
}

// Records everything needed for exact replay: config, input hashes, outputs.
void write_manifest(const ExperimentConfig& cfg, const std::string& dir,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, const std::string& report_path,
                    double wall_clock_ms) {
  ordered_json manifest;
  ordered_json config;
  for (const auto& [key, value] : cfg.resolved()) config[key] = value;
  manifest["config"] = config;
  ordered_json hashes;
  for (const auto& path : inputs) hashes[path] = file_hash(path);
  manifest["inputs"] = hashes;
  manifest["outputs"] = outputs;
  manifest["report"] = report_path;
  manifest["wall_clock_ms"] = wall_clock_ms;
  write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

ordered_json metrics_json(const ClientMetrics& m) {
  ordered_json j;
  j["acc"] = format_double(m.acc);
  j["tpr"] = format_double(m.tpr);
  j["fpr"] = format_double(m.fpr);
  j["f1"] = format_double(m.f1);
  j["auc"] = format_double(m.auc);
  j["loss"] = format_double(m.loss);
  return j;
}

ModelConfig model_for_vocab(const ExperimentConfig& cfg, const Vocab& vocab) {
  ModelConfig mc = cfg.model_config();
  mc.vocab_size = vocab.size();
  return mc;
}

void check_checkpoint_matches(const NamedTensors& tensors, const ModelConfig& mc,
                              const Vocab& vocab) {
  auto it = tensors.find("client.tok_emb");
  if (it == tensors.end()) throw ConfigError("checkpoint: missing client.tok_emb");
  if (it->second.rank() != 2 || it->second.dim(0) != vocab.size() ||
      it->second.dim(1) != mc.hidden_size) {
    throw ConfigError("checkpoint: embedding shape does not match the vocabulary/model config");
  }
}

}  // namespace

std::string file_hash(const std::string& path) {
  const std::string bytes = read_file(path);
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void cmd_partition(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const auto start = Clock::now();
  fs::create_directories(out_dir);
  const auto corpus = load_corpus(cfg);
  Rng split_rng(Rng::derive(cfg.seed, {kStreamShuffle, 0}));
  auto [train, test] = stratified_split(corpus, cfg.data_test_fraction, split_rng);
  const auto shards = make_scenario(cfg.scenario_spec(), train, test);
  save_shards(out_dir, shards);

  std::vector<std::string> outputs = {"index.json"};
  for (const auto& shard : shards) {
    outputs.push_back("client_" + std::to_string(shard.client_id) + "_train.csv");
    outputs.push_back("client_" + std::to_string(shard.client_id) + "_test.csv");
  }
  std::vector<std::string> inputs;
  if (cfg.data_source != "synth") inputs.push_back(cfg.data_source);
  write_resolved_config(cfg, out_dir);
  const double ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  write_manifest(cfg, out_dir, inputs, outputs, "", ms);
}

void cmd_build_vocab(const ExperimentConfig& cfg, const std::string& out_path) {
  cfg.validate();
  const auto corpus = load_corpus(cfg);
  std::vector<std::string> urls;
  urls.reserve(corpus.size());
  for (const auto& rec : corpus) urls.push_back(rec.url);
  const Vocab vocab = build_vocab(urls, cfg.model_config().vocab_size);
  if (const fs::path parent = fs::path(out_path).parent_path(); !parent.empty()) {
    fs::create_directories(parent);
  }
  save_vocab(out_path, vocab);
}

void cmd_pretrain(const ExperimentConfig& cfg, const std::string& shards_dir,
                  const std::string& vocab_path, const std::string& out_dir) {
  cfg.validate();
  const auto start = Clock::now();
  const auto shards = load_shards(shards_dir);
  const Vocab vocab = load_vocab(vocab_path);
  if (static_cast<int>(shards.size()) != cfg.fed_clients) {
    throw ConfigError("pretrain: shard directory holds " + std::to_string(shards.size()) +
                      " clients but fed.clients=" + std::to_string(cfg.fed_clients));
  }
  PretrainOptions opt;
  opt.model = model_for_vocab(cfg, vocab);
  opt.adam.lr = cfg.lr_or(5e-5f);
  opt.rounds = cfg.fed_rounds;
  opt.fraction = cfg.fed_fraction;
  opt.local_epochs = cfg.fed_local_epochs;
  opt.batch_size = cfg.batch_or(64);
  opt.seed = cfg.seed;
  const PretrainResult result = run_pretrain(opt, shards, vocab, cfg.transport_kind());

  fs::create_directories(out_dir);
  NamedTensors checkpoint = result.client_weights;
  checkpoint.insert(result.server_weights.begin(), result.server_weights.end());
  save_checkpoint((fs::path(out_dir) / "checkpoint.fswt").string(), checkpoint);
  std::ostringstream log;
  for (const auto& rl : result.losses) {
    ordered_json line;
    line["round"] = rl.round;
    line["client_id"] = rl.client_id;
    line["mlm_loss"] = format_double(rl.mlm_loss);
    log << line.dump() << "\n";
  }
  write_file((fs::path(out_dir) / "pretrain_log.jsonl").string(), log.str());
  write_resolved_config(cfg, out_dir);
  const double ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  write_manifest(cfg, out_dir, {(fs::path(shards_dir) / "index.json").string(), vocab_path},
                 {"checkpoint.fswt", "pretrain_log.jsonl"}, "pretrain_log.jsonl", ms);
}

void cmd_finetune(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                  const std::string& shards_dir, const std::string& vocab_path,
                  const std::string& out_dir) {
  cfg.validate();
  const auto start = Clock::now();
  const auto shards = load_shards(shards_dir);
  const Vocab vocab = load_vocab(vocab_path);
  if (static_cast<int>(shards.size()) != cfg.fed_clients) {
    throw ConfigError("finetune: shard directory holds " + std::to_string(shards.size()) +
                      " clients but fed.clients=" + std::to_string(cfg.fed_clients));
  }
  const ModelConfig mc = model_for_vocab(cfg, vocab);
  const NamedTensors pretrained = load_checkpoint(checkpoint_path);
  check_checkpoint_matches(pretrained, mc, vocab);
  SplitModel fresh = init_model(mc);
  NamedTensors initial = fresh.all();
  for (const auto& [name, t] : pretrained) {
    auto it = initial.find(name);
    if (it == initial.end()) throw ConfigError("checkpoint: unknown parameter '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
    }
    it->second.data() = t.data();
  }

  FinetuneOptions opt;
  opt.model = mc;
  opt.adam.lr = cfg.lr_or(2e-6f);
  opt.rounds = cfg.fed_rounds;
  opt.fraction = cfg.fed_fraction;
  opt.local_epochs = cfg.fed_local_epochs;
  opt.batch_size = cfg.batch_or(32);
  opt.ala = cfg.fed_ala;
  opt.ala_cfg = cfg.ala;
  opt.freeze = cfg.freeze_mask(initial);
  opt.seed = cfg.seed;
  const FinetuneResult result = run_finetune(opt, shards, vocab, initial);

  fs::create_directories(out_dir);
  save_checkpoint((fs::path(out_dir) / "model.fswt").string(), result.global);
  std::ostringstream log;
  for (const auto& rec : result.reports) {
    ordered_json line;
    line["round"] = rec.round;
    line["client_id"] = rec.client_id;
    line["split"] = rec.split;
    for (auto& [key, value] : metrics_json(rec.metrics).items()) line[key] = value;
    log << line.dump() << "\n";
  }
  write_file((fs::path(out_dir) / "reports.jsonl").string(), log.str());
  write_resolved_config(cfg, out_dir);
  const double ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  write_manifest(cfg, out_dir,
                 {checkpoint_path, (fs::path(shards_dir) / "index.json").string(), vocab_path},
                 {"model.fswt", "reports.jsonl"}, "reports.jsonl", ms);
}

ClientMetrics cmd_evaluate(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                           const std::string& vocab_path, const std::string& csv_path,
                           std::ostream& out) {
  cfg.validate();
  const Vocab vocab = load_vocab(vocab_path);
  const ModelConfig mc = model_for_vocab(cfg, vocab);
  const NamedTensors model = load_checkpoint(checkpoint_path);
  check_checkpoint_matches(model, mc, vocab);
  if (!model.count("head.w")) {
    throw ConfigError("evaluate: checkpoint has no classifier head (fine-tune first)");
  }
  const auto records = load_csv(csv_path);
  const ClientMetrics m =
      evaluate_model(model, mc, records, vocab, cfg.batch_or(64));
  out << metrics_json(m).dump() << "\n";
  return m;
}

void cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  if (run_dirs.empty()) throw InputError("report: at least one run directory is required");
  struct RunSeries {
    std::string label;
    // round -> per-client metrics
    std::map<int, std::vector<ClientMetrics>> rounds;
  };
  std::vector<RunSeries> runs;
  for (const auto& dir : run_dirs) {
    const std::string reports = (fs::path(dir) / "reports.jsonl").string();
    if (!fs::exists(reports)) {
      throw InputError("report: run directory '" + dir + "' is missing: reports.jsonl");
    }
    RunSeries series;
    series.label = fs::path(dir).filename().string();
    if (series.label.empty()) series.label = dir;
    std::ifstream in(reports);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw InputError("report: " + reports + " line " + std::to_string(lineno) + ": " +
                         e.what());
      }
      ClientMetrics m;
      try {
        m.acc = std::stod(j.at("acc").get<std::string>());
        m.tpr = std::stod(j.at("tpr").get<std::string>());
        m.fpr = std::stod(j.at("fpr").get<std::string>());
        m.f1 = std::stod(j.at("f1").get<std::string>());
        m.auc = std::stod(j.at("auc").get<std::string>());
        m.loss = std::stod(j.at("loss").get<std::string>());
        series.rounds[j.at("round").get<int>()].push_back(m);
      } catch (const nlohmann::json::exception& e) {
        throw InputError("report: " + reports + " line " + std::to_string(lineno) + ": " +
                         e.what());
      }
    }
    if (series.rounds.empty()) {
      throw InputError("report: run directory '" + dir + "' has an empty reports.jsonl");
    }
    runs.push_back(std::move(series));
  }

  fs::create_directories(out_dir);
  std::ostringstream curve;
  curve << "round,run,acc,tpr,fpr,f1,auc\n";
  for (const auto& run : runs) {
    for (const auto& [round, client_metrics] : run.rounds) {
      const ClientMetrics mean = aggregate_clients(client_metrics);
      curve << round << "," << run.label << "," << format_double(mean.acc) << ","
            << format_double(mean.tpr) << "," << format_double(mean.fpr) << ","
            << format_double(mean.f1) << "," << format_double(mean.auc) << "\n";
    }
  }
  write_file((fs::path(out_dir) / "accuracy_vs_round.csv").string(), curve.str());

  std::ostringstream summary;
  summary << "run,acc,tpr,fpr,f1,auc\n";
  for (const auto& run : runs) {
    const ClientMetrics mean = aggregate_clients(run.rounds.rbegin()->second);
    summary << run.label << "," << format_double(mean.acc) << "," << format_double(mean.tpr)
            << "," << format_double(mean.fpr) << "," << format_double(mean.f1) << ","
            << format_double(mean.auc) << "\n";
  }
  write_file((fs::path(out_dir) / "summary.csv").string(), summary.str());
}

}  // namespace fedsplit
