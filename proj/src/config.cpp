#include "fedsplit/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "fedsplit/errors.hpp"

namespace fedsplit {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    int v = std::stoi(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + value + "'");
  }
}

bool parse_switch(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  throw ConfigError("config: '" + key + "' expects on|off, got '" + value + "'");
}

}  // namespace

FreezeMask parse_freeze(const ModelConfig& mc, const std::string& spec);

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (key == "model.preset") {
    model_preset = value;
  } else if (key == "model.max_len") {
    model_max_len = parse_int(key, value);
  } else if (key == "data.source") {
    data_source = value;
  } else if (key == "data.n") {
    data_n = parse_int(key, value);
  } else if (key == "data.p") {
    data_p = parse_double(key, value);
  } else if (key == "data.test_fraction") {
    data_test_fraction = parse_double(key, value);
  } else if (key == "data.scenario") {
    data_scenario = value;
  } else if (key == "data.alpha") {
    data_alpha = parse_double(key, value);
  } else if (key == "fed.clients") {
    fed_clients = parse_int(key, value);
  } else if (key == "fed.fraction") {
    fed_fraction = parse_double(key, value);
  } else if (key == "fed.local_epochs") {
    fed_local_epochs = parse_int(key, value);
  } else if (key == "fed.rounds") {
    fed_rounds = parse_int(key, value);
  } else if (key == "fed.ala") {
    fed_ala = parse_switch(key, value);
  } else if (key == "fed.ala.lr") {
    ala.lr = static_cast<float>(parse_double(key, value));
  } else if (key == "fed.ala.window") {
    ala.window = parse_int(key, value);
  } else if (key == "fed.ala.tau") {
    ala.tau = parse_double(key, value);
  } else if (key == "fed.ala.fraction") {
    ala.data_fraction = parse_double(key, value);
  } else if (key == "fed.ala.cap") {
    ala.cap = parse_int(key, value);
  } else if (key == "train.batch") {
    train_batch = parse_int(key, value);
  } else if (key == "train.lr") {
    train_lr = parse_double(key, value);
  } else if (key == "freeze.layers") {
    freeze_layers = value;
  } else if (key == "transport") {
    transport = value;
  } else if (key == "seed") {
    seed = parse_u64(key, value);
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("config: cannot open '" + path + "'");
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: '" + path + "' line " + std::to_string(lineno) +
                        ": expected key=value");
    }
    cfg.set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

void ExperimentConfig::apply_overrides(const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("config: override '" + kv + "' is not key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
}

void ExperimentConfig::validate() const {
  model_config().validate();  // checks preset + max_len
  if (data_source == "synth") {
    if (data_n <= 0) throw ConfigError("config: data.n must be positive");
    if (!(data_p >= 0.0 && data_p <= 1.0)) throw ConfigError("config: data.p must be in [0, 1]");
  }
  if (!(data_test_fraction > 0.0 && data_test_fraction < 1.0)) {
    throw ConfigError("config: data.test_fraction must be in (0, 1)");
  }
  scenario_from_string(data_scenario);
  if (data_alpha <= 0.0) throw ConfigError("config: data.alpha must be positive");
  if (fed_clients <= 0) throw ConfigError("config: fed.clients must be positive");
  if (!(fed_fraction > 0.0) || fed_fraction > 1.0) {
    throw ConfigError("config: fed.fraction must be in (0, 1]");
  }
  if (fed_local_epochs <= 0) throw ConfigError("config: fed.local_epochs must be positive");
  if (fed_rounds < 0) throw ConfigError("config: fed.rounds must be non-negative");
  if (!(ala.lr > 0.0f)) throw ConfigError("config: fed.ala.lr must be positive");
  if (ala.window <= 0) throw ConfigError("config: fed.ala.window must be positive");
  if (!(ala.tau > 0.0)) throw ConfigError("config: fed.ala.tau must be positive");
  if (!(ala.data_fraction > 0.0 && ala.data_fraction <= 1.0)) {
    throw ConfigError("config: fed.ala.fraction must be in (0, 1]");
  }
  if (ala.cap <= 0) throw ConfigError("config: fed.ala.cap must be positive");
  if (train_batch < 0) throw ConfigError("config: train.batch must be positive");
  if (train_lr < 0.0) throw ConfigError("config: train.lr must be positive");
  if (transport != "inproc" && transport != "socket") {
    throw ConfigError("config: transport must be inproc|socket");
  }
  parse_freeze(model_config(), freeze_layers);  // validates freeze.layers syntax and range
}

std::map<std::string, std::string> ExperimentConfig::resolved() const {
  std::map<std::string, std::string> out;
  out["model.preset"] = model_preset;
  out["model.max_len"] = std::to_string(model_config().max_len);
  out["data.source"] = data_source;
  out["data.n"] = std::to_string(data_n);
  out["data.p"] = format_double(data_p);
  out["data.test_fraction"] = format_double(data_test_fraction);
  out["data.scenario"] = data_scenario;
  out["data.alpha"] = format_double(data_alpha);
  out["fed.clients"] = std::to_string(fed_clients);
  out["fed.fraction"] = format_double(fed_fraction);
  out["fed.local_epochs"] = std::to_string(fed_local_epochs);
  out["fed.rounds"] = std::to_string(fed_rounds);
  out["fed.ala"] = fed_ala ? "on" : "off";
  out["fed.ala.lr"] = format_double(static_cast<double>(ala.lr));
  out["fed.ala.window"] = std::to_string(ala.window);
  out["fed.ala.tau"] = format_double(ala.tau);
  out["fed.ala.fraction"] = format_double(ala.data_fraction);
  out["fed.ala.cap"] = std::to_string(ala.cap);
  out["train.batch"] = std::to_string(train_batch);
  out["train.lr"] = format_double(train_lr);
  out["freeze.layers"] = freeze_layers;
  out["transport"] = transport;
  out["seed"] = std::to_string(seed);
  return out;
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig mc = ModelConfig::preset(model_preset);
  if (model_max_len > 0) mc.max_len = model_max_len;
  mc.seed = seed;
  return mc;
}

ScenarioSpec ExperimentConfig::scenario_spec() const {
  ScenarioSpec spec;
  spec.kind = scenario_from_string(data_scenario);
  spec.alpha = data_alpha;
  spec.clients = fed_clients;
  spec.seed = seed;
  return spec;
}

TransportKind ExperimentConfig::transport_kind() const {
  if (transport == "inproc") return TransportKind::Inproc;
  if (transport == "socket") return TransportKind::Socket;
  throw ConfigError("config: transport must be inproc|socket");
}

FreezeMask parse_freeze(const ModelConfig& mc, const std::string& spec) {
  if (spec == "none" || spec.empty()) return FreezeMask::none();
  if (spec == "all-encoder") return FreezeMask::encoder_layers(mc, 0, mc.num_layers - 1);
  const size_t dash = spec.find('-');
  if (dash == std::string::npos) {
    const int layer = parse_int("freeze.layers", spec);
    return FreezeMask::encoder_layers(mc, layer, layer);
  }
  const int lo = parse_int("freeze.layers", spec.substr(0, dash));
  const int hi = parse_int("freeze.layers", spec.substr(dash + 1));
  return FreezeMask::encoder_layers(mc, lo, hi);
}

FreezeMask ExperimentConfig::freeze_mask(const NamedTensors& params) const {
  FreezeMask mask = parse_freeze(model_config(), freeze_layers);
  mask.validate(params);
  return mask;
}

int ExperimentConfig::batch_or(int command_default) const {
  return train_batch > 0 ? train_batch : command_default;
}

float ExperimentConfig::lr_or(float command_default) const {
  return train_lr > 0.0 ? static_cast<float>(train_lr) : command_default;
}

}  // namespace fedsplit
