#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedsplit/federation.hpp"

namespace fedsplit {

// Dotted key=value experiment configuration. Unknown keys are rejected;
// every run writes the fully resolved key set beside its outputs.
struct ExperimentConfig {
  std::string model_preset = "tiny";
  int model_max_len = 0;  // 0 = preset default

  std::string data_source = "synth";  // "synth" or a CSV path
  int data_n = 1000;                  // synthetic corpus size
  double data_p = 0.9;                // synthetic planted-signal strength
  double data_test_fraction = 0.2;
  std::string data_scenario = "iid";  // iid | noniid2 | noniid3
  double data_alpha = 0.7;

  int fed_clients = 10;
  double fed_fraction = 0.5;
  int fed_local_epochs = 5;
  int fed_rounds = 30;
  bool fed_ala = false;
  AlaConfig ala;

  int train_batch = 0;    // 0 = command default (pretrain 64, finetune 32)
  double train_lr = 0.0;  // 0 = command default (pretrain 5e-5, finetune 2e-6)

  std::string freeze_layers = "none";  // none | all-encoder | lo-hi
  std::string transport = "inproc";    // inproc | socket
  uint64_t seed = 0;

  // key=value text file; '#' comments and blank lines allowed.
  static ExperimentConfig from_file(const std::string& path);
  // Command-line overrides, each "key=value"; applied on top of *this.
  void apply_overrides(const std::vector<std::string>& overrides);
  void set(const std::string& key, const std::string& value);
  void validate() const;

  // Canonically ordered fully resolved key set.
  std::map<std::string, std::string> resolved() const;

  // Derived views.
  ModelConfig model_config() const;
  ScenarioSpec scenario_spec() const;
  TransportKind transport_kind() const;
  // Freeze mask over a full parameter set, resolved against the model config.
  FreezeMask freeze_mask(const NamedTensors& params) const;
  int batch_or(int command_default) const;
  float lr_or(float command_default) const;
};

std::string format_double(double v);  // deterministic %.9g

}  // namespace fedsplit
