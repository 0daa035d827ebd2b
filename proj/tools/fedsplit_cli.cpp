#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "fedsplit/errors.hpp"
#include "fedsplit/experiment.hpp"

namespace {

// Exit codes: 0 success, 2 config error, 3 input error, 4 protocol/session error.
constexpr int kConfigExit = 2;
constexpr int kInputExit = 3;
constexpr int kProtocolExit = 4;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;

  fedsplit::ExperimentConfig resolve() const {
    fedsplit::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = fedsplit::ExperimentConfig::from_file(config_path);
    cfg.apply_overrides(overrides);
    return cfg;
  }
};

void add_common(CLI::App* cmd, CommonOpts& common) {
  cmd->add_option("--config", common.config_path, "key=value config file");
  cmd->add_option("--set", common.overrides, "override a config key, e.g. --set fed.rounds=10");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated split-learning URL classifier"};
  app.require_subcommand(1);

  CommonOpts common;
  std::string out_dir, out_path, shards_dir, vocab_path, checkpoint_path, data_path;
  std::vector<std::string> run_dirs;

  CLI::App* partition = app.add_subcommand("partition", "Write per-client data shards");
  add_common(partition, common);
  partition->add_option("--out", out_dir, "output directory")->required();

  CLI::App* build_vocab = app.add_subcommand("build-vocab", "Build the n-gram vocabulary");
  add_common(build_vocab, common);
  build_vocab->add_option("--out", out_path, "output vocabulary file")->required();

  CLI::App* pretrain = app.add_subcommand("pretrain", "Split MLM pre-training");
  add_common(pretrain, common);
  pretrain->add_option("--shards", shards_dir, "shard directory")->required();
  pretrain->add_option("--vocab", vocab_path, "vocabulary file")->required();
  pretrain->add_option("--out", out_dir, "output directory")->required();

  CLI::App* finetune = app.add_subcommand("finetune", "Federated fine-tuning");
  add_common(finetune, common);
  finetune->add_option("--checkpoint", checkpoint_path, "pre-trained checkpoint")->required();
  finetune->add_option("--shards", shards_dir, "shard directory")->required();
  finetune->add_option("--vocab", vocab_path, "vocabulary file")->required();
  finetune->add_option("--out", out_dir, "output directory")->required();

  CLI::App* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a CSV");
  add_common(evaluate, common);
  evaluate->add_option("--checkpoint", checkpoint_path, "fine-tuned checkpoint")->required();
  evaluate->add_option("--vocab", vocab_path, "vocabulary file")->required();
  evaluate->add_option("--data", data_path, "labeled url,label CSV")->required();

  CLI::App* report = app.add_subcommand("report", "Compare completed runs");
  report->add_option("--out", out_dir, "output directory")->required();
  report->add_option("runs", run_dirs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    if (partition->parsed()) {
      fedsplit::cmd_partition(common.resolve(), out_dir);
    } else if (build_vocab->parsed()) {
      fedsplit::cmd_build_vocab(common.resolve(), out_path);
    } else if (pretrain->parsed()) {
      fedsplit::cmd_pretrain(common.resolve(), shards_dir, vocab_path, out_dir);
    } else if (finetune->parsed()) {
      fedsplit::cmd_finetune(common.resolve(), checkpoint_path, shards_dir, vocab_path, out_dir);
    } else if (evaluate->parsed()) {
      fedsplit::cmd_evaluate(common.resolve(), checkpoint_path, vocab_path, data_path, std::cout);
    } else if (report->parsed()) {
      fedsplit::cmd_report(run_dirs, out_dir);
    }
  } catch (const fedsplit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const fedsplit::ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return kProtocolExit;
  } catch (const fedsplit::SessionError& e) {
    std::cerr << "session error: " << e.what() << "\n";
    return kProtocolExit;
  } catch (const fedsplit::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInputExit;
  } catch (const fedsplit::DimensionError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInputExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
