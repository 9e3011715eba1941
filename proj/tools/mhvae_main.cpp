#include <cstdlib>
#include <fstream>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "mhvae/config.hpp"
#include "mhvae/data.hpp"
#include "mhvae/errors.hpp"
#include "mhvae/metrics.hpp"
#include "mhvae/trainer.hpp"

namespace fs = std::filesystem;

namespace {

std::string default_out(const std::string& given, const std::string& suffix) {
  if (!given.empty()) return given;
  const char* root = std::getenv("MHVAE_OUT_ROOT");
  if (root && *root) {
    return (fs::path(root) / suffix).string();
  }
  throw mhvae::ConfigError("--out not given and MHVAE_OUT_ROOT is not set");
}

int run_gen_data(int64_t count, uint64_t seed, int64_t size, const std::string& out,
                 const std::string& split) {
  if (count < 1) throw mhvae::ConfigError("count must be >= 1");
  if (size < 16 || (size & (size - 1)) != 0) {
    throw mhvae::ConfigError("size must be a power of two >= 16");
  }
  mhvae::SyntheticOptions options;
  options.count = count;
  options.seed = seed;
  options.height = size;
  options.width = size;
  options.split = split;
  auto out_dir = default_out(out, "dataset");
  mhvae::generate_synthetic(options, out_dir);
  std::cout << (fs::path(out_dir) / "manifest.json").string() << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& ablation, const std::string& resume_from,
              int64_t resume_epochs) {
  if (!resume_from.empty()) {
    auto rc = mhvae::load_run_config(config_path, overrides, ablation);
    auto result = mhvae::resume(resume_from, resume_epochs, rc.train.hierarchy);
    std::cout << result.checkpoint_path << "\n";
    return 0;
  }
  auto rc = mhvae::load_run_config(config_path, overrides, ablation);
  auto result = mhvae::train(rc.train);
  std::cout << result.checkpoint_path << "\n" << result.loss_csv_path << "\n";
  return 0;
}

int run_synthesize(const std::string& checkpoint, const std::vector<std::string>& inputs,
                   const std::string& target, const std::string& out) {
  std::map<std::string, std::string> by_modality;
  for (const auto& spec : inputs) {
    auto eq = spec.find('=');
    if (eq == std::string::npos) {
      throw mhvae::ConfigError("--input expects <modality>=<png path>, got '" + spec + "'");
    }
    by_modality[spec.substr(0, eq)] = spec.substr(eq + 1);
  }
  if (by_modality.empty()) {
    throw mhvae::ConfigError(
        "no input images: an empty presence mask cannot condition synthesis; "
        "use the sample command for prior generation");
  }
  auto out_png = default_out(out, "synthesis.png");
  mhvae::synthesize(checkpoint, by_modality, target, out_png);
  std::cout << out_png << "\n";
  return 0;
}

int run_sample(const std::string& checkpoint, uint64_t seed, const std::string& out) {
  auto out_dir = default_out(out, "samples");
  for (const auto& path : mhvae::sample_prior(checkpoint, seed, out_dir)) {
    std::cout << path << "\n";
  }
  return 0;
}

int run_evaluate(const std::string& checkpoint, const std::string& manifest,
                 const std::string& out) {
  auto out_dir = default_out(out, "eval");
  auto ck = mhvae::load_checkpoint(checkpoint);
  ck.model->eval();
  auto test_set = mhvae::load_dataset(manifest);
  auto subsets = mhvae::enumerate_subsets(test_set.num_modalities());
  auto report = mhvae::evaluate(*ck.model, test_set, subsets);
  fs::create_directories(out_dir);
  auto per_sample = (fs::path(out_dir) / "metrics_per_sample.csv").string();
  auto summary = (fs::path(out_dir) / "metrics_summary.csv").string();
  mhvae::write_metric_csvs(report, per_sample, summary);
  std::cout << per_sample << "\n" << summary << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(std::max(1u, std::thread::hardware_concurrency()));

  CLI::App app{"Hierarchical multi-modal image synthesis"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic paired-modality dataset");
  int64_t count = 512, size = 64;
  uint64_t gen_seed = 7;
  std::string gen_out, split = "train";
  gen->add_option("--count", count, "Number of paired samples")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen->add_option("--size", size, "Image size (power of two >= 16)")->capture_default_str();
  gen->add_option("--out", gen_out, "Output dataset directory");
  gen->add_option("--split", split, "Split tag baked into sample ids")->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "Train from a JSON run configuration");
  std::string config_path, ablation, resume_from;
  std::vector<std::string> overrides;
  int64_t resume_epochs = 1;
  train_cmd->add_option("--config", config_path, "Run configuration file")->required();
  train_cmd->add_option("--set", overrides, "Override a config key, e.g. --set train.epochs=2");
  train_cmd->add_option("--ablation", ablation, "mvae (single latent level) or no-gan")
      ->capture_default_str();
  train_cmd->add_option("--resume", resume_from, "Continue from this checkpoint");
  train_cmd->add_option("--epochs", resume_epochs, "Epochs to run when resuming")
      ->capture_default_str();

  auto* synth = app.add_subcommand("synthesize", "Synthesize a modality from available images");
  std::string ckpt, target, synth_out;
  std::vector<std::string> inputs;
  synth->add_option("--checkpoint", ckpt, "Trained checkpoint")->required();
  synth->add_option("--input", inputs, "Available image as <modality>=<png>");
  synth->add_option("--target", target, "Modality to synthesize")->required();
  synth->add_option("--out", synth_out, "Output PNG path");

  auto* sample = app.add_subcommand("sample", "Generate from the prior chain (no inputs)");
  std::string sample_ckpt, sample_out;
  uint64_t sample_seed = 1;
  sample->add_option("--checkpoint", sample_ckpt, "Trained checkpoint")->required();
  sample->add_option("--seed", sample_seed, "Sampling seed")->capture_default_str();
  sample->add_option("--out", sample_out, "Output directory");

  auto* eval_cmd = app.add_subcommand("evaluate", "Run subset/target metrics over a test set");
  std::string eval_ckpt, eval_manifest, eval_out;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Trained checkpoint")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "Test manifest")->required();
  eval_cmd->add_option("--out", eval_out, "Output directory for CSV reports");

  auto* init_cfg = app.add_subcommand("init-config", "Write a default run configuration");
  std::string init_out;
  init_cfg->add_option("--out", init_out, "Destination JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(count, gen_seed, size, gen_out, split);
    if (train_cmd->parsed()) {
      return run_train(config_path, overrides, ablation, resume_from, resume_epochs);
    }
    if (synth->parsed()) return run_synthesize(ckpt, inputs, target, synth_out);
    if (sample->parsed()) return run_sample(sample_ckpt, sample_seed, sample_out);
    if (eval_cmd->parsed()) return run_evaluate(eval_ckpt, eval_manifest, eval_out);
    if (init_cfg->parsed()) {
      std::ofstream out(init_out);
      if (!out) throw mhvae::IoError("cannot write " + init_out);
      out << mhvae::default_run_config_json();
      std::cout << init_out << "\n";
      return 0;
    }
  } catch (const mhvae::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
