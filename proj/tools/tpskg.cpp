// tpskg command-line tool: train / eval / export-attn / export-embeddings /
// gen-data. Exit codes: 0 success, 2 bad config or input, 3 training abort on
// non-finite loss, 1 anything else.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "tpskg/io.hpp"

namespace {

int dispatch(const std::function<int()>& body) {
  try {
    return body();
  } catch (const tpskg::TrainAbort& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return 3;
  } catch (const tpskg::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const tpskg::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const tpskg::IndexError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision transformer with attention-peak suppression and knowledge guidance"};
  app.require_subcommand(1);

  std::string config_path, out_dir, resume_path, ckpt_path, split = "test", out_file;
  int image_index = 0;

  CLI::App* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config_path, "Run config file (JSON)")->required();
  train->add_option("--out", out_dir, "Output directory for metrics and checkpoints")->required();
  train->add_option("--resume", resume_path, "Checkpoint to resume from");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write a confusion matrix");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--split", split, "Dataset split: train or test")->required();
  eval->add_option("--out", out_file, "Confusion matrix CSV path (default confusion_<split>.csv)");

  CLI::App* exattn = app.add_subcommand("export-attn", "Export attention matrices, rollout, patch map and mask");
  exattn->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  exattn->add_option("--image", image_index, "Training image index")->required();
  exattn->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* exemb = app.add_subcommand("export-embeddings", "Export knowledge embeddings and sample representations");
  exemb->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  exemb->add_option("--out", out_file, "Output CSV file")->required();

  CLI::App* gendata = app.add_subcommand("gen-data", "Generate the synthetic dataset to disk");
  gendata->add_option("--spec", config_path, "Run config file with the dataset spec")->required();
  gendata->add_option("--out", out_dir, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    return dispatch([&] {
      tpskg::RunConfig cfg = tpskg::load_run_config(config_path);
      tpskg::RunResult res = tpskg::run_training(cfg, out_dir, resume_path);
      std::printf("mode=%s epochs=%lld train_acc=%.4f test_acc=%.4f\n", res.mode.c_str(),
                  static_cast<long long>(res.epochs_completed), res.train_acc, res.test_acc);
      std::printf("final checkpoint: %s\n", res.final_checkpoint.c_str());
      return 0;
    });
  }
  if (eval->parsed()) {
    return dispatch([&] {
      std::string csv = out_file.empty() ? "confusion_" + split + ".csv" : out_file;
      tpskg::EvalResult res = tpskg::run_eval(ckpt_path, split, csv);
      std::printf("top-1 accuracy (%s): %.4f\n", split.c_str(), res.accuracy);
      std::printf("confusion matrix: %s\n", csv.c_str());
      return 0;
    });
  }
  if (exattn->parsed()) {
    return dispatch([&] {
      tpskg::run_export_attn(ckpt_path, image_index, out_dir);
      std::printf("attention exports written to %s\n", out_dir.c_str());
      return 0;
    });
  }
  if (exemb->parsed()) {
    return dispatch([&] {
      double acc = tpskg::run_export_embeddings(ckpt_path, out_file);
      std::printf("embeddings written to %s (knowledge-argmax accuracy %.4f)\n", out_file.c_str(), acc);
      return 0;
    });
  }
  if (gendata->parsed()) {
    return dispatch([&] {
      tpskg::run_gen_data(config_path, out_dir);
      std::printf("dataset written to %s\n", out_dir.c_str());
      return 0;
    });
  }
  return 1;
}
