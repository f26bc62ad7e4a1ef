#pragma once

// Configuration files, metrics stream, dataset/checkpoint orchestration, and
// the export surfaces behind the CLI. Everything the CLI does is callable
// from here so tests can drive the same code paths.

#include <cstdint>
#include <string>
#include <vector>

#include "tpskg/checkpoint.hpp"
#include "tpskg/dataset.hpp"
#include "tpskg/train.hpp"

namespace tpskg {

/// Flat key-value run configuration (JSON syntax). Every key is explicit;
/// unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticDatasetSpec data;
  std::string data_dir;       // empty = generate the dataset in memory
  int checkpoint_every = 10;  // epochs between intermediate checkpoints

  void validate() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Canonical serialization: alphabetical keys, round-trip-exact numbers.
/// parse(serialize(c)) == c.
std::string serialize_run_config(const RunConfig& cfg);

uint64_t run_config_hash(const RunConfig& cfg);
uint64_t dataset_hash(const SyntheticDatasetSpec& spec);
std::string hex_u64(uint64_t v);

/// One line-delimited metrics record.
std::string metrics_line(const EpochMetrics& m, double wall_ms, uint64_t config_hash);

// --------------------------------------------------------------------------
// Dataset files: per split, a manifest.json plus a little-endian float32
// pixel blob.
// --------------------------------------------------------------------------

void save_dataset(const std::string& dir, const SyntheticDataset& ds);
ImageSet load_image_set(const std::string& dir);
SyntheticDataset load_dataset(const std::string& dir, const SyntheticDatasetSpec& spec);

// --------------------------------------------------------------------------
// Plain-text exports.
// --------------------------------------------------------------------------

std::string csv_from_doubles(const std::vector<double>& v, int rows, int cols);
std::string csv_from_counts(const std::vector<int64_t>& v, int rows, int cols);

/// ASCII portable graymap of the values linearly rescaled to 0..255
/// (min -> 0, max -> 255; constant input -> all zeros).
std::string pgm_from_values(const std::vector<double>& v, int rows, int cols);

// --------------------------------------------------------------------------
// Command implementations. The CLI maps thrown ConfigError/IoError to exit
// code 2 and TrainAbort to exit code 3.
// --------------------------------------------------------------------------

struct RunResult {
  int64_t epochs_completed = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::string mode;
  std::string final_checkpoint;
};

RunResult run_training(const RunConfig& cfg, const std::string& out_dir,
                       const std::string& resume_path = "");

struct EvalResult {
  double accuracy = 0.0;
  int classes = 0;
  std::vector<int64_t> confusion;  // classes x classes, rows = ground truth
};

EvalResult run_eval(const std::string& ckpt_path, const std::string& split,
                    const std::string& out_csv);

void run_export_attn(const std::string& ckpt_path, int image_index, const std::string& out_dir);

/// Writes the knowledge embeddings plus a per-class sample of image
/// representations; returns the knowledge-argmax accuracy over the sampled
/// rows (recomputable offline from the file alone).
double run_export_embeddings(const std::string& ckpt_path, const std::string& out_file);

void run_gen_data(const std::string& config_path, const std::string& out_dir);

}  // namespace tpskg
