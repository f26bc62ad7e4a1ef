#include "tpskg/io.hpp"

#include <bit>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>

#include <json.hpp>

#include "tpskg/fileio.hpp"
#include "tpskg/rollout.hpp"
#include "tpskg/suppression.hpp"

namespace tpskg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (data.canvas != model.image_h || data.canvas != model.image_w)
    throw ConfigError("canvas must equal image_h and image_w");
  if (model.channels != 1) throw ConfigError("channels must be 1 for the synthetic dataset");
  if (data.classes != model.classes) throw ConfigError("classes is shared between model and dataset");
  if (data.glyph != model.patch) throw ConfigError("glyph size is defined as patch");
  if (train.top_k >= model.patches()) throw ConfigError("top_k must be smaller than the patch count");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be at least 1");
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "batch",      "canvas",         "channels",  "checkpoint_every", "classes",
      "data_dir",   "data_seed",      "embed_dim", "epochs",           "heads",
      "image_h",    "image_w",        "jitter",    "layers",           "lr0",
      "mlp_ratio",  "mode",           "model_seed", "momentum",        "mu",
      "noise_std",  "patch",          "precision", "test_per_class",   "top_k",
      "train_per_class", "train_seed"};
  return keys;
}

class ConfigReader {
 public:
  explicit ConfigReader(const json& j) : j_(j) {}

  int geti(const char* key) {
    const json& v = at(key);
    if (!v.is_number_integer()) throw ConfigError(std::string("config key '") + key + "' must be an integer");
    return v.get<int>();
  }
  uint64_t getu64(const char* key) {
    const json& v = at(key);
    if (!v.is_number_integer() && !v.is_number_unsigned())
      throw ConfigError(std::string("config key '") + key + "' must be an integer");
    return v.get<uint64_t>();
  }
  double getd(const char* key) {
    const json& v = at(key);
    if (!v.is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
    return v.get<double>();
  }
  std::string gets(const char* key) {
    const json& v = at(key);
    if (!v.is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
    return v.get<std::string>();
  }

 private:
  const json& at(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) throw ConfigError(std::string("config key '") + key + "' is missing");
    return *it;
  }
  const json& j_;
};

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object");
  for (const auto& [key, value] : j.items()) {
    if (known_keys().count(key) == 0) throw ConfigError("unknown config key '" + key + "'");
  }

  ConfigReader r(j);
  RunConfig cfg;
  cfg.model.image_h = r.geti("image_h");
  cfg.model.image_w = r.geti("image_w");
  cfg.model.channels = r.geti("channels");
  cfg.model.patch = r.geti("patch");
  cfg.model.embed_dim = r.geti("embed_dim");
  cfg.model.layers = r.geti("layers");
  cfg.model.heads = r.geti("heads");
  cfg.model.mlp_ratio = r.getd("mlp_ratio");
  cfg.model.classes = r.geti("classes");
  cfg.model.seed = r.getu64("model_seed");

  cfg.train.lr0 = r.getd("lr0");
  cfg.train.momentum = r.getd("momentum");
  cfg.train.batch = r.geti("batch");
  cfg.train.epochs = r.geti("epochs");
  cfg.train.mu = r.getd("mu");
  cfg.train.seed = r.getu64("train_seed");
  cfg.train.mode = train_mode_from_string(r.gets("mode"));
  cfg.train.precision = r.geti("precision");
  cfg.train.top_k = r.geti("top_k");

  cfg.data.classes = cfg.model.classes;
  cfg.data.train_per_class = r.geti("train_per_class");
  cfg.data.test_per_class = r.geti("test_per_class");
  cfg.data.canvas = r.geti("canvas");
  cfg.data.glyph = cfg.model.patch;
  cfg.data.jitter = r.geti("jitter");
  cfg.data.noise_std = r.getd("noise_std");
  cfg.data.seed = r.getu64("data_seed");

  cfg.data_dir = r.gets("data_dir");
  cfg.checkpoint_every = r.geti("checkpoint_every");

  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path)); }

std::string serialize_run_config(const RunConfig& cfg) {
  json j;
  j["image_h"] = cfg.model.image_h;
  j["image_w"] = cfg.model.image_w;
  j["channels"] = cfg.model.channels;
  j["patch"] = cfg.model.patch;
  j["embed_dim"] = cfg.model.embed_dim;
  j["layers"] = cfg.model.layers;
  j["heads"] = cfg.model.heads;
  j["mlp_ratio"] = cfg.model.mlp_ratio;
  j["classes"] = cfg.model.classes;
  j["model_seed"] = cfg.model.seed;
  j["lr0"] = cfg.train.lr0;
  j["momentum"] = cfg.train.momentum;
  j["batch"] = cfg.train.batch;
  j["epochs"] = cfg.train.epochs;
  j["mu"] = cfg.train.mu;
  j["train_seed"] = cfg.train.seed;
  j["mode"] = to_string(cfg.train.mode);
  j["precision"] = cfg.train.precision;
  j["top_k"] = cfg.train.top_k;
  j["train_per_class"] = cfg.data.train_per_class;
  j["test_per_class"] = cfg.data.test_per_class;
  j["canvas"] = cfg.data.canvas;
  j["jitter"] = cfg.data.jitter;
  j["noise_std"] = cfg.data.noise_std;
  j["data_seed"] = cfg.data.seed;
  j["data_dir"] = cfg.data_dir;
  j["checkpoint_every"] = cfg.checkpoint_every;
  return j.dump(2) + "\n";
}

uint64_t run_config_hash(const RunConfig& cfg) { return fnv1a64(serialize_run_config(cfg)); }

uint64_t dataset_hash(const SyntheticDatasetSpec& spec) {
  json j;
  j["canvas"] = spec.canvas;
  j["classes"] = spec.classes;
  j["glyph"] = spec.glyph;
  j["jitter"] = spec.jitter;
  j["noise_std"] = spec.noise_std;
  j["seed"] = spec.seed;
  j["test_per_class"] = spec.test_per_class;
  j["train_per_class"] = spec.train_per_class;
  return fnv1a64(j.dump());
}

std::string hex_u64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return std::string(buf);
}

std::string metrics_line(const EpochMetrics& m, double wall_ms, uint64_t config_hash) {
  json j;
  j["config_hash"] = hex_u64(config_hash);
  j["epoch"] = m.epoch;
  j["step"] = m.step;
  j["lr"] = m.lr;
  j["loss_total"] = m.loss_total;
  j["loss_kl"] = m.loss_kl;
  j["loss_rep"] = m.loss_rep;
  j["train_acc"] = m.train_acc;
  j["test_acc"] = m.test_acc;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

namespace {

void save_image_set(const std::string& dir, const ImageSet& set, const SyntheticDatasetSpec& spec) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory: " + dir + ": " + ec.message());

  json manifest;
  manifest["format_version"] = 1;
  manifest["dtype"] = "f32";
  manifest["byte_order"] = "little";
  manifest["count"] = set.count();
  manifest["height"] = set.height;
  manifest["width"] = set.width;
  manifest["channels"] = set.channels;
  manifest["labels"] = set.labels;
  manifest["seed"] = spec.seed;
  manifest["dataset_hash"] = hex_u64(dataset_hash(spec));
  atomic_write_file(dir + "/manifest.json", manifest.dump(2) + "\n");

  std::string blob;
  blob.reserve(set.count() * static_cast<size_t>(set.height) * set.width * set.channels * 4);
  for (const auto& img : set.images) {
    for (float v : img) put_u32(blob, std::bit_cast<uint32_t>(v));
  }
  atomic_write_file(dir + "/images.bin", blob);
}

}  // namespace

void save_dataset(const std::string& dir, const SyntheticDataset& ds) {
  save_image_set(dir + "/train", ds.train, ds.spec);
  save_image_set(dir + "/test", ds.test, ds.spec);
}

ImageSet load_image_set(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir + "/manifest.json"));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir + ": " + e.what());
  }
  if (manifest.value("format_version", 0) != 1)
    throw IoError("manifest in " + dir + " has unsupported format_version");
  if (manifest.value("dtype", "") != "f32") throw IoError("manifest in " + dir + " has unsupported dtype");

  ImageSet set;
  set.height = manifest.at("height").get<int>();
  set.width = manifest.at("width").get<int>();
  set.channels = manifest.at("channels").get<int>();
  set.labels = manifest.at("labels").get<std::vector<int>>();
  size_t count = manifest.at("count").get<size_t>();
  if (count != set.labels.size()) throw IoError("manifest in " + dir + ": count does not match labels");

  std::string blob = read_file(dir + "/images.bin");
  size_t pixels = static_cast<size_t>(set.height) * set.width * set.channels;
  if (blob.size() != count * pixels * 4)
    throw IoError("images.bin in " + dir + " has unexpected size");
  ByteReader r(blob, "images.bin in " + dir);
  set.images.resize(count);
  for (size_t i = 0; i < count; ++i) {
    auto& img = set.images[i];
    img.resize(pixels);
    for (size_t p = 0; p < pixels; ++p) img[p] = std::bit_cast<float>(r.u32());
  }
  return set;
}

SyntheticDataset load_dataset(const std::string& dir, const SyntheticDatasetSpec& spec) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir + "/train/manifest.json"));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir + "/train: " + e.what());
  }
  std::string want = hex_u64(dataset_hash(spec));
  std::string got = manifest.value("dataset_hash", "");
  if (got != want)
    throw ConfigError("dataset in " + dir + " was generated from a different spec (hash " + got +
                      ", config expects " + want + ")");
  SyntheticDataset ds;
  ds.spec = spec;
  ds.train = load_image_set(dir + "/train");
  ds.test = load_image_set(dir + "/test");
  for (const ImageSet* set : {&ds.train, &ds.test}) {
    if (set->height != spec.canvas || set->width != spec.canvas || set->channels != 1)
      throw ConfigError("dataset in " + dir + " does not match the configured canvas");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Text exports
// ---------------------------------------------------------------------------

std::string csv_from_doubles(const std::vector<double>& v, int rows, int cols) {
  std::string out;
  char buf[32];
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", v[static_cast<size_t>(r) * cols + c]);
      out += buf;
      out += (c + 1 < cols) ? ',' : '\n';
    }
  }
  return out;
}

std::string csv_from_counts(const std::vector<int64_t>& v, int rows, int cols) {
  std::string out;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      out += std::to_string(v[static_cast<size_t>(r) * cols + c]);
      out += (c + 1 < cols) ? ',' : '\n';
    }
  }
  return out;
}

std::string pgm_from_values(const std::vector<double>& v, int rows, int cols) {
  double lo = v[0], hi = v[0];
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::string out = "P2\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      int g = static_cast<int>(std::lround((v[static_cast<size_t>(r) * cols + c] - lo) * scale));
      out += std::to_string(g);
      out += (c + 1 < cols) ? ' ' : '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training runner
// ---------------------------------------------------------------------------

namespace {

std::string ckpt_name(int64_t epoch) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "ckpt_epoch_%04" PRId64 ".bin", epoch);
  return buf;
}

template <typename S>
RunResult run_training_impl(const RunConfig& cfg, const std::string& out_dir,
                            const std::string& resume_path) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir + ": " + ec.message());

  std::string config_text = serialize_run_config(cfg);
  uint64_t hash = fnv1a64(config_text);

  SyntheticDataset data =
      cfg.data_dir.empty() ? generate_dataset(cfg.data) : load_dataset(cfg.data_dir, cfg.data);
  TrainState<S> st = TrainState<S>::init(cfg.model, cfg.train, data);

  if (!resume_path.empty()) {
    CheckpointFile ck = read_checkpoint(resume_path);
    if (ck.config_hash != hash)
      throw ConfigError("resume checkpoint " + resume_path + " was written for config hash " +
                        hex_u64(ck.config_hash) + ", current config hashes to " + hex_u64(hash));
    apply_checkpoint(ck, st);
  }

  std::string metrics_path = out_dir + "/metrics.jsonl";
  std::string metrics_text;
  if (fs::exists(metrics_path)) metrics_text = read_file(metrics_path);

  while (st.epoch < cfg.train.epochs) {
    auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m = train_epoch(st);
    double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics_text += metrics_line(m, wall_ms, hash) + "\n";
    atomic_write_file(metrics_path, metrics_text);
    if (st.epoch % cfg.checkpoint_every == 0 && st.epoch < cfg.train.epochs)
      write_checkpoint(out_dir + "/" + ckpt_name(st.epoch), st, config_text, hash);
  }

  std::string final_path = out_dir + "/ckpt_final.bin";
  write_checkpoint(final_path, st, config_text, hash);

  RunResult result;
  result.epochs_completed = st.epoch;
  result.mode = to_string(cfg.train.mode);
  result.train_acc = evaluate_accuracy(st.model, data.train, cfg.train.mode);
  result.test_acc = evaluate_accuracy(st.model, data.test, cfg.train.mode);
  result.final_checkpoint = final_path;

  json summary;
  summary["config_hash"] = hex_u64(hash);
  summary["mode"] = result.mode;
  summary["epochs"] = result.epochs_completed;
  summary["train_acc"] = result.train_acc;
  summary["test_acc"] = result.test_acc;
  atomic_write_file(out_dir + "/summary.json", summary.dump(2) + "\n");
  return result;
}

/// Rebuilds a training state from a checkpoint. `data` and `state` are
/// outputs owned by the caller so the state's dataset pointer stays valid.
template <typename S>
void restore_run(const CheckpointFile& ck, const RunConfig& cfg, SyntheticDataset& data,
                 std::optional<TrainState<S>>& state) {
  data = cfg.data_dir.empty() ? generate_dataset(cfg.data) : load_dataset(cfg.data_dir, cfg.data);
  state.emplace(TrainState<S>::init(cfg.model, cfg.train, data));
  apply_checkpoint(ck, *state);
}

RunConfig config_from_checkpoint(const CheckpointFile& ck, const std::string& path) {
  RunConfig cfg = parse_run_config(ck.config_text);
  if (run_config_hash(cfg) != ck.config_hash)
    throw ConfigError("checkpoint " + path + ": embedded config does not match its recorded hash");
  return cfg;
}

}  // namespace

RunResult run_training(const RunConfig& cfg, const std::string& out_dir,
                       const std::string& resume_path) {
  cfg.validate();
  if (cfg.train.precision == 64) return run_training_impl<double>(cfg, out_dir, resume_path);
  return run_training_impl<float>(cfg, out_dir, resume_path);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

namespace {

template <typename S>
EvalResult run_eval_impl(const CheckpointFile& ck, const RunConfig& cfg, const std::string& split,
                         const std::string& out_csv) {
  SyntheticDataset data;
  std::optional<TrainState<S>> st;
  restore_run<S>(ck, cfg, data, st);
  const ImageSet& set = split == "train" ? data.train : data.test;
  EvalResult result;
  result.classes = cfg.model.classes;
  result.accuracy = evaluate_accuracy(st->model, set, cfg.train.mode, &result.confusion);
  if (!out_csv.empty())
    atomic_write_file(out_csv, csv_from_counts(result.confusion, result.classes, result.classes));
  return result;
}

}  // namespace

EvalResult run_eval(const std::string& ckpt_path, const std::string& split,
                    const std::string& out_csv) {
  if (split != "train" && split != "test")
    throw ConfigError("split must be 'train' or 'test', got '" + split + "'");
  CheckpointFile ck = read_checkpoint(ckpt_path);
  RunConfig cfg = config_from_checkpoint(ck, ckpt_path);
  if (cfg.train.precision == 64) return run_eval_impl<double>(ck, cfg, split, out_csv);
  return run_eval_impl<float>(ck, cfg, split, out_csv);
}

// ---------------------------------------------------------------------------
// export-attn
// ---------------------------------------------------------------------------

namespace {

template <typename S>
void export_attn_impl(const CheckpointFile& ck, const RunConfig& cfg, int image_index,
                      const std::string& out_dir) {
  SyntheticDataset data;
  std::optional<TrainState<S>> st;
  restore_run<S>(ck, cfg, data, st);
  if (image_index < 0 || static_cast<size_t>(image_index) >= data.train.count())
    throw IndexError("image index " + std::to_string(image_index) + " out of range [0, " +
                     std::to_string(data.train.count()) + ")");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir + ": " + ec.message());

  NoGradScope<S> no_grad;
  Tensor<S> img = image_tensor<S>(data.train.images[static_cast<size_t>(image_index)], cfg.model);
  EncoderOutput<S> out = encode(img, st->model.enc, cfg.model);

  for (int l = 0; l < out.attn.layers; ++l) {
    std::vector<double> avg = average_heads(out.attn, l);
    atomic_write_file(out_dir + "/attn_layer_" + std::to_string(l + 1) + ".csv",
                      csv_from_doubles(avg, out.attn.tokens, out.attn.tokens));
  }
  RolloutMap roll = rollout(out.attn);
  atomic_write_file(out_dir + "/rollout.csv", csv_from_doubles(roll.matrix, roll.tokens, roll.tokens));

  PatchAttentionMap map = class_token_map(roll);
  atomic_write_file(out_dir + "/patch_map.csv",
                    csv_from_doubles(map.values, cfg.model.grid_h(), cfg.model.grid_w()));
  atomic_write_file(out_dir + "/patch_map.pgm",
                    pgm_from_values(map.values, cfg.model.grid_h(), cfg.model.grid_w()));

  SuppressionMask mask = build_mask(map, cfg.train.top_k);
  std::vector<double> bits(mask.bits.size());
  for (size_t i = 0; i < mask.bits.size(); ++i) bits[i] = mask.bits[i];
  atomic_write_file(out_dir + "/mask.csv", csv_from_doubles(bits, 1, static_cast<int>(bits.size())));
}

}  // namespace

void run_export_attn(const std::string& ckpt_path, int image_index, const std::string& out_dir) {
  CheckpointFile ck = read_checkpoint(ckpt_path);
  RunConfig cfg = config_from_checkpoint(ck, ckpt_path);
  if (cfg.train.precision == 64) return export_attn_impl<double>(ck, cfg, image_index, out_dir);
  return export_attn_impl<float>(ck, cfg, image_index, out_dir);
}

// ---------------------------------------------------------------------------
// export-embeddings
// ---------------------------------------------------------------------------

namespace {

constexpr int kEmbeddingSamplePerClass = 8;

template <typename S>
double export_embeddings_impl(const CheckpointFile& ck, const RunConfig& cfg,
                              const std::string& out_file) {
  SyntheticDataset data;
  std::optional<TrainState<S>> st;
  restore_run<S>(ck, cfg, data, st);
  NoGradScope<S> no_grad;

  int digits = cfg.train.precision == 64 ? 17 : 9;
  char buf[32];
  std::string out;
  auto append_row = [&](const std::vector<S>& values, int label) {
    for (S v : values) {
      std::snprintf(buf, sizeof(buf), "%.*g", digits, static_cast<double>(v));
      out += buf;
      out += ',';
    }
    out += std::to_string(label);
    out += '\n';
  };

  const Tensor<S>& k = st->model.knowledge.weights;
  int g = cfg.model.classes, d = cfg.model.embed_dim;
  for (int c = 0; c < g; ++c) {
    std::vector<S> row(k.data().begin() + static_cast<size_t>(c) * d,
                       k.data().begin() + static_cast<size_t>(c + 1) * d);
    append_row(row, c);
  }

  // First kEmbeddingSamplePerClass train images of each class, in index order.
  std::vector<int> taken(static_cast<size_t>(g), 0);
  int64_t correct = 0, total = 0;
  for (size_t i = 0; i < data.train.count(); ++i) {
    int label = data.train.labels[i];
    if (taken[static_cast<size_t>(label)] >= kEmbeddingSamplePerClass) continue;
    ++taken[static_cast<size_t>(label)];
    Tensor<S> img = image_tensor<S>(
        augment_eval(data.train.images[i], data.train.height, data.train.width, data.train.channels),
        cfg.model);
    EncoderOutput<S> enc_out = encode(img, st->model.enc, cfg.model);
    append_row(enc_out.y.data(), label);
    Tensor<S> sims = class_similarities(enc_out.y, st->model.knowledge);
    correct += argmax(sims) == label ? 1 : 0;
    ++total;
  }
  atomic_write_file(out_file, out);
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace

double run_export_embeddings(const std::string& ckpt_path, const std::string& out_file) {
  CheckpointFile ck = read_checkpoint(ckpt_path);
  RunConfig cfg = config_from_checkpoint(ck, ckpt_path);
  if (!uses_knowledge(cfg.train.mode))
    throw ConfigError("checkpoint " + ckpt_path + " was trained in mode '" + to_string(cfg.train.mode) +
                      "', which disables knowledge guidance; no embeddings to export");
  if (cfg.train.precision == 64) return export_embeddings_impl<double>(ck, cfg, out_file);
  return export_embeddings_impl<float>(ck, cfg, out_file);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

void run_gen_data(const std::string& config_path, const std::string& out_dir) {
  RunConfig cfg = load_run_config(config_path);
  SyntheticDataset ds = generate_dataset(cfg.data);
  save_dataset(out_dir, ds);
}

}  // namespace tpskg
