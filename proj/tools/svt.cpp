// svt: command-line driver for the two-stage training stack:
//   pretrain      stage 1, self-distillation over multi-crop views
//   finetune      stage 2, supervised training from a checkpoint or fresh init
//   eval          top-1 on the test split, plus corruption mean error
//   attnmap       CLS attention rasters for test images
//   init-compare  budget-matched initialization comparison
//
// Each subcommand takes --config <file.json> with --seed / --out (and, where
// training happens, --epochs) flag overrides. Every run writes its resolved
// configuration next to its outputs, a metrics CSV, and, for training runs,
// a final checkpoint, enough to reproduce the run bit for bit.
//
// exit codes: 0 success, 2 configuration error (offending key named on
// stderr), 1 runtime failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "svt/data.hpp"
#include "svt/distill.hpp"
#include "svt/eval.hpp"
#include "svt/finetune.hpp"
#include "svt/metrics.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// configuration-phase failure; main maps it to exit 2
struct config_error : std::runtime_error {
  explicit config_error(const std::string& m)
      : std::runtime_error("config error: " + m) {}
};

std::string joined(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw config_error("'" + (path.empty() ? std::string("<config>") : path) +
                       "' wants an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw config_error("unknown key '" + joined(path, it.key()) + "'");
  }
}

void read_int(const json& j, const std::string& path, const char* key,
              int& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer())
    throw config_error("'" + joined(path, key) + "' wants an integer");
  out = v.get<int>();
}

void read_u64(const json& j, const std::string& path, const char* key,
              std::uint64_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0))
    throw config_error("'" + joined(path, key) +
                       "' wants a non-negative integer");
  out = v.get<std::uint64_t>();
}

void read_double(const json& j, const std::string& path, const char* key,
                 double& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number())
    throw config_error("'" + joined(path, key) + "' wants a number");
  out = v.get<double>();
}

void read_float(const json& j, const std::string& path, const char* key,
                float& out) {
  double d = double(out);
  read_double(j, path, key, d);
  out = float(d);
}

void read_bool(const json& j, const std::string& path, const char* key,
               bool& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_boolean())
    throw config_error("'" + joined(path, key) + "' wants true or false");
  out = v.get<bool>();
}

void read_string(const json& j, const std::string& path, const char* key,
                 std::string& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_string())
    throw config_error("'" + joined(path, key) + "' wants a string");
  out = v.get<std::string>();
}

void read_range(const json& j, const std::string& path, const char* key,
                std::pair<double, double>& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
    throw config_error("'" + joined(path, key) + "' wants [min, max]");
  out = {v[0].get<double>(), v[1].get<double>()};
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

struct DataSpec {
  std::string kind = "synthetic";  // synthetic | cifar10 | cifar100 | raw
  std::string dir;                 // cifar10 / cifar100 batch directory
  std::string train, test;         // raw dataset files
  std::uint64_t seed = 4242;       // synthetic generator seed
  int per_class = 500, classes = 10, size = 32;
  double noise = 0.05;
  bool quadrant = false;
  int hue_groups = 0;
  int subset_per_class = 0;  // > 0 draws a balanced train subset
  std::uint64_t subset_seed = 9;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "runs/run";
  DataSpec data;
  svt::ViTConfig vit;
  svt::ViewConfig views;
  svt::DistillConfig distill;
  svt::FinetuneConfig ft;
  std::string init_checkpoint;  // finetune: stage-1 snapshot to start from
  std::string checkpoint;       // eval / attnmap: model snapshot to load
  std::vector<std::pair<std::string, std::string>> corrupted;  // name, path
  std::vector<std::string> schemes;      // init-compare; default: all four
  std::vector<std::uint64_t> seeds;      // init-compare; default: {seed}
  std::vector<int> attn_indices;         // attnmap; default: first 8
};

DataSpec parse_dataset(const json& j) {
  DataSpec d;
  check_keys(j, "dataset",
             {"kind", "dir", "train", "test", "seed", "per_class", "classes",
              "size", "noise", "quadrant", "hue_groups", "subset_per_class",
              "subset_seed"});
  read_string(j, "dataset", "kind", d.kind);
  read_string(j, "dataset", "dir", d.dir);
  read_string(j, "dataset", "train", d.train);
  read_string(j, "dataset", "test", d.test);
  read_u64(j, "dataset", "seed", d.seed);
  read_int(j, "dataset", "per_class", d.per_class);
  read_int(j, "dataset", "classes", d.classes);
  read_int(j, "dataset", "size", d.size);
  read_double(j, "dataset", "noise", d.noise);
  read_bool(j, "dataset", "quadrant", d.quadrant);
  read_int(j, "dataset", "hue_groups", d.hue_groups);
  read_int(j, "dataset", "subset_per_class", d.subset_per_class);
  read_u64(j, "dataset", "subset_seed", d.subset_seed);
  if (d.kind != "synthetic" && d.kind != "cifar10" && d.kind != "cifar100" &&
      d.kind != "raw")
    throw config_error(
        "'dataset.kind' wants synthetic | cifar10 | cifar100 | raw, got '" +
        d.kind + "'");
  if ((d.kind == "cifar10" || d.kind == "cifar100") && d.dir.empty())
    throw config_error("'dataset.dir' is required for kind '" + d.kind + "'");
  if (d.kind == "raw" && (d.train.empty() || d.test.empty()))
    throw config_error(
        "'dataset.train' and 'dataset.test' are required for kind 'raw'");
  return d;
}

void parse_vit(const json& j, svt::ViTConfig& v) {
  check_keys(j, "vit",
             {"image", "image_h", "image_w", "patch", "depth", "dim", "heads",
              "mlp_ratio", "dropout", "attn_dropout"});
  int image = 0;
  read_int(j, "vit", "image", image);
  if (image > 0) v.image_h = v.image_w = image;
  read_int(j, "vit", "image_h", v.image_h);
  read_int(j, "vit", "image_w", v.image_w);
  read_int(j, "vit", "patch", v.patch);
  read_int(j, "vit", "depth", v.depth);
  read_int(j, "vit", "dim", v.dim);
  read_int(j, "vit", "heads", v.heads);
  read_int(j, "vit", "mlp_ratio", v.mlp_ratio);
  read_double(j, "vit", "dropout", v.dropout);
  read_double(j, "vit", "attn_dropout", v.attn_dropout);
}

void parse_views(const json& j, svt::ViewConfig& v) {
  check_keys(j, "views",
             {"n_global", "n_local", "global_scale", "local_scale",
              "global_out", "local_out", "augment", "blur_p_global1",
              "blur_p_global2", "blur_p_local", "solarize_p_global2"});
  read_int(j, "views", "n_global", v.n_global);
  read_int(j, "views", "n_local", v.n_local);
  read_range(j, "views", "global_scale", v.global_scale);
  read_range(j, "views", "local_scale", v.local_scale);
  read_int(j, "views", "global_out", v.global_out);
  read_int(j, "views", "local_out", v.local_out);
  read_double(j, "views", "blur_p_global1", v.blur_p_global1);
  read_double(j, "views", "blur_p_global2", v.blur_p_global2);
  read_double(j, "views", "blur_p_local", v.blur_p_local);
  read_double(j, "views", "solarize_p_global2", v.solarize_p_global2);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    check_keys(a, "views.augment",
               {"flip_p", "jitter_p", "jitter_brightness", "jitter_contrast",
                "jitter_saturation", "jitter_hue", "grayscale_p",
                "blur_sigma_lo", "blur_sigma_hi", "solarize_threshold"});
    auto& b = v.base;
    read_double(a, "views.augment", "flip_p", b.flip_p);
    read_double(a, "views.augment", "jitter_p", b.jitter_p);
    read_float(a, "views.augment", "jitter_brightness", b.jitter_brightness);
    read_float(a, "views.augment", "jitter_contrast", b.jitter_contrast);
    read_float(a, "views.augment", "jitter_saturation", b.jitter_saturation);
    read_float(a, "views.augment", "jitter_hue", b.jitter_hue);
    read_double(a, "views.augment", "grayscale_p", b.grayscale_p);
    read_float(a, "views.augment", "blur_sigma_lo", b.blur_sigma_lo);
    read_float(a, "views.augment", "blur_sigma_hi", b.blur_sigma_hi);
    read_float(a, "views.augment", "solarize_threshold", b.solarize_threshold);
  }
}

void parse_distill(const json& j, svt::DistillConfig& c) {
  check_keys(j, "distill",
             {"epochs", "batch", "warmup_epochs", "base_lr_per_256",
              "weight_decay", "tau_s", "tau_t_lo", "tau_t_hi",
              "tau_t_warmup_epochs", "k_dim", "head_hidden", "head_bottleneck",
              "center_momentum", "ema_lo", "grad_clip", "checkpoint_every",
              "symmetrized"});
  read_int(j, "distill", "epochs", c.epochs);
  read_int(j, "distill", "batch", c.batch);
  read_int(j, "distill", "warmup_epochs", c.warmup_epochs);
  read_double(j, "distill", "base_lr_per_256", c.base_lr_per_256);
  read_double(j, "distill", "weight_decay", c.weight_decay);
  read_double(j, "distill", "tau_s", c.tau_s);
  read_double(j, "distill", "tau_t_lo", c.tau_t_lo);
  read_double(j, "distill", "tau_t_hi", c.tau_t_hi);
  read_int(j, "distill", "tau_t_warmup_epochs", c.tau_t_warmup_epochs);
  read_int(j, "distill", "k_dim", c.k_dim);
  read_int(j, "distill", "head_hidden", c.head_hidden);
  read_int(j, "distill", "head_bottleneck", c.head_bottleneck);
  read_double(j, "distill", "center_momentum", c.center_momentum);
  read_double(j, "distill", "ema_lo", c.ema_lo);
  read_double(j, "distill", "grad_clip", c.grad_clip);
  read_int(j, "distill", "checkpoint_every", c.checkpoint_every);
  read_bool(j, "distill", "symmetrized", c.symmetrized);
}

void parse_finetune(const json& j, svt::FinetuneConfig& c) {
  check_keys(j, "finetune",
             {"epochs", "batch", "lr", "weight_decay", "label_smoothing",
              "mixup_alpha", "cutmix_alpha", "mix_prob", "erase_prob",
              "augment", "pad", "init"});
  read_int(j, "finetune", "epochs", c.epochs);
  read_int(j, "finetune", "batch", c.batch);
  read_double(j, "finetune", "lr", c.lr);
  read_double(j, "finetune", "weight_decay", c.weight_decay);
  read_double(j, "finetune", "label_smoothing", c.label_smoothing);
  read_double(j, "finetune", "mixup_alpha", c.mixup_alpha);
  read_double(j, "finetune", "cutmix_alpha", c.cutmix_alpha);
  read_double(j, "finetune", "mix_prob", c.mix_prob);
  read_double(j, "finetune", "erase_prob", c.erase_prob);
  read_bool(j, "finetune", "augment", c.augment);
  read_int(j, "finetune", "pad", c.pad);
  read_string(j, "finetune", "init", c.init);
}

RunConfig parse_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const std::exception& e) {
    throw config_error("'" + path + "' is not valid JSON: " + e.what());
  }
  check_keys(j, "",
             {"seed", "out", "dataset", "vit", "views", "distill", "finetune",
              "init_checkpoint", "checkpoint", "corrupted", "schemes", "seeds",
              "attn_indices"});
  RunConfig c;
  read_u64(j, "", "seed", c.seed);
  read_string(j, "", "out", c.out);
  if (j.contains("dataset")) c.data = parse_dataset(j.at("dataset"));
  if (j.contains("vit")) parse_vit(j.at("vit"), c.vit);
  if (j.contains("views")) parse_views(j.at("views"), c.views);
  if (j.contains("distill")) parse_distill(j.at("distill"), c.distill);
  if (j.contains("finetune")) parse_finetune(j.at("finetune"), c.ft);
  read_string(j, "", "init_checkpoint", c.init_checkpoint);
  read_string(j, "", "checkpoint", c.checkpoint);
  if (j.contains("corrupted")) {
    const auto& arr = j.at("corrupted");
    if (!arr.is_array()) throw config_error("'corrupted' wants an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string path_i = "corrupted[" + std::to_string(i) + "]";
      check_keys(arr[i], path_i, {"name", "path"});
      std::string name, file;
      read_string(arr[i], path_i, "name", name);
      read_string(arr[i], path_i, "path", file);
      if (name.empty() || file.empty())
        throw config_error("'" + path_i + "' wants both name and path");
      c.corrupted.emplace_back(name, file);
    }
  }
  if (j.contains("schemes")) {
    const auto& arr = j.at("schemes");
    if (!arr.is_array()) throw config_error("'schemes' wants an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      if (!arr[i].is_string())
        throw config_error("'schemes[" + std::to_string(i) +
                           "]' wants a string");
      c.schemes.push_back(arr[i].get<std::string>());
    }
  }
  if (j.contains("seeds")) {
    const auto& arr = j.at("seeds");
    if (!arr.is_array()) throw config_error("'seeds' wants an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      if (!arr[i].is_number_integer() || arr[i].get<long long>() < 0)
        throw config_error("'seeds[" + std::to_string(i) +
                           "]' wants a non-negative integer");
      c.seeds.push_back(arr[i].get<std::uint64_t>());
    }
  }
  if (j.contains("attn_indices")) {
    const auto& arr = j.at("attn_indices");
    if (!arr.is_array()) throw config_error("'attn_indices' wants an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      if (!arr[i].is_number_integer() || arr[i].get<long long>() < 0)
        throw config_error("'attn_indices[" + std::to_string(i) +
                           "]' wants a non-negative integer");
      c.attn_indices.push_back(arr[i].get<int>());
    }
  }
  return c;
}

json resolved_config(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  json d;
  d["kind"] = c.data.kind;
  if (!c.data.dir.empty()) d["dir"] = c.data.dir;
  if (!c.data.train.empty()) d["train"] = c.data.train;
  if (!c.data.test.empty()) d["test"] = c.data.test;
  if (c.data.kind == "synthetic") {
    d["seed"] = c.data.seed;
    d["per_class"] = c.data.per_class;
    d["classes"] = c.data.classes;
    d["size"] = c.data.size;
    d["noise"] = c.data.noise;
    d["quadrant"] = c.data.quadrant;
    d["hue_groups"] = c.data.hue_groups;
  }
  if (c.data.subset_per_class > 0) {
    d["subset_per_class"] = c.data.subset_per_class;
    d["subset_seed"] = c.data.subset_seed;
  }
  j["dataset"] = std::move(d);
  j["vit"] = {{"image_h", c.vit.image_h}, {"image_w", c.vit.image_w},
              {"patch", c.vit.patch},     {"depth", c.vit.depth},
              {"dim", c.vit.dim},         {"heads", c.vit.heads},
              {"mlp_ratio", c.vit.mlp_ratio}, {"dropout", c.vit.dropout},
              {"attn_dropout", c.vit.attn_dropout}};
  j["views"] = {
      {"n_global", c.views.n_global},
      {"n_local", c.views.n_local},
      {"global_scale", {c.views.global_scale.first, c.views.global_scale.second}},
      {"local_scale", {c.views.local_scale.first, c.views.local_scale.second}},
      {"global_out", c.views.global_out},
      {"local_out", c.views.local_out},
      {"blur_p_global1", c.views.blur_p_global1},
      {"blur_p_global2", c.views.blur_p_global2},
      {"blur_p_local", c.views.blur_p_local},
      {"solarize_p_global2", c.views.solarize_p_global2},
      {"augment",
       {{"flip_p", c.views.base.flip_p},
        {"jitter_p", c.views.base.jitter_p},
        {"jitter_brightness", c.views.base.jitter_brightness},
        {"jitter_contrast", c.views.base.jitter_contrast},
        {"jitter_saturation", c.views.base.jitter_saturation},
        {"jitter_hue", c.views.base.jitter_hue},
        {"grayscale_p", c.views.base.grayscale_p},
        {"blur_sigma_lo", c.views.base.blur_sigma_lo},
        {"blur_sigma_hi", c.views.base.blur_sigma_hi},
        {"solarize_threshold", c.views.base.solarize_threshold}}}};
  j["distill"] = {{"epochs", c.distill.epochs},
                  {"batch", c.distill.batch},
                  {"warmup_epochs", c.distill.warmup_epochs},
                  {"base_lr_per_256", c.distill.base_lr_per_256},
                  {"weight_decay", c.distill.weight_decay},
                  {"tau_s", c.distill.tau_s},
                  {"tau_t_lo", c.distill.tau_t_lo},
                  {"tau_t_hi", c.distill.tau_t_hi},
                  {"tau_t_warmup_epochs", c.distill.tau_t_warmup_epochs},
                  {"k_dim", c.distill.k_dim},
                  {"head_hidden", c.distill.head_hidden},
                  {"head_bottleneck", c.distill.head_bottleneck},
                  {"center_momentum", c.distill.center_momentum},
                  {"ema_lo", c.distill.ema_lo},
                  {"grad_clip", c.distill.grad_clip},
                  {"checkpoint_every", c.distill.checkpoint_every},
                  {"symmetrized", c.distill.symmetrized}};
  j["finetune"] = {{"epochs", c.ft.epochs},
                   {"batch", c.ft.batch},
                   {"lr", c.ft.lr},
                   {"weight_decay", c.ft.weight_decay},
                   {"label_smoothing", c.ft.label_smoothing},
                   {"mixup_alpha", c.ft.mixup_alpha},
                   {"cutmix_alpha", c.ft.cutmix_alpha},
                   {"mix_prob", c.ft.mix_prob},
                   {"erase_prob", c.ft.erase_prob},
                   {"augment", c.ft.augment},
                   {"pad", c.ft.pad},
                   {"init", c.ft.init}};
  if (!c.init_checkpoint.empty()) j["init_checkpoint"] = c.init_checkpoint;
  if (!c.checkpoint.empty()) j["checkpoint"] = c.checkpoint;
  if (!c.corrupted.empty()) {
    json arr = json::array();
    for (const auto& [name, path] : c.corrupted)
      arr.push_back({{"name", name}, {"path", path}});
    j["corrupted"] = std::move(arr);
  }
  if (!c.schemes.empty()) j["schemes"] = c.schemes;
  if (!c.seeds.empty()) j["seeds"] = c.seeds;
  if (!c.attn_indices.empty()) j["attn_indices"] = c.attn_indices;
  return j;
}

// ---------------------------------------------------------------------------
// run phase
// ---------------------------------------------------------------------------

svt::Dataset load_dataset(const DataSpec& d) {
  svt::Dataset out;
  if (d.kind == "synthetic")
    out = svt::synthetic_dataset(d.seed, d.per_class, d.classes, d.size,
                                 d.noise, d.quadrant, d.hue_groups);
  else if (d.kind == "cifar10")
    out = svt::load_cifar10(d.dir);
  else if (d.kind == "cifar100")
    out = svt::load_cifar100(d.dir);
  else
    out = svt::load_raw_dataset(d.train, d.test);
  if (d.subset_per_class > 0)
    out = svt::balanced_subset(out, d.subset_per_class, d.subset_seed);
  std::printf("event=dataset name=%s train=%zu test=%zu classes=%d size=%d\n",
              out.name.c_str(), out.train.size(), out.test.size(), out.classes,
              out.image_size);
  return out;
}

void write_run_dir(const RunConfig& c) {
  fs::create_directories(c.out);
  std::ofstream f(fs::path(c.out) / "config.json", std::ios::trunc);
  if (!f) throw svt::io_error("cannot write '" + c.out + "/config.json'");
  f << resolved_config(c).dump(2) << '\n';
}

std::string meta_json(const RunConfig& c, const char* stage, int epoch) {
  json m;
  m["stage"] = stage;
  m["epoch"] = epoch;
  m["seed"] = c.seed;
  // the output path does not influence training; dropping it keeps repeat
  // runs into different directories byte-identical
  json snap = resolved_config(c);
  snap.erase("out");
  m["config"] = std::move(snap);
  return m.dump();
}

int run_pretrain(const RunConfig& c) {
  auto data = load_dataset(c.data);
  write_run_dir(c);
  auto st = svt::pretrain<float>(
      data, c.vit, c.distill, c.views, c.seed,
      [&](const svt::DistillMetrics& m) {
        std::printf(
            "event=epoch stage=pretrain epoch=%d/%d loss=%.6f "
            "teacher_entropy=%.6f lr=%.4e lambda=%.6f tau_t=%.4f "
            "collapse_warning=%d\n",
            m.epoch, c.distill.epochs, m.loss, m.teacher_entropy, m.lr,
            m.lambda, m.tau_t, m.collapse_warning ? 1 : 0);
        std::fflush(stdout);
      });
  const fs::path out(c.out);
  svt::write_distill_csv((out / "pretrain_metrics.csv").string(), st.metrics);
  auto ck = svt::distill_checkpoint(st, meta_json(c, "pretrain",
                                                  c.distill.epochs));
  svt::save_checkpoint((out / "pretrain.ckpt").string(), ck);
  std::printf("event=done stage=pretrain epochs=%d loss=%.6f checkpoint=%s\n",
              c.distill.epochs,
              st.metrics.empty() ? 0.0 : st.metrics.back().loss,
              (out / "pretrain.ckpt").c_str());
  return 0;
}

int run_finetune(const RunConfig& c) {
  auto data = load_dataset(c.data);
  write_run_dir(c);
  svt::Checkpoint ssl;
  const svt::Checkpoint* pssl = nullptr;
  if (!c.init_checkpoint.empty()) {
    ssl = svt::load_checkpoint(c.init_checkpoint);
    pssl = &ssl;
  }
  auto res = svt::finetune<float>(
      data, c.vit, c.ft, pssl, c.seed, [&](const svt::FinetuneMetrics& m) {
        std::printf(
            "event=epoch stage=finetune epoch=%d/%d train_loss=%.6f "
            "test_top1=%.4f lr=%.4e\n",
            m.epoch, c.ft.epochs, m.train_loss, m.test_top1, m.lr);
        std::fflush(stdout);
      });
  const fs::path out(c.out);
  svt::write_finetune_csv((out / "finetune_metrics.csv").string(),
                          res.metrics);
  auto ck = svt::checkpoint_from(res.params(),
                                 meta_json(c, "finetune", c.ft.epochs));
  svt::save_checkpoint((out / "finetune.ckpt").string(), ck);
  std::printf(
      "event=done stage=finetune final_top1=%.4f best_top1=%.4f "
      "best_epoch=%d checkpoint=%s\n",
      res.final_top1, res.best_top1, res.best_epoch,
      (out / "finetune.ckpt").c_str());
  return 0;
}

// rebuild a fine-tuned model (backbone + classifier) from its snapshot
void load_model(const svt::Checkpoint& ck, svt::ViT<float>& vit,
                svt::Classifier<float>& head) {
  if (ck.find("center"))
    throw svt::validation_error(
        "eval: checkpoint holds a pretraining state (student/teacher); "
        "fine-tune it first or pass it to attnmap");
  auto vps = vit.params();
  svt::load_into(ck, vps);
  auto hps = head.params();
  svt::load_into(ck, hps);
}

int run_eval(const RunConfig& c) {
  auto data = load_dataset(c.data);
  write_run_dir(c);
  auto ck = svt::load_checkpoint(c.checkpoint);
  svt::Rng rng(0);
  auto vit = svt::make_vit<float>(c.vit);
  auto head = svt::make_classifier<float>(c.vit.dim, data.classes, rng);
  load_model(ck, vit, head);

  const double clean = svt::evaluate_top1(vit, head, data.test, data.mean,
                                          data.stdev, data.image_size);
  std::printf("event=eval set=clean top1=%.6f error_pct=%.4f\n", clean,
              100.0 * (1.0 - clean));
  std::vector<std::pair<std::string, double>> rows;  // name, top1
  rows.emplace_back("clean", clean);
  std::vector<double> errors;
  for (const auto& [name, path] : c.corrupted) {
    int classes = 0, size = 0;
    auto samples = svt::load_raw_samples(path, classes, size);
    if (classes != data.classes || size != data.image_size)
      throw svt::validation_error(
          "eval: corruption set '" + name + "' is " + std::to_string(classes) +
          " classes at " + std::to_string(size) + "px, want " +
          std::to_string(data.classes) + " at " +
          std::to_string(data.image_size) + "px");
    const double t = svt::evaluate_top1(vit, head, samples, data.mean,
                                        data.stdev, size);
    errors.push_back(100.0 * (1.0 - t));
    rows.emplace_back(name, t);
    std::printf("event=eval set=%s top1=%.6f error_pct=%.4f\n", name.c_str(),
                t, errors.back());
    std::fflush(stdout);
  }
  const fs::path out(c.out);
  std::ofstream f(out / "eval.csv", std::ios::trunc);
  if (!f) throw svt::io_error("cannot write '" + (out / "eval.csv").string() +
                              "'");
  f << "set,top1,error_pct\n";
  char buf[160];
  for (const auto& [name, t] : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", name.c_str(), t,
                  100.0 * (1.0 - t));
    f << buf;
  }
  if (!errors.empty()) {
    const double m = svt::mce(errors);
    std::snprintf(buf, sizeof buf, "mean-corruption,%.6f,%.6f\n",
                  (100.0 - m) / 100.0, m);
    f << buf;
    std::printf("event=done stage=eval clean_top1=%.6f mce=%.6f sets=%zu\n",
                clean, m, errors.size());
  } else {
    std::printf("event=done stage=eval clean_top1=%.6f\n", clean);
  }
  if (!f) throw svt::io_error("write to '" + (out / "eval.csv").string() +
                              "' failed");
  return 0;
}

int run_attnmap(const RunConfig& c) {
  auto data = load_dataset(c.data);
  write_run_dir(c);
  auto ck = svt::load_checkpoint(c.checkpoint);
  auto vit = svt::make_vit<float>(c.vit);
  const bool stage1 = ck.find("center") != nullptr;
  if (stage1) {
    svt::load_backbone(ck, vit, "teacher");
  } else {
    auto ps = vit.params();
    svt::load_into(ck, ps);
  }
  std::printf("event=attnmap backbone=%s heads=%d\n",
              stage1 ? "teacher" : "finetuned", c.vit.heads);

  std::vector<int> indices = c.attn_indices;
  if (indices.empty())
    for (int i = 0; i < int(std::min<std::size_t>(8, data.test.size())); ++i)
      indices.push_back(i);
  const fs::path out(c.out);
  std::ofstream f(out / "attnmap.csv", std::ios::trunc);
  if (!f)
    throw svt::io_error("cannot write '" + (out / "attnmap.csv").string() +
                        "'");
  f << "index,label,quadrant,quadrant_mass,raster\n";
  for (const int idx : indices) {
    if (idx < 0 || idx >= int(data.test.size()))
      throw svt::validation_error("attnmap: test index " +
                                  std::to_string(idx) + " out of range (" +
                                  std::to_string(data.test.size()) +
                                  " test images)");
    const auto& s = data.test[std::size_t(idx)];
    auto x = svt::normalized_input<float>(s.image, data.image_size, data.mean,
                                          data.stdev);
    auto am = svt::attention_map(vit, x);
    auto up = svt::upsample_nn(am.mean_grid, am.gh, am.gw, data.image_size,
                               data.image_size);
    const std::string base = "attn_" + std::to_string(idx);
    svt::write_pgm((out / (base + ".pgm")).string(), up, data.image_size,
                   data.image_size);
    svt::write_attention_csv((out / (base + ".csv")).string(), am);
    int quadrant = -1;
    double mass = 0;
    if (std::size_t(idx) < data.test_quadrant.size()) {
      quadrant = data.test_quadrant[std::size_t(idx)];
      mass = svt::quadrant_mass(am.mean_grid, am.gh, am.gw, quadrant);
    }
    char buf[200];
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%.6f,%s\n", idx, s.label,
                  quadrant, mass, (base + ".pgm").c_str());
    f << buf;
    std::printf(
        "event=attnmap index=%d label=%d quadrant=%d quadrant_mass=%.4f "
        "raster=%s\n",
        idx, s.label, quadrant, mass, (out / (base + ".pgm")).c_str());
    std::fflush(stdout);
  }
  if (!f)
    throw svt::io_error("write to '" + (out / "attnmap.csv").string() +
                        "' failed");
  std::printf("event=done stage=attnmap images=%zu\n", indices.size());
  return 0;
}

int run_init_compare(const RunConfig& c) {
  auto data = load_dataset(c.data);
  write_run_dir(c);
  std::vector<std::string> schemes = c.schemes;
  if (schemes.empty())
    schemes.assign(std::begin(svt::kInitSchemes), std::end(svt::kInitSchemes));
  std::vector<std::uint64_t> seeds = c.seeds;
  if (seeds.empty()) seeds.push_back(c.seed);

  svt::InitCompareHooks hooks;
  hooks.ssl_epoch = [&](const std::string& scheme, std::uint64_t seed,
                        const svt::DistillMetrics& m) {
    std::printf(
        "event=epoch stage=pretrain scheme=%s seed=%llu epoch=%d/%d "
        "loss=%.6f\n",
        scheme.c_str(), (unsigned long long)seed, m.epoch, c.distill.epochs,
        m.loss);
    std::fflush(stdout);
  };
  hooks.ft_epoch = [&](const std::string& scheme, std::uint64_t seed,
                       const svt::FinetuneMetrics& m) {
    std::printf(
        "event=epoch stage=finetune scheme=%s seed=%llu epoch=%d/%d "
        "test_top1=%.4f\n",
        scheme.c_str(), (unsigned long long)seed, m.epoch, c.ft.epochs,
        m.test_top1);
    std::fflush(stdout);
  };
  auto rows = svt::init_compare<float>(data, schemes, c.vit, c.ft, c.distill,
                                       c.views, seeds, hooks);
  const fs::path out(c.out);
  svt::write_init_compare_csv((out / "init_compare.csv").string(), rows,
                              seeds);
  for (const auto& r : rows)
    std::printf(
        "event=row stage=init-compare scheme=%s mean_top1=%.4f min=%.4f "
        "max=%.4f\n",
        r.scheme.c_str(), r.mean, r.lo, r.hi);
  std::printf("event=done stage=init-compare schemes=%zu seeds=%zu table=%s\n",
              rows.size(), seeds.size(), (out / "init_compare.csv").c_str());
  return 0;
}

// subcommand-specific requirements, checked during the configuration phase
void check_requirements(const std::string& sub, const RunConfig& c) {
  c.vit.validate();
  c.views.validate();
  c.distill.validate();
  c.ft.validate();
  if ((sub == "eval" || sub == "attnmap") && c.checkpoint.empty())
    throw config_error("'checkpoint' is required for " + sub);
  if (sub == "finetune") {
    const auto src = svt::parse_init_source(c.ft.init);
    const bool wants_ssl = src == svt::InitSource::ssl_teacher ||
                           src == svt::InitSource::ssl_student;
    if (wants_ssl && c.init_checkpoint.empty())
      throw config_error("'finetune.init' is '" + c.ft.init +
                         "' but 'init_checkpoint' is not set");
    if (!wants_ssl && !c.init_checkpoint.empty())
      throw config_error("'init_checkpoint' is set but 'finetune.init' is '" +
                         c.ft.init + "'; use a self-supervised init");
  }
  if (sub == "init-compare") {
    for (const auto& s : c.schemes) {
      const bool known =
          std::find_if(std::begin(svt::kInitSchemes),
                       std::end(svt::kInitSchemes),
                       [&](const char* k) { return s == k; }) !=
          std::end(svt::kInitSchemes);
      if (!known)
        throw config_error(
            "'schemes' holds unknown scheme '" + s +
            "' (want uniform | xavier | truncated-normal | self-supervised; "
            "gradinit is not supported)");
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "svt: two-stage training for small vision transformers:\n"
      "self-distilled pretraining over multi-crop views, supervised\n"
      "fine-tuning, evaluation, attention rasters, init comparison"};
  app.require_subcommand(1);

  std::string config_path, out_override;
  std::uint64_t seed_override = 0;
  int epochs_override = 0;

  auto add_common = [&](CLI::App* s, bool trains) {
    s->add_option("--config", config_path, "JSON run configuration")
        ->required();
    s->add_option("--seed", seed_override, "override the run seed");
    s->add_option("--out", out_override, "override the output directory");
    if (trains)
      s->add_option("--epochs", epochs_override,
                    "override the stage's epoch count");
  };
  add_common(app.add_subcommand("pretrain",
                                "stage 1: self-distillation pretraining"),
             true);
  add_common(app.add_subcommand("finetune",
                                "stage 2: supervised fine-tuning"),
             true);
  add_common(app.add_subcommand("eval", "test-set top-1 and corruption error"),
             false);
  add_common(app.add_subcommand("attnmap", "CLS attention rasters"), false);
  add_common(app.add_subcommand("init-compare",
                                "budget-matched initialization comparison"),
             true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int r = app.exit(e);
    return r == 0 ? 0 : 2;
  }
  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();

  RunConfig cfg;
  try {
    cfg = parse_run_config(config_path);
    if (sub->count("--seed")) cfg.seed = seed_override;
    if (sub->count("--out")) cfg.out = out_override;
    const auto* epochs_opt = sub->get_option_no_throw("--epochs");
    if (epochs_opt && epochs_opt->count()) {
      if (epochs_override < 0)
        throw config_error("'--epochs' wants a non-negative count");
      if (name == "pretrain")
        cfg.distill.epochs = epochs_override;
      else
        cfg.ft.epochs = epochs_override;
      if (cfg.distill.warmup_epochs >= cfg.distill.epochs)
        cfg.distill.warmup_epochs = std::max(0, cfg.distill.epochs - 1);
    }
    check_requirements(name, cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  }

  try {
    if (name == "pretrain") return run_pretrain(cfg);
    if (name == "finetune") return run_finetune(cfg);
    if (name == "eval") return run_eval(cfg);
    if (name == "attnmap") return run_attnmap(cfg);
    return run_init_compare(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
}
