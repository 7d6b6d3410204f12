#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "actloc/checkpoint.hpp"
#include "actloc/data.hpp"
#include "actloc/losses.hpp"
#include "actloc/metrics.hpp"
#include "actloc/model.hpp"
#include "actloc/optim.hpp"
#include "actloc/rng.hpp"

namespace actloc {

struct AblationFlags {
  bool use_Lw = true;
  bool use_La = true;
  bool use_AE = true;
  bool use_Lh_instead_of_Lw = false;
  bool detach_gamma = false;
  bool freeze_stem = false;
};

struct TrainConfig {
  int stage = 1;
  int epochs_stage1 = 30;
  int epochs_stage2 = 15;
  int epochs_evaluator = 40;
  int batch_size = 16;
  double lr_stage1 = 0.001;
  double lr_stage2 = 0.0001;
  double lr_evaluator = 0.002;
  std::uint64_t seed = 1;
  LossConfig loss;
  EraseConfig erase;
  AblationFlags ablation;
  DataGenConfig data;
  ModelConfig model;

  // The dataset and model share the master seed and geometry.
  DataGenConfig data_cfg() const {
    DataGenConfig d = data;
    d.seed = stream_seed(seed, "data");
    return d;
  }
  ModelConfig model_cfg() const {
    ModelConfig m = model;
    m.k = data.k;
    m.H = data.H;
    m.W = data.W;
    return m;
  }
};

// --- JSON config ---------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw std::invalid_argument("config: expected an object at " + where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline TrainConfig parse_config(const nlohmann::json& j) {
  TrainConfig cfg;
  detail::check_keys(j, "top level",
                     {"stage", "epochs_stage1", "epochs_stage2", "epochs_evaluator", "batch_size",
                      "lr_stage1", "lr_stage2", "lr_evaluator", "seed", "loss", "erase", "ablation",
                      "data", "model"});
  detail::read_field(j, "stage", cfg.stage);
  detail::read_field(j, "epochs_stage1", cfg.epochs_stage1);
  detail::read_field(j, "epochs_stage2", cfg.epochs_stage2);
  detail::read_field(j, "epochs_evaluator", cfg.epochs_evaluator);
  detail::read_field(j, "batch_size", cfg.batch_size);
  detail::read_field(j, "lr_stage1", cfg.lr_stage1);
  detail::read_field(j, "lr_stage2", cfg.lr_stage2);
  detail::read_field(j, "lr_evaluator", cfg.lr_evaluator);
  detail::read_field(j, "seed", cfg.seed);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    detail::check_keys(l, "loss", {"alpha", "beta", "mu", "sigma", "clamp_eps"});
    detail::read_field(l, "alpha", cfg.loss.alpha);
    detail::read_field(l, "beta", cfg.loss.beta);
    detail::read_field(l, "mu", cfg.loss.mu);
    detail::read_field(l, "sigma", cfg.loss.sigma);
    detail::read_field(l, "clamp_eps", cfg.loss.clamp_eps);
  }
  if (j.contains("erase")) {
    const auto& e = j.at("erase");
    detail::check_keys(e, "erase", {"tau", "drop_prob", "frac_min", "frac_max"});
    detail::read_field(e, "tau", cfg.erase.tau);
    detail::read_field(e, "drop_prob", cfg.erase.drop_prob);
    detail::read_field(e, "frac_min", cfg.erase.frac_min);
    detail::read_field(e, "frac_max", cfg.erase.frac_max);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    detail::check_keys(a, "ablation",
                       {"use_Lw", "use_La", "use_AE", "use_Lh_instead_of_Lw", "detach_gamma",
                        "freeze_stem"});
    detail::read_field(a, "use_Lw", cfg.ablation.use_Lw);
    detail::read_field(a, "use_La", cfg.ablation.use_La);
    detail::read_field(a, "use_AE", cfg.ablation.use_AE);
    detail::read_field(a, "use_Lh_instead_of_Lw", cfg.ablation.use_Lh_instead_of_Lw);
    detail::read_field(a, "detach_gamma", cfg.ablation.detach_gamma);
    detail::read_field(a, "freeze_stem", cfg.ablation.freeze_stem);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, "data",
                       {"k", "H", "W", "n_train", "n_val", "n_test", "clutter_density", "noise_amp",
                        "box_frac_min", "box_frac_max"});
    detail::read_field(d, "k", cfg.data.k);
    detail::read_field(d, "H", cfg.data.H);
    detail::read_field(d, "W", cfg.data.W);
    detail::read_field(d, "n_train", cfg.data.n_train);
    detail::read_field(d, "n_val", cfg.data.n_val);
    detail::read_field(d, "n_test", cfg.data.n_test);
    detail::read_field(d, "clutter_density", cfg.data.clutter_density);
    detail::read_field(d, "noise_amp", cfg.data.noise_amp);
    detail::read_field(d, "box_frac_min", cfg.data.box_frac_min);
    detail::read_field(d, "box_frac_max", cfg.data.box_frac_max);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::check_keys(m, "model", {"c", "stem_depth", "gen_depth", "eval_depth"});
    detail::read_field(m, "c", cfg.model.c);
    detail::read_field(m, "stem_depth", cfg.model.stem_depth);
    detail::read_field(m, "gen_depth", cfg.model.gen_depth);
    detail::read_field(m, "eval_depth", cfg.model.eval_depth);
  }
  if (cfg.batch_size < 1 || cfg.epochs_stage1 < 1 || cfg.epochs_stage2 < 1 ||
      cfg.epochs_evaluator < 1)
    throw std::invalid_argument("config: epochs and batch size must be positive");
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  nlohmann::json j;
  f >> j;
  return parse_config(j);
}

// Hash over the fields that determine data, architecture, and seeding; a
// checkpoint trained under one hash refuses to serve a different config.
inline std::uint64_t config_hash(const TrainConfig& cfg) {
  std::ostringstream s;
  s.precision(17);
  s << cfg.seed << "|" << cfg.data.k << "," << cfg.data.H << "," << cfg.data.W << ","
    << cfg.data.n_train << "," << cfg.data.n_val << "," << cfg.data.n_test << ","
    << cfg.data.clutter_density << "," << cfg.data.noise_amp << "," << cfg.data.box_frac_min << ","
    << cfg.data.box_frac_max << "|" << cfg.model.c << "," << cfg.model.stem_depth << ","
    << cfg.model.gen_depth << "," << cfg.model.eval_depth;
  const std::string str = s.str();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : str) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex << h;
  return s.str();
}

// --- checkpoint glue ---------------------------------------------------------------

namespace detail {

template <typename Model>
void store_model(Checkpoint& ckpt, Model& model) {
  model.visit_params([&](const std::string& n, Tensor& t) { ckpt.put(n, t); });
  model.visit_state([&](const std::string& n, Tensor& t) { ckpt.put(n, t); });
}

template <typename Model>
void load_model(const Checkpoint& ckpt, Model& model) {
  auto restore = [&](const std::string& n, Tensor& t) {
    const Tensor* src = ckpt.find(n);
    if (!src) throw std::runtime_error("checkpoint: missing tensor '" + n + "'");
    if (src->shape() != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + n + "': file " +
                               shape_str(src->shape()) + " vs model " + shape_str(t.shape()));
    std::copy(src->data(), src->data() + src->size(), t.data());
  };
  model.visit_params(restore);
  model.visit_state(restore);
}

inline void store_adam(Checkpoint& ckpt, Adam& opt) {
  for (auto& [name, m] : opt.moment1()) ckpt.put("__adam/m/" + name, Tensor(Shape{static_cast<int>(m.size())}, m));
  for (auto& [name, v] : opt.moment2()) ckpt.put("__adam/v/" + name, Tensor(Shape{static_cast<int>(v.size())}, v));
  ckpt.put_scalar("__adam/t", static_cast<double>(opt.step_count()));
}

inline void load_adam(const Checkpoint& ckpt, Adam& opt) {
  for (auto& [name, m] : opt.moment1()) {
    const Tensor& t = ckpt.get("__adam/m/" + name);
    if (t.size() != static_cast<long long>(m.size()))
      throw std::runtime_error("checkpoint: optimizer state size mismatch for '" + name + "'");
    std::copy(t.data(), t.data() + t.size(), m.begin());
  }
  for (auto& [name, v] : opt.moment2()) {
    const Tensor& t = ckpt.get("__adam/v/" + name);
    std::copy(t.data(), t.data() + t.size(), v.begin());
  }
  opt.set_step_count(static_cast<long long>(ckpt.get_scalar("__adam/t")));
}

struct Meta {
  int stage = 0;  // 0 = evaluator pretraining
  int epoch = -1;
  std::uint64_t seed = 0;
  std::uint64_t cfg_hash = 0;
  double val_metric = 0.0;
  double best_metric = 0.0;
};

inline void store_meta(Checkpoint& ckpt, const Meta& m) {
  ckpt.put_scalar("__meta/stage", m.stage);
  ckpt.put_scalar("__meta/epoch", m.epoch);
  ckpt.put_u64("__meta/seed", m.seed);
  ckpt.put_u64("__meta/config_hash", m.cfg_hash);
  ckpt.put_scalar("__meta/val_metric", m.val_metric);
  ckpt.put_scalar("__meta/best_metric", m.best_metric);
}

inline Meta read_meta(const Checkpoint& ckpt) {
  Meta m;
  m.stage = static_cast<int>(ckpt.get_scalar("__meta/stage"));
  m.epoch = static_cast<int>(ckpt.get_scalar("__meta/epoch"));
  m.seed = ckpt.get_u64("__meta/seed");
  m.cfg_hash = ckpt.get_u64("__meta/config_hash");
  m.val_metric = ckpt.get_scalar("__meta/val_metric");
  m.best_metric = ckpt.get_scalar("__meta/best_metric");
  return m;
}

inline void require_hash(const TrainConfig& cfg, const Meta& meta, const std::string& what) {
  const std::uint64_t want = config_hash(cfg);
  if (meta.cfg_hash != want)
    throw std::runtime_error(what + ": config mismatch, checkpoint hash " +
                             hash_hex(meta.cfg_hash) + " vs current config hash " +
                             hash_hex(want));
}

// Epoch log as CSV; append mode continues an interrupted run's file.
class EpochLog {
 public:
  EpochLog(const std::string& path, bool append) {
    f_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!f_) throw std::runtime_error("log: cannot open " + path);
    f_.precision(17);
    if (!append) f_ << "epoch,lr,loss_total,loss_e,loss_w,loss_a,val_metric\n";
  }
  void row(int epoch, double lr, double total, double le, double lw, double la, double val) {
    f_ << epoch << "," << lr << "," << total << "," << le << "," << lw << "," << la << "," << val
       << "\n";
    f_.flush();
  }

 private:
  std::ofstream f_;
};

inline std::vector<int> batch_labels(const std::vector<SyntheticSample>& samples,
                                     const std::vector<int>& order, std::size_t first,
                                     std::size_t count) {
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i)
    out[i] = samples[static_cast<std::size_t>(order[first + i])].label;
  return out;
}

inline std::vector<int> identity_order(std::size_t n) {
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  return order;
}

inline void require_finite(double loss, const char* stage, int epoch, long long batch) {
  if (!std::isfinite(loss))
    throw std::runtime_error(std::string(stage) + ": non-finite loss at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batch));
}

}  // namespace detail

// --- evaluation helpers ---------------------------------------------------------------

// Classifier accuracy of a model's logits over a split, in eval mode.
template <typename ForwardFn>
double classification_accuracy(const std::vector<SyntheticSample>& samples, int batch_size,
                               ForwardFn&& forward) {
  const auto order = detail::identity_order(samples.size());
  long long correct = 0;
  for (std::size_t first = 0; first < samples.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                    samples.size() - first);
    Tensor batch = stack_images(samples, order, first, count);
    Tensor logits = forward(batch);  // [count, k]
    const int k = logits.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      int arg = 0;
      for (int c = 1; c < k; ++c)
        if (logits[static_cast<long long>(i) * k + c] > logits[static_cast<long long>(i) * k + arg])
          arg = c;
      correct += arg == samples[first + i].label;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

struct InferenceResult {
  std::vector<Tensor> raw_maps;  // [h,w] each, generator resolution
  std::vector<Tensor> up_maps;   // [H,W] each, image resolution
  std::vector<int> top1;
  std::vector<std::vector<int>> top5;
};

// Maps plus the model's own class predictions for every sample of a split.
inline InferenceResult run_inference(LocalizerModel& model,
                                     const std::vector<SyntheticSample>& samples, int batch_size) {
  InferenceResult res;
  const auto order = detail::identity_order(samples.size());
  const int H = model.config().H, W = model.config().W;
  for (std::size_t first = 0; first < samples.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                    samples.size() - first);
    Tensor batch = stack_images(samples, order, first, count);
    auto out = model.stage1_forward(nullptr, batch, BnMode::eval);
    Tensor up = upsample_bilinear(nullptr, out.p_a, H, W);
    const int h = out.p_a.dim(2), w = out.p_a.dim(3);
    const int k = out.y.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      Tensor raw(Shape{h, w});
      std::copy(out.p_a.data() + static_cast<long long>(i) * h * w,
                out.p_a.data() + static_cast<long long>(i + 1) * h * w, raw.data());
      Tensor upm(Shape{H, W});
      std::copy(up.data() + static_cast<long long>(i) * H * W,
                up.data() + static_cast<long long>(i + 1) * H * W, upm.data());
      res.raw_maps.push_back(std::move(raw));
      res.up_maps.push_back(std::move(upm));
      const double* row = out.y.data() + static_cast<long long>(i) * k;
      auto t5 = top5_classes(row, k);
      res.top1.push_back(t5[0]);
      res.top5.push_back(std::move(t5));
    }
  }
  return res;
}

inline std::vector<PredictionRecord> records_at_threshold(
    const InferenceResult& inf, const std::vector<SyntheticSample>& samples, double theta) {
  std::vector<PredictionRecord> recs;
  recs.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    PredictionRecord r;
    r.pred_box = box_from_map(inf.up_maps[i], theta);
    r.top1 = inf.top1[i];
    r.top5 = inf.top5[i];
    r.truth = samples[i].label;
    r.gt_box = samples[i].gt_box;
    recs.push_back(std::move(r));
  }
  return recs;
}

// CorLoc of a model over a split at a fixed threshold (used for val selection).
inline double corloc_of(LocalizerModel& model, const std::vector<SyntheticSample>& samples,
                        int batch_size, double theta) {
  const InferenceResult inf = run_inference(model, samples, batch_size);
  long long ok = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    ok += iou(box_from_map(inf.up_maps[i], theta), samples[i].gt_box) >= 0.5;
  return static_cast<double>(ok) / static_cast<double>(samples.size());
}

// --- training loops ---------------------------------------------------------------

struct TrainResult {
  std::string best_path;
  std::string final_path;
  double best_metric = 0.0;
};

// Supervised pretraining of the stand-alone evaluator classifier on raw
// images. The saved val accuracy later gates the second stage.
// stop_after > 0 returns after that many epochs of this invocation, leaving
// a resumable last checkpoint behind (an interruption at an epoch boundary).
inline TrainResult pretrain_evaluator(const TrainConfig& cfg, const std::string& out_dir,
                                      const std::string& resume_path = "", int stop_after = -1) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const DataGenConfig dcfg = cfg.data_cfg();
  const ModelConfig mcfg = cfg.model_cfg();
  const auto train = generate_split(dcfg, Split::train);
  const auto val = generate_split(dcfg, Split::val);
  if (static_cast<int>(train.size()) < cfg.batch_size)
    throw std::runtime_error("pretrain_evaluator: train split smaller than one batch");

  Rng init_rng(stream_seed(cfg.seed, "init-eval"));
  EvaluatorModel model(mcfg, init_rng);
  Adam opt(model.all_params());

  int start_epoch = 0;
  double best = -1.0;
  const bool resuming = !resume_path.empty();
  if (resuming) {
    Checkpoint ckpt = load_checkpoint(resume_path);
    const auto meta = detail::read_meta(ckpt);
    if (meta.stage != 0) throw std::runtime_error("pretrain_evaluator: checkpoint is not an evaluator");
    detail::require_hash(cfg, meta, "pretrain_evaluator");
    detail::load_model(ckpt, model);
    detail::load_adam(ckpt, opt);
    start_epoch = meta.epoch + 1;
    best = meta.best_metric;
  }

  const std::string best_path = out_dir + "/evaluator_best.ckpt";
  const std::string last_path = out_dir + "/evaluator_last.ckpt";
  const std::string final_path = out_dir + "/evaluator_final.ckpt";
  detail::EpochLog log(out_dir + "/evaluator_log.csv", resuming);

  const std::size_t batches = train.size() / static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = start_epoch; epoch < cfg.epochs_evaluator; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs_evaluator, cfg.lr_evaluator);
    Rng shuffle_rng(stream_seed(cfg.seed, "shuffle-eval", static_cast<std::uint64_t>(epoch)));
    auto order = detail::identity_order(train.size());
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      Tensor batch = stack_images(train, order, b * static_cast<std::size_t>(cfg.batch_size),
                                  static_cast<std::size_t>(cfg.batch_size));
      Rng aug_rng(stream_seed(cfg.seed, "aug-eval", static_cast<std::uint64_t>(epoch),
                              static_cast<std::uint64_t>(b)));
      augment_batch_d4(batch, aug_rng);
      augment_batch_photometric(batch, aug_rng);
      const auto labels = detail::batch_labels(train, order, b * static_cast<std::size_t>(cfg.batch_size),
                                               static_cast<std::size_t>(cfg.batch_size));
      Tape tape;
      Tensor logits = model.forward(&tape, batch, BnMode::train);
      Tensor loss = cross_entropy(&tape, logits, labels);
      detail::require_finite(loss.value(), "pretrain_evaluator", epoch, static_cast<long long>(b));
      tape.backprop(loss);
      opt.step(lr);
      loss_sum += loss.value();
    }
    const double val_acc = classification_accuracy(val, cfg.batch_size, [&](const Tensor& x) {
      return model.forward(nullptr, x, BnMode::eval);
    });
    const double mean_loss = loss_sum / static_cast<double>(batches);
    log.row(epoch, lr, mean_loss, mean_loss, 0.0, 0.0, val_acc);

    Checkpoint ckpt;
    detail::store_model(ckpt, model);
    detail::store_adam(ckpt, opt);
    detail::Meta meta{0, epoch, cfg.seed, config_hash(cfg), val_acc, std::max(best, val_acc)};
    detail::store_meta(ckpt, meta);
    save_checkpoint(ckpt, last_path);
    if (val_acc > best) {
      best = val_acc;
      save_checkpoint(ckpt, best_path);
    }
    if (stop_after > 0 && epoch - start_epoch + 1 >= stop_after) break;
  }
  std::error_code ec;
  std::filesystem::copy_file(last_path, final_path, std::filesystem::copy_options::overwrite_existing, ec);
  if (ec) throw std::runtime_error("pretrain_evaluator: cannot write " + final_path);
  return {best_path, final_path, best};
}

// First stage: classification with the map-masked deep head plus the
// auxiliary head, both under cross-entropy with equal weight.
inline TrainResult train_stage1(const TrainConfig& cfg, const std::string& out_dir,
                                const std::string& resume_path = "", int stop_after = -1) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const DataGenConfig dcfg = cfg.data_cfg();
  const ModelConfig mcfg = cfg.model_cfg();
  const auto train = generate_split(dcfg, Split::train);
  const auto val = generate_split(dcfg, Split::val);
  if (static_cast<int>(train.size()) < cfg.batch_size)
    throw std::runtime_error("train_stage1: train split smaller than one batch");

  Rng init_rng(stream_seed(cfg.seed, "init-model"));
  LocalizerModel model(mcfg, init_rng);
  Adam opt(model.all_params());

  int start_epoch = 0;
  double best = -1.0;
  const bool resuming = !resume_path.empty();
  if (resuming) {
    Checkpoint ckpt = load_checkpoint(resume_path);
    const auto meta = detail::read_meta(ckpt);
    if (meta.stage != 1) throw std::runtime_error("train_stage1: checkpoint is not a stage-1 run");
    detail::require_hash(cfg, meta, "train_stage1");
    detail::load_model(ckpt, model);
    detail::load_adam(ckpt, opt);
    start_epoch = meta.epoch + 1;
    best = meta.best_metric;
  }

  const std::string best_path = out_dir + "/stage1_best.ckpt";
  const std::string last_path = out_dir + "/stage1_last.ckpt";
  const std::string final_path = out_dir + "/stage1_final.ckpt";
  detail::EpochLog log(out_dir + "/stage1_log.csv", resuming);

  const std::size_t batches = train.size() / static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = start_epoch; epoch < cfg.epochs_stage1; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs_stage1, cfg.lr_stage1);
    Rng shuffle_rng(stream_seed(cfg.seed, "shuffle-s1", static_cast<std::uint64_t>(epoch)));
    auto order = detail::identity_order(train.size());
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0, le_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      Tensor batch = stack_images(train, order, b * static_cast<std::size_t>(cfg.batch_size),
                                  static_cast<std::size_t>(cfg.batch_size));
      const auto labels = detail::batch_labels(train, order, b * static_cast<std::size_t>(cfg.batch_size),
                                               static_cast<std::size_t>(cfg.batch_size));
      Tape tape;
      auto out = model.stage1_forward(&tape, batch, BnMode::train);
      Tensor ce_main = cross_entropy(&tape, out.y, labels);
      Tensor ce_aux = cross_entropy(&tape, out.y_aux, labels);
      Tensor loss = add(&tape, ce_main, ce_aux);
      detail::require_finite(loss.value(), "train_stage1", epoch, static_cast<long long>(b));
      tape.backprop(loss);
      opt.step(lr);
      loss_sum += loss.value();
      le_sum += ce_main.value();
    }
    const double val_acc = classification_accuracy(val, cfg.batch_size, [&](const Tensor& x) {
      return model.stage1_forward(nullptr, x, BnMode::eval).y;
    });
    log.row(epoch, lr, loss_sum / static_cast<double>(batches), le_sum / static_cast<double>(batches),
            0.0, 0.0, val_acc);

    Checkpoint ckpt;
    detail::store_model(ckpt, model);
    detail::store_adam(ckpt, opt);
    detail::Meta meta{1, epoch, cfg.seed, config_hash(cfg), val_acc, std::max(best, val_acc)};
    detail::store_meta(ckpt, meta);
    save_checkpoint(ckpt, last_path);
    if (val_acc > best) {
      best = val_acc;
      save_checkpoint(ckpt, best_path);
    }
    if (stop_after > 0 && epoch - start_epoch + 1 >= stop_after) break;
  }
  std::error_code ec;
  std::filesystem::copy_file(last_path, final_path, std::filesystem::copy_options::overwrite_existing, ec);
  if (ec) throw std::runtime_error("train_stage1: cannot write " + final_path);
  return {best_path, final_path, best};
}

// Second stage: online refinement against the frozen evaluator. Trains the
// stem (unless frozen by flag), the generator, and the map head; the deep
// classifier, the auxiliary head, and the evaluator are never updated.
inline TrainResult train_stage2(const TrainConfig& cfg, const std::string& stage1_ckpt_path,
                                const std::string& evaluator_ckpt_path, const std::string& out_dir,
                                const std::string& resume_path = "", int stop_after = -1) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const DataGenConfig dcfg = cfg.data_cfg();
  const ModelConfig mcfg = cfg.model_cfg();
  const auto train = generate_split(dcfg, Split::train);
  const auto val = generate_split(dcfg, Split::val);
  if (static_cast<int>(train.size()) < cfg.batch_size)
    throw std::runtime_error("train_stage2: train split smaller than one batch");

  Rng init_rng(stream_seed(cfg.seed, "init-model"));
  LocalizerModel model(mcfg, init_rng);
  {
    Checkpoint s1 = load_checkpoint(stage1_ckpt_path);
    const auto meta = detail::read_meta(s1);
    if (meta.stage != 1)
      throw std::runtime_error("train_stage2: '" + stage1_ckpt_path +
                               "' is not a stage-1 checkpoint (stage " +
                               std::to_string(meta.stage) + ")");
    detail::require_hash(cfg, meta, "train_stage2 (stage-1 checkpoint)");
    detail::load_model(s1, model);
  }

  Rng eval_init_rng(stream_seed(cfg.seed, "init-eval"));
  EvaluatorModel evaluator(mcfg, eval_init_rng);
  {
    Checkpoint ev = load_checkpoint(evaluator_ckpt_path);
    const auto meta = detail::read_meta(ev);
    if (meta.stage != 0)
      throw std::runtime_error("train_stage2: '" + evaluator_ckpt_path +
                               "' is not an evaluator checkpoint");
    detail::require_hash(cfg, meta, "train_stage2 (evaluator checkpoint)");
    if (meta.val_metric < 0.95)
      throw std::runtime_error(
          "train_stage2: evaluator failed its accuracy gate (val accuracy " +
          std::to_string(meta.val_metric) + " < 0.95); retrain the evaluator first");
    detail::load_model(ev, evaluator);
  }
  evaluator.freeze();

  // Trainable set: generator and map head, plus the stem unless frozen.
  if (cfg.ablation.freeze_stem)
    for (Tensor& t : model.group_params("c1")) t.set_requires_grad(false);
  std::vector<Tensor> train_params;
  if (!cfg.ablation.freeze_stem)
    for (Tensor& t : model.group_params("c1")) train_params.push_back(t);
  for (Tensor& t : model.group_params("d")) train_params.push_back(t);
  for (Tensor& t : model.group_params("p1")) train_params.push_back(t);
  Adam opt(train_params);

  Stage2LossFlags flags;
  flags.use_weighted_entropy = cfg.ablation.use_Lw || cfg.ablation.use_Lh_instead_of_Lw;
  flags.use_area = cfg.ablation.use_La;
  flags.plain_entropy_instead = cfg.ablation.use_Lh_instead_of_Lw;
  flags.detach_gamma = cfg.ablation.detach_gamma;

  int start_epoch = 0;
  double best = -1.0;
  const bool resuming = !resume_path.empty();
  if (resuming) {
    Checkpoint ckpt = load_checkpoint(resume_path);
    const auto meta = detail::read_meta(ckpt);
    if (meta.stage != 2) throw std::runtime_error("train_stage2: checkpoint is not a stage-2 run");
    detail::require_hash(cfg, meta, "train_stage2");
    detail::load_model(ckpt, model);
    detail::load_adam(ckpt, opt);
    start_epoch = meta.epoch + 1;
    best = meta.best_metric;
  }

  const std::string best_path = out_dir + "/stage2_best.ckpt";
  const std::string last_path = out_dir + "/stage2_last.ckpt";
  const std::string final_path = out_dir + "/stage2_final.ckpt";
  detail::EpochLog log(out_dir + "/stage2_log.csv", resuming);

  const std::size_t batches = train.size() / static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = start_epoch; epoch < cfg.epochs_stage2; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs_stage2, cfg.lr_stage2);
    Rng shuffle_rng(stream_seed(cfg.seed, "shuffle-s2", static_cast<std::uint64_t>(epoch)));
    auto order = detail::identity_order(train.size());
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0, le_sum = 0.0, lw_sum = 0.0, la_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      Tensor batch = stack_images(train, order, b * static_cast<std::size_t>(cfg.batch_size),
                                  static_cast<std::size_t>(cfg.batch_size));
      const auto labels = detail::batch_labels(train, order, b * static_cast<std::size_t>(cfg.batch_size),
                                               static_cast<std::size_t>(cfg.batch_size));
      Tape tape;
      Tensor p_a = model.infer_map(&tape, batch, BnMode::train);
      Tensor erase_mask;
      const Tensor* mask_ptr = nullptr;
      if (cfg.ablation.use_AE) {
        erase_mask = erase_mask_batch(
            p_a, cfg.erase,
            stream_seed(cfg.seed, "erase", static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)));
        mask_ptr = &erase_mask;
      }
      auto out = stage2_from_map(&tape, evaluator, batch, p_a, mask_ptr);
      auto parts = stage2_total_loss(&tape, out.y, labels, out.p_a, cfg.loss, flags);
      detail::require_finite(parts.total.value(), "train_stage2", epoch, static_cast<long long>(b));
      tape.backprop(parts.total);
      evaluator.visit_params([](const std::string& n, Tensor& t) {
        if (!t.has_grad()) return;
        for (double g : t.grad())
          if (g != 0.0)
            throw std::logic_error("train_stage2: gradient written to frozen evaluator parameter '" +
                                   n + "'");
      });
      opt.step(lr);
      loss_sum += parts.total.value();
      le_sum += parts.evaluation.value();
      lw_sum += parts.weighted.value();
      la_sum += parts.area.value();
    }
    const double val_corloc = corloc_of(model, val, cfg.batch_size, 0.5);
    log.row(epoch, lr, loss_sum / static_cast<double>(batches), le_sum / static_cast<double>(batches),
            lw_sum / static_cast<double>(batches), la_sum / static_cast<double>(batches), val_corloc);

    Checkpoint ckpt;
    detail::store_model(ckpt, model);
    detail::store_adam(ckpt, opt);
    detail::Meta meta{2, epoch, cfg.seed, config_hash(cfg), val_corloc, std::max(best, val_corloc)};
    detail::store_meta(ckpt, meta);
    save_checkpoint(ckpt, last_path);
    if (val_corloc > best) {
      best = val_corloc;
      save_checkpoint(ckpt, best_path);
    }
    if (stop_after > 0 && epoch - start_epoch + 1 >= stop_after) break;
  }
  std::error_code ec;
  std::filesystem::copy_file(last_path, final_path, std::filesystem::copy_options::overwrite_existing, ec);
  if (ec) throw std::runtime_error("train_stage2: cannot write " + final_path);
  return {best_path, final_path, best};
}

// --- evaluation entry points ------------------------------------------------------

// Loads a stage-1 or stage-2 checkpoint into a fresh model.
inline LocalizerModel load_localizer(const TrainConfig& cfg, const std::string& ckpt_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto meta = detail::read_meta(ckpt);
  if (meta.stage != 1 && meta.stage != 2)
    throw std::runtime_error("load_localizer: '" + ckpt_path + "' holds stage " +
                             std::to_string(meta.stage) + ", expected 1 or 2");
  detail::require_hash(cfg, meta, "load_localizer");
  Rng init_rng(stream_seed(cfg.seed, "init-model"));
  LocalizerModel model(cfg.model_cfg(), init_rng);
  detail::load_model(ckpt, model);
  return model;
}

// Full metric report at one threshold; writes metrics.csv and histogram.csv.
inline MetricsReport evaluate_checkpoint(const TrainConfig& cfg, const std::string& ckpt_path,
                                         Split split, double theta, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  LocalizerModel model = load_localizer(cfg, ckpt_path);
  const auto samples = generate_split(cfg.data_cfg(), split);
  const InferenceResult inf = run_inference(model, samples, cfg.batch_size);
  MetricsReport rep = score_dataset(records_at_threshold(inf, samples, theta));
  const HistogramResult hist = activation_histogram(inf.raw_maps);
  rep.histogram = hist.bins;
  rep.uncertain_mass = hist.uncertain_mass;
  write_metrics_csv(out_dir + "/metrics.csv", rep);
  write_histogram_csv(out_dir + "/histogram.csv", hist);
  return rep;
}

// CorLoc at each threshold of the sweep grid {0.1, ..., 0.9}; maps are
// computed once and re-binarized.
inline std::vector<std::pair<double, double>> threshold_sweep(const TrainConfig& cfg,
                                                              const std::string& ckpt_path,
                                                              Split split,
                                                              const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  LocalizerModel model = load_localizer(cfg, ckpt_path);
  const auto samples = generate_split(cfg.data_cfg(), split);
  const InferenceResult inf = run_inference(model, samples, cfg.batch_size);
  std::vector<std::pair<double, double>> rows;
  for (int t = 1; t <= 9; ++t) {
    const double theta = t / 10.0;
    const MetricsReport rep = score_dataset(records_at_threshold(inf, samples, theta));
    rows.emplace_back(theta, rep.corloc);
  }
  write_sweep_csv(out_dir + "/sweep.csv", rows);
  return rows;
}

// Histogram report only.
inline HistogramResult map_histogram(const TrainConfig& cfg, const std::string& ckpt_path,
                                     Split split, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  LocalizerModel model = load_localizer(cfg, ckpt_path);
  const auto samples = generate_split(cfg.data_cfg(), split);
  const InferenceResult inf = run_inference(model, samples, cfg.batch_size);
  const HistogramResult hist = activation_histogram(inf.raw_maps);
  write_histogram_csv(out_dir + "/histogram.csv", hist);
  return hist;
}

// --- ablation grid ---------------------------------------------------------------

struct AblationRow {
  bool use_Lw, use_La, use_AE, use_Lh;
  double corloc;
};

// The eight {Lw, La, AE} combinations plus the plain-entropy substitution,
// all trained from the same stage-1 checkpoint against the same evaluator.
inline std::vector<AblationRow> run_ablation(const TrainConfig& base_cfg,
                                             const std::string& stage1_ckpt,
                                             const std::string& evaluator_ckpt,
                                             const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<AblationRow> rows;
  auto run_one = [&](bool lw, bool la, bool ae, bool lh, const std::string& tag) {
    TrainConfig cfg = base_cfg;
    cfg.stage = 2;
    cfg.ablation.use_Lw = lw;
    cfg.ablation.use_La = la;
    cfg.ablation.use_AE = ae;
    cfg.ablation.use_Lh_instead_of_Lw = lh;
    const std::string run_dir = out_dir + "/" + tag;
    const TrainResult r = train_stage2(cfg, stage1_ckpt, evaluator_ckpt, run_dir);
    const MetricsReport rep = evaluate_checkpoint(cfg, r.best_path, Split::test, 0.5, run_dir);
    rows.push_back({lw, la, ae, lh, rep.corloc});
  };
  for (int bits = 0; bits < 8; ++bits) {
    const bool lw = (bits & 4) != 0, la = (bits & 2) != 0, ae = (bits & 1) != 0;
    run_one(lw, la, ae, false,
            std::string("ab_") + (lw ? "1" : "0") + (la ? "1" : "0") + (ae ? "1" : "0"));
  }
  run_one(false, true, true, true, "ab_lh");

  std::ofstream f(out_dir + "/ablation.csv");
  if (!f) throw std::runtime_error("run_ablation: cannot open " + out_dir + "/ablation.csv");
  f.precision(17);
  f << "use_Lw,use_La,use_AE,use_Lh_instead_of_Lw,corloc\n";
  for (const auto& r : rows)
    f << r.use_Lw << "," << r.use_La << "," << r.use_AE << "," << r.use_Lh << "," << r.corloc
      << "\n";
  return rows;
}

}  // namespace actloc
