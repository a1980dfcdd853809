#pragma once

// Training procedures: MIM pretraining, supervised fine-tuning with early
// stopping, sequential batch updates with optional replay, and evaluation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "nlxct/checkpoint.hpp"
#include "nlxct/config.hpp"
#include "nlxct/encoder.hpp"
#include "nlxct/metrics.hpp"
#include "nlxct/mim.hpp"
#include "nlxct/optim.hpp"
#include "nlxct/synth.hpp"

namespace nlxct {

// ---------------------------------------------------------------------------
// Data sources

/// Slices of one manifest, read from disk or rendered in memory, restricted to
/// a set of permitted splits. Reads of other splits throw.
class SliceSource {
 public:
  static SliceSource disk(Manifest m, std::filesystem::path root, AccessLog* log = nullptr) {
    SliceSource s(std::move(m), log);
    s.root_ = std::move(root);
    return s;
  }

  static SliceSource rendered(Manifest m, RenderConfig render, AccessLog* log = nullptr) {
    SliceSource s(std::move(m), log);
    s.render_ = render;
    return s;
  }

  /// Copy restricted to the intersection of the current and given splits.
  SliceSource gated(const std::set<Split>& allowed) const {
    SliceSource s = *this;
    std::set<Split> keep;
    for (Split x : allowed)
      if (allowed_.count(x)) keep.insert(x);
    s.allowed_ = keep;
    return s;
  }

  SliceSource with_manifest(Manifest m) const {
    SliceSource s = *this;
    s.manifest_ = std::move(m);
    return s;
  }

  SliceSet load(Split split) const {
    if (!allowed_.count(split))
      throw ContractError(std::string("data access: split '") + split_name(split) + "' is not permitted in this stage");
    if (root_) return ManifestLoader(*root_, {split}, log_).load(manifest_, split);
    SliceSet set;
    for (const auto& r : manifest_.slices) {
      if (r.split != split) continue;
      if (log_) log_->record(split, r.path);
      set.append(generate_slice(r.render_class, r.seed, r.drift, render_), r.label, r.order_id);
    }
    if (set.size() == 0) throw IoError(std::string("no '") + split_name(split) + "' slices in manifest");
    return set;
  }

  const Manifest& manifest() const { return manifest_; }

 private:
  SliceSource(Manifest m, AccessLog* log)
      : manifest_(std::move(m)), allowed_{Split::Train, Split::Val, Split::Test, Split::Unlabeled}, log_(log) {}

  Manifest manifest_;
  std::set<Split> allowed_;
  AccessLog* log_ = nullptr;
  std::optional<std::filesystem::path> root_;
  RenderConfig render_{};
};

// ---------------------------------------------------------------------------
// Batching and evaluation

/// Normalized views of the selected samples as [B×1×S×S]; training views are
/// augmented with per-sample streams derived from (seed, epoch_tag, index).
inline Tensor make_batch(const SliceSet& set, std::span<const std::size_t> idx, std::size_t size, const AugmentConfig& aug,
                         const NormStats& norm, bool train, std::uint64_t seed, std::uint64_t epoch_tag) {
  Tensor x({idx.size(), 1, size, size});
  std::vector<float> view(size * size);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const float* src = set.image(idx[k]);
    if (train) {
      Rng rng = Rng::derive(seed, Stream::Augment, epoch_tag, idx[k]);
      train_view(src, set.height, set.width, size, aug, rng, view.data());
    } else {
      eval_view(src, set.height, set.width, size, aug, view.data());
    }
    double* dst = x.data().data() + k * size * size;
    for (std::size_t p = 0; p < size * size; ++p) dst[p] = (double(view[p]) - norm.mean) / norm.stddev;
  }
  return x;
}

inline std::vector<int> predict(const Classifier& model, const SliceSet& set, const AugmentConfig& aug, const NormStats& norm,
                                std::size_t batch_size = 64) {
  std::vector<int> out;
  out.reserve(set.size());
  const std::size_t S = model.encoder.config().image_size;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
    Tape tape(false);
    const Tensor logits = model.forward(tape, make_batch(set, idx, S, aug, norm, false, 0, 0));
    const std::size_t C = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = logits.data().subspan(b * C, C);
      out.push_back(int(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

inline ConfusionMatrix evaluate(const Classifier& model, const SliceSet& set, const AugmentConfig& aug, const NormStats& norm) {
  const std::vector<int> pred = predict(model, set, aug, norm);
  ConfusionMatrix cm(model.encoder.config().num_classes);
  cm.add(set.labels, pred);
  return cm;
}

// ---------------------------------------------------------------------------
// Shared training utilities

inline std::unique_ptr<Optimizer> make_optimizer(const OptimSettings& o, double lr, double weight_decay) {
  switch (o.kind) {
    case OptimizerKind::DeepMomentum:
      return std::make_unique<DeepMomentum>(DeepMomentumConfig{lr, o.momentum, o.rho, o.gamma, weight_decay});
    case OptimizerKind::Momentum:
      return std::make_unique<MomentumSgd>(MomentumConfig{lr, o.momentum, weight_decay});
    case OptimizerKind::AdamW:
      return std::make_unique<AdamW>(AdamWConfig{lr, 0.9, 0.999, 1e-8, weight_decay});
  }
  throw ConfigError("unknown optimizer");
}

using Snapshot = std::vector<std::vector<double>>;

inline Snapshot snapshot(const ParamList& params) {
  Snapshot s;
  for (const auto& p : params) s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return s;
}

inline void restore_snapshot(const ParamList& params, const Snapshot& s) {
  if (s.size() != params.size()) throw ContractError("snapshot does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::copy(s[i].begin(), s[i].end(), t.data().begin());
  }
}

/// Tracks the best validation score; ties keep the earlier epoch.
class BestTracker {
 public:
  /// Returns true when the score is a new best.
  bool update(std::size_t epoch, double score) {
    if (best_epoch_ == 0 || score > best_) {
      best_ = score, best_epoch_ = epoch;
      return true;
    }
    return false;
  }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  bool exhausted(std::size_t epoch, std::size_t patience) const { return best_epoch_ > 0 && epoch - best_epoch_ >= patience; }

 private:
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
};

/// Inverse class frequency over the pool, normalized to mean 1 across the
/// classes present; absent classes get weight 1 before normalization.
inline std::vector<double> inverse_frequency_weights(std::span<const int> labels, std::size_t classes) {
  std::vector<double> count(classes, 0.0);
  for (int y : labels) count.at(std::size_t(y)) += 1.0;
  std::vector<double> w(classes, 1.0);
  for (std::size_t c = 0; c < classes; ++c)
    if (count[c] > 0.0) w[c] = double(labels.size()) / count[c];
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / double(classes);
  for (double& v : w) v /= mean;
  return w;
}

inline void check_finite_loss(double loss, const std::string& stage, std::size_t epoch) {
  if (!std::isfinite(loss))
    throw TrainingDiverged(stage + ": loss became non-finite in epoch " + std::to_string(epoch));
}

/// One pass over `order` in minibatches with cross-entropy; returns the mean
/// sample loss. Each optimizer step is followed by the slow-trace update.
inline double train_classifier_epoch(Classifier& model, const ParamList& params, Optimizer& opt, const SliceSet& data,
                                     const std::vector<std::size_t>& order, std::size_t batch_size, const AugmentConfig& aug,
                                     const NormStats& norm, std::uint64_t seed, std::uint64_t epoch_tag,
                                     const std::vector<double>* class_weights) {
  const std::size_t S = model.encoder.config().image_size;
  double total = 0.0;
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    idx.assign(order.begin() + long(start), order.begin() + long(std::min(order.size(), start + batch_size)));
    labels.clear();
    for (std::size_t i : idx) labels.push_back(data.labels[i]);
    zero_grads(params);
    Tape tape(true);
    const Tensor logits = model.forward(tape, make_batch(data, idx, S, aug, norm, true, seed, epoch_tag));
    std::optional<std::span<const double>> w;
    if (class_weights) w = std::span<const double>(*class_weights);
    const Tensor loss = softmax_cross_entropy(tape, logits, labels, w);
    total += loss.item() * double(idx.size());
    if (!std::isfinite(loss.item())) return loss.item();
    tape.backward(loss);
    opt.step(params);
    model.slow_update();
  }
  return total / double(order.size());
}

inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::uint64_t tag) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, Stream::Shuffle, tag);
  rng.shuffle(order);
  return order;
}

inline void store_norm(Checkpoint& ck, const NormStats& norm) { ck.add_tensor("meta.norm", Tensor({2}, {norm.mean, norm.stddev})); }

inline NormStats load_norm(const Checkpoint& ck) {
  const Tensor t = ck.tensor("meta.norm");
  if (t.numel() != 2 || !(t[1] > 0.0)) throw CheckpointError("checkpoint normalization entry is malformed");
  return {t[0], t[1]};
}

inline Checkpoint model_checkpoint(const ParamList& params, const NormStats& norm, const RunConfig& cfg, std::size_t steps,
                                   const std::string& stage) {
  Checkpoint ck;
  ck.add_params(params);
  store_norm(ck, norm);
  ck.add_text("meta.stage", stage);
  ck.add_text("meta.steps", std::to_string(steps));
  ck.add_text("meta.rng", "seed=" + std::to_string(cfg.seed));
  ck.add_text("meta.config", resolved_config(cfg));
  return ck;
}

// ---------------------------------------------------------------------------
// MIM pretraining

struct PretrainResult {
  std::vector<double> epoch_loss;
  Checkpoint encoder;  // encoder parameters and normalization
  Checkpoint decoder;  // reconstruction head, kept apart
};

inline std::string loss_curve_csv(const std::vector<double>& losses) {
  std::string out = "epoch,mean_loss\n";
  for (std::size_t e = 0; e < losses.size(); ++e) out += std::to_string(e + 1) + "," + format_fixed(losses[e], 6) + "\n";
  return out;
}

/// Mean masked reconstruction loss over a set, using unaugmented views and
/// one fixed mask per sample (mask epoch 0, which training never draws).
inline double mim_eval_loss(const MimModel& model, const SliceSet& set, const RunConfig& cfg, const NormStats& norm) {
  const std::size_t S = cfg.model.image_size;
  std::vector<std::size_t> idx;
  double total = 0.0;
  for (std::size_t start = 0; start < set.size(); start += 64) {
    idx.clear();
    for (std::size_t i = start; i < std::min(set.size(), start + 64); ++i) idx.push_back(i);
    const Tensor target = make_batch(set, idx, S, cfg.augment, norm, false, 0, 0);
    Tensor mask(target.shape());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Tensor m = make_mask(S, S, {cfg.pretrain.mask_patch, cfg.pretrain.mask_ratio,
                                        derive_seed(cfg.seed, {std::uint64_t(Stream::Mask), 0, idx[k]})});
      std::copy(m.data().begin(), m.data().end(), mask.data().begin() + long(k * S * S));
    }
    Tape tape(false);
    total += mim_loss(tape, model.reconstruct(tape, corrupt(target, mask)), target, mask).item() * double(idx.size());
  }
  return total / double(set.size());
}

/// Masked reconstruction on the unlabeled pool with AdamW. When out_dir is
/// set, the encoder checkpoint is rewritten after every completed epoch, so
/// a diverged run leaves the last good one in place.
inline PretrainResult pretrain_mim(const RunConfig& cfg, const SliceSource& source,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                   std::ostream* progress = nullptr) {
  cfg.validate();
  const SliceSet pool = source.gated({Split::Unlabeled}).load(Split::Unlabeled);
  const NormStats norm = compute_norm_stats(pool);
  Rng init = Rng::derive(cfg.seed, Stream::Init);
  MimModel model(cfg.model, init);
  const ParamList params = model.params();
  AdamW opt(AdamWConfig{cfg.pretrain.lr, 0.9, 0.999, 1e-8, cfg.pretrain.weight_decay});
  const std::size_t S = cfg.model.image_size;

  auto split_checkpoints = [&](PretrainResult& r) {
    ParamList enc, dec;
    for (const auto& p : params) (p.name.starts_with("encoder.") ? enc : dec).push_back(p);
    r.encoder = model_checkpoint(enc, norm, cfg, opt.steps(), "pretrain");
    r.decoder = Checkpoint();
    r.decoder.add_params(dec);
  };

  PretrainResult result;
  std::vector<std::size_t> idx;
  for (std::size_t epoch = 1; epoch <= cfg.pretrain.epochs; ++epoch) {
    const auto order = shuffled_order(pool.size(), cfg.seed, epoch);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.pretrain.batch_size) {
      idx.assign(order.begin() + long(start), order.begin() + long(std::min(order.size(), start + cfg.pretrain.batch_size)));
      const Tensor target = make_batch(pool, idx, S, cfg.augment, norm, true, cfg.seed, epoch);
      Tensor mask(target.shape());
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const MaskSpec spec{cfg.pretrain.mask_patch, cfg.pretrain.mask_ratio,
                            derive_seed(cfg.seed, {std::uint64_t(Stream::Mask), epoch, idx[k]})};
        const Tensor m = make_mask(S, S, spec);
        std::copy(m.data().begin(), m.data().end(), mask.data().begin() + long(k * S * S));
      }
      zero_grads(params);
      Tape tape(true);
      const Tensor loss = mim_loss(tape, model.reconstruct(tape, corrupt(target, mask)), target, mask);
      check_finite_loss(loss.item(), "pretrain", epoch);
      total += loss.item() * double(idx.size());
      tape.backward(loss);
      opt.step(params);
      model.slow_update();
    }
    result.epoch_loss.push_back(total / double(order.size()));
    if (progress) *progress << "pretrain epoch " << epoch << " loss " << format_fixed(result.epoch_loss.back(), 6) << "\n";
    if (out_dir) {
      split_checkpoints(result);
      save_checkpoint(result.encoder, *out_dir / "encoder.nlck");
      write_text((*out_dir / "pretrain_loss.csv").string(), loss_curve_csv(result.epoch_loss));
    }
  }
  split_checkpoints(result);
  return result;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct EpochRecord {
  std::size_t epoch;
  double train_loss;
  double val_macro_f1;
};

struct FinetuneResult {
  Checkpoint model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_macro_f1 = 0.0;
  ConfusionMatrix val_confusion{1};
};

inline std::string finetune_log_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_macro_f1\n";
  for (const auto& r : history)
    out += std::to_string(r.epoch) + "," + format_fixed(r.train_loss, 6) + "," + format_fixed(r.val_macro_f1, 6) + "\n";
  return out;
}

/// Cross-entropy training on the training split with per-epoch validation
/// macro F1; the best epoch's parameters are restored before returning.
/// With an init checkpoint, its encoder entries replace the initial encoder.
inline FinetuneResult finetune(const RunConfig& cfg, const SliceSource& source, const Checkpoint* init = nullptr,
                               std::ostream* progress = nullptr) {
  cfg.validate();
  const SliceSource data =
      source.gated({Split::Train, Split::Val}).with_manifest(stratified_fraction(source.manifest(), cfg.finetune.labeled_fraction));
  const SliceSet train = data.load(Split::Train), val = data.load(Split::Val);
  const NormStats norm = compute_norm_stats(train);

  Rng rng = Rng::derive(cfg.seed, Stream::Init);
  Classifier model(cfg.model, rng);
  const ParamList params = model.params();
  if (init) init->restore(params, "encoder.");
  auto opt = make_optimizer(cfg.optim, cfg.finetune.lr, cfg.finetune.weight_decay);

  FinetuneResult result;
  BestTracker best;
  Snapshot best_params = snapshot(params);
  for (std::size_t epoch = 1; epoch <= cfg.finetune.epochs; ++epoch) {
    const auto order = shuffled_order(train.size(), cfg.seed, 10000 + epoch);
    const double loss = train_classifier_epoch(model, params, *opt, train, order, cfg.finetune.batch_size, cfg.augment, norm,
                                               cfg.seed, 10000 + epoch, nullptr);
    check_finite_loss(loss, "finetune", epoch);
    const double f1 = macro_f1(evaluate(model, val, cfg.augment, norm));
    result.history.push_back({epoch, loss, f1});
    if (progress) *progress << "finetune epoch " << epoch << " loss " << format_fixed(loss, 4) << " val_f1 " << format_fixed(f1, 4) << "\n";
    if (best.update(epoch, f1)) best_params = snapshot(params);
    if (best.exhausted(epoch, cfg.finetune.patience)) break;
  }
  restore_snapshot(params, best_params);
  result.best_epoch = best.best_epoch();
  result.best_val_macro_f1 = best.best();
  result.val_confusion = evaluate(model, val, cfg.augment, norm);
  result.model = model_checkpoint(params, norm, cfg, opt->steps(), "finetune");
  return result;
}

// ---------------------------------------------------------------------------
// Sequential batch updates

struct ContinualResult {
  PerfMatrix perf{1};
  ContinualReport report;
  std::vector<std::size_t> pool_sizes;  // training pool per step
  Checkpoint model;
};

/// For each batch t: train epochs_per_batch on the pool (batches 1..t with
/// full replay, batch t alone without), then score every batch's held-out
/// orders, filling row t of the performance matrix. Row t−1's entry for
/// batch t is its pre-adaptation score.
inline ContinualResult continual_run(const RunConfig& cfg, const std::vector<SliceSource>& batches, const Checkpoint& init,
                                     std::ostream* progress = nullptr) {
  cfg.validate();
  if (batches.size() < 2) throw ConfigError("continual run needs at least two batches");
  const NormStats norm = load_norm(init);
  Rng rng = Rng::derive(cfg.seed, Stream::Init);
  Classifier model(cfg.model, rng);
  const ParamList params = model.params();
  init.restore(params);

  std::vector<SliceSet> adapt, held_out;
  for (const auto& b : batches) {
    adapt.push_back(b.gated({Split::Train}).load(Split::Train));
    held_out.push_back(b.gated({Split::Test}).load(Split::Test));
  }

  ContinualResult result;
  result.perf = PerfMatrix(batches.size());
  std::size_t steps = 0;
  SliceSet pool;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    if (cfg.continual.replay == Replay::None) pool = SliceSet();
    pool.append(adapt[t]);
    result.pool_sizes.push_back(pool.size());
    const auto weights = inverse_frequency_weights(pool.labels, cfg.model.num_classes);
    auto opt = make_optimizer(cfg.optim, cfg.continual.lr, cfg.continual.weight_decay);
    opt->set_multiplier(ParamGroup::Backbone, cfg.continual.backbone_lr_mult);
    opt->set_multiplier(ParamGroup::Head, cfg.continual.head_lr_mult);
    for (std::size_t epoch = 1; epoch <= cfg.continual.epochs_per_batch; ++epoch) {
      const std::uint64_t tag = 100000 * (t + 1) + epoch;
      const auto order = shuffled_order(pool.size(), cfg.seed, tag);
      const double loss = train_classifier_epoch(model, params, *opt, pool, order, cfg.continual.batch_size, cfg.augment, norm,
                                                 cfg.seed, tag, &weights);
      check_finite_loss(loss, "continual", epoch);
    }
    steps += opt->steps();
    for (std::size_t b = 0; b < batches.size(); ++b)
      result.perf.set(t, b, 100.0 * macro_f1(evaluate(model, held_out[b], cfg.augment, norm)));
    if (progress) {
      *progress << "continual step " << t + 1 << " pool " << pool.size() << " F:";
      for (std::size_t b = 0; b < batches.size(); ++b) *progress << " " << format_fixed(result.perf.at(t, b), 2);
      *progress << "\n";
    }
  }
  result.report = continual_report(result.perf);
  result.model = model_checkpoint(params, norm, cfg, steps, "continual");
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation of a saved model

inline ConfusionMatrix evaluate_checkpoint(const RunConfig& cfg, const SliceSource& source, const Checkpoint& ck) {
  cfg.validate();
  Rng rng = Rng::derive(cfg.seed, Stream::Init);
  Classifier model(cfg.model, rng);
  ck.restore(model.params());
  return evaluate(model, source.gated({Split::Test}).load(Split::Test), cfg.augment, load_norm(ck));
}

}  // namespace nlxct
