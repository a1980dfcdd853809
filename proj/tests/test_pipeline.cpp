#include <catch_amalgamated.hpp>

#include <filesystem>

#include "nlxct/pipeline.hpp"

using namespace nlxct;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
data.image_size = 32
data.pitch = 8
data.slices = 112
data.orders = 4, 2, 2
data.unlabeled = 64
data.unlabeled_orders = 4
continual.batches = 3
continual.slices_per_batch = 40
model.image_size = 32
model.stage_channels = 4, 8, 8, 8
model.patch_strides = 2, 2, 2, 1
model.d_state = 3
model.group_width = 4
pretrain.epochs = 2
pretrain.batch_size = 16
finetune.epochs = 3
finetune.batch_size = 16
continual.epochs_per_batch = 2
continual.batch_size = 16
)";

RunConfig tiny(const std::string& overrides = "") {
  RunConfig cfg;
  apply_config_text(cfg, kTiny);
  apply_config_text(cfg, overrides);
  cfg.validate();
  return cfg;
}

SliceSource labeled(const RunConfig& cfg, AccessLog* log = nullptr) {
  return SliceSource::rendered(plan_labeled(cfg.data), cfg.data.render, log);
}
SliceSource unlabeled(const RunConfig& cfg, AccessLog* log = nullptr) {
  return SliceSource::rendered(plan_unlabeled(cfg.data), cfg.data.render, log);
}
std::vector<SliceSource> continual_batches(const RunConfig& cfg) {
  std::vector<SliceSource> out;
  for (auto& m : plan_continual(cfg.continual_data, cfg.data.class_mix)) out.push_back(SliceSource::rendered(m, cfg.data.render));
  return out;
}

std::vector<double> values(const Checkpoint& ck) {
  std::vector<double> v;
  for (const auto& e : ck.entries()) v.insert(v.end(), e.values.begin(), e.values.end());
  return v;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("nlxct_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Metric CSVs of a pretrain → finetune → eval → continual chain.
std::string chain_csvs(const RunConfig& cfg) {
  const auto pre = pretrain_mim(cfg, unlabeled(cfg));
  const auto ft = finetune(cfg, labeled(cfg), &pre.encoder);
  const auto cm = evaluate_checkpoint(cfg, labeled(cfg), ft.model);
  const auto cont = continual_run(cfg, continual_batches(cfg), ft.model);
  return loss_curve_csv(pre.epoch_loss) + finetune_log_csv(ft.history) + metrics_csv(classification_rows(cm)) +
         confusion_csv(cm, false) + perf_matrix_csv(cont.perf) + metrics_csv(continual_rows(cont.report));
}

}  // namespace

TEST_CASE("best-checkpoint selection", "[pipeline]") {
  BestTracker best;
  const double scores[] = {0.5, 0.7, 0.6};
  for (std::size_t e = 0; e < 3; ++e) best.update(e + 1, scores[e]);
  CHECK(best.best_epoch() == 2);
  CHECK(best.best() == 0.7);
  CHECK_FALSE(best.exhausted(3, 2));
  CHECK(best.exhausted(4, 2));
  CHECK_FALSE(best.update(5, 0.7));
  CHECK(best.best_epoch() == 2);
}

TEST_CASE("inverse-frequency class weights", "[pipeline]") {
  const std::vector<int> labels{0, 0, 0, 1, 2, 2};
  const auto w = inverse_frequency_weights(labels, 4);
  double mean = 0.0;
  for (double v : w) mean += v / 4.0;
  CHECK(mean == Catch::Approx(1.0));
  CHECK(w[1] == Catch::Approx(3.0 * w[0]));
  CHECK(w[2] == Catch::Approx(1.5 * w[0]));
}

TEST_CASE("pretraining logs one row per epoch and is deterministic", "[pipeline][pretrain]") {
  const fs::path dir = scratch_dir("pretrain");
  const RunConfig cfg = tiny();
  const auto a = pretrain_mim(cfg, unlabeled(cfg), dir);
  const auto b = pretrain_mim(cfg, unlabeled(cfg));
  CHECK(a.epoch_loss.size() == 2);
  CHECK(encode_checkpoint(a.encoder) == encode_checkpoint(b.encoder));
  CHECK(encode_checkpoint(a.decoder) == encode_checkpoint(b.decoder));
  CHECK(a.encoder.has("meta.norm"));
  CHECK(a.encoder.has("encoder.stage3.mixer0.in_proj.weight.slow"));
  CHECK_FALSE(a.encoder.has("decoder.to_pixels.weight"));
  CHECK(a.decoder.has("decoder.to_pixels.weight"));
  CHECK(fs::exists(dir / "encoder.nlck"));
  CHECK(detail::read_file(dir / "pretrain_loss.csv") == loss_curve_csv(a.epoch_loss));
  fs::remove_all(dir);
}

TEST_CASE("held-out reconstruction loss drops after pretraining", "[pipeline][pretrain]") {
  const RunConfig cfg = tiny("pretrain.epochs = 3\n");
  const SliceSet pool = unlabeled(cfg).load(Split::Unlabeled);
  const NormStats norm = compute_norm_stats(pool);
  Rng init = Rng::derive(cfg.seed, Stream::Init);
  MimModel model(cfg.model, init);
  const double before = mim_eval_loss(model, pool, cfg, norm);
  CHECK(mim_eval_loss(model, pool, cfg, norm) == before);
  const auto r = pretrain_mim(cfg, unlabeled(cfg));
  CHECK(r.encoder.restore(model.params(), "encoder.") > 0);
  CHECK(r.decoder.restore(model.params(), "decoder.") > 0);
  CHECK(mim_eval_loss(model, pool, cfg, norm) < before);
}

TEST_CASE("pretraining reads only the unlabeled pool", "[pipeline][pretrain]") {
  RunConfig cfg = tiny("pretrain.epochs = 1\n");
  AccessLog log;
  pretrain_mim(cfg, unlabeled(cfg, &log));
  CHECK(log.count(Split::Unlabeled) == cfg.data.unlabeled);
  CHECK(log.size() == log.count(Split::Unlabeled));
  // A labeled manifest offers no unlabeled slices at all.
  CHECK_THROWS_AS(pretrain_mim(cfg, labeled(cfg)), IoError);
}

TEST_CASE("fine-tuning keeps the best validation epoch", "[pipeline][finetune]") {
  const RunConfig cfg = tiny("finetune.epochs = 4\n");
  AccessLog log;
  const auto r = finetune(cfg, labeled(cfg, &log));
  REQUIRE(r.history.size() == 4);
  double best = 0.0;
  for (const auto& h : r.history) best = std::max(best, h.val_macro_f1);
  CHECK(r.best_val_macro_f1 == best);
  CHECK(r.history[r.best_epoch - 1].val_macro_f1 == best);
  // The returned parameters are the best epoch's.
  CHECK(macro_f1(r.val_confusion) == best);
  CHECK(log.count(Split::Test) == 0);
  CHECK(log.count(Split::Val) == plan_labeled(cfg.data).subset(Split::Val).slices.size());
  CHECK(r.model.has("head.weight.slow"));
}

TEST_CASE("pretrained initialization changes the fine-tuned weights", "[pipeline][finetune]") {
  const RunConfig cfg = tiny();
  const auto pre = pretrain_mim(cfg, unlabeled(cfg));
  const auto from_pre = finetune(cfg, labeled(cfg), &pre.encoder);
  const auto scratch = finetune(cfg, labeled(cfg));
  CHECK(values(from_pre.model) != values(scratch.model));
  const auto again = finetune(cfg, labeled(cfg), &pre.encoder);
  CHECK(encode_checkpoint(again.model) == encode_checkpoint(from_pre.model));
}

TEST_CASE("early stopping honours the patience", "[pipeline][finetune]") {
  const RunConfig cfg = tiny("finetune.epochs = 12\nfinetune.patience = 1\nfinetune.lr = 0.000001\n");
  const auto r = finetune(cfg, labeled(cfg));
  CHECK(r.history.size() < 12);
  CHECK(r.history.size() == r.best_epoch + 1);
}

TEST_CASE("labeled fraction restricts the training orders", "[pipeline][finetune]") {
  const RunConfig cfg = tiny("finetune.labeled_fraction = 0.5\nfinetune.epochs = 1\n");
  AccessLog log;
  finetune(cfg, labeled(cfg, &log));
  const Manifest half = stratified_fraction(plan_labeled(cfg.data), 0.5);
  CHECK(log.count(Split::Train) == half.subset(Split::Train).slices.size());
  CHECK(log.count(Split::Train) < plan_labeled(cfg.data).subset(Split::Train).slices.size());
}

TEST_CASE("continual protocol fills the performance matrix", "[pipeline][continual]") {
  const RunConfig cfg = tiny();
  const auto ft = finetune(cfg, labeled(cfg));
  const auto batches = continual_batches(cfg);
  const auto full = continual_run(cfg, batches, ft.model);
  const std::size_t per_batch = plan_continual(cfg.continual_data, cfg.data.class_mix)[0].subset(Split::Train).slices.size();
  CHECK(full.pool_sizes == std::vector<std::size_t>{per_batch, 2 * per_batch, 3 * per_batch});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t b = 0; b < 3; ++b) CHECK(full.perf.has(t, b));
  const auto again = continual_report(full.perf);
  CHECK(again.bwt == full.report.bwt);
  CHECK(again.iag == full.report.iag);
  CHECK(again.forgetting.mean == full.report.forgetting.mean);

  const auto none = continual_run(tiny("continual.replay = none\n"), batches, ft.model);
  CHECK(none.pool_sizes == std::vector<std::size_t>{per_batch, per_batch, per_batch});
  CHECK(values(none.model) != values(full.model));
}

TEST_CASE("continual training never loads held-out orders for training", "[pipeline][continual]") {
  const RunConfig cfg = tiny("continual.epochs_per_batch = 1\n");
  const auto ft = finetune(tiny("finetune.epochs = 1\n"), labeled(cfg));
  AccessLog log;
  std::vector<SliceSource> batches;
  for (auto& m : plan_continual(cfg.continual_data, cfg.data.class_mix))
    batches.push_back(SliceSource::rendered(m, cfg.data.render, &log));
  continual_run(cfg, batches, ft.model);
  std::size_t held_out = 0, adapt = 0;
  for (const auto& b : batches) held_out += b.manifest().subset(Split::Test).slices.size(), adapt += b.manifest().subset(Split::Train).slices.size();
  CHECK(log.count(Split::Test) == held_out);
  CHECK(log.count(Split::Train) == adapt);
}

TEST_CASE("end-to-end runs are deterministic", "[pipeline][determinism]") {
  const RunConfig cfg = tiny();
  CHECK(chain_csvs(cfg) == chain_csvs(cfg));
}

TEST_CASE("nested learning with lambda = 0 and gamma = 0 reduces to the plain pipeline", "[pipeline][reduction]") {
  const RunConfig nl = tiny("nl.enabled = true\nnl.lambda = 0\noptim.name = deep_momentum\noptim.gamma = 0\n");
  const RunConfig plain = tiny("nl.enabled = false\noptim.name = momentum\n");
  const std::string a = chain_csvs(nl), b = chain_csvs(plain);
  CHECK(a == b);
  // With the nested terms active the trajectories differ.
  CHECK(chain_csvs(tiny("nl.lambda = 0.5\noptim.gamma = 0.1\n")) != b);
}

TEST_CASE("divergence raises a typed error", "[pipeline]") {
  const RunConfig cfg = tiny("finetune.lr = 1e150\nfinetune.epochs = 2\n");
  CHECK_THROWS_AS(finetune(cfg, labeled(cfg)), TrainingDiverged);
}

TEST_CASE("disk-backed pipeline matches in-memory rendering", "[pipeline][io]") {
  const fs::path dir = scratch_dir("disk_pipeline");
  const RunConfig cfg = tiny("finetune.epochs = 1\n");
  const Manifest m = plan_labeled(cfg.data);
  render_manifest(m, dir, cfg.data.render);
  write_manifest(dir / "manifest.csv", m);
  AccessLog log;
  const auto disk = finetune(cfg, SliceSource::disk(read_manifest(dir / "manifest.csv"), dir, &log));
  const auto mem = finetune(cfg, labeled(cfg));
  CHECK(encode_checkpoint(disk.model) == encode_checkpoint(mem.model));
  CHECK(log.count(Split::Test) == 0);
  const auto cm = evaluate_checkpoint(cfg, SliceSource::disk(read_manifest(dir / "manifest.csv"), dir, &log), disk.model);
  CHECK(log.count(Split::Test) == m.subset(Split::Test).slices.size());
  CHECK(cm.total() == static_cast<long long>(m.subset(Split::Test).slices.size()));
  fs::remove_all(dir);
}
