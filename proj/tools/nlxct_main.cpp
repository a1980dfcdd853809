#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "nlxct/gradsuite.hpp"
#include "nlxct/pipeline.hpp"

namespace fs = std::filesystem;
using namespace nlxct;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig load_run_config(const Options& opt) {
  RunConfig cfg = load_config(opt.config);
  if (opt.seed) {
    cfg.seed = *opt.seed;
    cfg.validate();
  }
  return cfg;
}

fs::path prepare_out(const Options& opt, const RunConfig& cfg) {
  const fs::path out(opt.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  write_text((out / "resolved_config.txt").string(), resolved_config(cfg));
  return out;
}

fs::path data_root(const RunConfig& cfg) {
  if (cfg.data_root.empty()) throw ConfigError("data.root is not set");
  return cfg.data_root;
}

std::vector<SliceSource> continual_sources(const fs::path& root) {
  std::vector<SliceSource> out;
  for (std::size_t k = 1;; ++k) {
    const fs::path path = root / "continual" / ("batch" + std::to_string(k) + ".csv");
    if (!fs::exists(path)) break;
    out.push_back(SliceSource::disk(read_manifest(path), root));
  }
  if (out.empty()) throw IoError("no continual batch manifests under " + (root / "continual").string());
  return out;
}

Checkpoint checkpoint_from(const std::string& path, const char* key) {
  if (path.empty()) throw ConfigError(std::string(key) + " is not set");
  return load_checkpoint(path);
}

void generate_data(const Options& opt) {
  const RunConfig cfg = load_run_config(opt);
  const fs::path out = prepare_out(opt, cfg);
  const Manifest labeled = plan_labeled(cfg.data), pool = plan_unlabeled(cfg.data);
  render_manifest(labeled, out, cfg.data.render);
  write_manifest(out / "manifest.csv", labeled);
  render_manifest(pool, out, cfg.data.render);
  write_manifest(out / "unlabeled.csv", pool);
  fs::create_directories(out / "continual");
  const auto batches = plan_continual(cfg.continual_data, cfg.data.class_mix);
  for (std::size_t k = 0; k < batches.size(); ++k) {
    render_manifest(batches[k], out, cfg.data.render);
    write_manifest(out / "continual" / ("batch" + std::to_string(k + 1) + ".csv"), batches[k]);
  }
  std::cout << "labeled " << labeled.slices.size() << " unlabeled " << pool.slices.size() << " continual batches "
            << batches.size() << "\n";
}

void pretrain(const Options& opt) {
  const RunConfig cfg = load_run_config(opt);
  const fs::path out = prepare_out(opt, cfg);
  const fs::path root = data_root(cfg);
  const auto result = pretrain_mim(cfg, SliceSource::disk(read_manifest(root / "unlabeled.csv"), root), out, &std::cout);
  save_checkpoint(result.decoder, out / "decoder.nlck");
}

void run_finetune(const Options& opt) {
  const RunConfig cfg = load_run_config(opt);
  const fs::path out = prepare_out(opt, cfg);
  const fs::path root = data_root(cfg);
  std::optional<Checkpoint> init;
  if (!cfg.finetune.init.empty()) init = load_checkpoint(cfg.finetune.init);
  const auto result = finetune(cfg, SliceSource::disk(read_manifest(root / "manifest.csv"), root), init ? &*init : nullptr, &std::cout);
  save_checkpoint(result.model, out / "model.nlck");
  write_text((out / "finetune_log.csv").string(), finetune_log_csv(result.history));
  write_text((out / "val_metrics.csv").string(), metrics_csv(classification_rows(result.val_confusion)));
  write_text((out / "val_confusion.csv").string(), confusion_csv(result.val_confusion, false));
  std::cout << "best epoch " << result.best_epoch << " val macro F1 " << format_fixed(result.best_val_macro_f1, 4) << "\n";
}

void run_continual(const Options& opt) {
  const RunConfig cfg = load_run_config(opt);
  const fs::path out = prepare_out(opt, cfg);
  const Checkpoint init = checkpoint_from(cfg.continual.init, "continual.init");
  const auto result = continual_run(cfg, continual_sources(data_root(cfg)), init, &std::cout);
  save_checkpoint(result.model, out / "model.nlck");
  write_text((out / "perf_matrix.csv").string(), perf_matrix_csv(result.perf));
  write_text((out / "continual_metrics.csv").string(), metrics_csv(continual_rows(result.report)));
  std::cout << metrics_csv(continual_rows(result.report));
}

void run_eval(const Options& opt) {
  const RunConfig cfg = load_run_config(opt);
  const fs::path out = prepare_out(opt, cfg);
  const fs::path root = data_root(cfg);
  const Checkpoint ck = checkpoint_from(cfg.checkpoint, "eval.checkpoint");
  const ConfusionMatrix cm = evaluate_checkpoint(cfg, SliceSource::disk(read_manifest(root / "manifest.csv"), root), ck);
  write_text((out / "confusion.csv").string(), confusion_csv(cm, false));
  write_text((out / "confusion_normalized.csv").string(), confusion_csv(cm, true));
  write_text((out / "metrics.csv").string(), metrics_csv(classification_rows(cm)));
  std::cout << metrics_csv(classification_rows(cm));
}

int gradcheck() {
  bool ok = true;
  for (const auto& check : run_gradcheck_suite()) {
    const double err = check.report.max_rel_error();
    const bool pass = err < 1e-4;
    ok &= pass;
    std::cout << check.layer << " max_rel_error " << err << (pass ? " ok" : " FAIL") << "\n";
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Defect classification on synthetic XCT slices"};
  app.require_subcommand(1);
  Options opt;

  auto add_run_flags = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "run configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "overrides the configured seed");
    sub->add_option("--out", opt.out, "output directory")->required();
  };
  auto* gen = app.add_subcommand("generate-data", "render the labeled, unlabeled and continual datasets");
  auto* pre = app.add_subcommand("pretrain", "masked image modeling on the unlabeled pool");
  auto* ft = app.add_subcommand("finetune", "supervised training with validation early stopping");
  auto* cont = app.add_subcommand("continual", "sequential batch updates with optional replay");
  auto* ev = app.add_subcommand("eval", "score a checkpoint on the test split");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every layer");
  for (auto* sub : {gen, pre, ft, cont, ev}) add_run_flags(sub);
  gc->add_option("--config", opt.config, "ignored");
  gc->add_option("--seed", opt.seed, "ignored");
  gc->add_option("--out", opt.out, "ignored");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gc) return gradcheck();
    if (*gen) generate_data(opt);
    if (*pre) pretrain(opt);
    if (*ft) run_finetune(opt);
    if (*cont) run_continual(opt);
    if (*ev) run_eval(opt);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
