#include <fstream>
#include <iostream>
#include <list>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tscnet/confounder.hpp"
#include "tscnet/datagen.hpp"
#include "tscnet/eval.hpp"
#include "tscnet/experiment.hpp"
#include "tscnet/train.hpp"

namespace fs = std::filesystem;
using namespace tscnet;

namespace {

ExperimentConfig base_config(const std::string& path, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig() : ExperimentConfig::load(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigurationError("--set expects key=value, got " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

// Flag values that override config keys when given.
struct Overrides {
  std::vector<std::pair<std::string, std::string>> items;
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto* holder = &storage.emplace_back();
    app->add_option(flag, *holder, help)->each([this, key](const std::string& v) { items.emplace_back(key, v); });
  }
  void apply(ExperimentConfig& cfg) const {
    for (const auto& [k, v] : items) cfg.set(k, v);
    cfg.validate();
  }
  std::list<std::string> storage;
};

void print_report(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("absent"); };
  std::cout << "acc_all  " << r.acc_all << "\nacc_head " << opt(r.acc_head) << "\nacc_mid  " << opt(r.acc_mid)
            << "\nacc_tail " << opt(r.acc_tail) << "\nsimilar_fp " << r.similar_fp[0] << "/" << r.similar_fp[1] << "/"
            << r.similar_fp[2] << "  nonsimilar_fp " << r.nonsimilar_fp[0] << "/" << r.nonsimilar_fp[1] << "/"
            << r.nonsimilar_fp[2] << " (head/mid/tail)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tscnet: two-stage causal long-tail classification on synthetic or folder data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  std::string config_path;
  std::vector<std::string> sets;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic confounded long-tail dataset");
  Overrides gen_over;
  std::string gen_out, gen_ingest, gen_manifest;
  gen->add_option("--config", config_path, "Config file supplying defaults");
  gen_over.add(gen, "--classes", "dataset.classes", "Number of classes");
  gen_over.add(gen, "--n-max", "dataset.n_max", "Images in the largest class");
  gen_over.add(gen, "--ratio", "dataset.ratio", "Imbalance ratio n_min / n_max");
  gen_over.add(gen, "--rho", "dataset.rho", "Texture-class confounding strength");
  gen_over.add(gen, "--seed", "dataset.seed", "Generator seed");
  gen_over.add(gen, "--image-size", "dataset.image_size", "Image side length");
  gen_over.add(gen, "--test-per-class", "dataset.test_per_class", "Balanced test images per class");
  gen->add_option("--ingest", gen_ingest, "Ingest an image folder instead of generating");
  gen->add_option("--manifest", gen_manifest, "Folder manifest (default <folder>/manifest.json)");
  gen->add_option("--out", gen_out, "Dataset directory")->required();

  // build-confounders
  auto* bc = app.add_subcommand("build-confounders", "Build the confounder and prototype dictionaries");
  Overrides bc_over;
  std::string bc_data, bc_out, bc_mask_model;
  bool bc_no_prototypes = false;
  bc->add_option("--config", config_path, "Config file (model, hcrl and train.seed sections)");
  bc->add_option("--data", bc_data, "Dataset directory")->required();
  bc->add_option("--out", bc_out, "Output directory")->required();
  bc_over.add(bc, "--masker", "hcrl.masker", "oracle or saliency");
  bc_over.add(bc, "--q", "hcrl.saliency_q", "Saliency quantile");
  bc_over.add(bc, "--l", "hcrl.l", "Prototype count");
  bc_over.add(bc, "--seed", "hcrl.seed", "Selection and clustering seed");
  bc_over.add(bc, "--selection", "hcrl.selection_fraction", "Share of training images used");
  bc_over.add(bc, "--dictionary", "hcrl.dictionary", "confounder, random, zero or average");
  bc_over.add(bc, "--train-seed", "train.seed", "Seed of the backbone used for prototype features");
  bc->add_option("--mask-model", bc_mask_model, "Checkpoint used for saliency masks");
  bc->add_flag("--no-prototypes", bc_no_prototypes, "Only build the confounder dictionary");

  // train
  auto* tr = app.add_subcommand("train", "Run one training stage");
  Overrides tr_over;
  int tr_stage = 1;
  std::string tr_data, tr_dicts, tr_init, tr_resume, tr_out, tr_log;
  tr->add_option("--stage", tr_stage, "Stage 1 or 2")->required()->check(CLI::IsMember({1, 2}));
  tr->add_option("--config", config_path, "Config file");
  tr->add_option("--set", sets, "Override a config key (key=value)");
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--dictionaries", tr_dicts, "Output of build-confounders (needed for I and F)");
  tr->add_option("--init", tr_init, "Stage-1 checkpoint stem (stage 2)");
  tr->add_option("--resume", tr_resume, "Snapshot stem to resume from");
  tr->add_option("--out", tr_out, "Checkpoint stem")->required();
  tr->add_option("--log", tr_log, "JSON-lines training log (default <out>.log.jsonl)");
  tr_over.add(tr, "--toggles", "train.toggles", "Components, e.g. +I+F+C+R");
  tr_over.add(tr, "--epochs", "train.stage1_epochs", "Stage-1 epochs");
  tr_over.add(tr, "--stage2-epochs", "train.stage2_epochs", "Stage-2 epochs");
  tr_over.add(tr, "--seed", "train.seed", "Training seed");
  tr_over.add(tr, "--gamma", "clbc.gamma", "Strength-update accuracy threshold");
  tr_over.add(tr, "--l-init", "clbc.l_init", "Initial strength");
  tr_over.add(tr, "--step", "clbc.step", "Strength step");
  tr_over.add(tr, "--alpha-gf", "clbc.alpha_gf", "Consistency weight");
  tr_over.add(tr, "--target-per-class", "clbc.target_per_class", "Balanced set size per class");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
  std::string ev_ckpt, ev_data, ev_groups = "dataset", ev_out, ev_diag;
  int ev_diag_n = 64;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint stem")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--groups", ev_groups, "dataset, singletons, or a JSON groups file");
  ev->add_option("--out", ev_out, "Metrics report (JSON)")->required();
  ev->add_option("--diagnostics", ev_diag, "Also export attention rollout and features here");
  ev->add_option("--diagnostic-samples", ev_diag_n, "Test samples exported as diagnostics");

  // run
  auto* run = app.add_subcommand("run", "Run a full experiment with stage caching");
  run->add_option("--config", config_path, "Config file");
  run->add_option("--set", sets, "Override a config key (key=value)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Run an ablation sweep over toggle rows");
  std::string sw_rows;
  sw->add_option("--config", config_path, "Base config file");
  sw->add_option("--set", sets, "Override a config key (key=value)");
  sw->add_option("--rows", sw_rows, "Sweep file, one toggle row per line")->required();

  // schema
  auto* sc = app.add_subcommand("schema", "Print the configuration schema");
  bool sc_defaults = false;
  sc->add_flag("--defaults", sc_defaults, "Print a default config file instead");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      ExperimentConfig cfg = base_config(config_path, {});
      if (!gen_ingest.empty()) {
        cfg.set("dataset.source", "folder");
        cfg.set("dataset.path", gen_ingest);
        if (!gen_manifest.empty()) cfg.set("dataset.manifest", gen_manifest);
      }
      gen_over.apply(cfg);
      const auto ds = materialize_dataset(cfg);
      save_dataset(ds, gen_out);
      std::cout << "wrote " << ds.train.size() << " train / " << ds.test.size() << " test images to " << gen_out << "\n";
      return 0;
    }
    if (*bc) {
      ExperimentConfig cfg = base_config(config_path, {});
      bc_over.apply(cfg);
      const auto ds = load_dataset(bc_data);
      Masker masker;
      masker.kind = cfg.masker();
      masker.threshold = cfg.number("hcrl.saliency_q");
      std::optional<VisionTransformer<float>> mask_model;
      if (masker.kind == MaskerKind::saliency) {
        if (bc_mask_model.empty()) throw ConfigurationError("--masker saliency requires --mask-model");
        mask_model = load_checkpoint(bc_mask_model).model();
        masker.model = &*mask_model;
      }
      ConfounderOptions co;
      co.selection_fraction = cfg.number("hcrl.selection_fraction");
      co.seed = static_cast<uint64_t>(cfg.integer("hcrl.seed"));
      const auto dict = build_confounder_dictionary(ds, masker, co);
      save_confounder_dictionary(dict, bc_out);
      std::cout << "confounder dictionary: " << dict.size() << " entries\n";
      if (!bc_no_prototypes) {
        const auto spec = cfg.model_spec(ds);
        const auto backbone = initial_model(spec, cfg.train_config().seed);
        auto protos = build_prototype_dictionary(dict, backbone, static_cast<int>(cfg.integer("hcrl.l")),
                                                 static_cast<int>(cfg.integer("hcrl.kmeans_iters")),
                                                 cfg.number("hcrl.kmeans_tol"), co.seed);
        const auto variant = dictionary_variant_from_string(cfg.get("hcrl.dictionary"));
        MatrixD full;
        if (variant == DictionaryVariant::average) {
          const auto fit = ds.fit_indices();
          full.resize(static_cast<Eigen::Index>(fit.size()), protos.d());
          for (size_t i = 0; i < fit.size(); ++i)
            full.row(static_cast<Eigen::Index>(i)) = backbone.feature(ds.train[fit[i]].image).cast<double>().transpose();
        }
        protos = make_variant_dictionary(variant, protos, full, co.seed);
        save_prototype_dictionary(protos, fs::path(bc_out) / "prototypes");
        std::cout << "prototype dictionary: " << protos.l() << " x " << protos.d() << "\n";
      }
      return 0;
    }
    if (*tr) {
      ExperimentConfig cfg = base_config(config_path, sets);
      tr_over.apply(cfg);
      const auto ds = load_dataset(tr_data);
      TrainConfig tc = cfg.train_config();
      std::ofstream log(tr_log.empty() ? tr_out + ".log.jsonl" : tr_log, std::ios::app);
      TrainRunOptions ro;
      ro.log = &log;
      ro.snapshot = fs::path(tr_out + ".state");
      std::optional<Checkpoint> resume;
      if (!tr_resume.empty()) {
        resume = load_checkpoint(tr_resume);
        ro.resume = &*resume;
      }
      TrainResult res;
      if (tr_stage == 1) {
        tc.toggles.counterfactual = tc.toggles.refinement = false;
        std::optional<ConfounderDictionary> conf;
        std::optional<PrototypeDictionary> protos;
        if (tc.toggles.patch_intervention || tc.toggles.feature_intervention) {
          if (tr_dicts.empty()) throw ConfigurationError("toggles I/F need --dictionaries");
          conf = load_confounder_dictionary(tr_dicts);
          if (tc.toggles.feature_intervention) protos = load_prototype_dictionary(fs::path(tr_dicts) / "prototypes");
        }
        res = train_stage1(ds, conf ? &*conf : nullptr, protos ? &*protos : nullptr, cfg.model_spec(ds), tc, ro);
      } else {
        std::optional<Checkpoint> init;
        if (!tr_init.empty()) init = load_checkpoint(tr_init);
        res = train_stage2(init ? &*init : nullptr, ds, tc, ro);
      }
      save_checkpoint(res.checkpoint, tr_out);
      std::cout << "stage " << tr_stage << " done: best validation mean recall " << res.checkpoint.best_score
                << " at epoch " << res.checkpoint.best_epoch << "\n";
      return 0;
    }
    if (*ev) {
      const auto ds = load_dataset(ev_data);
      const auto ck = load_checkpoint(ev_ckpt);
      const auto model = ck.model();
      SimilarityGroups groups = ev_groups == "dataset"      ? SimilarityGroups::from_dataset(ds)
                                : ev_groups == "singletons" ? SimilarityGroups::singletons(ds.class_count())
                                                            : SimilarityGroups::load(ev_groups);
      MetricsReport r = evaluate(model, ds.test, ds.splits, groups);
      r.model_fingerprint = ck.fingerprint();
      r.seed = ck.seed;
      save_report(r, ev_out);
      print_report(r);
      if (!ev_diag.empty()) {
        const size_t n = std::min(ds.test.size(), static_cast<size_t>(std::max(0, ev_diag_n)));
        export_diagnostics(model, std::span(ds.test).first(n), ev_diag);
      }
      return 0;
    }
    if (*run) {
      const auto cfg = base_config(config_path, sets);
      RunOptions ro;
      ro.status = &std::cerr;
      const auto man = run_experiment(cfg, ro);
      std::cout << "run " << man.run_dir.string() << "\n";
      print_report(*man.report);
      return 0;
    }
    if (*sw) {
      const auto cfg = base_config(config_path, sets);
      const auto rows = parse_sweep_rows(read_text_file(sw_rows));
      RunOptions ro;
      ro.status = &std::cerr;
      const auto summary = ablation_sweep(cfg, rows, ro);
      std::cout << summary.table_markdown() << "summary: " << summary.dir.string() << "\n";
      return summary.all_ok() ? 0 : 1;
    }
    if (*sc) {
      std::cout << (sc_defaults ? ExperimentConfig().to_text() : config_schema_json());
      return 0;
    }
  } catch (const StageFailure& e) {
    std::cerr << "tscnet: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "tscnet: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
