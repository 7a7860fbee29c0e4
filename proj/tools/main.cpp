// pixproto: train, evaluate, ablate and inspect pseudo labels on the
// synthetic benchmark.
//
// Exit codes: 0 ok, 1 I/O or other failure, 2 invalid config or arguments,
// 3 non-finite loss, 4 corrupt checkpoint.

#include <cctype>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pixproto/checkpoint.hpp"
#include "pixproto/config_io.hpp"
#include "pixproto/io.hpp"
#include "pixproto/trainer.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pixproto;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr const char* kEnvPrefix = "PIXPROTO_";

enum Exit { kOk = 0, kFailure = 1, kBadConfig = 2, kNonFinite = 3, kBadCheckpoint = 4 };

std::string env_name(const std::string& path) {
  std::string out = kEnvPrefix;
  for (char ch : path) out += ch == '.' ? std::string("__") : std::string(1, static_cast<char>(std::toupper(ch)));
  return out;
}

// Leaf keys of the config JSON can be overridden by PIXPROTO_<PATH>, with
// nesting written as "__" (e.g. PIXPROTO_WEIGHTS__TAU=0.2). Values are parsed
// as JSON, falling back to a plain string.
void apply_env(json& j, const std::string& path, std::set<std::string>& known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (it->is_object()) {
      apply_env(*it, key, known);
      continue;
    }
    const std::string name = env_name(key);
    known.insert(name);
    if (const char* v = std::getenv(name.c_str())) {
      json parsed = json::parse(v, nullptr, false);
      *it = parsed.is_discarded() ? json(v) : parsed;
    }
  }
}

TrainConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed) {
  json j;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
      j = json::parse(ss.str(), nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    config_from_json(j);  // field-level errors before overrides are mixed in
  }
  json full = config_to_json(path.empty() ? TrainConfig{} : config_from_json(j));
  std::set<std::string> known;
  apply_env(full, "", known);
  for (char** e = environ; *e != nullptr; ++e) {
    const std::string entry = *e;
    if (entry.rfind(kEnvPrefix, 0) != 0) continue;
    const std::string name = entry.substr(0, entry.find('='));
    if (known.count(name) == 0) throw ConfigError(name + ": environment override names no config field");
  }
  if (seed) full["seed"] = *seed;
  return config_from_json(full);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct Manifest {
  json j;
  Manifest(const std::string& command, const TrainConfig& cfg) {
    j["command"] = command;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.seed;
    j["code_version"] = kVersion;
    j["metrics_schema"] = kMetricsSchemaVersion;
    j["start_time"] = utc_now();
    j["outputs"] = json::array();
  }
  void output(const fs::path& p) { j["outputs"].push_back(p.filename().string()); }
  void write(const fs::path& dir) {
    j["end_time"] = utc_now();
    std::ofstream out(dir / "manifest.json");
    out << j.dump(2) << "\n";
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

json eval_json(const EvalResult& e, const SceneSpec& scene) {
  json j;
  j["miou"] = e.miou;
  for (std::size_t c = 0; c < e.iou.size(); ++c) {
    j["classes"].push_back({{"name", scene.class_names[c]}, {"iou", e.iou[c]}, {"present", static_cast<bool>(e.present[c])}});
  }
  return j;
}

void print_eval(const EvalResult& e, const SceneSpec& scene) {
  for (std::size_t c = 0; c < e.iou.size(); ++c) {
    std::cout << "  " << scene.class_names[c] << ": " << (e.present[c] ? format_double(e.iou[c]) : "n/a") << "\n";
  }
  std::cout << "mIoU " << format_double(e.miou) << "\n";
}

void write_predictions(const fs::path& dir, const EncoderParams& params, const EvalHandle& handle, int n) {
  fs::create_directories(dir);
  for (int i = 0; i < std::min(n, handle.eval_size()); ++i) {
    const LabeledScene& s = handle.eval_scene(i);
    const std::string stem = "eval_" + std::to_string(i);
    const LabelMap pred = predict(params, s.image);
    write_image_png(dir / (stem + "_image.png"), s.image);
    write_label_png(dir / (stem + "_pred.png"), pred);
    write_color_png(dir / (stem + "_pred_color.png"), pred);
    write_color_png(dir / (stem + "_truth_color.png"), s.ground_truth);
  }
}

int cmd_config(const std::string& config_path, std::optional<std::uint64_t> seed, bool provenance) {
  const TrainConfig cfg = resolve_config(config_path, seed);
  if (provenance) {
    for (const auto& [field, note] : config_provenance()) std::cout << field << "\t" << note << "\n";
  } else {
    std::cout << dump_config(cfg) << "\n";
  }
  return kOk;
}

int cmd_train(const std::string& config_path, const fs::path& out, std::optional<std::uint64_t> seed,
              long checkpoint_interval, int n_pred) {
  const TrainConfig cfg = resolve_config(config_path, seed);
  fs::create_directories(out);
  Manifest manifest("train", cfg);
  write_text(out / "config.json", dump_config(cfg) + "\n");
  manifest.output(out / "config.json");

  std::ofstream metrics(out / "metrics.csv", std::ios::binary);
  metrics << metrics_csv_header() << "\n";
  manifest.output(out / "metrics.csv");
  std::ofstream eval_log;
  if (cfg.eval_interval > 0) {
    eval_log.open(out / "eval_log.csv", std::ios::binary);
    eval_log << "iteration,miou\n";
    manifest.output(out / "eval_log.csv");
  }

  const SceneDataset data = make_dataset(cfg);
  const EvalHandle handle = data.evaluation();
  std::string last_checkpoint;

  RunHooks hooks;
  hooks.on_step = [&](const StepRecord& r) {
    metrics << metrics_csv_row(r) << "\n";
    metrics.flush();
  };
  if (checkpoint_interval > 0 || cfg.eval_interval > 0) {
    hooks.checkpoint_interval = 1;
    hooks.on_checkpoint = [&](const TrainState& st) {
      if (checkpoint_interval > 0 && st.iteration % checkpoint_interval == 0) {
        const fs::path p = out / ("checkpoint_" + std::to_string(st.iteration) + ".bin");
        save_checkpoint(p, cfg, st);
        last_checkpoint = p.string();
        manifest.output(p);
      }
      if (cfg.eval_interval > 0 && st.iteration % cfg.eval_interval == 0) {
        eval_log << st.iteration << "," << format_double(evaluate(st.params, handle).miou) << "\n";
        write_predictions(out / "predictions" / ("it_" + std::to_string(st.iteration)), st.params, handle, n_pred);
      }
    };
  }

  std::cerr << "pretraining on source (" << cfg.pretrain_iterations << " iterations)\n";
  TrainState warm = pretrain(cfg, data);
  std::cerr << "adapting (" << cfg.iterations << " iterations)\n";
  std::optional<RunResult> run;
  try {
    run.emplace(adapt(std::move(warm), cfg, data, hooks));
  } catch (const NumericError& e) {
    metrics.flush();
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << "last good checkpoint: " << (last_checkpoint.empty() ? "none" : last_checkpoint) << "\n";
    manifest.j["error"] = e.what();
    manifest.j["last_good_checkpoint"] = last_checkpoint;
    manifest.write(out);
    return kNonFinite;
  }

  save_checkpoint(out / "checkpoint.bin", cfg, run->state);
  manifest.output(out / "checkpoint.bin");
  json ev = eval_json(run->eval, cfg.scene);
  ev["alignment"] = {{"same_class", run->alignment.same_class},
                     {"diff_class", run->alignment.diff_class},
                     {"gap", run->alignment.gap()}};
  write_text(out / "eval.json", ev.dump(2) + "\n");
  manifest.output(out / "eval.json");
  write_predictions(out / "predictions" / "final", run->state.params, handle, n_pred);
  manifest.write(out);
  print_eval(run->eval, cfg.scene);
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path, std::optional<std::uint64_t> seed,
             const std::string& out, int n_pred) {
  TrainConfig cfg;
  std::optional<EncoderParams> params;
  if (!checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(checkpoint);
    cfg = ck.config;
    params = std::move(ck.state.params);
  }
  // a config overrides the evaluation data; without a checkpoint the model is freshly initialized
  if (!config_path.empty() || checkpoint.empty() || seed) {
    TrainConfig data_cfg = config_path.empty() && !checkpoint.empty() ? cfg : resolve_config(config_path, seed);
    if (seed) data_cfg.seed = *seed;
    if (params && data_cfg.encoder != params->config) {
      throw ConfigError("encoder: evaluation config does not match the checkpoint's encoder");
    }
    cfg = data_cfg;
  }
  const SceneDataset data = make_dataset(cfg);
  if (!params) params = initial_state(cfg, data).params;
  const EvalHandle handle = data.evaluation();
  const EvalResult e = evaluate(*params, handle);
  print_eval(e, cfg.scene);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "eval.json", eval_json(e, cfg.scene).dump(2) + "\n");
    write_predictions(fs::path(out) / "predictions", *params, handle, n_pred);
  }
  return kOk;
}

int cmd_ablate(const std::string& config_path, const fs::path& out, const std::vector<std::string>& arm_names,
               std::vector<std::uint64_t> seeds) {
  const TrainConfig cfg = resolve_config(config_path, std::nullopt);
  std::vector<Arm> arms;
  for (const auto& name : arm_names) {
    const auto a = parse_arm(name);
    if (!a) throw ConfigError("arm: unknown arm '" + name + "'");
    arms.push_back(*a);
  }
  if (arms.empty()) arms.assign(std::begin(kAllArms), std::end(kAllArms));
  if (seeds.empty()) seeds = {1, 2, 3};
  fs::create_directories(out);
  Manifest manifest("ablate", cfg);
  manifest.j["seeds"] = seeds;
  const auto rows = run_ablation(cfg, arms, seeds, [](const std::string& msg) { std::cerr << msg << "\n"; });
  write_text(out / "ablation.csv", ablation_csv(rows));
  manifest.output(out / "ablation.csv");

  std::ostringstream pl;
  pl << "arm,seed,static_density,static_accuracy,dynamic_nocal_density,dynamic_nocal_accuracy,"
        "dynamic_cal_density,dynamic_cal_accuracy,hybrid_density,hybrid_accuracy\n";
  for (const auto& row : rows) {
    for (std::size_t s = 0; s < row.midpoint.size(); ++s) {
      const auto& d = row.midpoint[s];
      pl << arm_name(row.arm) << ',' << row.seeds[s];
      for (const PseudoLabelReport* r : {&d.static_labels, &d.dynamic_uncalibrated, &d.dynamic_calibrated, &d.hybrid}) {
        pl << ',' << format_double(r->density) << ',' << format_double(r->accuracy);
      }
      pl << '\n';
    }
  }
  write_text(out / "pseudo_labels_midpoint.csv", pl.str());
  manifest.output(out / "pseudo_labels_midpoint.csv");
  manifest.write(out);
  for (const auto& row : rows) {
    std::cout << arm_name(row.arm) << "\tmIoU " << format_double(row.mean) << " +- " << format_double(row.sd) << "\n";
  }
  return kOk;
}

int cmd_labels(const std::string& checkpoint, const fs::path& out, std::vector<int> scenes,
               std::vector<double> sweep) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const TrainConfig& cfg = ck.config;
  const SceneDataset data = make_dataset(cfg);
  if (scenes.empty()) scenes = {0};
  if (sweep.empty()) sweep = {cfg.threshold};
  for (int i : scenes) {
    if (i < 0 || i >= data.target_size()) throw ConfigError("scenes: index " + std::to_string(i) + " out of range");
  }
  for (double t : sweep) {
    if (!(t > -1.0 && t < 1.0)) throw ConfigError("threshold-sweep: thresholds must lie in (-1, 1)");
  }
  fs::create_directories(out);
  Manifest manifest("labels", cfg);
  for (int i : scenes) {
    const PseudoLabelVariants v = pseudo_label_variants(ck.state, cfg, data, i, cfg.threshold);
    const std::string stem = "target_" + std::to_string(i);
    write_image_png(out / (stem + "_image.png"), data.target(i).image());
    const std::pair<const char*, const LabelMap*> maps[] = {{"static", &v.static_labels},
                                                           {"dynamic_nocal", &v.dynamic_uncalibrated},
                                                           {"dynamic_cal", &v.dynamic_calibrated},
                                                           {"hybrid", &v.hybrid}};
    for (const auto& [name, m] : maps) {
      write_label_png(out / (stem + "_" + name + ".png"), *m);
      write_color_png(out / (stem + "_" + name + "_color.png"), *m);
      manifest.output(out / (stem + "_" + name + ".png"));
    }
  }
  // density/accuracy per threshold over the selected scenes, scored through the evaluation handle
  const EvalHandle handle = data.evaluation();
  std::vector<SweepRow> rows;
  for (double t : sweep) {
    std::vector<PseudoLabelReport> rs, rdn, rdc, rh;
    for (int i : scenes) {
      const PseudoLabelVariants v = pseudo_label_variants(ck.state, cfg, data, i, t);
      const LabelMap truth = resample_nearest(handle.train_target_truth(i), v.hybrid.height, v.hybrid.width);
      rs.push_back(label_metrics(v.static_labels, truth));
      rdn.push_back(label_metrics(v.dynamic_uncalibrated, truth));
      rdc.push_back(label_metrics(v.dynamic_calibrated, truth));
      rh.push_back(label_metrics(v.hybrid, truth));
    }
    rows.push_back({t, {merge_reports(rs), merge_reports(rdn), merge_reports(rdc), merge_reports(rh)}});
  }
  write_text(out / "threshold_sweep.csv", sweep_csv(rows));
  manifest.output(out / "threshold_sweep.csv");
  manifest.write(out);
  std::cout << sweep_csv(rows);
  return kOk;
}

int cmd_scenes(const std::string& config_path, std::optional<std::uint64_t> seed, const fs::path& out, int n) {
  const TrainConfig cfg = resolve_config(config_path, seed);
  SceneSpec spec = cfg.scene;
  spec.seed = cfg.seed;
  for (int i = 0; i < n; ++i) {
    dump_scene(out, "source_" + std::to_string(i), generate(spec, cfg.shift, i, Domain::kSource), spec, cfg.shift);
    dump_scene(out, "target_" + std::to_string(i), generate(spec, cfg.shift, kTargetIndexBase + i, Domain::kTarget),
               spec, cfg.shift);
  }
  return kOk;
}

int cmd_embed(const std::string& checkpoint, const fs::path& out, int n, int stride) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const SceneDataset data = make_dataset(ck.config);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out, std::ios::binary);
  if (!f) throw IoError("cannot write " + out.string());
  write_embedding_csv(f, ck.state.params, data, data.evaluation(), n, std::max(1, stride));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-contrastive domain adaptation on a synthetic segmentation benchmark"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path, out, checkpoint;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> arms;
  std::vector<double> sweep;
  std::vector<int> scene_list;
  int n_scenes = 4;
  int stride = 8;
  long checkpoint_interval = 0;
  bool provenance = false;

  auto* config = app.add_subcommand("config", "Print the effective configuration");
  config->add_option("--config", config_path, "JSON config file");
  config->add_option("--seed", seed, "Override the seed");
  config->add_flag("--provenance", provenance, "List where each default comes from");

  auto* train = app.add_subcommand("train", "Source warm start followed by adaptation");
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--seed", seed, "Override the seed");
  train->add_option("--checkpoint-interval", checkpoint_interval, "Save a checkpoint every N adaptation steps");
  train->add_option("--scenes", n_scenes, "Evaluation scenes rendered as prediction PNGs");

  auto* eval = app.add_subcommand("eval", "mIoU on the held-out target scenes");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate (fresh model if omitted)");
  eval->add_option("--config", config_path, "Config defining the evaluation data");
  eval->add_option("--seed", seed, "Override the data seed");
  eval->add_option("--out", out, "Write eval.json and prediction PNGs here");
  eval->add_option("--scenes", n_scenes, "Evaluation scenes rendered as prediction PNGs");

  auto* ablate = app.add_subcommand("ablate", "Run ablation arms over several seeds");
  ablate->add_option("--config", config_path, "JSON config file");
  ablate->add_option("--out", out, "Output directory")->required();
  ablate->add_option("--arm", arms, "Arm(s): base, fcl, fcl_bcl, dynamic_nocal, dynamic_cal (default all)");
  ablate->add_option("--seed", seeds, "Seed(s) (default 1 2 3)");

  auto* labels = app.add_subcommand("labels", "Static/dynamic/hybrid pseudo labels from a checkpoint");
  labels->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  labels->add_option("--out", out, "Output directory")->required();
  labels->add_option("--scenes", scene_list, "Target training scene indices (default 0)")->delimiter(',');
  labels->add_option("--threshold-sweep", sweep, "Thresholds for the density/accuracy sweep")->delimiter(',');

  auto* scenes = app.add_subcommand("scenes", "Dump synthetic source/target scenes as PNG + JSON");
  scenes->add_option("--config", config_path, "JSON config file");
  scenes->add_option("--seed", seed, "Override the seed");
  scenes->add_option("--out", out, "Output directory")->required();
  scenes->add_option("--scenes", n_scenes, "Number of scene pairs");

  auto* embed = app.add_subcommand("embed", "Export per-pixel embeddings as CSV");
  embed->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  embed->add_option("--out", out, "CSV path")->required();
  embed->add_option("--scenes", n_scenes, "Scenes per domain");
  embed->add_option("--stride", stride, "Keep every N-th pixel");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadConfig;
  }

  try {
    if (*config) return cmd_config(config_path, seed, provenance);
    if (*train) return cmd_train(config_path, out, seed, checkpoint_interval, n_scenes);
    if (*eval) return cmd_eval(checkpoint, config_path, seed, out, n_scenes);
    if (*ablate) return cmd_ablate(config_path, out, arms, seeds);
    if (*labels) return cmd_labels(checkpoint, out, scene_list, sweep);
    if (*scenes) return cmd_scenes(config_path, seed, out, n_scenes);
    if (*embed) return cmd_embed(checkpoint, out, n_scenes, stride);
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return kBadConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "corrupt checkpoint: " << e.what() << "\n";
    return kBadCheckpoint;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNonFinite;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
