#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tbattr/config.hpp"
#include "tbattr/evaluation.hpp"
#include "tbattr/plot.hpp"
#include "tbattr/synthetic.hpp"
#include "tbattr/training.hpp"

namespace tbattr {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct OutputsExist : Error {
  explicit OutputsExist(const fs::path& p)
      : Error(p.string() + " already exists; pass --overwrite to replace it") {}
};

namespace cli {

inline void guard_outputs(const fs::path& dir, const std::vector<std::string>& files, bool overwrite) {
  if (overwrite) return;
  for (const auto& f : files)
    if (fs::exists(dir / f)) throw OutputsExist(dir / f);
}

inline Config build_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  Config c;
  if (!config_path.empty()) c.load_file(config_path);
  for (const auto& o : overrides) c.apply_override(o);
  return c;
}

// --data, else data.manifest, else the synth.* corpus generated in memory.
inline TrainingData resolve_data(const Config& c, const std::string& data_flag) {
  const std::string path = !data_flag.empty() ? data_flag : c.get("data.manifest");
  if (!path.empty()) return load_training_data(path);
  return training_data(synthesize_dataset(synth_options(c)));
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw MissingFile(p.string());
  out << s;
}

inline Split parse_split_flag(const std::string& s) {
  auto sp = parse_split(s);
  if (!sp) throw ConfigError("split must be train or val, got '" + s + "'");
  return *sp;
}

inline int run_synth(int seed, int n, int size, int n_attr, const fs::path& out_dir, bool overwrite, std::ostream& out) {
  guard_outputs(out_dir, {"manifest.jsonl"}, overwrite);
  SynthOptions o;
  o.seed = static_cast<std::uint64_t>(seed);
  o.n_records = n;
  o.image_size = size;
  o.n_attributes = n_attr;
  auto ds = synthesize_dataset(o);
  const auto manifest = write_dataset(ds, out_dir);
  out << "wrote " << ds.manifest.records.size() << " records to " << manifest.string() << "\n"
      << "digest " << dataset_digest(ds) << "\n";
  return kExitOk;
}

inline int run_train(const Config& c, const std::string& data_flag, const fs::path& out_dir, bool overwrite,
                     std::ostream& out) {
  guard_outputs(out_dir, {"checkpoint.json", "metrics.csv"}, overwrite);
  const TrainConfig cfg = train_config(c);
  const TrainingData data = resolve_data(c, data_flag);
  fs::create_directories(out_dir);
  write_text(out_dir / "config.cfg", c.to_text());
  auto res = run_training(data, cfg, out_dir, c.to_json(), [&](int step, int epoch, const LossBreakdown& l) {
    if (step % 10 == 0) {
      out << "epoch " << epoch << " step " << step << " loss_det " << l.loss_det << " loss_cls " << l.loss_cls
          << " total " << l.total << "\n";
    }
  });
  const auto& last = res.epochs.back();
  out << "finished " << res.epochs.size() << " epochs; val_acc " << format_metric(last.val_acc) << " val_f1 "
      << format_metric(last.val_f1) << " val_map " << format_metric(last.val_map) << "\n";
  return kExitOk;
}

inline Model load_checkpoint(const fs::path& path, Config* config_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw MissingFile(path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  Config c = config_from_json(j.at("config"));
  Model m(model_config(c), static_cast<std::uint64_t>(c.get_int("seed")));
  load_params(m.params(), j.at("params"));
  if (config_out) *config_out = c;
  return m;
}

inline void write_detections(const fs::path& path, const TrainingData& data, const SplitEvaluation& ev) {
  std::ofstream out(path);
  if (!out) throw MissingFile(path.string());
  for (std::size_t k = 0; k < ev.indices.size(); ++k) {
    nlohmann::ordered_json j;
    j["image_path"] = data.manifest.records[ev.indices[k]].image_path;
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& d : ev.predictions[k].detections) boxes.push_back({d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max, d.score});
    j["boxes"] = boxes;
    out << j.dump() << '\n';
  }
}

inline nlohmann::ordered_json eval_summary(const SplitEvaluation& ev, Split split) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
  nlohmann::ordered_json j;
  j["split"] = to_string(split);
  j["n_images"] = ev.indices.size();
  j["accuracy"] = num(ev.accuracy);
  j["f_score"] = num(ev.f_score);
  j["map"] = num(ev.map);
  j["n_gt"] = ev.ap.n_gt;
  return j;
}

inline int run_eval(const fs::path& checkpoint, const std::string& data_flag, const std::string& split_name,
                    const fs::path& out_dir, bool overwrite, std::ostream& out) {
  guard_outputs(out_dir, {"eval.json", "detections.jsonl", "pr_curve.csv"}, overwrite);
  const Split split = parse_split_flag(split_name);
  Config c;
  Model model = load_checkpoint(checkpoint, &c);
  const TrainingData data = resolve_data(c, data_flag);
  SplitEvaluation ev = evaluate_model(model, data, data.indices(split));
  fs::create_directories(out_dir);
  const auto summary = eval_summary(ev, split);
  write_text(out_dir / "eval.json", summary.dump(2) + "\n");
  write_detections(out_dir / "detections.jsonl", data, ev);
  write_pr_curve(out_dir / "pr_curve.csv", ev.ap.curve);
  out << summary.dump() << "\n";
  return kExitOk;
}

struct AblationJob {
  AblationRow row;
  int seed_index = 0;
};

// Trains every grid row with seeds base, base+1, ...; metrics come from the val split.
inline AblationReport run_ablation(const Config& base, const TrainingData& data, int seeds, int jobs,
                                   const std::optional<fs::path>& out_dir, std::ostream& log) {
  if (seeds < 1) throw ConfigError("--seeds must be at least 1");
  std::vector<AblationJob> work;
  for (const auto& row : ablation_grid())
    for (int s = 0; s < seeds; ++s) work.push_back({row, s});
  std::vector<RunMetrics> results(work.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::exception_ptr failure;

  auto worker = [&] {
    for (std::size_t i; (i = next++) < work.size();) {
      try {
        const auto& job = work[i];
        Config c = base;
        c.set("ablation.group_conv", job.row.flags.group_conv ? "true" : "false");
        c.set("ablation.a2_attn", job.row.flags.a2_attn ? "true" : "false");
        c.set("ablation.at_attn", job.row.flags.at_attn ? "true" : "false");
        c.set("scale_mode", to_string(job.row.scale_mode));
        c.set("seed", std::to_string(base.get_int("seed") + job.seed_index));
        TrainConfig cfg = train_config(c);
        TrainResult res = run_training(data, cfg);
        const auto val = data.indices(Split::val);
        SplitEvaluation ev = evaluate_model(res.model, data, val.empty() ? data.indices(Split::train) : val);
        results[i] = {std::isnan(ev.f_score) ? 0.0 : ev.f_score, std::isnan(ev.accuracy) ? 0.0 : ev.accuracy,
                      std::isnan(ev.map) ? 0.0 : ev.map};
        if (out_dir) {
          const fs::path dir = *out_dir / "runs" / job.row.key() / ("seed" + std::to_string(job.seed_index));
          fs::create_directories(dir);
          write_metrics_csv(dir / "metrics.csv", res.epochs);
          write_pr_curve(dir / "pr_curve.csv", ev.ap.curve);
        }
        std::lock_guard lock(log_mutex);
        log << job.row.key() << " seed " << job.seed_index << ": f1 " << results[i].f_score << " acc "
            << results[i].accuracy << " map " << results[i].map << "\n";
      } catch (...) {
        std::lock_guard lock(log_mutex);
        if (!failure) failure = std::current_exception();
        next = work.size();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(work.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::map<std::string, std::vector<RunMetrics>> grouped;
  for (std::size_t i = 0; i < work.size(); ++i) grouped[work[i].row.key()].push_back(results[i]);
  return ablation_report(grouped);
}

inline int run_ablate(const Config& c, const std::string& data_flag, int seeds, int jobs, const fs::path& out_dir,
                      bool overwrite, std::ostream& out) {
  guard_outputs(out_dir, {"ablation_report.csv", "ablation_report.txt"}, overwrite);
  const TrainingData data = resolve_data(c, data_flag);
  fs::create_directories(out_dir);
  write_text(out_dir / "config.cfg", c.to_text());
  AblationReport rep = run_ablation(c, data, seeds, jobs, out_dir, out);
  write_text(out_dir / "ablation_report.csv", rep.to_csv());
  write_text(out_dir / "ablation_report.txt", rep.to_text());
  out << rep.to_text();
  return kExitOk;
}

inline int run_plot(const std::vector<std::string>& logs, const fs::path& out_dir, bool overwrite, std::ostream& out,
                    std::ostream& err) {
  if (logs.empty()) {
    err << "warning: no logs given; nothing to plot\n";
    return kExitOk;
  }
  guard_outputs(out_dir, {"loss_curve.png", "val_metrics.png"}, overwrite);
  std::vector<fs::path> paths(logs.begin(), logs.end());
  for (const auto& p : emit_plots(paths, out_dir)) out << "wrote " << p.string() << "\n";
  return kExitOk;
}

}  // namespace cli

// Parses argv and runs one verb. 0 success, 1 runtime failure, 2 usage error.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Attribute-assisted TB detection toolkit", "tbattr"};
  app.require_subcommand(1);

  int synth_seed = 0, synth_n = 16, synth_size = 64, synth_attr = kDefaultAttributes;
  std::string out_dir, config_path, data_path, checkpoint, split = "val";
  std::vector<std::string> overrides, logs;
  bool overwrite = false;
  int seeds = 3, jobs = 1;

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--n", synth_n, "number of records");
  synth->add_option("--size", synth_size, "image side in pixels (multiple of 32)");
  synth->add_option("--n-attributes", synth_attr, "attributes per record");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_flag("--overwrite", overwrite, "replace existing outputs");

  auto* train = app.add_subcommand("train", "train one model");
  train->add_option("--config", config_path, "key = value config file");
  train->add_option("--data", data_path, "manifest.jsonl (default: data.manifest or a synthetic corpus)");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--overwrite", overwrite, "replace existing outputs");
  train->add_option("overrides", overrides, "key=value overrides");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint.json")->required();
  eval->add_option("--data", data_path, "manifest.jsonl (default: the checkpoint's data source)");
  eval->add_option("--split", split, "train or val");
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_flag("--overwrite", overwrite, "replace existing outputs");

  auto* ablate = app.add_subcommand("ablate", "train the ablation grid over several seeds");
  ablate->add_option("--config", config_path, "key = value config file");
  ablate->add_option("--data", data_path, "manifest.jsonl (default: data.manifest or a synthetic corpus)");
  ablate->add_option("--seeds", seeds, "seeds per configuration");
  ablate->add_option("--jobs", jobs, "concurrent training runs");
  ablate->add_option("--out", out_dir, "output directory")->required();
  ablate->add_flag("--overwrite", overwrite, "replace existing outputs");
  ablate->add_option("overrides", overrides, "key=value overrides");

  auto* plotc = app.add_subcommand("plot", "render training curves");
  plotc->add_option("logs", logs, "metrics.csv files");
  plotc->add_option("--out", out_dir, "output directory")->required();
  plotc->add_flag("--overwrite", overwrite, "replace existing outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*synth) return cli::run_synth(synth_seed, synth_n, synth_size, synth_attr, out_dir, overwrite, out);
    if (*train) return cli::run_train(cli::build_config(config_path, overrides), data_path, out_dir, overwrite, out);
    if (*eval) return cli::run_eval(checkpoint, data_path, split, out_dir, overwrite, out);
    if (*ablate) {
      return cli::run_ablate(cli::build_config(config_path, overrides), data_path, seeds, jobs, out_dir, overwrite, out);
    }
    if (*plotc) return cli::run_plot(logs, out_dir, overwrite, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace tbattr
