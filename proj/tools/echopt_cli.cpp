// Copyright 2026 The EchoPT Workbench Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end: dataset generation, training, prediction, benchmarks,
// the slip and corridor experiments, and frame export.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "echopt/checkpoint.hpp"
#include "echopt/config_io.hpp"
#include "echopt/dataset.hpp"
#include "echopt/metrics.hpp"
#include "echopt/predictive.hpp"

namespace fs = std::filesystem;
using namespace echopt;

namespace {

constexpr const char* kVersion = "1.0.0";

enum ExitCode { kOk = 0, kUsage = 1, kConfig = 2, kData = 3, kRuntime = 4 };

// Output-directory manifest: enough to rerun the command.
class Manifest {
 public:
  Manifest(std::string command, int argc, char** argv) {
    j_["tool"] = "echopt";
    j_["version"] = kVersion;
    j_["subcommand"] = std::move(command);
    Json args = Json::array();
    for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
    j_["command_line"] = args;
    j_["seeds"] = Json::object();
    j_["inputs"] = Json::object();
    j_["outputs"] = Json::array();
    j_["single_threaded"] = true;
  }
  void seed(const std::string& name, std::uint64_t value) { j_["seeds"][name] = value; }
  void config(const std::string& role, const std::string& path, const Json& resolved) {
    j_["inputs"][role] = {{"path", path}, {"hash", fnv1a_hex(resolved.dump())}, {"resolved", resolved}};
  }
  void file(const std::string& role, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    j_["inputs"][role] = {{"path", path}, {"hash", fnv1a_hex(ss.str())}};
  }
  void output(const std::string& name) { j_["outputs"].push_back(name); }
  void write(const fs::path& dir, const std::string& name = "manifest.json") const {
    save_json(j_, (dir / name).string());
  }

 private:
  Json j_;
};

fs::path prepare_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + out + "': " + ec.message());
  return dir;
}

SensorConfig load_sensor(const std::string& path) {
  if (path.empty()) return SensorConfig{};
  try {
    return load_json(path).get<SensorConfig>();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

template <typename Cfg>
Cfg load_config(const std::string& path) {
  if (path.empty()) return Cfg{};
  try {
    return load_json(path).get<Cfg>();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::vector<Predictor> make_predictors(const std::vector<std::string>& methods, const std::string& checkpoint,
                                       double frame_period) {
  std::vector<Predictor> out;
  for (const auto& name : methods) {
    Method m;
    try {
      m = parse_method(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (m == Method::echopt) {
      if (checkpoint.empty()) throw ConfigError("method echopt needs --checkpoint <prefix>");
      out.push_back(
          Predictor::echopt(std::make_shared<ModelParams<float>>(load_checkpoint(checkpoint)), frame_period));
    } else {
      out.push_back(m == Method::naive ? Predictor::naive(frame_period) : Predictor::flow(frame_period));
    }
  }
  return out;
}

void write_grid_csv(const Grid& g, const std::string& path) {
  std::vector<std::string> cols;
  for (Eigen::Index j = 0; j < g.cols(); ++j) cols.push_back("az" + std::to_string(j));
  CsvWriter csv(path, cols);
  for (Eigen::Index k = 0; k < g.rows(); ++k) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) csv << g(k, j);
    csv.end_row();
  }
}

std::string frame_name(const std::string& stem, int index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.%s", stem.c_str(), index, ext);
  return buf;
}

// ----------------------------------------------------------------- subcommands

struct GenDataArgs {
  std::string world, sensor, config, out;
  double duration = -1.0;
  long long seed = -1;
};

void run_gen_data(const GenDataArgs& a, int argc, char** argv) {
  const Json world_json = load_json(a.world);
  WorldSpec world;
  try {
    world = parse_world(world_json);
  } catch (const ConfigError& e) {
    throw ConfigError(a.world + ": " + e.what());
  }
  const SensorConfig sensor = load_sensor(a.sensor);
  DatasetOptions opts = load_config<DatasetOptions>(a.config);
  if (a.duration > 0.0) opts.duration = a.duration;
  if (a.seed >= 0) opts.seed = static_cast<std::uint64_t>(a.seed);
  const Dataset data = generate_dataset(world.map, sensor, opts, fnv1a_hex(world_json.dump()));
  const fs::path out(a.out);
  if (out.has_parent_path()) prepare_dir(out.parent_path().string());
  write_dataset(data, a.out);

  Manifest m("gen-data", argc, argv);
  m.seed("dataset", opts.seed);
  m.config("world", a.world, world_json);
  m.config("sensor", a.sensor, sensor);
  m.config("dataset", a.config, opts);
  m.output(out.filename().string());
  // Named after the dataset so several datasets can share a directory.
  m.write(out.has_parent_path() ? out.parent_path() : fs::path("."), out.filename().string() + ".manifest.json");
  std::cout << "wrote " << data.records.size() << " frames to " << a.out << "\n";
}

struct TrainArgs {
  std::vector<std::string> train, val;
  std::string config, out;
  int epochs = -1;
  long long seed = -1;
  bool quiet = false;
};

std::vector<FrameStack> stacks_from(const std::vector<std::string>& files, int n_frames) {
  std::vector<FrameStack> out;
  for (const auto& f : files) {
    const auto s = make_stacks(read_dataset(f), n_frames);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

void run_train(const TrainArgs& a, int argc, char** argv) {
  Json cfg_json = a.config.empty() ? Json::object() : load_json(a.config);
  EchoPTConfig model;
  OptimSettings optim;
  std::uint64_t init_seed = 1;
  try {
    for (const auto& item : cfg_json.items()) {
      if (item.key() == "model") {
        model = item.value().get<EchoPTConfig>();
      } else if (item.key() == "optim") {
        optim = item.value().get<OptimSettings>();
      } else if (item.key() == "init_seed") {
        init_seed = item.value().get<std::uint64_t>();
      } else {
        throw ConfigError("unknown key '" + item.key() + "' (known keys: model, optim, init_seed)");
      }
    }
  } catch (const ConfigError& e) {
    throw ConfigError(a.config + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(a.config + ": " + e.what());
  }
  if (a.epochs >= 0) optim.max_epochs = a.epochs;
  if (a.seed >= 0) {
    optim.seed = static_cast<std::uint64_t>(a.seed);
    init_seed = static_cast<std::uint64_t>(a.seed);
  }

  const auto train_set = stacks_from(a.train, model.n_frames);
  const auto val_set = stacks_from(a.val, model.n_frames);
  if (train_set.empty()) throw DataError("no training stacks in the given files");
  const auto& probe = train_set.front().newest();
  if (probe.num_ranges() != model.num_ranges || probe.num_azimuths() != model.num_azimuths) {
    throw ConfigError("model grid " + std::to_string(model.num_ranges) + "x" + std::to_string(model.num_azimuths) +
                      " does not match the data grid " + std::to_string(probe.num_ranges()) + "x" +
                      std::to_string(probe.num_azimuths()));
  }
  const fs::path dir = prepare_dir(a.out);
  Rng rng(init_seed);
  ModelParams<float> init = build_model<float>(model, rng);
  std::cout << "training " << count_params(init) << " parameters on " << train_set.size() << " stacks ("
            << val_set.size() << " validation)\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(std::move(init), train_set, val_set, optim, [&](const EpochLoss& e) {
    if (a.quiet) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "epoch " << e.epoch << " train " << format_double(e.train) << " validation "
              << format_double(e.validation) << " (" << static_cast<int>(secs) << " s)\n"
              << std::flush;
  });
  save_checkpoint(result.params, (dir / "model").string(),
                  {{"best_epoch", result.best_epoch}, {"optim", optim}, {"init_seed", init_seed}});
  {
    CsvWriter csv((dir / "loss_curve.csv").string(), {"epoch", "train_loss", "validation_loss"});
    for (const auto& e : result.curve) {
      csv << e.epoch << e.train << e.validation;
      csv.end_row();
    }
  }
  Manifest m("train", argc, argv);
  m.seed("init", init_seed);
  m.seed("shuffle", optim.seed);
  m.config("train", a.config, {{"model", model}, {"optim", optim}, {"init_seed", init_seed}});
  for (std::size_t i = 0; i < a.train.size(); ++i) m.file("train_data_" + std::to_string(i), a.train[i]);
  for (std::size_t i = 0; i < a.val.size(); ++i) m.file("validation_data_" + std::to_string(i), a.val[i]);
  for (const char* f : {"model.json", "model.bin", "loss_curve.csv"}) m.output(f);
  m.write(dir);
  std::cout << "best epoch " << result.best_epoch << ", checkpoint " << (dir / "model").string() << "\n";
}

struct PredictArgs {
  std::string data, checkpoint, method = "flow", out;
  int start = 0;
  int ar = 1;
};

void run_predict(const PredictArgs& a, int argc, char** argv) {
  const Dataset data = read_dataset(a.data);
  const auto predictors = make_predictors({a.method}, a.checkpoint, data.header.frame_period);
  const Predictor& p = predictors.front();
  const int n = p.history_length();
  if (a.ar < 1) throw ConfigError("--ar must be at least 1");
  if (a.start < 0 || a.start + n + a.ar > static_cast<int>(data.records.size())) {
    throw ConfigError("--start " + std::to_string(a.start) + " with history " + std::to_string(n) + " and --ar " +
                      std::to_string(a.ar) + " runs past the " + std::to_string(data.records.size()) +
                      "-frame dataset");
  }
  FrameStack hist;
  for (int f = a.start; f < a.start + n; ++f) {
    hist.frames.push_back(data.records[static_cast<std::size_t>(f)].scape);
    hist.commands.push_back(data.records[static_cast<std::size_t>(f)].commanded);
  }
  std::vector<VelocityCommand> future;
  for (int f = a.start + n; f < a.start + n + a.ar; ++f) future.push_back(data.records[static_cast<std::size_t>(f)].commanded);
  const auto preds = predict_ar(p, hist, future, a.ar);

  const fs::path dir = prepare_dir(a.out);
  Manifest m("predict", argc, argv);
  m.file("data", a.data);
  CsvWriter csv((dir / "metrics.csv").string(), {"method", "step", "frame_index", "cc", "nrmsd"});
  for (int i = 0; i < a.ar; ++i) {
    const int idx = a.start + n + i;
    const Energyscape& truth = *data.records[static_cast<std::size_t>(idx)].scape;
    const auto& pred = preds[static_cast<std::size_t>(i)];
    const std::string img = frame_name("pred", i + 1, "pgm");
    write_pgm(pred.data, (dir / img).string());
    m.output(img);
    csv << a.method << (i + 1) << idx << cross_corr_coeff(pred, truth).value << nrmsd(pred, truth).value;
    csv.end_row();
  }
  csv.close();
  m.output("metrics.csv");
  m.write(dir);
  std::cout << "wrote " << a.ar << " predicted frames to " << dir.string() << "\n";
}

struct BenchArgs {
  std::string data, checkpoint, out;
  std::vector<std::string> methods = {"naive", "flow", "echopt"};
  std::vector<int> horizons = {1, 3, 5, 10};
  int sequences = 200;
};

void run_bench_cmd(const BenchArgs& a, int argc, char** argv) {
  const Dataset data = read_dataset(a.data);
  const auto predictors = make_predictors(a.methods, a.checkpoint, data.header.frame_period);
  BenchConfig cfg;
  cfg.horizons = a.horizons;
  cfg.sequences = a.sequences;
  for (const auto& p : predictors) cfg.n_frames = std::max(cfg.n_frames, p.history_length());
  const auto samples = run_bench(data, predictors, cfg);

  const fs::path dir = prepare_dir(a.out);
  {
    CsvWriter csv((dir / "bench_samples.csv").string(), {"run_id", "method", "horizon", "cc", "nrmsd"});
    for (const auto& s : samples) {
      csv << s.start << method_name(s.method) << s.horizon << s.cc << s.nrmsd;
      csv.end_row();
    }
  }
  std::map<std::pair<int, int>, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& s : samples) {
    auto& g = groups[{static_cast<int>(s.method), s.horizon}];
    g.first.push_back(s.cc);
    g.second.push_back(s.nrmsd);
  }
  {
    CsvWriter csv((dir / "bench_summary.csv").string(),
                  {"method", "horizon", "n", "cc_mean", "cc_std", "nrmsd_mean", "nrmsd_std", "table_cell_cc",
                   "table_cell_nrmsd"});
    for (const auto& [key, g] : groups) {
      const Summary cc = summarize(g.first), nr = summarize(g.second);
      char cell_cc[64], cell_nr[64];
      std::snprintf(cell_cc, sizeof cell_cc, "%.2f (%.2f)", cc.mean, cc.std);
      std::snprintf(cell_nr, sizeof cell_nr, "%.2f (%.2f)", nr.mean, nr.std);
      csv << method_name(static_cast<Method>(key.first)) << key.second << static_cast<int>(g.first.size()) << cc.mean
          << cc.std << nr.mean << nr.std << std::string(cell_cc) << std::string(cell_nr);
      csv.end_row();
    }
  }
  {
    CsvWriter csv((dir / "bench_pvalues.csv").string(), {"horizon", "method", "baseline", "metric", "t", "dof", "p"});
    const int echopt = static_cast<int>(Method::echopt);
    for (int k : cfg.horizons) {
      const auto it = groups.find({echopt, k});
      if (it == groups.end()) continue;
      for (Method base : {Method::naive, Method::flow}) {
        const auto jt = groups.find({static_cast<int>(base), k});
        if (jt == groups.end()) continue;
        for (int metric = 0; metric < 2; ++metric) {
          const auto r = metric == 0 ? welch_t_test(it->second.first, jt->second.first)
                                     : welch_t_test(it->second.second, jt->second.second);
          csv << k << "echopt" << method_name(base) << (metric == 0 ? "cc" : "nrmsd") << r.t << r.dof << r.p;
          csv.end_row();
        }
      }
    }
  }
  Manifest m("bench", argc, argv);
  m.file("data", a.data);
  if (!a.checkpoint.empty()) m.file("checkpoint", a.checkpoint + ".bin");
  for (const char* f : {"bench_samples.csv", "bench_summary.csv", "bench_pvalues.csv"}) m.output(f);
  m.write(dir);
  std::cout << "bench over " << samples.size() << " predictions written to " << dir.string() << "\n";
}

struct ExperimentArgs {
  std::string world, sensor, config, checkpoint, out;
  long long seed = -1;
  int runs = -1;
  std::vector<std::string> methods = {"naive", "flow", "echopt"};
};

void run_slip(const ExperimentArgs& a, int argc, char** argv) {
  const Json world_json = load_json(a.world);
  const WorldSpec world = parse_world(world_json);
  const SensorConfig sensor = load_sensor(a.sensor);
  SlipExperimentConfig cfg = load_config<SlipExperimentConfig>(a.config);
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  const auto predictors = make_predictors(a.methods, a.checkpoint, cfg.frame_period);
  const SlipResult res = slip_experiment(world, sensor, cfg, predictors);
  int echopt_frames = 3;
  for (const auto& p : predictors) {
    if (p.method() == Method::echopt) echopt_frames = p.history_length();
  }

  const fs::path dir = prepare_dir(a.out);
  {
    std::vector<std::string> cols = {"t", "window", "cmd_v", "cmd_omega", "exec_v", "exec_omega", "x", "y", "heading"};
    for (const auto& s : res.series) cols.push_back("eps_" + method_name(s.method) + "_ar" + std::to_string(s.horizon));
    CsvWriter csv((dir / "slip_eps.csv").string(), cols);
    for (std::size_t i = 0; i < res.times.size(); ++i) {
      csv << res.times[i] << res.window[i] << res.commanded[i].v_lin << res.commanded[i].omega_r
          << res.executed[i].v_lin << res.executed[i].omega_r << res.poses[i].x << res.poses[i].y
          << res.poses[i].heading;
      for (const auto& s : res.series) csv << s.eps[i];
      csv.end_row();
    }
  }
  {
    CsvWriter csv((dir / "slip_summary.csv").string(), {"method", "horizon", "window", "median_in", "median_out",
                                                         "p95_out", "fraction_above_p95", "ratio_median"});
    for (const auto& s : summarize_slip(res, cfg, echopt_frames)) {
      csv << method_name(s.method) << s.horizon << s.window << s.median_in << s.median_out << s.p95_out
          << s.fraction_above_p95 << s.median_in / s.median_out;
      csv.end_row();
    }
  }
  Manifest m("slip-exp", argc, argv);
  m.seed("noise", cfg.seed);
  m.config("world", a.world, world_json);
  m.config("sensor", a.sensor, sensor);
  m.config("slip", a.config, cfg);
  if (!a.checkpoint.empty()) m.file("checkpoint", a.checkpoint + ".bin");
  for (const char* f : {"slip_eps.csv", "slip_summary.csv"}) m.output(f);
  m.write(dir);
  std::cout << "slip experiment over " << res.times.size() << " frames written to " << dir.string() << "\n";
}

void run_corridor(const ExperimentArgs& a, int argc, char** argv) {
  const Json world_json = load_json(a.world);
  const WorldSpec world = parse_world(world_json);
  const SensorConfig sensor = load_sensor(a.sensor);
  CorridorExperimentConfig cfg = load_config<CorridorExperimentConfig>(a.config);
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  if (a.runs > 0) cfg.runs = a.runs;
  std::optional<Predictor> predictor;
  const bool needs_model = std::find(cfg.conditions.begin(), cfg.conditions.end(), Condition::noisy_prediction) !=
                           cfg.conditions.end();
  if (needs_model) predictor = make_predictors({"echopt"}, a.checkpoint, cfg.frame_period).front();
  const auto runs = corridor_experiment(world, sensor, cfg, predictor);

  const fs::path dir = prepare_dir(a.out);
  {
    CsvWriter csv((dir / "corridor_runs.csv").string(), {"condition", "run", "arrived", "travel_time", "gate_stops",
                                                          "rejected_frames", "median_abs_deviation"});
    for (const auto& r : runs) {
      std::vector<double> dev;
      for (double d : r.midline_deviations) dev.push_back(std::abs(d));
      csv << condition_name(r.condition) << r.run << (r.arrived ? 1 : 0) << r.travel_time << r.gate_stops
          << r.rejected_frames << median(dev);
      csv.end_row();
    }
  }
  {
    CsvWriter csv((dir / "corridor_poses.csv").string(), {"condition", "run", "t", "x", "y", "heading"});
    for (const auto& r : runs) {
      for (std::size_t i = 0; i < r.times.size(); ++i) {
        csv << condition_name(r.condition) << r.run << r.times[i] << r.trajectory[i].x << r.trajectory[i].y
            << r.trajectory[i].heading;
        csv.end_row();
      }
    }
  }
  {
    CsvWriter csv((dir / "corridor_summary.csv").string(), {"condition", "runs", "arrivals", "median_travel_time",
                                                             "median_abs_deviation", "mean_gate_stops"});
    for (const auto& s : summarize_corridor(runs)) {
      csv << condition_name(s.condition) << s.runs << s.arrivals << s.median_travel_time << s.median_abs_deviation
          << s.mean_gate_stops;
      csv.end_row();
    }
  }
  Manifest m("corridor-exp", argc, argv);
  m.seed("experiment", cfg.seed);
  m.config("world", a.world, world_json);
  m.config("sensor", a.sensor, sensor);
  m.config("corridor", a.config, cfg);
  if (!a.checkpoint.empty()) m.file("checkpoint", a.checkpoint + ".bin");
  for (const char* f : {"corridor_runs.csv", "corridor_poses.csv", "corridor_summary.csv"}) m.output(f);
  m.write(dir);
  std::cout << "corridor experiment (" << runs.size() << " runs) written to " << dir.string() << "\n";
}

struct ExportArgs {
  std::string data, out;
  std::vector<int> indices = {0};
};

void run_export(const ExportArgs& a, int argc, char** argv) {
  const Dataset data = read_dataset(a.data);
  const fs::path dir = prepare_dir(a.out);
  Manifest m("export", argc, argv);
  m.file("data", a.data);
  CsvWriter index((dir / "frames.csv").string(),
                  {"index", "timestamp", "cmd_v", "cmd_omega", "x", "y", "heading", "max_energy", "pgm", "csv"});
  for (int i : a.indices) {
    if (i < 0 || i >= static_cast<int>(data.records.size())) {
      throw ConfigError("--index " + std::to_string(i) + " is outside the " + std::to_string(data.records.size()) +
                        "-frame dataset");
    }
    const auto& r = data.records[static_cast<std::size_t>(i)];
    const std::string pgm = frame_name("frame", i, "pgm"), csv = frame_name("frame", i, "csv");
    write_pgm(r.scape->data, (dir / pgm).string());
    write_grid_csv(r.scape->data, (dir / csv).string());
    index << i << r.timestamp << r.commanded.v_lin << r.commanded.omega_r << r.pose.x << r.pose.y << r.pose.heading
          << r.scape->data.maxCoeff() << pgm << csv;
    index.end_row();
    m.output(pgm);
    m.output(csv);
  }
  index.close();
  m.output("frames.csv");
  m.write(dir);
  std::cout << "exported " << a.indices.size() << " frames to " << dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sonar energyscape simulation, prediction and experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Simulate a random-walk drive and write a frame dataset");
  gen_cmd->add_option("--world", gen.world, "World JSON")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--sensor", gen.sensor, "Sensor JSON (defaults if omitted)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--config", gen.config, "Dataset options JSON")->check(CLI::ExistingFile);
  gen_cmd->add_option("--duration", gen.duration, "Seconds of driving (overrides config)");
  gen_cmd->add_option("--seed", gen.seed, "RNG seed (overrides config)");
  gen_cmd->add_option("--out", gen.out, "Output frame file")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the EchoPT model with Adam");
  train_cmd->add_option("--train", tr.train, "Training frame files")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--val", tr.val, "Validation frame files")->check(CLI::ExistingFile);
  train_cmd->add_option("--config", tr.config, "Training JSON {model, optim, init_seed}")->check(CLI::ExistingFile);
  train_cmd->add_option("--epochs", tr.epochs, "Override MaxEpochs");
  train_cmd->add_option("--seed", tr.seed, "Override initialisation and shuffle seeds");
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch log");

  PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "One-shot or auto-regressive prediction from a dataset");
  predict_cmd->add_option("--data", pr.data, "Frame file")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--checkpoint", pr.checkpoint, "Checkpoint prefix (for echopt)");
  predict_cmd->add_option("--method", pr.method, "naive, flow or echopt")
      ->check(CLI::IsMember({"naive", "flow", "echopt"}));
  predict_cmd->add_option("--start", pr.start, "Index of the oldest history frame");
  predict_cmd->add_option("--ar", pr.ar, "Prediction horizon")->check(CLI::PositiveNumber);
  predict_cmd->add_option("--out", pr.out, "Output directory")->required();

  BenchArgs be;
  auto* bench_cmd = app.add_subcommand("bench", "Prediction benchmark over methods and horizons");
  bench_cmd->add_option("--data", be.data, "Held-out frame file")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--checkpoint", be.checkpoint, "Checkpoint prefix (for echopt)");
  bench_cmd->add_option("--methods", be.methods, "Methods to score")->check(CLI::IsMember({"naive", "flow", "echopt"}));
  bench_cmd->add_option("--horizons", be.horizons, "Auto-regressive horizons")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--sequences", be.sequences, "Number of start positions")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--out", be.out, "Output directory")->required();

  ExperimentArgs sl;
  auto* slip_cmd = app.add_subcommand("slip-exp", "Wheel-slip detection experiment");
  slip_cmd->add_option("--world", sl.world, "World JSON")->required()->check(CLI::ExistingFile);
  slip_cmd->add_option("--sensor", sl.sensor, "Sensor JSON")->check(CLI::ExistingFile);
  slip_cmd->add_option("--config", sl.config, "Slip experiment JSON")->check(CLI::ExistingFile);
  slip_cmd->add_option("--checkpoint", sl.checkpoint, "Checkpoint prefix (for echopt)");
  slip_cmd->add_option("--methods", sl.methods, "Methods")->check(CLI::IsMember({"naive", "flow", "echopt"}));
  slip_cmd->add_option("--seed", sl.seed, "Noise seed (overrides config)");
  slip_cmd->add_option("--out", sl.out, "Output directory")->required();

  ExperimentArgs co;
  auto* corridor_cmd = app.add_subcommand("corridor-exp", "Corridor following under noise bursts");
  corridor_cmd->add_option("--world", co.world, "World JSON")->required()->check(CLI::ExistingFile);
  corridor_cmd->add_option("--sensor", co.sensor, "Sensor JSON")->check(CLI::ExistingFile);
  corridor_cmd->add_option("--config", co.config, "Corridor experiment JSON")->check(CLI::ExistingFile);
  corridor_cmd->add_option("--checkpoint", co.checkpoint, "Checkpoint prefix (needed for noisy+prediction)");
  corridor_cmd->add_option("--runs", co.runs, "Runs per condition (overrides config)")->check(CLI::PositiveNumber);
  corridor_cmd->add_option("--seed", co.seed, "Experiment seed (overrides config)");
  corridor_cmd->add_option("--out", co.out, "Output directory")->required();

  ExportArgs ex;
  auto* export_cmd = app.add_subcommand("export", "Dump dataset frames as PGM images and CSV grids");
  export_cmd->add_option("--data", ex.data, "Frame file")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--index", ex.indices, "Frame indices")->check(CLI::NonNegativeNumber);
  export_cmd->add_option("--out", ex.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) run_gen_data(gen, argc, argv);
    if (*train_cmd) run_train(tr, argc, argv);
    if (*predict_cmd) run_predict(pr, argc, argv);
    if (*bench_cmd) run_bench_cmd(be, argc, argv);
    if (*slip_cmd) run_slip(sl, argc, argv);
    if (*corridor_cmd) run_corridor(co, argc, argv);
    if (*export_cmd) run_export(ex, argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged at epoch " << e.epoch() << ": " << e.what() << "\n";
    return kRuntime;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
