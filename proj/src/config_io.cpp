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

#include "echopt/config_io.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace echopt {

namespace {

// Strict object reader: records which keys were consumed and rejects the rest.
class Fields {
 public:
  Fields(const Json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j.is_object()) throw ConfigError(context_ + ": expected a JSON object, got " + std::string(j.type_name()));
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(context_ + "." + key + ": " + e.what());
    }
  }

  // Numbers, or the strings "inf" / "-inf".
  void get_real(const std::string& key, double& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if (it->is_number()) {
      out = it->get<double>();
    } else if (it->is_string() && (*it == "inf" || *it == "-inf")) {
      out = *it == "inf" ? kInf : -kInf;
    } else {
      throw ConfigError(context_ + "." + key + ": expected a number or \"inf\"");
    }
  }

  const Json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const std::string& context() const { return context_; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        std::string known;
        for (const auto& k : seen_) known += (known.empty() ? "" : ", ") + k;
        throw ConfigError(context_ + ": unknown key '" + item.key() + "' (known keys: " + known + ")");
      }
    }
  }

 private:
  const Json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

Json real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

Bounds parse_bounds(const Json& j, const std::string& ctx) {
  Bounds b;
  Fields f(j, ctx);
  f.get("x_min", b.x_min);
  f.get("x_max", b.x_max);
  f.get("y_min", b.y_min);
  f.get("y_max", b.y_max);
  f.finish();
  if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) throw ConfigError(ctx + ": min must be below max");
  return b;
}

Pose2D parse_pose(const Json& j, const std::string& ctx) {
  Pose2D p;
  Fields f(j, ctx);
  f.get("x", p.x);
  f.get("y", p.y);
  f.get("heading", p.heading);
  f.finish();
  return p;
}

}  // namespace

// ----------------------------------------------------------------- sensor

void to_json(Json& j, const SensorConfig& s) {
  j = {{"num_ranges", s.num_ranges},
       {"num_azimuths", s.num_azimuths},
       {"r_max", s.r_max},
       {"fov", s.fov},
       {"range_sigma", s.range_sigma},
       {"beam_null_spacing", s.beam_null_spacing},
       {"directivity_sigma", real(s.directivity_sigma)},
       {"base_snr_db", real(s.base_snr_db)},
       {"floor_db", s.floor_db},
       {"r_min", s.r_min}};
}

void from_json(const Json& j, SensorConfig& s) {
  Fields f(j, "sensor");
  f.get("num_ranges", s.num_ranges);
  f.get("num_azimuths", s.num_azimuths);
  f.get("r_max", s.r_max);
  f.get("fov", s.fov);
  f.get("range_sigma", s.range_sigma);
  f.get("beam_null_spacing", s.beam_null_spacing);
  f.get_real("directivity_sigma", s.directivity_sigma);
  f.get_real("base_snr_db", s.base_snr_db);
  f.get("floor_db", s.floor_db);
  f.get("r_min", s.r_min);
  f.finish();
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// ----------------------------------------------------------------- model and optimiser

void to_json(Json& j, const EchoPTConfig& c) {
  j = {{"num_ranges", c.num_ranges},     {"num_azimuths", c.num_azimuths},   {"n_frames", c.n_frames},
       {"patch_h", c.patch_h},           {"patch_w", c.patch_w},             {"embed_dim", c.embed_dim},
       {"n_layers", c.n_layers},         {"n_heads", c.n_heads},             {"qkv_dim", c.qkv_dim},
       {"ffn_dim", c.ffn_dim},           {"pos_slots", c.pos_slots},         {"kernel_h", c.kernel_h},
       {"kernel_w", c.kernel_w},         {"branch_stride", c.branch_stride}, {"conv_channels", c.conv_channels},
       {"skip_channels", c.skip_channels},
       {"flow_prior", c.flow_prior},
       {"frame_period", c.frame_period},
       {"mlp_dims", c.mlp_dims},         {"mlp_map_h", c.mlp_map_h},         {"mlp_map_w", c.mlp_map_w},
       {"velocity_inputs", c.velocity_inputs}, {"v_scale", c.v_scale},   {"omega_scale", c.omega_scale},
       {"scale_floor", c.scale_floor}};
}

void from_json(const Json& j, EchoPTConfig& c) {
  Fields f(j, "model");
  f.get("num_ranges", c.num_ranges);
  f.get("num_azimuths", c.num_azimuths);
  f.get("n_frames", c.n_frames);
  f.get("patch_h", c.patch_h);
  f.get("patch_w", c.patch_w);
  f.get("embed_dim", c.embed_dim);
  f.get("n_layers", c.n_layers);
  f.get("n_heads", c.n_heads);
  f.get("qkv_dim", c.qkv_dim);
  f.get("ffn_dim", c.ffn_dim);
  f.get("pos_slots", c.pos_slots);
  f.get("kernel_h", c.kernel_h);
  f.get("kernel_w", c.kernel_w);
  f.get("branch_stride", c.branch_stride);
  f.get("conv_channels", c.conv_channels);
  f.get("skip_channels", c.skip_channels);
  f.get("flow_prior", c.flow_prior);
  f.get("frame_period", c.frame_period);
  f.get("mlp_dims", c.mlp_dims);
  f.get("mlp_map_h", c.mlp_map_h);
  f.get("mlp_map_w", c.mlp_map_w);
  f.get("velocity_inputs", c.velocity_inputs);
  f.get("v_scale", c.v_scale);
  f.get("omega_scale", c.omega_scale);
  f.get("scale_floor", c.scale_floor);
  f.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void to_json(Json& j, const OptimSettings& o) {
  j = {{"LearnRate", o.learn_rate},        {"GradientDecayFactor", o.beta1},
       {"SquaredGradientDecayFactor", o.beta2}, {"Epsilon", o.epsilon},
       {"L2Regularization", o.l2},         {"MiniBatchSize", o.minibatch},
       {"MaxEpochs", o.max_epochs},        {"Shuffle", o.shuffle ? "every-epoch" : "never"},
       {"MirrorAugmentation", o.mirror}, {"Seed", o.seed}};
}

void from_json(const Json& j, OptimSettings& o) {
  Fields f(j, "optim");
  f.get("LearnRate", o.learn_rate);
  f.get("GradientDecayFactor", o.beta1);
  f.get("SquaredGradientDecayFactor", o.beta2);
  f.get("Epsilon", o.epsilon);
  f.get("L2Regularization", o.l2);
  f.get("MiniBatchSize", o.minibatch);
  f.get("MaxEpochs", o.max_epochs);
  std::string shuffle = o.shuffle ? "every-epoch" : "never";
  f.get("Shuffle", shuffle);
  if (shuffle != "every-epoch" && shuffle != "never") {
    throw ConfigError("optim.Shuffle: expected \"every-epoch\" or \"never\", got \"" + shuffle + "\"");
  }
  o.shuffle = shuffle == "every-epoch";
  f.get("MirrorAugmentation", o.mirror);
  f.get("Seed", o.seed);
  f.finish();
  if (!(o.learn_rate >= 0.0) || o.minibatch < 2 || o.max_epochs < 0) {
    throw ConfigError("optim: LearnRate must be >= 0, MiniBatchSize >= 2 and MaxEpochs >= 0");
  }
}

void to_json(Json& j, const DatasetOptions& o) {
  j = {{"duration", o.duration},   {"frame_period", o.frame_period}, {"snr_db", real(o.snr_db)},
       {"v_max", o.v_max},         {"omega_max", o.omega_max},       {"dwell_min", o.dwell_min},
       {"dwell_max", o.dwell_max}, {"wheel_base", o.wheel_base},     {"wall_margin", o.wall_margin},
       {"reflector_clearance", o.reflector_clearance}, {"seed", o.seed}};
}

void from_json(const Json& j, DatasetOptions& o) {
  Fields f(j, "dataset");
  f.get("duration", o.duration);
  f.get("frame_period", o.frame_period);
  f.get_real("snr_db", o.snr_db);
  f.get("v_max", o.v_max);
  f.get("omega_max", o.omega_max);
  f.get("dwell_min", o.dwell_min);
  f.get("dwell_max", o.dwell_max);
  f.get("wheel_base", o.wheel_base);
  f.get("wall_margin", o.wall_margin);
  f.get("reflector_clearance", o.reflector_clearance);
  f.get("seed", o.seed);
  f.finish();
  if (!(o.duration > 0.0) || !(o.frame_period > 0.0) || !(o.dwell_min > 0.0) || o.dwell_max < o.dwell_min) {
    throw ConfigError("dataset: duration and frame_period must be positive and dwell_min <= dwell_max");
  }
}

// ----------------------------------------------------------------- experiments

void to_json(Json& j, const ControllerGains& g) {
  j = {{"k_balance", g.k_balance}, {"k_waypoint", g.k_waypoint}, {"forward_speed", g.forward_speed},
       {"range_min", g.range_min}, {"range_max", g.range_max},   {"omega_max", g.omega_max}};
}

void from_json(const Json& j, ControllerGains& g) {
  Fields f(j, "gains");
  f.get("k_balance", g.k_balance);
  f.get("k_waypoint", g.k_waypoint);
  f.get("forward_speed", g.forward_speed);
  f.get("range_min", g.range_min);
  f.get("range_max", g.range_max);
  f.get("omega_max", g.omega_max);
  f.finish();
}

void to_json(Json& j, const SlipExperimentConfig& c) {
  Json script = Json::array(), windows = Json::array();
  for (const auto& s : c.script) script.push_back({{"start", s.start}, {"v", s.cmd.v_lin}, {"omega", s.cmd.omega_r}});
  for (const auto& w : c.windows) {
    windows.push_back({{"start", w.start}, {"length", w.length}, {"left", w.slip.left}, {"right", w.slip.right}});
  }
  j = {{"duration", c.duration},
       {"frame_period", c.frame_period},
       {"snr_db", real(c.snr_db)},
       {"wheel_base", c.wheel_base},
       {"start", {{"x", c.start.x}, {"y", c.start.y}, {"heading", c.start.heading}}},
       {"script", script},
       {"windows", windows},
       {"horizons", c.horizons},
       {"seed", c.seed}};
}

void from_json(const Json& j, SlipExperimentConfig& c) {
  Fields f(j, "slip");
  f.get("duration", c.duration);
  f.get("frame_period", c.frame_period);
  f.get_real("snr_db", c.snr_db);
  f.get("wheel_base", c.wheel_base);
  if (const Json* s = f.find("start")) c.start = parse_pose(*s, "slip.start");
  if (const Json* s = f.find("script")) {
    if (!s->is_array()) throw ConfigError("slip.script: expected an array");
    c.script.clear();
    for (const auto& item : *s) {
      ScriptStep step;
      Fields g(item, "slip.script[]");
      g.get("start", step.start);
      g.get("v", step.cmd.v_lin);
      g.get("omega", step.cmd.omega_r);
      g.finish();
      c.script.push_back(step);
    }
  }
  if (const Json* s = f.find("windows")) {
    if (!s->is_array()) throw ConfigError("slip.windows: expected an array");
    c.windows.clear();
    for (const auto& item : *s) {
      SlipWindow w;
      Fields g(item, "slip.windows[]");
      g.get("start", w.start);
      g.get("length", w.length);
      g.get("left", w.slip.left);
      g.get("right", w.slip.right);
      g.finish();
      if (w.slip.left < 0 || w.slip.left > 1 || w.slip.right < 0 || w.slip.right > 1) {
        throw ConfigError("slip.windows[]: slip must lie in [0, 1]");
      }
      c.windows.push_back(w);
    }
  }
  f.get("horizons", c.horizons);
  f.get("seed", c.seed);
  f.finish();
  for (int k : c.horizons) {
    if (k < 1) throw ConfigError("slip.horizons: every horizon must be >= 1");
  }
}

void to_json(Json& j, const CorridorExperimentConfig& c) {
  Json conditions = Json::array();
  for (Condition cond : c.conditions) conditions.push_back(condition_name(cond));
  j = {{"runs", c.runs},
       {"frame_period", c.frame_period},
       {"timeout", c.timeout},
       {"wheel_base", c.wheel_base},
       {"burst_period", c.burst_period},
       {"burst_length", c.burst_length},
       {"burst_snr_db", real(c.burst_snr_db)},
       {"base_snr_db", real(c.base_snr_db)},
       {"gains", c.gains},
       {"gate_threshold_db", c.gate.threshold_db},
       {"conditions", conditions},
       {"seed", c.seed}};
}

void from_json(const Json& j, CorridorExperimentConfig& c) {
  Fields f(j, "corridor");
  f.get("runs", c.runs);
  f.get("frame_period", c.frame_period);
  f.get("timeout", c.timeout);
  f.get("wheel_base", c.wheel_base);
  f.get("burst_period", c.burst_period);
  f.get("burst_length", c.burst_length);
  f.get_real("burst_snr_db", c.burst_snr_db);
  f.get_real("base_snr_db", c.base_snr_db);
  if (const Json* g = f.find("gains")) c.gains = g->get<ControllerGains>();
  f.get("gate_threshold_db", c.gate.threshold_db);
  if (const Json* s = f.find("conditions")) {
    std::vector<std::string> names;
    try {
      names = s->get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("corridor.conditions: ") + e.what());
    }
    c.conditions.clear();
    for (const auto& n : names) {
      try {
        c.conditions.push_back(parse_condition(n));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("corridor.conditions: ") + e.what());
      }
    }
  }
  f.get("seed", c.seed);
  f.finish();
  if (c.runs < 1 || !(c.timeout > 0.0) || !(c.frame_period > 0.0) || !(c.burst_period >= c.burst_length)) {
    throw ConfigError("corridor: runs, timeout and frame_period must be positive and burst_period >= burst_length");
  }
}

// ----------------------------------------------------------------- worlds

WorldSpec parse_world(const Json& j) {
  WorldSpec w;
  Fields f(j, "world");
  f.get("name", w.name);
  if (const Json* b = f.find("bounds")) w.map.bounds = parse_bounds(*b, "world.bounds");

  auto add = [&](const Reflector& r) { w.map.reflectors.push_back(r); };
  if (const Json* list = f.find("reflectors")) {
    if (!list->is_array()) throw ConfigError("world.reflectors: expected an array");
    for (const auto& item : *list) {
      Reflector r;
      Fields g(item, "world.reflectors[]");
      g.get("x", r.x);
      g.get("y", r.y);
      g.get("radius", r.radius);
      g.get("reflectivity", r.reflectivity);
      g.finish();
      add(r);
    }
  }
  if (const Json* rows = f.find("rows")) {
    if (!rows->is_array()) throw ConfigError("world.rows: expected an array");
    for (const auto& item : *rows) {
      double x_start = 0, x_end = 0, y = 0, spacing = 0.5, radius = 0.05, reflectivity = 1.0;
      Fields g(item, "world.rows[]");
      g.get("x_start", x_start);
      g.get("x_end", x_end);
      g.get("y", y);
      g.get("spacing", spacing);
      g.get("radius", radius);
      g.get("reflectivity", reflectivity);
      g.finish();
      if (!(spacing > 0.0) || x_end < x_start) throw ConfigError("world.rows[]: need spacing > 0 and x_end >= x_start");
      const int count = static_cast<int>(std::floor((x_end - x_start) / spacing + 1e-9)) + 1;
      for (int i = 0; i < count; ++i) add({x_start + i * spacing, y, radius, reflectivity});
    }
  }
  if (const Json* fields = f.find("scatter")) {
    if (!fields->is_array()) throw ConfigError("world.scatter: expected an array");
    for (const auto& item : *fields) {
      int count = 0;
      std::uint64_t seed = 1;
      Bounds region = w.map.bounds;
      double r_lo = 0.02, r_hi = 0.1, refl_lo = 0.3, refl_hi = 1.0, separation = 0.3;
      Fields g(item, "world.scatter[]");
      g.get("count", count);
      g.get("seed", seed);
      if (const Json* b = g.find("region")) region = parse_bounds(*b, "world.scatter[].region");
      g.get("radius_min", r_lo);
      g.get("radius_max", r_hi);
      g.get("reflectivity_min", refl_lo);
      g.get("reflectivity_max", refl_hi);
      g.get("min_separation", separation);
      g.finish();
      Rng rng(seed);
      std::uniform_real_distribution<double> ux(region.x_min, region.x_max), uy(region.y_min, region.y_max);
      std::uniform_real_distribution<double> ur(r_lo, r_hi), ue(refl_lo, refl_hi);
      int placed = 0;
      for (int attempt = 0; placed < count && attempt < 1000 * std::max(count, 1); ++attempt) {
        Reflector r{ux(rng), uy(rng), ur(rng), ue(rng)};
        bool clear = true;
        for (const auto& o : w.map.reflectors) {
          if (std::hypot(o.x - r.x, o.y - r.y) < separation + o.radius + r.radius) clear = false;
        }
        if (!clear) continue;
        add(r);
        ++placed;
      }
      if (placed < count) throw ConfigError("world.scatter[]: could not place " + std::to_string(count) + " reflectors");
    }
  }
  if (const Json* s = f.find("spawn")) {
    Fields g(*s, "world.spawn");
    g.get("x_min", w.spawn.x_min);
    g.get("x_max", w.spawn.x_max);
    g.get("y_min", w.spawn.y_min);
    g.get("y_max", w.spawn.y_max);
    g.get("heading", w.spawn_heading);
    g.get("heading_spread", w.spawn_heading_spread);
    g.finish();
  }
  if (const Json* s = f.find("waypoint")) {
    Fields g(*s, "world.waypoint");
    g.get("x", w.waypoint_x);
    g.get("y", w.waypoint_y);
    g.get("arrival_radius", w.arrival_radius);
    g.finish();
  }
  if (const Json* s = f.find("corridor")) {
    Fields g(*s, "world.corridor");
    g.get("midline_y", w.midline_y);
    g.get("x_start", w.corridor_x_start);
    g.get("x_end", w.corridor_x_end);
    g.finish();
  }
  f.finish();
  try {
    w.map.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
  return w;
}

WorldSpec load_world(const std::string& path) {
  try {
    return parse_world(load_json(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

Json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "' for reading");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": malformed JSON: " + e.what());
  }
}

void save_json(const Json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

// ----------------------------------------------------------------- csv and images

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

CsvWriter::CsvWriter(std::string path, const std::vector<std::string>& columns)
    : path_(std::move(path)), columns_(columns.size()) {
  for (const auto& c : columns) cell(c);
  end_row();
}

CsvWriter::~CsvWriter() {
  if (!closed_) {
    try {
      close();
    } catch (...) {
    }
  }
}

void CsvWriter::cell(const std::string& text) {
  if (in_row_ > 0) buffer_ += ',';
  buffer_ += text;
  ++in_row_;
}

CsvWriter& CsvWriter::operator<<(const std::string& s) {
  cell(s);
  return *this;
}
CsvWriter& CsvWriter::operator<<(double v) {
  cell(format_double(v));
  return *this;
}
CsvWriter& CsvWriter::operator<<(int v) {
  cell(std::to_string(v));
  return *this;
}
CsvWriter& CsvWriter::operator<<(long long v) {
  cell(std::to_string(v));
  return *this;
}

void CsvWriter::end_row() {
  if (in_row_ != columns_) {
    throw std::logic_error(path_ + ": row has " + std::to_string(in_row_) + " cells, expected " +
                           std::to_string(columns_));
  }
  buffer_ += '\n';
  in_row_ = 0;
}

void CsvWriter::close() {
  closed_ = true;
  std::ofstream out(path_, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path_ + "' for writing");
  out << buffer_;
  if (!out) throw std::runtime_error("write to '" + path_ + "' failed");
}

void write_pgm(const Grid& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "P5\n" << g.cols() << ' ' << g.rows() << "\n255\n";
  const double peak = g.size() ? g.maxCoeff() : 0.0;
  std::string row(static_cast<std::size_t>(g.cols()), '\0');
  for (Eigen::Index k = 0; k < g.rows(); ++k) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      const double v = peak > 0.0 ? std::clamp(g(k, j) / peak, 0.0, 1.0) : 0.0;
      row[static_cast<std::size_t>(j)] = static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v)));
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace echopt
