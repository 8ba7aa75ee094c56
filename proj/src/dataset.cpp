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

#include "echopt/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "echopt/config_io.hpp"
#include "echopt/little_endian.hpp"

namespace echopt {

namespace {

constexpr const char* kFormat = "echopt-frames";
constexpr std::uint32_t kMetaDoubles = 8;

bool clear_of_reflectors(const ReflectorMap& world, const Pose2D& p, double clearance) {
  for (const auto& r : world.reflectors) {
    if (std::hypot(r.x - p.x, r.y - p.y) < r.radius + clearance) return false;
  }
  return true;
}

}  // namespace

Grid round_to_float(const Grid& g) { return g.cast<float>().cast<double>(); }

Dataset generate_dataset(const ReflectorMap& world, const SensorConfig& sensor, const DatasetOptions& options,
                         const std::string& world_hash) {
  sensor.validate();
  world.validate();
  if (!(options.duration > 0.0) || !(options.frame_period > 0.0)) {
    throw std::invalid_argument("generate_dataset: duration and frame period must be positive");
  }
  const int count = static_cast<int>(std::llround(options.duration / options.frame_period));
  Rng cmd_rng(options.seed);
  Rng noise_rng(options.seed ^ 0x9E3779B97F4A7C15ULL);
  std::uniform_real_distribution<double> uv(-options.v_max, options.v_max);
  std::uniform_real_distribution<double> uw(-options.omega_max, options.omega_max);
  std::uniform_real_distribution<double> udwell(options.dwell_min, options.dwell_max);
  std::uniform_real_distribution<double> uheading(-kPi, kPi);

  const Bounds& b = world.bounds;
  const double m = options.wall_margin;
  std::uniform_real_distribution<double> ux(b.x_min + m, b.x_max - m), uy(b.y_min + m, b.y_max - m);
  Pose2D pose;
  for (int attempt = 0;; ++attempt) {
    pose = {ux(cmd_rng), uy(cmd_rng), uheading(cmd_rng)};
    if (clear_of_reflectors(world, pose, options.reflector_clearance)) break;
    if (attempt > 10000) throw std::invalid_argument("generate_dataset: no free start position in the world");
  }

  auto admissible = [&](const Pose2D& from, const VelocityCommand& c) {
    const Pose2D next = step_kinematics(from, c, options.frame_period, {}, options.wheel_base);
    return b.contains(next.x, next.y, m) && clear_of_reflectors(world, next, options.reflector_clearance);
  };

  Dataset data;
  data.header.sensor = sensor;
  data.header.frame_period = options.frame_period;
  data.header.frame_count = count;
  data.header.world_hash = world_hash;
  data.header.seed = options.seed;
  data.header.snr_db = options.snr_db;
  data.records.reserve(static_cast<std::size_t>(count));

  VelocityCommand cmd;
  double dwell_left = 0.0;
  for (int i = 0; i < count; ++i) {
    const double t = i * options.frame_period;
    VelocityCommand into;
    if (i > 0) {
      if (dwell_left <= 1e-9 || !admissible(pose, cmd)) {
        bool found = false;
        for (int attempt = 0; attempt < 100 && !found; ++attempt) {
          cmd = {uv(cmd_rng), uw(cmd_rng)};
          found = admissible(pose, cmd);
        }
        // Turning on the spot is always admissible.
        if (!found) cmd = {0.0, options.omega_max};
        dwell_left = udwell(cmd_rng);
      }
      into = cmd;
      pose = step_kinematics(pose, cmd, options.frame_period, {}, options.wheel_base);
      dwell_left -= options.frame_period;
    }
    Energyscape s = inject_noise(render_energyscape(world, pose, sensor, t), options.snr_db, noise_rng);
    s.data = round_to_float(s.data);
    data.records.push_back({t, into, into, pose, std::make_shared<const Energyscape>(std::move(s))});
  }
  return data;
}

void write_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  Json header = {{"format", kFormat},
                 {"version", data.header.version},
                 {"sensor", data.header.sensor},
                 {"frame_period", data.header.frame_period},
                 {"frame_count", static_cast<int>(data.records.size())},
                 {"world_hash", data.header.world_hash},
                 {"seed", data.header.seed},
                 {"snr_db", std::isinf(data.header.snr_db) ? Json("inf") : Json(data.header.snr_db)}};
  out << header.dump() << '\n';
  const SensorConfig& s = data.header.sensor;
  const std::uint32_t cells = static_cast<std::uint32_t>(s.num_ranges * s.num_azimuths);
  const std::uint32_t bytes = kMetaDoubles * 8 + cells * 4;
  for (const auto& r : data.records) {
    if (!r.scape || r.scape->data.size() != cells) throw DataError("write_dataset: record grid does not match sensor");
    le::put_uint(out, bytes);
    for (double v : {r.timestamp, r.commanded.v_lin, r.commanded.omega_r, r.executed.v_lin, r.executed.omega_r,
                     r.pose.x, r.pose.y, r.pose.heading}) {
      le::put_f64(out, v);
    }
    const double* p = r.scape->data.data();
    for (std::uint32_t c = 0; c < cells; ++c) le::put_f32(out, static_cast<float>(p[c]));
  }
  if (!out) throw DataError("write to '" + path + "' failed");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": missing header line");
  Json header;
  try {
    header = Json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path + ": header is not JSON (" + e.what() + ")");
  }
  if (header.value("format", "") != kFormat) throw DataError(path + ": not an echopt frame file");
  Dataset data;
  try {
    data.header.version = header.at("version").get<int>();
    if (data.header.version != kDatasetVersion) {
      throw DataError(path + ": dataset format version " + std::to_string(data.header.version) +
                      ", this build reads version " + std::to_string(kDatasetVersion) +
                      "; regenerate it with `echopt gen-data`");
    }
    data.header.sensor = header.at("sensor").get<SensorConfig>();
    data.header.frame_period = header.at("frame_period").get<double>();
    data.header.frame_count = header.at("frame_count").get<int>();
    data.header.world_hash = header.at("world_hash").get<std::string>();
    data.header.seed = header.at("seed").get<std::uint64_t>();
    const Json& snr = header.at("snr_db");
    data.header.snr_db = snr.is_string() ? kInf : snr.get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad header field (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw DataError(path + ": bad sensor block (" + e.what() + ")");
  }
  const SensorConfig& s = data.header.sensor;
  const std::uint32_t cells = static_cast<std::uint32_t>(s.num_ranges * s.num_azimuths);
  const std::uint32_t expected = kMetaDoubles * 8 + cells * 4;
  data.records.reserve(static_cast<std::size_t>(data.header.frame_count));
  for (int i = 0; i < data.header.frame_count; ++i) {
    std::uint32_t bytes = 0;
    if (!le::get_uint(in, bytes)) {
      throw DataError(path + ": truncated after " + std::to_string(i) + " of " +
                      std::to_string(data.header.frame_count) + " records");
    }
    if (bytes != expected) throw DataError(path + ": record " + std::to_string(i) + " has an unexpected length");
    double meta[kMetaDoubles];
    for (double& v : meta) {
      if (!le::get_f64(in, v)) throw DataError(path + ": truncated record " + std::to_string(i));
    }
    Grid g(s.num_ranges, s.num_azimuths);
    double* p = g.data();
    for (std::uint32_t c = 0; c < cells; ++c) {
      float v = 0.0f;
      if (!le::get_f32(in, v)) throw DataError(path + ": truncated record " + std::to_string(i));
      p[c] = v;
    }
    FrameRecord r;
    r.timestamp = meta[0];
    r.commanded = {meta[1], meta[2]};
    r.executed = {meta[3], meta[4]};
    r.pose = {meta[5], meta[6], meta[7]};
    r.scape = std::make_shared<const Energyscape>(std::move(g), s, r.timestamp);
    data.records.push_back(std::move(r));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(path + ": trailing bytes after the last record");
  return data;
}

std::vector<FrameStack> make_stacks(const Dataset& data, int n_frames) {
  if (n_frames < 1) throw std::invalid_argument("make_stacks: n_frames must be positive");
  std::vector<FrameStack> out;
  const int count = static_cast<int>(data.records.size());
  for (int i = 0; i + n_frames < count; ++i) {
    FrameStack s;
    for (int f = i; f < i + n_frames; ++f) s.frames.push_back(data.records[static_cast<std::size_t>(f)].scape);
    for (int c = i; c <= i + n_frames; ++c) s.commands.push_back(data.records[static_cast<std::size_t>(c)].commanded);
    s.target = data.records[static_cast<std::size_t>(i + n_frames)].scape;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace echopt
