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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "echopt/echopt_net.hpp"
#include "echopt/sonar_sim.hpp"

namespace echopt {

inline constexpr int kDatasetVersion = 1;

struct DatasetHeader {
  int version = kDatasetVersion;
  SensorConfig sensor;
  double frame_period = 0.2;
  int frame_count = 0;
  std::string world_hash;
  std::uint64_t seed = 0;
  double snr_db = 5.0;
};

// One sensor frame. `commanded` is the command that was active while the robot
// moved from the previous frame to this one.
struct FrameRecord {
  double timestamp = 0.0;
  VelocityCommand commanded;
  VelocityCommand executed;
  Pose2D pose;
  ScapePtr scape;
};

struct Dataset {
  DatasetHeader header;
  std::vector<FrameRecord> records;
};

struct DatasetOptions {
  double duration = 1500.0;  // seconds
  double frame_period = 0.2;
  double snr_db = 5.0;
  double v_max = 0.3;
  double omega_max = 1.0;
  double dwell_min = 1.0;
  double dwell_max = 4.0;
  double wheel_base = 0.3;
  double wall_margin = 0.4;        // keep-out distance from the bounds
  double reflector_clearance = 0.3;  // keep-out distance from reflector surfaces
  std::uint64_t seed = 1;
};

// Random-walk drive through the world with piecewise-constant commands. Commands
// that would leave the bounds or hit a reflector are redrawn. Payloads are stored
// at float32 precision so that a written file reads back bit-exactly.
Dataset generate_dataset(const ReflectorMap& world, const SensorConfig& sensor, const DatasetOptions& options,
                         const std::string& world_hash = "");

// JSON header line, then per record a uint32 byte length followed by the
// little-endian fields: 8 float64 (timestamp, commanded v/w, executed v/w,
// pose x/y/heading) and num_ranges*num_azimuths float32 cells.
void write_dataset(const Dataset& data, const std::string& path);
Dataset read_dataset(const std::string& path);

// Sliding windows: frames i..i+n-1, the commands of records i..i+n and target
// frame i+n. A dataset of N frames yields N - n stacks.
std::vector<FrameStack> make_stacks(const Dataset& data, int n_frames);

// Rounds every cell to float32 precision.
Grid round_to_float(const Grid& g);

}  // namespace echopt
