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

#include <nlohmann/json.hpp>

#include "echopt/dataset.hpp"
#include "echopt/echopt_net.hpp"
#include "echopt/errors.hpp"
#include "echopt/predictive.hpp"
#include "echopt/sonar_sim.hpp"

namespace echopt {

using Json = nlohmann::json;

// Conversions reject unknown keys and wrong types with a ConfigError naming the
// offending field; missing keys keep their defaults.
void to_json(Json& j, const SensorConfig& s);
void from_json(const Json& j, SensorConfig& s);
void to_json(Json& j, const EchoPTConfig& c);
void from_json(const Json& j, EchoPTConfig& c);
void to_json(Json& j, const OptimSettings& o);
void from_json(const Json& j, OptimSettings& o);
void to_json(Json& j, const DatasetOptions& o);
void from_json(const Json& j, DatasetOptions& o);
void to_json(Json& j, const ControllerGains& g);
void from_json(const Json& j, ControllerGains& g);
void to_json(Json& j, const SlipExperimentConfig& c);
void from_json(const Json& j, SlipExperimentConfig& c);
void to_json(Json& j, const CorridorExperimentConfig& c);
void from_json(const Json& j, CorridorExperimentConfig& c);

// World files hold explicit reflectors plus optional generators: "rows" of
// evenly spaced reflectors and seeded "scatter" fields.
WorldSpec parse_world(const Json& j);
WorldSpec load_world(const std::string& path);

Json load_json(const std::string& path);
void save_json(const Json& j, const std::string& path);

// 64-bit FNV-1a of a byte string, as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

// Comma-separated writer with fixed number formatting so reruns are
// byte-identical. The file is written when the writer is destroyed or closed.
class CsvWriter {
 public:
  CsvWriter(std::string path, const std::vector<std::string>& columns);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  CsvWriter& operator<<(const std::string& s);
  CsvWriter& operator<<(const char* s) { return *this << std::string(s); }
  CsvWriter& operator<<(double v);
  CsvWriter& operator<<(int v);
  CsvWriter& operator<<(long long v);
  void end_row();
  void close();

 private:
  void cell(const std::string& text);
  std::string path_;
  std::string buffer_;
  std::size_t columns_ = 0;
  std::size_t in_row_ = 0;
  bool closed_ = false;
};

std::string format_double(double v);

// Binary PGM, linear map of [0, max] to [0, 255]; an all-zero grid maps to 0.
void write_pgm(const Grid& g, const std::string& path);

}  // namespace echopt
