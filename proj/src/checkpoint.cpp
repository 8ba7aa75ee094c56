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

#include "echopt/checkpoint.hpp"

#include <fstream>
#include <map>

#include "echopt/config_io.hpp"
#include "echopt/little_endian.hpp"

namespace echopt {

namespace {

constexpr const char* kFormat = "echopt-checkpoint";
constexpr int kVersion = 1;

struct Entry {
  std::string name;
  ad::Shape shape;
  const ad::Vec<float>* values;
  bool learnable;
};

}  // namespace

void save_checkpoint(const ModelParams<float>& params, const std::string& prefix, const nlohmann::json& extra) {
  std::vector<Entry> entries;
  for (const auto& [name, t] : params.named()) entries.push_back({name, t->shape(), &t->value(), true});
  const int width = static_cast<int>(params.bn_stats.running_mean.size());
  entries.push_back({"batchnorm/running_mean", {width}, &params.bn_stats.running_mean, false});
  entries.push_back({"batchnorm/running_var", {width}, &params.bn_stats.running_var, false});

  Json tensors = Json::array();
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open '" + prefix + ".bin' for writing");
  long long offset = 0;
  for (const auto& e : entries) {
    tensors.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"offset", offset},
                       {"count", static_cast<long long>(e.values->size())},
                       {"learnable", e.learnable}});
    for (Eigen::Index i = 0; i < e.values->size(); ++i) le::put_f32(bin, (*e.values)[i]);
    offset += static_cast<long long>(e.values->size());
  }
  if (!bin) throw std::runtime_error("write to '" + prefix + ".bin' failed");

  Json manifest = {{"format", kFormat},
                   {"version", kVersion},
                   {"dtype", "float32-le"},
                   {"model", params.cfg},
                   {"learnable_parameters", count_params(params)},
                   {"total_values", offset},
                   {"tensors", tensors}};
  if (!extra.is_null() && !extra.empty()) manifest["extra"] = extra;
  save_json(manifest, prefix + ".json");
}

ModelParams<float> load_checkpoint(const std::string& prefix) {
  Json manifest;
  try {
    manifest = load_json(prefix + ".json");
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  if (manifest.value("format", "") != kFormat) throw DataError(prefix + ".json: not an echopt checkpoint");
  if (manifest.value("version", 0) != kVersion) {
    throw DataError(prefix + ".json: checkpoint version " + std::to_string(manifest.value("version", 0)) +
                    ", this build reads version " + std::to_string(kVersion));
  }
  EchoPTConfig cfg;
  try {
    cfg = manifest.at("model").get<EchoPTConfig>();
  } catch (const std::exception& e) {
    throw DataError(prefix + ".json: bad model block (" + e.what() + ")");
  }
  Rng rng(0);
  ModelParams<float> params = build_model<float>(cfg, rng);

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw DataError("cannot open '" + prefix + ".bin'");
  std::vector<float> flat;
  float v = 0.0f;
  while (le::get_f32(bin, v)) flat.push_back(v);

  auto fill = [&](const Json& entry, ad::Vec<float>& dst, const ad::Shape& shape) {
    const auto stored = entry.at("shape").get<ad::Shape>();
    if (stored != shape) {
      throw DataError(prefix + ": tensor " + entry.at("name").get<std::string>() + " has shape " +
                      ad::shape_str(stored) + ", the model expects " + ad::shape_str(shape));
    }
    const auto offset = entry.at("offset").get<long long>();
    const auto count = entry.at("count").get<long long>();
    if (offset < 0 || offset + count > static_cast<long long>(flat.size()) || count != dst.size()) {
      throw DataError(prefix + ".bin: tensor " + entry.at("name").get<std::string>() + " is out of range");
    }
    dst = Eigen::Map<const ad::Vec<float>>(flat.data() + offset, count);
  };

  std::map<std::string, Json> by_name;
  for (const auto& e : manifest.at("tensors")) by_name[e.at("name").get<std::string>()] = e;
  auto lookup = [&](const std::string& name) -> const Json& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError(prefix + ".json: missing tensor " + name);
    return it->second;
  };
  for (auto& n : params.named()) fill(lookup(n.name), n.tensor->value(), n.tensor->shape());
  const int width = cfg.model_width();
  fill(lookup("batchnorm/running_mean"), params.bn_stats.running_mean, {width});
  fill(lookup("batchnorm/running_var"), params.bn_stats.running_var, {width});
  return params;
}

}  // namespace echopt
