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

#include <string>

#include <nlohmann/json.hpp>

#include "echopt/echopt_net.hpp"

namespace echopt {

// <prefix>.json holds the model config, tensor names, shapes and offsets;
// <prefix>.bin holds every tensor as little-endian float32. Batch-norm running
// statistics are stored with "learnable": false.
void save_checkpoint(const ModelParams<float>& params, const std::string& prefix,
                     const nlohmann::json& extra = nlohmann::json::object());
ModelParams<float> load_checkpoint(const std::string& prefix);

}  // namespace echopt
