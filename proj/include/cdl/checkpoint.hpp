#pragma once

// Checkpoint container:
//
//   CDLCKPT1\n
//   <header byte length>\n
//   <JSON header>
//   <payload: little-endian float32 tensors>
//
// The header records the branch configuration, branch roles, vocabulary,
// trainer state and a tensor directory {name, shape, offset}, where offset
// is the byte position of the tensor inside the payload.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdl/corpus.hpp"
#include "cdl/model.hpp"
#include "cdl/optimizer.hpp"

namespace cdl {

struct Checkpoint {
  BranchGroup group;
  Vocabulary vocab;
  std::vector<Adam> optimizers;  // empty, or one per branch
  nlohmann::json state = nlohmann::json::object();
};

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

nlohmann::json config_to_json(const BranchConfig& config);
BranchConfig config_from_json(const nlohmann::json& j);

}  // namespace cdl
