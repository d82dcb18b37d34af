#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdl/scoring.hpp"

namespace cdl {

struct SubsetIndex {
  Attribute attribute = Attribute::kCoherence;
  double ratio = 1.0;
  std::vector<std::uint32_t> ids;  // ascending
  std::string scores_checksum;

  bool contains(std::uint32_t id) const;
};

// Top ceil(ratio * n) pairs by score; equal scores prefer the smaller id.
SubsetIndex build_subset(const AttributeScores& scores, double ratio);

// One id per line after '#' header comments (attribute, ratio, checksum).
void save_subset(const SubsetIndex& subset, const std::string& path);
SubsetIndex load_subset(const std::string& path);

}  // namespace cdl
