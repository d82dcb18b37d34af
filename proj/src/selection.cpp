#include "cdl/selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cdl/error.hpp"
#include "cdl/text.hpp"

namespace cdl {

bool SubsetIndex::contains(std::uint32_t id) const {
  return std::binary_search(ids.begin(), ids.end(), id);
}

SubsetIndex build_subset(const AttributeScores& scores, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw std::invalid_argument("selection ratio must be in (0, 1]");
  if (scores.ids.size() != scores.scores.size())
    throw std::invalid_argument("score ids and values differ in length");
  const std::size_t n = scores.ids.size();
  // Guard against 0.7 * 10 landing a hair above 7 in binary floating point.
  const auto keep = static_cast<std::size_t>(
      std::min<double>(static_cast<double>(n), std::ceil(ratio * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores.scores[a] != scores.scores[b]) return scores.scores[a] > scores.scores[b];
    return scores.ids[a] < scores.ids[b];
  });
  SubsetIndex subset;
  subset.attribute = scores.attribute;
  subset.ratio = ratio;
  for (std::size_t i = 0; i < keep; ++i) subset.ids.push_back(scores.ids[order[i]]);
  std::sort(subset.ids.begin(), subset.ids.end());
  return subset;
}

void save_subset(const SubsetIndex& subset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "# attribute=" << attribute_name(subset.attribute) << '\n';
  out << "# ratio=" << format_double(subset.ratio) << '\n';
  out << "# scores_checksum=" << subset.scores_checksum << '\n';
  for (auto id : subset.ids) out << id << '\n';
}

SubsetIndex load_subset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open subset file " + path);
  SubsetIndex subset;
  bool have_attribute = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto key = line.substr(1, eq - 1);
      key.erase(0, key.find_first_not_of(' '));
      auto value = line.substr(eq + 1);
      try {
        if (key == "attribute") {
          subset.attribute = parse_attribute(value);
          have_attribute = true;
        } else if (key == "ratio") {
          subset.ratio = std::stod(value);
        } else if (key == "scores_checksum") {
          subset.scores_checksum = value;
        }
      } catch (const std::exception& e) {
        throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
      }
      continue;
    }
    try {
      std::size_t used = 0;
      unsigned long id = std::stoul(line, &used);
      if (used != line.size()) throw std::invalid_argument("trailing characters");
      subset.ids.push_back(static_cast<std::uint32_t>(id));
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected a pair id");
    }
  }
  if (!have_attribute) throw DataError(path + ": missing '# attribute=' header");
  std::sort(subset.ids.begin(), subset.ids.end());
  return subset;
}

}  // namespace cdl
