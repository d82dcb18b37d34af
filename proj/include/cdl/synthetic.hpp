#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdl/corpus.hpp"

namespace cdl {

// A toy dialogue corpus with planted attribute structure over a vocabulary
// of under 200 words:
//   coherent pairs  context carries a topic phrase, the response carries that
//                   topic's paired phrase;
//   specific pairs  the response is built from a pool of rare words;
//   generic pairs   one of a handful of stock replies to any context.
// The word inventory is fixed; `seed` only drives sampling.
struct SyntheticOptions {
  std::size_t pairs = 2000;
  std::uint64_t seed = 1;
  double coherent_share = 0.35;
  double specific_share = 0.25;  // the rest is generic
};

enum class SyntheticKind { kCoherent, kSpecific, kGeneric };

struct SyntheticCorpus {
  Corpus corpus;
  std::vector<SyntheticKind> kinds;  // aligned with corpus.pairs
};

SyntheticCorpus synthetic_corpus(const SyntheticOptions& options);

// The fixed word inventory, for inspection and tests.
struct SyntheticLexicon {
  std::vector<std::string> topic_context;   // two words per topic
  std::vector<std::string> topic_response;  // two words per topic
  std::vector<std::string> rare;
  std::vector<std::string> filler;
  std::vector<std::string> generic_replies;
};
const SyntheticLexicon& synthetic_lexicon();

}  // namespace cdl
