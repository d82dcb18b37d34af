#include "cdl/synthetic.hpp"

#include <random>
#include <set>
#include <stdexcept>

#include "cdl/scoring.hpp"
#include "cdl/text.hpp"

namespace cdl {

namespace {

constexpr std::size_t kTopics = 12;
constexpr std::size_t kRare = 70;
constexpr std::size_t kFiller = 24;

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

SyntheticLexicon make_lexicon() {
  static const char* const consonants = "bdfgklmnprstvz";
  static const char* const vowels = "aeiou";
  std::mt19937_64 rng(0x5eed1e5ULL);
  std::set<std::string> used;
  const auto& stop = default_stopwords();
  auto word = [&](std::size_t syllables) {
    for (;;) {
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w += consonants[pick(rng, 14)];
        w += vowels[pick(rng, 5)];
      }
      if (!stop.count(w) && used.insert(w).second) return w;
    }
  };
  SyntheticLexicon lex;
  for (std::size_t i = 0; i < 2 * kTopics; ++i) lex.topic_context.push_back(word(2));
  for (std::size_t i = 0; i < 2 * kTopics; ++i) lex.topic_response.push_back(word(2));
  for (std::size_t i = 0; i < kRare; ++i) lex.rare.push_back(word(3));
  for (std::size_t i = 0; i < kFiller; ++i) lex.filler.push_back(word(2));
  lex.generic_replies = {"i do not know .", "that is good .", "ok .", "me too .",
                         "yes , i think so ."};
  return lex;
}

const char* const kGlue[] = {"the", "a", "is", "it", "you", "we", "to", "and", "of", "that"};

std::string glue(std::mt19937_64& rng) { return kGlue[pick(rng, std::size(kGlue))]; }

std::string utterance(std::mt19937_64& rng, const SyntheticLexicon& lex, std::size_t words) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < words; ++i)
    out.push_back(unit(rng) < 0.4 ? glue(rng) : lex.filler[pick(rng, lex.filler.size())]);
  return join(out);
}

}  // namespace

const SyntheticLexicon& synthetic_lexicon() {
  static const SyntheticLexicon lex = make_lexicon();
  return lex;
}

SyntheticCorpus synthetic_corpus(const SyntheticOptions& options) {
  if (options.pairs == 0) throw std::invalid_argument("synthetic corpus needs at least one pair");
  if (options.coherent_share < 0 || options.specific_share < 0 ||
      options.coherent_share + options.specific_share > 1.0)
    throw std::invalid_argument("population shares must be non-negative and sum to at most 1");
  const auto& lex = synthetic_lexicon();
  std::mt19937_64 rng(options.seed);
  std::vector<std::pair<std::vector<std::string>, std::string>> records;
  SyntheticCorpus out;

  for (std::size_t i = 0; i < options.pairs; ++i) {
    const double u = unit(rng);
    SyntheticKind kind = u < options.coherent_share ? SyntheticKind::kCoherent
                         : u < options.coherent_share + options.specific_share
                             ? SyntheticKind::kSpecific
                             : SyntheticKind::kGeneric;
    std::vector<std::string> context;
    if (unit(rng) < 0.5) context.push_back(utterance(rng, lex, 3 + pick(rng, 4)) + " .");
    std::string response;

    switch (kind) {
      case SyntheticKind::kCoherent: {
        const std::size_t t = pick(rng, kTopics);
        context.push_back(utterance(rng, lex, 1 + pick(rng, 3)) + " " + lex.topic_context[2 * t] +
                          " " + lex.topic_context[2 * t + 1] + " " +
                          utterance(rng, lex, 1 + pick(rng, 2)) + " ?");
        const std::string phrase = lex.topic_response[2 * t] + " " + lex.topic_response[2 * t + 1];
        switch (pick(rng, 3)) {
          case 0: response = "the " + phrase + " is " + lex.filler[pick(rng, lex.filler.size())] + " ."; break;
          case 1: response = "we " + phrase + " to it ."; break;
          default: response = phrase + " and " + lex.filler[pick(rng, lex.filler.size())] + " ."; break;
        }
        break;
      }
      case SyntheticKind::kSpecific: {
        context.push_back(utterance(rng, lex, 3 + pick(rng, 4)) + " ?");
        std::vector<std::string> words = {"the"};
        const std::size_t n = 2 + pick(rng, 2);
        for (std::size_t k = 0; k < n; ++k) words.push_back(lex.rare[pick(rng, lex.rare.size())]);
        words.push_back(".");
        response = join(words);
        break;
      }
      case SyntheticKind::kGeneric: {
        std::string c = utterance(rng, lex, 2 + pick(rng, 4));
        if (unit(rng) < 0.3) {
          const std::size_t t = pick(rng, kTopics);
          c += " " + lex.topic_context[2 * t] + " " + lex.topic_context[2 * t + 1];
        }
        context.push_back(c + " ?");
        response = lex.generic_replies[pick(rng, lex.generic_replies.size())];
        break;
      }
    }
    records.emplace_back(std::move(context), std::move(response));
    out.kinds.push_back(kind);
  }
  out.corpus = make_corpus(records);
  return out;
}

}  // namespace cdl
