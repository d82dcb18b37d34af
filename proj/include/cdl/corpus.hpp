#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace cdl {

using TokenId = std::int32_t;

// One context/response record. Token fields are filled at load time with
// the corpus tokenizer so every consumer sees the same segmentation.
struct DialoguePair {
  std::uint32_t id = 0;
  std::vector<std::string> context;
  std::string response;
  std::vector<std::vector<std::string>> context_tokens;
  std::vector<std::string> response_tokens;

  // Context words across all utterances (no separators).
  std::vector<std::string> flat_context() const;
};

struct Corpus {
  std::vector<DialoguePair> pairs;
  std::string checksum;  // of the JSON-lines serialization

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

// Reads line-delimited records {"context": [...], "response": "..."}.
// Blank lines are skipped. Throws DataError with the offending line number.
Corpus load_corpus(const std::string& path);

// Builds a corpus from in-memory records, applying the same validation.
Corpus make_corpus(const std::vector<std::pair<std::vector<std::string>, std::string>>& records);

void save_corpus(const Corpus& corpus, const std::string& path);

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kCount = 5;
}  // namespace special

class Vocabulary {
 public:
  Vocabulary();

  TokenId id(const std::string& token) const;  // kUnk when absent
  const std::string& token(TokenId id) const;
  bool contains(const std::string& token) const { return to_id_.count(token) != 0; }
  std::size_t size() const { return to_token_.size(); }

  // Training-corpus count, including tokens that fell under the cutoff.
  std::uint64_t frequency(const std::string& token) const;
  const std::map<std::string, std::uint64_t>& frequencies() const { return freq_; }

  static bool is_reserved(TokenId id) { return id >= 0 && id < special::kCount; }

  // "token<TAB>id<TAB>freq"; five reserved lines first, then in-vocab tokens
  // by id, then below-cutoff tokens with id -1.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  friend Vocabulary build_vocab(const Corpus& corpus, std::uint64_t min_freq);
  friend Vocabulary vocab_from_tokens(const std::vector<std::string>& tokens,
                                      const std::map<std::string, std::uint64_t>& freq);

 private:
  TokenId add(const std::string& token);

  std::unordered_map<std::string, TokenId> to_id_;
  std::vector<std::string> to_token_;
  std::map<std::string, std::uint64_t> freq_;
};

// Tokens with count >= min_freq get ids in order of decreasing frequency,
// ties alphabetical. Counts cover context and response tokens.
Vocabulary build_vocab(const Corpus& corpus, std::uint64_t min_freq = 1);

// Rebuilds a vocabulary from its ordered non-reserved token list.
Vocabulary vocab_from_tokens(const std::vector<std::string>& tokens,
                             const std::map<std::string, std::uint64_t>& freq);

struct EncodedPair {
  std::uint32_t id = 0;
  std::vector<TokenId> context_ids;
  std::vector<TokenId> response_ids;  // ends with kEos
};

// Context utterances are joined with SEP and truncated to the most recent
// max_context_len tokens. The response keeps its prefix and always ends in
// EOS. An empty context encodes as a single SEP so the encoder never sees an
// empty sequence.
EncodedPair encode(const DialoguePair& pair, const Vocabulary& vocab,
                   std::size_t max_context_len, std::size_t max_response_len);

std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocabulary& vocab,
                                       std::size_t max_context_len,
                                       std::size_t max_response_len);

// Maps ids back to tokens, dropping PAD/BOS/EOS.
std::vector<std::string> decode(const std::vector<TokenId>& ids, const Vocabulary& vocab);

}  // namespace cdl
