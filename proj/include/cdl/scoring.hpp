#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "cdl/corpus.hpp"

namespace cdl {

enum class Attribute { kCoherence, kInformativeness, kSpecificity };

Attribute parse_attribute(const std::string& name);  // throws std::invalid_argument
std::string attribute_name(Attribute attribute);

const std::unordered_set<std::string>& default_stopwords();

// A key-phrase: one content word or two adjacent content words.
struct Phrase {
  std::string text;  // words joined by a single space
  int words = 1;

  bool operator<(const Phrase& other) const { return text < other.text; }
  bool operator==(const Phrase& other) const { return text == other.text; }
};

// Content-word unigrams and contiguous content-word bigrams. Stopwords,
// punctuation and reserved markers break bigram runs and are never emitted.
std::set<Phrase> extract_keyphrases(const std::vector<std::string>& tokens,
                                    const std::unordered_set<std::string>& stopwords);

// Pair-level document counts of context-side and response-side key-phrases.
class CooccurrenceStats {
 public:
  static CooccurrenceStats build(const Corpus& corpus,
                                 const std::unordered_set<std::string>& stopwords);
  static CooccurrenceStats from_counts(std::uint64_t n_pairs);

  std::uint64_t pairs() const { return n_pairs_; }
  std::uint64_t context_count(const std::string& p) const;
  std::uint64_t response_count(const std::string& h) const;
  std::uint64_t joint_count(const std::string& p, const std::string& h) const;

  // Direct setters, used when assembling count tables by hand.
  void set_counts(const std::string& p, const std::string& h, std::uint64_t n_p,
                  std::uint64_t n_h, std::uint64_t n_ph);

  const std::unordered_set<std::string>& stopwords() const { return stopwords_; }

 private:
  std::uint64_t n_pairs_ = 0;
  std::unordered_map<std::string, std::uint64_t> context_;
  std::unordered_map<std::string, std::uint64_t> response_;
  std::unordered_map<std::string, std::uint64_t> joint_;  // key: p + '\t' + h
  std::unordered_set<std::string> stopwords_;
};

// Normalized PMI from raw counts. Returns exactly 1 when n_ph == n_pairs.
// Throws std::invalid_argument when n_ph == 0.
double npmi(std::uint64_t n_p, std::uint64_t n_h, std::uint64_t n_ph, std::uint64_t n_pairs);
double npmi(const std::string& p, const std::string& h, const CooccurrenceStats& stats);

// Key-phrase connectivity S_C of one pair.
double coherence_connectivity(const DialoguePair& pair, const CooccurrenceStats& stats);

// Word vectors from a rank-truncated eigendecomposition of the positive PMI
// matrix of within-pair word co-occurrence counts.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::vector<std::string> tokens, Eigen::MatrixXd vectors);

  static EmbeddingTable train(const Corpus& corpus, std::size_t dim = 64,
                              std::size_t max_vocab = 2000);

  std::size_t dim() const { return static_cast<std::size_t>(vectors_.cols()); }
  std::size_t size() const { return tokens_.size(); }
  const Eigen::MatrixXd& vectors() const { return vectors_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  // Mean of the in-table vectors; false when no token is in the table.
  bool mean_vector(const std::vector<std::string>& tokens, Eigen::VectorXd& out) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  Eigen::MatrixXd vectors_;  // one row per token
};

// max(cos(mean(context), mean(response)), 0); 0 when either side has no
// in-table token or a zero-norm mean.
double relatedness(const DialoguePair& pair, const EmbeddingTable& emb);

double coherence_score(const DialoguePair& pair, const CooccurrenceStats& stats,
                       const EmbeddingTable& emb, double alpha, double beta);

// Responses are keyed by their space-joined token string.
std::map<std::string, double> source_entropy(const Corpus& corpus);

class IdfTable {
 public:
  static IdfTable build(const Corpus& corpus);

  double idf(const std::string& token) const;  // unseen tokens clamp to max_idf
  double min_idf() const { return min_idf_; }
  double max_idf() const { return max_idf_; }
  std::uint64_t responses() const { return r_total_; }
  std::uint64_t responses_with(const std::string& token) const;
  double specificity(const std::string& token) const;

 private:
  std::unordered_map<std::string, std::uint64_t> r_t_;
  std::uint64_t r_total_ = 0;
  double min_idf_ = 0.0;
  double max_idf_ = 0.0;
};

// Mean per-token specificity over non-reserved tokens; 0.5 everywhere when
// the table is degenerate (max_idf == min_idf).
double specificity_score(const std::vector<std::string>& response_tokens, const IdfTable& idf);

struct ScoringConfig {
  double alpha = 0.5;
  double beta = 0.5;
  std::size_t embedding_dim = 64;
  std::size_t embedding_vocab = 2000;
};

struct AttributeScores {
  Attribute attribute = Attribute::kCoherence;
  std::vector<std::uint32_t> ids;
  std::vector<double> scores;  // aligned with ids
};

AttributeScores score_corpus(const Corpus& corpus, Attribute attribute,
                             const ScoringConfig& config = {});

// JSON lines: a {"meta": {...}} header line then {"id": n, "score": x}.
void save_scores(const AttributeScores& scores, const std::string& path,
                 const std::map<std::string, std::string>& meta = {});
AttributeScores load_scores(const std::string& path);

}  // namespace cdl
