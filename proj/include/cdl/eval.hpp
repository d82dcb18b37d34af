#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cdl/corpus.hpp"
#include "cdl/model.hpp"
#include "cdl/scoring.hpp"

namespace cdl {

using TokenLists = std::vector<std::vector<std::string>>;

// Unique n-grams over all responses divided by the total n-gram count.
double distinct_n(const TokenLists& responses, std::size_t n);

// Corpus BLEU with uniform weights over orders 1..n and a brevity penalty.
// Orders >= 2 use add-one smoothing on matches and totals.
double bleu_n(const TokenLists& hypotheses, const TokenLists& references, std::size_t n);

// Mean cosine between the mean word vectors of aligned token lists. Pairs
// with no in-table token on either side are skipped; throws DataError when
// every pair is skipped.
double embedding_average(const TokenLists& hypotheses, const TokenLists& others,
                         const EmbeddingTable& emb);

struct EmbeddingScores {
  double ave = 0.0;  // against references
  double coh = 0.0;  // against contexts
};
EmbeddingScores embedding_metrics(const TokenLists& hypotheses, const TokenLists& references,
                                  const TokenLists& contexts, const EmbeddingTable& emb);

// Input embeddings of a branch as a word-vector table (reserved ids left out).
EmbeddingTable branch_embeddings(const Branch& branch, const Vocabulary& vocab);

// Add-one n-gram model over observed types plus one unseen bucket:
// p(g) = (count(g) + 1) / (total + types + 1).
class NgramTable {
 public:
  static NgramTable build(const TokenLists& responses, std::size_t n);
  std::size_t order() const { return n_; }
  std::uint64_t total() const { return total_; }
  std::size_t types() const { return counts_.size(); }
  double probability(const std::string& ngram) const;

 private:
  std::size_t n_ = 1;
  std::uint64_t total_ = 0;
  std::unordered_map<std::string, std::uint64_t> counts_;
};

// The n-grams of one token list, words joined by a single space.
std::vector<std::string> ngrams(const std::vector<std::string>& tokens, std::size_t n);

// Mean over responses with at least one n-gram of the per-response average
// -log2 p(g). 0 when no response has an n-gram.
double entropy_n(const TokenLists& responses, const NgramTable& table);

// KL(P_ref || P_hyp) in nats over unigram distributions, add-one smoothed
// over the union vocabulary.
double kl_divergence(const TokenLists& hypotheses, const TokenLists& references);

// Share of generated tokens whose training frequency is below `threshold`.
double low_freq_ratio(const TokenLists& responses,
                      const std::map<std::string, std::uint64_t>& frequencies,
                      std::uint64_t threshold = 100);

// Per-example mean of last decoder states over response positions, scaled
// to unit length. [size x d_model].
Eigen::MatrixXd pooled_states(const Branch& branch, const Batch& batch);
// Mean over unordered branch pairs and examples of the Euclidean distance
// between pooled states. Throws std::invalid_argument for fewer than two.
double branch_l2(const std::vector<Eigen::MatrixXd>& pooled);
double branch_l2(const BranchGroup& group, const Batch& probe);
double branch_l2(const BranchGroup& group, const std::vector<EncodedPair>& probe,
                 std::size_t batch_size = 64);

struct MetricReport {
  double dist_1 = 0.0, dist_2 = 0.0, dist_3 = 0.0;
  double bleu_1 = 0.0, bleu_4 = 0.0;
  std::optional<double> ave, coh;  // absent without an embedding table
  double h_1 = 0.0, h_2 = 0.0, h_3 = 0.0;
  double kl = 0.0;
  double lf = 0.0;
  std::optional<double> branch_l2;

  nlohmann::json to_json() const;
};

struct EvalInputs {
  TokenLists hypotheses;
  TokenLists references;
  TokenLists contexts;           // flattened context words, aligned
  TokenLists train_responses;    // for the H-n tables
  std::map<std::string, std::uint64_t> train_frequencies;
  const EmbeddingTable* embeddings = nullptr;
  std::uint64_t lf_threshold = 100;
};

MetricReport evaluate(const EvalInputs& inputs);

}  // namespace cdl
