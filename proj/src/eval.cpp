#include "cdl/eval.hpp"

#include <cmath>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include "cdl/error.hpp"
#include "cdl/text.hpp"

namespace cdl {

namespace {

std::map<std::string, std::uint64_t> ngram_counts(const std::vector<std::string>& tokens,
                                                  std::size_t n) {
  std::map<std::string, std::uint64_t> out;
  for (auto& g : ngrams(tokens, n)) ++out[g];
  return out;
}

std::unordered_map<std::string, std::uint64_t> unigram_counts(const TokenLists& lists,
                                                              std::uint64_t& total) {
  std::unordered_map<std::string, std::uint64_t> out;
  total = 0;
  for (const auto& l : lists)
    for (const auto& t : l) {
      ++out[t];
      ++total;
    }
  return out;
}

}  // namespace

std::vector<std::string> ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  if (n == 0) throw std::invalid_argument("n-gram order must be at least 1");
  std::vector<std::string> out;
  if (tokens.size() < n) return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string g = tokens[i];
    for (std::size_t k = 1; k < n; ++k) g += ' ' + tokens[i + k];
    out.push_back(std::move(g));
  }
  return out;
}

double distinct_n(const TokenLists& responses, std::size_t n) {
  std::unordered_set<std::string> unique;
  std::size_t total = 0;
  for (const auto& r : responses)
    for (auto& g : ngrams(r, n)) {
      unique.insert(std::move(g));
      ++total;
    }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

double bleu_n(const TokenLists& hypotheses, const TokenLists& references, std::size_t n) {
  if (n == 0) throw std::invalid_argument("BLEU order must be at least 1");
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("hypotheses and references differ in count");
  if (hypotheses.empty()) throw std::invalid_argument("BLEU of an empty corpus");
  std::vector<std::uint64_t> matches(n, 0), totals(n, 0);
  std::uint64_t hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    hyp_len += hypotheses[i].size();
    ref_len += references[i].size();
    for (std::size_t k = 1; k <= n; ++k) {
      const auto h = ngram_counts(hypotheses[i], k);
      const auto r = ngram_counts(references[i], k);
      for (const auto& [g, c] : h) {
        totals[k - 1] += c;
        auto it = r.find(g);
        if (it != r.end()) matches[k - 1] += std::min(c, it->second);
      }
    }
  }
  if (hyp_len == 0 || matches[0] == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double p = k == 0 ? static_cast<double>(matches[0]) / static_cast<double>(totals[0])
                            : (static_cast<double>(matches[k]) + 1.0) /
                                  (static_cast<double>(totals[k]) + 1.0);
    log_sum += std::log(p) / static_cast<double>(n);
  }
  const double bp = hyp_len > ref_len ? 1.0
                                      : std::exp(1.0 - static_cast<double>(ref_len) /
                                                           static_cast<double>(hyp_len));
  return bp * std::exp(log_sum);
}

double embedding_average(const TokenLists& hypotheses, const TokenLists& others,
                         const EmbeddingTable& emb) {
  if (hypotheses.size() != others.size())
    throw std::invalid_argument("embedding metrics need aligned lists");
  double sum = 0.0;
  std::size_t used = 0;
  Eigen::VectorXd a, b;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    if (!emb.mean_vector(hypotheses[i], a) || !emb.mean_vector(others[i], b)) continue;
    const double na = a.norm(), nb = b.norm();
    if (na < 1e-12 || nb < 1e-12) continue;
    sum += a.dot(b) / (na * nb);
    ++used;
  }
  if (used == 0) throw DataError("no pair has embedded tokens on both sides");
  return sum / static_cast<double>(used);
}

EmbeddingScores embedding_metrics(const TokenLists& hypotheses, const TokenLists& references,
                                  const TokenLists& contexts, const EmbeddingTable& emb) {
  return {embedding_average(hypotheses, references, emb),
          embedding_average(hypotheses, contexts, emb)};
}

EmbeddingTable branch_embeddings(const Branch& branch, const Vocabulary& vocab) {
  const auto& table = branch.parameter("src_embed").value;
  if (static_cast<std::size_t>(table.rows()) != vocab.size())
    throw std::invalid_argument("embedding table and vocabulary disagree in size");
  std::vector<std::string> tokens;
  Eigen::MatrixXd vectors(static_cast<Eigen::Index>(vocab.size() - special::kCount), table.cols());
  for (std::size_t i = special::kCount; i < vocab.size(); ++i) {
    tokens.push_back(vocab.token(static_cast<TokenId>(i)));
    vectors.row(static_cast<Eigen::Index>(i - special::kCount)) =
        table.row(static_cast<Eigen::Index>(i)).cast<double>();
  }
  return EmbeddingTable(std::move(tokens), std::move(vectors));
}

NgramTable NgramTable::build(const TokenLists& responses, std::size_t n) {
  NgramTable t;
  t.n_ = n;
  for (const auto& r : responses)
    for (auto& g : ngrams(r, n)) {
      ++t.counts_[g];
      ++t.total_;
    }
  return t;
}

double NgramTable::probability(const std::string& ngram) const {
  auto it = counts_.find(ngram);
  const double c = it == counts_.end() ? 0.0 : static_cast<double>(it->second);
  return (c + 1.0) / (static_cast<double>(total_) + static_cast<double>(counts_.size()) + 1.0);
}

double entropy_n(const TokenLists& responses, const NgramTable& table) {
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& r : responses) {
    const auto gs = ngrams(r, table.order());
    if (gs.empty()) continue;
    double h = 0.0;
    for (const auto& g : gs) h -= std::log2(table.probability(g));
    sum += h / static_cast<double>(gs.size());
    ++used;
  }
  return used == 0 ? 0.0 : sum / static_cast<double>(used);
}

double kl_divergence(const TokenLists& hypotheses, const TokenLists& references) {
  std::uint64_t n_hyp = 0, n_ref = 0;
  const auto hyp = unigram_counts(hypotheses, n_hyp);
  const auto ref = unigram_counts(references, n_ref);
  std::set<std::string> vocab;
  for (const auto& [t, c] : hyp) vocab.insert(t);
  for (const auto& [t, c] : ref) vocab.insert(t);
  if (vocab.empty()) throw std::invalid_argument("KL of two empty response sets");
  const double v = static_cast<double>(vocab.size());
  auto count = [](const auto& m, const std::string& t) {
    auto it = m.find(t);
    return it == m.end() ? 0.0 : static_cast<double>(it->second);
  };
  double kl = 0.0;
  for (const auto& t : vocab) {
    const double p = (count(ref, t) + 1.0) / (static_cast<double>(n_ref) + v);
    const double q = (count(hyp, t) + 1.0) / (static_cast<double>(n_hyp) + v);
    kl += p * std::log(p / q);
  }
  return std::max(kl, 0.0);
}

double low_freq_ratio(const TokenLists& responses,
                      const std::map<std::string, std::uint64_t>& frequencies,
                      std::uint64_t threshold) {
  std::size_t total = 0, low = 0;
  for (const auto& r : responses)
    for (const auto& t : r) {
      ++total;
      auto it = frequencies.find(t);
      if (it == frequencies.end() || it->second < threshold) ++low;
    }
  if (total == 0) throw std::invalid_argument("no generated tokens");
  return static_cast<double>(low) / static_cast<double>(total);
}

Eigen::MatrixXd pooled_states(const Branch& branch, const Batch& batch) {
  const auto out = branch.infer(batch);
  const auto d = out.hidden.cols();
  Eigen::MatrixXd pooled = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(batch.size), d);
  for (std::size_t b = 0; b < batch.size; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < batch.response_len; ++t) {
      const std::size_t row = b * batch.response_len + t;
      if (!batch.target_mask[row]) continue;
      pooled.row(static_cast<Eigen::Index>(b)) +=
          out.hidden.row(static_cast<Eigen::Index>(row)).cast<double>();
      ++count;
    }
    auto r = pooled.row(static_cast<Eigen::Index>(b));
    if (count > 0) r /= static_cast<double>(count);
    const double norm = r.norm();
    if (norm > 1e-12) r /= norm;
  }
  return pooled;
}

double branch_l2(const std::vector<Eigen::MatrixXd>& pooled) {
  if (pooled.size() < 2) throw std::invalid_argument("branch distance needs two branches");
  const auto rows = pooled.front().rows();
  for (const auto& p : pooled)
    if (p.rows() != rows || p.cols() != pooled.front().cols())
      throw std::invalid_argument("pooled states differ in shape");
  if (rows == 0) throw std::invalid_argument("empty probe");
  double sum = 0.0;
  std::size_t terms = 0;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j)
      for (Eigen::Index e = 0; e < rows; ++e) {
        sum += (pooled[i].row(e) - pooled[j].row(e)).norm();
        ++terms;
      }
  return sum / static_cast<double>(terms);
}

double branch_l2(const BranchGroup& group, const Batch& probe) {
  std::vector<Eigen::MatrixXd> pooled;
  for (const auto& branch : group.branches()) pooled.push_back(pooled_states(branch, probe));
  return branch_l2(pooled);
}

double branch_l2(const BranchGroup& group, const std::vector<EncodedPair>& probe,
                 std::size_t batch_size) {
  if (probe.empty()) throw std::invalid_argument("empty probe");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
  std::vector<Eigen::MatrixXd> pooled(group.size());
  for (std::size_t start = 0; start < probe.size(); start += batch_size) {
    const std::size_t end = std::min(probe.size(), start + batch_size);
    const auto batch = make_batch(std::span<const EncodedPair>(probe.data() + start, end - start));
    for (std::size_t b = 0; b < group.size(); ++b) {
      const auto part = pooled_states(group[b], batch);
      auto& acc = pooled[b];
      Eigen::MatrixXd grown(acc.rows() + part.rows(), part.cols());
      if (acc.rows() > 0) grown.topRows(acc.rows()) = acc;
      grown.bottomRows(part.rows()) = part;
      acc = std::move(grown);
    }
  }
  return branch_l2(pooled);
}

nlohmann::json MetricReport::to_json() const {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json j = {{"dist_1", dist_1}, {"dist_2", dist_2}, {"dist_3", dist_3},
                      {"bleu_1", bleu_1}, {"bleu_4", bleu_4}, {"ave", opt(ave)},
                      {"coh", opt(coh)},  {"h_1", h_1},       {"h_2", h_2},
                      {"h_3", h_3},       {"kl", kl},         {"lf", lf}};
  if (branch_l2) j["branch_l2"] = *branch_l2;
  return j;
}

MetricReport evaluate(const EvalInputs& in) {
  if (in.hypotheses.size() != in.references.size())
    throw DataError("hypotheses and references differ in count");
  if (in.hypotheses.empty()) throw DataError("nothing to evaluate");
  MetricReport r;
  r.dist_1 = distinct_n(in.hypotheses, 1);
  r.dist_2 = distinct_n(in.hypotheses, 2);
  r.dist_3 = distinct_n(in.hypotheses, 3);
  r.bleu_1 = bleu_n(in.hypotheses, in.references, 1);
  r.bleu_4 = bleu_n(in.hypotheses, in.references, 4);
  if (in.embeddings) {
    const auto e = embedding_metrics(in.hypotheses, in.references, in.contexts, *in.embeddings);
    r.ave = e.ave;
    r.coh = e.coh;
  }
  r.h_1 = entropy_n(in.hypotheses, NgramTable::build(in.train_responses, 1));
  r.h_2 = entropy_n(in.hypotheses, NgramTable::build(in.train_responses, 2));
  r.h_3 = entropy_n(in.hypotheses, NgramTable::build(in.train_responses, 3));
  r.kl = kl_divergence(in.hypotheses, in.references);
  r.lf = low_freq_ratio(in.hypotheses, in.train_frequencies, in.lf_threshold);
  return r;
}

}  // namespace cdl
