#include "cdl/scoring.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "cdl/error.hpp"
#include "cdl/text.hpp"

namespace cdl {

namespace {

bool has_alnum(const std::string& token) {
  return std::any_of(token.begin(), token.end(), [](char c) {
    auto u = static_cast<unsigned char>(c);
    return u >= 128 || std::isalnum(u);
  });
}

bool is_reserved_string(const std::string& token) {
  return token == "<pad>" || token == "<bos>" || token == "<eos>" || token == "<unk>" ||
         token == "<sep>";
}

std::set<Phrase> context_phrases(const DialoguePair& pair,
                                 const std::unordered_set<std::string>& stopwords) {
  std::set<Phrase> out;
  for (const auto& utterance : pair.context_tokens) {
    auto phrases = extract_keyphrases(utterance, stopwords);
    out.insert(phrases.begin(), phrases.end());
  }
  return out;
}

std::string joint_key(const std::string& p, const std::string& h) { return p + '\t' + h; }

std::string context_key(const DialoguePair& pair) {
  std::string key;
  for (std::size_t u = 0; u < pair.context_tokens.size(); ++u) {
    if (u) key += " <sep> ";
    key += join(pair.context_tokens[u]);
  }
  return key;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double na = a.norm();
  double nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace

Attribute parse_attribute(const std::string& name) {
  if (name == "coherence") return Attribute::kCoherence;
  if (name == "informativeness") return Attribute::kInformativeness;
  if (name == "specificity") return Attribute::kSpecificity;
  throw std::invalid_argument("unknown attribute '" + name +
                              "' (expected coherence, informativeness or specificity)");
}

std::string attribute_name(Attribute attribute) {
  switch (attribute) {
    case Attribute::kCoherence: return "coherence";
    case Attribute::kInformativeness: return "informativeness";
    case Attribute::kSpecificity: return "specificity";
  }
  return "unknown";
}

const std::unordered_set<std::string>& default_stopwords() {
  static const std::unordered_set<std::string> words = {
      "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
      "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
      "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
      "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
      "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself",
      "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on",
      "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same",
      "she", "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
      "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
      "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
      "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
      "yourselves", "s", "t", "d", "ll", "m", "re", "ve", "don", "yes", "ok", "okay", "oh",
      "yeah", "well", "know", "think", "really", "sure"};
  return words;
}

std::set<Phrase> extract_keyphrases(const std::vector<std::string>& tokens,
                                    const std::unordered_set<std::string>& stopwords) {
  std::set<Phrase> out;
  const std::string* previous = nullptr;
  for (const auto& token : tokens) {
    bool content = has_alnum(token) && !is_reserved_string(token) && !stopwords.count(token);
    if (!content) {
      previous = nullptr;
      continue;
    }
    out.insert(Phrase{token, 1});
    if (previous) out.insert(Phrase{*previous + " " + token, 2});
    previous = &token;
  }
  return out;
}

CooccurrenceStats CooccurrenceStats::build(const Corpus& corpus,
                                           const std::unordered_set<std::string>& stopwords) {
  CooccurrenceStats stats;
  stats.stopwords_ = stopwords;
  stats.n_pairs_ = corpus.size();
  for (const auto& pair : corpus.pairs) {
    auto ps = context_phrases(pair, stopwords);
    auto hs = extract_keyphrases(pair.response_tokens, stopwords);
    for (const auto& p : ps) ++stats.context_[p.text];
    for (const auto& h : hs) ++stats.response_[h.text];
    for (const auto& p : ps)
      for (const auto& h : hs) ++stats.joint_[joint_key(p.text, h.text)];
  }
  return stats;
}

CooccurrenceStats CooccurrenceStats::from_counts(std::uint64_t n_pairs) {
  CooccurrenceStats stats;
  stats.n_pairs_ = n_pairs;
  stats.stopwords_ = default_stopwords();
  return stats;
}

void CooccurrenceStats::set_counts(const std::string& p, const std::string& h, std::uint64_t n_p,
                                   std::uint64_t n_h, std::uint64_t n_ph) {
  if (n_ph > std::min(n_p, n_h) || std::max(n_p, n_h) > n_pairs_)
    throw std::invalid_argument("inconsistent co-occurrence counts");
  context_[p] = n_p;
  response_[h] = n_h;
  joint_[joint_key(p, h)] = n_ph;
}

std::uint64_t CooccurrenceStats::context_count(const std::string& p) const {
  auto it = context_.find(p);
  return it == context_.end() ? 0 : it->second;
}

std::uint64_t CooccurrenceStats::response_count(const std::string& h) const {
  auto it = response_.find(h);
  return it == response_.end() ? 0 : it->second;
}

std::uint64_t CooccurrenceStats::joint_count(const std::string& p, const std::string& h) const {
  auto it = joint_.find(joint_key(p, h));
  return it == joint_.end() ? 0 : it->second;
}

double npmi(std::uint64_t n_p, std::uint64_t n_h, std::uint64_t n_ph, std::uint64_t n_pairs) {
  if (n_ph == 0) throw std::invalid_argument("npmi is undefined for phrases that never co-occur");
  if (n_ph == n_pairs) return 1.0;
  // Integer products keep the ratio exactly 1 for independent counts.
  const double ratio = static_cast<double>(n_ph * n_pairs) / static_cast<double>(n_p * n_h);
  const double p_joint = static_cast<double>(n_ph) / static_cast<double>(n_pairs);
  const double value = std::log(ratio) / -std::log(p_joint);
  return std::clamp(value, -1.0, 1.0);
}

double npmi(const std::string& p, const std::string& h, const CooccurrenceStats& stats) {
  return npmi(stats.context_count(p), stats.response_count(h), stats.joint_count(p, h),
              stats.pairs());
}

double coherence_connectivity(const DialoguePair& pair, const CooccurrenceStats& stats) {
  auto ps = context_phrases(pair, stats.stopwords());
  auto hs = extract_keyphrases(pair.response_tokens, stats.stopwords());
  if (ps.empty() || hs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : ps) {
    for (const auto& h : hs) {
      if (stats.joint_count(p.text, h.text) == 0) continue;
      total += std::max(npmi(p.text, h.text, stats), 0.0) * p.words * h.words;
    }
  }
  const double c_words = static_cast<double>(pair.flat_context().size());
  const double r_words = static_cast<double>(pair.response_tokens.size());
  return total / (c_words * r_words);
}

EmbeddingTable::EmbeddingTable(std::vector<std::string> tokens, Eigen::MatrixXd vectors)
    : tokens_(std::move(tokens)), vectors_(std::move(vectors)) {
  if (static_cast<std::size_t>(vectors_.rows()) != tokens_.size())
    throw std::invalid_argument("embedding rows must match token count");
  if (!vectors_.allFinite()) throw std::invalid_argument("embedding has non-finite entries");
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
}

bool EmbeddingTable::mean_vector(const std::vector<std::string>& tokens,
                                 Eigen::VectorXd& out) const {
  out = Eigen::VectorXd::Zero(vectors_.cols());
  std::size_t hits = 0;
  for (const auto& t : tokens) {
    auto it = index_.find(t);
    if (it == index_.end()) continue;
    out += vectors_.row(static_cast<Eigen::Index>(it->second)).transpose();
    ++hits;
  }
  if (hits == 0) return false;
  out /= static_cast<double>(hits);
  return true;
}

EmbeddingTable EmbeddingTable::train(const Corpus& corpus, std::size_t dim,
                                     std::size_t max_vocab) {
  std::map<std::string, std::uint64_t> freq;
  for (const auto& pair : corpus.pairs) {
    for (const auto& t : pair.flat_context()) ++freq[t];
    for (const auto& t : pair.response_tokens) ++freq[t];
  }
  std::vector<std::pair<std::string, std::uint64_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_vocab) ranked.resize(max_vocab);
  std::vector<std::string> tokens;
  std::unordered_map<std::string, Eigen::Index> index;
  for (const auto& [t, _] : ranked) {
    index.emplace(t, static_cast<Eigen::Index>(tokens.size()));
    tokens.push_back(t);
  }
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
  for (const auto& pair : corpus.pairs) {
    std::set<Eigen::Index> present;
    for (const auto& t : pair.flat_context())
      if (auto it = index.find(t); it != index.end()) present.insert(it->second);
    for (const auto& t : pair.response_tokens)
      if (auto it = index.find(t); it != index.end()) present.insert(it->second);
    for (auto a : present)
      for (auto b : present)
        if (a != b) counts(a, b) += 1.0;
  }
  const double total = counts.sum();
  Eigen::VectorXd rows = counts.rowwise().sum();
  Eigen::MatrixXd ppmi = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (counts(i, j) > 0)
        ppmi(i, j) = std::max(0.0, std::log(counts(i, j) * total / (rows(i) * rows(j))));

  const auto k = std::min<Eigen::Index>(static_cast<Eigen::Index>(dim), n);
  Eigen::MatrixXd vectors = Eigen::MatrixXd::Zero(n, k);
  if (n > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(ppmi);
    // Eigenvalues are ascending; take the k largest.
    for (Eigen::Index c = 0; c < k; ++c) {
      const Eigen::Index src = n - 1 - c;
      Eigen::VectorXd v = solver.eigenvectors().col(src);
      Eigen::Index arg = 0;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;
      vectors.col(c) = v * std::sqrt(std::max(solver.eigenvalues()(src), 0.0));
    }
  }
  return EmbeddingTable(std::move(tokens), std::move(vectors));
}

double relatedness(const DialoguePair& pair, const EmbeddingTable& emb) {
  Eigen::VectorXd c, r;
  if (!emb.mean_vector(pair.flat_context(), c) || !emb.mean_vector(pair.response_tokens, r))
    return 0.0;
  return std::max(cosine(c, r), 0.0);
}

double coherence_score(const DialoguePair& pair, const CooccurrenceStats& stats,
                       const EmbeddingTable& emb, double alpha, double beta) {
  if (alpha < 0 || beta < 0) throw std::invalid_argument("alpha and beta must be non-negative");
  double s_c = alpha == 0.0 ? 0.0 : coherence_connectivity(pair, stats);
  double s_r = beta == 0.0 ? 0.0 : relatedness(pair, emb);
  return alpha * s_c + beta * s_r;
}

std::map<std::string, double> source_entropy(const Corpus& corpus) {
  std::map<std::string, std::map<std::string, std::uint64_t>> groups;
  for (const auto& pair : corpus.pairs) ++groups[join(pair.response_tokens)][context_key(pair)];
  std::map<std::string, double> out;
  for (const auto& [response, contexts] : groups) {
    std::uint64_t n = 0;
    for (const auto& [_, c] : contexts) n += c;
    double h = 0.0;
    for (const auto& [_, c] : contexts) {
      double p = static_cast<double>(c) / static_cast<double>(n);
      h -= p * std::log(p);
    }
    out[response] = h;
  }
  return out;
}

IdfTable IdfTable::build(const Corpus& corpus) {
  IdfTable table;
  table.r_total_ = corpus.size();
  for (const auto& pair : corpus.pairs) {
    std::set<std::string> distinct(pair.response_tokens.begin(), pair.response_tokens.end());
    for (const auto& t : distinct) ++table.r_t_[t];
  }
  bool first = true;
  for (const auto& [t, _] : table.r_t_) {
    double v = table.idf(t);
    table.min_idf_ = first ? v : std::min(table.min_idf_, v);
    table.max_idf_ = first ? v : std::max(table.max_idf_, v);
    first = false;
  }
  return table;
}

std::uint64_t IdfTable::responses_with(const std::string& token) const {
  auto it = r_t_.find(token);
  return it == r_t_.end() ? 0 : it->second;
}

double IdfTable::idf(const std::string& token) const {
  auto it = r_t_.find(token);
  if (it == r_t_.end()) return max_idf_;
  return std::log(static_cast<double>(r_total_) / static_cast<double>(it->second));
}

double IdfTable::specificity(const std::string& token) const {
  if (max_idf_ == min_idf_) return 0.5;
  return (idf(token) - min_idf_) / (max_idf_ - min_idf_);
}

double specificity_score(const std::vector<std::string>& response_tokens, const IdfTable& idf) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& t : response_tokens) {
    if (is_reserved_string(t)) continue;
    sum += idf.specificity(t);
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

AttributeScores score_corpus(const Corpus& corpus, Attribute attribute,
                             const ScoringConfig& config) {
  AttributeScores out;
  out.attribute = attribute;
  out.ids.reserve(corpus.size());
  out.scores.reserve(corpus.size());
  switch (attribute) {
    case Attribute::kCoherence: {
      auto stats = CooccurrenceStats::build(corpus, default_stopwords());
      EmbeddingTable emb;
      if (config.beta != 0.0)
        emb = EmbeddingTable::train(corpus, config.embedding_dim, config.embedding_vocab);
      for (const auto& pair : corpus.pairs) {
        out.ids.push_back(pair.id);
        out.scores.push_back(coherence_score(pair, stats, emb, config.alpha, config.beta));
      }
      break;
    }
    case Attribute::kInformativeness: {
      auto entropy = source_entropy(corpus);
      for (const auto& pair : corpus.pairs) {
        out.ids.push_back(pair.id);
        out.scores.push_back(-entropy.at(join(pair.response_tokens)));
      }
      break;
    }
    case Attribute::kSpecificity: {
      auto idf = IdfTable::build(corpus);
      for (const auto& pair : corpus.pairs) {
        out.ids.push_back(pair.id);
        out.scores.push_back(specificity_score(pair.response_tokens, idf));
      }
      break;
    }
  }
  return out;
}

void save_scores(const AttributeScores& scores, const std::string& path,
                 const std::map<std::string, std::string>& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  nlohmann::json header = {{"attribute", attribute_name(scores.attribute)}};
  for (const auto& [k, v] : meta) header[k] = v;
  out << nlohmann::json{{"meta", header}}.dump() << '\n';
  for (std::size_t i = 0; i < scores.ids.size(); ++i)
    out << "{\"id\":" << scores.ids[i] << ",\"score\":" << format_double(scores.scores[i])
        << "}\n";
}

AttributeScores load_scores(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open score file " + path);
  AttributeScores scores;
  std::string line;
  std::size_t line_no = 0;
  bool have_attribute = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (record.contains("meta")) {
      if (record["meta"].contains("attribute")) {
        try {
          scores.attribute = parse_attribute(record["meta"]["attribute"].get<std::string>());
        } catch (const std::invalid_argument& e) {
          throw DataError(path + ": " + e.what());
        }
        have_attribute = true;
      }
      continue;
    }
    if (!record.contains("id") || !record.contains("score") || !record["score"].is_number())
      throw DataError(path + ":" + std::to_string(line_no) + ": expected {\"id\", \"score\"}");
    scores.ids.push_back(record["id"].get<std::uint32_t>());
    scores.scores.push_back(record["score"].get<double>());
  }
  if (!have_attribute) throw DataError(path + ": missing meta header");
  return scores;
}

}  // namespace cdl
