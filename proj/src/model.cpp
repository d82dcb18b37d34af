#include "cdl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cdl {

namespace {

float uniform_unit(std::mt19937_64& rng) {
  return static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

ag::Matrix tiled_positions(std::size_t size, std::size_t len, std::size_t d_model) {
  const ag::Matrix pe = positional_encoding(len, d_model);
  ag::Matrix out(static_cast<Eigen::Index>(size * len), static_cast<Eigen::Index>(d_model));
  for (std::size_t b = 0; b < size; ++b)
    out.block(static_cast<Eigen::Index>(b * len), 0, pe.rows(), pe.cols()) = pe;
  return out;
}

// Log-softmax over tokens the decoder may emit at `step` (1-based).
Eigen::VectorXd allowed_log_probs(const ag::Matrix& logits, Eigen::Index row, std::size_t step) {
  Eigen::VectorXd z = logits.row(row).transpose().cast<double>();
  const double ninf = -std::numeric_limits<double>::infinity();
  z(special::kPad) = ninf;
  z(special::kBos) = ninf;
  if (step == 1) z(special::kEos) = ninf;
  const double peak = z.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index k = 0; k < z.size(); ++k)
    if (z(k) != ninf) sum += std::exp(z(k) - peak);
  const double lse = peak + std::log(sum);
  for (Eigen::Index k = 0; k < z.size(); ++k)
    if (z(k) != ninf) z(k) -= lse;
  return z;
}

}  // namespace

void BranchConfig::validate() const {
  if (layers_enc == 0 || layers_dec == 0) throw std::invalid_argument("need at least one layer");
  if (heads == 0 || d_model % heads != 0)
    throw std::invalid_argument("d_model must be divisible by heads");
  if (d_ffn == 0) throw std::invalid_argument("d_ffn must be positive");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw std::invalid_argument("dropout must be in [0,1)");
  if (max_context_len == 0 || max_response_len == 0)
    throw std::invalid_argument("maximum lengths must be positive");
  if (vocab_size <= static_cast<std::size_t>(special::kCount))
    throw std::invalid_argument("vocabulary must contain non-reserved tokens");
}

std::string BranchTag::describe() const {
  if (role == BranchRole::kMaster) return "master";
  return "auxiliary:" + (attribute ? attribute_name(*attribute) : std::string("none"));
}

BranchTag BranchTag::parse(const std::string& text) {
  if (text == "master") return {BranchRole::kMaster, std::nullopt};
  const std::string prefix = "auxiliary:";
  if (text.rfind(prefix, 0) == 0) {
    auto rest = text.substr(prefix.size());
    if (rest == "none") return {BranchRole::kAuxiliary, std::nullopt};
    return {BranchRole::kAuxiliary, parse_attribute(rest)};
  }
  throw std::invalid_argument("bad branch tag '" + text + "'");
}

Batch make_batch(std::span<const EncodedPair* const> pairs) {
  Batch batch;
  batch.size = pairs.size();
  for (const auto* p : pairs) {
    batch.context_len = std::max(batch.context_len, p->context_ids.size());
    batch.response_len = std::max(batch.response_len, p->response_ids.size());
  }
  const std::size_t tc = batch.context_len;
  const std::size_t tr = batch.response_len;
  batch.context.assign(batch.size * tc, special::kPad);
  batch.context_mask.assign(batch.size * tc, 0);
  batch.decoder_input.assign(batch.size * tr, special::kPad);
  batch.targets.assign(batch.size * tr, special::kPad);
  batch.target_mask.assign(batch.size * tr, 0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto& p = *pairs[b];
    batch.ids.push_back(p.id);
    for (std::size_t t = 0; t < p.context_ids.size(); ++t) {
      batch.context[b * tc + t] = p.context_ids[t];
      batch.context_mask[b * tc + t] = 1;
    }
    for (std::size_t t = 0; t < p.response_ids.size(); ++t) {
      batch.decoder_input[b * tr + t] = t == 0 ? special::kBos : p.response_ids[t - 1];
      batch.targets[b * tr + t] = p.response_ids[t];
      batch.target_mask[b * tr + t] = 1;
    }
  }
  return batch;
}

Batch make_batch(std::span<const EncodedPair> pairs) {
  std::vector<const EncodedPair*> ptrs;
  for (const auto& p : pairs) ptrs.push_back(&p);
  return make_batch(std::span<const EncodedPair* const>(ptrs));
}

ag::Matrix positional_encoding(std::size_t len, std::size_t d_model) {
  ag::Matrix pe(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(d_model));
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) * rate;
      pe(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(i)) =
          static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

void Branch::add_param(const std::string& name, Eigen::Index rows, Eigen::Index cols, float bound,
                       std::mt19937_64& rng) {
  ag::Parameter p;
  p.name = name;
  p.value.resize(rows, cols);
  for (Eigen::Index i = 0; i < p.value.size(); ++i)
    p.value.data()[i] = (2.0f * uniform_unit(rng) - 1.0f) * bound;
  p.zero_grad();
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
}

void Branch::add_constant_param(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                                float value) {
  ag::Parameter p;
  p.name = name;
  p.value = ag::Matrix::Constant(rows, cols, value);
  p.zero_grad();
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
}

Branch::Branch(const BranchConfig& config, BranchTag tag, std::uint64_t seed)
    : config_(config), tag_(std::move(tag)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const auto f = static_cast<Eigen::Index>(config_.d_ffn);
  const auto v = static_cast<Eigen::Index>(config_.vocab_size);
  const float bd = 1.0f / std::sqrt(static_cast<float>(d));
  const float bf = 1.0f / std::sqrt(static_cast<float>(f));

  auto attention_params = [&](const std::string& prefix) {
    for (const char* m : {"q", "k", "v", "o"}) {
      add_param(prefix + ".w" + m, d, d, bd, rng);
      add_param(prefix + ".b" + m, 1, d, bd, rng);
    }
  };
  auto norm_params = [&](const std::string& prefix) {
    add_constant_param(prefix + ".g", 1, d, 1.0f);
    add_constant_param(prefix + ".b", 1, d, 0.0f);
  };
  auto ffn_params = [&](const std::string& prefix) {
    add_param(prefix + ".w1", d, f, bd, rng);
    add_param(prefix + ".b1", 1, f, bd, rng);
    add_param(prefix + ".w2", f, d, bf, rng);
    add_param(prefix + ".b2", 1, d, bf, rng);
  };

  add_param("src_embed", v, d, bd, rng);
  add_param("tgt_embed", v, d, bd, rng);
  for (std::size_t l = 0; l < config_.layers_enc; ++l) {
    const std::string p = "enc" + std::to_string(l);
    attention_params(p + ".self");
    norm_params(p + ".ln1");
    ffn_params(p + ".ffn");
    norm_params(p + ".ln2");
  }
  for (std::size_t l = 0; l < config_.layers_dec; ++l) {
    const std::string p = "dec" + std::to_string(l);
    attention_params(p + ".self");
    norm_params(p + ".ln1");
    attention_params(p + ".cross");
    norm_params(p + ".ln2");
    ffn_params(p + ".ffn");
    norm_params(p + ".ln3");
  }
  add_param("out.w", d, v, bd, rng);
  add_param("out.b", 1, v, bd, rng);
}

ag::Parameter& Branch::parameter(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

const ag::Parameter& Branch::parameter(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

void Branch::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

ag::Var Branch::bind(ag::Graph& g, const std::string& name) { return g.parameter(parameter(name)); }

ag::Var Branch::attention_block(ag::Graph& g, const std::string& prefix, ag::Var query,
                                ag::Var memory, const ag::AttentionLayout& layout,
                                std::span<const std::uint8_t> key_valid) {
  auto q = ag::linear(query, bind(g, prefix + ".wq"), bind(g, prefix + ".bq"));
  auto k = ag::linear(memory, bind(g, prefix + ".wk"), bind(g, prefix + ".bk"));
  auto v = ag::linear(memory, bind(g, prefix + ".wv"), bind(g, prefix + ".bv"));
  auto a = ag::attention(q, k, v, layout, key_valid);
  return ag::linear(a, bind(g, prefix + ".wo"), bind(g, prefix + ".bo"));
}

ag::Var Branch::ffn_block(ag::Graph& g, const std::string& prefix, ag::Var x) {
  auto h = ag::relu(ag::linear(x, bind(g, prefix + ".w1"), bind(g, prefix + ".b1")));
  h = ag::dropout(h, config_.dropout);
  return ag::linear(h, bind(g, prefix + ".w2"), bind(g, prefix + ".b2"));
}

ag::Var Branch::encode(ag::Graph& g, std::span<const TokenId> context, std::size_t size,
                       std::size_t context_len, std::span<const std::uint8_t> context_mask) {
  if (context.size() != size * context_len || context_mask.size() != context.size())
    throw std::invalid_argument("encode: context shape mismatch");
  const float scale = std::sqrt(static_cast<float>(config_.d_model));
  auto x = ag::scale(ag::embedding(bind(g, "src_embed"), context), scale);
  x = ag::add(x, g.constant(tiled_positions(size, context_len, config_.d_model)));
  x = ag::dropout(x, config_.dropout);
  const ag::AttentionLayout self{size, context_len, context_len, config_.heads, false};
  for (std::size_t l = 0; l < config_.layers_enc; ++l) {
    const std::string p = "enc" + std::to_string(l);
    auto a = attention_block(g, p + ".self", x, x, self, context_mask);
    x = ag::layer_norm(ag::add(x, ag::dropout(a, config_.dropout)), bind(g, p + ".ln1.g"),
                       bind(g, p + ".ln1.b"));
    auto f = ffn_block(g, p + ".ffn", x);
    x = ag::layer_norm(ag::add(x, ag::dropout(f, config_.dropout)), bind(g, p + ".ln2.g"),
                       bind(g, p + ".ln2.b"));
  }
  return x;
}

ag::Var Branch::decode(ag::Graph& g, ag::Var memory, std::span<const std::uint8_t> memory_mask,
                       std::size_t memory_len, std::span<const TokenId> decoder_input,
                       std::size_t size, std::size_t response_len) {
  if (decoder_input.size() != size * response_len)
    throw std::invalid_argument("decode: input shape mismatch");
  const float scale = std::sqrt(static_cast<float>(config_.d_model));
  auto x = ag::scale(ag::embedding(bind(g, "tgt_embed"), decoder_input), scale);
  x = ag::add(x, g.constant(tiled_positions(size, response_len, config_.d_model)));
  x = ag::dropout(x, config_.dropout);
  const std::vector<std::uint8_t> all_valid(size * response_len, 1);
  const ag::AttentionLayout self{size, response_len, response_len, config_.heads, true};
  const ag::AttentionLayout cross{size, response_len, memory_len, config_.heads, false};
  for (std::size_t l = 0; l < config_.layers_dec; ++l) {
    const std::string p = "dec" + std::to_string(l);
    auto a = attention_block(g, p + ".self", x, x, self, all_valid);
    x = ag::layer_norm(ag::add(x, ag::dropout(a, config_.dropout)), bind(g, p + ".ln1.g"),
                       bind(g, p + ".ln1.b"));
    auto c = attention_block(g, p + ".cross", x, memory, cross, memory_mask);
    x = ag::layer_norm(ag::add(x, ag::dropout(c, config_.dropout)), bind(g, p + ".ln2.g"),
                       bind(g, p + ".ln2.b"));
    auto f = ffn_block(g, p + ".ffn", x);
    x = ag::layer_norm(ag::add(x, ag::dropout(f, config_.dropout)), bind(g, p + ".ln3.g"),
                       bind(g, p + ".ln3.b"));
  }
  return x;
}

ag::Var Branch::project(ag::Graph& g, ag::Var hidden) {
  return ag::linear(hidden, bind(g, "out.w"), bind(g, "out.b"));
}

ForwardVars Branch::forward(ag::Graph& g, const Batch& batch) {
  if (batch.size == 0) throw std::invalid_argument("forward: empty batch");
  for (TokenId t : batch.context)
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size)
      throw std::invalid_argument("forward: context id outside the vocabulary");
  for (TokenId t : batch.decoder_input)
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size)
      throw std::invalid_argument("forward: response id outside the vocabulary");
  auto memory = encode(g, batch.context, batch.size, batch.context_len, batch.context_mask);
  auto hidden = decode(g, memory, batch.context_mask, batch.context_len, batch.decoder_input,
                       batch.size, batch.response_len);
  return {project(g, hidden), hidden};
}

ForwardOutput Branch::infer(const Batch& batch) const {
  ag::Graph g(false, false);
  // A non-recording graph never writes through parameter handles.
  auto vars = const_cast<Branch*>(this)->forward(g, batch);
  return {vars.logits.value(), vars.hidden.value(), batch.target_mask};
}

std::uint64_t branch_seed(std::uint64_t global_seed, std::size_t branch_index) {
  return splitmix64(global_seed ^ splitmix64(static_cast<std::uint64_t>(branch_index) + 1));
}

BranchGroup::BranchGroup(const BranchConfig& config, const std::vector<BranchTag>& tags,
                         std::uint64_t seed, bool identical_init)
    : config_(config) {
  if (tags.empty() || tags.front().role != BranchRole::kMaster)
    throw std::invalid_argument("a branch group starts with its master");
  for (std::size_t i = 1; i < tags.size(); ++i)
    if (tags[i].role != BranchRole::kAuxiliary)
      throw std::invalid_argument("only the first branch may be the master");
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (identical_init && i > 0) {
      Branch copy = branches_.front();
      copy.tag_ = tags[i];
      branches_.push_back(std::move(copy));
    } else {
      branches_.emplace_back(config, tags[i], branch_seed(seed, i));
    }
  }
}

double Hypothesis::rank_score(bool length_normalize) const {
  if (!length_normalize || steps == 0) return log_prob;
  return log_prob / static_cast<double>(steps);
}

Hypothesis beam_search_hypothesis(const Branch& branch, std::span<const TokenId> context_ids,
                                  const BeamOptions& options) {
  if (options.beam == 0 || options.max_len == 0)
    throw std::invalid_argument("beam and max_len must be positive");
  if (context_ids.empty()) throw std::invalid_argument("beam search needs a context");
  auto& model = const_cast<Branch&>(branch);  // non-recording graph: read-only
  ag::Graph g(false, false);
  const std::size_t tc = context_ids.size();
  const std::vector<std::uint8_t> ctx_mask(tc, 1);
  const ag::Matrix memory = model.encode(g, context_ids, 1, tc, ctx_mask).value();

  struct Live {
    std::vector<TokenId> tokens;
    double log_prob;
  };
  std::vector<Live> live{{{}, 0.0}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 1; step <= options.max_len && !live.empty(); ++step) {
    const std::size_t n = live.size();
    ag::Graph sg(false, false);
    ag::Matrix tiled(static_cast<Eigen::Index>(n * tc), memory.cols());
    std::vector<std::uint8_t> tiled_mask(n * tc, 1);
    std::vector<TokenId> input(n * step);
    for (std::size_t h = 0; h < n; ++h) {
      tiled.block(static_cast<Eigen::Index>(h * tc), 0, memory.rows(), memory.cols()) = memory;
      input[h * step] = special::kBos;
      for (std::size_t t = 1; t < step; ++t) input[h * step + t] = live[h].tokens[t - 1];
    }
    auto hidden = model.decode(sg, sg.constant(std::move(tiled)), tiled_mask, tc, input, n, step);
    ag::Matrix last(static_cast<Eigen::Index>(n), hidden.cols());
    for (std::size_t h = 0; h < n; ++h)
      last.row(static_cast<Eigen::Index>(h)) =
          hidden.value().row(static_cast<Eigen::Index>(h * step + step - 1));
    const ag::Matrix logits = model.project(sg, sg.constant(std::move(last))).value();

    struct Candidate {
      double score;
      std::size_t parent;
      TokenId token;
    };
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < n; ++h) {
      const Eigen::VectorXd lp = allowed_log_probs(logits, static_cast<Eigen::Index>(h), step);
      for (Eigen::Index k = 0; k < lp.size(); ++k) {
        if (!std::isfinite(lp(k))) continue;
        candidates.push_back({live[h].log_prob + lp(k), h, static_cast<TokenId>(k)});
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

    // EOS candidates finish only when ranked inside the beam; the live set is
    // refilled with the best non-EOS extensions.
    std::vector<Live> next;
    std::size_t kept = 0;
    const bool last_step = step == options.max_len;
    for (std::size_t r = 0; r < candidates.size(); ++r) {
      const auto& c = candidates[r];
      if (r >= options.beam && kept >= options.beam) break;
      if (c.token == special::kEos) {
        if (r < options.beam)
          finished.push_back({live[c.parent].tokens, c.score, step, true});
        continue;
      }
      if (kept >= options.beam) continue;
      ++kept;
      auto tokens = live[c.parent].tokens;
      tokens.push_back(c.token);
      if (last_step)
        finished.push_back({std::move(tokens), c.score, step, false});
      else
        next.push_back({std::move(tokens), c.score});
    }
    live = std::move(next);
    if (finished.size() >= options.beam) break;
  }

  const Hypothesis* best = nullptr;
  for (const auto& h : finished)
    if (!best || h.rank_score(options.length_normalize) > best->rank_score(options.length_normalize))
      best = &h;
  if (!best) throw std::logic_error("beam search finished without a hypothesis");
  return *best;
}

std::vector<TokenId> beam_search(const Branch& branch, std::span<const TokenId> context_ids,
                                 const BeamOptions& options) {
  return beam_search_hypothesis(branch, context_ids, options).tokens;
}

double sequence_log_prob(const Branch& branch, std::span<const TokenId> context_ids,
                         std::span<const TokenId> tokens, bool with_eos) {
  EncodedPair pair;
  pair.context_ids.assign(context_ids.begin(), context_ids.end());
  pair.response_ids.assign(tokens.begin(), tokens.end());
  if (with_eos) pair.response_ids.push_back(special::kEos);
  if (pair.response_ids.empty()) throw std::invalid_argument("empty sequence");
  const auto out = branch.infer(make_batch(std::span<const EncodedPair>(&pair, 1)));
  double total = 0.0;
  for (std::size_t t = 0; t < pair.response_ids.size(); ++t) {
    const Eigen::VectorXd lp = allowed_log_probs(out.logits, static_cast<Eigen::Index>(t), t + 1);
    total += lp(pair.response_ids[t]);
  }
  return total;
}

}  // namespace cdl
