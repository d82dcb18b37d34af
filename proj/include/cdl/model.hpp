#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cdl/autograd.hpp"
#include "cdl/corpus.hpp"
#include "cdl/scoring.hpp"

namespace cdl {

struct BranchConfig {
  std::size_t layers_enc = 2;
  std::size_t layers_dec = 2;
  std::size_t heads = 4;
  std::size_t d_model = 256;
  std::size_t d_ffn = 1024;
  float dropout = 0.1f;
  std::size_t max_context_len = 64;
  std::size_t max_response_len = 32;
  std::size_t vocab_size = 0;

  void validate() const;  // throws std::invalid_argument
  bool operator==(const BranchConfig&) const = default;
};

enum class BranchRole { kMaster, kAuxiliary };

struct BranchTag {
  BranchRole role = BranchRole::kMaster;
  std::optional<Attribute> attribute;  // set for auxiliaries

  std::string describe() const;  // "master" or "auxiliary:<attribute>"
  static BranchTag parse(const std::string& text);
  bool operator==(const BranchTag&) const = default;
};

// Padded, batch-major inputs for one forward pass.
struct Batch {
  std::size_t size = 0;
  std::size_t context_len = 0;
  std::size_t response_len = 0;
  std::vector<std::uint32_t> ids;
  std::vector<TokenId> context;          // size * context_len, PAD padded
  std::vector<std::uint8_t> context_mask;
  std::vector<TokenId> decoder_input;    // BOS + response[:-1]
  std::vector<TokenId> targets;          // response, PAD padded
  std::vector<std::uint8_t> target_mask;
};

Batch make_batch(std::span<const EncodedPair* const> pairs);
Batch make_batch(std::span<const EncodedPair> pairs);

// Graph handles produced by one forward pass.
struct ForwardVars {
  ag::Var logits;  // [size * response_len, vocab]
  ag::Var hidden;  // [size * response_len, d_model], last decoder layer
};

// Materialized forward results.
struct ForwardOutput {
  ag::Matrix logits;
  ag::Matrix hidden;
  std::vector<std::uint8_t> mask;
};

// One encoder-decoder transformer with its own parameters. Post-norm
// residual blocks, sinusoidal positions, untied input/output embeddings.
class Branch {
 public:
  Branch() = default;
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization from `seed`.
  Branch(const BranchConfig& config, BranchTag tag, std::uint64_t seed);

  const BranchConfig& config() const { return config_; }
  const BranchTag& tag() const { return tag_; }

  std::vector<ag::Parameter>& parameters() { return params_; }
  const std::vector<ag::Parameter>& parameters() const { return params_; }
  ag::Parameter& parameter(const std::string& name);
  const ag::Parameter& parameter(const std::string& name) const;
  void zero_grad();

  // Builds the forward pass on `g`. Trainable when g records; dropout only
  // when g is in training mode.
  ForwardVars forward(ag::Graph& g, const Batch& batch);

  // Eval-mode forward without a gradient tape.
  ForwardOutput infer(const Batch& batch) const;

  // Encoder states for a batch of contexts, [size * context_len, d_model].
  ag::Var encode(ag::Graph& g, std::span<const TokenId> context, std::size_t size,
                 std::size_t context_len, std::span<const std::uint8_t> context_mask);
  // Decoder states for teacher-forced inputs given encoder memory.
  ag::Var decode(ag::Graph& g, ag::Var memory, std::span<const std::uint8_t> memory_mask,
                 std::size_t memory_len, std::span<const TokenId> decoder_input,
                 std::size_t size, std::size_t response_len);
  ag::Var project(ag::Graph& g, ag::Var hidden);

 private:
  ag::Var bind(ag::Graph& g, const std::string& name);
  ag::Var attention_block(ag::Graph& g, const std::string& prefix, ag::Var query,
                          ag::Var memory, const ag::AttentionLayout& layout,
                          std::span<const std::uint8_t> key_valid);
  ag::Var ffn_block(ag::Graph& g, const std::string& prefix, ag::Var x);
  void add_param(const std::string& name, Eigen::Index rows, Eigen::Index cols, float bound,
                 std::mt19937_64& rng);
  void add_constant_param(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                          float value);

  friend class BranchGroup;
  friend struct CheckpointAccess;

  BranchConfig config_;
  BranchTag tag_;
  std::vector<ag::Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// Sinusoidal position table [len, d_model].
ag::Matrix positional_encoding(std::size_t len, std::size_t d_model);

// Master at index 0 followed by the auxiliaries.
class BranchGroup {
 public:
  BranchGroup() = default;
  // Branch i is seeded from (seed, i). With `identical_init` every branch
  // starts from branch 0's parameters.
  BranchGroup(const BranchConfig& config, const std::vector<BranchTag>& tags, std::uint64_t seed,
              bool identical_init = false);

  const BranchConfig& config() const { return config_; }
  std::size_t size() const { return branches_.size(); }
  std::size_t auxiliaries() const { return branches_.empty() ? 0 : branches_.size() - 1; }
  Branch& master() { return branches_.at(0); }
  const Branch& master() const { return branches_.at(0); }
  Branch& operator[](std::size_t i) { return branches_.at(i); }
  const Branch& operator[](std::size_t i) const { return branches_.at(i); }
  std::vector<Branch>& branches() { return branches_; }
  const std::vector<Branch>& branches() const { return branches_; }

 private:
  BranchConfig config_;
  std::vector<Branch> branches_;
};

std::uint64_t branch_seed(std::uint64_t global_seed, std::size_t branch_index);

struct BeamOptions {
  std::size_t beam = 5;
  std::size_t max_len = 32;  // decoding steps, EOS included
  bool length_normalize = true;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // without BOS/EOS
  double log_prob = 0.0;        // sum over generated tokens, EOS included
  std::size_t steps = 0;        // generated tokens, EOS included
  bool ended_with_eos = false;

  double rank_score(bool length_normalize) const;
};

// Beam search over log-probabilities. PAD and BOS are never generated and
// EOS is masked at the first step, so every result has at least one token.
// Stops when `beam` hypotheses have finished, no live hypothesis is left, or
// max_len is reached (survivors then finish without EOS).
Hypothesis beam_search_hypothesis(const Branch& branch, std::span<const TokenId> context_ids,
                                  const BeamOptions& options);
std::vector<TokenId> beam_search(const Branch& branch, std::span<const TokenId> context_ids,
                                 const BeamOptions& options = {});

// Log-probability of `tokens` (then EOS if `with_eos`) under teacher forcing,
// with the same token masking rules as beam search.
double sequence_log_prob(const Branch& branch, std::span<const TokenId> context_ids,
                         std::span<const TokenId> tokens, bool with_eos);

}  // namespace cdl
