#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cdl/checkpoint.hpp"
#include "cdl/corpus.hpp"
#include "cdl/distill.hpp"
#include "cdl/model.hpp"
#include "cdl/optimizer.hpp"
#include "cdl/scoring.hpp"
#include "cdl/selection.hpp"

namespace cdl {

struct Ablation {
  bool no_attributes = false;  // auxiliaries fit the full batch
  bool no_orthogonal = false;  // hidden ND on raw student states
  bool no_nd_hidden = false;
  bool no_nd = false;          // drops both negative terms
};

enum class Batching { kSharedMasked, kPerSubsetRotation };

std::string batching_name(Batching b);
Batching parse_batching(const std::string& text);

struct TrainConfig {
  BranchConfig model;  // vocab_size is filled in from the training data
  std::vector<Attribute> attributes = {Attribute::kCoherence, Attribute::kInformativeness,
                                       Attribute::kSpecificity};
  std::size_t batch_size = 64;
  double temperature = 1.0;
  double ratio = 0.7;
  AdamConfig adam;
  std::size_t max_epochs = 20;
  std::size_t patience = 3;
  std::uint64_t seed = 1;
  Ablation ablation;
  Batching batching = Batching::kSharedMasked;
  std::uint64_t min_freq = 1;
  ScoringConfig scoring;
  bool identical_init = false;

  std::string train_path;
  std::string valid_path;
  std::map<Attribute, std::string> subset_paths;
  std::string checkpoint_path;
  std::string log_path;

  void validate() const;  // throws std::invalid_argument
};

// Flat "key = value" file; '#' starts a comment. Relative paths resolve
// against the file's directory. Unknown keys are rejected.
TrainConfig load_train_config(const std::string& path);
// Applies one key/value to `config`. Throws std::invalid_argument.
void set_train_option(TrainConfig& config, const std::string& key, const std::string& value);
// Every key with its resolved value, in the file syntax.
std::string describe(const TrainConfig& config);

// Encoded corpora, vocabulary and per-auxiliary subsets.
struct TrainData {
  Corpus train;
  Corpus valid;
  Vocabulary vocab;
  std::vector<EncodedPair> train_encoded;
  std::vector<EncodedPair> valid_encoded;
  std::vector<SubsetIndex> subsets;  // one per auxiliary; empty with no_attributes
};

TrainData load_train_data(const TrainConfig& config);
TrainData prepare_train_data(const TrainConfig& config, Corpus train, Corpus valid);

struct TrainState {
  BranchGroup group;
  std::vector<Adam> optimizers;
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double best_valid = std::numeric_limits<double>::infinity();
  std::mt19937_64 rng;
};

// Fresh group and optimizers. Also seeds the shared generator.
TrainState init_state(const TrainConfig& config, std::size_t vocab_size);
Checkpoint to_checkpoint(const TrainState& state, const Vocabulary& vocab,
                         nlohmann::json extra = nlohmann::json::object());
TrainState state_from_checkpoint(const Checkpoint& checkpoint);

// Per-branch loss terms of one step, master first.
struct LossBundle {
  std::vector<LossTerms> branches;
};

struct StepOptions {
  // Branches whose objective is replaced by zero (no gradient at all).
  std::vector<std::size_t> zero_loss;
};

// membership[m][row] != 0 when batch row `row` belongs to auxiliary m's
// subset. Randomness is drawn from state.rng: dropout of the master, then
// of each auxiliary in order.
LossBundle train_step(TrainState& state, const TrainConfig& config, const Batch& batch,
                      const std::vector<std::vector<std::uint8_t>>& membership,
                      const StepOptions& options = {});

// Master per-token negative log-likelihood over `pairs`, eval mode.
double validation_loss(const Branch& master, const std::vector<EncodedPair>& pairs,
                       std::size_t batch_size);

// Stops after `patience` consecutive epochs without a strict improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}
  // Returns true when `loss` is the new best.
  bool update(double loss);
  bool should_stop() const { return patience_ > 0 && bad_epochs_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  std::size_t bad_epochs_ = 0;
  std::size_t epochs_ = 0;
  std::size_t best_epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct FitResult {
  Checkpoint best;                   // best master by validation loss
  std::vector<double> valid_losses;  // one per completed epoch
  std::size_t best_epoch = 0;        // 0 when no epoch ran
  std::uint64_t steps = 0;
  bool stopped_early = false;
};

// Epoch loop: seeded shuffle, one train_step per batch, validation after
// each epoch, early stopping. Loss rows go to `log` when given.
FitResult fit(const TrainConfig& config, const TrainData& data, std::ostream* log = nullptr);

// Per-row subset membership for a batch.
std::vector<std::vector<std::uint8_t>> batch_membership(const TrainData& data, const Batch& batch);

}  // namespace cdl
