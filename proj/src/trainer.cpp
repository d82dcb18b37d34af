#include "cdl/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cdl/error.hpp"
#include "cdl/text.hpp"

namespace cdl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
std::string shortest(T value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw std::invalid_argument("bad value '" + text + "' for " + key);
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw std::invalid_argument("bad boolean '" + text + "' for " + key);
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

std::vector<Attribute> parse_attribute_list(const std::string& text) {
  std::vector<Attribute> out;
  if (text.empty() || text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto attribute = parse_attribute(trim(item));
    if (std::find(out.begin(), out.end(), attribute) != out.end())
      throw std::invalid_argument("attribute listed twice: " + item);
    out.push_back(attribute);
  }
  return out;
}

std::vector<BranchTag> branch_tags(const TrainConfig& config) {
  std::vector<BranchTag> tags = {{BranchRole::kMaster, std::nullopt}};
  for (auto a : config.attributes) tags.push_back({BranchRole::kAuxiliary, a});
  return tags;
}

template <class Container>
void fisher_yates(Container& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

void check_finite(double value, std::size_t branch, const char* term, std::uint64_t step) {
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite " << term << " loss on branch " << branch << " at step " << step
        << ": " << value;
    throw NumericalError(msg.str());
  }
}

std::string subset_checksum(const SubsetIndex& subset) {
  std::string bytes;
  for (auto id : subset.ids) bytes += std::to_string(id) + '\n';
  return hex64(fnv1a(bytes));
}

// Index lists for one epoch. Consumes the shared generator.
std::vector<std::vector<std::size_t>> plan_epoch(const TrainConfig& config, const TrainData& data,
                                                 std::mt19937_64& rng) {
  const std::size_t n = data.train_encoded.size();
  const std::size_t bs = config.batch_size;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  fisher_yates(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  const std::size_t count = (n + bs - 1) / bs;

  if (config.batching == Batching::kSharedMasked || data.subsets.empty()) {
    for (std::size_t start = 0; start < n; start += bs)
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
    return batches;
  }

  // Rotation: batch k comes from the full set when k % (M+1) == 0 and from
  // subset m otherwise. Subset streams wrap around.
  std::vector<std::vector<std::size_t>> streams = {order};
  for (const auto& subset : data.subsets) {
    std::vector<std::size_t> s(subset.ids.begin(), subset.ids.end());
    fisher_yates(s, rng);
    streams.push_back(std::move(s));
  }
  std::vector<std::size_t> cursor(streams.size(), 0);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t s = k % streams.size();
    const auto& stream = streams[s];
    std::vector<std::size_t> batch;
    if (s == 0) {
      const std::size_t start = cursor[0];
      batch.assign(stream.begin() + static_cast<std::ptrdiff_t>(start),
                   stream.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
      cursor[0] = std::min(n, start + bs);
      if (batch.empty()) {
        cursor[0] = 0;
        continue;
      }
    } else {
      const std::size_t take = std::min(bs, stream.size());
      for (std::size_t i = 0; i < take; ++i) {
        batch.push_back(stream[cursor[s]]);
        cursor[s] = (cursor[s] + 1) % stream.size();
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

void write_log_row(std::ostream& log, std::uint64_t step, const Branch& branch,
                   const LossTerms& t) {
  log << step << ',' << branch.tag().describe() << ',' << format_double(t.mle) << ','
      << format_double(t.pd) << ',' << format_double(t.nd_pred) << ','
      << format_double(t.nd_hidden) << ',' << format_double(t.total) << '\n';
}

}  // namespace

std::string batching_name(Batching b) {
  return b == Batching::kSharedMasked ? "shared_masked" : "per_subset_rotation";
}

Batching parse_batching(const std::string& text) {
  if (text == "shared_masked") return Batching::kSharedMasked;
  if (text == "per_subset_rotation") return Batching::kPerSubsetRotation;
  throw std::invalid_argument("unknown batching mode '" + text + "'");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("ratio must be in (0, 1]");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (!(adam.lr > 0.0f)) throw std::invalid_argument("lr must be positive");
  BranchConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = special::kCount + 1;
  m.validate();
}

void set_train_option(TrainConfig& c, const std::string& key, const std::string& value) {
  using sz = std::size_t;
  if (key == "train") c.train_path = value;
  else if (key == "valid") c.valid_path = value;
  else if (key == "checkpoint") c.checkpoint_path = value;
  else if (key == "log") c.log_path = value;
  else if (key == "attributes") c.attributes = parse_attribute_list(value);
  else if (key.rfind("subset.", 0) == 0) c.subset_paths[parse_attribute(key.substr(7))] = value;
  else if (key == "batch_size") c.batch_size = parse_number<sz>(key, value);
  else if (key == "temperature") c.temperature = parse_number<double>(key, value);
  else if (key == "ratio") c.ratio = parse_number<double>(key, value);
  else if (key == "lr") c.adam.lr = parse_number<float>(key, value);
  else if (key == "beta1") c.adam.beta1 = parse_number<float>(key, value);
  else if (key == "beta2") c.adam.beta2 = parse_number<float>(key, value);
  else if (key == "eps") c.adam.eps = parse_number<float>(key, value);
  else if (key == "clip_norm") c.adam.clip_norm = parse_number<float>(key, value);
  else if (key == "max_epochs") c.max_epochs = parse_number<sz>(key, value);
  else if (key == "patience") c.patience = parse_number<sz>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "no_attributes") c.ablation.no_attributes = parse_bool(key, value);
  else if (key == "no_orthogonal") c.ablation.no_orthogonal = parse_bool(key, value);
  else if (key == "no_nd_hidden") c.ablation.no_nd_hidden = parse_bool(key, value);
  else if (key == "no_nd") c.ablation.no_nd = parse_bool(key, value);
  else if (key == "batching") c.batching = parse_batching(value);
  else if (key == "min_freq") c.min_freq = parse_number<std::uint64_t>(key, value);
  else if (key == "identical_init") c.identical_init = parse_bool(key, value);
  else if (key == "layers_enc") c.model.layers_enc = parse_number<sz>(key, value);
  else if (key == "layers_dec") c.model.layers_dec = parse_number<sz>(key, value);
  else if (key == "heads") c.model.heads = parse_number<sz>(key, value);
  else if (key == "d_model") c.model.d_model = parse_number<sz>(key, value);
  else if (key == "d_ffn") c.model.d_ffn = parse_number<sz>(key, value);
  else if (key == "dropout") c.model.dropout = parse_number<float>(key, value);
  else if (key == "max_context_len") c.model.max_context_len = parse_number<sz>(key, value);
  else if (key == "max_response_len") c.model.max_response_len = parse_number<sz>(key, value);
  else if (key == "alpha") c.scoring.alpha = parse_number<double>(key, value);
  else if (key == "beta") c.scoring.beta = parse_number<double>(key, value);
  else if (key == "embedding_dim") c.scoring.embedding_dim = parse_number<sz>(key, value);
  else if (key == "embedding_vocab") c.scoring.embedding_vocab = parse_number<sz>(key, value);
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path);
  const auto base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& v) {
    if (v.empty() || std::filesystem::path(v).is_absolute()) return v;
    return (base / v).lexically_normal().string();
  };
  TrainConfig config;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key == "train" || key == "valid" || key == "checkpoint" || key == "log" ||
        key.rfind("subset.", 0) == 0)
      value = resolve(value);
    try {
      set_train_option(config, key, value);
    } catch (const std::invalid_argument& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

std::string describe(const TrainConfig& c) {
  std::ostringstream out;
  auto kv = [&](const std::string& k, const std::string& v) { out << k << " = " << v << '\n'; };
  kv("train", c.train_path);
  kv("valid", c.valid_path);
  kv("checkpoint", c.checkpoint_path);
  kv("log", c.log_path);
  std::string attrs;
  for (auto a : c.attributes) attrs += (attrs.empty() ? "" : ",") + attribute_name(a);
  kv("attributes", attrs.empty() ? "none" : attrs);
  for (const auto& [a, p] : c.subset_paths) kv("subset." + attribute_name(a), p);
  kv("batch_size", std::to_string(c.batch_size));
  kv("temperature", shortest(c.temperature));
  kv("ratio", shortest(c.ratio));
  kv("lr", shortest(c.adam.lr));
  kv("beta1", shortest(c.adam.beta1));
  kv("beta2", shortest(c.adam.beta2));
  kv("eps", shortest(c.adam.eps));
  kv("clip_norm", shortest(c.adam.clip_norm));
  kv("max_epochs", std::to_string(c.max_epochs));
  kv("patience", std::to_string(c.patience));
  kv("seed", std::to_string(c.seed));
  kv("no_attributes", bool_text(c.ablation.no_attributes));
  kv("no_orthogonal", bool_text(c.ablation.no_orthogonal));
  kv("no_nd_hidden", bool_text(c.ablation.no_nd_hidden));
  kv("no_nd", bool_text(c.ablation.no_nd));
  kv("batching", batching_name(c.batching));
  kv("min_freq", std::to_string(c.min_freq));
  kv("identical_init", bool_text(c.identical_init));
  kv("layers_enc", std::to_string(c.model.layers_enc));
  kv("layers_dec", std::to_string(c.model.layers_dec));
  kv("heads", std::to_string(c.model.heads));
  kv("d_model", std::to_string(c.model.d_model));
  kv("d_ffn", std::to_string(c.model.d_ffn));
  kv("dropout", shortest(c.model.dropout));
  kv("max_context_len", std::to_string(c.model.max_context_len));
  kv("max_response_len", std::to_string(c.model.max_response_len));
  kv("alpha", shortest(c.scoring.alpha));
  kv("beta", shortest(c.scoring.beta));
  kv("embedding_dim", std::to_string(c.scoring.embedding_dim));
  kv("embedding_vocab", std::to_string(c.scoring.embedding_vocab));
  return out.str();
}

TrainData prepare_train_data(const TrainConfig& config, Corpus train, Corpus valid) {
  config.validate();
  TrainData data;
  data.train = std::move(train);
  data.valid = std::move(valid);
  if (data.train.empty()) throw DataError("empty training corpus");
  if (data.valid.empty()) throw DataError("empty validation corpus");
  data.vocab = build_vocab(data.train, config.min_freq);
  const auto& m = config.model;
  data.train_encoded = encode_corpus(data.train, data.vocab, m.max_context_len, m.max_response_len);
  data.valid_encoded = encode_corpus(data.valid, data.vocab, m.max_context_len, m.max_response_len);

  if (!config.ablation.no_attributes) {
    for (auto attribute : config.attributes) {
      SubsetIndex subset;
      auto it = config.subset_paths.find(attribute);
      if (it != config.subset_paths.end()) {
        if (!std::filesystem::exists(it->second))
          throw DataError("missing subset file for " + attribute_name(attribute) + ": " +
                          it->second);
        subset = load_subset(it->second);
        if (subset.attribute != attribute)
          throw DataError(it->second + ": subset is for " + attribute_name(subset.attribute));
      } else {
        subset = build_subset(score_corpus(data.train, attribute, config.scoring), config.ratio);
      }
      for (auto id : subset.ids)
        if (id >= data.train.size())
          throw DataError("subset id " + std::to_string(id) + " outside the training corpus");
      data.subsets.push_back(std::move(subset));
    }
  }
  return data;
}

TrainData load_train_data(const TrainConfig& config) {
  if (config.train_path.empty() || config.valid_path.empty())
    throw std::invalid_argument("train and valid paths are required");
  return prepare_train_data(config, load_corpus(config.train_path), load_corpus(config.valid_path));
}

TrainState init_state(const TrainConfig& config, std::size_t vocab_size) {
  BranchConfig model = config.model;
  model.vocab_size = vocab_size;
  model.validate();
  TrainState state;
  state.group = BranchGroup(model, branch_tags(config), config.seed, config.identical_init);
  for (auto& branch : state.group.branches())
    state.optimizers.emplace_back(config.adam, branch.parameters());
  state.rng.seed(config.seed);
  return state;
}

Checkpoint to_checkpoint(const TrainState& state, const Vocabulary& vocab, nlohmann::json extra) {
  Checkpoint ck;
  ck.group = state.group;
  ck.vocab = vocab;
  ck.optimizers = state.optimizers;
  std::ostringstream rng;
  rng << state.rng;
  ck.state = std::move(extra);
  ck.state["epoch"] = state.epoch;
  ck.state["step"] = state.step;
  ck.state["best_valid"] = std::isfinite(state.best_valid) ? nlohmann::json(state.best_valid)
                                                           : nlohmann::json(nullptr);
  ck.state["rng"] = rng.str();
  return ck;
}

TrainState state_from_checkpoint(const Checkpoint& ck) {
  TrainState state;
  state.group = ck.group;
  state.optimizers = ck.optimizers;
  if (state.optimizers.empty())
    for (auto& branch : state.group.branches())
      state.optimizers.emplace_back(AdamConfig{}, branch.parameters());
  const auto& s = ck.state;
  if (s.contains("epoch")) state.epoch = s["epoch"].get<std::size_t>();
  if (s.contains("step")) state.step = s["step"].get<std::uint64_t>();
  if (s.contains("best_valid") && !s["best_valid"].is_null())
    state.best_valid = s["best_valid"].get<double>();
  if (s.contains("rng")) {
    std::istringstream in(s["rng"].get<std::string>());
    in >> state.rng;
    if (!in) throw DataError("corrupt generator state in checkpoint");
  }
  return state;
}

std::vector<std::vector<std::uint8_t>> batch_membership(const TrainData& data, const Batch& batch) {
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& subset : data.subsets) {
    std::vector<std::uint8_t> rows(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b) rows[b] = subset.contains(batch.ids[b]) ? 1 : 0;
    out.push_back(std::move(rows));
  }
  return out;
}

LossBundle train_step(TrainState& state, const TrainConfig& config, const Batch& batch,
                      const std::vector<std::vector<std::uint8_t>>& membership,
                      const StepOptions& options) {
  auto& group = state.group;
  const std::size_t branches = group.size();
  const std::size_t aux = branches - 1;
  const auto& ab = config.ablation;
  if (!ab.no_attributes && membership.size() != aux)
    throw std::invalid_argument("one membership mask per auxiliary expected");
  if (state.optimizers.size() != branches)
    throw std::invalid_argument("one optimizer per branch expected");

  const Mask mask(batch.target_mask);
  const double temperature = config.temperature;
  const std::span<const TokenId> targets(batch.targets);
  const std::uint64_t step = state.step + 1;

  // Forward every branch first; dropout draws follow branch order.
  std::vector<std::unique_ptr<ag::Graph>> graphs;
  std::vector<ForwardVars> vars;
  std::vector<RowMatrix<double>> logits(branches);
  std::vector<RowMatrix<double>> hidden(branches);
  std::vector<SoftDistribution<double>> soft(branches);
  for (std::size_t b = 0; b < branches; ++b) {
    graphs.push_back(std::make_unique<ag::Graph>(true, true, &state.rng));
    group[b].zero_grad();
    vars.push_back(group[b].forward(*graphs[b], batch));
    logits[b] = vars[b].logits.value().cast<double>();
    hidden[b] = vars[b].hidden.value().cast<double>();
    if (aux > 0) soft[b] = soften<double>(logits[b], temperature);
  }

  LossBundle bundle;
  bundle.branches.resize(branches);
  const bool use_nd = !ab.no_nd && aux >= 2;
  const bool use_nd_hidden = use_nd && !ab.no_nd_hidden;

  for (std::size_t b = 0; b < branches; ++b) {
    RowMatrix<double> g_logits;
    RowMatrix<double> g_hidden;
    LossTerms terms;
    if (b == 0) {
      auto mle = mle_loss<double, TokenId>(logits[0], targets, mask);
      g_logits = mle.grad;
      if (aux == 0) {
        terms.mle = terms.total = mle.value;
      } else {
        std::vector<double> pd_terms;
        for (std::size_t m = 1; m < branches; ++m) {
          auto pd = pd_loss<double>(soft[m], logits[0], mask, temperature);
          pd_terms.push_back(pd.value);
          g_logits += pd.grad / static_cast<double>(aux);
        }
        terms = master_objective(mle.value, pd_terms);
      }
    } else {
      std::vector<std::uint8_t> own(batch.target_mask);
      if (!ab.no_attributes) {
        const auto& rows = membership[b - 1];
        for (std::size_t r = 0; r < batch.size; ++r)
          if (!rows[r])
            std::fill_n(own.begin() + static_cast<std::ptrdiff_t>(r * batch.response_len),
                        batch.response_len, std::uint8_t{0});
      }
      double mle_value = 0.0;
      if (std::any_of(own.begin(), own.end(), [](std::uint8_t v) { return v != 0; })) {
        auto mle = mle_loss<double, TokenId>(logits[b], targets, Mask(own));
        mle_value = mle.value;
        g_logits = mle.grad;
      } else {
        g_logits = RowMatrix<double>::Zero(logits[b].rows(), logits[b].cols());
      }
      auto pd = pd_loss<double>(soft[0], logits[b], mask, temperature);
      g_logits += pd.grad;
      std::vector<double> nd_pred_terms;
      std::vector<double> nd_hidden_terms;
      if (use_nd) {
        const double w = 1.0 / static_cast<double>(aux - 1);
        g_hidden = RowMatrix<double>::Zero(hidden[b].rows(), hidden[b].cols());
        for (std::size_t o = 1; o < branches; ++o) {
          if (o == b) continue;
          auto nd = nd_pred_loss<double>(soft[o], logits[b], mask, temperature);
          nd_pred_terms.push_back(nd.value);
          g_logits += nd.grad * w;
          if (use_nd_hidden) {
            auto ndh = nd_hidden_loss<double>(hidden[b], hidden[o], mask, !ab.no_orthogonal);
            nd_hidden_terms.push_back(ndh.value);
            g_hidden += ndh.grad * w;
          }
        }
      }
      terms = auxiliary_objective(mle_value, pd.value, nd_pred_terms, nd_hidden_terms);
    }

    check_finite(terms.mle, b, "mle", step);
    check_finite(terms.pd, b, "pd", step);
    check_finite(terms.nd_pred, b, "nd_pred", step);
    check_finite(terms.nd_hidden, b, "nd_hidden", step);
    check_finite(terms.total, b, "total", step);

    const bool zeroed = std::find(options.zero_loss.begin(), options.zero_loss.end(), b) !=
                        options.zero_loss.end();
    if (zeroed) {
      terms = LossTerms{};
    } else {
      auto& g = *graphs[b];
      g.grad(vars[b].logits.id) = g_logits.cast<float>();
      if (g_hidden.size() > 0) g.grad(vars[b].hidden.id) += g_hidden.cast<float>();
      g.backward();
    }
    graphs[b].reset();
    bundle.branches[b] = terms;
  }

  // A zeroed branch takes no optimizer step, so stale moments cannot move it.
  for (std::size_t b = 0; b < branches; ++b)
    if (std::find(options.zero_loss.begin(), options.zero_loss.end(), b) == options.zero_loss.end())
      state.optimizers[b].step(group[b].parameters());
  state.step = step;
  return bundle;
}

double validation_loss(const Branch& master, const std::vector<EncodedPair>& pairs,
                       std::size_t batch_size) {
  if (pairs.empty()) throw std::invalid_argument("validation set is empty");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::size_t end = std::min(pairs.size(), start + batch_size);
    auto batch = make_batch(std::span<const EncodedPair>(pairs.data() + start, end - start));
    auto out = master.infer(batch);
    for (Eigen::Index i = 0; i < out.logits.rows(); ++i) {
      if (!batch.target_mask[static_cast<std::size_t>(i)]) continue;
      const auto row = out.logits.row(i).cast<double>();
      const double peak = row.maxCoeff();
      const double lse = peak + std::log((row.array() - peak).exp().sum());
      total += lse - row(batch.targets[static_cast<std::size_t>(i)]);
      ++tokens;
    }
  }
  return total / static_cast<double>(tokens);
}

bool EarlyStopper::update(double loss) {
  ++epochs_;
  if (loss < best_) {
    best_ = loss;
    best_epoch_ = epochs_;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

FitResult fit(const TrainConfig& config, const TrainData& data, std::ostream* log) {
  config.validate();
  TrainState state = init_state(config, data.vocab.size());
  nlohmann::json meta = {{"seed", config.seed},
                         {"train_checksum", data.train.checksum},
                         {"valid_checksum", data.valid.checksum}};

  if (log) {
    *log << "# seed=" << config.seed << '\n';
    *log << "# train_checksum=" << data.train.checksum << '\n';
    *log << "# valid_checksum=" << data.valid.checksum << '\n';
    for (const auto& subset : data.subsets)
      *log << "# subset." << attribute_name(subset.attribute) << "=" << subset_checksum(subset)
           << '\n';
    std::istringstream resolved(describe(config));
    for (std::string line; std::getline(resolved, line);) *log << "# config " << line << '\n';
    *log << "step,branch,mle,pd,nd_pred,nd_hidden,total\n";
  }

  FitResult result;
  result.best = to_checkpoint(state, data.vocab, meta);
  EarlyStopper stopper(config.patience);
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (const auto& indices : plan_epoch(config, data, state.rng)) {
      std::vector<const EncodedPair*> ptrs;
      for (auto i : indices) ptrs.push_back(&data.train_encoded[i]);
      const Batch batch = make_batch(std::span<const EncodedPair* const>(ptrs));
      const auto bundle = train_step(state, config, batch, batch_membership(data, batch));
      if (log)
        for (std::size_t b = 0; b < bundle.branches.size(); ++b)
          write_log_row(*log, state.step, state.group[b], bundle.branches[b]);
    }
    state.epoch = epoch;
    const double valid = validation_loss(state.group.master(), data.valid_encoded,
                                         config.batch_size);
    check_finite(valid, 0, "validation", state.step);
    result.valid_losses.push_back(valid);
    if (log) *log << "# epoch=" << epoch << " valid_loss=" << format_double(valid) << '\n';
    if (stopper.update(valid)) {
      state.best_valid = valid;
      result.best = to_checkpoint(state, data.vocab, meta);
      result.best_epoch = epoch;
    }
    if (stopper.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }
  result.steps = state.step;
  if (log) log->flush();
  return result;
}

}  // namespace cdl
