#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "cdl/error.hpp"
#include "cdl/trainer.hpp"
#include "train_fixture.hpp"

using namespace cdl;

namespace {

std::string temp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

bool same_params(const Branch& a, const Branch& b) {
  for (std::size_t k = 0; k < a.parameters().size(); ++k) {
    const auto& x = a.parameters()[k].value;
    const auto& y = b.parameters()[k].value;
    if (std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) != 0)
      return false;
  }
  return true;
}

std::vector<LossBundle> run_steps(const TrainConfig& cfg, const TrainData& data, int steps,
                                  TrainState* out = nullptr) {
  auto state = init_state(cfg, data.vocab.size());
  std::vector<LossBundle> bundles;
  for (int s = 0; s < steps; ++s) {
    auto batch = trainfix::first_batch(data, 4 + static_cast<std::size_t>(s % 3));
    bundles.push_back(train_step(state, cfg, batch, batch_membership(data, batch)));
  }
  if (out) *out = std::move(state);
  return bundles;
}

}  // namespace

TEST(TrainStep, DeterministicForFixedSeed) {
  auto cfg = trainfix::config();
  auto data = trainfix::data(cfg);
  auto a = run_steps(cfg, data, 4), b = run_steps(cfg, data, 4);
  for (std::size_t s = 0; s < a.size(); ++s)
    for (std::size_t i = 0; i < a[s].branches.size(); ++i) {
      EXPECT_EQ(a[s].branches[i].total, b[s].branches[i].total);
      EXPECT_EQ(a[s].branches[i].nd_hidden, b[s].branches[i].nd_hidden);
    }
  cfg.seed = 8;
  auto c = run_steps(cfg, data, 1);
  EXPECT_NE(a[0].branches[0].total, c[0].branches[0].total);
}

TEST(TrainStep, AllTermsPresentAndFinite) {
  auto cfg = trainfix::config();
  auto data = trainfix::data(cfg);
  auto bundle = run_steps(cfg, data, 1)[0];
  ASSERT_EQ(bundle.branches.size(), 3u);
  EXPECT_GT(bundle.branches[0].pd, 0.0);
  EXPECT_EQ(bundle.branches[0].nd_pred, 0.0);
  for (std::size_t b = 1; b < 3; ++b) {
    EXPECT_GT(bundle.branches[b].pd, 0.0);
    EXPECT_GT(bundle.branches[b].nd_pred, 0.0);
    EXPECT_GT(bundle.branches[b].nd_hidden, 0.0);
    EXPECT_NEAR(bundle.branches[b].total,
                bundle.branches[b].mle + bundle.branches[b].pd + bundle.branches[b].nd_pred +
                    bundle.branches[b].nd_hidden,
                1e-12);
  }
}

TEST(TrainStep, MasterOnlyIsPlainMle) {
  auto cfg = trainfix::config();
  cfg.attributes.clear();
  cfg.model.dropout = 0.0f;
  auto data = trainfix::data(cfg);
  EXPECT_TRUE(data.subsets.empty());
  auto state = init_state(cfg, data.vocab.size());
  ASSERT_EQ(state.group.size(), 1u);
  std::vector<EncodedPair> pairs(data.train_encoded.begin(), data.train_encoded.begin() + 4);
  const double expected = validation_loss(state.group.master(), pairs, 4);
  auto batch = trainfix::first_batch(data, 4);
  auto bundle = train_step(state, cfg, batch, batch_membership(data, batch));
  EXPECT_NEAR(bundle.branches[0].mle, expected, 1e-9);
  EXPECT_EQ(bundle.branches[0].total, bundle.branches[0].mle);
  EXPECT_EQ(bundle.branches[0].pd, 0.0);
}

TEST(TrainStep, ParameterIsolation) {
  auto cfg = trainfix::config();
  auto data = trainfix::data(cfg);
  TrainState state;
  run_steps(cfg, data, 2, &state);
  for (std::size_t frozen = 0; frozen < state.group.size(); ++frozen) {
    const Branch before = state.group[frozen];
    std::vector<Branch> others(state.group.branches());
    auto batch = trainfix::first_batch(data, 5);
    auto bundle = train_step(state, cfg, batch, batch_membership(data, batch), {{frozen}});
    EXPECT_TRUE(same_params(before, state.group[frozen])) << "branch " << frozen;
    EXPECT_EQ(bundle.branches[frozen].total, 0.0);
    for (std::size_t o = 0; o < state.group.size(); ++o)
      if (o != frozen) EXPECT_FALSE(same_params(others[o], state.group[o])) << "branch " << o;
  }
}

TEST(TrainStep, HomogenizationWithoutNegativeDistillation) {
  auto cfg = trainfix::config();
  cfg.ablation.no_nd = true;
  cfg.identical_init = true;
  cfg.model.dropout = 0.0f;
  cfg.ratio = 1.0;
  auto data = trainfix::data(cfg);
  ASSERT_EQ(data.subsets.size(), 2u);
  TrainState state;
  run_steps(cfg, data, 5, &state);
  EXPECT_TRUE(same_params(state.group[1], state.group[2]));

  cfg.identical_init = false;
  run_steps(cfg, data, 5, &state);
  EXPECT_FALSE(same_params(state.group[1], state.group[2]));
}

TEST(TrainStep, AblationFlags) {
  auto base = trainfix::config();
  auto data = trainfix::data(base);

  auto no_nd = base;
  no_nd.ablation.no_nd = true;
  const auto plain = run_steps(no_nd, data, 1)[0];
  for (const auto& b : plain.branches) {
    EXPECT_EQ(b.nd_pred, 0.0);
    EXPECT_EQ(b.nd_hidden, 0.0);
  }

  auto no_hidden = base;
  no_hidden.ablation.no_nd_hidden = true;
  auto nh = run_steps(no_hidden, data, 1)[0];
  EXPECT_GT(nh.branches[1].nd_pred, 0.0);
  EXPECT_EQ(nh.branches[1].nd_hidden, 0.0);

  // Raw and orthogonalized hidden ND agree on the prediction term, differ on
  // the hidden term.
  auto no_orth = base;
  no_orth.ablation.no_orthogonal = true;
  auto full = run_steps(base, data, 1)[0];
  auto raw = run_steps(no_orth, data, 1)[0];
  EXPECT_EQ(full.branches[1].nd_pred, raw.branches[1].nd_pred);
  EXPECT_NE(full.branches[1].nd_hidden, raw.branches[1].nd_hidden);
}

TEST(TrainStep, NoAttributesUsesFullBatch) {
  auto cfg = trainfix::config();
  cfg.ablation.no_attributes = true;
  cfg.ablation.no_nd = true;
  cfg.model.dropout = 0.0f;
  auto data = trainfix::data(cfg);
  EXPECT_TRUE(data.subsets.empty());
  auto state = init_state(cfg, data.vocab.size());
  std::vector<EncodedPair> pairs(data.train_encoded.begin(), data.train_encoded.begin() + 4);
  const double aux_mle = validation_loss(state.group[1], pairs, 4);
  auto batch = trainfix::first_batch(data, 4);
  auto bundle = train_step(state, cfg, batch, {});
  EXPECT_NEAR(bundle.branches[1].mle, aux_mle, 1e-9);
  EXPECT_GT(bundle.branches[1].pd, 0.0);
}

TEST(TrainStep, AuxiliaryMleFollowsMembership) {
  auto cfg = trainfix::config();
  cfg.model.dropout = 0.0f;
  auto data = trainfix::data(cfg);
  auto state = init_state(cfg, data.vocab.size());
  auto batch = trainfix::first_batch(data, 4);
  std::vector<std::vector<std::uint8_t>> none(2, std::vector<std::uint8_t>(4, 0));
  auto bundle = train_step(state, cfg, batch, none);
  EXPECT_EQ(bundle.branches[1].mle, 0.0);
  EXPECT_EQ(bundle.branches[2].mle, 0.0);
  EXPECT_GT(bundle.branches[1].pd, 0.0);
  EXPECT_THROW(train_step(state, cfg, batch, {}), std::invalid_argument);
}

TEST(EarlyStopping, PatienceOne) {
  EarlyStopper s(1);
  EXPECT_TRUE(s.update(1.0));
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.update(1.5));
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.best_epoch(), 1u);
  EXPECT_EQ(s.best(), 1.0);
}

TEST(EarlyStopping, EqualLossIsNotAnImprovement) {
  EarlyStopper s(2);
  s.update(2.0);
  EXPECT_FALSE(s.update(2.0));
  EXPECT_FALSE(s.should_stop());
  EXPECT_TRUE(s.update(1.0));
  EXPECT_FALSE(s.update(3.0));
  EXPECT_FALSE(s.update(3.0));
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.best_epoch(), 3u);
}

TEST(Fit, ZeroEpochsReturnsInitialization) {
  auto cfg = trainfix::config();
  cfg.max_epochs = 0;
  auto data = trainfix::data(cfg);
  auto result = fit(cfg, data);
  EXPECT_EQ(result.steps, 0u);
  EXPECT_TRUE(result.valid_losses.empty());
  EXPECT_EQ(result.best_epoch, 0u);
  auto init = init_state(cfg, data.vocab.size());
  for (std::size_t b = 0; b < init.group.size(); ++b)
    EXPECT_TRUE(same_params(init.group[b], result.best.group[b]));
}

TEST(Fit, LogIsReproducibleAndKeepsBest) {
  auto cfg = trainfix::config();
  auto data = trainfix::data(cfg);
  std::ostringstream a, b;
  auto ra = fit(cfg, data, &a);
  fit(cfg, data, &b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(ra.valid_losses.size(), 2u);
  EXPECT_EQ(ra.steps, 2u * 5u);  // 20 pairs in batches of 4
  const auto best = std::min_element(ra.valid_losses.begin(), ra.valid_losses.end());
  EXPECT_EQ(ra.best_epoch, static_cast<std::size_t>(best - ra.valid_losses.begin()) + 1);
  EXPECT_NEAR(validation_loss(ra.best.group.master(), data.valid_encoded, 4), *best, 1e-12);
  EXPECT_NE(a.str().find("# train_checksum=" + data.train.checksum), std::string::npos);
  EXPECT_NE(a.str().find("step,branch,mle,pd,nd_pred,nd_hidden,total"), std::string::npos);
}

TEST(Fit, RotationBatchingRuns) {
  auto cfg = trainfix::config();
  cfg.batching = Batching::kPerSubsetRotation;
  cfg.max_epochs = 1;
  auto data = trainfix::data(cfg);
  auto r = fit(cfg, data);
  EXPECT_EQ(r.steps, 5u);
  EXPECT_TRUE(std::isfinite(r.valid_losses[0]));
}

TEST(Data, SubsetsFollowRatio) {
  auto cfg = trainfix::config();
  auto data = trainfix::data(cfg);
  ASSERT_EQ(data.subsets.size(), 2u);
  for (const auto& s : data.subsets) EXPECT_EQ(s.ids.size(), 14u);  // ceil(0.7 * 20)
  EXPECT_EQ(data.subsets[0].attribute, Attribute::kCoherence);
}

TEST(Data, MissingSubsetFileIsDataError) {
  auto cfg = trainfix::config();
  cfg.subset_paths[Attribute::kCoherence] = temp("cdl_no_such_subset.txt");
  EXPECT_THROW(trainfix::data(cfg), DataError);
}

TEST(Data, SubsetFileIsUsed) {
  auto cfg = trainfix::config();
  auto corpus = trainfix::corpus();
  SubsetIndex s;
  s.attribute = Attribute::kSpecificity;
  s.ratio = 0.5;
  for (std::uint32_t i = 0; i < 20; i += 2) s.ids.push_back(i);
  const auto path = temp("cdl_subset_even.txt");
  save_subset(s, path);
  cfg.subset_paths[Attribute::kSpecificity] = path;
  auto data = trainfix::data(cfg);
  EXPECT_EQ(data.subsets[1].ids, s.ids);
}

TEST(Config, FileLoaderResolvesPathsAndRejectsUnknownKeys) {
  const auto dir = std::filesystem::temp_directory_path() / "cdl_cfg";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "train.cfg");
    f << "# comment\ntrain = data/train.jsonl\nbatch_size = 8  # trailing\n"
         "attributes = coherence, specificity\nno_orthogonal = true\nlr = 0.002\n"
         "batching = per_subset_rotation\nd_model = 32\n";
  }
  auto c = load_train_config((dir / "train.cfg").string());
  EXPECT_EQ(c.train_path, (dir / "data/train.jsonl").string());
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_EQ(c.attributes, (std::vector<Attribute>{Attribute::kCoherence, Attribute::kSpecificity}));
  EXPECT_TRUE(c.ablation.no_orthogonal);
  EXPECT_FLOAT_EQ(c.adam.lr, 0.002f);
  EXPECT_EQ(c.batching, Batching::kPerSubsetRotation);
  EXPECT_EQ(c.model.d_model, 32u);
  {
    std::ofstream f(dir / "bad.cfg");
    f << "batch_size = 8\nlearning_rate = 1\n";
  }
  try {
    load_train_config((dir / "bad.cfg").string());
    FAIL() << "unknown key accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST(Config, DescribeRoundTrips) {
  TrainConfig c;
  set_train_option(c, "temperature", "2.5");
  set_train_option(c, "attributes", "none");
  set_train_option(c, "no_nd", "1");
  set_train_option(c, "seed", "42");
  TrainConfig d;
  std::istringstream lines(describe(c));
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find(" = ");
    ASSERT_NE(eq, std::string::npos) << line;
    set_train_option(d, line.substr(0, eq), line.substr(eq + 3));
  }
  EXPECT_EQ(describe(c), describe(d));
  EXPECT_TRUE(d.attributes.empty());
  EXPECT_EQ(d.temperature, 2.5);
  EXPECT_EQ(d.seed, 42u);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.ratio = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(set_train_option(c, "batch_size", "many"), std::invalid_argument);
  EXPECT_THROW(parse_batching("interleaved"), std::invalid_argument);
}

TEST(Numerics, NonFiniteLossAborts) {
  auto cfg = trainfix::config();
  auto data = trainfix::data(cfg);
  auto state = init_state(cfg, data.vocab.size());
  state.group[1].parameter("out.b").value(0, 7) = std::numeric_limits<float>::quiet_NaN();
  auto batch = trainfix::first_batch(data, 4);
  try {
    train_step(state, cfg, batch, batch_membership(data, batch));
    FAIL() << "NaN passed through";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("branch"), std::string::npos);
  }
}
