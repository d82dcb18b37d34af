#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "cdl/error.hpp"
#include "cdl/scoring.hpp"
#include "cdl/text.hpp"
#include "oracles.hpp"

using namespace cdl;

namespace {

const Corpus& fixture() {
  static const Corpus c = load_corpus(std::string(CDL_TEST_DATA) + "/fixture20.jsonl");
  return c;
}

std::set<std::string> texts(const std::set<Phrase>& ps) {
  std::set<std::string> out;
  for (const auto& p : ps) out.insert(p.text);
  return out;
}

}  // namespace

TEST(Keyphrases, UnigramsAndBigrams) {
  auto ps = extract_keyphrases(tokenize("i like green tea"), {"i"});
  EXPECT_EQ(texts(ps), (std::set<std::string>{"like", "green", "tea", "like green", "green tea"}));
  for (const auto& p : ps) EXPECT_EQ(p.words, p.text.find(' ') == std::string::npos ? 1 : 2);
}

TEST(Keyphrases, StopwordsOnlyAndSingleWord) {
  EXPECT_TRUE(extract_keyphrases(tokenize("i do not know ."), default_stopwords()).empty());
  EXPECT_EQ(texts(extract_keyphrases(tokenize("the tea ."), default_stopwords())),
            std::set<std::string>{"tea"});
}

TEST(Keyphrases, PunctuationBreaksBigrams) {
  EXPECT_EQ(texts(extract_keyphrases(tokenize("green , tea"), {})),
            (std::set<std::string>{"green", "tea"}));
}

TEST(Npmi, ReferenceValues) {
  EXPECT_DOUBLE_EQ(npmi(5, 5, 5, 20), 1.0);
  EXPECT_EQ(npmi(10, 10, 5, 20), 0.0);
  EXPECT_EQ(npmi(4, 4, 1, 16), 0.0);
  EXPECT_EQ(npmi(3, 3, 3, 3), 1.0);
  EXPECT_THROW(npmi(3, 3, 0, 10), std::invalid_argument);
}

TEST(Npmi, BoundedAndZeroExactlyWhenIndependent) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20000; ++trial) {
    const std::uint64_t n = 1 + rng() % 200;
    const std::uint64_t np = 1 + rng() % n;
    const std::uint64_t nh = 1 + rng() % n;
    const std::uint64_t lo = np + nh > n ? np + nh - n : 1;
    const std::uint64_t hi = std::min(np, nh);
    if (lo > hi) continue;
    const std::uint64_t nph = lo + rng() % (hi - lo + 1);
    const double v = npmi(np, nh, nph, n);
    ASSERT_GE(v, -1.0);
    ASSERT_LE(v, 1.0);
    if (nph * n == np * nh && nph != n) ASSERT_EQ(v, 0.0);
    else if (nph != n) ASSERT_NE(v, 0.0);
  }
}

TEST(Connectivity, SingleUnigramPairHandFixture) {
  // Context of 4 words, response of 2; the only phrase pair is tea -> hot
  // with nPMI 1, so S_C = 1 * 1 * 1 / (4 * 2).
  auto corpus = make_corpus({{{"i have tea ."}, "hot ."}, {{"no ."}, "ok ."}});
  auto stats = CooccurrenceStats::build(corpus, default_stopwords());
  EXPECT_DOUBLE_EQ(npmi("tea", "hot", stats), 1.0);
  EXPECT_DOUBLE_EQ(coherence_connectivity(corpus.pairs[0], stats), 0.125);
  EmbeddingTable empty;
  EXPECT_DOUBLE_EQ(coherence_score(corpus.pairs[0], stats, empty, 0.5, 0.5), 0.0625);
}

TEST(Connectivity, ZeroWithoutPhrases) {
  auto corpus = make_corpus({{{"i do ."}, "ok ."}});
  auto stats = CooccurrenceStats::build(corpus, default_stopwords());
  EXPECT_EQ(coherence_connectivity(corpus.pairs[0], stats), 0.0);
}

TEST(Connectivity, CountsRespectInvariants) {
  auto stats = CooccurrenceStats::build(fixture(), default_stopwords());
  EXPECT_THROW(stats.set_counts("a", "b", 2, 2, 3), std::invalid_argument);
  EXPECT_THROW(stats.set_counts("a", "b", 21, 2, 1), std::invalid_argument);
  EXPECT_EQ(stats.joint_count("green tea", "green tea"), 3u);
  EXPECT_EQ(stats.context_count("green tea"), 3u);
}

TEST(Relatedness, IdenticalOrthogonalAntiParallel) {
  EmbeddingTable emb({"a", "b", "c"}, (Eigen::MatrixXd(3, 2) << 1, 0, 0, 1, -1, 0).finished());
  auto pair = [](std::string c, std::string r) { return make_corpus({{{c}, r}}).pairs[0]; };
  EXPECT_DOUBLE_EQ(relatedness(pair("a", "a"), emb), 1.0);
  EXPECT_DOUBLE_EQ(relatedness(pair("a", "b"), emb), 0.0);
  EXPECT_DOUBLE_EQ(relatedness(pair("a", "c"), emb), 0.0);
  EXPECT_DOUBLE_EQ(relatedness(pair("zz", "a"), emb), 0.0);
  EXPECT_DOUBLE_EQ(relatedness(pair("a c", "a"), emb), 0.0);  // zero-norm mean
}

TEST(CoherenceScore, WeightedSumAndValidation) {
  auto corpus = make_corpus({{{"a"}, "a"}});
  EmbeddingTable emb({"a"}, Eigen::MatrixXd::Ones(1, 1));
  auto stats = CooccurrenceStats::from_counts(1);
  EXPECT_DOUBLE_EQ(coherence_score(corpus.pairs[0], stats, emb, 0.0, 1.0), 1.0);
  EXPECT_THROW(coherence_score(corpus.pairs[0], stats, emb, -1.0, 1.0), std::invalid_argument);
}

TEST(SourceEntropy, ReferenceValues) {
  auto corpus = make_corpus({{{"a"}, "x"},
                             {{"a"}, "y"},
                             {{"b"}, "y"},
                             {{"a"}, "z"},
                             {{"a"}, "z"},
                             {{"b"}, "z"}});
  auto h = source_entropy(corpus);
  EXPECT_DOUBLE_EQ(h.at("x"), 0.0);
  EXPECT_NEAR(h.at("y"), std::log(2.0), 1e-15);
  EXPECT_NEAR(h.at("z"), 0.6365141682948128, 1e-12);
}

TEST(SourceEntropy, MergingDisjointCorporaKeepsValues) {
  auto a = make_corpus({{{"a"}, "x"}, {{"b"}, "x"}, {{"c"}, "y"}});
  auto b = make_corpus({{{"a"}, "z"}, {{"a"}, "z"}, {{"d"}, "w"}, {{"e"}, "w"}});
  auto merged = make_corpus({{{"a"}, "x"}, {{"b"}, "x"}, {{"c"}, "y"},
                             {{"a"}, "z"}, {{"a"}, "z"}, {{"d"}, "w"}, {{"e"}, "w"}});
  auto ha = source_entropy(a), hb = source_entropy(b), hm = source_entropy(merged);
  for (const auto& [r, v] : ha) EXPECT_EQ(hm.at(r), v);
  for (const auto& [r, v] : hb) EXPECT_EQ(hm.at(r), v);
}

TEST(Specificity, ExtremesAndMean) {
  // "c" is in every response (idf 0 = min); "a" and "b" are in one of three
  // (idf ln 3 = max).
  auto corpus = make_corpus({{{}, "a c"}, {{}, "b c"}, {{}, "c"}});
  auto idf = IdfTable::build(corpus);
  EXPECT_DOUBLE_EQ(idf.min_idf(), 0.0);
  EXPECT_DOUBLE_EQ(idf.max_idf(), std::log(3.0));
  EXPECT_DOUBLE_EQ(specificity_score({"c"}, idf), 0.0);
  EXPECT_DOUBLE_EQ(specificity_score({"a", "b"}, idf), 1.0);
  EXPECT_DOUBLE_EQ(specificity_score({"a", "c"}, idf), 0.5);
  EXPECT_DOUBLE_EQ(specificity_score({"unseen"}, idf), 1.0);
  EXPECT_DOUBLE_EQ(specificity_score({"a", "<eos>"}, idf), 1.0);
}

TEST(Specificity, DegenerateTableGivesHalf) {
  auto corpus = make_corpus({{{}, "a"}, {{}, "b"}});
  auto idf = IdfTable::build(corpus);
  EXPECT_DOUBLE_EQ(specificity_score({"a"}, idf), 0.5);
}

TEST(Specificity, PermutationInvariant) {
  auto idf = IdfTable::build(fixture());
  std::vector<std::string> r = {"green", "tea", "is", "my", "drink", "."};
  const double base = specificity_score(r, idf);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(r.begin(), r.end(), rng);
    EXPECT_DOUBLE_EQ(specificity_score(r, idf), base);
  }
}

TEST(ScoreCorpus, InformativenessOfUniqueResponsesIsZero) {
  auto s = score_corpus(make_corpus({{{"a"}, "x"}, {{"b"}, "y"}}), Attribute::kInformativeness);
  EXPECT_EQ(s.scores, (std::vector<double>{0.0, 0.0}));
}

TEST(ScoreCorpus, FixtureMatchesBruteForce) {
  const auto& c = fixture();
  const auto stop = default_stopwords();
  const oracle::Relatedness rel(c);
  ASSERT_LE(rel.vocabulary(), 64u);
  const auto coh = score_corpus(c, Attribute::kCoherence);
  const auto inf = score_corpus(c, Attribute::kInformativeness);
  const auto spe = score_corpus(c, Attribute::kSpecificity);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double expected_coh = 0.5 * oracle::connectivity(c, i, stop) + 0.5 * rel(c.pairs[i]);
    EXPECT_NEAR(coh.scores[i], expected_coh, 1e-9) << "pair " << i;
    EXPECT_NEAR(inf.scores[i], oracle::informativeness(c, i), 1e-9) << "pair " << i;
    EXPECT_NEAR(spe.scores[i], oracle::specificity(c, i), 1e-9) << "pair " << i;
  }
}

TEST(ScoreCorpus, ScoreFileRoundTripAndDeterminism) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto a = (dir / "cdl_scores_a.jsonl").string();
  const auto b = (dir / "cdl_scores_b.jsonl").string();
  save_scores(score_corpus(fixture(), Attribute::kCoherence), a, {{"corpus", fixture().checksum}});
  save_scores(score_corpus(fixture(), Attribute::kCoherence), b, {{"corpus", fixture().checksum}});
  EXPECT_EQ(file_checksum(a), file_checksum(b));
  auto loaded = load_scores(a);
  auto direct = score_corpus(fixture(), Attribute::kCoherence);
  EXPECT_EQ(loaded.attribute, Attribute::kCoherence);
  EXPECT_EQ(loaded.ids, direct.ids);
  EXPECT_EQ(loaded.scores, direct.scores);
}

TEST(ScoreCorpus, UnknownAttribute) {
  EXPECT_THROW(parse_attribute("fluency"), std::invalid_argument);
}

TEST(Embedding, TrainedTableIsFiniteAndCapped) {
  auto emb = EmbeddingTable::train(fixture(), 8, 20);
  EXPECT_EQ(emb.size(), 20u);
  EXPECT_EQ(emb.dim(), 8u);
  EXPECT_TRUE(emb.vectors().allFinite());
}
