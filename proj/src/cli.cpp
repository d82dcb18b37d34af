#include "cdl/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdl/checkpoint.hpp"
#include "cdl/corpus.hpp"
#include "cdl/error.hpp"
#include "cdl/eval.hpp"
#include "cdl/scoring.hpp"
#include "cdl/selection.hpp"
#include "cdl/text.hpp"
#include "cdl/trainer.hpp"

namespace cdl::cli {

namespace {

struct ScoreArgs {
  std::string corpus, attribute, out;
  ScoringConfig scoring;
};

struct SplitArgs {
  std::string scores, out;
  double ratio = 0.7;
};

struct TrainArgs {
  std::string config, train, valid, checkpoint, log, attributes;
  std::uint64_t seed = 0;
  std::size_t max_epochs = 0;
  std::vector<std::string> set;
  bool no_attributes = false, no_orthogonal = false, no_nd_hidden = false, no_nd = false;
};

struct GenerateArgs {
  std::string checkpoint, corpus, out;
  std::size_t beam = 5, max_len = 0, branch = 0;
};

struct EvaluateArgs {
  std::string hypotheses, references, train, checkpoint, out;
  std::uint64_t lf_threshold = 100;
};

struct DiversityArgs {
  std::string checkpoint, probe, out;
  std::size_t batch_size = 64;
};

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  return f;
}

void print_resolved(std::ostream& out, const CLI::App& sub) {
  out << "# resolved " << sub.get_name() << " config\n" << sub.config_to_str(true, false);
}

int do_score(const ScoreArgs& a, std::ostream& out) {
  const auto attribute = parse_attribute(a.attribute);
  const auto corpus = load_corpus(a.corpus);
  const auto scores = score_corpus(corpus, attribute, a.scoring);
  save_scores(scores, a.out,
              {{"corpus_checksum", corpus.checksum},
               {"alpha", format_double(a.scoring.alpha)},
               {"beta", format_double(a.scoring.beta)},
               {"embedding_dim", std::to_string(a.scoring.embedding_dim)},
               {"embedding_vocab", std::to_string(a.scoring.embedding_vocab)}});
  out << "scored " << scores.ids.size() << " pairs -> " << a.out << '\n';
  return kOk;
}

int do_split(const SplitArgs& a, std::ostream& out) {
  if (!(a.ratio > 0.0 && a.ratio <= 1.0)) throw std::invalid_argument("ratio must be in (0, 1]");
  const auto scores = load_scores(a.scores);
  auto subset = build_subset(scores, a.ratio);
  subset.scores_checksum = file_checksum(a.scores);
  save_subset(subset, a.out);
  out << "kept " << subset.ids.size() << " of " << scores.ids.size() << " pairs -> " << a.out
      << '\n';
  return kOk;
}

int do_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out) {
  TrainConfig config = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  for (const auto& kv : a.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value: " + kv);
    set_train_option(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };
  if (given("--train")) config.train_path = a.train;
  if (given("--valid")) config.valid_path = a.valid;
  if (given("--checkpoint")) config.checkpoint_path = a.checkpoint;
  if (given("--log")) config.log_path = a.log;
  if (given("--seed")) config.seed = a.seed;
  if (given("--max-epochs")) config.max_epochs = a.max_epochs;
  if (given("--attributes")) set_train_option(config, "attributes", a.attributes);
  if (a.no_attributes) config.ablation.no_attributes = true;
  if (a.no_orthogonal) config.ablation.no_orthogonal = true;
  if (a.no_nd_hidden) config.ablation.no_nd_hidden = true;
  if (a.no_nd) config.ablation.no_nd = true;
  if (config.checkpoint_path.empty()) throw std::invalid_argument("a checkpoint path is required");
  config.validate();

  out << "# resolved train config\n" << describe(config);
  out.flush();
  const auto data = load_train_data(config);
  std::ofstream log_file;
  if (!config.log_path.empty()) log_file = open_out(config.log_path);
  const auto result = fit(config, data, config.log_path.empty() ? nullptr : &log_file);
  save_checkpoint(result.best, config.checkpoint_path);
  out << "steps " << result.steps << ", best epoch " << result.best_epoch;
  if (result.best_epoch > 0)
    out << ", valid loss " << format_double(result.valid_losses[result.best_epoch - 1]);
  out << (result.stopped_early ? ", stopped early" : "") << '\n';
  return kOk;
}

int do_generate(const GenerateArgs& a, std::ostream& out) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto corpus = load_corpus(a.corpus);
  if (a.branch >= ck.group.size()) throw std::invalid_argument("no such branch");
  const auto& branch = ck.group[a.branch];
  const auto& cfg = ck.group.config();
  BeamOptions opts;
  opts.beam = a.beam;
  opts.max_len = a.max_len == 0 ? cfg.max_response_len : a.max_len;
  auto file = open_out(a.out);
  nlohmann::json meta = {{"checkpoint_checksum", file_checksum(a.checkpoint)},
                         {"corpus_checksum", corpus.checksum},
                         {"branch", branch.tag().describe()},
                         {"beam", opts.beam},
                         {"max_len", opts.max_len}};
  file << nlohmann::json{{"meta", meta}}.dump() << '\n';
  for (const auto& pair : corpus.pairs) {
    const auto enc = encode(pair, ck.vocab, cfg.max_context_len, cfg.max_response_len);
    const auto tokens = decode(beam_search(branch, enc.context_ids, opts), ck.vocab);
    file << nlohmann::json{{"id", pair.id}, {"response", join(tokens)}, {"tokens", tokens}}.dump()
         << '\n';
  }
  out << "generated " << corpus.size() << " responses -> " << a.out << '\n';
  return kOk;
}

TokenLists load_hypotheses(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open hypotheses " + path);
  TokenLists out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("meta")) continue;
      if (j.contains("tokens")) out.push_back(j.at("tokens").get<std::vector<std::string>>());
      else out.push_back(tokenize(j.at("response").get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

int do_evaluate(const EvaluateArgs& a, std::ostream& out) {
  EvalInputs in;
  in.hypotheses = load_hypotheses(a.hypotheses);
  const auto refs = load_corpus(a.references);
  const auto train = load_corpus(a.train);
  for (const auto& p : refs.pairs) {
    in.references.push_back(p.response_tokens);
    in.contexts.push_back(p.flat_context());
  }
  for (const auto& p : train.pairs) in.train_responses.push_back(p.response_tokens);
  in.train_frequencies = build_vocab(train).frequencies();
  in.lf_threshold = a.lf_threshold;

  nlohmann::json provenance = {{"hypotheses_checksum", file_checksum(a.hypotheses)},
                               {"references_checksum", refs.checksum},
                               {"train_checksum", train.checksum},
                               {"lf_threshold", a.lf_threshold}};
  EmbeddingTable emb;
  if (!a.checkpoint.empty()) {
    const auto ck = load_checkpoint(a.checkpoint);
    emb = branch_embeddings(ck.group.master(), ck.vocab);
    in.embeddings = &emb;
    provenance["checkpoint_checksum"] = file_checksum(a.checkpoint);
    provenance["embedding_source"] = "master input embeddings";
  } else {
    provenance["embedding_source"] = "none";
  }
  const auto report = evaluate(in);
  const nlohmann::json doc = {{"metrics", report.to_json()}, {"provenance", provenance}};
  auto file = open_out(a.out);
  file << doc.dump(2) << '\n';
  out << report.to_json().dump(2) << '\n';
  return kOk;
}

int do_diversity(const DiversityArgs& a, std::ostream& out) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto probe = load_corpus(a.probe);
  const auto& cfg = ck.group.config();
  const auto encoded = encode_corpus(probe, ck.vocab, cfg.max_context_len, cfg.max_response_len);
  const double value = branch_l2(ck.group, encoded, a.batch_size);
  out << "branch_l2 = " << format_double(value) << '\n';
  if (!a.out.empty()) {
    auto file = open_out(a.out);
    file << nlohmann::json{{"branch_l2", value},
                           {"branches", ck.group.size()},
                           {"checkpoint_checksum", file_checksum(a.checkpoint)},
                           {"probe_checksum", probe.checksum}}
                .dump(2)
         << '\n';
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Collaborative multi-branch dialogue generation toolkit", "cdl"};
  app.require_subcommand(1, 1);

  ScoreArgs score;
  auto* s = app.add_subcommand("score", "Score every pair of a corpus on one attribute");
  s->add_option("--corpus", score.corpus, "Input corpus (JSON lines)")->required();
  s->add_option("--attribute", score.attribute, "coherence | informativeness | specificity")
      ->required();
  s->add_option("--out", score.out, "Output score file")->required();
  s->add_option("--alpha", score.scoring.alpha, "Weight of key-phrase connectivity")
      ->capture_default_str();
  s->add_option("--beta", score.scoring.beta, "Weight of embedding relatedness")
      ->capture_default_str();
  s->add_option("--embedding-dim", score.scoring.embedding_dim, "Word-vector dimension")
      ->capture_default_str();
  s->add_option("--embedding-vocab", score.scoring.embedding_vocab, "Word-vector vocabulary cap")
      ->capture_default_str();

  SplitArgs split;
  auto* sp = app.add_subcommand("split", "Select the top-scoring share of a corpus");
  sp->add_option("--scores", split.scores, "Score file")->required();
  sp->add_option("--ratio", split.ratio, "Share of pairs to keep, in (0, 1]")
      ->capture_default_str();
  sp->add_option("--out", split.out, "Output subset index")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a branch group");
  t->add_option("--config", train.config, "Key-value config file");
  t->add_option("--set", train.set, "Override one config key (key=value), repeatable");
  t->add_option("--train", train.train, "Training corpus");
  t->add_option("--valid", train.valid, "Validation corpus");
  t->add_option("--checkpoint", train.checkpoint, "Output checkpoint");
  t->add_option("--log", train.log, "Loss log (CSV)");
  t->add_option("--seed", train.seed, "Random seed");
  t->add_option("--max-epochs", train.max_epochs, "Epoch limit");
  t->add_option("--attributes", train.attributes, "Comma-separated auxiliary attributes or none");
  t->add_flag("--no-attributes", train.no_attributes, "Auxiliaries fit the full batch");
  t->add_flag("--no-orthogonal", train.no_orthogonal, "Hidden ND without orthogonal rejection");
  t->add_flag("--no-nd-hidden", train.no_nd_hidden, "Drop the hidden-state ND term");
  t->add_flag("--no-nd", train.no_nd, "Drop both ND terms");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Decode responses with beam search");
  g->add_option("--checkpoint", gen.checkpoint, "Checkpoint")->required();
  g->add_option("--corpus", gen.corpus, "Input corpus")->required();
  g->add_option("--out", gen.out, "Output hypotheses file")->required();
  g->add_option("--beam", gen.beam, "Beam width")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--max-len", gen.max_len, "Decoding steps (0: model maximum)")
      ->capture_default_str();
  g->add_option("--branch", gen.branch, "Branch index (0 is the master)")->capture_default_str();

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Compute the automatic metrics");
  e->add_option("--hypotheses", ev.hypotheses, "Hypotheses file")->required();
  e->add_option("--references", ev.references, "Reference corpus")->required();
  e->add_option("--train", ev.train, "Training corpus")->required();
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint for AVE/COH embeddings");
  e->add_option("--out", ev.out, "Output report")->required();
  e->add_option("--lf-threshold", ev.lf_threshold, "Low-frequency threshold")
      ->capture_default_str();

  DiversityArgs div;
  auto* d = app.add_subcommand("diversity", "Mean pairwise L2 distance between branches");
  d->add_option("--checkpoint", div.checkpoint, "Checkpoint")->required();
  d->add_option("--probe", div.probe, "Probe corpus")->required();
  d->add_option("--batch-size", div.batch_size, "Probe batch size")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  d->add_option("--out", div.out, "Optional JSON output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (s->parsed()) {
      print_resolved(out, *s);
      return do_score(score, out);
    }
    if (sp->parsed()) {
      print_resolved(out, *sp);
      return do_split(split, out);
    }
    if (t->parsed()) return do_train(train, *t, out);
    if (g->parsed()) {
      print_resolved(out, *g);
      return do_generate(gen, out);
    }
    if (e->parsed()) {
      print_resolved(out, *e);
      return do_evaluate(ev, out);
    }
    print_resolved(out, *d);
    return do_diversity(div, out);
  } catch (const NumericalError& ex) {
    err << "numerical abort: " << ex.what() << '\n';
    return kNumerical;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& ex) {
    err << "usage error: " << ex.what() << '\n';
    return kUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kData;
  }
}

}  // namespace cdl::cli
