#include "cdl/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cdl/error.hpp"
#include "cdl/text.hpp"

namespace cdl {

namespace {

const char* const kReservedNames[special::kCount] = {"<pad>", "<bos>", "<eos>", "<unk>",
                                                     "<sep>"};

DialoguePair make_pair(std::uint32_t id, std::vector<std::string> context, std::string response) {
  DialoguePair pair;
  pair.id = id;
  pair.context = std::move(context);
  pair.response = std::move(response);
  for (const auto& utterance : pair.context) pair.context_tokens.push_back(tokenize(utterance));
  pair.response_tokens = tokenize(pair.response);
  return pair;
}

}  // namespace

std::vector<std::string> DialoguePair::flat_context() const {
  std::vector<std::string> out;
  for (const auto& utterance : context_tokens) out.insert(out.end(), utterance.begin(), utterance.end());
  return out;
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path);
  Corpus corpus;
  std::string line;
  std::string all;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    all += line;
    all += '\n';
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = [&] { return path + ":" + std::to_string(line_no) + ": "; };
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where() + "malformed record: " + e.what());
    }
    if (!record.is_object() || !record.contains("context") || !record.contains("response") ||
        !record["context"].is_array() || !record["response"].is_string()) {
      throw DataError(where() + "record needs a context array and a response string");
    }
    std::vector<std::string> context;
    for (const auto& u : record["context"]) {
      if (!u.is_string()) throw DataError(where() + "context entries must be strings");
      context.push_back(u.get<std::string>());
    }
    auto pair = make_pair(static_cast<std::uint32_t>(corpus.pairs.size()), std::move(context),
                          record["response"].get<std::string>());
    if (pair.response_tokens.empty()) throw DataError(where() + "empty response");
    corpus.pairs.push_back(std::move(pair));
  }
  if (in.bad()) throw DataError("read failure on " + path);
  if (corpus.pairs.empty()) throw DataError("empty corpus " + path);
  corpus.checksum = hex64(fnv1a(all));
  return corpus;
}

Corpus make_corpus(const std::vector<std::pair<std::vector<std::string>, std::string>>& records) {
  Corpus corpus;
  std::string all;
  for (const auto& [context, response] : records) {
    auto pair = make_pair(static_cast<std::uint32_t>(corpus.pairs.size()), context, response);
    if (pair.response_tokens.empty())
      throw DataError("record " + std::to_string(pair.id) + ": empty response");
    all += nlohmann::json{{"context", context}, {"response", response}}.dump();
    all += '\n';
    corpus.pairs.push_back(std::move(pair));
  }
  if (corpus.pairs.empty()) throw DataError("empty corpus");
  corpus.checksum = hex64(fnv1a(all));
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& pair : corpus.pairs) {
    nlohmann::json record = {{"context", pair.context}, {"response", pair.response}};
    out << record.dump() << '\n';
  }
}

Vocabulary::Vocabulary() {
  for (const char* name : kReservedNames) add(name);
}

TokenId Vocabulary::add(const std::string& token) {
  auto [it, inserted] = to_id_.emplace(token, static_cast<TokenId>(to_token_.size()));
  if (inserted) to_token_.push_back(token);
  return it->second;
}

TokenId Vocabulary::id(const std::string& token) const {
  auto it = to_id_.find(token);
  return it == to_id_.end() ? special::kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= to_token_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return to_token_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocabulary::frequency(const std::string& token) const {
  auto it = freq_.find(token);
  return it == freq_.end() ? 0 : it->second;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (std::size_t i = 0; i < to_token_.size(); ++i)
    out << to_token_[i] << '\t' << i << '\t' << frequency(to_token_[i]) << '\n';
  for (const auto& [token, count] : freq_)
    if (!contains(token)) out << token << '\t' << -1 << '\t' << count << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary " + path);
  std::vector<std::string> tokens;
  std::map<std::string, std::uint64_t> freq;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string token, id_field, freq_field;
    if (!std::getline(fields, token, '\t') || !std::getline(fields, id_field, '\t') ||
        !std::getline(fields, freq_field)) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected token<TAB>id<TAB>freq");
    }
    long long id = 0;
    unsigned long long count = 0;
    try {
      id = std::stoll(id_field);
      count = std::stoull(freq_field);
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(line_no) + ": bad number");
    }
    if (line_no <= special::kCount) {
      if (token != kReservedNames[line_no - 1] || id != static_cast<long long>(line_no - 1))
        throw DataError(path + ": reserved header mismatch at line " + std::to_string(line_no));
      continue;
    }
    if (count > 0) freq[token] = count;
    if (id >= 0) {
      if (id != static_cast<long long>(tokens.size() + special::kCount))
        throw DataError(path + ":" + std::to_string(line_no) + ": ids must be consecutive");
      tokens.push_back(token);
    }
  }
  if (line_no < special::kCount) throw DataError(path + ": missing reserved header");
  return vocab_from_tokens(tokens, freq);
}

Vocabulary build_vocab(const Corpus& corpus, std::uint64_t min_freq) {
  if (corpus.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  if (min_freq < 1) throw std::invalid_argument("min_freq must be >= 1");
  Vocabulary vocab;
  for (const auto& pair : corpus.pairs) {
    for (const auto& utterance : pair.context_tokens)
      for (const auto& t : utterance) ++vocab.freq_[t];
    for (const auto& t : pair.response_tokens) ++vocab.freq_[t];
  }
  std::vector<std::pair<std::string, std::uint64_t>> kept;
  for (const auto& entry : vocab.freq_)
    if (entry.second >= min_freq) kept.push_back(entry);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& entry : kept) vocab.add(entry.first);
  return vocab;
}

Vocabulary vocab_from_tokens(const std::vector<std::string>& tokens,
                             const std::map<std::string, std::uint64_t>& freq) {
  Vocabulary vocab;
  for (const auto& t : tokens) {
    if (vocab.contains(t)) throw DataError("duplicate vocabulary token '" + t + "'");
    vocab.add(t);
  }
  vocab.freq_ = freq;
  return vocab;
}

EncodedPair encode(const DialoguePair& pair, const Vocabulary& vocab, std::size_t max_context_len,
                   std::size_t max_response_len) {
  if (max_context_len < 1 || max_response_len < 1)
    throw std::invalid_argument("maximum lengths must be positive");
  EncodedPair out;
  out.id = pair.id;
  for (std::size_t u = 0; u < pair.context_tokens.size(); ++u) {
    if (u) out.context_ids.push_back(special::kSep);
    for (const auto& t : pair.context_tokens[u]) out.context_ids.push_back(vocab.id(t));
  }
  if (out.context_ids.empty()) out.context_ids.push_back(special::kSep);
  if (out.context_ids.size() > max_context_len)
    out.context_ids.erase(out.context_ids.begin(),
                          out.context_ids.end() - static_cast<std::ptrdiff_t>(max_context_len));
  for (const auto& t : pair.response_tokens) {
    if (out.response_ids.size() + 1 >= max_response_len) break;
    out.response_ids.push_back(vocab.id(t));
  }
  out.response_ids.push_back(special::kEos);
  return out;
}

std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocabulary& vocab,
                                       std::size_t max_context_len,
                                       std::size_t max_response_len) {
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (const auto& pair : corpus.pairs)
    out.push_back(encode(pair, vocab, max_context_len, max_response_len));
  return out;
}

std::vector<std::string> decode(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (TokenId id : ids) {
    if (id == special::kPad || id == special::kBos || id == special::kEos) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

}  // namespace cdl
