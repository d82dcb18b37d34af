#include "cdl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cdl/error.hpp"

namespace cdl {

namespace {

constexpr char kMagic[] = "CDLCKPT1";

void append_floats(std::string& payload, const ag::Matrix& m) {
  const std::size_t start = payload.size();
  payload.resize(start + static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(m.data()[i]);
    for (int b = 0; b < 4; ++b)
      payload[start + static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(b)] =
          static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
}

ag::Matrix read_floats(const std::string& payload, std::size_t offset, Eigen::Index rows,
                       Eigen::Index cols) {
  const auto count = static_cast<std::size_t>(rows * cols);
  if (offset + count * 4 > payload.size()) throw DataError("checkpoint tensor exceeds payload");
  ag::Matrix m(rows, cols);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(
                  payload[offset + i * 4 + static_cast<std::size_t>(b)]))
              << (8 * b);
    m.data()[i] = std::bit_cast<float>(bits);
  }
  return m;
}

}  // namespace

nlohmann::json config_to_json(const BranchConfig& c) {
  return {{"layers_enc", c.layers_enc},
          {"layers_dec", c.layers_dec},
          {"heads", c.heads},
          {"d_model", c.d_model},
          {"d_ffn", c.d_ffn},
          {"dropout", c.dropout},
          {"max_context_len", c.max_context_len},
          {"max_response_len", c.max_response_len},
          {"vocab_size", c.vocab_size}};
}

BranchConfig config_from_json(const nlohmann::json& j) {
  BranchConfig c;
  c.layers_enc = j.at("layers_enc").get<std::size_t>();
  c.layers_dec = j.at("layers_dec").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ffn = j.at("d_ffn").get<std::size_t>();
  c.dropout = j.at("dropout").get<float>();
  c.max_context_len = j.at("max_context_len").get<std::size_t>();
  c.max_response_len = j.at("max_response_len").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  const auto& group = checkpoint.group;
  if (!checkpoint.optimizers.empty() && checkpoint.optimizers.size() != group.size())
    throw std::invalid_argument("one optimizer per branch expected");

  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  auto add_tensor = [&](const std::string& name, const ag::Matrix& m) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", payload.size()}});
    append_floats(payload, m);
  };

  nlohmann::json branches = nlohmann::json::array();
  for (std::size_t b = 0; b < group.size(); ++b) {
    branches.push_back(group[b].tag().describe());
    for (const auto& p : group[b].parameters())
      add_tensor("branch" + std::to_string(b) + "/" + p.name, p.value);
  }
  nlohmann::json optimizer = nlohmann::json::array();
  for (std::size_t b = 0; b < checkpoint.optimizers.size(); ++b) {
    const auto& opt = checkpoint.optimizers[b];
    const auto& params = group[b].parameters();
    optimizer.push_back({{"steps", opt.steps()},
                         {"lr", opt.config().lr},
                         {"beta1", opt.config().beta1},
                         {"beta2", opt.config().beta2},
                         {"eps", opt.config().eps},
                         {"clip_norm", opt.config().clip_norm}});
    for (std::size_t i = 0; i < params.size(); ++i) {
      add_tensor("adam" + std::to_string(b) + "/m/" + params[i].name, opt.first_moments()[i]);
      add_tensor("adam" + std::to_string(b) + "/v/" + params[i].name, opt.second_moments()[i]);
    }
  }

  std::vector<std::string> tokens;
  for (std::size_t i = special::kCount; i < checkpoint.vocab.size(); ++i)
    tokens.push_back(checkpoint.vocab.token(static_cast<TokenId>(i)));

  nlohmann::json header = {{"format", "cdl-checkpoint"},
                           {"version", 1},
                           {"config", config_to_json(group.config())},
                           {"branches", branches},
                           {"vocab", {{"tokens", tokens}, {"freq", checkpoint.vocab.frequencies()}}},
                           {"optimizer", optimizer},
                           {"state", checkpoint.state},
                           {"tensors", tensors}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << kMagic << '\n' << text.size() << '\n' << text << payload;
  if (!out) throw DataError("write failure on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string magic;
  std::getline(in, magic);
  if (magic != kMagic) throw DataError(path + ": not a checkpoint");
  std::string length_line;
  std::getline(in, length_line);
  std::size_t header_len = 0;
  try {
    header_len = std::stoul(length_line);
  } catch (const std::exception&) {
    throw DataError(path + ": bad header length");
  }
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::size_t>(in.gcount()) != header_len) throw DataError(path + ": truncated");
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    const BranchConfig config = config_from_json(header.at("config"));
    std::vector<BranchTag> tags;
    for (const auto& t : header.at("branches")) tags.push_back(BranchTag::parse(t.get<std::string>()));

    std::map<std::string, ag::Matrix> tensors;
    for (const auto& t : header.at("tensors")) {
      const auto shape = t.at("shape");
      tensors.emplace(t.at("name").get<std::string>(),
                      read_floats(payload, t.at("offset").get<std::size_t>(),
                                  shape.at(0).get<Eigen::Index>(), shape.at(1).get<Eigen::Index>()));
    }
    auto take = [&](const std::string& name, const ag::Matrix& like) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw DataError(path + ": missing tensor " + name);
      if (it->second.rows() != like.rows() || it->second.cols() != like.cols())
        throw DataError(path + ": shape mismatch for " + name);
      return it->second;
    };

    ck.group = BranchGroup(config, tags, 0);
    for (std::size_t b = 0; b < ck.group.size(); ++b)
      for (auto& p : ck.group[b].parameters())
        p.value = take("branch" + std::to_string(b) + "/" + p.name, p.value);

    const auto& optimizer = header.at("optimizer");
    for (std::size_t b = 0; b < optimizer.size(); ++b) {
      const auto& o = optimizer.at(b);
      AdamConfig ac;
      ac.lr = o.at("lr").get<float>();
      ac.beta1 = o.at("beta1").get<float>();
      ac.beta2 = o.at("beta2").get<float>();
      ac.eps = o.at("eps").get<float>();
      ac.clip_norm = o.at("clip_norm").get<float>();
      auto& params = ck.group[b].parameters();
      Adam opt(ac, params);
      opt.set_steps(o.at("steps").get<std::uint64_t>());
      for (std::size_t i = 0; i < params.size(); ++i) {
        opt.first_moments()[i] = take("adam" + std::to_string(b) + "/m/" + params[i].name, params[i].value);
        opt.second_moments()[i] = take("adam" + std::to_string(b) + "/v/" + params[i].name, params[i].value);
      }
      ck.optimizers.push_back(std::move(opt));
    }

    const auto& vocab = header.at("vocab");
    ck.vocab = vocab_from_tokens(vocab.at("tokens").get<std::vector<std::string>>(),
                                 vocab.at("freq").get<std::map<std::string, std::uint64_t>>());
    if (ck.vocab.size() != config.vocab_size)
      throw DataError(path + ": vocabulary size disagrees with the model config");
    ck.state = header.at("state");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(path + ": " + e.what());
  }
  return ck;
}

}  // namespace cdl
