#include "space/tokenizer.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace space {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<int>(i));
    require(inserted, "duplicate token '" + tokens_[i] + "' in vocabulary");
  }
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open vocabulary file " + path.string());
  nlohmann::json j;
  in >> j;
  return Vocab(j.at("tokens").get<std::vector<std::string>>());
}

void Vocab::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["tokens"] = tokens_;
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write vocabulary file " + path.string());
  out << j.dump(2) << "\n";
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  require(it != index_.end(), "token '" + token + "' not in vocabulary");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  require(id >= 0 && id < size(), "token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) ids.push_back(id(word));
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

}  // namespace space
