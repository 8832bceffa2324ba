#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "space/common.hpp"

namespace space {

// Word-level tokenizer over a fixed vocabulary. The vocabulary is built once
// by the data generator and saved to a JSON file; encoding an unknown word is
// an error.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(const std::string& text) const;  // whitespace-split words
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

}  // namespace space
