#pragma once

// Closed whitespace-level vocabulary with one dedicated token per leaf code.

#include <cctype>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mera/error.hpp"
#include "mera/ontology.hpp"

namespace mera {

/// Splits on whitespace and peels trailing `?`, `:`, `,`, `;` into their own tokens.
inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      std::string_view word = text.substr(i, j - i);
      std::vector<std::string> tail;
      while (word.size() > 1 && std::string_view("?:,;").find(word.back()) != std::string_view::npos) {
        tail.emplace_back(1, word.back());
        word.remove_suffix(1);
      }
      out.emplace_back(word);
      out.insert(out.end(), tail.rbegin(), tail.rend());
    }
    i = j;
  }
  return out;
}

/// Token ids: leaf codes in ontology order (token id == leaf index), then
/// EOV, pad, bos, eos, then text words by first appearance.
class Vocabulary {
 public:
  static constexpr std::string_view kEov = "<EOV>";
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";

  Vocabulary() = default;

  static Vocabulary build(const Ontology& o, const std::vector<std::string>& corpora) {
    std::vector<std::string> surfaces;
    surfaces.reserve(o.size() + 4);
    for (const auto& leaf : o.leaves()) surfaces.push_back(leaf.code);
    for (auto s : {kEov, kPad, kBos, kEos}) surfaces.emplace_back(s);
    Vocabulary v = from_surfaces(std::move(surfaces));
    for (const auto& text : corpora) {
      for (auto& word : tokenize_words(text)) {
        if (!v.index_.contains(word)) v.add(std::move(word));
      }
    }
    return v;
  }

  /// Rebuilds from an id-ordered surface list; ids before `<EOV>` are codes.
  static Vocabulary from_surfaces(std::vector<std::string> surfaces) {
    Vocabulary v;
    int eov = -1;
    for (std::size_t i = 0; i < surfaces.size(); ++i) {
      if (surfaces[i] == kEov) {
        eov = static_cast<int>(i);
        break;
      }
    }
    if (eov < 1 || surfaces.size() < static_cast<std::size_t>(eov) + 4 ||
        surfaces[static_cast<std::size_t>(eov) + 1] != kPad ||
        surfaces[static_cast<std::size_t>(eov) + 2] != kBos ||
        surfaces[static_cast<std::size_t>(eov) + 3] != kEos) {
      throw ValidationError("vocabulary: expected codes followed by <EOV> <pad> <bos> <eos>");
    }
    v.n_codes_ = eov;
    for (auto& s : surfaces) {
      if (v.index_.contains(s)) throw ValidationError("vocabulary: duplicate surface '" + s + "'");
      v.add(std::move(s));
    }
    return v;
  }

  int size() const { return static_cast<int>(surfaces_.size()); }
  int n_codes() const { return n_codes_; }
  /// Candidate set for restricted distributions: all codes plus EOV.
  int n_candidates() const { return n_codes_ + 1; }
  int eov() const { return n_codes_; }
  int pad() const { return n_codes_ + 1; }
  int bos() const { return n_codes_ + 2; }
  int eos() const { return n_codes_ + 3; }
  bool is_code(int id) const { return id >= 0 && id < n_codes_; }

  const std::string& surface(int id) const {
    if (id < 0 || id >= size()) throw ValidationError("token id out of range: " + std::to_string(id));
    return surfaces_[static_cast<std::size_t>(id)];
  }
  const std::vector<std::string>& surfaces() const { return surfaces_; }

  std::optional<int> find(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int code_token(std::string_view code) const {
    auto id = find(code);
    if (!id || !is_code(*id)) throw ValidationError("code not in vocabulary: " + std::string(code));
    return *id;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& word : tokenize_words(text)) {
      auto id = find(word);
      if (!id) throw ValidationError("word not in vocabulary: '" + word + "'");
      out.push_back(*id);
    }
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (!out.empty()) out += ' ';
      out += surface(id);
    }
    return out;
  }

  bool operator==(const Vocabulary& other) const { return surfaces_ == other.surfaces_; }

 private:
  void add(std::string s) {
    index_.emplace(s, static_cast<int>(surfaces_.size()));
    surfaces_.push_back(std::move(s));
  }

  int n_codes_ = 0;
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, int> index_;
};

/// `vocab.tsv`: one `id<TAB>surface` row per token.
inline void save_vocabulary_tsv(const Vocabulary& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (int i = 0; i < v.size(); ++i) out << i << '\t' << v.surface(i) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

inline Vocabulary load_vocabulary_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> surfaces;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ValidationError("vocab.tsv: malformed row '" + line + "'");
    if (std::stoul(line.substr(0, tab)) != surfaces.size()) {
      throw ValidationError("vocab.tsv: ids must be dense and ascending");
    }
    surfaces.push_back(line.substr(tab + 1));
  }
  return Vocabulary::from_surfaces(std::move(surfaces));
}

}  // namespace mera
