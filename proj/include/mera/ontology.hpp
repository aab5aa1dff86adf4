#pragma once

// Hierarchical code ontology: leaf codes with definitions, nested groups per
// level, and the table format used to store them.

#include <algorithm>
#include <cctype>
#include <compare>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mera/error.hpp"

namespace mera {

using CodeId = std::string;

/// A group node: `level` 0 is the root, `index` is the position within its level.
struct GroupId {
  int level = 0;
  int index = 0;
  auto operator<=>(const GroupId&) const = default;
};

/// One table row before validation.
struct OntologyRow {
  CodeId code;
  std::string definition;
  std::vector<std::string> group_labels;  // levels 1..depth
};

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      return out;
    }
    out.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline bool has_whitespace(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace detail

class Ontology {
 public:
  struct Leaf {
    CodeId code;
    std::string definition;
  };

  struct Group {
    std::string label;
    int parent = -1;           // index at level - 1, -1 for the root
    std::vector<int> members;  // leaf indices, ascending
  };

  static constexpr std::string_view kDefaultName = "ICD-9";

  Ontology() = default;

  /// Validates and indexes `rows`. Group identity at level j is its label;
  /// indices follow first appearance in row order.
  static Ontology from_rows(std::string name, int depth, const std::vector<OntologyRow>& rows) {
    if (depth < 1) throw ValidationError("ontology depth must be >= 1");
    if (rows.empty()) throw ValidationError("ontology has no leaves");
    Ontology o;
    o.name_ = std::move(name);
    o.depth_ = depth;
    o.levels_.resize(static_cast<std::size_t>(depth) + 1);
    o.levels_[0].push_back(Group{"root", -1, {}});
    std::vector<std::unordered_map<std::string, int>> label_index(o.levels_.size());

    for (const auto& row : rows) {
      if (row.code.empty() || detail::has_whitespace(row.code)) {
        throw ValidationError("malformed row: invalid code '" + row.code + "'");
      }
      if (row.definition.empty()) {
        throw ValidationError("malformed row: empty definition for code " + row.code);
      }
      if (static_cast<int>(row.group_labels.size()) != depth) {
        throw ValidationError("malformed row: code " + row.code + " has " +
                              std::to_string(row.group_labels.size()) + " group columns, expected " +
                              std::to_string(depth));
      }
      if (auto it = o.code_index_.find(row.code); it != o.code_index_.end()) {
        const auto& prior = o.leaf_groups_[static_cast<std::size_t>(it->second)];
        for (int j = 1; j <= depth; ++j) {
          const auto& prior_label =
              o.levels_[static_cast<std::size_t>(j)][static_cast<std::size_t>(prior[static_cast<std::size_t>(j)])].label;
          if (prior_label != row.group_labels[static_cast<std::size_t>(j - 1)]) {
            throw ValidationError("group not a partition: code " + row.code +
                                  " assigned to both '" + prior_label + "' and '" +
                                  row.group_labels[static_cast<std::size_t>(j - 1)] + "' at level " +
                                  std::to_string(j));
          }
        }
        throw ValidationError("duplicate code " + row.code);
      }
      if (o.def_index_.contains(row.definition)) {
        throw ValidationError("duplicate definition '" + row.definition + "'");
      }

      const int leaf = static_cast<int>(o.leaves_.size());
      std::vector<int> path(static_cast<std::size_t>(depth) + 1, 0);
      for (int j = 1; j <= depth; ++j) {
        const auto& label = row.group_labels[static_cast<std::size_t>(j - 1)];
        if (label.empty()) {
          throw ValidationError("orphan group: code " + row.code + " has an empty label at level " +
                                std::to_string(j));
        }
        const int parent = path[static_cast<std::size_t>(j - 1)];
        auto& index = label_index[static_cast<std::size_t>(j)];
        auto& level = o.levels_[static_cast<std::size_t>(j)];
        auto [it, inserted] = index.try_emplace(label, static_cast<int>(level.size()));
        if (inserted) {
          level.push_back(Group{label, parent, {}});
        } else if (level[static_cast<std::size_t>(it->second)].parent != parent) {
          throw ValidationError("orphan group: '" + label + "' at level " + std::to_string(j) +
                                " nests under more than one level-" + std::to_string(j - 1) +
                                " group");
        }
        path[static_cast<std::size_t>(j)] = it->second;
      }

      o.code_index_.emplace(row.code, leaf);
      o.def_index_.emplace(row.definition, leaf);
      o.leaves_.push_back(Leaf{row.code, row.definition});
      for (int j = 0; j <= depth; ++j) {
        o.levels_[static_cast<std::size_t>(j)][static_cast<std::size_t>(path[static_cast<std::size_t>(j)])]
            .members.push_back(leaf);
      }
      o.leaf_groups_.push_back(std::move(path));
    }
    o.check_partition();
    return o;
  }

  const std::string& name() const { return name_; }
  int depth() const { return depth_; }
  std::size_t size() const { return leaves_.size(); }
  const std::vector<Leaf>& leaves() const { return leaves_; }
  const CodeId& code(int leaf) const { return leaves_.at(static_cast<std::size_t>(leaf)).code; }

  bool contains(std::string_view code) const { return code_index_.contains(std::string(code)); }

  int index_of(std::string_view code) const {
    auto it = code_index_.find(std::string(code));
    if (it == code_index_.end()) throw ValidationError("unknown code " + std::string(code));
    return it->second;
  }

  const std::string& definition_of(std::string_view code) const {
    return leaves_[static_cast<std::size_t>(index_of(code))].definition;
  }

  const CodeId& code_of(std::string_view definition) const {
    auto it = def_index_.find(std::string(definition));
    if (it == def_index_.end()) {
      throw ValidationError("unknown definition '" + std::string(definition) + "'");
    }
    return leaves_[static_cast<std::size_t>(it->second)].code;
  }

  std::size_t group_count(int level) const { return levels_.at(static_cast<std::size_t>(level)).size(); }

  const Group& group(GroupId g) const {
    if (g.level < 0 || g.level > depth_ || g.index < 0 ||
        g.index >= static_cast<int>(levels_[static_cast<std::size_t>(g.level)].size())) {
      throw ValidationError("unknown group (" + std::to_string(g.level) + "," +
                            std::to_string(g.index) + ")");
    }
    return levels_[static_cast<std::size_t>(g.level)][static_cast<std::size_t>(g.index)];
  }

  /// One group per level 0..depth, each containing `code`.
  std::vector<GroupId> groups_of(std::string_view code) const { return groups_of_leaf(index_of(code)); }

  std::vector<GroupId> groups_of_leaf(int leaf) const {
    const auto& path = leaf_groups_.at(static_cast<std::size_t>(leaf));
    std::vector<GroupId> out;
    out.reserve(path.size());
    for (std::size_t j = 0; j < path.size(); ++j) out.push_back(GroupId{static_cast<int>(j), path[j]});
    return out;
  }

  /// Leaf indices of `g`, ascending.
  const std::vector<int>& members(GroupId g) const { return group(g).members; }

  std::vector<CodeId> group_members(GroupId g) const {
    std::vector<CodeId> out;
    for (int leaf : members(g)) out.push_back(code(leaf));
    return out;
  }

  GroupId find_group(int level, std::string_view label) const {
    if (level < 0 || level > depth_) throw ValidationError("level out of range");
    const auto& groups = levels_[static_cast<std::size_t>(level)];
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (groups[i].label == label) return GroupId{level, static_cast<int>(i)};
    }
    throw ValidationError("unknown group '" + std::string(label) + "' at level " + std::to_string(level));
  }

  std::vector<OntologyRow> rows() const {
    std::vector<OntologyRow> out;
    out.reserve(leaves_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      OntologyRow row{leaves_[i].code, leaves_[i].definition, {}};
      for (int j = 1; j <= depth_; ++j) {
        row.group_labels.push_back(
            levels_[static_cast<std::size_t>(j)][static_cast<std::size_t>(leaf_groups_[i][static_cast<std::size_t>(j)])].label);
      }
      out.push_back(std::move(row));
    }
    return out;
  }

 private:
  void check_partition() const {
    const std::size_t n = leaves_.size();
    for (std::size_t j = 0; j < levels_.size(); ++j) {
      std::vector<int> seen(n, 0);
      for (const auto& g : levels_[j]) {
        if (g.members.empty()) throw ValidationError("group not a partition: empty group " + g.label);
        for (int leaf : g.members) ++seen[static_cast<std::size_t>(leaf)];
      }
      if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
        throw ValidationError("group not a partition at level " + std::to_string(j));
      }
    }
  }

  std::string name_{kDefaultName};
  int depth_ = 0;
  std::vector<Leaf> leaves_;
  std::vector<std::vector<Group>> levels_;
  std::vector<std::vector<int>> leaf_groups_;
  std::unordered_map<std::string, int> code_index_;
  std::unordered_map<std::string, int> def_index_;
};

// ---------------------------------------------------------------------------
// Table format: `#depth=N` header (optional `#name=...`), then one
// tab-separated row per leaf: code, definition, group label per level.

inline Ontology parse_ontology(std::istream& in) {
  int depth = -1;
  std::string name{Ontology::kDefaultName};
  std::vector<OntologyRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(1, eq - 1);
      const auto value = line.substr(eq + 1);
      if (key == "depth") {
        try {
          std::size_t used = 0;
          depth = std::stoi(value, &used);
          if (used != value.size()) throw std::invalid_argument(value);
        } catch (const std::exception&) {
          throw ValidationError("malformed header: depth '" + value + "'");
        }
      } else if (key == "name") {
        name = value;
      }
      continue;
    }
    if (depth < 1) throw ValidationError("malformed table: missing #depth header before line " + std::to_string(line_no));
    auto fields = detail::split(line, '\t');
    if (static_cast<int>(fields.size()) != depth + 2) {
      throw ValidationError("malformed row at line " + std::to_string(line_no) + ": expected " +
                            std::to_string(depth + 2) + " fields, got " + std::to_string(fields.size()));
    }
    OntologyRow row{fields[0], fields[1], {}};
    row.group_labels.assign(fields.begin() + 2, fields.end());
    rows.push_back(std::move(row));
  }
  if (depth < 1) throw ValidationError("malformed table: missing #depth header");
  return Ontology::from_rows(std::move(name), depth, rows);
}

inline Ontology load_ontology(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ontology table " + path);
  return parse_ontology(in);
}

inline std::string format_ontology(const Ontology& o) {
  std::ostringstream out;
  out << "#depth=" << o.depth() << '\n';
  out << "#name=" << o.name() << '\n';
  for (const auto& row : o.rows()) {
    out << row.code << '\t' << row.definition;
    for (const auto& g : row.group_labels) out << '\t' << g;
    out << '\n';
  }
  return out.str();
}

inline void save_ontology(const Ontology& o, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write ontology table " + path);
  out << format_ontology(o);
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace mera
