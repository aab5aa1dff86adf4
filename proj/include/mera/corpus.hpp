#pragma once

// Training instances for both stages: memorization question/answer pairs
// and next-visit sequence pairs with order perturbation and teacher forcing.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mera/error.hpp"
#include "mera/ontology.hpp"
#include "mera/records.hpp"
#include "mera/rng.hpp"
#include "mera/vocabulary.hpp"

namespace mera {

struct CorpusConfig {
  std::string instruction =
      "The task is to predict the diagnosis codes for the next patient visit given the patient "
      "diagnosis history.";
  std::string visit_prompt = "The diagnosis codes for this visit are:";
  int n_perturb = 2;
  std::uint64_t seed = 1;
};

enum class InstanceKind { kMemCode2Def, kMemDef2Code, kMemCode2Group, kDiagnosis };

inline std::string_view to_string(InstanceKind k) {
  switch (k) {
    case InstanceKind::kMemCode2Def: return "mem_code2def";
    case InstanceKind::kMemDef2Code: return "mem_def2code";
    case InstanceKind::kMemCode2Group: return "mem_code2group";
    case InstanceKind::kDiagnosis: return "diagnosis";
  }
  return "?";
}

inline InstanceKind parse_instance_kind(std::string_view s) {
  for (auto k : {InstanceKind::kMemCode2Def, InstanceKind::kMemDef2Code, InstanceKind::kMemCode2Group,
                 InstanceKind::kDiagnosis}) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown instance kind '" + std::string(s) + "'");
}

/// One contrastive term: a group containing at least one positive.
/// Codes are leaf indices (equal to their token ids).
struct GroupTerm {
  GroupId group;
  std::vector<int> positives;  // ascending, subset of members
  std::vector<int> members;    // ascending
  bool operator==(const GroupTerm&) const = default;
};

struct DiagnosisSupervision {
  std::vector<int> positives;     // ascending
  std::vector<int> known_prefix;  // conditioning order
  std::vector<GroupTerm> group_terms;
  bool operator==(const DiagnosisSupervision&) const = default;
};

struct TrainingInstance {
  std::vector<int> input_ids;
  std::vector<int> completion_ids;
  InstanceKind kind = InstanceKind::kDiagnosis;
  std::optional<DiagnosisSupervision> supervision;

  /// Sequence index whose next-token distribution the supervision scores.
  int supervised_position() const { return static_cast<int>(input_ids.size()) - 1; }
  std::vector<int> full_sequence() const {
    auto seq = input_ids;
    seq.insert(seq.end(), completion_ids.begin(), completion_ids.end());
    return seq;
  }
};

/// Group terms over every level for the given positives (levels ascending, then index).
inline DiagnosisSupervision make_supervision(const Ontology& o, std::vector<int> positives,
                                             std::vector<int> known_prefix = {}) {
  std::sort(positives.begin(), positives.end());
  DiagnosisSupervision sup;
  for (int level = 0; level <= o.depth(); ++level) {
    std::vector<int> groups;
    for (int c : positives) groups.push_back(o.groups_of_leaf(c)[static_cast<std::size_t>(level)].index);
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    for (int g : groups) {
      GroupTerm term{GroupId{level, g}, {}, o.members(GroupId{level, g})};
      for (int c : positives) {
        if (o.groups_of_leaf(c)[static_cast<std::size_t>(level)].index == g) term.positives.push_back(c);
      }
      sup.group_terms.push_back(std::move(term));
    }
  }
  sup.positives = std::move(positives);
  sup.known_prefix = std::move(known_prefix);
  return sup;
}

// ---------------------------------------------------------------------------
// Text templates

inline std::string code2def_question(const Ontology& o, const CodeId& c) {
  return "What is the definition of " + o.name() + " code " + c + "?";
}

inline std::string def2code_question(const Ontology& o, const std::string& definition) {
  return "What is the " + o.name() + " code with the definition " + definition + "?";
}

inline std::string code2group_question(const Ontology& o, const CodeId& c, int level) {
  const std::string level_name = level == 1 ? "chapter level" : "level-" + std::to_string(level);
  return "What is the " + level_name + " disease group of the " + o.name() + " code " + c + "?";
}

/// Every piece of text the corpus can emit, in deterministic order.
inline std::vector<std::string> corpus_texts(const Ontology& o, const CorpusConfig& cfg) {
  std::vector<std::string> texts{cfg.instruction, cfg.visit_prompt};
  for (const auto& leaf : o.leaves()) {
    texts.push_back(code2def_question(o, leaf.code));
    texts.push_back(leaf.definition);
    texts.push_back(def2code_question(o, leaf.definition));
    for (int level = 1; level <= o.depth(); ++level) {
      texts.push_back(code2group_question(o, leaf.code, level));
      texts.push_back(o.group(o.groups_of(leaf.code)[static_cast<std::size_t>(level)]).label);
    }
  }
  return texts;
}

inline Vocabulary build_vocabulary(const Ontology& o, const CorpusConfig& cfg) {
  return Vocabulary::build(o, corpus_texts(o, cfg));
}

// ---------------------------------------------------------------------------
// Memorization

/// Per leaf: code->definition, definition->code, then code->group for levels 1..depth.
inline std::vector<TrainingInstance> memorization_pairs(const Ontology& o, const Vocabulary& vocab) {
  std::vector<TrainingInstance> out;
  out.reserve(o.size() * static_cast<std::size_t>(2 + o.depth()));
  auto question = [&](const std::string& text) {
    std::vector<int> ids{vocab.bos()};
    const auto body = vocab.encode(text);
    ids.insert(ids.end(), body.begin(), body.end());
    return ids;
  };
  auto answer = [&](const std::string& text) {
    auto ids = vocab.encode(text);
    ids.push_back(vocab.eos());
    return ids;
  };
  for (int leaf = 0; leaf < static_cast<int>(o.size()); ++leaf) {
    const auto& code = o.code(leaf);
    const auto& def = o.leaves()[static_cast<std::size_t>(leaf)].definition;
    out.push_back({question(code2def_question(o, code)), answer(def), InstanceKind::kMemCode2Def, {}});
    out.push_back({question(def2code_question(o, def)), {vocab.code_token(code)}, InstanceKind::kMemDef2Code,
                   make_supervision(o, {leaf})});
    for (int level = 1; level <= o.depth(); ++level) {
      const auto& label = o.group(o.groups_of_leaf(leaf)[static_cast<std::size_t>(level)]).label;
      out.push_back({question(code2group_question(o, code, level)), answer(label), InstanceKind::kMemCode2Group, {}});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Next-visit pairs

/// Prompt phrase, the codes in the given order, then EOV.
inline std::vector<int> verbalize_visit(const Vocabulary& vocab, const CorpusConfig& cfg,
                                        std::span<const CodeId> ordered_codes) {
  auto ids = vocab.encode(cfg.visit_prompt);
  for (const auto& c : ordered_codes) ids.push_back(vocab.code_token(c));
  ids.push_back(vocab.eov());
  return ids;
}

/// Overload checking that `order` is a permutation of the visit's codes.
inline std::vector<int> verbalize_visit(const Vocabulary& vocab, const CorpusConfig& cfg, const Visit& v,
                                        std::span<const CodeId> order) {
  std::vector<CodeId> sorted(order.begin(), order.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted != v.codes) throw ValidationError("verbalize_visit: order is not a permutation of the visit");
  return verbalize_visit(vocab, cfg, order);
}

inline std::vector<int> instruction_ids(const Vocabulary& vocab, const CorpusConfig& cfg) {
  std::vector<int> ids{vocab.bos()};
  const auto body = vocab.encode(cfg.instruction);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

namespace detail {

inline std::vector<CodeId> permuted(const Visit& v, std::uint64_t seed, bool canonical) {
  auto codes = v.codes;
  if (!canonical) {
    Rng rng(seed);
    shuffle_in_place(codes, rng);
  }
  return codes;
}

}  // namespace detail

/// (T-1) * n_perturb^2 instances ordered by (k, input variant, output variant).
/// Variant 0 on either side keeps the canonical (sorted) order.
inline std::vector<TrainingInstance> seq2seq_pairs(const PatientRecord& p, const Ontology& o,
                                                   const Vocabulary& vocab, const CorpusConfig& cfg) {
  if (p.visits.size() < 2) throw ValidationError("seq2seq_pairs needs at least 2 visits");
  if (cfg.n_perturb < 1) throw ValidationError("n_perturb must be >= 1");
  const auto patient_seed = derive_seed(cfg.seed, hash_string(p.patient_id));
  const auto n = static_cast<std::size_t>(cfg.n_perturb);
  const auto head = instruction_ids(vocab, cfg);

  std::vector<TrainingInstance> out;
  for (std::size_t k = 1; k < p.visits.size(); ++k) {
    std::vector<std::vector<int>> inputs;
    for (std::size_t a = 0; a < n; ++a) {
      auto ids = head;
      for (std::size_t t = 0; t < k; ++t) {
        const auto order = detail::permuted(p.visits[t], derive_seed(patient_seed, k, a, t), a == 0);
        const auto seg = verbalize_visit(vocab, cfg, order);
        ids.insert(ids.end(), seg.begin(), seg.end());
      }
      inputs.push_back(std::move(ids));
    }
    const auto& target = p.visits[k];
    std::vector<int> positives;
    for (const auto& c : target.codes) positives.push_back(o.index_of(c));
    const auto sup = make_supervision(o, positives);
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        const auto order = detail::permuted(target, derive_seed(patient_seed, k, 0xC0DE + b), b == 0);
        out.push_back({inputs[a], verbalize_visit(vocab, cfg, order), InstanceKind::kDiagnosis, sup});
      }
    }
  }
  return out;
}

/// |V| variants moving m = 0..|V|-1 leading target codes (and the prompt
/// phrase) into the input; those codes leave every positive set.
inline std::vector<TrainingInstance> teacher_forcing_variants(const TrainingInstance& inst, const Ontology& o,
                                                              const Vocabulary& vocab) {
  if (inst.kind != InstanceKind::kDiagnosis) throw ValidationError("teacher forcing applies to diagnosis instances");
  const auto& comp = inst.completion_ids;
  if (comp.empty() || comp.back() != vocab.eov()) throw ValidationError("diagnosis completion must end with EOV");
  std::size_t first_code = 0;
  while (first_code < comp.size() && !vocab.is_code(comp[first_code])) ++first_code;
  std::vector<int> codes;
  for (std::size_t i = first_code; i + 1 < comp.size(); ++i) {
    if (!vocab.is_code(comp[i])) throw ValidationError("diagnosis completion has a non-code token after the codes");
    codes.push_back(comp[i]);
  }
  if (codes.empty()) throw ValidationError("diagnosis completion has no codes");

  std::vector<TrainingInstance> out;
  out.reserve(codes.size());
  for (std::size_t m = 0; m < codes.size(); ++m) {
    TrainingInstance v;
    v.kind = InstanceKind::kDiagnosis;
    v.input_ids = inst.input_ids;
    v.input_ids.insert(v.input_ids.end(), comp.begin(), comp.begin() + static_cast<std::ptrdiff_t>(first_code + m));
    v.completion_ids.assign(comp.begin() + static_cast<std::ptrdiff_t>(first_code + m), comp.end());
    std::vector<int> prefix(codes.begin(), codes.begin() + static_cast<std::ptrdiff_t>(m));
    std::vector<int> remaining(codes.begin() + static_cast<std::ptrdiff_t>(m), codes.end());
    v.supervision = make_supervision(o, std::move(remaining), std::move(prefix));
    out.push_back(std::move(v));
  }
  return out;
}

/// All teacher-forcing variants for every patient, in record order.
inline std::vector<TrainingInstance> diagnosis_instances(const std::vector<PatientRecord>& records,
                                                         const Ontology& o, const Vocabulary& vocab,
                                                         const CorpusConfig& cfg) {
  std::vector<TrainingInstance> out;
  for (const auto& p : records) {
    for (const auto& inst : seq2seq_pairs(p, o, vocab, cfg)) {
      for (auto& v : teacher_forcing_variants(inst, o, vocab)) out.push_back(std::move(v));
    }
  }
  return out;
}

struct HistoryInput {
  std::vector<int> ids;
  bool truncated = false;
};

/// Decoding prompt: instruction, the verbalized history (canonical order),
/// then the visit prompt phrase. Oldest visits are dropped until
/// `ids.size() + reserve <= max_len`.
inline HistoryInput history_input(const Vocabulary& vocab, const CorpusConfig& cfg,
                                  std::span<const Visit> history, int max_len, int reserve) {
  const auto head = instruction_ids(vocab, cfg);
  const auto prompt = vocab.encode(cfg.visit_prompt);
  std::vector<std::vector<int>> segments;
  for (const auto& v : history) segments.push_back(verbalize_visit(vocab, cfg, v.codes));

  HistoryInput out;
  std::size_t first = 0;
  auto length_from = [&](std::size_t start) {
    std::size_t n = head.size() + prompt.size();
    for (std::size_t i = start; i < segments.size(); ++i) n += segments[i].size();
    return n;
  };
  while (first < segments.size() && static_cast<int>(length_from(first)) + reserve > max_len) ++first;
  out.truncated = first > 0;
  out.ids = head;
  for (std::size_t i = first; i < segments.size(); ++i) out.ids.insert(out.ids.end(), segments[i].begin(), segments[i].end());
  out.ids.insert(out.ids.end(), prompt.begin(), prompt.end());
  if (static_cast<int>(out.ids.size()) > max_len) {
    throw ValidationError("instruction and visit prompt alone exceed max_seq_len");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instance files: one JSON object per line; codes by string id, groups by (level, index).

inline nlohmann::json instance_to_json(const TrainingInstance& inst, const Ontology& o) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(inst.kind));
  j["input_ids"] = inst.input_ids;
  j["completion_ids"] = inst.completion_ids;
  if (inst.supervision) {
    const auto& s = *inst.supervision;
    auto codes = [&](const std::vector<int>& leaves) {
      nlohmann::json a = nlohmann::json::array();
      for (int c : leaves) a.push_back(o.code(c));
      return a;
    };
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& t : s.group_terms) {
      groups.push_back({{"level", t.group.level}, {"index", t.group.index}, {"positives", codes(t.positives)}});
    }
    j["supervision"] = {{"positives", codes(s.positives)}, {"known_prefix", codes(s.known_prefix)}, {"groups", groups}};
  }
  return j;
}

inline TrainingInstance instance_from_json(const nlohmann::json& j, const Ontology& o, const Vocabulary& vocab) {
  TrainingInstance inst;
  try {
    inst.kind = parse_instance_kind(j.at("kind").get<std::string>());
    inst.input_ids = j.at("input_ids").get<std::vector<int>>();
    inst.completion_ids = j.at("completion_ids").get<std::vector<int>>();
    for (int id : inst.input_ids) vocab.surface(id);
    for (int id : inst.completion_ids) vocab.surface(id);
    if (inst.completion_ids.empty()) throw ValidationError("instance with empty completion");
    if (j.contains("supervision")) {
      const auto& s = j.at("supervision");
      auto leaves = [&](const nlohmann::json& a) {
        std::vector<int> out;
        for (const auto& c : a) out.push_back(o.index_of(c.get<std::string>()));
        return out;
      };
      DiagnosisSupervision sup;
      sup.positives = leaves(s.at("positives"));
      sup.known_prefix = leaves(s.at("known_prefix"));
      for (const auto& g : s.at("groups")) {
        const GroupId id{g.at("level").get<int>(), g.at("index").get<int>()};
        sup.group_terms.push_back(GroupTerm{id, leaves(g.at("positives")), o.members(id)});
      }
      inst.supervision = std::move(sup);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed instance: ") + e.what());
  }
  return inst;
}

inline void save_instances(const std::vector<TrainingInstance>& instances, const Ontology& o, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& inst : instances) out << instance_to_json(inst, o).dump() << '\n';
  if (!out) throw IoError("write failed for " + path);
}

inline std::vector<TrainingInstance> load_instances(const std::string& path, const Ontology& o, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<TrainingInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed instance line: ") + e.what());
    }
    out.push_back(instance_from_json(j, o, vocab));
  }
  return out;
}

}  // namespace mera
