#pragma once

// Reproducible synthetic ontologies and patient records with planted
// inter-visit progression structure.

#include <array>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "mera/error.hpp"
#include "mera/ontology.hpp"
#include "mera/records.hpp"
#include "mera/rng.hpp"

namespace mera {

struct IntRange {
  int min = 0;
  int max = 0;
};

struct GenConfig {
  std::uint64_t seed = 1;
  int n_patients = 500;
  int n_leaves = 200;
  int depth = 3;
  std::vector<int> branching{5, 4, 2};
  IntRange visits_per_patient{2, 5};
  IntRange codes_per_visit{2, 6};
  double progression_strength = 0.8;
  /// Index of the designated fine-level group (nested enumeration order).
  int target_group = 0;
  std::string ontology_name = "SYN";

  int fine_group_count() const {
    return std::accumulate(branching.begin(), branching.end(), 1, std::multiplies<>());
  }

  void validate() const {
    if (n_patients <= 0) throw ValidationError("gen: n_patients must be > 0");
    if (n_leaves <= 0) throw ValidationError("gen: n_leaves must be > 0");
    if (depth < 1) throw ValidationError("gen: depth must be >= 1");
    if (static_cast<int>(branching.size()) != depth) {
      throw ValidationError("gen: branching needs one entry per level");
    }
    for (int b : branching) {
      if (b < 1) throw ValidationError("gen: branching entries must be >= 1");
    }
    if (visits_per_patient.min < 2 || visits_per_patient.min > visits_per_patient.max) {
      throw ValidationError("gen: visits_per_patient needs 2 <= min <= max");
    }
    if (codes_per_visit.min < 1 || codes_per_visit.min > codes_per_visit.max) {
      throw ValidationError("gen: codes_per_visit needs 1 <= min <= max");
    }
    if (!(progression_strength >= 0.0 && progression_strength <= 1.0)) {
      throw ValidationError("gen: progression_strength must be in [0,1]");
    }
    if (target_group < 0 || target_group >= std::min(fine_group_count(), n_leaves)) {
      throw ValidationError("gen: target_group does not name a populated fine-level group");
    }
    if (ontology_name.empty() || detail::has_whitespace(ontology_name)) {
      throw ValidationError("gen: ontology_name must be a single word");
    }
  }
};

/// What the ontology generator decided, independent of the table it emits.
struct GeneratedOntology {
  Ontology ontology;
  /// Fine-group index (nested enumeration) of every leaf, in code order.
  std::vector<int> leaf_fine_group;
  /// Populated group count per level, level 0 included.
  std::vector<int> groups_per_level;
  std::string target_label;
};

namespace detail {

inline const std::vector<std::string>& level_words(int level) {
  static const std::array<std::vector<std::string>, 4> pools{{
      {"cardiac", "renal", "hepatic", "pulmonary", "neural", "dermal", "gastric", "ocular",
       "skeletal", "endocrine", "vascular", "hematic"},
      {"inflammation", "lesion", "insufficiency", "obstruction", "infection", "neoplasm",
       "degeneration", "hemorrhage"},
      {"acute", "chronic", "recurrent", "congenital", "secondary", "idiopathic"},
      {"alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"},
  }};
  return pools[static_cast<std::size_t>(std::min(level, 4) - 1)];
}

/// Sibling-distinct word for the `sibling`-th child at `level`.
inline std::string group_word(int level, int sibling) {
  const auto& pool = level_words(level);
  const auto n = static_cast<int>(pool.size());
  auto word = pool[static_cast<std::size_t>(sibling % n)];
  if (sibling >= n) word += std::to_string(sibling / n);
  return word;
}

inline std::string synthetic_code(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "S%03d.%d", i / 10, i % 10);
  return buf;
}

/// Sibling index per level (1..depth) of fine group `fine`.
inline std::vector<int> fine_group_path(const GenConfig& cfg, int fine) {
  std::vector<int> path(static_cast<std::size_t>(cfg.depth));
  for (int j = cfg.depth - 1; j >= 0; --j) {
    const int b = cfg.branching[static_cast<std::size_t>(j)];
    path[static_cast<std::size_t>(j)] = fine % b;
    fine /= b;
  }
  return path;
}

inline std::string words_through(const std::vector<int>& path, int level) {
  std::string out;
  for (int j = 1; j <= level; ++j) {
    if (j > 1) out += ' ';
    out += group_word(j, path[static_cast<std::size_t>(j - 1)]);
  }
  return out;
}

inline std::string group_label(const std::vector<int>& path, int level) {
  return words_through(path, level) + " disorders";
}

}  // namespace detail

inline GeneratedOntology generate_ontology_with_truth(const GenConfig& cfg) {
  cfg.validate();
  const int n = cfg.n_leaves;
  const int n_fine = cfg.fine_group_count();

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, 0x0A70));
  shuffle_in_place(order, rng);

  GeneratedOntology out;
  out.leaf_fine_group.assign(static_cast<std::size_t>(n), 0);
  std::vector<int> ordinal(static_cast<std::size_t>(n), 0);
  for (int k = 0; k < n; ++k) {
    const int leaf = order[static_cast<std::size_t>(k)];
    out.leaf_fine_group[static_cast<std::size_t>(leaf)] = k % n_fine;
    ordinal[static_cast<std::size_t>(leaf)] = k / n_fine + 1;
  }

  std::vector<OntologyRow> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto path = detail::fine_group_path(cfg, out.leaf_fine_group[static_cast<std::size_t>(i)]);
    OntologyRow row;
    row.code = detail::synthetic_code(i);
    row.definition = detail::words_through(path, cfg.depth) + " type " +
                     std::to_string(ordinal[static_cast<std::size_t>(i)]);
    for (int j = 1; j <= cfg.depth; ++j) row.group_labels.push_back(detail::group_label(path, j));
    rows.push_back(std::move(row));
  }
  out.ontology = Ontology::from_rows(cfg.ontology_name, cfg.depth, rows);

  for (int j = 0; j <= cfg.depth; ++j) {
    out.groups_per_level.push_back(static_cast<int>(out.ontology.group_count(j)));
  }
  out.target_label = detail::group_label(detail::fine_group_path(cfg, cfg.target_group), cfg.depth);
  return out;
}

inline Ontology generate_ontology(const GenConfig& cfg) {
  return generate_ontology_with_truth(cfg).ontology;
}

namespace detail {

/// Draws one code from `pool` that is not yet in `chosen`; -1 if exhausted.
inline int draw_new(Rng& rng, const std::vector<int>& pool, const std::set<int>& chosen) {
  std::vector<int> open;
  for (int c : pool) {
    if (!chosen.contains(c)) open.push_back(c);
  }
  if (open.empty()) return -1;
  return open[uniform_index(rng, open.size())];
}

inline int draw_uniform_new(Rng& rng, int n, const std::set<int>& chosen) {
  while (true) {
    const int c = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n)));
    if (!chosen.contains(c)) return c;
  }
}

}  // namespace detail

/// Mixture used for every code after the first visit:
///  - with probability (1 - progression_strength): uniform noise;
///  - otherwise persistence of a previous-visit code, a sibling of one in its
///    fine-level group, or a member of the patient's hidden trajectory group.
/// The first visit draws from the trajectory group with probability
/// progression_strength, uniformly otherwise.
inline std::vector<PatientRecord> generate_records(const GenConfig& cfg, const Ontology& o) {
  cfg.validate();
  constexpr double kPersist = 0.35;
  constexpr double kSibling = 0.35;

  const int n_codes = static_cast<int>(o.size());
  const int fine_level = o.depth();
  const int n_fine = static_cast<int>(o.group_count(fine_level));
  std::vector<int> fine_of(static_cast<std::size_t>(n_codes));
  for (int c = 0; c < n_codes; ++c) {
    fine_of[static_cast<std::size_t>(c)] = o.groups_of_leaf(c)[static_cast<std::size_t>(fine_level)].index;
  }

  std::vector<PatientRecord> out;
  out.reserve(static_cast<std::size_t>(cfg.n_patients));
  for (int p = 0; p < cfg.n_patients; ++p) {
    char id[32];
    std::snprintf(id, sizeof id, "P%05d", p + 1);
    Rng rng(derive_seed(cfg.seed, 0x9A7, static_cast<std::uint64_t>(p)));

    const int trajectory = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n_fine)));
    const auto& trajectory_pool = o.members(GroupId{fine_level, trajectory});
    const int n_visits = uniform_int(rng, cfg.visits_per_patient.min, cfg.visits_per_patient.max);

    std::vector<std::vector<int>> visits;
    for (int t = 0; t < n_visits; ++t) {
      const int size = std::min(n_codes, uniform_int(rng, cfg.codes_per_visit.min, cfg.codes_per_visit.max));
      std::set<int> chosen;
      std::vector<int> previous;
      std::vector<int> sibling_pool;
      if (t > 0) {
        previous = visits.back();
        std::set<int> fines;
        for (int c : previous) fines.insert(fine_of[static_cast<std::size_t>(c)]);
        for (int f : fines) {
          for (int c : o.members(GroupId{fine_level, f})) sibling_pool.push_back(c);
        }
      }
      while (static_cast<int>(chosen.size()) < size) {
        int code = -1;
        if (uniform_real(rng) < cfg.progression_strength) {
          if (t == 0) {
            code = detail::draw_new(rng, trajectory_pool, chosen);
          } else {
            const double r = uniform_real(rng);
            const std::array<const std::vector<int>*, 3> pools{&previous, &sibling_pool, &trajectory_pool};
            const std::size_t first = r < kPersist ? 0 : (r < kPersist + kSibling ? 1 : 2);
            for (std::size_t k = 0; k < pools.size() && code < 0; ++k) {
              code = detail::draw_new(rng, *pools[(first + k) % pools.size()], chosen);
            }
          }
        }
        if (code < 0) code = detail::draw_uniform_new(rng, n_codes, chosen);
        chosen.insert(code);
      }
      visits.emplace_back(chosen.begin(), chosen.end());
    }

    PatientRecord rec{id, {}};
    for (const auto& v : visits) {
      std::vector<CodeId> codes;
      for (int c : v) codes.push_back(o.code(c));
      rec.visits.push_back(Visit::of(std::move(codes)));
    }
    out.push_back(std::move(rec));
  }
  std::sort(out.begin(), out.end(),
            [](const PatientRecord& a, const PatientRecord& b) { return a.patient_id < b.patient_id; });
  return out;
}

struct SplitRatios {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
};

struct PatientSplits {
  std::vector<PatientRecord> train;
  std::vector<PatientRecord> dev;
  std::vector<PatientRecord> test;
};

/// Patient-level split; each output list is sorted by patient_id.
inline PatientSplits split_by_patient(const std::vector<PatientRecord>& records, SplitRatios ratios,
                                      std::uint64_t seed) {
  const double total = ratios.train + ratios.dev + ratios.test;
  if (ratios.train < 0 || ratios.dev < 0 || ratios.test < 0 || std::abs(total - 1.0) > 1e-9) {
    throw ValidationError("split ratios must be non-negative and sum to 1");
  }
  const int n = static_cast<int>(records.size());
  const int wanted = (ratios.train > 0) + (ratios.dev > 0) + (ratios.test > 0);
  if (n < wanted) throw ValidationError("fewer patients than splits");

  auto count_for = [n](double r) {
    if (r <= 0) return 0;
    return std::max(1, static_cast<int>(std::lround(r * n)));
  };
  const int n_dev = count_for(ratios.dev);
  const int n_test = count_for(ratios.test);
  const int n_train = n - n_dev - n_test;
  if (n_train < 0 || (ratios.train > 0 && n_train < 1)) throw ValidationError("fewer patients than splits");

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5B117));
  shuffle_in_place(order, rng);

  PatientSplits s;
  for (int i = 0; i < n; ++i) {
    const auto& rec = records[order[static_cast<std::size_t>(i)]];
    if (i < n_train) {
      s.train.push_back(rec);
    } else if (i < n_train + n_dev) {
      s.dev.push_back(rec);
    } else {
      s.test.push_back(rec);
    }
  }
  auto by_id = [](const PatientRecord& a, const PatientRecord& b) { return a.patient_id < b.patient_id; };
  std::sort(s.train.begin(), s.train.end(), by_id);
  std::sort(s.dev.begin(), s.dev.end(), by_id);
  std::sort(s.test.begin(), s.test.end(), by_id);
  return s;
}

}  // namespace mera
