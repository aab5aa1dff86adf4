#pragma once

// Reference implementations used only by tests. They share no code with the
// library's loss and softmax routines: long double, no max shift, explicit sets.

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mera/ontology.hpp"
#include "mera/rng.hpp"

namespace oracle {

/// Random nested hierarchy: label[level][code] for levels 1..depth, as path strings.
struct Hierarchy {
  int n_codes = 0;
  int depth = 0;
  std::vector<std::vector<std::string>> label;  // label[0] unused (root)

  mera::Ontology ontology() const {
    std::vector<mera::OntologyRow> rows;
    for (int c = 0; c < n_codes; ++c) {
      mera::OntologyRow r;
      r.code = "C" + std::to_string(c);
      r.definition = "definition of code " + std::to_string(c);
      for (int j = 1; j <= depth; ++j) r.group_labels.push_back(label[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)]);
      rows.push_back(std::move(r));
    }
    return mera::Ontology::from_rows("TOY", depth, rows);
  }
};

inline Hierarchy random_hierarchy(mera::Rng& rng, int max_codes, int max_depth) {
  Hierarchy h;
  h.n_codes = mera::uniform_int(rng, 1, max_codes);
  h.depth = mera::uniform_int(rng, 1, max_depth);
  h.label.assign(static_cast<std::size_t>(h.depth) + 1, std::vector<std::string>(static_cast<std::size_t>(h.n_codes)));
  for (int c = 0; c < h.n_codes; ++c) {
    std::string path = "g";
    for (int j = 1; j <= h.depth; ++j) {
      path += "_" + std::to_string(mera::uniform_int(rng, 0, 2));
      h.label[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)] = path;
    }
  }
  return h;
}

inline std::vector<long double> softmax(const std::vector<double>& z) {
  std::vector<long double> e(z.size());
  long double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(z[i]));
    s += e[i];
  }
  for (auto& v : e) v /= s;
  return e;
}

/// Hierarchical contrastive loss straight from the definition: for every level
/// (root included) and every group at that level holding a positive,
/// -log(sum of positive probs / sum of group probs). EOV (last entry) never counts.
inline long double cl_loss(const std::vector<long double>& p, const Hierarchy& h, const std::set<int>& positives) {
  long double total = 0;
  for (int level = 0; level <= h.depth; ++level) {
    std::set<std::string> groups;
    for (int c : positives) groups.insert(level == 0 ? "root" : h.label[static_cast<std::size_t>(level)][static_cast<std::size_t>(c)]);
    for (const auto& g : groups) {
      long double pos = 0, all = 0;
      for (int c = 0; c < h.n_codes; ++c) {
        const bool in = level == 0 || h.label[static_cast<std::size_t>(level)][static_cast<std::size_t>(c)] == g;
        if (!in) continue;
        all += p[static_cast<std::size_t>(c)];
        if (positives.count(c)) pos += p[static_cast<std::size_t>(c)];
      }
      total -= std::log(pos / all);
    }
  }
  return total;
}

/// Threshold loss: positives want p >= p_EOV, every other code wants p <= p_EOV.
inline long double dce_loss(const std::vector<long double>& p, const std::set<int>& positives) {
  const int n = static_cast<int>(p.size()) - 1;
  const long double eov = p.back();
  long double total = 0;
  for (int c = 0; c < n; ++c) {
    const long double gap = positives.count(c) ? eov - p[static_cast<std::size_t>(c)] : p[static_cast<std::size_t>(c)] - eov;
    total += std::log(1.0L + std::max(0.0L, gap));
  }
  return total;
}

/// Mean token-level cross-entropy, one full-vocabulary softmax per row.
inline long double ce_loss(const std::vector<std::vector<double>>& rows, const std::vector<int>& targets) {
  long double total = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) total -= std::log(softmax(rows[r])[static_cast<std::size_t>(targets[r])]);
  return total / static_cast<long double>(rows.size());
}

/// Five-point central difference of f at coordinate i of x.
inline double central_diff(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                           std::size_t i, double h) {
  const double x0 = x[i];
  auto at = [&](double d) {
    x[i] = x0 + d;
    return f(x);
  };
  return (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
}

/// Same stencil over a long double reference; h should be a power of two so the steps are exact.
inline double central_diff_ld(const std::function<long double(const std::vector<double>&)>& f, std::vector<double> x,
                              std::size_t i, double h) {
  const double x0 = x[i];
  auto at = [&](double d) {
    x[i] = x0 + d;
    return f(x);
  };
  return static_cast<double>((at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12.0L * h));
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace oracle
