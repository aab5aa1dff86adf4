#pragma once

// Evaluation metrics: recall@k over ranked predictions, support-weighted F1
// over codes, ROC AUC and thresholded F1 for the binary task.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mera/error.hpp"
#include "mera/ontology.hpp"

namespace mera {

/// |top-k ∩ gold| / |gold|. A list shorter than k is used as-is.
inline double recall_at_k(std::span<const CodeId> ranked, const std::set<CodeId>& gold, int k) {
  if (k <= 0) throw ValidationError("recall_at_k: k must be positive");
  if (gold.empty()) throw ValidationError("recall_at_k: empty gold set");
  const auto limit = std::min(ranked.size(), static_cast<std::size_t>(k));
  std::set<CodeId> seen;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < limit; ++i) {
    if (gold.contains(ranked[i]) && seen.insert(ranked[i]).second) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

/// Per-code F1 pooled over patients, averaged with weights proportional to
/// gold support. Codes that never occur in gold are excluded.
inline double weighted_f1(const std::vector<std::set<CodeId>>& predicted, const std::vector<std::set<CodeId>>& gold) {
  if (predicted.size() != gold.size()) throw ValidationError("weighted_f1: misaligned inputs");
  if (gold.empty()) throw ValidationError("weighted_f1: empty evaluation set");
  struct Counts {
    long tp = 0, fp = 0, fn = 0;
  };
  std::map<CodeId, Counts> counts;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    for (const auto& c : predicted[i]) {
      if (gold[i].contains(c)) {
        ++counts[c].tp;
      } else {
        ++counts[c].fp;
      }
    }
    for (const auto& c : gold[i]) {
      if (!predicted[i].contains(c)) ++counts[c].fn;
    }
  }
  double weighted = 0.0;
  long support = 0;
  for (const auto& [code, k] : counts) {
    const long s = k.tp + k.fn;
    if (s == 0) continue;
    const double denom = 2.0 * static_cast<double>(k.tp) + static_cast<double>(k.fp + k.fn);
    const double f1 = denom > 0 ? 2.0 * static_cast<double>(k.tp) / denom : 0.0;
    weighted += f1 * static_cast<double>(s);
    support += s;
  }
  if (support == 0) throw ValidationError("weighted_f1: no gold codes");
  return weighted / static_cast<double>(support);
}

/// P(score of a random positive > score of a random negative), ties count half.
/// Rank-sum form with average ranks for ties.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("roc_auc: misaligned inputs");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] != 0) rank_sum += avg_rank;
    }
    i = j + 1;
  }
  for (int y : labels) n_pos += (y != 0);
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("roc_auc: needs both classes");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

/// F1 of the positive class when predicting `score >= threshold`.
inline double binary_f1(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size()) throw ValidationError("binary_f1: misaligned inputs");
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i]) ++tp;
    if (pred && !labels[i]) ++fp;
    if (!pred && labels[i]) ++fn;
  }
  const long denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

/// Threshold maximizing binary F1; candidates are the observed scores. Ties
/// keep the largest threshold.
inline double best_f1_threshold(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw ValidationError("best_f1_threshold: no scores");
  std::vector<double> candidates(scores.begin(), scores.end());
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  double best = candidates.front();
  double best_f1 = -1.0;
  for (double t : candidates) {
    const double f = binary_f1(scores, labels, t);
    if (f > best_f1) {
      best_f1 = f;
      best = t;
    }
  }
  return best;
}

struct EvalReport {
  std::map<int, double> recall_at;
  std::map<int, double> rank_recall_at;  // first-token ranking output
  double weighted_f1 = 0.0;
  std::optional<double> auc;
  std::optional<double> binary_f1;
  std::optional<double> hf_threshold;
  double mean_predicted = 0.0;
  int n_patients = 0;
};

}  // namespace mera
