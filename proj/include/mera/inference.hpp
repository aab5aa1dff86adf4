#pragma once

// Diagnosis prediction from a next-token scorer: EOV-terminated greedy
// decoding over the candidate distribution, first-token ranking, and the
// target-group probability score.

#include <algorithm>
#include <concepts>
#include <numeric>
#include <span>
#include <vector>

#include "mera/error.hpp"
#include "mera/objectives.hpp"
#include "mera/ontology.hpp"
#include "mera/vocabulary.hpp"

namespace mera {

/// Anything that maps a token prefix to next-token logits over the full vocabulary.
template <class S>
concept NextTokenScorer = requires(const S& s, std::span<const int> ids) {
  { s.next_logits(ids) } -> std::convertible_to<std::vector<double>>;
};

struct DecodeOptions {
  int max_steps = 0;            // codes to emit at most; 0 means |O|
  int max_seq_len = 1 << 30;    // stop when the sequence is full
  bool keep_distributions = false;
};

struct PredictionSet {
  std::vector<int> codes;  // leaf indices, emission order
  std::vector<CandidateDistribution> per_step_dists;
  bool terminated_by_eov = false;
  bool history_truncated = false;
  int forward_passes = 0;
};

/// Greedy argmax over {codes not yet emitted} ∪ {EOV}. Ties go to the lower id.
template <NextTokenScorer Scorer>
PredictionSet decode(const Scorer& model, std::span<const int> history_ids, int n_codes, DecodeOptions opts = {}) {
  if (n_codes < 1) throw ValidationError("decode: no candidates");
  const int max_steps = opts.max_steps > 0 ? std::min(opts.max_steps, n_codes) : n_codes;
  std::vector<int> seq(history_ids.begin(), history_ids.end());
  std::vector<char> emitted(static_cast<std::size_t>(n_codes), 0);
  PredictionSet out;
  while (static_cast<int>(out.codes.size()) < max_steps && static_cast<int>(seq.size()) < opts.max_seq_len) {
    const auto logits = model.next_logits(seq);
    ++out.forward_passes;
    auto dist = restrict_softmax(logits, n_codes + 1, static_cast<int>(seq.size()) - 1);
    int best = n_codes;
    double best_p = dist.probs.back();
    for (int c = 0; c < n_codes; ++c) {
      if (emitted[static_cast<std::size_t>(c)]) continue;
      if (dist.probs[static_cast<std::size_t>(c)] > best_p ||
          (dist.probs[static_cast<std::size_t>(c)] == best_p && c < best)) {
        best = c;
        best_p = dist.probs[static_cast<std::size_t>(c)];
      }
    }
    if (opts.keep_distributions) out.per_step_dists.push_back(std::move(dist));
    if (best == n_codes) {
      out.terminated_by_eov = true;
      return out;
    }
    emitted[static_cast<std::size_t>(best)] = 1;
    out.codes.push_back(best);
    seq.push_back(best);
  }
  return out;
}

/// Codes ordered by probability descending, ties by token id; EOV excluded.
inline std::vector<int> rank_candidates(const CandidateDistribution& dist, int k) {
  const int n = dist.n_codes();
  if (k <= 0 || k > n) throw ValidationError("rank: k must be in [1, |O|]");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    const double pa = dist.probs[static_cast<std::size_t>(a)];
    const double pb = dist.probs[static_cast<std::size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

template <NextTokenScorer Scorer>
CandidateDistribution first_step_distribution(const Scorer& model, std::span<const int> history_ids, int n_codes) {
  const auto logits = model.next_logits(history_ids);
  return restrict_softmax(logits, n_codes + 1, static_cast<int>(history_ids.size()) - 1);
}

/// Top-k codes of the first decoding step.
template <NextTokenScorer Scorer>
std::vector<int> rank_first_token(const Scorer& model, std::span<const int> history_ids, int n_codes, int k) {
  if (k <= 0 || k > n_codes) throw ValidationError("rank_first_token: k must be in [1, |O|]");
  return rank_candidates(first_step_distribution(model, history_ids, n_codes), k);
}

/// Probability mass of the first step on `members` (leaf indices).
inline double group_score(const CandidateDistribution& dist, std::span<const int> members) {
  double s = 0.0;
  for (int c : members) s += dist.probs.at(static_cast<std::size_t>(c));
  return s;
}

template <NextTokenScorer Scorer>
double heart_failure_score(const Scorer& model, std::span<const int> history_ids, int n_codes,
                           std::span<const int> target_members) {
  if (target_members.empty()) throw ValidationError("heart_failure_score: empty target group");
  return group_score(first_step_distribution(model, history_ids, n_codes), target_members);
}

/// Same, with the group looked up in the ontology (unknown groups throw).
template <NextTokenScorer Scorer>
double heart_failure_score(const Scorer& model, std::span<const int> history_ids, const Ontology& o, GroupId target) {
  return heart_failure_score(model, history_ids, static_cast<int>(o.size()), o.members(target));
}

}  // namespace mera
