#pragma once

// Losses over the restricted candidate distribution (all code tokens + EOV):
// token-level cross-entropy, hierarchical contrastive loss over ontology
// groups, and the EOV-threshold dynamic cross-entropy.
//
// Candidate index c < n_codes is the code token c; index n_codes is EOV.
// Every *_grad function returns the gradient w.r.t. the candidate logits.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "mera/autodiff.hpp"
#include "mera/corpus.hpp"
#include "mera/error.hpp"
#include "mera/vocabulary.hpp"

namespace mera {

using ad::Matrix;

struct CandidateDistribution {
  std::vector<double> probs;  // size n_codes + 1, EOV last
  int source_position = -1;

  int n_codes() const { return static_cast<int>(probs.size()) - 1; }
  double eov() const { return probs.back(); }
};

struct LossGrad {
  double value = 0.0;
  std::vector<double> grad;
};

struct ObjectiveWeights {
  double cl = 1.0;
  double dce = 1.0;
};

/// Softmax over the first `n_candidates` logits only (codes then EOV).
inline CandidateDistribution restrict_softmax(std::span<const double> logits, int n_candidates, int source_position = -1) {
  if (n_candidates < 1 || static_cast<std::size_t>(n_candidates) > logits.size()) {
    throw ValidationError("restrict_softmax: bad candidate count");
  }
  const auto cand = logits.first(static_cast<std::size_t>(n_candidates));
  for (double z : cand) {
    if (!std::isfinite(z)) throw ValidationError("restrict_softmax: non-finite logit");
  }
  const double m = *std::max_element(cand.begin(), cand.end());
  CandidateDistribution d;
  d.source_position = source_position;
  d.probs.resize(cand.size());
  double total = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    d.probs[i] = std::exp(cand[i] - m);
    total += d.probs[i];
  }
  for (double& p : d.probs) p /= total;
  return d;
}

inline CandidateDistribution restrict_softmax(std::span<const double> logits, const Vocabulary& vocab,
                                              int source_position = -1) {
  if (static_cast<int>(logits.size()) != vocab.size()) throw ValidationError("restrict_softmax: logits/vocab size mismatch");
  return restrict_softmax(logits, vocab.n_candidates(), source_position);
}

/// Chain rule through the restricted softmax: dL/dz = p * (g - <p, g>).
inline std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> d_probs) {
  double dot = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * d_probs[i];
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] * (d_probs[i] - dot);
  return out;
}

// ---------------------------------------------------------------------------
// Token-level cross-entropy

/// Mean of -log softmax(row)[target] over rows; `logits` has one row per target.
inline LossGrad ce_loss_grad(const Matrix& logits, std::span<const int> targets) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) throw ValidationError("ce_loss: length mismatch");
  if (targets.empty()) throw ValidationError("ce_loss: no completion positions");
  LossGrad out;
  Matrix grad(logits.rows(), logits.cols());
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw ValidationError("ce_loss: target out of range");
    const double m = logits.row(r).maxCoeff();
    const auto e = (logits.row(r).array() - m).exp();
    const double total = e.sum();
    out.value += (std::log(total) + m - logits(r, t)) * inv_n;
    grad.row(r) = e / total * inv_n;
    grad(r, t) -= inv_n;
  }
  out.grad.assign(grad.data(), grad.data() + grad.size());
  return out;
}

/// CE over the completion of a full input+completion sequence whose logits
/// are `seq_logits`: row i predicts token i+1, so completion token j is
/// scored at row input_len - 1 + j.
inline double ce_loss(const Matrix& seq_logits, int input_len, std::span<const int> completion_ids) {
  if (input_len < 1 || seq_logits.rows() < input_len - 1 + static_cast<Eigen::Index>(completion_ids.size())) {
    throw ValidationError("ce_loss: length mismatch");
  }
  const Matrix rows = seq_logits.middleRows(input_len - 1, static_cast<Eigen::Index>(completion_ids.size()));
  return ce_loss_grad(rows, completion_ids).value;
}

// ---------------------------------------------------------------------------
// Hierarchical contrastive loss

/// Sum over group terms of -log(sum_pos p / sum_group p). EOV never enters a group.
inline double hierarchical_cl_loss(const CandidateDistribution& dist, const DiagnosisSupervision& sup) {
  double total = 0.0;
  for (const auto& term : sup.group_terms) {
    if (term.positives.empty()) throw ValidationError("hierarchical_cl_loss: group term without positives");
    double pos = 0.0, all = 0.0;
    for (int c : term.positives) pos += dist.probs.at(static_cast<std::size_t>(c));
    for (int c : term.members) all += dist.probs.at(static_cast<std::size_t>(c));
    if (all < 1e-300) throw NumericError("hierarchical_cl_loss: group probability mass underflow");
    total += -std::log(pos / all);
  }
  return total;
}

/// Same loss from candidate logits: each term is logsumexp(group) - logsumexp(pos),
/// so the global normalizer cancels and nothing underflows.
inline LossGrad hierarchical_cl_grad(std::span<const double> cand_logits, const DiagnosisSupervision& sup) {
  LossGrad out;
  out.grad.assign(cand_logits.size(), 0.0);
  auto lse_accumulate = [&](const std::vector<int>& idx, double sign) {
    double m = -std::numeric_limits<double>::infinity();
    for (int c : idx) m = std::max(m, cand_logits[static_cast<std::size_t>(c)]);
    double s = 0.0;
    for (int c : idx) s += std::exp(cand_logits[static_cast<std::size_t>(c)] - m);
    for (int c : idx) out.grad[static_cast<std::size_t>(c)] += sign * std::exp(cand_logits[static_cast<std::size_t>(c)] - m) / s;
    return m + std::log(s);
  };
  for (const auto& term : sup.group_terms) {
    if (term.positives.empty()) throw ValidationError("hierarchical_cl_loss: group term without positives");
    out.value += lse_accumulate(term.members, 1.0) - lse_accumulate(term.positives, -1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dynamic cross-entropy (EOV as a learned threshold)

namespace detail {

/// Positive-membership mask over codes; everything else (known prefix included) is negative.
inline std::vector<char> positive_mask(int n_codes, const DiagnosisSupervision& sup) {
  std::vector<char> pos(static_cast<std::size_t>(n_codes), 0);
  for (int c : sup.positives) pos.at(static_cast<std::size_t>(c)) = 1;
  return pos;
}

}  // namespace detail

/// sum_pos log(1 + relu(p_EOV - p_c)) + sum_neg log(1 + relu(p_c - p_EOV)).
inline double dynamic_ce_loss(const CandidateDistribution& dist, const DiagnosisSupervision& sup) {
  const int n = dist.n_codes();
  if (n < 0) throw ValidationError("dynamic_ce_loss: distribution without EOV");
  const auto pos = detail::positive_mask(n, sup);
  const double pe = dist.eov();
  double total = 0.0;
  for (int c = 0; c < n; ++c) {
    const double gap = pos[static_cast<std::size_t>(c)] ? pe - dist.probs[static_cast<std::size_t>(c)]
                                                       : dist.probs[static_cast<std::size_t>(c)] - pe;
    if (gap > 0.0) total += std::log1p(gap);
  }
  return total;
}

/// Gradient form; ties (gap == 0) contribute a zero subgradient.
inline LossGrad dynamic_ce_grad(std::span<const double> cand_logits, const DiagnosisSupervision& sup) {
  const auto dist = restrict_softmax(cand_logits, static_cast<int>(cand_logits.size()));
  const int n = dist.n_codes();
  const auto pos = detail::positive_mask(n, sup);
  const double pe = dist.eov();
  std::vector<double> d_probs(dist.probs.size(), 0.0);
  LossGrad out;
  for (int c = 0; c < n; ++c) {
    const double pc = dist.probs[static_cast<std::size_t>(c)];
    const bool is_pos = pos[static_cast<std::size_t>(c)] != 0;
    const double gap = is_pos ? pe - pc : pc - pe;
    if (gap <= 0.0) continue;
    out.value += std::log1p(gap);
    const double k = 1.0 / (1.0 + gap);
    if (is_pos) {
      d_probs.back() += k;
      d_probs[static_cast<std::size_t>(c)] -= k;
    } else {
      d_probs[static_cast<std::size_t>(c)] += k;
      d_probs.back() -= k;
    }
  }
  out.grad = softmax_backward(dist.probs, d_probs);
  return out;
}

// ---------------------------------------------------------------------------

struct ScoredVariant {
  const CandidateDistribution* dist;
  const DiagnosisSupervision* sup;
};

/// weights.cl * mean(L_CL) + weights.dce * mean(L_DCE) over the batch.
inline double total_diagnosis_loss(std::span<const ScoredVariant> batch, ObjectiveWeights weights = {}) {
  if (batch.empty()) throw ValidationError("total_diagnosis_loss: empty batch");
  double cl = 0.0, dce = 0.0;
  for (const auto& v : batch) {
    if (weights.cl != 0.0) cl += hierarchical_cl_loss(*v.dist, *v.sup);
    if (weights.dce != 0.0) dce += dynamic_ce_loss(*v.dist, *v.sup);
  }
  const double n = static_cast<double>(batch.size());
  return weights.cl * cl / n + weights.dce * dce / n;
}

}  // namespace mera
