#pragma once

// Held-out evaluation: each patient's last visit is the label, the visits
// before it are the history.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mera/corpus.hpp"
#include "mera/inference.hpp"
#include "mera/metrics.hpp"
#include "mera/model.hpp"

namespace mera {

struct PatientPrediction {
  std::string patient_id;
  std::vector<CodeId> predicted;  // decode emission order
  std::vector<CodeId> ranked;     // first-token ranking
  std::vector<CodeId> gold;
  std::optional<double> hf_score;
  std::optional<int> hf_label;
  bool terminated_by_eov = false;
  bool history_truncated = false;
};

struct PredictOptions {
  int max_decode_steps = 20;
  int rank_k = 20;
  /// Leaf indices of the designated target group; empty disables the binary task.
  std::vector<int> target_members;
};

inline PatientPrediction predict_patient(const Transformer& model, const Vocabulary& vocab, const CorpusConfig& corpus,
                                         const PatientRecord& patient, const PredictOptions& opts, bool has_label = true) {
  const std::size_t n_hist = has_label ? patient.visits.size() - 1 : patient.visits.size();
  if (n_hist < 1) throw ValidationError("patient " + patient.patient_id + " has no history to predict from");
  const std::span<const Visit> history(patient.visits.data(), n_hist);
  const int reserve = std::min(opts.max_decode_steps, vocab.n_codes());
  const auto input = history_input(vocab, corpus, history, model.config().max_seq_len, reserve);

  PatientPrediction out;
  out.patient_id = patient.patient_id;
  out.history_truncated = input.truncated;
  const auto pred = decode(model, input.ids, vocab.n_codes(),
                           DecodeOptions{opts.max_decode_steps, model.config().max_seq_len, false});
  out.terminated_by_eov = pred.terminated_by_eov;
  for (int c : pred.codes) out.predicted.push_back(vocab.surface(c));

  const auto first = first_step_distribution(model, input.ids, vocab.n_codes());
  for (int c : rank_candidates(first, std::min(opts.rank_k, vocab.n_codes()))) out.ranked.push_back(vocab.surface(c));
  if (!opts.target_members.empty()) out.hf_score = group_score(first, opts.target_members);

  if (has_label) {
    out.gold = patient.visits.back().codes;
    if (!opts.target_members.empty()) {
      int label = 0;
      for (int c : opts.target_members) label |= patient.visits.back().contains(vocab.surface(c)) ? 1 : 0;
      out.hf_label = label;
    }
  }
  return out;
}

inline std::vector<PatientPrediction> predict_patients(const Transformer& model, const Vocabulary& vocab,
                                                       const CorpusConfig& corpus,
                                                       const std::vector<PatientRecord>& patients,
                                                       const PredictOptions& opts) {
  std::vector<PatientPrediction> out;
  out.reserve(patients.size());
  for (const auto& p : patients) out.push_back(predict_patient(model, vocab, corpus, p, opts));
  return out;
}

/// Recall@k (decoded and ranked lists), weighted F1 of decoded sets, and the
/// binary task when scores exist. `hf_threshold` is applied as given (chosen on dev).
inline EvalReport evaluate_predictions(const std::vector<PatientPrediction>& preds, const std::vector<int>& ks,
                                       std::optional<double> hf_threshold = std::nullopt) {
  if (preds.empty()) throw ValidationError("evaluation set is empty");
  EvalReport r;
  r.n_patients = static_cast<int>(preds.size());
  std::vector<std::set<CodeId>> predicted, gold;
  double total_predicted = 0.0;
  for (const auto& p : preds) {
    predicted.emplace_back(p.predicted.begin(), p.predicted.end());
    gold.emplace_back(p.gold.begin(), p.gold.end());
    total_predicted += static_cast<double>(p.predicted.size());
  }
  r.mean_predicted = total_predicted / static_cast<double>(preds.size());
  for (int k : ks) {
    double dec = 0.0, rank = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      dec += recall_at_k(preds[i].predicted, gold[i], k);
      rank += recall_at_k(preds[i].ranked, gold[i], k);
    }
    r.recall_at[k] = dec / static_cast<double>(preds.size());
    r.rank_recall_at[k] = rank / static_cast<double>(preds.size());
  }
  r.weighted_f1 = weighted_f1(predicted, gold);

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& p : preds) {
    if (p.hf_score && p.hf_label) {
      scores.push_back(*p.hf_score);
      labels.push_back(*p.hf_label);
    }
  }
  const bool both = std::find(labels.begin(), labels.end(), 0) != labels.end() &&
                    std::find(labels.begin(), labels.end(), 1) != labels.end();
  if (!scores.empty() && both) r.auc = roc_auc(scores, labels);
  if (!scores.empty() && hf_threshold) {
    r.hf_threshold = hf_threshold;
    r.binary_f1 = mera::binary_f1(scores, labels, *hf_threshold);
  }
  return r;
}

/// Dev-optimal F1 threshold over the predictions' hf scores; nullopt without labels.
inline std::optional<double> choose_hf_threshold(const std::vector<PatientPrediction>& dev) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& p : dev) {
    if (p.hf_score && p.hf_label) {
      scores.push_back(*p.hf_score);
      labels.push_back(*p.hf_label);
    }
  }
  if (scores.empty()) return std::nullopt;
  return best_f1_threshold(scores, labels);
}

inline std::string format_prediction(const PatientPrediction& p) {
  nlohmann::ordered_json j;
  j["patient_id"] = p.patient_id;
  j["predicted"] = p.predicted;
  j["gold"] = p.gold;
  j["hf_score"] = p.hf_score ? nlohmann::ordered_json(*p.hf_score) : nlohmann::ordered_json(nullptr);
  j["terminated_by_eov"] = p.terminated_by_eov;
  j["history_truncated"] = p.history_truncated;
  return j.dump();
}

}  // namespace mera
