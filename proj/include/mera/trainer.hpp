#pragma once

// Two-stage training: memorization (CE on every QA pair, plus hierarchical CL
// on definition->code answers) and diagnosis prediction (CL + DCE over
// teacher-forcing variants), or a token-level CE control for stage two.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mera/corpus.hpp"
#include "mera/error.hpp"
#include "mera/evaluation.hpp"
#include "mera/model.hpp"
#include "mera/objectives.hpp"
#include "mera/optimizer.hpp"
#include "mera/rng.hpp"

namespace mera {

enum class Stage { kMemorize, kDiagnose, kCeControl };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kMemorize: return "memorize";
    case Stage::kDiagnose: return "diagnose";
    case Stage::kCeControl: return "ce_control";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  for (auto k : {Stage::kMemorize, Stage::kDiagnose, Stage::kCeControl}) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown stage '" + std::string(s) + "' (memorize, diagnose, ce_control)");
}

struct TrainConfig {
  Stage stage = Stage::kMemorize;
  int epochs_max = 20;
  int batch_size = 16;  // sequences per optimizer step
  double learning_rate = 3e-4;
  OptimizerConfig optimizer;
  ObjectiveWeights weights;
  double mem_cl_weight = 1.0;  // CL on definition->code answers in stage one
  int early_stop_patience = 5;
  int eval_every = 1;
  std::uint64_t seed = 1;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  int dev_k = 20;
  int max_decode_steps = 20;

  void validate() const {
    if (epochs_max < 0) throw ValidationError("epochs_max must be >= 0");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (learning_rate < 0) throw ValidationError("learning_rate must be >= 0");
    if (early_stop_patience < 1) throw ValidationError("early_stop_patience must be >= 1");
    if (eval_every < 1) throw ValidationError("eval_every must be >= 1");
    if (weights.cl < 0 || weights.dce < 0 || mem_cl_weight < 0) throw ValidationError("loss weights must be >= 0");
    if (dev_k < 1 || max_decode_steps < 1) throw ValidationError("dev_k and max_decode_steps must be >= 1");
  }
};

struct HistoryRow {
  int epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<HistoryRow> history;
  int best_epoch = 0;
  double best_metric = 0.0;
  int epochs_run = 0;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& rows) {
  out << "epoch,split,metric,value\n";
  for (const auto& r : rows) out << r.epoch << ',' << r.split << ',' << r.metric << ',' << format_double(r.value) << '\n';
}

/// Batches of indices for one epoch: a seed- and epoch-determined shuffle cut into chunks.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0xBA7C, static_cast<std::uint64_t>(epoch)));
  shuffle_in_place(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  }
  return out;
}

/// Greedy continuation over the full vocabulary until `stop` or `max_new` tokens.
inline std::vector<int> greedy_complete(const Transformer& model, std::vector<int> ids, int max_new, int stop) {
  std::vector<int> out;
  for (int i = 0; i < max_new && static_cast<int>(ids.size()) < model.config().max_seq_len; ++i) {
    const auto logits = model.next_logits(ids);
    const int t = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(t);
    if (t == stop) break;
    ids.push_back(t);
  }
  return out;
}

struct MemorizationAccuracy {
  double def2code = 0.0;   // first-token argmax equals the code
  double code2def = 0.0;   // greedy answer equals the definition exactly
  double code2group = 0.0;
};

inline MemorizationAccuracy memorization_accuracy(const Transformer& model, const std::vector<TrainingInstance>& mem,
                                                  const Vocabulary& vocab) {
  int n[3] = {0, 0, 0}, ok[3] = {0, 0, 0};
  for (const auto& inst : mem) {
    int slot = 0;
    switch (inst.kind) {
      case InstanceKind::kMemDef2Code: slot = 0; break;
      case InstanceKind::kMemCode2Def: slot = 1; break;
      case InstanceKind::kMemCode2Group: slot = 2; break;
      default: continue;
    }
    ++n[slot];
    const auto got = greedy_complete(model, inst.input_ids, static_cast<int>(inst.completion_ids.size()), vocab.eos());
    if (got == inst.completion_ids) ++ok[slot];
  }
  auto frac = [](int a, int b) { return b == 0 ? 0.0 : static_cast<double>(a) / b; };
  return {frac(ok[0], n[0]), frac(ok[1], n[1]), frac(ok[2], n[2])};
}

namespace detail {

inline void check_finite(double loss, int epoch, std::size_t batch, std::string_view stage) {
  if (!std::isfinite(loss)) {
    throw DivergenceError("non-finite loss in stage " + std::string(stage) + " at epoch " + std::to_string(epoch) +
                          ", batch " + std::to_string(batch) + " (loss=" + format_double(loss) + ")");
  }
}

/// One causal pass per distinct full sequence. Diagnosis variants of the
/// same pair share it: variant m is scored at its own input length - 1.
struct SequenceItem {
  std::vector<int> ids;
  int ce_begin = 0;  // first scored row for token-level CE
  std::vector<int> targets;
  std::vector<const TrainingInstance*> variants;
  const TrainingInstance* instance = nullptr;  // memorization item
};

inline std::vector<SequenceItem> group_diagnosis(const std::vector<TrainingInstance>& instances) {
  std::map<std::vector<int>, std::size_t> index;
  std::vector<SequenceItem> items;
  for (const auto& inst : instances) {
    if (inst.kind != InstanceKind::kDiagnosis || !inst.supervision) {
      throw ValidationError("stage two expects diagnosis instances with supervision");
    }
    auto seq = inst.full_sequence();
    auto [it, fresh] = index.emplace(seq, items.size());
    if (fresh) {
      SequenceItem item;
      item.ids = std::move(seq);
      item.ce_begin = inst.supervised_position();
      items.push_back(std::move(item));
    }
    auto& item = items[it->second];
    item.ce_begin = std::min(item.ce_begin, inst.supervised_position());
    item.variants.push_back(&inst);
  }
  for (auto& item : items) {
    item.targets.assign(item.ids.begin() + item.ce_begin + 1, item.ids.end());
  }
  return items;
}

inline std::uint64_t step_seed(std::uint64_t seed, int epoch, std::size_t batch, std::size_t item) {
  return derive_seed(seed, 0xD409, static_cast<std::uint64_t>(epoch), batch, item);
}

}  // namespace detail

/// Optimizer loop shared by all stages. `step_item` runs forward/backward for
/// one item with the given gradient scale and returns its loss contribution.
/// `evaluate` returns the selection metric after logging its own rows.
template <class Item, class StepFn, class EvalFn>
TrainResult run_training(const TrainConfig& cfg, const ModelCheckpoint& start, const std::vector<Item>& items,
                         StepFn step_item, EvalFn evaluate, std::function<std::size_t(const Item&)> weight_of) {
  cfg.validate();
  TrainResult result;
  result.checkpoint = start;
  result.checkpoint.meta["stage"] = std::string(to_string(cfg.stage));
  if (cfg.epochs_max == 0) {
    result.checkpoint = start;
    return result;
  }
  if (items.empty()) throw ValidationError("no training instances");

  Transformer model = start.model();
  Optimizer opt(cfg.optimizer, cfg.learning_rate, model.params());

  double best = evaluate(model, 0, result.history);
  ParameterStore best_params = model.params();
  result.best_epoch = 0;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    const auto batches = epoch_batches(items.size(), cfg.batch_size, cfg.seed, epoch);
    double epoch_loss = 0.0;
    std::size_t epoch_weight = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::size_t batch_weight = 0;
      for (std::size_t i : batches[b]) batch_weight += weight_of(items[i]);
      if (batch_weight == 0) continue;
      model.params().zero_grad();
      double batch_loss = 0.0;
      for (std::size_t j = 0; j < batches[b].size(); ++j) {
        Rng rng(detail::step_seed(cfg.seed, epoch, b, j));
        batch_loss += step_item(model, items[batches[b][j]], 1.0 / static_cast<double>(batch_weight), rng);
      }
      detail::check_finite(batch_loss, epoch, b, to_string(cfg.stage));
      if (epoch == 1 && b == 0) result.history.push_back({1, "train", "first_batch_loss", batch_loss});
      if (cfg.grad_clip > 0) Optimizer::clip_grad_norm(model.params(), cfg.grad_clip);
      opt.step(model.params());
      if (!model.params().all_finite()) {
        throw DivergenceError("non-finite parameters after epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b));
      }
      epoch_loss += batch_loss * static_cast<double>(batch_weight);
      epoch_weight += batch_weight;
    }
    result.history.push_back({epoch, "train", "loss", epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_weight))});
    result.epochs_run = epoch;

    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs_max) {
      const double metric = evaluate(model, epoch, result.history);
      if (metric > best) {
        best = metric;
        best_params = model.params();
        result.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= cfg.early_stop_patience) {
        break;
      }
      if (best >= 1.0) break;  // nothing left to improve
    }
  }
  result.best_metric = best;
  result.checkpoint.params = std::move(best_params);
  result.checkpoint.meta["best_epoch"] = std::to_string(result.best_epoch);
  result.checkpoint.meta["epochs_run"] = std::to_string(result.epochs_run);
  return result;
}

/// Stage one. Selection metric: mean of definition->code and code->definition
/// accuracy on the memorization set itself (there are no held-out codes).
inline TrainResult train_memorize(const TrainConfig& cfg, const ModelCheckpoint& start,
                                  const std::vector<TrainingInstance>& mem) {
  const Vocabulary& vocab = start.vocab;
  std::vector<detail::SequenceItem> items;
  for (const auto& inst : mem) {
    if (inst.kind == InstanceKind::kDiagnosis) throw ValidationError("stage one expects memorization instances");
    detail::SequenceItem item;
    item.ids = inst.full_sequence();
    item.ce_begin = inst.supervised_position();
    item.targets = inst.completion_ids;
    item.instance = &inst;
    items.push_back(std::move(item));
  }
  auto step = [&](Transformer& model, const detail::SequenceItem& item, double scale, Rng& rng) {
    ad::Tape tape;
    const std::span<const int> ids(item.ids.data(), item.ids.size() - 1);
    const ad::Var logits = model.forward(tape, ids, ForwardMode{true, &rng});
    const Matrix& z = tape.value(logits);
    const auto rows = static_cast<Eigen::Index>(item.targets.size());
    const auto ce = ce_loss_grad(z.middleRows(item.ce_begin, rows), item.targets);
    Matrix d = Matrix::Zero(z.rows(), z.cols());
    d.middleRows(item.ce_begin, rows) = Eigen::Map<const Matrix>(ce.grad.data(), rows, z.cols()) * scale;
    double loss = ce.value;
    if (cfg.mem_cl_weight > 0 && item.instance->supervision) {
      const auto row = z.row(item.ce_begin);
      const auto cl = hierarchical_cl_grad(std::span<const double>(row.data(), static_cast<std::size_t>(vocab.n_candidates())),
                                           *item.instance->supervision);
      loss += cfg.mem_cl_weight * cl.value;
      for (int c = 0; c < vocab.n_candidates(); ++c) d(item.ce_begin, c) += cfg.mem_cl_weight * cl.grad[static_cast<std::size_t>(c)] * scale;
    }
    tape.backward(tape.loss_head(logits, loss * scale, std::move(d)));
    return loss * scale;
  };
  auto evaluate = [&](const Transformer& model, int epoch, std::vector<HistoryRow>& hist) {
    const auto acc = memorization_accuracy(model, mem, vocab);
    hist.push_back({epoch, "dev", "def2code_acc", acc.def2code});
    hist.push_back({epoch, "dev", "code2def_acc", acc.code2def});
    hist.push_back({epoch, "dev", "code2group_acc", acc.code2group});
    return 0.5 * (acc.def2code + acc.code2def);
  };
  return run_training<detail::SequenceItem>(cfg, start, items, step, evaluate,
                                            [](const detail::SequenceItem&) -> std::size_t { return 1; });
}

struct DiagnosisDev {
  const std::vector<PatientRecord>* records = nullptr;
  CorpusConfig corpus;
};

namespace detail {

inline std::function<double(const Transformer&, int, std::vector<HistoryRow>&)> recall_evaluator(
    const TrainConfig& cfg, const Vocabulary& vocab, const DiagnosisDev& dev) {
  if (dev.records == nullptr || dev.records->empty()) throw ValidationError("dev set is empty");
  return [&cfg, &vocab, dev](const Transformer& model, int epoch, std::vector<HistoryRow>& hist) {
    PredictOptions opts;
    opts.max_decode_steps = cfg.max_decode_steps;
    opts.rank_k = cfg.dev_k;
    const auto preds = predict_patients(model, vocab, dev.corpus, *dev.records, opts);
    const auto report = evaluate_predictions(preds, {cfg.dev_k});
    const double recall = report.recall_at.at(cfg.dev_k);
    hist.push_back({epoch, "dev", "recall@" + std::to_string(cfg.dev_k), recall});
    hist.push_back({epoch, "dev", "weighted_f1", report.weighted_f1});
    hist.push_back({epoch, "dev", "mean_predicted", report.mean_predicted});
    return recall;
  };
}

}  // namespace detail

/// Stage two: weights.cl * mean CL + weights.dce * mean DCE over all
/// teacher-forcing variants in the batch. Dev metric: decoded recall@dev_k.
inline TrainResult train_diagnose(const TrainConfig& cfg, const ModelCheckpoint& start,
                                  const std::vector<TrainingInstance>& instances, const DiagnosisDev& dev) {
  const Vocabulary& vocab = start.vocab;
  const auto items = detail::group_diagnosis(instances);
  const int n_cand = vocab.n_candidates();
  auto step = [&](Transformer& model, const detail::SequenceItem& item, double scale, Rng& rng) {
    int last = 0;
    for (const auto* v : item.variants) last = std::max(last, v->supervised_position());
    ad::Tape tape;
    const std::span<const int> ids(item.ids.data(), static_cast<std::size_t>(last + 1));
    const ad::Var logits = model.forward(tape, ids, ForwardMode{true, &rng});
    const Matrix& z = tape.value(logits);
    Matrix d = Matrix::Zero(z.rows(), z.cols());
    double loss = 0.0;
    for (const auto* v : item.variants) {
      const int p = v->supervised_position();
      const auto row = z.row(p);
      const std::span<const double> cand(row.data(), static_cast<std::size_t>(n_cand));
      if (cfg.weights.cl != 0.0) {
        const auto g = hierarchical_cl_grad(cand, *v->supervision);
        loss += cfg.weights.cl * g.value;
        for (int c = 0; c < n_cand; ++c) d(p, c) += cfg.weights.cl * g.grad[static_cast<std::size_t>(c)] * scale;
      }
      if (cfg.weights.dce != 0.0) {
        const auto g = dynamic_ce_grad(cand, *v->supervision);
        loss += cfg.weights.dce * g.value;
        for (int c = 0; c < n_cand; ++c) d(p, c) += cfg.weights.dce * g.grad[static_cast<std::size_t>(c)] * scale;
      }
    }
    tape.backward(tape.loss_head(logits, loss * scale, std::move(d)));
    return loss * scale;
  };
  return run_training<detail::SequenceItem>(cfg, start, items, step, detail::recall_evaluator(cfg, vocab, dev),
                                            [](const detail::SequenceItem& it) { return it.variants.size(); });
}

/// Stage-two control arm: token-level CE over the code tokens and EOV of each
/// target visit (the prompt phrase is always part of the input).
inline TrainResult train_ce_control(const TrainConfig& cfg, const ModelCheckpoint& start,
                                    const std::vector<TrainingInstance>& instances, const DiagnosisDev& dev) {
  const auto items = detail::group_diagnosis(instances);
  auto step = [&](Transformer& model, const detail::SequenceItem& item, double scale, Rng& rng) {
    ad::Tape tape;
    const std::span<const int> ids(item.ids.data(), item.ids.size() - 1);
    const ad::Var logits = model.forward(tape, ids, ForwardMode{true, &rng});
    const Matrix& z = tape.value(logits);
    const auto rows = static_cast<Eigen::Index>(item.targets.size());
    const auto ce = ce_loss_grad(z.middleRows(item.ce_begin, rows), item.targets);
    Matrix d = Matrix::Zero(z.rows(), z.cols());
    d.middleRows(item.ce_begin, rows) = Eigen::Map<const Matrix>(ce.grad.data(), rows, z.cols()) * scale;
    tape.backward(tape.loss_head(logits, ce.value * scale, std::move(d)));
    return ce.value * scale;
  };
  return run_training<detail::SequenceItem>(cfg, start, items, step, detail::recall_evaluator(cfg, start.vocab, dev),
                                            [](const detail::SequenceItem&) -> std::size_t { return 1; });
}

inline TrainResult train_stage_two(const TrainConfig& cfg, const ModelCheckpoint& start,
                                   const std::vector<TrainingInstance>& instances, const DiagnosisDev& dev) {
  if (cfg.stage == Stage::kCeControl) return train_ce_control(cfg, start, instances, dev);
  return train_diagnose(cfg, start, instances, dev);
}

}  // namespace mera
