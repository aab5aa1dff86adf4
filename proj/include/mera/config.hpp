#pragma once

// Pipeline configuration: one JSON document with nested sections
//   gen, split, corpus, model, memorize, diagnose, eval
// Missing keys keep their defaults; unknown keys are rejected.

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mera/corpus.hpp"
#include "mera/error.hpp"
#include "mera/model.hpp"
#include "mera/synthgen.hpp"
#include "mera/trainer.hpp"

namespace mera {

struct EvalConfig {
  std::vector<int> k{10, 20};
  int max_decode_steps = 20;
  /// Finest-level label of the target group; empty uses the generator's choice.
  std::string target_group;
};

struct PipelineConfig {
  GenConfig gen;
  SplitRatios split;
  std::uint64_t split_seed = 1;
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig memorize;
  TrainConfig diagnose;
  EvalConfig eval;

  // desk-scale defaults: a 1-layer model fits the 200-leaf ontology on a CPU
  PipelineConfig() {
    model.d_model = 64;
    model.n_layers = 1;
    model.n_heads = 2;
    model.d_ff = 256;
    model.max_seq_len = 256;
    memorize.stage = Stage::kMemorize;
    memorize.epochs_max = 150;
    memorize.learning_rate = 1e-3;
    memorize.batch_size = 32;
    memorize.early_stop_patience = 10;
    diagnose.stage = Stage::kDiagnose;
    diagnose.epochs_max = 15;
    diagnose.learning_rate = 1e-3;
    diagnose.batch_size = 16;
    diagnose.early_stop_patience = 5;
  }

  /// One seed for every stream: data, split, corpus, init, batching.
  void apply_seed(std::uint64_t seed) {
    gen.seed = seed;
    split_seed = seed;
    corpus.seed = seed;
    model.init_seed = seed;
    memorize.seed = seed;
    diagnose.seed = seed;
  }
};

namespace detail {

using json = nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ValidationError("config: section '" + name_ + "' must be an object");
  }
  ~Section() = default;

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ValidationError("config: " + name_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ValidationError("config: unknown key '" + name_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

inline void read_range(Section& s, const char* key, IntRange& r) {
  std::vector<int> v{r.min, r.max};
  s.get(key, v);
  if (v.size() != 2) throw ValidationError(std::string("config: ") + key + " must be [min, max]");
  r = {v[0], v[1]};
}

inline void read_train(const json& j, const std::string& name, TrainConfig& t) {
  Section s(j, name);
  s.get("epochs_max", t.epochs_max);
  s.get("batch_size", t.batch_size);
  s.get("learning_rate", t.learning_rate);
  std::string opt = t.optimizer.kind == OptimizerConfig::Kind::kAdam ? "adam" : "sgd";
  s.get("optimizer", opt);
  if (opt == "adam") t.optimizer.kind = OptimizerConfig::Kind::kAdam;
  else if (opt == "sgd") t.optimizer.kind = OptimizerConfig::Kind::kSgd;
  else throw ValidationError("config: " + name + ".optimizer must be 'adam' or 'sgd'");
  s.get("adam_beta1", t.optimizer.beta1);
  s.get("adam_beta2", t.optimizer.beta2);
  s.get("adam_eps", t.optimizer.eps);
  s.get("lambda_cl", t.weights.cl);
  s.get("lambda_dce", t.weights.dce);
  s.get("mem_cl_weight", t.mem_cl_weight);
  s.get("early_stop_patience", t.early_stop_patience);
  s.get("eval_every", t.eval_every);
  s.get("seed", t.seed);
  s.get("grad_clip", t.grad_clip);
  s.get("dev_k", t.dev_k);
  s.get("max_decode_steps", t.max_decode_steps);
  std::string stage(to_string(t.stage));
  s.get("stage", stage);
  t.stage = parse_stage(stage);
  s.finish();
  t.validate();
}

}  // namespace detail

inline PipelineConfig parse_config(const nlohmann::json& root) {
  using detail::Section;
  PipelineConfig c;
  Section top(root, "config");
  if (root.is_object() && root.contains("seed")) {
    std::uint64_t seed = 0;
    top.get("seed", seed);
    c.apply_seed(seed);
  }

  if (const auto* j = top.child("gen")) {
    Section s(*j, "gen");
    s.get("seed", c.gen.seed);
    s.get("n_patients", c.gen.n_patients);
    s.get("n_leaves", c.gen.n_leaves);
    s.get("depth", c.gen.depth);
    s.get("branching", c.gen.branching);
    detail::read_range(s, "visits_per_patient", c.gen.visits_per_patient);
    detail::read_range(s, "codes_per_visit", c.gen.codes_per_visit);
    s.get("progression_strength", c.gen.progression_strength);
    s.get("target_group", c.gen.target_group);
    s.get("ontology_name", c.gen.ontology_name);
    s.finish();
  }
  c.gen.validate();

  if (const auto* j = top.child("split")) {
    Section s(*j, "split");
    s.get("train", c.split.train);
    s.get("dev", c.split.dev);
    s.get("test", c.split.test);
    s.get("seed", c.split_seed);
    s.finish();
  }

  if (const auto* j = top.child("corpus")) {
    Section s(*j, "corpus");
    s.get("instruction", c.corpus.instruction);
    s.get("visit_prompt", c.corpus.visit_prompt);
    s.get("n_perturb", c.corpus.n_perturb);
    s.get("seed", c.corpus.seed);
    s.finish();
  }
  if (c.corpus.n_perturb < 1) throw ValidationError("config: corpus.n_perturb must be >= 1");

  if (const auto* j = top.child("model")) {
    Section s(*j, "model");
    s.get("d_model", c.model.d_model);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("d_ff", c.model.d_ff);
    s.get("max_seq_len", c.model.max_seq_len);
    s.get("dropout", c.model.dropout);
    s.get("init_seed", c.model.init_seed);
    s.finish();
  }

  if (const auto* j = top.child("memorize")) detail::read_train(*j, "memorize", c.memorize);
  if (const auto* j = top.child("diagnose")) detail::read_train(*j, "diagnose", c.diagnose);
  c.memorize.validate();
  c.diagnose.validate();

  if (const auto* j = top.child("eval")) {
    Section s(*j, "eval");
    s.get("k", c.eval.k);
    s.get("max_decode_steps", c.eval.max_decode_steps);
    s.get("target_group", c.eval.target_group);
    s.finish();
  }
  for (int k : c.eval.k) {
    if (k < 1) throw ValidationError("config: eval.k entries must be >= 1");
  }
  if (c.eval.max_decode_steps < 1) throw ValidationError("config: eval.max_decode_steps must be >= 1");
  top.finish();
  return c;
}

inline PipelineConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return parse_config(j);
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace mera
