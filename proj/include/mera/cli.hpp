#pragma once

// Batch commands: gen -> build -> train (memorize, diagnose | ce_control) -> eval,
// plus single-patient predict. Every command writes manifest.json beside its outputs.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mera/config.hpp"
#include "mera/corpus.hpp"
#include "mera/evaluation.hpp"
#include "mera/model.hpp"
#include "mera/records.hpp"
#include "mera/synthgen.hpp"
#include "mera/trainer.hpp"

namespace mera::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode { kOk = 0, kOther = 1, kValidation = 2, kDivergence = 3, kIo = 4 };

struct Options {
  std::string config_path;  // empty: built-in defaults
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
};

inline PipelineConfig resolve_config(const Options& opts) {
  PipelineConfig cfg = opts.config_path.empty() ? PipelineConfig{} : load_config(opts.config_path);
  if (opts.seed) cfg.apply_seed(*opts.seed);
  return cfg;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ojson read_json(const fs::path& path) {
  try {
    return ojson::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IoError("missing input file " + path.string());
}

inline void write_manifest(const fs::path& dir, const std::string& command, const Options& opts, std::uint64_t seed,
                           const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  ojson m;
  m["command"] = command;
  m["config"] = opts.config_path;
  m["seed"] = seed;
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  m["tool_version"] = kToolVersion;
  m["timestamp"] = utc_timestamp();
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

/// Ontology table, all records, the patient-level split, and generator truth.
inline void cmd_gen(const Options& opts) {
  const auto cfg = resolve_config(opts);
  const fs::path out(opts.out_dir);
  ensure_dir(out);
  const auto truth = generate_ontology_with_truth(cfg.gen);
  const auto records = generate_records(cfg.gen, truth.ontology);
  const auto splits = split_by_patient(records, cfg.split, cfg.split_seed);

  save_ontology(truth.ontology, (out / "ontology.tsv").string());
  save_records(records, (out / "records.jsonl").string());
  save_records(splits.train, (out / "train.jsonl").string());
  save_records(splits.dev, (out / "dev.jsonl").string());
  save_records(splits.test, (out / "test.jsonl").string());
  ojson g;
  g["target_group"] = truth.target_label;
  g["groups_per_level"] = truth.groups_per_level;
  write_text(out / "gen.json", g.dump(2) + "\n");
  write_manifest(out, "gen", opts, cfg.gen.seed, {},
                 {"ontology.tsv", "records.jsonl", "train.jsonl", "dev.jsonl", "test.jsonl", "gen.json"});
}

/// Vocabulary and instance files from a gen directory.
inline void cmd_build(const std::string& gen_dir, const Options& opts) {
  const auto cfg = resolve_config(opts);
  const fs::path in(gen_dir), out(opts.out_dir);
  for (const char* f : {"ontology.tsv", "train.jsonl", "dev.jsonl", "test.jsonl"}) require_file(in / f);
  ensure_dir(out);

  const auto o = load_ontology((in / "ontology.tsv").string());
  const auto train = load_records((in / "train.jsonl").string(), &o);
  const auto dev = load_records((in / "dev.jsonl").string(), &o);
  const auto test = load_records((in / "test.jsonl").string(), &o);
  const auto vocab = build_vocabulary(o, cfg.corpus);

  save_ontology(o, (out / "ontology.tsv").string());
  save_records(dev, (out / "dev.jsonl").string());
  save_records(test, (out / "test.jsonl").string());
  save_vocabulary_tsv(vocab, (out / "vocab.tsv").string());
  save_instances(memorization_pairs(o, vocab), o, (out / "memorize.jsonl").string());
  save_instances(diagnosis_instances(train, o, vocab, cfg.corpus), o, (out / "diagnose.jsonl").string());

  std::string target = cfg.eval.target_group;
  if (target.empty() && fs::is_regular_file(in / "gen.json")) {
    target = read_json(in / "gen.json").value("target_group", std::string());
  }
  if (!target.empty()) o.find_group(o.depth(), target);  // must exist
  ojson b;
  b["instruction"] = cfg.corpus.instruction;
  b["visit_prompt"] = cfg.corpus.visit_prompt;
  b["n_perturb"] = cfg.corpus.n_perturb;
  b["target_group"] = target;
  write_text(out / "build.json", b.dump(2) + "\n");
  write_manifest(out, "build", opts, cfg.corpus.seed, {gen_dir},
                 {"ontology.tsv", "vocab.tsv", "memorize.jsonl", "diagnose.jsonl", "dev.jsonl", "test.jsonl", "build.json"});
}

namespace detail {

struct BuildDir {
  Ontology ontology;
  Vocabulary vocab;
  CorpusConfig corpus;
  std::string target_group;
};

inline BuildDir load_build(const fs::path& dir) {
  for (const char* f : {"ontology.tsv", "vocab.tsv", "build.json"}) require_file(dir / f);
  BuildDir b;
  b.ontology = load_ontology((dir / "ontology.tsv").string());
  b.vocab = load_vocabulary_tsv((dir / "vocab.tsv").string());
  const auto meta = read_json(dir / "build.json");
  b.corpus.instruction = meta.at("instruction").get<std::string>();
  b.corpus.visit_prompt = meta.at("visit_prompt").get<std::string>();
  b.corpus.n_perturb = meta.at("n_perturb").get<int>();
  b.target_group = meta.value("target_group", std::string());
  if (b.vocab.n_codes() != static_cast<int>(b.ontology.size())) throw ValidationError("vocabulary does not match ontology");
  return b;
}

inline std::string join_codes(const std::vector<CodeId>& codes) {
  std::string s;
  for (const auto& c : codes) s += (s.empty() ? "" : ",") + c;
  return s;
}

inline std::vector<int> target_members_from_meta(const ModelCheckpoint& ck) {
  std::vector<int> out;
  const auto it = ck.meta.find("target_members");
  if (it == ck.meta.end() || it->second.empty()) return out;
  for (const auto& c : mera::detail::split(it->second, ',')) out.push_back(ck.vocab.code_token(c));
  return out;
}

inline CorpusConfig corpus_from_meta(const ModelCheckpoint& ck) {
  CorpusConfig c;
  if (auto it = ck.meta.find("instruction"); it != ck.meta.end()) c.instruction = it->second;
  if (auto it = ck.meta.find("visit_prompt"); it != ck.meta.end()) c.visit_prompt = it->second;
  return c;
}

}  // namespace detail

struct TrainRequest {
  std::string build_dir;
  Stage stage = Stage::kMemorize;
  std::string checkpoint;  // empty: fresh initialization
  bool allow_cold_start = false;
};

inline TrainResult cmd_train(const TrainRequest& req, const Options& opts) {
  const auto cfg = resolve_config(opts);
  const fs::path in(req.build_dir), out(opts.out_dir);
  const auto build = detail::load_build(in);
  ensure_dir(out);

  ModelCheckpoint start;
  if (!req.checkpoint.empty()) {
    start = load_checkpoint(req.checkpoint);
    if (!(start.vocab == build.vocab)) throw ValidationError("checkpoint vocabulary does not match the build directory");
  }
  if (req.stage != Stage::kMemorize && !req.allow_cold_start) {
    if (req.checkpoint.empty()) {
      throw ValidationError("stage " + std::string(to_string(req.stage)) +
                            " needs a memorization checkpoint (--checkpoint) or --allow-cold-start");
    }
    const auto it = start.meta.find("stage");
    if (it == start.meta.end() || it->second != "memorize") {
      throw ValidationError("checkpoint is not a memorization checkpoint; pass --allow-cold-start to override");
    }
  }
  if (req.checkpoint.empty()) {
    start.config = cfg.model;
    start.config.vocab_size = build.vocab.size();
    start.vocab = build.vocab;
    start.params = Transformer(start.config).params();
  }
  start.meta["instruction"] = build.corpus.instruction;
  start.meta["visit_prompt"] = build.corpus.visit_prompt;
  if (!build.target_group.empty()) {
    start.meta["target_group"] = build.target_group;
    start.meta["target_members"] =
        detail::join_codes(build.ontology.group_members(build.ontology.find_group(build.ontology.depth(), build.target_group)));
  }

  TrainResult result;
  std::vector<std::string> inputs{req.build_dir};
  if (!req.checkpoint.empty()) inputs.push_back(req.checkpoint);
  std::uint64_t seed = 0;
  if (req.stage == Stage::kMemorize) {
    require_file(in / "memorize.jsonl");
    auto tc = cfg.memorize;
    tc.stage = Stage::kMemorize;
    seed = tc.seed;
    const auto mem = load_instances((in / "memorize.jsonl").string(), build.ontology, build.vocab);
    result = train_memorize(tc, start, mem);
  } else {
    for (const char* f : {"diagnose.jsonl", "dev.jsonl"}) require_file(in / f);
    auto tc = cfg.diagnose;
    tc.stage = req.stage;
    seed = tc.seed;
    const auto inst = load_instances((in / "diagnose.jsonl").string(), build.ontology, build.vocab);
    const auto dev = load_records((in / "dev.jsonl").string(), &build.ontology);
    result = train_stage_two(tc, start, inst, DiagnosisDev{&dev, build.corpus});
  }
  result.checkpoint.meta["stage"] = std::string(to_string(req.stage));
  save_checkpoint(result.checkpoint, (out / "model.ckpt").string());
  std::ostringstream csv;
  write_history_csv(csv, result.history);
  write_text(out / "history.csv", csv.str());
  write_manifest(out, "train --stage " + std::string(to_string(req.stage)), opts, seed, inputs,
                 {"model.ckpt", "history.csv"});
  return result;
}

inline void append_report_rows(std::ostream& out, const std::string& split, const EvalReport& r) {
  auto row = [&](const std::string& metric, double v) { out << 0 << ',' << split << ',' << metric << ',' << format_double(v) << '\n'; };
  for (const auto& [k, v] : r.recall_at) row("recall@" + std::to_string(k), v);
  for (const auto& [k, v] : r.rank_recall_at) row("rank_recall@" + std::to_string(k), v);
  row("weighted_f1", r.weighted_f1);
  row("mean_predicted", r.mean_predicted);
  if (r.auc) row("hf_auc", *r.auc);
  if (r.binary_f1) row("hf_f1", *r.binary_f1);
  if (r.hf_threshold) row("hf_threshold", *r.hf_threshold);
  row("n_patients", r.n_patients);
}

inline ojson report_json(const EvalReport& r) {
  ojson j;
  ojson rec, rank;
  for (const auto& [k, v] : r.recall_at) rec[std::to_string(k)] = v;
  for (const auto& [k, v] : r.rank_recall_at) rank[std::to_string(k)] = v;
  j["recall_at"] = rec;
  j["rank_recall_at"] = rank;
  j["weighted_f1"] = r.weighted_f1;
  j["auc"] = r.auc ? ojson(*r.auc) : ojson(nullptr);
  j["binary_f1"] = r.binary_f1 ? ojson(*r.binary_f1) : ojson(nullptr);
  j["hf_threshold"] = r.hf_threshold ? ojson(*r.hf_threshold) : ojson(nullptr);
  j["mean_predicted"] = r.mean_predicted;
  j["n_patients"] = r.n_patients;
  return j;
}

struct EvalOutcome {
  EvalReport dev;
  EvalReport test;
};

/// Dev picks the binary-task threshold; test is reported with it frozen.
inline EvalOutcome cmd_eval(const std::string& build_dir, const std::string& checkpoint, const std::vector<int>& ks,
                            const Options& opts) {
  const auto cfg = resolve_config(opts);
  const fs::path in(build_dir), out(opts.out_dir);
  for (const char* f : {"dev.jsonl", "test.jsonl"}) require_file(in / f);
  if (checkpoint.empty()) throw ValidationError("eval needs --checkpoint");
  const auto build = detail::load_build(in);
  const auto ck = load_checkpoint(checkpoint);
  if (!(ck.vocab == build.vocab)) throw ValidationError("checkpoint vocabulary does not match the build directory");
  ensure_dir(out);
  const auto model = ck.model();

  PredictOptions popts;
  popts.max_decode_steps = cfg.eval.max_decode_steps;
  popts.rank_k = std::min(ck.vocab.n_codes(), *std::max_element(ks.begin(), ks.end()));
  std::string target = cfg.eval.target_group.empty() ? build.target_group : cfg.eval.target_group;
  if (!target.empty()) popts.target_members = build.ontology.members(build.ontology.find_group(build.ontology.depth(), target));

  const auto dev = load_records((in / "dev.jsonl").string(), &build.ontology);
  const auto test = load_records((in / "test.jsonl").string(), &build.ontology);
  const auto dev_preds = predict_patients(model, ck.vocab, build.corpus, dev, popts);
  const auto test_preds = predict_patients(model, ck.vocab, build.corpus, test, popts);
  const auto threshold = choose_hf_threshold(dev_preds);
  EvalOutcome res{evaluate_predictions(dev_preds, ks, threshold), evaluate_predictions(test_preds, ks, threshold)};

  std::ostringstream csv;
  csv << "epoch,split,metric,value\n";
  append_report_rows(csv, "dev", res.dev);
  append_report_rows(csv, "test", res.test);
  write_text(out / "metrics.csv", csv.str());
  ojson rep;
  rep["dev"] = report_json(res.dev);
  rep["test"] = report_json(res.test);
  write_text(out / "report.json", rep.dump(2) + "\n");
  std::ostringstream preds;
  for (const auto& p : test_preds) preds << format_prediction(p) << '\n';
  write_text(out / "predictions.jsonl", preds.str());
  write_manifest(out, "eval", opts, cfg.diagnose.seed, {build_dir, checkpoint},
                 {"metrics.csv", "report.json", "predictions.jsonl"});
  return res;
}

/// Every visit of the patient is history; prints one prediction object.
inline std::string cmd_predict(const std::string& patient_file, const std::string& checkpoint, const Options& opts) {
  const auto cfg = resolve_config(opts);
  if (checkpoint.empty()) throw ValidationError("predict needs --checkpoint");
  const auto ck = load_checkpoint(checkpoint);
  const auto records = load_records(patient_file);
  if (records.size() != 1) throw ValidationError("predict expects exactly one patient record");
  for (const auto& v : records[0].visits) {
    for (const auto& c : v.codes) {
      if (!ck.vocab.find(c) || !ck.vocab.is_code(*ck.vocab.find(c))) throw ValidationError("unknown code " + c);
    }
  }
  PredictOptions popts;
  popts.max_decode_steps = cfg.eval.max_decode_steps;
  popts.target_members = detail::target_members_from_meta(ck);
  const auto p = predict_patient(ck.model(), ck.vocab, detail::corpus_from_meta(ck), records[0], popts, false);
  ojson j;
  j["patient_id"] = p.patient_id;
  j["predicted"] = p.predicted;
  j["hf_score"] = p.hf_score ? ojson(*p.hf_score) : ojson(nullptr);
  j["terminated_by_eov"] = p.terminated_by_eov;
  j["history_truncated"] = p.history_truncated;
  const std::string text = j.dump();
  if (opts.out_dir != ".") {
    ensure_dir(opts.out_dir);
    write_text(fs::path(opts.out_dir) / "prediction.json", text + "\n");
    write_manifest(opts.out_dir, "predict", opts, cfg.diagnose.seed, {patient_file, checkpoint}, {"prediction.json"});
  }
  return text;
}

/// Runs `fn`, mapping failures to exit codes with a one-line message on stderr.
template <class Fn>
int run_guarded(Fn&& fn) {
  try {
    fn();
    return kOk;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kValidation;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kDivergence;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}

}  // namespace mera::cli
