// mera: gen | build | train | eval | predict

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mera/cli.hpp"

namespace {

std::vector<int> parse_k_list(const std::string& text) {
  std::vector<int> ks;
  for (const auto& part : mera::detail::split(text, ',')) {
    std::size_t used = 0;
    int k = 0;
    try {
      k = std::stoi(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size() || k < 1) throw mera::ValidationError("--k expects a comma list of positive integers");
    ks.push_back(k);
  }
  if (ks.empty()) throw mera::ValidationError("--k is empty");
  return ks;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ontology memorization and next-visit diagnosis prediction"};
  app.require_subcommand(1);

  mera::cli::Options opts;
  std::uint64_t seed = 0;
  std::string checkpoint, stage = "memorize", ks = "10,20", input;
  bool cold_start = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "JSON config file");
    sub->add_option("--seed", seed, "override every seed in the config");
    sub->add_option("--out-dir", opts.out_dir, "output directory");
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic ontology, records and patient split");
  common(gen);
  auto* build = app.add_subcommand("build", "build vocabulary and training instances");
  common(build);
  build->add_option("gen_dir", input, "output directory of gen")->required();
  auto* train = app.add_subcommand("train", "train one stage");
  common(train);
  train->add_option("build_dir", input, "output directory of build")->required();
  train->add_option("--stage", stage, "memorize | diagnose | ce_control");
  train->add_option("--checkpoint", checkpoint, "starting checkpoint");
  train->add_flag("--allow-cold-start", cold_start, "stage two without a memorization checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on dev and test");
  common(eval);
  eval->add_option("build_dir", input, "output directory of build")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--k", ks, "comma list for recall@k");
  auto* predict = app.add_subcommand("predict", "predict the next visit of one patient");
  common(predict);
  predict->add_option("patient_file", input, "file with one patient record")->required();
  predict->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : mera::cli::kValidation;
  }
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) opts.seed = seed;
  }

  return mera::cli::run_guarded([&] {
    if (gen->parsed()) {
      mera::cli::cmd_gen(opts);
    } else if (build->parsed()) {
      mera::cli::cmd_build(input, opts);
    } else if (train->parsed()) {
      const auto r = mera::cli::cmd_train({input, mera::parse_stage(stage), checkpoint, cold_start}, opts);
      std::cout << "best_epoch " << r.best_epoch << " best_metric " << mera::format_double(r.best_metric) << '\n';
    } else if (eval->parsed()) {
      const auto r = mera::cli::cmd_eval(input, checkpoint, parse_k_list(ks), opts);
      for (const auto& [k, v] : r.test.recall_at) std::cout << "test recall@" << k << ' ' << mera::format_double(v) << '\n';
      std::cout << "test weighted_f1 " << mera::format_double(r.test.weighted_f1) << '\n';
    } else if (predict->parsed()) {
      std::cout << mera::cli::cmd_predict(input, checkpoint, opts) << '\n';
    }
  });
}
