#include <gtest/gtest.h>

#include "mera/config.hpp"

using namespace mera;

TEST(Config, EmptyDocumentKeepsDefaults) {
  const auto c = parse_config_text("{}");
  EXPECT_EQ(c.gen.n_patients, 500);
  EXPECT_DOUBLE_EQ(c.gen.progression_strength, 0.8);
  EXPECT_EQ(c.corpus.n_perturb, 2);
  EXPECT_EQ(c.memorize.stage, Stage::kMemorize);
  EXPECT_EQ(c.diagnose.stage, Stage::kDiagnose);
  EXPECT_DOUBLE_EQ(c.diagnose.weights.cl, 1.0);
  EXPECT_DOUBLE_EQ(c.diagnose.weights.dce, 1.0);
  EXPECT_EQ(c.eval.k, (std::vector<int>{10, 20}));
}

TEST(Config, SectionsOverride) {
  const auto c = parse_config_text(R"({
    "gen": {"n_patients": 40, "codes_per_visit": [1, 3], "branching": [5, 4, 2], "ontology_name": "X"},
    "split": {"train": 0.6, "dev": 0.2, "test": 0.2, "seed": 9},
    "corpus": {"n_perturb": 3, "visit_prompt": "Codes:"},
    "model": {"d_model": 32, "n_heads": 4, "dropout": 0.1},
    "memorize": {"epochs_max": 7, "optimizer": "sgd", "mem_cl_weight": 0.0},
    "diagnose": {"lambda_cl": 0.0, "lambda_dce": 2.5, "stage": "ce_control"},
    "eval": {"k": [5], "target_group": "abc"}
  })");
  EXPECT_EQ(c.gen.n_patients, 40);
  EXPECT_EQ(c.gen.codes_per_visit.min, 1);
  EXPECT_EQ(c.gen.codes_per_visit.max, 3);
  EXPECT_EQ(c.gen.ontology_name, "X");
  EXPECT_DOUBLE_EQ(c.split.train, 0.6);
  EXPECT_EQ(c.split_seed, 9u);
  EXPECT_EQ(c.corpus.n_perturb, 3);
  EXPECT_EQ(c.corpus.visit_prompt, "Codes:");
  EXPECT_EQ(c.model.d_model, 32);
  EXPECT_DOUBLE_EQ(c.model.dropout, 0.1);
  EXPECT_EQ(c.memorize.epochs_max, 7);
  EXPECT_EQ(c.memorize.optimizer.kind, OptimizerConfig::Kind::kSgd);
  EXPECT_DOUBLE_EQ(c.memorize.mem_cl_weight, 0.0);
  EXPECT_DOUBLE_EQ(c.diagnose.weights.cl, 0.0);
  EXPECT_DOUBLE_EQ(c.diagnose.weights.dce, 2.5);
  EXPECT_EQ(c.diagnose.stage, Stage::kCeControl);
  EXPECT_EQ(c.eval.k, std::vector<int>{5});
  EXPECT_EQ(c.eval.target_group, "abc");
}

TEST(Config, TopLevelSeedFansOutAndSectionsWin) {
  const auto c = parse_config_text(R"({"seed": 42, "model": {"init_seed": 3}})");
  EXPECT_EQ(c.gen.seed, 42u);
  EXPECT_EQ(c.split_seed, 42u);
  EXPECT_EQ(c.corpus.seed, 42u);
  EXPECT_EQ(c.memorize.seed, 42u);
  EXPECT_EQ(c.diagnose.seed, 42u);
  EXPECT_EQ(c.model.init_seed, 3u);
}

TEST(Config, RejectsBadDocuments) {
  EXPECT_THROW(parse_config_text("{"), ValidationError);
  EXPECT_THROW(parse_config_text("[]"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"colour": 1})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"gen": {"n_patient": 1}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"gen": {"n_patients": "many"}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"gen": {"progression_strength": 1.5}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"gen": {"codes_per_visit": [1]}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"corpus": {"n_perturb": 0}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"memorize": {"optimizer": "lbfgs"}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"diagnose": {"batch_size": 0}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"diagnose": {"stage": "pretrain"}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"diagnose": {"stage": 3}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"eval": {"k": [0]}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"seed": "x"})"), ValidationError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), IoError);
}
