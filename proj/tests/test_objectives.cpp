#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mera/objectives.hpp"
#include "oracles.hpp"

using namespace mera;

namespace {

// Candidates: A=0, B=1, C=2, then EOV.
DiagnosisSupervision sup_with(std::vector<int> pos, std::vector<GroupTerm> terms, std::vector<int> prefix = {}) {
  DiagnosisSupervision s;
  s.positives = std::move(pos);
  s.known_prefix = std::move(prefix);
  s.group_terms = std::move(terms);
  return s;
}

CandidateDistribution dist_of(std::vector<double> p) {
  CandidateDistribution d;
  d.probs = std::move(p);
  return d;
}

struct RandomCase {
  oracle::Hierarchy h;
  Ontology o;
  std::vector<double> logits;  // codes + EOV
  std::set<int> positives;
  DiagnosisSupervision sup;
};

RandomCase random_case(Rng& rng) {
  RandomCase rc;
  rc.h = oracle::random_hierarchy(rng, 29, 4);
  rc.o = rc.h.ontology();
  const int n = rc.h.n_codes;
  for (int i = 0; i <= n; ++i) rc.logits.push_back(4.0 * standard_normal(rng));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  shuffle_in_place(order, rng);
  const int n_prefix = uniform_int(rng, 0, n - 1);
  const int n_pos = uniform_int(rng, 1, n - n_prefix);
  std::vector<int> prefix(order.begin(), order.begin() + n_prefix);
  std::vector<int> pos(order.begin() + n_prefix, order.begin() + n_prefix + n_pos);
  rc.positives.insert(pos.begin(), pos.end());
  rc.sup = make_supervision(rc.o, pos, prefix);
  return rc;
}

}  // namespace

TEST(RestrictSoftmax, WorkedExample) {
  // A:1, B:0, EOV:0, then two text tokens that must not matter
  const std::vector<double> logits{1.0, 0.0, 0.0, 50.0, -3.0};
  const auto d = restrict_softmax(logits, 3);
  const double e = std::exp(1.0);
  EXPECT_NEAR(d.probs[0], e / (e + 2), 1e-12);
  EXPECT_NEAR(d.probs[0], 0.57611, 1e-5);
  EXPECT_NEAR(d.probs[1], 0.21194, 1e-5);
  EXPECT_NEAR(d.eov(), 0.21194, 1e-5);
}

TEST(RestrictSoftmax, EqualLogitsGiveUniform) {
  const std::vector<double> logits(7, 2.5);
  const auto d = restrict_softmax(logits, 7);
  for (double p : d.probs) EXPECT_NEAR(p, 1.0 / 7, 1e-15);
}

TEST(RestrictSoftmax, ShiftInvariantAndRankPreserving) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> z(12);
    for (auto& v : z) v = 10 * standard_normal(rng);
    auto shifted = z;
    for (auto& v : shifted) v += 123.0;
    const auto a = restrict_softmax(z, 12), b = restrict_softmax(shifted, 12);
    double sum = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      EXPECT_NEAR(a.probs[i], b.probs[i], 1e-12);
      sum += a.probs[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_EQ(std::max_element(z.begin(), z.end()) - z.begin(),
              std::max_element(a.probs.begin(), a.probs.end()) - a.probs.begin());
  }
}

TEST(RestrictSoftmax, RejectsNonFinite) {
  const std::vector<double> z{0.0, std::nan(""), 1.0};
  EXPECT_THROW(restrict_softmax(z, 3), ValidationError);
  const std::vector<double> inf{0.0, 1.0, INFINITY};
  EXPECT_THROW(restrict_softmax(inf, 3), ValidationError);
  // outside the candidate range a bad value is ignored
  EXPECT_NO_THROW(restrict_softmax(inf, 2));
}

TEST(CeLoss, UniformOverFourTokens) {
  Matrix z = Matrix::Zero(1, 4);
  const std::vector<int> t{2};
  EXPECT_NEAR(ce_loss_grad(z, t).value, std::log(4.0), 1e-12);
}

TEST(CeLoss, CertainGoldIsZero) {
  Matrix z = Matrix::Constant(3, 5, -800.0);
  const std::vector<int> t{1, 4, 0};
  for (int r = 0; r < 3; ++r) z(r, t[static_cast<std::size_t>(r)]) = 800.0;
  EXPECT_NEAR(ce_loss_grad(z, t).value, 0.0, 1e-12);
}

TEST(CeLoss, MatchesBruteForceOnCompletionOnly) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int len = uniform_int(rng, 2, 9), vocab = uniform_int(rng, 2, 12);
    const int input_len = uniform_int(rng, 1, len - 1);
    Matrix z(len, vocab);
    for (int i = 0; i < z.size(); ++i) z.data()[i] = 3 * standard_normal(rng);
    std::vector<int> completion;
    for (int j = input_len; j < len; ++j) completion.push_back(uniform_int(rng, 0, vocab - 1));
    // rows input_len-1 .. len-2 score the completion
    std::vector<std::vector<double>> rows;
    for (std::size_t j = 0; j < completion.size(); ++j) {
      const auto r = z.row(input_len - 1 + static_cast<Eigen::Index>(j));
      rows.emplace_back(r.data(), r.data() + r.size());
    }
    EXPECT_NEAR(ce_loss(z, input_len, completion), static_cast<double>(oracle::ce_loss(rows, completion)), 1e-12);
  }
}

TEST(CeLoss, LengthMismatchThrows) {
  Matrix z = Matrix::Zero(3, 4);
  const std::vector<int> t{1, 2, 3};
  EXPECT_THROW(ce_loss(z, 2, t), ValidationError);
  EXPECT_THROW(ce_loss_grad(z, std::vector<int>{1}), ValidationError);
}

TEST(HierarchicalCl, WorkedExample) {
  // group {A,B}, pos {A}, p(A)=0.5, p(B)=0.3
  const auto d = dist_of({0.5, 0.3, 0.0, 0.2});
  const auto s = sup_with({0}, {GroupTerm{GroupId{1, 0}, {0}, {0, 1}}});
  EXPECT_NEAR(hierarchical_cl_loss(d, s), -std::log(0.5 / 0.8), 1e-12);
  EXPECT_NEAR(hierarchical_cl_loss(d, s), 0.47000, 5e-6);
}

TEST(HierarchicalCl, ZeroMassNegativesGiveZero) {
  const auto d = dist_of({0.6, 0.0, 0.0, 0.4});
  const auto s = sup_with({0}, {GroupTerm{GroupId{1, 0}, {0}, {0, 1, 2}}});
  EXPECT_DOUBLE_EQ(hierarchical_cl_loss(d, s), 0.0);
}

TEST(HierarchicalCl, UnderflowingGroupThrows) {
  const auto d = dist_of({0.0, 0.0, 0.5, 0.5});
  const auto s = sup_with({0}, {GroupTerm{GroupId{1, 0}, {0}, {0, 1}}});
  EXPECT_THROW(hierarchical_cl_loss(d, s), NumericError);
}

TEST(HierarchicalCl, TwoLevelToyIsSumOfTerms) {
  // root {A,B,C,D}; level 1: {A,B} {C,D}; pos {A, C}
  const auto d = dist_of({0.3, 0.1, 0.25, 0.15, 0.2});
  const auto s = sup_with({0, 2}, {GroupTerm{GroupId{0, 0}, {0, 2}, {0, 1, 2, 3}},
                                   GroupTerm{GroupId{1, 0}, {0}, {0, 1}}, GroupTerm{GroupId{1, 1}, {2}, {2, 3}}});
  const double want = -std::log(0.55 / 0.8) - std::log(0.3 / 0.4) - std::log(0.25 / 0.4);
  EXPECT_NEAR(hierarchical_cl_loss(d, s), want, 1e-12);
}

TEST(HierarchicalCl, MatchesReferenceOnRandomHierarchies) {
  Rng rng(5);
  for (int t = 0; t < 300; ++t) {
    const auto rc = random_case(rng);
    const auto d = restrict_softmax(rc.logits, static_cast<int>(rc.logits.size()));
    const auto ref = oracle::cl_loss(oracle::softmax(rc.logits), rc.h, rc.positives);
    EXPECT_NEAR(hierarchical_cl_loss(d, rc.sup), static_cast<double>(ref), 1e-9);
    EXPECT_NEAR(hierarchical_cl_grad(rc.logits, rc.sup).value, static_cast<double>(ref), 1e-9);
    EXPECT_GE(hierarchical_cl_loss(d, rc.sup), 0.0);
  }
}

TEST(DynamicCe, WorkedExample) {
  // p_EOV=0.2, pos {A:0.5}, neg {B:0.3, C:0.0}
  const auto d = dist_of({0.5, 0.3, 0.0, 0.2});
  const auto s = sup_with({0}, {});
  EXPECT_NEAR(dynamic_ce_loss(d, s), std::log(1.1), 1e-12);
  EXPECT_NEAR(dynamic_ce_loss(d, s), 0.09531, 5e-6);
}

TEST(DynamicCe, OrderedDistributionIsZero) {
  const auto d = dist_of({0.4, 0.05, 0.3, 0.05, 0.2});
  EXPECT_DOUBLE_EQ(dynamic_ce_loss(d, sup_with({0, 2}, {})), 0.0);
}

TEST(DynamicCe, KnownPrefixCountsAsNegative) {
  // B sits above EOV but is already known: it is a violation
  const auto d = dist_of({0.4, 0.35, 0.05, 0.2});
  EXPECT_NEAR(dynamic_ce_loss(d, sup_with({0}, {}, {1})), std::log(1.15), 1e-12);
}

TEST(DynamicCe, MatchesReferenceOnRandomInstances) {
  Rng rng(6);
  for (int t = 0; t < 300; ++t) {
    const auto rc = random_case(rng);
    const auto d = restrict_softmax(rc.logits, static_cast<int>(rc.logits.size()));
    const auto ref = oracle::dce_loss(oracle::softmax(rc.logits), rc.positives);
    EXPECT_NEAR(dynamic_ce_loss(d, rc.sup), static_cast<double>(ref), 1e-9);
    EXPECT_NEAR(dynamic_ce_grad(rc.logits, rc.sup).value, static_cast<double>(ref), 1e-9);
    EXPECT_GE(dynamic_ce_loss(d, rc.sup), 0.0);
  }
}

TEST(DynamicCe, TieHasZeroSubgradient) {
  // A ties EOV, B is below it
  const std::vector<double> tie{1.0, 0.0, 1.0};
  const auto g = dynamic_ce_grad(tie, sup_with({0}, {}));
  EXPECT_DOUBLE_EQ(g.value, 0.0);
  for (double v : g.grad) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Objectives, GradientsMatchCentralDifferences) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const auto rc = random_case(rng);
    const auto cl = hierarchical_cl_grad(rc.logits, rc.sup);
    const auto dce = dynamic_ce_grad(rc.logits, rc.sup);
    // finite differences of the independent long double references
    auto f_cl = [&](const std::vector<double>& z) { return oracle::cl_loss(oracle::softmax(z), rc.h, rc.positives); };
    auto f_dce = [&](const std::vector<double>& z) { return oracle::dce_loss(oracle::softmax(z), rc.positives); };
    const double h = std::ldexp(1.0, -13);
    for (std::size_t i = 0; i < rc.logits.size(); ++i) {
      EXPECT_LE(oracle::rel_err(cl.grad[i], oracle::central_diff_ld(f_cl, rc.logits, i, h), 1e-6), 1e-6);
      EXPECT_LE(oracle::rel_err(dce.grad[i], oracle::central_diff_ld(f_dce, rc.logits, i, h), 1e-6), 1e-6);
    }
  }
}

TEST(Objectives, CeGradientMatchesCentralDifferences) {
  Rng rng(8);
  Matrix z(4, 6);
  for (int i = 0; i < z.size(); ++i) z.data()[i] = 2 * standard_normal(rng);
  const std::vector<int> t{0, 5, 2, 2};
  const auto g = ce_loss_grad(z, t);
  std::vector<double> flat(z.data(), z.data() + z.size());
  auto f = [&](const std::vector<double>& x) { return ce_loss_grad(Eigen::Map<const Matrix>(x.data(), 4, 6), t).value; };
  for (std::size_t i = 0; i < flat.size(); ++i) {
    EXPECT_LE(oracle::rel_err(g.grad[i], oracle::central_diff(f, flat, i, 1e-6), 1e-6), 1e-6);
  }
}

TEST(Objectives, RaisingAPositiveNeverHurts) {
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    const auto rc = random_case(rng);
    const int c = *rc.positives.begin();
    auto z = rc.logits;
    const double cl0 = hierarchical_cl_grad(z, rc.sup).value, dce0 = dynamic_ce_grad(z, rc.sup).value;
    z[static_cast<std::size_t>(c)] += 0.5;
    EXPECT_LE(hierarchical_cl_grad(z, rc.sup).value, cl0 + 1e-12);
    EXPECT_LE(dynamic_ce_grad(z, rc.sup).value, dce0 + 1e-12);
  }
}

TEST(TotalLoss, WeightsAndMeans) {
  const auto d1 = dist_of({0.5, 0.3, 0.0, 0.2});
  const auto d2 = dist_of({0.1, 0.6, 0.1, 0.2});
  const auto s = sup_with({0}, {GroupTerm{GroupId{1, 0}, {0}, {0, 1}}});
  const ScoredVariant one[] = {{&d1, &s}};
  EXPECT_NEAR(total_diagnosis_loss(one), hierarchical_cl_loss(d1, s) + dynamic_ce_loss(d1, s), 1e-15);
  const ScoredVariant two[] = {{&d1, &s}, {&d2, &s}};
  const double per1 = hierarchical_cl_loss(d1, s) + dynamic_ce_loss(d1, s);
  const double per2 = hierarchical_cl_loss(d2, s) + dynamic_ce_loss(d2, s);
  EXPECT_NEAR(total_diagnosis_loss(two), (per1 + per2) / 2, 1e-15);
  EXPECT_NEAR(total_diagnosis_loss(two, {1.0, 0.0}), (hierarchical_cl_loss(d1, s) + hierarchical_cl_loss(d2, s)) / 2, 1e-15);
  EXPECT_THROW(total_diagnosis_loss(std::span<const ScoredVariant>{}), ValidationError);
}
