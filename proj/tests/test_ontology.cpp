#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "mera/ontology.hpp"
#include "mera/synthgen.hpp"

using namespace mera;

namespace {

Ontology parse(const std::string& text) {
  std::istringstream in(text);
  return parse_ontology(in);
}

const char* kIcdToy =
    "#depth=2\n"
    "#name=ICD-9\n"
    "998.51\tInfected postoperative seroma\tInjury and Poisoning\tComplications of surgical and medical care\n"
    "998.59\tOther postoperative infection\tInjury and Poisoning\tComplications of surgical and medical care\n"
    "250.23\tDiabetes with hyperosmolarity, type I [juvenile type], uncontrolled\tEndocrine, Nutritional and "
    "Metabolic Diseases\tDiabetes mellitus\n"
    "428.0\tCongestive heart failure, unspecified\tDiseases of the Circulatory System\tHeart failure\n";

}  // namespace

TEST(Ontology, SmallestHierarchy) {
  const auto o = parse("#depth=2\nA\talpha\tG1\tG1a\nB\tbeta\tG1\tG1b\nC\tgamma\tG2\tG2a\n");
  EXPECT_EQ(o.depth(), 2);
  EXPECT_EQ(o.size(), 3u);
  EXPECT_EQ(o.group_count(0), 1u);
  EXPECT_EQ(o.group_count(1), 2u);
  EXPECT_EQ(o.group_count(2), 3u);
  EXPECT_EQ(o.name(), "ICD-9");
}

TEST(Ontology, PartitionViolation) {
  EXPECT_THROW(parse("#depth=1\nA\talpha\tG1\nA\talpha\tG2\nB\tbeta\tG2\n"), ValidationError);
  try {
    parse("#depth=1\nA\talpha\tG1\nA\talpha\tG2\n");
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("partition"), std::string::npos);
  }
}

TEST(Ontology, ValidationErrors) {
  EXPECT_THROW(parse("#depth=1\nA\talpha\tG1\nA\tbeta\tG1\n"), ValidationError);     // duplicate code
  EXPECT_THROW(parse("#depth=1\nA\talpha\tG1\nB\talpha\tG1\n"), ValidationError);    // duplicate definition
  EXPECT_THROW(parse("#depth=2\nA\talpha\tG1\tX\nB\tbeta\tG2\tX\n"), ValidationError);  // X under two parents
  EXPECT_THROW(parse("#depth=2\nA\talpha\tG1\t\n"), ValidationError);                // empty label
  EXPECT_THROW(parse("#depth=2\nA\talpha\tG1\n"), ValidationError);                  // missing column
  EXPECT_THROW(parse("A\talpha\tG1\n"), ValidationError);                            // no header
  EXPECT_THROW(parse("#depth=x\nA\talpha\tG1\n"), ValidationError);
  EXPECT_THROW(parse("#depth=1\nA B\talpha\tG1\n"), ValidationError);                // whitespace in code
  EXPECT_THROW(parse("#depth=1\n"), ValidationError);                                // no leaves
  EXPECT_THROW(load_ontology("/nonexistent/ontology.tsv"), IoError);
}

TEST(Ontology, GroupsOfPaperExample) {
  const auto o = parse(kIcdToy);
  const auto g = o.groups_of("998.51");
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0], (GroupId{0, 0}));
  EXPECT_EQ(o.group(g[1]).label, "Injury and Poisoning");
  EXPECT_EQ(o.group(g[2]).label, "Complications of surgical and medical care");
  EXPECT_THROW(o.groups_of("999.99"), ValidationError);
}

TEST(Ontology, DefinitionBijection) {
  const auto o = parse(kIcdToy);
  EXPECT_EQ(o.definition_of("250.23"), "Diabetes with hyperosmolarity, type I [juvenile type], uncontrolled");
  for (const auto& leaf : o.leaves()) EXPECT_EQ(o.code_of(o.definition_of(leaf.code)), leaf.code);
  EXPECT_THROW(o.code_of("not a definition"), ValidationError);
  EXPECT_THROW(o.definition_of("000"), ValidationError);
}

TEST(Ontology, GroupMembers) {
  const auto o = parse(kIcdToy);
  EXPECT_EQ(o.group_members(GroupId{0, 0}).size(), o.size());
  EXPECT_EQ(o.group_members(o.find_group(2, "Heart failure")), std::vector<CodeId>{"428.0"});
  EXPECT_THROW(o.group_members(GroupId{2, 99}), ValidationError);
  EXPECT_THROW(o.group_members(GroupId{3, 0}), ValidationError);
  EXPECT_THROW(o.find_group(1, "Nope"), ValidationError);
}

TEST(Ontology, SingletonFinestLevel) {
  const auto o = parse("#depth=2\nA\talpha\tG\tA\nB\tbeta\tG\tB\nC\tgamma\tH\tC\n");
  for (std::size_t i = 0; i < o.group_count(2); ++i) EXPECT_EQ(o.members(GroupId{2, static_cast<int>(i)}).size(), 1u);
}

TEST(Ontology, FormatRoundTrip) {
  const auto o = parse(kIcdToy);
  const auto again = parse(format_ontology(o));
  EXPECT_EQ(format_ontology(again), format_ontology(o));
  EXPECT_EQ(again.name(), "ICD-9");
}

TEST(Ontology, SyntheticCountsMatchGenerator) {
  GenConfig cfg;  // 200 leaves, depth 3
  const auto truth = generate_ontology_with_truth(cfg);
  const auto o = parse(format_ontology(truth.ontology));
  EXPECT_EQ(o.depth(), 3);
  EXPECT_EQ(o.size(), 200u);
  for (int j = 0; j <= 3; ++j) EXPECT_EQ(static_cast<int>(o.group_count(j)), truth.groups_per_level[static_cast<std::size_t>(j)]);
  EXPECT_EQ(truth.groups_per_level, (std::vector<int>{1, 5, 20, 40}));
  // fine-level membership equals the generator's own assignment
  std::map<int, std::set<int>> by_truth;
  for (int leaf = 0; leaf < 200; ++leaf) by_truth[truth.leaf_fine_group[static_cast<std::size_t>(leaf)]].insert(leaf);
  std::set<std::set<int>> from_truth, from_table;
  for (const auto& [g, m] : by_truth) from_truth.insert(m);
  for (std::size_t i = 0; i < o.group_count(3); ++i) {
    const auto& m = o.members(GroupId{3, static_cast<int>(i)});
    from_table.insert(std::set<int>(m.begin(), m.end()));
  }
  EXPECT_EQ(from_truth, from_table);
}

TEST(OntologyProperties, PartitionNestingAndPrefixes) {
  GenConfig cfg;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    cfg.seed = seed;
    const auto o = generate_ontology(cfg);
    for (int j = 0; j <= o.depth(); ++j) {
      std::vector<int> seen(o.size(), 0);
      for (std::size_t g = 0; g < o.group_count(j); ++g) {
        const auto& m = o.members(GroupId{j, static_cast<int>(g)});
        EXPECT_FALSE(m.empty());
        for (int leaf : m) ++seen[static_cast<std::size_t>(leaf)];
      }
      for (int s : seen) EXPECT_EQ(s, 1);  // disjoint and covering
    }
    for (int leaf = 0; leaf < static_cast<int>(o.size()); ++leaf) {
      const auto path = o.groups_of_leaf(leaf);
      ASSERT_EQ(static_cast<int>(path.size()), o.depth() + 1);
      for (int j = 0; j < o.depth(); ++j) {
        const auto& outer = o.members(path[static_cast<std::size_t>(j)]);
        const std::set<int> outer_set(outer.begin(), outer.end());
        for (int m : o.members(path[static_cast<std::size_t>(j) + 1])) EXPECT_TRUE(outer_set.count(m));
      }
    }
    // leaves sharing a level-2 group share the whole prefix
    const auto& g2 = o.members(GroupId{2, 0});
    if (g2.size() >= 2) {
      const auto a = o.groups_of_leaf(g2[0]), b = o.groups_of_leaf(g2[1]);
      EXPECT_TRUE(std::equal(a.begin(), a.begin() + 3, b.begin()));
    }
  }
}
