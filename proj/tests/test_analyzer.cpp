#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace mmoe;
using namespace mmoe::testing;

namespace {

ActivationCounter random_counter(Rng& rng, std::size_t layers, std::size_t experts, const std::string& domain) {
  ActivationCounter c(layers, experts, domain);
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t e = 0; e < experts; ++e) {
      c.add(l, e, Modality::Visual, rng.below(50));
      c.add(l, e, Modality::Text, rng.below(3) ? rng.below(50) : 0);
    }
  for (std::size_t l = 0; l < layers; ++l) {
    c.add(l, 0, Modality::Visual);
    c.add(l, 1, Modality::Text);
  }
  return c;
}

RoutingRecord one_token(std::size_t layer, Modality m, std::vector<std::size_t> experts) {
  RoutingRecord r;
  r.layer_index = layer;
  r.n_routed = 8;
  r.top_k = experts.size();
  TokenRoute t;
  t.selected = std::move(experts);
  t.modality = m;
  r.tokens.push_back(t);
  return r;
}

}  // namespace

TEST(ActivationCounter, EmptyRecordLeavesCounterUnchanged) {
  ActivationCounter c(2, 8);
  const auto before = c;
  RoutingRecord r;
  r.layer_index = 1;
  c.record(r);
  EXPECT_EQ(c, before);
}

TEST(ActivationCounter, VisualTokenIncrementsSelectedExperts) {
  ActivationCounter c(1, 8);
  c.record(one_token(0, Modality::Visual, {3, 7}));
  EXPECT_EQ(c.visual(0, 3), 1u);
  EXPECT_EQ(c.visual(0, 7), 1u);
  EXPECT_EQ(c.visual_total(0), 2u);
  EXPECT_EQ(c.text_total(0), 0u);
}

TEST(ActivationCounter, OutOfRangeIndicesRejectedWithoutPartialUpdate) {
  ActivationCounter c(1, 8);
  EXPECT_THROW(c.record(one_token(1, Modality::Text, {0})), std::out_of_range);
  EXPECT_THROW(c.record(one_token(0, Modality::Text, {2, 8})), std::out_of_range);
  EXPECT_EQ(c.text(0, 2), 0u);
  EXPECT_THROW(c.add(0, 9, Modality::Text), std::out_of_range);
  TraceEntry e;
  e.layer = 3;
  e.experts = {0};
  EXPECT_THROW(c.record(e), std::out_of_range);
}

TEST(ActivationCounter, MergeIsCommutativeAndAssociative) {
  Rng rng(1);
  auto a = random_counter(rng, 3, 6, "video"), b = random_counter(rng, 3, 6, "video"),
       c = random_counter(rng, 3, 6, "video");
  auto ab = a;
  ab.merge(b);
  auto ba = b;
  ba.merge(a);
  EXPECT_EQ(ab, ba);
  auto ab_c = ab;
  ab_c.merge(c);
  auto bc = b;
  bc.merge(c);
  auto a_bc = a;
  a_bc.merge(bc);
  EXPECT_EQ(ab_c, a_bc);
  EXPECT_EQ(compute_specialization(ab_c), compute_specialization(a_bc));
  EXPECT_THROW(a.merge(ActivationCounter(3, 6, "pdf-like")), std::invalid_argument);
  EXPECT_THROW(a.merge(ActivationCounter(2, 6, "video")), std::invalid_argument);
}

TEST(ActivationCounter, ReplayEqualsLiveRecording) {
  Rng rng(2);
  MoEConfig mc;
  mc.n_routed = 8;
  mc.n_shared = 1;
  mc.top_k = 2;
  mc.expert_ffn_dim = 4;
  mc.group_size = 2;
  const auto path = (scratch_dir("replay") / "trace.bin").string();
  ActivationCounter live(3, 8);
  {
    TraceWriter w(path, 8, 2);
    for (std::size_t layer = 0; layer < 3; ++layer) {
      MoELayer moe(mc, 6, rng);
      auto x = random_tensor(rng, {9, 6});
      std::vector<Modality> mods(9, Modality::Text);
      for (std::size_t i = 0; i < 4; ++i) mods[i] = Modality::Visual;
      auto out = moe.forward(x, mods, layer);
      live.record(out.record);
      w.write(out.record);
    }
  }
  EXPECT_EQ(replay_trace(read_trace(path)), live);
  EXPECT_EQ(replay_trace(read_trace(path), "natural-image", 3), live);
}

TEST(Specialization, EqualRatesGiveOne) {
  ActivationCounter c(1, 2);
  c.add(0, 0, Modality::Visual, 3);
  c.add(0, 1, Modality::Visual, 3);
  c.add(0, 0, Modality::Text, 5);
  c.add(0, 1, Modality::Text, 5);
  auto m = compute_specialization(c);
  EXPECT_EQ(m.at("natural-image", 0, 0).specialization, 1.0);
}

TEST(Specialization, NeverTextSometimesVisualHitsCap) {
  ActivationCounter c(1, 2);
  c.add(0, 0, Modality::Visual, 2);
  c.add(0, 1, Modality::Visual, 5);
  c.add(0, 1, Modality::Text, 7);
  auto m = compute_specialization(c);
  EXPECT_EQ(m.at("natural-image", 0, 0).specialization, 50.0);
  EXPECT_EQ(m.at("natural-image", 0, 0).r_t, 0.0);
}

TEST(Specialization, PlantedCountsCapAtFifty) {
  ActivationCounter c(1, 4);
  c.add(0, 0, Modality::Visual, 30);
  c.add(0, 1, Modality::Visual, 30);
  c.add(0, 0, Modality::Text, 1);
  c.add(0, 2, Modality::Text, 99);
  auto m = compute_specialization(c);
  const auto& cell = m.at("natural-image", 0, 0);
  EXPECT_NEAR(cell.r_v, 0.5, 1e-15);
  EXPECT_NEAR(cell.r_t, 0.01, 1e-15);
  EXPECT_EQ(cell.specialization, 50.0);
  EXPECT_EQ(m.at("natural-image", 0, 3).specialization, 0.0);
  EXPECT_EQ(compute_specialization(c, 100.0).at("natural-image", 0, 0).specialization, 0.5 / 0.01);
}

TEST(Specialization, EmptyModalityLayerIsFlagged) {
  ActivationCounter c(2, 2);
  c.add(0, 0, Modality::Visual, 2);
  c.add(0, 1, Modality::Text, 2);
  c.add(1, 0, Modality::Text, 4);
  auto m = compute_specialization(c);
  ASSERT_EQ(m.flagged.size(), 1u);
  EXPECT_EQ(m.flagged[0].layer, 1u);
  EXPECT_EQ(m.flagged[0].reason, "no visual tokens");
  EXPECT_THROW(m.at("natural-image", 1, 0), std::out_of_range);
  EXPECT_THROW(compute_specialization(c, 0.0), std::invalid_argument);
}

TEST(Specialization, RatesSumToOneAndStayInRange) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    auto c = random_counter(rng, 4, 12, "natural-image");
    auto m = compute_specialization(c);
    for (std::size_t l = 0; l < 4; ++l) {
      double sv = 0, st = 0;
      for (std::size_t e = 0; e < 12; ++e) {
        const auto& cell = m.at("natural-image", l, e);
        sv += cell.r_v;
        st += cell.r_t;
        EXPECT_GE(cell.specialization, 0.0);
        EXPECT_LE(cell.specialization, 50.0);
      }
      EXPECT_NEAR(sv, 1.0, 1e-9);
      EXPECT_NEAR(st, 1.0, 1e-9);
    }
  }
}

TEST(Specialization, ScalingCountsLeavesValuesUnchanged) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto c = random_counter(rng, 2, 8, "natural-image");
    const std::uint64_t k = 2 + rng.below(9);
    ActivationCounter scaled(2, 8);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t e = 0; e < 8; ++e) {
        scaled.add(l, e, Modality::Visual, k * c.visual(l, e));
        scaled.add(l, e, Modality::Text, k * c.text(l, e));
      }
    auto a = compute_specialization(c), b = compute_specialization(scaled);
    ASSERT_EQ(a.cells.size(), b.cells.size());
    for (std::size_t i = 0; i < a.cells.size(); ++i)
      EXPECT_NEAR(a.cells[i].specialization, b.cells[i].specialization, 1e-12 * (1 + a.cells[i].specialization));
  }
}

TEST(Export, CsvRowsAndParseBack) {
  std::vector<ActivationCounter> per_domain;
  Rng rng(3);
  for (const auto& d : specialization_domains()) per_domain.push_back(random_counter(rng, 1, 2, d));
  auto m = compute_specialization(per_domain);
  const auto csv = specialization_csv(m);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 3);
  EXPECT_EQ(m.domains(), specialization_domains());
  auto back = parse_specialization_csv(csv);
  EXPECT_EQ(back.cells, m.cells);
  EXPECT_THROW(parse_specialization_csv("layer,expert\n"), FormatError);
  EXPECT_THROW(parse_specialization_csv("layer,expert,domain,R_v,R_t,specialization\n0,x,video,1,1,1\n"), FormatError);
  EXPECT_THROW(parse_specialization_csv("layer,expert,domain,R_v,R_t,specialization\n0,1,video\n"), FormatError);
}

TEST(Export, SvgDeterministicWithLegend) {
  Rng r1(4), r2(4);
  auto a = compute_specialization(random_counter(r1, 3, 10, "video"));
  auto b = compute_specialization(random_counter(r2, 3, 10, "video"));
  const auto svg = specialization_svg(a);
  EXPECT_EQ(svg, specialization_svg(b));
  EXPECT_NE(svg.find("legend"), std::string::npos);
  EXPECT_NE(svg.find("capped at 50"), std::string::npos);
  EXPECT_EQ(heat_color(0, 50), "#ffffff");
  EXPECT_EQ(heat_color(50, 50), "#8c0000");
  EXPECT_EQ(heat_color(500, 50), "#8c0000");

  const auto dir = scratch_dir("heatmap");
  export_heatmap(a, (dir / "a").string());
  export_heatmap(b, (dir / "b").string());
  EXPECT_EQ(slurp(dir / "a.svg"), slurp(dir / "b.svg"));
  EXPECT_EQ(slurp(dir / "a.csv"), specialization_csv(a));
  EXPECT_THROW(export_heatmap(SpecializationMatrix{}, (dir / "c").string()), std::invalid_argument);
  EXPECT_THROW(export_heatmap(a, (dir / "missing" / "x").string()), std::runtime_error);
}
