#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "grad_cases.hpp"

using namespace mmoe;
using namespace mmoe::testing;

namespace {

MoEConfig small_config(std::size_t routed = 4, std::size_t shared = 1, std::size_t k = 2, std::size_t group = 2) {
  MoEConfig c;
  c.n_routed = routed;
  c.n_shared = shared;
  c.top_k = k;
  c.expert_ffn_dim = 5;
  c.group_size = group;
  return c;
}

// Every expert on every token, combined with the record's weights.
Tensor dense_oracle(const MoELayer& layer, const Tensor& x, const RoutingRecord& rec) {
  const std::size_t t = x.rows(), d = x.cols();
  std::vector<double> out(t * d, 0.0);
  for (const auto& ex : layer.shared()) {
    auto y = ex(x);
    for (std::size_t i = 0; i < y.numel(); ++i) out[i] += y[i];
  }
  for (std::size_t e = 0; e < layer.routed().size(); ++e) {
    auto y = layer.routed()[e](x);
    for (std::size_t r = 0; r < t; ++r) {
      double w = 0;
      const auto& tok = rec.tokens[r];
      for (std::size_t s = 0; s < tok.selected.size(); ++s)
        if (tok.selected[s] == e) w = tok.weights[s];
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] += w * y.at(r, j);
    }
  }
  return Tensor::from({t, d}, out);
}

RoutingRecord handmade_record(std::size_t n, std::size_t k, const std::vector<std::vector<std::size_t>>& sel,
                              const std::vector<std::vector<double>>& probs) {
  RoutingRecord rec{0, n, k, {}};
  for (std::size_t i = 0; i < sel.size(); ++i) {
    TokenRoute tr;
    tr.selected = sel[i];
    tr.weights.assign(k, 1.0 / static_cast<double>(k));
    tr.probs = probs[i];
    rec.tokens.push_back(tr);
  }
  return rec;
}

}  // namespace

TEST(MoEConfig, Validation) {
  EXPECT_NO_THROW(MoEConfig{}.validate());
  auto c = small_config();
  c.top_k = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.group_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(MoEConfig{}.n_groups(), 8u);
}

TEST(Route, DistinctLogitsClosedForm) {
  auto cfg = small_config(5, 0, 2, 5);
  auto rec = route(Tensor::from({1, 5}, {4, 3, 2, 1, 0}), cfg);
  const auto& tok = rec.tokens[0];
  EXPECT_EQ(tok.selected, (std::vector<std::size_t>{0, 1}));
  const double e = std::exp(1.0);
  EXPECT_NEAR(tok.weights[0], e / (e + 1), 1e-15);
  EXPECT_NEAR(tok.weights[1], 1 / (e + 1), 1e-15);
  EXPECT_NEAR(tok.weights[0], 0.7311, 1e-4);
}

TEST(Route, TiesGoToLowerIndex) {
  auto cfg = small_config(8, 0, 3, 4);
  auto rec = route(Tensor::full({2, 8}, 0.5), cfg);
  for (const auto& tok : rec.tokens) {
    EXPECT_EQ(tok.selected, (std::vector<std::size_t>{0, 1, 2}));
    for (double w : tok.weights) EXPECT_NEAR(w, 1.0 / 3.0, 1e-15);
  }
  auto partial = route(Tensor::from({1, 8}, {0, 1, 0, 1, 0, 1, 0, 0}), cfg);
  EXPECT_EQ(partial.tokens[0].selected, (std::vector<std::size_t>{1, 3, 5}));
}

TEST(Route, DominantLogitSaturates) {
  auto cfg = small_config(4, 0, 2, 2);
  auto rec = route(Tensor::from({1, 4}, {0, 1000, 0, 0}), cfg);
  EXPECT_EQ(rec.tokens[0].selected[0], 1u);
  EXPECT_NEAR(rec.tokens[0].weights[0], 1.0, 1e-9);
}

TEST(Route, Errors) {
  auto cfg = small_config(4, 0, 2, 2);
  cfg.top_k = 6;
  EXPECT_THROW(route(Tensor::zeros({1, 4}), cfg), ConfigError);
  EXPECT_THROW(route(Tensor::zeros({1, 3}), small_config()), ShapeError);
  std::vector<Modality> m(3, Modality::Text);
  EXPECT_THROW(route(Tensor::zeros({2, 4}), small_config(), m), ShapeError);
}

TEST(Route, InvariantsOnRandomTokens) {
  MoEConfig cfg;
  Rng rng(1);
  auto rec = route(random_tensor(rng, {2000, 64}, 2.0), cfg);
  for (const auto& tok : rec.tokens) {
    ASSERT_EQ(tok.selected.size(), 6u);
    EXPECT_EQ(std::set<std::size_t>(tok.selected.begin(), tok.selected.end()).size(), 6u);
    double ws = 0, ps = 0;
    for (double w : tok.weights) ws += w;
    for (double p : tok.probs) ps += p;
    EXPECT_NEAR(ws, 1.0, 1e-9);
    EXPECT_NEAR(ps, 1.0, 1e-9);
    for (std::size_t i = 1; i < 6; ++i) EXPECT_GE(tok.probs[tok.selected[i - 1]], tok.probs[tok.selected[i]]);
  }
}

TEST(MoEForward, DegenerateSingleExpertRouting) {
  Rng rng(2);
  auto cfg = small_config(4, 0, 1, 2);
  MoELayer layer(cfg, 6, rng);
  for (double& w : layer.router().mutable_data()) w = 0.0;
  auto x = random_tensor(rng, {3, 6});
  auto out = layer.forward(x);
  auto ref = layer.routed()[0](x);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(out.output[i], ref[i], 1e-14);
}

TEST(MoEForward, ZeroRoutedExpertsLeaveSharedSum) {
  Rng rng(3);
  auto cfg = small_config(4, 2, 2, 2);
  MoELayer layer(cfg, 6, rng);
  for (auto& ex : layer.routed())
    for (double& w : ex.w_down.mutable_data()) w = 0.0;
  auto x = random_tensor(rng, {4, 6});
  auto out = layer.forward(x);
  auto ref = add(layer.shared()[0](x), layer.shared()[1](x));
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(out.output[i], ref[i], 1e-14);
}

TEST(MoEForward, MatchesDenseOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto cfg = seed == 0 ? small_config(4, 1, 2, 2) : small_config(2 + 2 * rng.below(4), rng.below(3), 1 + rng.below(2), 2);
    if (seed % 3 == 0) cfg.expert_kind = ExpertKind::Plain;
    const std::size_t d = seed == 0 ? 4 : 3 + rng.below(4), t = seed == 0 ? 3 : 1 + rng.below(7);
    MoELayer layer(cfg, d, rng);
    auto x = random_tensor(rng, {t, d});
    auto out = layer.forward(x);
    auto ref = dense_oracle(layer, x, out.record);
    for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(out.output[i], ref[i], 1e-10) << "seed " << seed;
  }
}

TEST(MoEForward, DimensionMismatchThrows) {
  Rng rng(4);
  MoELayer layer(small_config(), 6, rng);
  EXPECT_THROW(layer.forward(Tensor::zeros({2, 5})), ShapeError);
}

TEST(MoEForward, BitwiseDeterministic) {
  Rng rng(5);
  MoELayer layer(small_config(8, 2, 3, 4), 6, rng);
  auto x = random_tensor(rng, {9, 6});
  auto a = layer.forward(x).output, b = layer.forward(x).output;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(BalanceLoss, UniformIsOne) {
  auto cfg = small_config(4, 0, 2, 2);
  std::vector<double> flat(4, 0.25);
  auto rec = handmade_record(4, 2, {{0, 2}, {1, 3}}, {flat, flat});
  auto rep = load_balance_loss(rec, cfg);
  EXPECT_NEAR(rep.balance_loss, 1.0, 1e-15);
}

TEST(BalanceLoss, CollapsedIsGroupCount) {
  MoEConfig cfg;
  std::vector<double> probs(64, 0.0);
  for (std::size_t e = 0; e < 8; ++e) probs[e] = 1.0 / 8.0;
  auto rec = handmade_record(64, 6, {{0, 1, 2, 3, 4, 5}, {2, 3, 4, 5, 6, 7}}, {probs, probs});
  EXPECT_NEAR(load_balance_loss(rec, cfg).balance_loss, 8.0, 1e-12);
}

TEST(BalanceLoss, EnumerationOracle) {
  Rng rng(6);
  auto cfg = small_config(8, 0, 2, 2);
  auto rec = route(random_tensor(rng, {5, 8}, 1.5), cfg);
  auto rep = load_balance_loss(rec, cfg);
  double loss = 0, fsum = 0, psum = 0;
  for (std::size_t g = 0; g < 4; ++g) {
    double hits = 0, mass = 0;
    for (const auto& tok : rec.tokens) {
      for (auto e : tok.selected)
        if (e / 2 == g) hits += 1;
      mass += tok.probs[2 * g] + tok.probs[2 * g + 1];
    }
    const double f = hits / 10.0, p = mass / 5.0;
    EXPECT_NEAR(rep.group_fraction[g], f, 1e-15);
    EXPECT_NEAR(rep.group_probability[g], p, 1e-15);
    fsum += f;
    psum += p;
    loss += f * p;
  }
  EXPECT_NEAR(rep.balance_loss, 4 * loss, 1e-14);
  EXPECT_NEAR(fsum, 1.0, 1e-9);
  EXPECT_NEAR(psum, 1.0, 1e-9);
}

TEST(BalanceLoss, GroupRelaxationIsWeakerThanPerExpert) {
  std::vector<double> a(8, 0.0), b(8, 0.0);
  a[0] = a[1] = 0.5;
  b[4] = b[5] = 0.5;
  auto rec = handmade_record(8, 2, {{0, 1}, {4, 5}, {0, 1}, {4, 5}}, {a, b, a, b});
  auto grouped = small_config(8, 0, 2, 4);
  auto per_expert = small_config(8, 0, 2, 1);
  EXPECT_NEAR(load_balance_loss(rec, grouped).balance_loss, 1.0, 1e-12);
  EXPECT_GT(load_balance_loss(rec, per_expert).balance_loss, 1.0);
  EXPECT_NEAR(load_balance_loss(rec, per_expert).balance_loss, 2.0, 1e-12);
}

TEST(BalanceLoss, EmptyRecordThrows) {
  RoutingRecord rec{0, 4, 2, {}};
  EXPECT_THROW(load_balance_loss(rec, small_config(4, 0, 2, 2)), std::invalid_argument);
}

TEST(BalanceLoss, TensorFormMatchesReport) {
  Rng rng(7);
  auto cfg = small_config(8, 0, 2, 4);
  auto logits = random_tensor(rng, {6, 8});
  auto rec = route(logits, cfg);
  EXPECT_NEAR(balance_loss_tensor(softmax(logits, 1), rec, cfg).item(), load_balance_loss(rec, cfg).balance_loss, 1e-14);
}

TEST(ZLoss, ClosedForms) {
  EXPECT_NEAR(z_loss(Tensor::zeros({3, 64})), std::log(64.0) * std::log(64.0), 1e-12);
  EXPECT_NEAR(z_loss(Tensor::zeros({1, 64})), 17.29631, 1e-5);
  EXPECT_NEAR(z_loss(Tensor::from({2, 1}, {1.5, -3})), (2.25 + 9.0) / 2.0, 1e-14);
}

TEST(ZLoss, MatchesLongDoubleEvaluation) {
  Rng rng(8);
  auto x = random_tensor(rng, {3, 5}, 4.0);
  long double total = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    long double z = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(static_cast<long double>(x.at(r, j)));
    total += std::log(z) * std::log(z);
  }
  EXPECT_NEAR(z_loss(x), static_cast<double>(total / 3), 1e-12);
  auto big = Tensor::from({1, 2}, {800, 800});
  EXPECT_NEAR(z_loss(big), std::pow(800 + std::log(2.0), 2), 1e-9);
}

TEST(MoEGradients, CombineAndAuxLossesMatchFiniteDifferences) {
  for (const auto& c : model_grad_cases()) {
    if (c.name.rfind("moe", 0) != 0) continue;
    for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_LT(c.run(seed).rel_error, 1e-4) << c.name << " " << seed;
  }
}

TEST(MoEGradients, NoGradientThroughDiscreteSelection) {
  // The selection weight depends on the router only via the selected
  // probabilities; unselected experts get no gradient at all.
  Rng rng(9);
  auto cfg = small_config(4, 0, 1, 2);
  MoELayer layer(cfg, 3, rng);
  auto x = random_tensor(rng, {1, 3});
  ParamSet ps;
  layer.collect("m", ps);
  ps.set_trainable(true);
  GradTape tape;
  auto out = layer.forward(x);
  tape.backward(sum(out.output));
  const auto chosen = out.record.tokens[0].selected[0];
  for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(layer.routed()[e].w_down.has_grad(), e == chosen);
  // top_k = 1 renormalizes to weight 1 exactly, so the router gets zero gradient.
  for (double g : layer.router().grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Trace, RoundTrip) {
  auto dir = scratch_dir("trace");
  Rng rng(10);
  auto cfg = small_config(8, 0, 2, 4);
  std::vector<Modality> mods = {Modality::Text, Modality::Visual, Modality::Visual};
  auto r0 = route(random_tensor(rng, {3, 8}), cfg, mods, 0);
  auto r1 = route(random_tensor(rng, {3, 8}), cfg, mods, 1);
  {
    TraceWriter w((dir / "t.trace").string(), 8, 2);
    w.write(r0);
    w.write(r1);
  }
  auto tr = read_trace((dir / "t.trace").string());
  EXPECT_EQ(tr.n_routed, 8u);
  EXPECT_EQ(tr.top_k, 2u);
  ASSERT_EQ(tr.entries.size(), 6u);
  EXPECT_EQ(tr.entries[4].layer, 1u);
  EXPECT_EQ(tr.entries[4].token, 1u);
  EXPECT_EQ(tr.entries[4].modality, Modality::Visual);
  EXPECT_EQ(tr.entries[4].experts[0], r1.tokens[1].selected[0]);
  EXPECT_EQ(tr.entries[4].weights[1], r1.tokens[1].weights[1]);

  std::ofstream(dir / "bad.trace") << "NOTATRACE";
  EXPECT_THROW(read_trace((dir / "bad.trace").string()), FormatError);
  auto bytes = slurp(dir / "t.trace");
  std::ofstream(dir / "cut.trace", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(read_trace((dir / "cut.trace").string()), FormatError);
}
