#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "rmoe/layers.hpp"

using namespace rmoe;

namespace {

void fill_normal(Mat& m, Rng& rng, double scale = 0.5) {
  for (auto& x : m.span()) x = scale * rng.normal();
}
void fill_normal(Vec& v, Rng& rng, double scale = 0.5) {
  for (auto& x : v) x = scale * rng.normal();
}

GruParams random_gru(std::size_t in, std::size_t d, Rng& rng) {
  GruParams p = GruParams::zeros(in, d);
  for (auto& t : tensor_refs(p)) {
    for (auto& x : t.values) x = 0.6 * rng.normal();
  }
  return p;
}

std::vector<Vec> random_inputs(std::size_t steps, std::size_t in, Rng& rng) {
  std::vector<Vec> xs(steps, Vec(in));
  for (auto& x : xs) fill_normal(x, rng, 1.0);
  return xs;
}

// Scalar-loop GRU step, written directly from the update equations.
std::vector<double> reference_step(const GruParams& p, const std::vector<double>& h,
                                   const std::vector<double>& v) {
  const std::size_t d = h.size();
  std::vector<double> r(d), z(d), out(d);
  for (std::size_t i = 0; i < d; ++i) {
    double ar = p.b_r[i], az = p.b_z[i];
    for (std::size_t j = 0; j < v.size(); ++j) {
      ar += p.w_r(i, j) * v[j];
      az += p.w_z(i, j) * v[j];
    }
    for (std::size_t j = 0; j < d; ++j) {
      ar += p.u_r(i, j) * h[j];
      az += p.u_z(i, j) * h[j];
    }
    r[i] = 1.0 / (1.0 + std::exp(-ar));
    z[i] = 1.0 / (1.0 + std::exp(-az));
  }
  for (std::size_t i = 0; i < d; ++i) {
    double ac = p.b_c[i];
    for (std::size_t j = 0; j < v.size(); ++j) ac += p.w_c(i, j) * v[j];
    for (std::size_t j = 0; j < d; ++j) ac += p.u_c(i, j) * r[j] * h[j];
    out[i] = (1.0 - z[i]) * h[i] + z[i] * std::tanh(ac);
  }
  return out;
}

// L = sum_t w_t . h_t, the loss used by the recurrent gradient checks.
double weighted_hidden_loss(const GruParams& p, const std::vector<Vec>& xs,
                            const std::vector<Vec>& w) {
  GruTape tape;
  gru_forward(p, xs, tape);
  double loss = 0.0;
  for (std::size_t t = 0; t < tape.size(); ++t) {
    const auto h = tape.h(t);
    for (std::size_t i = 0; i < h.size(); ++i) loss += w[t][i] * h[i];
  }
  return loss;
}

}  // namespace

// ---------------------------------------------------------------------------
// Embedding

TEST(Embedding, OneHotSelectsRow) {
  Rng rng(1);
  const auto p = EmbeddingParams::glorot(6, 4, rng);
  BinaryVec y(6, 0);
  y[3] = 1;
  const Vec v = embed_forward(y, p);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(v[k], p.w(3, k));
}

TEST(Embedding, AllZeroInputGivesZeroVector) {
  Rng rng(2);
  const auto p = EmbeddingParams::glorot(5, 3, rng);
  EXPECT_EQ(embed_forward(BinaryVec(5, 0), p), Vec(3));
}

TEST(Embedding, MultiHotIsSumOfRows) {
  Rng rng(3);
  const auto p = EmbeddingParams::glorot(8, 5, rng);
  BinaryVec y(8, 0);
  y[2] = y[5] = 1;
  const Vec v = embed_forward(y, p);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(v[k], p.w(2, k) + p.w(5, k), 1e-15);
}

TEST(Embedding, RejectsWidthMismatchAndNonBinary) {
  const auto p = EmbeddingParams::zeros(4, 2);
  EXPECT_THROW(embed_forward(BinaryVec(3, 0), p), Error);
  BinaryVec y(4, 0);
  y[1] = 2;
  EXPECT_THROW(embed_forward(y, p), Error);
}

TEST(Embedding, LinearOverDisjointSuperpositions) {
  Rng rng(4);
  const auto p = EmbeddingParams::glorot(10, 3, rng);
  for (int trial = 0; trial < 20; ++trial) {
    BinaryVec a(10, 0), b(10, 0), ab(10, 0);
    for (std::size_t j = 0; j < 10; ++j) {
      const auto u = rng.below(3);
      if (u == 1) a[j] = ab[j] = 1;
      if (u == 2) b[j] = ab[j] = 1;
    }
    const Vec va = embed_forward(a, p), vb = embed_forward(b, p), vab = embed_forward(ab, p);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(vab[k], va[k] + vb[k], 1e-14);
  }
}

TEST(Embedding, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  auto p = EmbeddingParams::glorot(7, 3, rng);
  BinaryVec y{1, 0, 1, 1, 0, 0, 1};
  Vec w(3);
  fill_normal(w, rng, 1.0);
  auto loss = [&] {
    const Vec v = embed_forward(y, p);
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) s += w[k] * v[k] * v[k];
    return s;
  };
  const Vec v = embed_forward(y, p);
  Vec dv(3);
  for (std::size_t k = 0; k < 3; ++k) dv[k] = 2.0 * w[k] * v[k];
  auto g = EmbeddingParams::zeros(7, 3);
  embed_backward(y, dv, g);
  EXPECT_LT(grad_check(p, g, loss), 1e-7);
}

// ---------------------------------------------------------------------------
// GRU forward

TEST(GruCell, ZeroParametersHalveThePreviousState) {
  const auto p = GruParams::zeros(3, 2);
  const GruStep s = gru_cell_forward(Vec{1.0, 1.0}, Vec{0.3, -0.2, 0.9}, p);
  EXPECT_EQ(s.z, (Vec{0.5, 0.5}));
  EXPECT_EQ(s.c, (Vec{0.0, 0.0}));
  EXPECT_EQ(s.h, (Vec{0.5, 0.5}));
}

TEST(GruCell, ZeroStateAndParametersStayZero) {
  const auto p = GruParams::zeros(2, 3);
  EXPECT_EQ(gru_cell_forward(Vec(3), Vec{1.0, 1.0}, p).h, Vec(3));
}

TEST(GruCell, MatchesScalarReference) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t in = 1 + rng.below(5), d = 1 + rng.below(5);
    const auto p = random_gru(in, d, rng);
    Vec h(d), v(in);
    fill_normal(h, rng);
    fill_normal(v, rng, 1.0);
    const auto ref = reference_step(p, h.values(), v.values());
    const GruStep s = gru_cell_forward(h, v, p);
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(s.h[i], ref[i], 1e-12);
  }
}

TEST(GruCell, RejectsDimensionMismatch) {
  const auto p = GruParams::zeros(3, 2);
  EXPECT_THROW(gru_cell_forward(Vec(3), Vec(3), p), Error);
  EXPECT_THROW(gru_cell_forward(Vec(2), Vec(2), p), Error);
}

TEST(GruCell, OutputLiesBetweenPreviousStateAndCandidate) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_gru(3, 4, rng);
    Vec h(4), v(3);
    fill_normal(h, rng, 0.9);
    fill_normal(v, rng, 2.0);
    const GruStep s = gru_cell_forward(h, v, p);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_GE(s.h[i], std::min(h[i], s.c[i]) - 1e-15);
      EXPECT_LE(s.h[i], std::max(h[i], s.c[i]) + 1e-15);
    }
  }
}

TEST(GruForward, HiddenStatesStayInsideUnitIntervalFromZeroStart) {
  Rng rng(8);
  const auto p = random_gru(4, 5, rng);
  const auto xs = random_inputs(30, 4, rng);
  GruTape tape;
  gru_forward(p, xs, tape);
  for (std::size_t t = 0; t < tape.size(); ++t) {
    for (double x : tape.h(t)) {
      EXPECT_GT(x, -1.0);
      EXPECT_LT(x, 1.0);
    }
  }
}

TEST(GruForward, TapeAgreesWithRepeatedCellSteps) {
  Rng rng(9);
  const auto p = random_gru(3, 4, rng);
  const auto xs = random_inputs(6, 3, rng);
  GruTape tape;
  gru_forward(p, xs, tape);
  Vec h(4);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    h = gru_cell_forward(h, xs[t], p).h;
    const auto th = tape.h(t);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(th[i], h[i]);
  }
}

// ---------------------------------------------------------------------------
// GRU backward

TEST(Bptt, ZeroOutputGradientsGiveZeroGradients) {
  Rng rng(10);
  const auto p = random_gru(3, 2, rng);
  const auto xs = random_inputs(4, 3, rng);
  GruTape tape;
  gru_forward(p, xs, tape);
  const auto g = bptt_backward(p, tape, std::vector<Vec>(4, Vec(2)));
  for (const auto& t : tensor_refs_const(g.params)) {
    for (double x : t.values) EXPECT_EQ(x, 0.0) << t.name;
  }
  for (const auto& dv : g.inputs) EXPECT_EQ(dv, Vec(3));
}

TEST(Bptt, SingleStepMatchesHandDerivedChainRule) {
  // With T = 1 and h_0 = 0: h = z c, so dh/da_z = c z (1 - z), dh/da_c = z (1 - c^2),
  // and nothing flows into the reset gate or the recurrent matrices.
  Rng rng(11);
  const auto p = random_gru(2, 2, rng);
  const std::vector<Vec> xs{Vec{0.7, -1.3}};
  const Vec dh{0.4, -1.1};
  GruTape tape;
  gru_forward(p, xs, tape);
  const auto g = bptt_backward(p, tape, std::vector<Vec>{dh});

  for (std::size_t i = 0; i < 2; ++i) {
    double az = p.b_z[i], ac = p.b_c[i];
    for (std::size_t j = 0; j < 2; ++j) {
      az += p.w_z(i, j) * xs[0][j];
      ac += p.w_c(i, j) * xs[0][j];
    }
    const double z = 1.0 / (1.0 + std::exp(-az));
    const double c = std::tanh(ac);
    const double daz = dh[i] * c * z * (1.0 - z);
    const double dac = dh[i] * z * (1.0 - c * c);
    EXPECT_NEAR(g.params.b_z[i], daz, 1e-15);
    EXPECT_NEAR(g.params.b_c[i], dac, 1e-15);
    EXPECT_EQ(g.params.b_r[i], 0.0);
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_NEAR(g.params.w_z(i, j), daz * xs[0][j], 1e-15);
      EXPECT_NEAR(g.params.w_c(i, j), dac * xs[0][j], 1e-15);
      EXPECT_EQ(g.params.w_r(i, j), 0.0);
      EXPECT_EQ(g.params.u_r(i, j), 0.0);
      EXPECT_EQ(g.params.u_z(i, j), 0.0);
      EXPECT_EQ(g.params.u_c(i, j), 0.0);
    }
  }
  for (std::size_t j = 0; j < 2; ++j) {
    double dv = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      dv += g.params.b_z[i] * p.w_z(i, j) + g.params.b_c[i] * p.w_c(i, j);
    }
    EXPECT_NEAR(g.inputs[0][j], dv, 1e-15);
  }
}

TEST(Bptt, MatchesFiniteDifferencesOverRandomSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const std::size_t in = 1 + rng.below(3), d = 1 + rng.below(3), steps = 1 + rng.below(4);
    auto p = random_gru(in, d, rng);
    const auto xs = random_inputs(steps, in, rng);
    const auto w = random_inputs(steps, d, rng);
    GruTape tape;
    gru_forward(p, xs, tape);
    const auto g = bptt_backward(p, tape, w);
    const double err = grad_check(p, g.params, [&] { return weighted_hidden_loss(p, xs, w); });
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(Bptt, InputGradientsMatchFiniteDifferences) {
  Rng rng(12);
  const auto p = random_gru(3, 3, rng);
  auto xs = random_inputs(4, 3, rng);
  const auto w = random_inputs(4, 3, rng);
  GruTape tape;
  gru_forward(p, xs, tape);
  const auto g = bptt_backward(p, tape, w);
  const double h = 1e-5;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    for (std::size_t j = 0; j < 3; ++j) {
      const double saved = xs[t][j];
      xs[t][j] = saved + h;
      const double lp = weighted_hidden_loss(p, xs, w);
      xs[t][j] = saved - h;
      const double lm = weighted_hidden_loss(p, xs, w);
      xs[t][j] = saved;
      EXPECT_NEAR(g.inputs[t][j], (lp - lm) / (2.0 * h), 1e-8);
    }
  }
}

TEST(Bptt, ZeroRecurrentWeightsReduceToPerStepGradients) {
  // With U = 0 the gates and candidate of step t depend on v_t only; time
  // steps remain coupled through the linear carry h_t = (1 - z_t) h_{t-1} + ...
  // so step t's total state gradient is its own output gradient plus
  // (1 - z_{t+1}) times the next step's total. Feeding that total into a
  // one-step backward pass per step must reproduce the full result.
  Rng rng(13);
  auto p = random_gru(3, 3, rng);
  for (auto* u : {&p.u_r, &p.u_z, &p.u_c}) u->fill(0.0);
  const auto xs = random_inputs(4, 3, rng);
  const auto w = random_inputs(4, 3, rng);
  GruTape tape;
  gru_forward(p, xs, tape);
  const auto full = bptt_backward(p, tape, w);

  GruParams summed = GruParams::zeros(3, 3);
  Vec carry(3);
  for (std::size_t t = xs.size(); t-- > 0;) {
    Vec total(3);
    for (std::size_t i = 0; i < 3; ++i) total[i] = w[t][i] + carry[i];
    // One-step pass started from the recorded h_{t-1}.
    const auto hp = tape.h_prev(t);
    const GruStep s = gru_cell_forward(Vec(std::vector<double>(hp.begin(), hp.end())), xs[t], p);
    for (std::size_t i = 0; i < 3; ++i) {
      const double daz = total[i] * (s.c[i] - s.h_prev[i]) * s.z[i] * (1.0 - s.z[i]);
      const double dac = total[i] * s.z[i] * (1.0 - s.c[i] * s.c[i]);
      double dar = 0.0;  // U_c = 0: the reset gate receives nothing
      summed.b_z[i] += daz;
      summed.b_c[i] += dac;
      summed.b_r[i] += dar;
      for (std::size_t j = 0; j < 3; ++j) {
        summed.w_z(i, j) += daz * xs[t][j];
        summed.w_c(i, j) += dac * xs[t][j];
        summed.u_z(i, j) += daz * s.h_prev[j];
        summed.u_c(i, j) += dac * s.rh[j];
      }
      carry[i] = total[i] * (1.0 - s.z[i]);
    }
  }
  const auto a = tensor_refs_const(full.params);
  const auto b = tensor_refs_const(summed);
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].values.size(); ++i) {
      EXPECT_NEAR(a[k].values[i], b[k].values[i], 1e-14) << a[k].name;
    }
  }
}

TEST(Bptt, LengthMismatchIsAnError) {
  const auto p = GruParams::zeros(2, 2);
  GruTape tape;
  gru_forward(p, std::vector<Vec>(3, Vec(2)), tape);
  EXPECT_THROW(bptt_backward(p, tape, std::vector<Vec>(2, Vec(2))), Error);
}

// ---------------------------------------------------------------------------
// Head and loss

TEST(Head, GradientMatchesFiniteDifferences) {
  Rng rng(14);
  auto p = HeadParams::glorot(4, 3, rng);
  fill_normal(p.b, rng);
  Vec h(4);
  fill_normal(h, rng, 1.0);
  const BinaryVec y{1, 0, 1};
  auto loss = [&] { return bce_with_logits(head_logits(p, h.span()), y, nullptr); };
  Vec dlogits(3);
  bce_with_logits(head_logits(p, h.span()), y, &dlogits);
  auto g = HeadParams::zeros(4, 3);
  Vec dh(4);
  head_backward(p, h.span(), dlogits, g, dh);
  EXPECT_LT(grad_check(p, g, loss), 1e-7);
}

TEST(Bce, UninformativePredictionCostsLn2) {
  EXPECT_NEAR(bce_loss(Vec{0.5, 0.5}, BinaryVec{1, 0}).loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_loss(Vec{0.5, 0.5}, BinaryVec{0, 0}).loss, 0.693147, 1e-6);
}

TEST(Bce, ConfidentHit) {
  EXPECT_NEAR(bce_loss(Vec{0.8}, BinaryVec{1}).loss, -std::log(0.8), 1e-15);
  EXPECT_NEAR(bce_loss(Vec{0.8}, BinaryVec{1}).loss, 0.223144, 1e-6);
}

TEST(Bce, GradientMatchesFiniteDifferences) {
  Rng rng(15);
  Vec pred(7);
  BinaryVec y(7);
  for (std::size_t j = 0; j < 7; ++j) {
    pred[j] = rng.uniform(0.05, 0.95);
    y[j] = rng.bernoulli(0.5) ? 1 : 0;
  }
  const BceResult r = bce_loss(pred, y);
  const double h = 1e-5;
  for (std::size_t j = 0; j < 7; ++j) {
    Vec up = pred, down = pred;
    up[j] += h;
    down[j] -= h;
    const double numeric = (bce_loss(up, y).loss - bce_loss(down, y).loss) / (2.0 * h);
    EXPECT_NEAR(r.grad[j], numeric, 1e-6);
  }
}

TEST(Bce, LengthMismatchIsAnError) { EXPECT_THROW(bce_loss(Vec{0.5}, BinaryVec{1, 0}), Error); }

TEST(BceWithLogits, AgreesWithProbabilityForm) {
  Rng rng(16);
  Vec a(9);
  BinaryVec y(9);
  for (std::size_t j = 0; j < 9; ++j) {
    a[j] = 3.0 * rng.normal();
    y[j] = rng.bernoulli(0.4) ? 1 : 0;
  }
  EXPECT_NEAR(bce_with_logits(a, y, nullptr), bce_loss(sigmoid_vec(a), y).loss, 1e-12);
}

TEST(BceWithLogits, FiniteAtSaturation) {
  Vec d(2);
  const double l = bce_with_logits(Vec{800.0, -800.0}, BinaryVec{0, 1}, &d);
  EXPECT_NEAR(l, 800.0, 1e-9);
  EXPECT_NEAR(d[0], 0.5, 1e-15);
  EXPECT_NEAR(d[1], -0.5, 1e-15);
}

// ---------------------------------------------------------------------------
// Gradient checker

TEST(GradCheck, CatchesOnePercentCorruption) {
  Rng rng(17);
  auto p = random_gru(3, 3, rng);
  const auto xs = random_inputs(4, 3, rng);
  const auto w = random_inputs(4, 3, rng);
  GruTape tape;
  gru_forward(p, xs, tape);
  auto g = bptt_backward(p, tape, w).params;
  auto loss = [&] { return weighted_hidden_loss(p, xs, w); };
  ASSERT_LT(grad_check(p, g, loss), 1e-4);
  // Corrupt the largest entry so the mutation is not hidden by the tolerance floor.
  double* worst = nullptr;
  for (auto& t : tensor_refs(g)) {
    for (auto& x : t.values) {
      if (worst == nullptr || std::abs(x) > std::abs(*worst)) worst = &x;
    }
  }
  *worst *= 1.01;
  EXPECT_GT(grad_check(p, g, loss), 1e-4);
}

TEST(GradCheck, StructureMismatchIsAnError) {
  auto a = HeadParams::zeros(2, 2);
  const auto b = HeadParams::zeros(3, 2);
  EXPECT_THROW(grad_check(a, b, [] { return 0.0; }), Error);
}

// ---------------------------------------------------------------------------
// Parameter enumeration

TEST(TensorRefs, NamesAndCountsForGru) {
  auto p = GruParams::zeros(3, 2);
  const auto refs = tensor_refs(p);
  ASSERT_EQ(refs.size(), 9u);
  EXPECT_EQ(refs[0].name, "W_r");
  EXPECT_EQ(refs[3].name, "U_r");
  EXPECT_EQ(refs[8].name, "b_c");
  EXPECT_EQ(parameter_count(p), 3u * 2 * 3 + 3u * 2 * 2 + 3u * 2);
}

TEST(ParameterHash, SensitiveToASingleBit) {
  Rng rng(18);
  auto p = random_gru(2, 2, rng);
  const auto h0 = parameter_hash(p);
  EXPECT_EQ(parameter_hash(p), h0);
  p.u_c(1, 1) = std::nextafter(p.u_c(1, 1), 1e9);
  EXPECT_NE(parameter_hash(p), h0);
}
