#include <gtest/gtest.h>

#include <cmath>

#include "cdsm/error.hpp"
#include "cdsm/numerics.hpp"
#include "test_util.hpp"

using namespace cdsm;
using cdsm::testing::TempDir;

namespace {

Tensor row(std::initializer_list<double> v) {
  Tensor t(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) t(0, i++) = x;
  return t;
}

Tensor random_tensor(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = scale * (2.0 * uniform01(rng) - 1.0);
  return t;
}

// Contract an op output to a scalar with fixed random weights so every output
// coordinate contributes to the checked gradient.
Var contract(Tape& tape, Var out, std::uint64_t seed) {
  auto rng = make_rng(seed, {99});
  Var w = tape.constant(random_tensor(out.rows(), out.cols(), rng));
  return sum(mul(out, w));
}

double check(const std::function<Var(Tape&, ParamStore&)>& f, ParamStore& ps) {
  return grad_check(f, ps).max_rel_error;
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(Ops, SoftmaxOfZerosIsUniform) {
  Tape t;
  auto s = softmax(t.constant(row({0.0, 0.0}))).value();
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s(0, 1), 0.5);
}

TEST(Ops, SoftmaxIsADistributionAndShiftInvariant) {
  auto rng = make_rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + uniform_index(rng, 20));
    Tensor x = random_tensor(1, n, rng, 30.0);
    const double c = 100.0 * (2.0 * uniform01(rng) - 1.0);
    Tape t;
    Tensor a = softmax(t.constant(x)).value();
    Tensor b = softmax(t.constant((x.array() + c).matrix())).value();
    EXPECT_NEAR(a.sum(), 1.0, 1e-12);
    EXPECT_GE(a.minCoeff(), 0.0);
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Ops, SoftmaxHandlesLargeInputs) {
  Tape t;
  auto s = softmax(t.constant(row({1000.0, 0.0}))).value();
  EXPECT_DOUBLE_EQ(s(0, 0), 1.0);
  auto l = log_softmax(t.constant(row({1000.0, 0.0}))).value();
  EXPECT_NEAR(l(0, 1), -1000.0, 1e-9);
  auto ls = log_sigmoid(t.constant(row({-800.0, 800.0}))).value();
  EXPECT_NEAR(ls(0, 0), -800.0, 1e-9);
  EXPECT_NEAR(ls(0, 1), 0.0, 1e-12);
}

TEST(Ops, ConvWithIdentityFilterIsIdentity) {
  const int window = 3, d = 4;
  Tensor x(5, d);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = i * 10 + j;
  }
  Tensor f = Tensor::Zero(window * d, d);
  for (int j = 0; j < d; ++j) f(d + j, j) = 1.0;  // centre tap
  Tape t;
  auto y = conv1d_same(t.constant(x), t.constant(f), t.constant(Tensor::Zero(1, d)), window).value();
  EXPECT_EQ(y, x);
}

TEST(Ops, ConvZeroPadsTheEdges) {
  // Sum filter over a window of 3 on a single channel.
  Tensor x(3, 1);
  x << 1, 2, 3;
  Tensor f = Tensor::Ones(3, 1);
  Tape t;
  auto y = conv1d_same(t.constant(x), t.constant(f), t.constant(Tensor::Zero(1, 1)), 3).value();
  EXPECT_EQ(y(0, 0), 3.0);
  EXPECT_EQ(y(1, 0), 6.0);
  EXPECT_EQ(y(2, 0), 5.0);
}

TEST(Ops, MaxPoolElementwiseExample) {
  Tape t;
  Var a = t.constant(row({1, 4})), b = t.constant(row({3, 2}));
  std::vector<Var> v = {a, b};
  EXPECT_EQ(max_pool_elementwise(v).value(), row({3, 4}));
}

TEST(Ops, PoolsArePermutationInvariant) {
  auto rng = make_rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor(6, 5, rng);
    std::vector<int> perm = {0, 1, 2, 3, 4, 5};
    shuffle(perm, rng);
    Tensor y(6, 5);
    for (int i = 0; i < 6; ++i) y.row(i) = x.row(perm[i]);
    Tape t;
    EXPECT_EQ(max_pool_rows(t.constant(x)).value(), max_pool_rows(t.constant(y)).value());
    EXPECT_LE((mean_pool(t.constant(x)).value() - mean_pool(t.constant(y)).value()).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Ops, ShapeMismatchNamesTheOp) {
  Tape t;
  Var a = t.constant(Tensor::Zero(1, 3)), b = t.constant(Tensor::Zero(1, 4));
  try {
    dot(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.op(), "dot");
  }
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(matmul(a, b), DimensionError);
  EXPECT_THROW(affine(a, t.constant(Tensor::Zero(4, 2)), t.constant(Tensor::Zero(1, 2))), DimensionError);
  std::vector<std::uint32_t> ids = {5};
  EXPECT_THROW(embedding(t.constant(Tensor::Zero(3, 2)), ids), LookupError);
}

TEST(Ops, DotIsLeftToRightSum) {
  Tensor a = row({1e16, 1.0, -1e16}), b = row({1.0, 1.0, 1.0});
  // Left to right: (1e16 + 1) - 1e16 = 0 in doubles.
  EXPECT_EQ(dot_values(a, b), 0.0);
  Tape t;
  EXPECT_EQ(dot(t.constant(a), t.constant(b)).scalar(), 0.0);
}

TEST(Ops, ReluSubgradientAtZeroIsZero) {
  ParamStore ps;
  ps.add("x", row({0.0, 1.0, -1.0}));
  ps.zero_grad();
  Tape t;
  Var y = sum(relu(t.param(ps.get("x"))));
  t.backward(y);
  EXPECT_EQ(ps.get("x").grad, row({0.0, 1.0, 0.0}));
}

TEST(Ops, MaxPoolTiesGoToFirstRow) {
  ParamStore ps;
  Tensor x(2, 2);
  x << 1, 5, 1, 2;
  ps.add("x", x);
  ps.zero_grad();
  Tape t;
  t.backward(sum(max_pool_rows(t.param(ps.get("x")))));
  Tensor expect(2, 2);
  expect << 1, 1, 0, 0;
  EXPECT_EQ(ps.get("x").grad, expect);
}

TEST(Ops, NoRecordTapeMatchesRecordingTape) {
  auto rng = make_rng(3);
  Tensor x = random_tensor(4, 6, rng), w = random_tensor(6, 3, rng), b = random_tensor(1, 3, rng);
  Tape rec(true), plain(false);
  auto f = [&](Tape& t) { return softmax_rows(tanh(affine(t.constant(x), t.constant(w), t.constant(b)))).value(); };
  EXPECT_EQ(f(rec), f(plain));
}

TEST(GradCheck, SquareAtThree) {
  ParamStore ps;
  ps.add("x", row({3.0}));
  auto r = grad_check([](Tape& t, ParamStore& p) {
    Var x = t.param(p.get("x"));
    return sum(mul(x, x));
  }, ps);
  EXPECT_NEAR(r.analytic, 6.0, 1e-12);
  EXPECT_NEAR(r.numeric, 6.0, 1e-8);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, DotOfSelf) {
  ParamStore ps;
  ps.add("a", row({1.0, 2.0}));
  ps.zero_grad();
  Tape t;
  Var a = t.param(ps.get("a"));
  t.backward(dot(a, a));
  EXPECT_EQ(ps.get("a").grad, row({2.0, 4.0}));
  auto r = grad_check([](Tape& tt, ParamStore& p) {
    Var x = tt.param(p.get("a"));
    return dot(x, x);
  }, ps);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, NonFiniteRaises) {
  ParamStore ps;
  ps.add("x", row({1.0}));
  EXPECT_THROW(grad_check([](Tape& t, ParamStore& p) {
    Var x = t.param(p.get("x"));
    return sum(scale(x, std::numeric_limits<double>::infinity()));
  }, ps), NumericError);
}

// Randomized-shape gradient checks for every op.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
  const int trial = GetParam();
  auto rng = make_rng(1000 + trial);
  const auto n = static_cast<Eigen::Index>(1 + uniform_index(rng, 4));
  const auto d = static_cast<Eigen::Index>(1 + uniform_index(rng, 5));
  const auto m = static_cast<Eigen::Index>(1 + uniform_index(rng, 4));
  ParamStore ps;
  ps.add("x", random_tensor(n, d, rng));
  ps.add("y", random_tensor(n, d, rng));
  ps.add("r", random_tensor(1, d, rng));
  ps.add("s", random_tensor(1, d, rng));
  ps.add("w", random_tensor(d, m, rng));
  ps.add("b", random_tensor(1, m, rng));
  ps.add("f", random_tensor(3 * d, m, rng));
  ps.add("g", random_tensor(1, d, rng, 0.5).array() + 1.0);
  ps.add("table", random_tensor(7, d, rng));
  const std::uint64_t seed = 5000 + trial;
  auto P = [](Tape& t, ParamStore& p, const char* name) { return t.param(p.get(name)); };

  std::vector<std::pair<const char*, ScalarFn>> cases = {
      {"add", [&](Tape& t, ParamStore& p) { return contract(t, add(P(t, p, "x"), P(t, p, "y")), seed); }},
      {"sub", [&](Tape& t, ParamStore& p) { return contract(t, sub(P(t, p, "x"), P(t, p, "y")), seed); }},
      {"mul", [&](Tape& t, ParamStore& p) { return contract(t, mul(P(t, p, "x"), P(t, p, "y")), seed); }},
      {"scale", [&](Tape& t, ParamStore& p) { return contract(t, scale(P(t, p, "x"), -1.7), seed); }},
      {"add_row", [&](Tape& t, ParamStore& p) { return contract(t, add_row(P(t, p, "x"), P(t, p, "r")), seed); }},
      {"matmul", [&](Tape& t, ParamStore& p) { return contract(t, matmul(P(t, p, "x"), P(t, p, "w")), seed); }},
      {"matmul_nt", [&](Tape& t, ParamStore& p) { return contract(t, matmul_nt(P(t, p, "x"), P(t, p, "y")), seed); }},
      {"affine",
       [&](Tape& t, ParamStore& p) { return contract(t, affine(P(t, p, "x"), P(t, p, "w"), P(t, p, "b")), seed); }},
      {"conv1d_same",
       [&](Tape& t, ParamStore& p) {
         return contract(t, conv1d_same(P(t, p, "x"), P(t, p, "f"), P(t, p, "b"), 3), seed);
       }},
      {"relu", [&](Tape& t, ParamStore& p) { return contract(t, relu(P(t, p, "x")), seed); }},
      {"tanh", [&](Tape& t, ParamStore& p) { return contract(t, tanh(P(t, p, "x")), seed); }},
      {"sigmoid", [&](Tape& t, ParamStore& p) { return contract(t, sigmoid(P(t, p, "x")), seed); }},
      {"softmax", [&](Tape& t, ParamStore& p) { return contract(t, softmax(P(t, p, "r")), seed); }},
      {"softmax_rows", [&](Tape& t, ParamStore& p) { return contract(t, softmax_rows(P(t, p, "x")), seed); }},
      {"log_softmax", [&](Tape& t, ParamStore& p) { return contract(t, log_softmax(P(t, p, "r")), seed); }},
      {"log_sigmoid", [&](Tape& t, ParamStore& p) { return contract(t, log_sigmoid(P(t, p, "x")), seed); }},
      {"dot", [&](Tape& t, ParamStore& p) { return dot(P(t, p, "r"), P(t, p, "s")); }},
      {"sum", [&](Tape& t, ParamStore& p) { return sum(mul(P(t, p, "x"), P(t, p, "x"))); }},
      {"mean_pool", [&](Tape& t, ParamStore& p) { return contract(t, mean_pool(P(t, p, "x")), seed); }},
      {"max_pool_rows", [&](Tape& t, ParamStore& p) { return contract(t, max_pool_rows(P(t, p, "x")), seed); }},
      {"max_pool_elementwise",
       [&](Tape& t, ParamStore& p) {
         std::vector<Var> v = {P(t, p, "r"), P(t, p, "s"), row(P(t, p, "x"), 0)};
         return contract(t, max_pool_elementwise(v), seed);
       }},
      {"concat", [&](Tape& t, ParamStore& p) { return contract(t, concat(P(t, p, "r"), P(t, p, "b")), seed); }},
      {"concat_cols",
       [&](Tape& t, ParamStore& p) {
         std::vector<Var> v = {P(t, p, "x"), P(t, p, "y")};
         return contract(t, concat_cols(v), seed);
       }},
      {"stack_rows",
       [&](Tape& t, ParamStore& p) {
         std::vector<Var> v = {P(t, p, "r"), P(t, p, "s"), P(t, p, "r")};
         return contract(t, stack_rows(v), seed);
       }},
      {"row", [&](Tape& t, ParamStore& p) { return contract(t, cdsm::row(P(t, p, "x"), n - 1), seed); }},
      {"element", [&](Tape& t, ParamStore& p) { return element(P(t, p, "x"), n - 1, d - 1); }},
      {"slice_cols",
       [&](Tape& t, ParamStore& p) { return contract(t, slice_cols(P(t, p, "x"), d / 2, d - d / 2), seed); }},
      {"layer_norm_rows",
       [&](Tape& t, ParamStore& p) {
         return contract(t, layer_norm_rows(P(t, p, "x"), P(t, p, "g"), P(t, p, "s")), seed);
       }},
      {"embedding",
       [&](Tape& t, ParamStore& p) {
         std::vector<std::uint32_t> ids = {3, 0, 3, 6};
         return contract(t, embedding(P(t, p, "table"), ids), seed);
       }},
  };
  for (auto& [name, f] : cases) {
    EXPECT_LE(check(f, ps), kTol) << name << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(Randomized, OpGradients, ::testing::Range(0, 20));

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParamStore ps;
  ps.add("x", row({1.0, -2.0}));
  ps.zero_grad();
  adam_step(ps, {});
  EXPECT_EQ(ps.get("x").value, row({1.0, -2.0}));
  EXPECT_EQ(ps.step(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore ps;
  ps.add("x", row({0.5}));
  ps.zero_grad();
  ps.get("x").grad(0, 0) = 1.0;
  AdamConfig c;
  c.lr = 0.1;
  adam_step(ps, c);
  // m_hat = 1, v_hat = 1: step = lr * 1 / (1 + eps).
  EXPECT_NEAR(ps.get("x").value(0, 0), 0.5 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, DeterministicAcrossStores) {
  auto rng = make_rng(8);
  Tensor init = random_tensor(3, 3, rng), g = random_tensor(3, 3, rng);
  ParamStore a, b;
  a.add("w", init);
  b.add("w", init);
  for (int s = 0; s < 5; ++s) {
    a.get("w").grad = g;
    b.get("w").grad = g;
    adam_step(a, {});
    adam_step(b, {});
  }
  EXPECT_EQ(a.get("w").value, b.get("w").value);
}

TEST(Adam, NanGradientRaisesAndLeavesParameters) {
  ParamStore ps;
  ps.add("x", row({1.0}));
  ps.add("y", row({2.0}));
  ps.zero_grad();
  ps.get("x").grad(0, 0) = 1.0;
  ps.get("y").grad(0, 0) = std::nan("");
  EXPECT_THROW(adam_step(ps, {}), NumericError);
  EXPECT_EQ(ps.get("x").value(0, 0), 1.0);
  EXPECT_EQ(ps.step(), 0u);
}

TEST(ParamStore, DuplicateNameAndMissingLookup) {
  ParamStore ps;
  ps.add("a", row({1.0}));
  EXPECT_THROW(ps.add("a", row({2.0})), ConfigError);
  EXPECT_THROW(ps.get("b"), LookupError);
}

TEST(ParamStore, CopyIsDeep) {
  ParamStore a;
  a.add("w", row({1.0}));
  ParamStore b = a;
  b.get("w").value(0, 0) = 5.0;
  EXPECT_EQ(a.get("w").value(0, 0), 1.0);
}

TEST(Checkpoint, RoundTripsValuesMomentsAndHeader) {
  TempDir dir;
  auto rng = make_rng(2);
  ParamStore a;
  a.add_uniform("w", 3, 4, 1.0, rng);
  a.add_uniform("b", 1, 4, 1.0, rng);
  for (int s = 0; s < 3; ++s) {
    a.get("w").grad = random_tensor(3, 4, rng);
    a.get("b").grad = random_tensor(1, 4, rng);
    adam_step(a, {});
  }
  save_checkpoint(a, R"({"model":"toy"})", dir / "ck.bin");
  ParamStore b;
  b.add_constant("w", 3, 4, 0.0);
  b.add_constant("b", 1, 4, 0.0);
  auto header = load_checkpoint(b, dir / "ck.bin");
  EXPECT_NE(header.find("toy"), std::string::npos);
  EXPECT_EQ(read_checkpoint_header(dir / "ck.bin"), header);
  for (const char* n : {"w", "b"}) {
    EXPECT_EQ(a.get(n).value, b.get(n).value);
    EXPECT_EQ(a.get(n).m, b.get(n).m);
    EXPECT_EQ(a.get(n).v, b.get(n).v);
  }
  EXPECT_EQ(b.step(), 3u);
}

TEST(Checkpoint, ShapeMismatchAndMissingParameterRejected) {
  TempDir dir;
  ParamStore a;
  a.add_constant("w", 2, 2, 1.0);
  save_checkpoint(a, "{}", dir / "ck.bin");
  ParamStore wrong_shape;
  wrong_shape.add_constant("w", 3, 2, 0.0);
  EXPECT_THROW(load_checkpoint(wrong_shape, dir / "ck.bin"), Error);
  ParamStore extra;
  extra.add_constant("w", 2, 2, 0.0);
  extra.add_constant("z", 1, 1, 0.0);
  EXPECT_THROW(load_checkpoint(extra, dir / "ck.bin"), Error);
  cdsm::testing::write_text(dir / "junk.bin", "not a checkpoint");
  EXPECT_THROW(load_checkpoint(extra, dir / "junk.bin"), Error);
}
