#include <gtest/gtest.h>

#include "corrdet/cam.hpp"
#include "test_util.hpp"

namespace corrdet {
namespace {

using testing::gradient_error;

CamOptions small_options(int64_t d = 16) {
  CamOptions o;
  o.d_model = d;
  o.heads = 4;
  o.ffn_dim = 2 * d;
  o.pool_grid = 3;
  return o;
}

Cam make_cam(const CamOptions& o, torch::Dtype dtype = torch::kDouble, uint64_t seed = 0) {
  torch::manual_seed(seed);
  Cam cam(o);
  cam->to(dtype);
  return cam;
}

TEST(TaskEncodings, BackgroundRowIsZero) {
  auto t = make_task_encodings(5, 8);
  EXPECT_EQ(t.size(0), 6);
  EXPECT_EQ(t[0].abs().sum().item<double>(), 0.0);
}

TEST(TaskEncodings, ClosedFormRow) {
  auto t = make_task_encodings(3, 4, torch::kDouble);
  const double expected[] = {0.841471, 0.540302, 0.0099998, 0.99995};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(t[1][k].item<double>(), expected[k], 1e-5);
  EXPECT_NEAR(t[2][2].item<double>(), std::sin(0.02), 1e-15);
}

TEST(TaskEncodings, RowNormsAndDistinctRows) {
  const int64_t d = 32;
  auto t = make_task_encodings(50, d, torch::kDouble);
  for (int64_t p = 1; p <= 50; ++p) {
    EXPECT_NEAR(t[p].norm().item<double>(), std::sqrt(d / 2.0), 1e-12);
    for (int64_t q = 1; q < p; ++q) EXPECT_GT((t[p] - t[q]).abs().max().item<double>(), 0.0);
  }
}

TEST(TaskEncodings, OddDimension) {
  try {
    make_task_encodings(3, 7);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kOddDimension);
  }
}

TEST(RegionPool, WeightsSumToOne) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    auto w = region_pool_weights(testing::random_box(rng, 0.05), 8, 8, 7, false);
    double s = 0.0;
    for (double v : w) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(RegionPool, TinyBoxFallsBackToNearestCell) {
  const Box tiny{0.6, 0.3, 1e-9, 1e-9};
  auto w = region_pool_weights(tiny, 4, 4, 7, false);
  EXPECT_EQ(w[1 * 4 + 2], 1.0);
  try {
    region_pool_weights(tiny, 4, 4, 7, true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kEmptyRegion);
  }
}

TEST(Prototypes, ConstantMapPoolsToEncodedValue) {
  Cam cam = make_cam(small_options());
  torch::NoGradGuard ng;
  auto v = torch::randn({16}, torch::kDouble);
  const int64_t h = 4;
  const int64_t w = 4;
  auto features = v.view({1, 1, 16}).expand({1, h * w, 16}).contiguous();
  auto pos = spatial_position_encoding(h, w, 16, torch::kDouble).unsqueeze(0);
  auto encoded = cam->encode(features, pos)[0];
  auto proto = cam->pool_region(encoded, h, w, {0.4, 0.6, 0.5, 0.3});
  // Oracle: the same sublayer on a single cell with value v.
  auto single = cam->encode(v.view({1, 1, 16}), torch::zeros({1, 1, 16}, torch::kDouble))[0][0];
  EXPECT_LT((proto - single).abs().max().item<double>(), 1e-12);
}

TEST(Prototypes, PoolingRegionMatters) {
  Cam cam = make_cam(small_options());
  torch::NoGradGuard ng;
  auto encoded = torch::randn({16, 16}, torch::kDouble);
  auto whole = cam->pool_region(encoded, 4, 4, {0.5, 0.5, 1.0, 1.0});
  auto half = cam->pool_region(encoded, 4, 4, {0.25, 0.5, 0.5, 1.0});
  EXPECT_GT((whole - half).abs().max().item<double>(), 1e-6);
}

TEST(FeatureMatch, RowsAreStochastic) {
  Cam cam = make_cam(small_options());
  torch::NoGradGuard ng;
  for (int i = 0; i < 20; ++i) {
    auto q = torch::randn({2, 9, 16}, torch::kDouble) * 3.0;
    auto s = torch::randn({5, 16}, torch::kDouble);
    MatchResult m = cam->feature_match(q, s);
    EXPECT_LT((m.coefficients.sum(-1) - 1.0).abs().max().item<double>(), 1e-12);
    EXPECT_GE(m.coefficients.min().item<double>(), 0.0);
  }
}

TEST(FeatureMatch, ZeroQueryGivesUniformCoefficients) {
  Cam cam = make_cam(small_options());
  torch::NoGradGuard ng;
  MatchResult m = cam->feature_match(torch::zeros({1, 6, 16}, torch::kDouble), torch::randn({4, 16}, torch::kDouble));
  EXPECT_LT((m.coefficients - 0.25).abs().max().item<double>(), 1e-12);
}

TEST(FeatureMatch, JointPermutationKeepsFilteredFeatures) {
  Cam cam = make_cam(small_options());
  torch::NoGradGuard ng;
  auto q = torch::randn({1, 9, 16}, torch::kDouble);
  auto s = torch::randn({4, 16}, torch::kDouble);
  auto perm = torch::tensor({0, 3, 1, 2}, torch::kLong);
  auto a = cam->feature_match(q, s);
  auto b = cam->feature_match(q, s.index_select(0, perm));
  EXPECT_LT((a.filtered - b.filtered).abs().max().item<double>(), 1e-12);
  EXPECT_LT((a.coefficients.index_select(-1, perm) - b.coefficients).abs().max().item<double>(), 1e-15);
}

TEST(EncodingMatch, SelectsEncodingRows) {
  Cam cam = make_cam(small_options());
  auto t = make_task_encodings(3, 16, torch::kDouble);
  auto a = torch::zeros({1, 2, 4}, torch::kDouble);
  a[0][0][0] = 1.0;
  a[0][1][2] = 1.0;
  auto e = cam->encoding_match(a, t);
  EXPECT_EQ(e[0][0].abs().sum().item<double>(), 0.0);
  EXPECT_TRUE(torch::equal(e[0][1], t[2]));
}

TEST(EncodingMatch, ShapeMismatch) {
  Cam cam = make_cam(small_options());
  try {
    cam->encoding_match(torch::ones({1, 2, 4}, torch::kDouble), make_task_encodings(4, 16, torch::kDouble));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kShapeMismatch);
  }
}

TEST(CamForward, ShapeAndDeterminism) {
  Cam cam = make_cam(small_options(), torch::kFloat);
  torch::NoGradGuard ng;
  auto q = torch::randn({2, 12, 16});
  auto pos = spatial_position_encoding(3, 4, 16).unsqueeze(0);
  auto s = cam->with_background(torch::randn({3, 16}));
  auto t = make_task_encodings(3, 16);
  auto a = cam->forward(q, pos, s, t);
  auto b = cam->forward(q, pos, s, t);
  EXPECT_EQ(a.sizes(), q.sizes());
  EXPECT_TRUE(torch::equal(a, b));
}

TEST(CamForward, JointPermutationIsBitwiseInvariant) {
  Cam cam = make_cam(small_options(), torch::kFloat);
  torch::NoGradGuard ng;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t c = 1 + trial % 6;
    auto q = torch::randn({1, 16, 16});
    auto pos = spatial_position_encoding(4, 4, 16).unsqueeze(0);
    auto s = cam->with_background(torch::randn({c, 16}));
    auto t = make_task_encodings(c, 16);
    std::vector<int64_t> order(static_cast<std::size_t>(c));
    std::iota(order.begin(), order.end(), 1);
    std::shuffle(order.begin(), order.end(), rng);
    order.insert(order.begin(), 0);
    auto perm = torch::tensor(order, torch::kLong);
    auto a = cam->forward(q, pos, s, t);
    auto b = cam->forward(q, pos, s.index_select(0, perm), t.index_select(0, perm));
    ASSERT_TRUE(torch::equal(a, b)) << "C=" << c;
  }
}

TEST(CamForward, BackgroundOnly) {
  Cam cam = make_cam(small_options());
  torch::NoGradGuard ng;
  auto q = torch::randn({1, 9, 16}, torch::kDouble);
  auto pos = spatial_position_encoding(3, 3, 16, torch::kDouble).unsqueeze(0);
  auto s = cam->with_background(torch::zeros({0, 16}, torch::kDouble));
  MatchResult m;
  auto out = cam->forward_with_match(q, pos, s, make_task_encodings(0, 16, torch::kDouble), &m);
  EXPECT_EQ(out.sizes(), q.sizes());
  EXPECT_TRUE(torch::equal(m.coefficients, torch::ones_like(m.coefficients)));
  EXPECT_EQ(m.encodings.abs().sum().item<double>(), 0.0);
}

TEST(CamForward, FlagsChangeTheComputation) {
  torch::NoGradGuard ng;
  auto q = torch::randn({1, 9, 16}, torch::kDouble);
  auto pos = spatial_position_encoding(3, 3, 16, torch::kDouble).unsqueeze(0);
  auto protos = torch::randn({3, 16}, torch::kDouble);
  auto t = make_task_encodings(3, 16, torch::kDouble);
  auto run = [&](CamOptions o, MatchResult* m) {
    Cam cam = make_cam(o);
    return cam->forward_with_match(q, pos, cam->with_background(protos), t, m);
  };
  MatchResult full;
  auto base = run(small_options(), &full);
  CamOptions no_sigmoid = small_options();
  no_sigmoid.apply_sigmoid = false;
  CamOptions no_multiply = small_options();
  no_multiply.query_multiply = false;
  CamOptions no_background = small_options();
  no_background.model_background = false;
  MatchResult without_bg;
  EXPECT_FALSE(torch::equal(base, run(no_sigmoid, nullptr)));
  EXPECT_FALSE(torch::equal(base, run(no_multiply, nullptr)));
  EXPECT_FALSE(torch::equal(base, run(no_background, &without_bg)));
  EXPECT_EQ(full.coefficients.size(-1), 4);
  EXPECT_EQ(without_bg.coefficients.size(-1), 3);
}

TEST(CamForward, FilteredFeaturesFollowDefinition) {
  Cam cam = make_cam(small_options());
  torch::NoGradGuard ng;
  auto q = torch::randn({1, 5, 16}, torch::kDouble);
  auto s = torch::randn({3, 16}, torch::kDouble);
  MatchResult m = cam->feature_match(q, s);
  // Oracle recomputed from the named parameters.
  torch::Tensor w;
  for (const auto& p : cam->named_parameters()) {
    if (p.key() == "projection.weight") w = p.value();
  }
  ASSERT_TRUE(w.defined());
  auto a = torch::softmax(q.matmul(w.t()).matmul(s.matmul(w.t()).t()) / 4.0, -1);
  auto qf = a.matmul(torch::sigmoid(s)) * q;
  EXPECT_LT((a - m.coefficients).abs().max().item<double>(), 1e-12);
  EXPECT_LT((qf - m.filtered).abs().max().item<double>(), 1e-12);
}

TEST(CamForward, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 3; ++seed) {
    Cam cam = make_cam(small_options(8), torch::kDouble, static_cast<uint64_t>(seed));
    torch::manual_seed(100 + seed);
    auto q = torch::randn({1, 4, 8}, torch::kDouble).requires_grad_();
    auto s = torch::randn({3, 8}, torch::kDouble).requires_grad_();
    auto pos = spatial_position_encoding(2, 2, 8, torch::kDouble).unsqueeze(0);
    auto t = make_task_encodings(2, 8, torch::kDouble);
    auto readout = torch::randn({1, 4, 8}, torch::kDouble);
    auto f = [&] { return (cam->forward(q, pos, s, t) * readout).sum(); };
    std::vector<torch::Tensor> inputs = {q, s};
    for (const auto& p : cam->named_parameters()) {
      if (p.key() == "projection.weight" || p.key() == "ffn.fc1.weight") inputs.push_back(p.value());
    }
    EXPECT_LT(gradient_error(f, inputs), 1e-4);
  }
}

TEST(Classwise, SingleClassShapes) {
  torch::manual_seed(0);
  ClasswiseAggregator agg(16, 4, 32, 3);
  torch::NoGradGuard ng;
  auto q = torch::randn({2, 9, 16});
  auto pos = spatial_position_encoding(3, 3, 16).unsqueeze(0);
  EXPECT_EQ(agg->forward(q, pos, torch::randn({2, 16})).sizes(), q.sizes());
  EXPECT_EQ(agg->forward(q, pos, torch::randn({16})).sizes(), q.sizes());
}

}  // namespace
}  // namespace corrdet
