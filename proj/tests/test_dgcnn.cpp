#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "pcgan/dgcnn.hpp"
#include "pcgan/errors.hpp"
#include "pcgan/gradcheck.hpp"
#include "test_helpers.hpp"

using namespace pcgan;
using pcgan::testing::random_tensor;
using pcgan::testing::to_vector;

namespace {

// All-pairs oracle: sort every other row by (distance, index) after self.
std::vector<Index> brute_force_knn(const std::vector<double>& x, std::size_t n, std::size_t d, std::size_t k) {
  std::vector<Index> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, Index>> all;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += (x[i * d + c] - x[j * d + c]) * (x[i * d + c] - x[j * d + c]);
      all.push_back({s, static_cast<Index>(j)});
    }
    std::sort(all.begin(), all.end());
    out.push_back(static_cast<Index>(i));
    for (std::size_t q = 0; q + 1 < k; ++q) out.push_back(all[q].second);
  }
  return out;
}

// EdgeConv written out edge by edge: max_j leaky(theta . [v_i, v_i - v_j] + b).
Tensor literal_edge_conv(const Tensor& x, const KnnGraph& g, const Tensor& theta, const Tensor& bias) {
  auto self_rows = std::make_shared<std::vector<Index>>();
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t q = 0; q < g.k; ++q) self_rows->push_back(static_cast<Index>(i));
  auto nbr_rows = std::make_shared<const std::vector<Index>>(g.neighbors);
  Tensor vi = gather_rows(x, self_rows);
  Tensor vj = gather_rows(x, nbr_rows);
  Tensor edges = leaky_relu(add(matmul(concat({vi, sub(vi, vj)}, 1), theta), bias));
  return max(reshape(edges, {g.rows, g.k, theta.size(1)}), 1);
}

Tensor permute_cloud(const Tensor& x, const std::vector<Index>& perm) {
  // x is [1, n, 6]
  const std::size_t n = x.size(1);
  Tensor rows = gather_rows(reshape(x, {n, 6}), perm);
  return reshape(rows, {1, n, 6});
}

CriticSpec small_critic() {
  CriticSpec s;
  s.feature_widths = {6, 16, 32, 48};
  s.k_base = 8;
  s.k_step = 4;
  s.label_embed_dim = 8;
  s.label_hidden = 8;
  s.critic_hidden = {24, 12};
  s.num_classes = 3;
  return s;
}

ClassifierSpec small_classifier() {
  ClassifierSpec s;
  s.feature_widths = {6, 16, 32};
  s.k = 8;
  s.head_hidden = 16;
  s.num_classes = 3;
  return s;
}

std::vector<Index> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<Index> p(n);
  std::iota(p.begin(), p.end(), Index(0));
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

TEST_CASE("knn on collinear points 0, 1, 3") {
  Tensor x({3, 1}, {0, 1, 3});
  KnnGraph g = knn(x, 2);
  auto n1 = g.neighbors_of(1);
  CHECK(std::vector<Index>(n1.begin(), n1.end()) == std::vector<Index>{1, 0});
  auto n0 = g.neighbors_of(0);
  CHECK(std::vector<Index>(n0.begin(), n0.end()) == std::vector<Index>{0, 1});
  auto n2 = g.neighbors_of(2);
  CHECK(std::vector<Index>(n2.begin(), n2.end()) == std::vector<Index>{2, 1});
}

TEST_CASE("knn with k = N lists every vertex") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({7, 3}, rng);
  KnnGraph g = knn(x, 7);
  for (std::size_t i = 0; i < 7; ++i) {
    auto nb = g.neighbors_of(i);
    std::vector<Index> sorted(nb.begin(), nb.end());
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<Index>{0, 1, 2, 3, 4, 5, 6});
    CHECK(nb[0] == i);
  }
}

TEST_CASE("knn resolves duplicate points by index and keeps self first") {
  Tensor x({4, 2}, {0, 0, 0, 0, 0, 0, 5, 5});
  KnnGraph g = knn(x, 2);
  CHECK(g.neighbors_of(0)[1] == 1);
  CHECK(g.neighbors_of(1)[1] == 0);
  CHECK(g.neighbors_of(2)[0] == 2);
  CHECK(g.neighbors_of(2)[1] == 0);
  KnnGraph again = knn(x, 2);
  CHECK(again.neighbors == g.neighbors);
}

TEST_CASE("knn rejects k > N") {
  Tensor x({3, 1}, {0, 1, 3});
  CHECK_THROWS_AS(knn(x, 4), ShapeError);
}

TEST_CASE("knn matches the all-pairs oracle") {
  std::mt19937_64 rng(5);
  for (std::size_t n : {5u, 64u, 512u}) {
    Tensor x = random_tensor({n, 6}, rng);
    const std::size_t k = std::min<std::size_t>(n, 20);
    KnnGraph g = knn(x, k);
    CHECK(g.neighbors == brute_force_knn(to_vector(x), n, 6, k));
  }
}

TEST_CASE("batched knn keeps clouds separate") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2 * 10, 3}, rng);
  KnnGraph g = knn(x, 4, 2);
  for (std::size_t i = 0; i < 20; ++i)
    for (Index j : g.neighbors_of(i)) CHECK((j / 10) == (i / 10));
  const auto all = to_vector(x);
  auto second = brute_force_knn(std::vector<double>(all.begin() + 30, all.end()), 10, 3, 4);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t q = 0; q < 4; ++q) CHECK(g.neighbors_of(10 + i)[q] == second[i * 4 + q] + 10);
}

TEST_CASE("edge_conv equals the literal edge formula") {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({30, 5}, rng);
  Tensor theta = random_tensor({10, 7}, rng);
  Tensor bias = random_tensor({7}, rng);
  KnnGraph g = knn(x, 6);
  auto fast = to_vector(edge_conv(x, g, theta, bias));
  auto slow = to_vector(literal_edge_conv(x, g, theta, bias));
  REQUIRE(fast.size() == slow.size());
  for (std::size_t i = 0; i < fast.size(); ++i) CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-12));
}

TEST_CASE("edge_conv gradients match the literal formula") {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({12, 4}, rng, -1, 1, true);
  Tensor theta = random_tensor({8, 5}, rng, -1, 1, true);
  Tensor bias = random_tensor({5}, rng, -1, 1, true);
  KnnGraph g = knn(x, 4);
  auto a = grad(pcgan::testing::weighted_sum(edge_conv(x, g, theta, bias)), {x, theta, bias});
  auto b = grad(pcgan::testing::weighted_sum(literal_edge_conv(x, g, theta, bias)), {x, theta, bias});
  for (std::size_t t = 0; t < 3; ++t) {
    auto va = to_vector(a[t]), vb = to_vector(b[t]);
    for (std::size_t i = 0; i < va.size(); ++i) CHECK(va[i] == doctest::Approx(vb[i]).epsilon(1e-10));
  }
}

TEST_CASE("edge_conv with identical points gives identical rows") {
  std::mt19937_64 rng(9);
  Tensor x = Tensor::full({5, 3}, Real(0.3));
  Tensor theta = random_tensor({6, 4}, rng);
  Tensor bias = random_tensor({4}, rng);
  auto out = to_vector(edge_conv(x, knn(x, 3), theta, bias));
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(out[i * 4 + c] == out[c]);
}

TEST_CASE("edge_conv with k = 1 applies theta to (v_i, 0)") {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor theta = random_tensor({6, 2}, rng);
  Tensor bias = random_tensor({2}, rng);
  auto out = to_vector(edge_conv(x, knn(x, 1), theta, bias));
  auto xv = to_vector(x), tv = to_vector(theta), bv = to_vector(bias);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double s = bv[c];
      for (std::size_t r = 0; r < 3; ++r) s += xv[i * 3 + r] * tv[r * 2 + c];
      double want = s > 0 ? s : 0.2 * s;
      CHECK(out[i * 2 + c] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("edge_conv is permutation equivariant") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({20, 4}, rng);
  Tensor theta = random_tensor({8, 6}, rng);
  Tensor bias = random_tensor({6}, rng);
  auto perm = shuffled(20, 3);
  Tensor px = gather_rows(x, perm);
  auto out = to_vector(edge_conv(x, knn(x, 5), theta, bias));
  auto pout = to_vector(edge_conv(px, knn(px, 5), theta, bias));
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t c = 0; c < 6; ++c) CHECK(pout[i * 6 + c] == out[perm[i] * 6 + c]);
}

TEST_CASE("edge_conv rejects mismatched theta") {
  Tensor x({3, 2}, {0, 1, 2, 3, 4, 5});
  CHECK_THROWS_AS(edge_conv(x, knn(x, 2), Tensor::zeros({3, 2}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("critic k grows by 10 per stage with defaults") {
  CriticSpec spec;
  CHECK(spec.k_for_stage(0) == 20);
  CHECK(spec.k_for_stage(1) == 30);
  CHECK(spec.k_for_stage(3) == 50);
}

TEST_CASE("feature transform output width and N < k error") {
  CriticSpec spec;
  spec.num_classes = 2;
  Critic d(spec, 1);
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({1, 40, 6}, rng, -0.5, 0.5);
  NoGradGuard guard;
  CHECK(d.feature_transform(x, 0).shape() == Shape{1, 1024});
  CHECK_THROWS_AS(d.feature_transform(x, 3), ShapeError);  // k = 50 > 40
}

TEST_CASE("critic has no normalization layers") {
  Critic d(CriticSpec{}, 1);
  for (const auto& p : d.parameters().items()) {
    INFO(p.name);
    const bool known = p.name.rfind("D.edge", 0) == 0 || p.name.rfind("D.label", 0) == 0 || p.name.rfind("D.head", 0) == 0;
    CHECK(known);
    CHECK(p.name.find("norm") == std::string::npos);
  }
}

TEST_CASE("critic score is exactly invariant to point order") {
  Critic d(small_critic(), 2);
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({1, 64, 6}, rng, -0.5, 0.5);
  std::vector<int> labels{1};
  for (std::size_t stage : {0u, 1u}) {
    const Real score = d.criticize(x, labels, stage).item();
    for (std::uint64_t s = 0; s < 3; ++s) {
      const Real permuted = d.criticize(permute_cloud(x, shuffled(64, s)), labels, stage).item();
      CHECK(permuted == score);
    }
    CHECK(std::isfinite(score));
    CHECK(d.criticize(x, labels, stage).item() == score);
  }
  auto f = to_vector(d.feature_transform(x, 0));
  auto pf = to_vector(d.feature_transform(permute_cloud(x, shuffled(64, 9)), 0));
  CHECK(f == pf);
}

TEST_CASE("critic scores a batch row by row") {
  Critic d(small_critic(), 2);
  std::mt19937_64 rng(14);
  Tensor x = random_tensor({3, 32, 6}, rng, -0.5, 0.5);
  std::vector<int> labels{0, 1, 2};
  auto batch = to_vector(d.criticize(x, labels, 0));
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor one = reshape(narrow(x, 0, b, 1), {1, 32, 6});
    std::vector<int> l{labels[b]};
    CHECK(d.criticize(one, l, 0).item() == batch[b]);
  }
  std::vector<int> short_labels{0};
  CHECK_THROWS_AS(d.criticize(x, short_labels, 0), ShapeError);
}

TEST_CASE("critic input gradient is finite and matches finite differences") {
  Critic d(small_critic(), 3);
  std::mt19937_64 rng(15);
  Tensor x = random_tensor({1, 16, 6}, rng, -0.5, 0.5, true);
  std::vector<int> labels{2};
  Tensor g = grad(sum(d.criticize(x, labels, 0)), {x})[0];
  for (Real v : g.values()) CHECK(std::isfinite(v));
  // kNN is piecewise constant in x; small steps keep the graph fixed
  auto check = finite_difference_check([&] { return sum(d.criticize(x, labels, 0)); }, x, 1e-6);
  CHECK(check.max_relative_error < 1e-4);
}

TEST_CASE("classifier probabilities sum to one and features are deterministic") {
  Classifier c(small_classifier(), 4);
  std::mt19937_64 rng(16);
  Tensor x = random_tensor({4, 24, 6}, rng, -0.5, 0.5);
  auto p = to_vector(c.classify(x));
  REQUIRE(p.size() == 12);
  for (std::size_t b = 0; b < 4; ++b) CHECK(std::abs(p[b * 3] + p[b * 3 + 1] + p[b * 3 + 2] - 1.0) < 1e-9);
  CHECK(c.extract_512(x).shape() == Shape{4, 32});
  CHECK(to_vector(c.extract_512(x)) == to_vector(c.extract_512(x)));
  ClassifierSpec full;
  CHECK(full.feature_widths.back() == 512);
}

TEST_CASE("classifier output is exactly invariant to point order") {
  Classifier c(small_classifier(), 5);
  std::mt19937_64 rng(17);
  Tensor x = random_tensor({1, 48, 6}, rng, -0.5, 0.5);
  auto perm = shuffled(48, 4);
  CHECK(to_vector(c.extract_512(x)) == to_vector(c.extract_512(permute_cloud(x, perm))));
  CHECK(to_vector(c.classify(x)) == to_vector(c.classify(permute_cloud(x, perm))));
}

TEST_CASE("critic and classifier specs round trip through json") {
  CriticSpec s = small_critic();
  nlohmann::json j = s;
  CriticSpec back = j.get<CriticSpec>();
  CHECK(back.feature_widths == s.feature_widths);
  CHECK(back.critic_hidden == s.critic_hidden);
  j["batch_norm"] = true;
  CHECK_THROWS_AS(j.get<CriticSpec>(), UsageError);
  nlohmann::json jc = small_classifier();
  CHECK(jc.get<ClassifierSpec>().k == 8);
}
