#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <vector>

#include "doctest.h"
#include "pcgan/errors.hpp"
#include "pcgan/treegen.hpp"
#include "test_helpers.hpp"

using namespace pcgan;
using pcgan::testing::random_tensor;
using pcgan::testing::to_vector;

namespace {

// Same topology as the default, thin enough to run quickly.
GeneratorSpec small_spec() {
  GeneratorSpec s;
  s.z_dim = 8;
  s.label_embed_dim = 8;
  s.label_hidden = 8;
  s.branch_depths = {1, 2, 2, 2, 2};
  s.leaf_factor = 4;
  s.feature_widths = {16, 16, 12, 12, 8, 8, 6};
  s.support = 3;
  s.num_classes = 3;
  return s;
}

Tensor sample_z(const GeneratorSpec& spec, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({batch, spec.z_dim}, rng);
}

// Parameter leaves are shared handles; a copy writes through to the store.
std::span<Real> writable(Tensor leaf) { return leaf.mutable_values(); }

void zero_all(ParameterStore& params) {
  for (const auto& p : params.items()) std::ranges::fill(writable(p.tensor), Real(0));
}

}  // namespace

TEST_CASE("default spec resolution is 64 * 16 = 1024") {
  GeneratorSpec spec;
  CHECK(spec.resolution() == 1024);
  CHECK_NOTHROW(spec.validate());
  auto schedule = StageSchedule::doubling(spec, 4, 10);
  REQUIRE(schedule.stages.size() == 4);
  CHECK(schedule.stages[0].resolution == 1024);
  CHECK(schedule.stages[1].resolution == 2048);
  CHECK(schedule.stages[2].resolution == 4096);
  CHECK(schedule.stages[3].resolution == 8192);
  CHECK_NOTHROW(schedule.validate(spec));
  CHECK(StageSchedule::replication_source(5, 0) == 5);
  CHECK(StageSchedule::replication_source(5, 2) == 7);
}

TEST_CASE("spec validation rejects malformed widths") {
  GeneratorSpec spec;
  spec.feature_widths.pop_back();
  CHECK_THROWS_AS(spec.validate(), UsageError);
  spec = GeneratorSpec{};
  spec.feature_widths.back() = 7;
  CHECK_THROWS_AS(spec.validate(), UsageError);
  StageSchedule bad{{{1024, 1}, {3000, 1}}};
  CHECK_THROWS_AS(bad.validate(GeneratorSpec{}), UsageError);
}

TEST_CASE("spec json round trip") {
  GeneratorSpec spec = small_spec();
  spec.ancestor_window = 0;
  nlohmann::json j = spec;
  GeneratorSpec back = j.get<GeneratorSpec>();
  CHECK(back.branch_depths == spec.branch_depths);
  CHECK(back.feature_widths == spec.feature_widths);
  CHECK(back.ancestor_window == 0);
  CHECK(back.num_classes == 3);
  j["bogus"] = 1;
  CHECK_THROWS_AS(j.get<GeneratorSpec>(), UsageError);
}

TEST_CASE("label transform with zero weights gives the bias for every class") {
  GeneratorSpec spec = small_spec();
  spec.num_classes = 5;
  Generator g(spec, 1);
  zero_all(g.parameters());
  auto b1 = writable(g.parameters().at("G.label.b1"));
  for (std::size_t i = 0; i < b1.size(); ++i) b1[i] = Real(i) * Real(0.25);
  std::vector<int> labels{0, 2, 4};
  Tensor e = g.label_transform(labels);
  REQUIRE(e.shape() == Shape{3, 8});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(e.values()[r * 8 + c] == Real(c) * Real(0.25));
}

TEST_CASE("label transform feeds a one-hot vector") {
  // With W0 = I-like pass-through and W1 = I, class c lights exactly hidden unit c.
  GeneratorSpec spec = small_spec();
  spec.num_classes = 5;
  Generator g(spec, 1);
  zero_all(g.parameters());
  auto w0 = writable(g.parameters().at("G.label.W0"));  // [5, 8]
  for (std::size_t c = 0; c < 5; ++c) w0[c * 8 + c] = 1;
  auto w1 = writable(g.parameters().at("G.label.W1"));  // [8, 8]
  for (std::size_t c = 0; c < 8; ++c) w1[c * 8 + c] = 1;
  std::vector<int> labels{2};
  auto e = to_vector(g.label_transform(labels));
  std::vector<double> want{0, 0, 1, 0, 0, 0, 0, 0};
  CHECK(e == want);
}

TEST_CASE("label transform is deterministic and rejects bad classes") {
  Generator g(small_spec(), 7);
  std::vector<int> labels{1, 1};
  auto a = to_vector(g.label_transform(labels));
  auto b = to_vector(g.label_transform(labels));
  CHECK(a == b);
  std::vector<int> bad{3};
  CHECK_THROWS_AS(g.label_transform(bad), UsageError);
  std::vector<int> negative{-1};
  CHECK_THROWS_AS(g.label_transform(negative), UsageError);
}

TEST_CASE("make_point_vector concatenates z_in first") {
  Tensor z = Generator::make_point_vector(Tensor::ones({64}), Tensor::zeros({64}));
  REQUIRE(z.shape() == Shape{128});
  for (std::size_t i = 0; i < 64; ++i) CHECK(z.values()[i] == 1);
  for (std::size_t i = 64; i < 128; ++i) CHECK(z.values()[i] == 0);
  CHECK(z.numel() == GeneratorSpec{}.feature_widths[0]);
  CHECK_THROWS_AS(Generator::make_point_vector(Tensor::ones({2, 4}), Tensor::ones({3, 4})), ShapeError);
}

TEST_CASE("node counts per layer follow the branch factors") {
  GeneratorSpec spec = small_spec();
  Generator g(spec, 3);
  std::vector<int> labels{0, 1};
  Tensor root = Generator::make_point_vector(sample_z(spec, 2, 1), g.label_transform(labels));
  TreeState state(root);
  for (std::size_t l = 1; l <= spec.num_branches(); ++l) state = g.tree_gcn_layer(std::move(state), l);
  std::vector<std::size_t> counts;
  for (std::size_t l = 0; l < state.depth(); ++l) counts.push_back(state.nodes(l));
  CHECK(counts == std::vector<std::size_t>{1, 1, 2, 4, 8, 16});
  Tensor cloud = g.leaf_layer(state);
  CHECK(cloud.shape() == Shape{2, 16 * spec.leaf_factor, 6});
}

TEST_CASE("ancestor map points every node at exactly one parent") {
  GeneratorSpec spec = small_spec();
  Generator g(spec, 3);
  std::vector<int> labels{0, 2};
  TreeState state(Generator::make_point_vector(sample_z(spec, 2, 1), g.label_transform(labels)));
  for (std::size_t l = 1; l <= spec.num_branches(); ++l) state = g.tree_gcn_layer(std::move(state), l);
  auto rows = state.ancestor_rows(5, 4);
  REQUIRE(rows->size() == 2 * 16);
  // children of a node are contiguous and each node has h = 2 children
  for (std::size_t t = 0; t < 32; ++t) CHECK((*rows)[t] == t / 2);
  auto roots = state.ancestor_rows(5, 0);
  for (std::size_t t = 0; t < 32; ++t) CHECK((*roots)[t] == t / 16);
  CHECK_THROWS_AS(state.ancestor_rows(2, 4), ShapeError);
}

TEST_CASE("a layer reads only the last three ancestor layers") {
  GeneratorSpec spec = small_spec();
  Generator g(spec, 3);
  std::vector<int> labels{0};
  TreeState state(Generator::make_point_vector(sample_z(spec, 1, 1), g.label_transform(labels)));
  for (std::size_t l = 1; l <= spec.num_branches(); ++l) {
    state.clear_reads();
    state.log_reads(true);
    state = g.tree_gcn_layer(std::move(state), l);
    state.log_reads(false);
    std::set<std::size_t> read(state.reads().begin(), state.reads().end());
    std::set<std::size_t> allowed;
    for (std::size_t a = (l >= 3 ? l - 3 : 0); a < l; ++a) allowed.insert(a);
    CHECK(read == allowed);
  }
}

TEST_CASE("ancestor window 0 reads the full ancestry") {
  GeneratorSpec spec = small_spec();
  spec.ancestor_window = 0;
  Generator g(spec, 3);
  CHECK(g.parameters().contains("G.branch5.W5"));
  CHECK(g.parameters().contains("G.leaf.W6"));
  std::vector<int> labels{0};
  TreeState state(Generator::make_point_vector(sample_z(spec, 1, 1), g.label_transform(labels)));
  for (std::size_t l = 1; l <= 4; ++l) state = g.tree_gcn_layer(std::move(state), l);
  state.log_reads(true);
  state = g.tree_gcn_layer(std::move(state), 5);
  std::set<std::size_t> read(state.reads().begin(), state.reads().end());
  CHECK(read == std::set<std::size_t>{0, 1, 2, 3, 4});
}

TEST_CASE("zero parameters give zero features") {
  GeneratorSpec spec = small_spec();
  Generator g(spec, 3);
  zero_all(g.parameters());
  std::vector<int> labels{0, 1};
  Tensor cloud = g.generate(sample_z(spec, 2, 4), labels);
  for (Real v : cloud.values()) CHECK(v == 0);
}

TEST_CASE("leaf layer rejects a state of the wrong width") {
  GeneratorSpec spec = small_spec();
  Generator g(spec, 3);
  std::mt19937_64 rng(1);
  TreeState state(random_tensor({1, spec.feature_widths[0]}, rng));
  CHECK_THROWS_AS(g.leaf_layer(state), ShapeError);
  TreeState wide(random_tensor({1, 5}, rng));
  CHECK_THROWS_AS(g.tree_gcn_layer(wide, 1), ShapeError);
}

TEST_CASE("generate at the default spec yields 1024 points with colors in range") {
  GeneratorSpec spec;
  Generator g(spec, 11);
  std::vector<int> labels{1};
  Tensor cloud;
  {
    NoGradGuard guard;
    cloud = g.generate(sample_z(spec, 1, 5), labels);
  }
  REQUIRE(cloud.shape() == Shape{1, 1024, 6});
  for (std::size_t i = 0; i < 1024; ++i)
    for (std::size_t c = 0; c < 6; ++c) {
      Real v = cloud.values()[i * 6 + c];
      CHECK(std::isfinite(v));
      if (c >= 3) {
        CHECK(v >= Real(-0.5));
        CHECK(v <= Real(0.5));
      }
    }
}

TEST_CASE("generation is deterministic for fixed seed and class") {
  GeneratorSpec spec = small_spec();
  Generator a(spec, 21), b(spec, 21);
  std::vector<int> labels{2};
  CHECK(to_vector(a.generate(sample_z(spec, 1, 9), labels)) ==
        to_vector(b.generate(sample_z(spec, 1, 9), labels)));
}

TEST_CASE("changing the class changes the cloud") {
  GeneratorSpec spec = small_spec();
  Generator g(spec, 21);
  Tensor z = sample_z(spec, 1, 9);
  std::vector<std::vector<double>> clouds;
  for (int c = 0; c < 3; ++c) {
    std::vector<int> labels{c};
    clouds.push_back(to_vector(g.generate(z, labels)));
  }
  CHECK(clouds[0] != clouds[1]);
  CHECK(clouds[1] != clouds[2]);
}

TEST_CASE("every generator parameter receives a gradient") {
  GeneratorSpec spec = small_spec();
  Generator g(spec, 5);
  // zero-initialized biases still get gradients; nonzero biases avoid dead ties
  std::mt19937_64 rng(2);
  for (const auto& p : g.parameters().items())
    if (p.name.back() == 'b' || p.name.find(".b") != std::string::npos || p.name.find(".r") != std::string::npos)
      for (auto& v : writable(p.tensor)) v = static_cast<Real>(std::uniform_real_distribution<double>(-0.1, 0.1)(rng));
  std::vector<int> labels{0, 1, 2};
  Tensor cloud = g.generate(sample_z(spec, 3, 1), labels);
  Tensor loss = neg(pcgan::testing::weighted_sum(cloud));
  Gradients grads = backward(loss);
  for (const auto& p : g.parameters().items()) {
    INFO(p.name);
    REQUIRE(grads.contains(p.tensor));
    double norm = 0;
    for (Real v : grads.get(p.tensor).values()) norm += double(v) * double(v);
    CHECK(norm > 0);
  }
}

TEST_CASE("growth replicates the last branch bit-exactly and doubles resolution") {
  GeneratorSpec spec;  // default widths: last branch maps 128 -> 128
  spec.z_dim = spec.label_embed_dim = 8;
  spec.feature_widths[0] = 16;
  spec.leaf_factor = 4;
  spec.support = 2;
  Generator g(spec, 13);
  auto schedule = StageSchedule::doubling(spec, 3, 1);
  std::vector<Parameter> before = g.parameters().items();
  Rng rng(99);
  g.grow(schedule, rng);
  CHECK(g.stage() == 1);
  CHECK(g.spec().branch_depths == std::vector<std::size_t>{1, 2, 2, 2, 2, 2});
  CHECK(g.spec().feature_widths == std::vector<std::size_t>{16, 128, 256, 256, 128, 128, 128, 6});
  CHECK(g.resolution() == 2 * spec.resolution());

  const auto& p = g.parameters();
  for (const std::string local : {"B0", "B1", "S1", "S2", "r1", "r2", "b", "W1"}) {
    INFO(local);
    CHECK(to_vector(p.at("G.branch6." + local)) == to_vector(p.at("G.branch5." + local)));
    CHECK(p.at("G.branch6." + local).id() != p.at("G.branch5." + local).id());
  }
  // slots 2 and 3 now read ancestors of another width, so they are re-drawn
  CHECK(p.at("G.branch5.W2").shape() == Shape{256, 128});
  CHECK(p.at("G.branch6.W2").shape() == Shape{128, 128});
  CHECK(p.at("G.branch6.W3").shape() == Shape{256, 128});
  // every pre-existing parameter of matching shape is untouched
  for (const auto& old : before) {
    INFO(old.name);
    if (p.at(old.name).shape() == old.tensor.shape())
      CHECK(to_vector(p.at(old.name)) == to_vector(old.tensor));
  }

  std::vector<int> labels{0};
  NoGradGuard guard;
  Tensor cloud = g.generate(sample_z(g.spec(), 1, 3), labels);
  CHECK(cloud.shape() == Shape{1, 2 * spec.resolution(), 6});

  g.grow(schedule, rng);
  CHECK(g.resolution() == 4 * spec.resolution());
  CHECK_THROWS_AS(g.grow(schedule, rng), UsageError);
}

TEST_CASE("node-count law holds across growth events") {
  GeneratorSpec spec;
  Generator g(spec, 1);
  auto schedule = StageSchedule::doubling(spec, 4, 1);
  Rng rng(1);
  for (std::size_t d = 0; d < 4; ++d) {
    std::size_t product = spec.leaf_factor;
    for (auto h : g.spec().branch_depths) product *= h;
    CHECK(g.resolution() == product);
    CHECK(g.resolution() == schedule.stages[d].resolution);
    if (d + 1 < 4) g.grow(schedule, rng);
  }
  CHECK(g.resolution() == 8192);
}
