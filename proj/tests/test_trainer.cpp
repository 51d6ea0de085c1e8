#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "pcgan/errors.hpp"
#include "pcgan/gradcheck.hpp"
#include "pcgan/trainer.hpp"
#include "test_helpers.hpp"

using namespace pcgan;
using pcgan::testing::random_tensor;
using pcgan::testing::to_vector;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("pcgan_test_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

GeneratorSpec tiny_generator() {
  GeneratorSpec s;
  s.z_dim = 4;
  s.label_embed_dim = 4;
  s.label_hidden = 4;
  s.branch_depths = {1, 2};
  s.leaf_factor = 4;
  s.feature_widths = {8, 8, 8, 6};
  s.support = 2;
  s.num_classes = 2;
  return s;
}

CriticSpec tiny_critic() {
  CriticSpec s;
  s.feature_widths = {6, 8, 8, 8};
  s.k_base = 4;
  s.k_step = 2;
  s.label_embed_dim = 4;
  s.label_hidden = 4;
  s.critic_hidden = {8, 8};
  s.num_classes = 2;
  return s;
}

// Procedural dataset at 8/16/32 points plus a config training on it.
TrainConfig tiny_config(const fs::path& root, std::size_t iterations = 3) {
  static bool made = false;
  const fs::path data = fs::temp_directory_path() / "pcgan_test_trainer_dataset";
  if (!made) {
    fs::remove_all(data);
    ProceduralSpec spec = ProceduralSpec::desk_default();
    spec.samples_per_class = 4;
    spec.resolutions = {8, 16, 32};
    make_procedural_dataset(spec, data, 3);
    made = true;
  }
  TrainConfig c;
  c.seed = 17;
  c.batch_size = 3;
  c.lr = 1e-3;
  c.stages = {{8, iterations}, {16, iterations}, {32, iterations}};
  c.dataset_dir = data.string();
  c.out_dir = (root / "out").string();
  c.generator = tiny_generator();
  c.critic = tiny_critic();
  return c;
}

std::vector<std::vector<double>> snapshot(const ParameterStore& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params.items()) out.push_back(to_vector(p.tensor));
  return out;
}

// Score of an affine critic: sum over points and channels of w * x, plus b.
CriticFn affine_critic(const Tensor& w, Real b) {
  return [w, b](const Tensor& x) {
    return add_scalar(sum(reshape(mul(x, w), {x.size(0), x.numel() / x.size(0)}), 1), b);
  };
}

}  // namespace

TEST_CASE("Adam matches the reference recursion on a 3-step scalar example") {
  struct Case {
    AdamConfig config;
    double expected[3];
  };
  const Case cases[] = {
      {{0.1, 0.9, 0.999, 1e-8}, {0.900000002, 0.8654394181165108, 0.8275002408356956}},
      {{1e-4, 0.0, 0.95, 1e-8}, {0.999900000002, 0.9999530170809632, 0.9999207295433408}},
  };
  for (const auto& c : cases) {
    ParameterStore store;
    store.add("w", Tensor::scalar(1.0));
    Adam adam(c.config);
    const double grads[3] = {0.5, -0.2, 0.1};
    for (int t = 0; t < 3; ++t) {
      Tensor loss = scale(store.at("w"), static_cast<Real>(grads[t]));
      adam.step(store, backward(loss));
      CHECK(std::abs(store.at("w").item() - c.expected[t]) <= 1e-12);
    }
    CHECK(adam.steps("w") == 3);
  }
}

TEST_CASE("Adam skips frozen parameters and restarts moments on shape change") {
  ParameterStore store;
  store.add("a", Tensor::scalar(1.0));
  store.add("b", Tensor::scalar(2.0));
  Tensor b = store.at("b");
  b.set_requires_grad(false);
  Adam adam({0.1, 0.0, 0.95, 1e-8});
  adam.step(store, backward(add(store.at("a"), store.at("b"))));
  CHECK(store.at("b").item() == 2.0);
  CHECK(adam.steps("b") == 0);
  CHECK(adam.steps("a") == 1);
  store.replace("a", Tensor::zeros({2}));
  adam.prune(store);
  CHECK(adam.steps("a") == 0);
}

TEST_CASE("Adam state round trips through checkpoint records") {
  ParameterStore store;
  store.add("w", Tensor({2}, {1.0, -1.0}));
  Adam a({0.01, 0.5, 0.9, 1e-8});
  a.step(store, backward(sum(square(store.at("w")))));
  Adam b({0.01, 0.5, 0.9, 1e-8});
  b.load_records(decode_checkpoint(encode_checkpoint(a.to_records("ADAM."))), "ADAM.");
  ParameterStore s2;
  s2.add("w", store.at("w"));
  a.step(store, backward(sum(square(store.at("w")))));
  b.step(s2, backward(sum(square(s2.at("w")))));
  CHECK(to_vector(store.at("w")) == to_vector(s2.at("w")));
}

TEST_CASE("gradient penalty of an affine critic is lambda (g - 1)^2") {
  std::mt19937_64 rng(1);
  Tensor real = random_tensor({2, 4, 6}, rng);
  Tensor fake = random_tensor({2, 4, 6}, rng);
  Tensor eps = sample_interpolation_weights(2, 4, false, rng);
  Tensor w = random_tensor({4, 6}, rng);
  double g2 = 0;
  for (Real v : w.values()) g2 += double(v) * double(v);
  const double g = std::sqrt(g2);
  auto pen = gradient_penalty(affine_critic(w, 0.3), real, fake, eps, 10.0);
  CHECK(pen.value.item() == doctest::Approx(10.0 * (g - 1) * (g - 1)).epsilon(1e-12));
  CHECK(pen.mean_grad_norm == doctest::Approx(g).epsilon(1e-12));

  // unit gradient norm gives exactly zero
  Tensor unit = Tensor::zeros({4, 6});
  Tensor(unit).mutable_values()[5] = 1;
  CHECK(gradient_penalty(affine_critic(unit, 0), real, fake, eps, 10.0).value.item() == 0);
  // lambda = 0 switches the term off whatever the critic
  CHECK(gradient_penalty(affine_critic(w, 0), real, fake, eps, 0.0).value.item() == 0);
  Tensor bad = random_tensor({2, 5, 6}, rng);
  CHECK_THROWS_AS(gradient_penalty(affine_critic(w, 0), real, bad, eps, 10.0), ShapeError);
}

TEST_CASE("penalty interpolates between real and fake") {
  // D(x) = 0.5 * sum(x^2) has gradient x~, so the norm reveals the mixture.
  Tensor real = Tensor::full({1, 1, 6}, 1.0);
  Tensor fake = Tensor::full({1, 1, 6}, 3.0);
  Tensor eps({1, 1, 1}, {0.25});
  CriticFn d = [](const Tensor& x) { return scale(sum(reshape(square(x), {1, 6}), 1), 0.5); };
  auto pen = gradient_penalty(d, real, fake, eps, 1.0);
  const double mixed = 0.25 * 1 + 0.75 * 3;  // 2.5 in every coordinate
  CHECK(pen.mean_grad_norm == doctest::Approx(mixed * std::sqrt(6.0)).epsilon(1e-12));
}

TEST_CASE("penalty gradient w.r.t. critic parameters matches finite differences") {
  CriticSpec spec = tiny_critic();  // three edge-conv layers
  Critic d(spec, 4);
  std::mt19937_64 rng(2);
  Tensor real = random_tensor({2, 16, 6}, rng, -0.5, 0.5);
  Tensor fake = random_tensor({2, 16, 6}, rng, -0.5, 0.5);
  Tensor eps = sample_interpolation_weights(2, 16, false, rng);
  std::vector<int> labels{0, 1};
  auto penalty = [&] {
    return gradient_penalty([&](const Tensor& x) { return d.criticize(x, labels, 0); }, real, fake, eps, 10.0).value;
  };
  for (const char* name : {"D.edge0.theta", "D.edge2.b", "D.head.W0", "D.label.W1"}) {
    INFO(name);
    auto r = finite_difference_check(penalty, d.parameters().at(name), 1e-6);
    CHECK(r.max_relative_error < 1e-3);
    CHECK(r.checked > 0);
  }
}

TEST_CASE("critic step: zero lr repeats the loss, G stays frozen, penalty is logged") {
  auto root = scratch("critic_step");
  TrainConfig config = tiny_config(root);
  config.lr = 0;
  Generator g(tiny_generator(), 1);
  Critic d(tiny_critic(), 2);
  Adam opt(config.adam());
  std::mt19937_64 data_rng(3);
  Tensor real = random_tensor({3, 8, 6}, data_rng, -0.5, 0.5);
  std::vector<int> labels{0, 1, 1};
  auto g_before = snapshot(g.parameters());
  auto d_before = snapshot(d.parameters());
  Rng r1(9), r2(9);
  StepResult a = critic_step(g, d, opt, real, labels, 0, config, r1);
  StepResult b = critic_step(g, d, opt, real, labels, 0, config, r2);
  CHECK(a.loss == b.loss);
  CHECK(std::isfinite(a.loss));
  CHECK(snapshot(g.parameters()) == g_before);
  CHECK(snapshot(d.parameters()) == d_before);

  // replay the draws to recompute the penalty independently
  Rng r3(9);
  Tensor z = sample_latent(3, g.spec().z_dim, r3);
  Tensor fake = g.generate(z, labels).detach();
  Tensor eps = sample_interpolation_weights(3, 8, false, r3);
  auto pen = gradient_penalty([&](const Tensor& x) { return d.criticize(x, labels, 0); }, real, fake, eps,
                              config.gp_lambda);
  CHECK(a.penalty == static_cast<double>(pen.value.item()));

  config.lr = 1e-3;
  Adam live(config.adam());
  critic_step(g, d, live, real, labels, 0, config, r1);
  CHECK(snapshot(g.parameters()) == g_before);
  CHECK(snapshot(d.parameters()) != d_before);
  // both networks are trainable again afterwards
  for (const auto& p : g.parameters().items()) CHECK(p.tensor.requires_grad());
}

TEST_CASE("generator step leaves D untouched and is deterministic") {
  Generator g1(tiny_generator(), 1), g2(tiny_generator(), 1);
  Critic d(tiny_critic(), 2);
  auto d_before = snapshot(d.parameters());
  Adam o1({1e-3, 0, 0.95, 1e-8}), o2({1e-3, 0, 0.95, 1e-8});
  Rng r1(4), r2(4);
  StepResult a = generator_step(g1, d, o1, 3, 0, r1);
  StepResult b = generator_step(g2, d, o2, 3, 0, r2);
  CHECK(a.loss == b.loss);
  CHECK(snapshot(g1.parameters()) == snapshot(g2.parameters()));
  CHECK(snapshot(d.parameters()) == d_before);
}

TEST_CASE("a constant critic gives the generator exactly zero gradient") {
  Generator g(tiny_generator(), 1);
  Critic d(tiny_critic(), 2);
  for (const char* w : {"D.head.W0", "D.head.W1", "D.head.W2"})
    for (auto& v : Tensor(d.parameters().at(w)).mutable_values()) v = 0;
  Tensor(d.parameters().at("D.head.b2")).mutable_values()[0] = 0.7;
  Rng rng(5);
  std::vector<int> labels{0, 1};
  Tensor loss = neg(mean(d.criticize(g.generate(sample_latent(2, 4, rng), labels), labels, 0)));
  Gradients grads = backward(loss);
  for (const auto& p : g.parameters().items())
    for (Real v : grads.get_or_zeros(p.tensor).values()) CHECK(v == 0);
  auto before = snapshot(g.parameters());
  Adam opt({1e-3, 0, 0.95, 1e-8});
  StepResult r = generator_step(g, d, opt, 2, 0, rng);
  CHECK(r.loss == doctest::Approx(-0.7));
  CHECK(snapshot(g.parameters()) == before);
}

TEST_CASE("train config json: keys, defaults, validation, precision") {
  auto root = scratch("config");
  nlohmann::json j = {{"seed", 3},
                      {"batch_size", 4},
                      {"lr", 1e-4},
                      {"beta1", 0.0},
                      {"beta2", 0.95},
                      {"gp_lambda", 10},
                      {"critic_steps", 1},
                      {"stages", {{{"resolution", 1024}, {"iterations", 5}}, {{"resolution", 2048}, {"iterations", 5}}}},
                      {"dataset_dir", "data"},
                      {"out_dir", "runs"},
                      {"precision", "float64"}};
  std::ofstream(root / "train.json") << j.dump();
  TrainConfig c = TrainConfig::load(root / "train.json");
  CHECK(c.seed == 3);
  CHECK(c.stages.size() == 2);
  CHECK(fs::path(c.dataset_dir) == root / "data");
  CHECK_NOTHROW(c.validate());
  CHECK(c.generator.resolution() == 1024);

  c.gp_lambda = -1;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c.gp_lambda = 10;
  c.beta2 = 1.0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c.beta2 = 0.95;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c.batch_size = 1;
  c.stages[1].resolution = 3000;
  CHECK_THROWS_AS(c.validate(), UsageError);

  auto bad = j;
  bad["learning_rate"] = 1;
  CHECK_THROWS_AS(bad.get<TrainConfig>(), UsageError);
  CHECK_THROWS_AS(check_precision(kPrecisionBits == 64 ? "float32" : "float64"), UsageError);
  CHECK_NOTHROW(check_precision(kPrecisionBits == 64 ? "float64" : "float32"));
  CHECK_THROWS_AS(check_precision("float16"), UsageError);

  nlohmann::json round = c;
  CHECK(round.get<TrainConfig>().stages[0].iterations == 5);
}

TEST_CASE("train log csv has the fixed header and round trips") {
  TrainLog log;
  log.append({0, 0, -1.25, 0.5, 0.125, 0.01});
  log.append({1, 7, 0.1, 0.2, 0.3, 1.5});
  const std::string csv = log.to_csv();
  CHECK(csv.rfind("stage,iter,critic_loss,gen_loss,gp,seconds\n", 0) == 0);
  TrainLog back = TrainLog::parse_csv(csv);
  REQUIRE(back.rows().size() == 2);
  CHECK(back.rows()[1].iter == 7);
  CHECK(back.rows()[0].critic_loss == -1.25);
  CHECK_THROWS_AS(TrainLog::parse_csv("bad header\n"), DataError);
}

TEST_CASE("schedule run: stages grow, k increases, checkpoints at every boundary") {
  auto root = scratch("run");
  TrainConfig config = tiny_config(root, 2);
  Trainer t(config);
  CHECK(t.generator().spec().num_classes == 2);
  std::ostringstream progress;
  t.run(&progress);
  CHECK(t.finished());
  CHECK(t.generator().resolution() == 32);
  CHECK(t.generator().spec().branch_depths == std::vector<std::size_t>{1, 2, 2, 2});
  REQUIRE(t.log().rows().size() == 6);
  for (const auto& row : t.log().rows()) {
    CHECK(std::isfinite(row.critic_loss));
    CHECK(std::isfinite(row.gen_loss));
    CHECK(row.gp >= 0);
  }
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(fs::exists(t.checkpoint_dir(s) / "G.ckpt"));
    CHECK(fs::exists(t.checkpoint_dir(s) / "D.json"));
    CHECK(fs::exists(t.checkpoint_dir(s) / "optim.ckpt"));
  }
  CHECK(t.critic().spec().k_for_stage(2) == 8);
  // the boundary checkpoint holds the grown generator
  Generator g = load_generator(t.checkpoint_dir(0) / "G.ckpt");
  CHECK(g.resolution() == 16);
  CHECK(g.stage() == 1);

  std::ifstream in(fs::path(config.out_dir) / "train_log.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(TrainLog::parse_csv(ss.str()).rows().size() == 6);
  CHECK(progress.str().find("stage 2") != std::string::npos);
}

TEST_CASE("resuming from a stage boundary reproduces the loss sequence bit-exactly") {
  auto root = scratch("resume");
  TrainConfig config = tiny_config(root, 3);
  Trainer full(config);
  full.run();
  Trainer resumed = Trainer::resume(full.checkpoint_dir(0));
  CHECK(resumed.stage() == 1);
  resumed.run();
  const auto& a = full.log().rows();
  const auto& b = resumed.log().rows();
  REQUIRE(b.size() == 6);
  for (std::size_t i = 0; i < b.size(); ++i) {
    CHECK(b[i].stage == a[i + 3].stage);
    CHECK(b[i].iter == a[i + 3].iter);
    CHECK(b[i].critic_loss == a[i + 3].critic_loss);
    CHECK(b[i].gen_loss == a[i + 3].gen_loss);
    CHECK(b[i].gp == a[i + 3].gp);
  }
  for (const auto& p : full.generator().parameters().items()) {
    INFO(p.name);
    CHECK(to_vector(p.tensor) == to_vector(resumed.generator().parameters().at(p.name)));
  }
}

TEST_CASE("training refuses a dataset missing a stage resolution") {
  auto root = scratch("missing");
  TrainConfig config = tiny_config(root);
  config.stages.push_back({64, 1});
  CHECK_THROWS_AS(Trainer{config}, DataError);
  CHECK_FALSE(fs::exists(fs::path(config.out_dir) / "train_log.csv"));
}

TEST_CASE("default schedule visits 1024..8192 with k 20..50") {
  GeneratorSpec g;
  CriticSpec d;
  auto schedule = StageSchedule::doubling(g, 4, 1000);
  std::vector<std::size_t> res, ks;
  for (std::size_t s = 0; s < schedule.stages.size(); ++s) {
    res.push_back(schedule.stages[s].resolution);
    ks.push_back(d.k_for_stage(s));
  }
  CHECK(res == std::vector<std::size_t>{1024, 2048, 4096, 8192});
  CHECK(ks == std::vector<std::size_t>{20, 30, 40, 50});
}
