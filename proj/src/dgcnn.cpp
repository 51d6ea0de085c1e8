#include "pcgan/dgcnn.hpp"

#include <algorithm>
#include <utility>

#include "pcgan/errors.hpp"

namespace pcgan {

namespace {

Real squared_distance(const Real* a, const Real* b, std::size_t d) {
  // Fixed association order, so the value depends only on the two rows.
  Real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t c = 0;
  for (; c + 4 <= d; c += 4) {
    const Real e0 = a[c] - b[c], e1 = a[c + 1] - b[c + 1], e2 = a[c + 2] - b[c + 2], e3 = a[c + 3] - b[c + 3];
    s0 += e0 * e0;
    s1 += e1 * e1;
    s2 += e2 * e2;
    s3 += e3 * e3;
  }
  for (; c < d; ++c) {
    const Real e = a[c] - b[c];
    s0 += e * e;
  }
  return (s0 + s1) + (s2 + s3);
}

std::string edge_name(const std::string& prefix, std::size_t layer, const char* what) {
  return prefix + "edge" + std::to_string(layer) + "." + what;
}

void add_edge_layers(ParameterStore& params, const std::string& prefix, const std::vector<std::size_t>& widths,
                     Rng& rng) {
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    params.add(edge_name(prefix, l, "theta"), xavier_uniform(2 * widths[l], widths[l + 1], rng));
    params.add(edge_name(prefix, l, "b"), Tensor::zeros({widths[l + 1]}));
  }
}

void check_cloud_batch(const Tensor& x, std::size_t width, const char* who) {
  if (x.rank() != 3 || x.size(2) != width)
    throw ShapeError(std::string(who) + ": expected [batch, n, " + std::to_string(width) + "], got " +
                     shape_string(x.shape()));
}

}  // namespace

// ---- graph ops -----------------------------------------------------------------

KnnGraph knn(const Tensor& features, std::size_t k, std::size_t batch) {
  if (features.rank() != 2) throw ShapeError("knn: features must be [rows, d], got " + shape_string(features.shape()));
  if (batch == 0 || features.size(0) % batch != 0)
    throw ShapeError("knn: " + std::to_string(features.size(0)) + " rows do not split into " +
                     std::to_string(batch) + " clouds");
  const std::size_t n = features.size(0) / batch;
  const std::size_t d = features.size(1);
  if (k == 0 || k > n)
    throw ShapeError("knn: k=" + std::to_string(k) + " needs 1 <= k <= N, N=" + std::to_string(n));

  KnnGraph graph;
  graph.rows = features.size(0);
  graph.k = k;
  graph.neighbors.resize(graph.rows * k);
  const Real* x = features.values().data();
  std::vector<std::pair<Real, Index>> candidates(n > 0 ? n - 1 : 0);
  const auto closer = [](const auto& a, const auto& b) { return a < b; };  // distance, then index
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * n;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t m = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i)
          candidates[m++] = {squared_distance(x + (base + i) * d, x + (base + j) * d, d), static_cast<Index>(base + j)};
      std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k - 1),
                        candidates.end(), closer);
      Index* out = graph.neighbors.data() + (base + i) * k;
      out[0] = static_cast<Index>(base + i);
      for (std::size_t q = 0; q + 1 < k; ++q) out[q + 1] = candidates[q].second;
    }
  }
  return graph;
}

Tensor neighbor_max(const Tensor& a, const KnnGraph& graph) {
  if (a.rank() != 2 || a.size(0) != graph.rows)
    throw ShapeError("neighbor_max: features " + shape_string(a.shape()) + " do not match a graph over " +
                     std::to_string(graph.rows) + " rows");
  const std::size_t rows = graph.rows;
  const std::size_t d = a.size(1);
  const Real* v = a.values().data();
  auto picks = std::make_shared<std::vector<Index>>(rows * d);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto nbrs = graph.neighbors_of(i);
    for (std::size_t c = 0; c < d; ++c) {
      Index best = nbrs[0];
      for (std::size_t q = 1; q < nbrs.size(); ++q)
        if (v[nbrs[q] * d + c] > v[best * d + c]) best = nbrs[q];
      (*picks)[i * d + c] = static_cast<Index>(best * d + c);
    }
  }
  // Selecting single elements keeps the op differentiable to any order.
  return reshape(gather_rows(reshape(a, {rows * d, 1}), picks), {rows, d});
}

Tensor edge_conv(const Tensor& features, const KnnGraph& graph, const Tensor& theta, const Tensor& bias) {
  if (features.rank() != 2) throw ShapeError("edge_conv: features must be [rows, d], got " + shape_string(features.shape()));
  const std::size_t d_in = features.size(1);
  if (theta.rank() != 2 || theta.size(0) != 2 * d_in || bias.rank() != 1 || bias.size(0) != theta.size(1))
    throw ShapeError("edge_conv: theta " + shape_string(theta.shape()) + " / bias " + shape_string(bias.shape()) +
                     " do not fit input width " + std::to_string(d_in));
  // theta(v_i, v_i - v_j) = v_i (T + B) - v_j B + b. Leaky ReLU and rounded
  // subtraction are monotone, so the max over j equals the value at min_j v_j B.
  const Tensor top = narrow(theta, 0, 0, d_in);
  const Tensor bottom = narrow(theta, 0, d_in, d_in);
  Tensor centre = add(matmul(features, add(top, bottom)), bias);
  Tensor neighbour = matmul(features, bottom);
  return leaky_relu(add(centre, neighbor_max(neg(neighbour), graph)));
}

Tensor edge_conv_stack(const ParameterStore& params, const std::string& prefix,
                       const std::vector<std::size_t>& widths, const Tensor& x, std::size_t k) {
  check_cloud_batch(x, widths.front(), "edge_conv_stack");
  const std::size_t batch = x.size(0);
  const std::size_t n = x.size(1);
  if (n < k) throw ShapeError("edge_conv_stack: N=" + std::to_string(n) + " is smaller than k=" + std::to_string(k));
  Tensor h = reshape(x, {batch * n, widths.front()});
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const KnnGraph graph = knn(h, k, batch);
    h = edge_conv(h, graph, params.at(edge_name(prefix, l, "theta")), params.at(edge_name(prefix, l, "b")));
  }
  return h;
}

// ---- dense helpers -------------------------------------------------------------

void add_dense(ParameterStore& params, const std::string& prefix, std::size_t i, std::size_t in,
               std::size_t out, Rng& rng) {
  params.add(prefix + ".W" + std::to_string(i), xavier_uniform(in, out, rng));
  params.add(prefix + ".b" + std::to_string(i), Tensor::zeros({out}));
}

Tensor dense(const ParameterStore& params, const std::string& prefix, std::size_t i, const Tensor& x) {
  return add(matmul(x, params.at(prefix + ".W" + std::to_string(i))), params.at(prefix + ".b" + std::to_string(i)));
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  std::vector<Real> v(labels.size() * num_classes, Real(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw UsageError("class " + std::to_string(labels[i]) + " outside [0," + std::to_string(num_classes) + ")");
    v[i * num_classes + static_cast<std::size_t>(labels[i])] = 1;
  }
  return Tensor({labels.size(), num_classes}, std::move(v));
}

// ---- specs ---------------------------------------------------------------------

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
  for (const auto& [key, value] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw UsageError(std::string(what) + ": unknown key '" + key + "'");
}

}  // namespace

void CriticSpec::validate() const {
  if (feature_widths.size() < 2 || feature_widths.front() != 6)
    throw UsageError("critic: feature_widths must start at 6 and have at least one layer");
  if (std::find(feature_widths.begin(), feature_widths.end(), 0u) != feature_widths.end())
    throw UsageError("critic: feature widths must be positive");
  if (k_base == 0) throw UsageError("critic: k_base must be positive");
  if (critic_hidden.size() != 2 || critic_hidden[0] == 0 || critic_hidden[1] == 0)
    throw UsageError("critic: critic_hidden must list the two hidden widths of the head");
  if (num_classes == 0 || label_embed_dim == 0 || label_hidden == 0)
    throw UsageError("critic: dimensions must be positive");
}

void to_json(nlohmann::json& j, const CriticSpec& s) {
  j = nlohmann::json{{"feature_widths", s.feature_widths}, {"k_base", s.k_base},
                     {"k_step", s.k_step},                 {"label_embed_dim", s.label_embed_dim},
                     {"label_hidden", s.label_hidden},     {"critic_hidden", s.critic_hidden},
                     {"num_classes", s.num_classes}};
}

void from_json(const nlohmann::json& j, CriticSpec& s) {
  reject_unknown(j, {"feature_widths", "k_base", "k_step", "label_embed_dim", "label_hidden", "critic_hidden", "num_classes"},
                 "critic spec");
  CriticSpec d;
  s.feature_widths = j.value("feature_widths", d.feature_widths);
  s.k_base = j.value("k_base", d.k_base);
  s.k_step = j.value("k_step", d.k_step);
  s.label_embed_dim = j.value("label_embed_dim", d.label_embed_dim);
  s.label_hidden = j.value("label_hidden", d.label_hidden);
  s.critic_hidden = j.value("critic_hidden", d.critic_hidden);
  s.num_classes = j.value("num_classes", d.num_classes);
}

void ClassifierSpec::validate() const {
  if (feature_widths.size() < 2 || feature_widths.front() != 6)
    throw UsageError("classifier: feature_widths must start at 6 and have at least one layer");
  if (std::find(feature_widths.begin(), feature_widths.end(), 0u) != feature_widths.end())
    throw UsageError("classifier: feature widths must be positive");
  if (k == 0 || head_hidden == 0 || num_classes == 0) throw UsageError("classifier: dimensions must be positive");
}

void to_json(nlohmann::json& j, const ClassifierSpec& s) {
  j = nlohmann::json{{"feature_widths", s.feature_widths},
                     {"k", s.k},
                     {"head_hidden", s.head_hidden},
                     {"num_classes", s.num_classes}};
}

void from_json(const nlohmann::json& j, ClassifierSpec& s) {
  reject_unknown(j, {"feature_widths", "k", "head_hidden", "num_classes"}, "classifier spec");
  ClassifierSpec d;
  s.feature_widths = j.value("feature_widths", d.feature_widths);
  s.k = j.value("k", d.k);
  s.head_hidden = j.value("head_hidden", d.head_hidden);
  s.num_classes = j.value("num_classes", d.num_classes);
}

// ---- critic --------------------------------------------------------------------

Critic::Critic(CriticSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  add_edge_layers(params_, "D.", spec_.feature_widths, rng);
  add_dense(params_, "D.label", 0, spec_.num_classes, spec_.label_hidden, rng);
  add_dense(params_, "D.label", 1, spec_.label_hidden, spec_.label_embed_dim, rng);
  add_dense(params_, "D.head", 0, spec_.feature_widths.back() + spec_.label_embed_dim, spec_.critic_hidden[0], rng);
  add_dense(params_, "D.head", 1, spec_.critic_hidden[0], spec_.critic_hidden[1], rng);
  add_dense(params_, "D.head", 2, spec_.critic_hidden[1], 1, rng);
}

Tensor Critic::feature_transform(const Tensor& x, std::size_t stage) const {
  check_cloud_batch(x, 6, "feature_transform");
  Tensor h = edge_conv_stack(params_, "D.", spec_.feature_widths, x, spec_.k_for_stage(stage));
  return max(reshape(h, {x.size(0), x.size(1), spec_.feature_widths.back()}), 1);
}

Tensor Critic::label_transform(std::span<const int> labels) const {
  Tensor h = leaky_relu(dense(params_, "D.label", 0, one_hot(labels, spec_.num_classes)));
  return dense(params_, "D.label", 1, h);
}

Tensor Critic::criticize(const Tensor& x, std::span<const int> labels, std::size_t stage) const {
  check_cloud_batch(x, 6, "criticize");
  if (labels.size() != x.size(0))
    throw ShapeError("criticize: " + std::to_string(labels.size()) + " labels for " + std::to_string(x.size(0)) +
                     " clouds");
  Tensor h = concat({feature_transform(x, stage), label_transform(labels)}, 1);
  h = leaky_relu(dense(params_, "D.head", 0, h));
  h = leaky_relu(dense(params_, "D.head", 1, h));
  return reshape(dense(params_, "D.head", 2, h), {x.size(0)});
}

// ---- classifier ----------------------------------------------------------------

Classifier::Classifier(ClassifierSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  add_edge_layers(params_, "FDDX.", spec_.feature_widths, rng);
  add_dense(params_, "FDDX.head", 0, spec_.feature_widths.back(), spec_.head_hidden, rng);
  add_dense(params_, "FDDX.head", 1, spec_.head_hidden, spec_.num_classes, rng);
}

Tensor Classifier::extract_512(const Tensor& x) const {
  check_cloud_batch(x, 6, "extract_512");
  Tensor h = edge_conv_stack(params_, "FDDX.", spec_.feature_widths, x, spec_.k);
  return mean(reshape(h, {x.size(0), x.size(1), spec_.feature_widths.back()}), 1, false, true);
}

Tensor Classifier::logits(const Tensor& x) const {
  Tensor h = leaky_relu(dense(params_, "FDDX.head", 0, extract_512(x)));
  return dense(params_, "FDDX.head", 1, h);
}

Tensor Classifier::classify(const Tensor& x) const { return softmax(logits(x)); }

}  // namespace pcgan
