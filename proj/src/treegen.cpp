#include "pcgan/treegen.hpp"

#include <algorithm>

#include "pcgan/errors.hpp"

namespace pcgan {

// ---- GeneratorSpec ----------------------------------------------------------

std::size_t GeneratorSpec::resolution() const {
  std::size_t n = leaf_factor;
  for (std::size_t h : branch_depths) n *= h;
  return n;
}

void GeneratorSpec::validate() const {
  if (branch_depths.empty()) throw UsageError("generator: branch_depths must not be empty");
  if (std::find(branch_depths.begin(), branch_depths.end(), 0u) != branch_depths.end() || leaf_factor == 0)
    throw UsageError("generator: branching factors must be positive");
  if (feature_widths.size() != branch_depths.size() + 2)
    throw UsageError("generator: feature_widths needs " + std::to_string(branch_depths.size() + 2) +
                     " entries (input, one per branch, leaf), got " +
                     std::to_string(feature_widths.size()));
  if (feature_widths.back() != 6) throw UsageError("generator: last feature width must be 6 (xyz + rgb)");
  if (feature_widths.front() != z_dim + label_embed_dim)
    throw UsageError("generator: first feature width must equal z_dim + label_embed_dim");
  if (std::find(feature_widths.begin(), feature_widths.end(), 0u) != feature_widths.end())
    throw UsageError("generator: feature widths must be positive");
  if (support == 0) throw UsageError("generator: support must be positive");
  if (num_classes == 0 || label_hidden == 0 || z_dim == 0 || label_embed_dim == 0)
    throw UsageError("generator: dimensions must be positive");
}

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = nlohmann::json{{"z_dim", s.z_dim},
                     {"label_embed_dim", s.label_embed_dim},
                     {"label_hidden", s.label_hidden},
                     {"branch_depths", s.branch_depths},
                     {"leaf_factor", s.leaf_factor},
                     {"feature_widths", s.feature_widths},
                     {"support", s.support},
                     {"ancestor_window", s.ancestor_window},
                     {"num_classes", s.num_classes}};
}

void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  static const char* known[] = {"z_dim",          "label_embed_dim", "label_hidden",
                                "branch_depths",  "leaf_factor",     "feature_widths",
                                "support",        "ancestor_window", "num_classes"};
  for (const auto& [key, value] : j.items())
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      throw UsageError("generator spec: unknown key '" + key + "'");
  GeneratorSpec d;
  s.z_dim = j.value("z_dim", d.z_dim);
  s.label_embed_dim = j.value("label_embed_dim", d.label_embed_dim);
  s.label_hidden = j.value("label_hidden", d.label_hidden);
  s.branch_depths = j.value("branch_depths", d.branch_depths);
  s.leaf_factor = j.value("leaf_factor", d.leaf_factor);
  s.feature_widths = j.value("feature_widths", d.feature_widths);
  s.support = j.value("support", d.support);
  s.ancestor_window = j.value("ancestor_window", d.ancestor_window);
  s.num_classes = j.value("num_classes", d.num_classes);
}

// ---- StageSchedule ----------------------------------------------------------

StageSchedule StageSchedule::doubling(const GeneratorSpec& spec, std::size_t num_stages,
                                      std::size_t iterations_per_stage) {
  StageSchedule schedule;
  std::size_t resolution = spec.resolution();
  for (std::size_t s = 0; s < num_stages; ++s, resolution *= 2)
    schedule.stages.push_back({resolution, iterations_per_stage});
  return schedule;
}

void StageSchedule::validate(const GeneratorSpec& initial) const {
  if (stages.empty()) throw UsageError("schedule: at least one stage is required");
  if (stages.front().resolution != initial.resolution())
    throw UsageError("schedule: first stage resolution " + std::to_string(stages.front().resolution) +
                     " does not match the generator base resolution " +
                     std::to_string(initial.resolution()));
  for (std::size_t s = 1; s < stages.size(); ++s)
    if (stages[s].resolution != 2 * stages[s - 1].resolution)
      throw UsageError("schedule: stage resolutions must double (stage " + std::to_string(s) + ")");
}

// ---- TreeState ----------------------------------------------------------------

TreeState::TreeState(Tensor root) {
  if (root.rank() != 2) throw ShapeError("tree: root must be [batch, width], got " + shape_string(root.shape()));
  batch_ = root.size(0);
  layers_.push_back(std::move(root));
  nodes_.push_back(1);
}

std::size_t TreeState::nodes(std::size_t layer) const {
  if (layer >= nodes_.size()) throw ShapeError("tree: layer " + std::to_string(layer) + " not computed");
  return nodes_[layer];
}

std::size_t TreeState::width(std::size_t layer) const { return features(layer).size(1); }

const Tensor& TreeState::features(std::size_t layer) const {
  if (layer >= layers_.size()) throw ShapeError("tree: layer " + std::to_string(layer) + " not computed");
  if (logging_) reads_.push_back(layer);
  return layers_[layer];
}

IndexList TreeState::ancestor_rows(std::size_t layer, std::size_t ancestor_layer) const {
  if (layer >= nodes_.size() || ancestor_layer > layer)
    throw ShapeError("tree: malformed ancestor request " + std::to_string(ancestor_layer) + " of " +
                     std::to_string(layer));
  const std::size_t n = nodes_[layer];
  const std::size_t na = nodes_[ancestor_layer];
  if (na == 0 || n % na != 0) throw ShapeError("tree: malformed ancestor map");
  const std::size_t span = n / na;
  auto rows = std::make_shared<std::vector<Index>>(batch_ * n);
  for (std::size_t b = 0; b < batch_; ++b)
    for (std::size_t t = 0; t < n; ++t) (*rows)[b * n + t] = static_cast<Index>(b * na + t / span);
  return rows;
}

void TreeState::push(Tensor features, std::size_t branch_factor) {
  const std::size_t n = nodes_.back() * branch_factor;
  if (features.rank() != 2 || features.size(0) != batch_ * n)
    throw ShapeError("tree: layer of shape " + shape_string(features.shape()) + " does not hold " +
                     std::to_string(batch_) + "x" + std::to_string(n) + " nodes");
  layers_.push_back(std::move(features));
  nodes_.push_back(n);
}

// ---- Generator ---------------------------------------------------------------

namespace {

std::string branch_prefix(std::size_t layer) { return "G.branch" + std::to_string(layer) + "."; }
constexpr const char* kLeafPrefix = "G.leaf.";

}  // namespace

Generator::Generator(GeneratorSpec spec, std::uint64_t seed, std::size_t stage)
    : spec_(std::move(spec)), stage_(stage) {
  spec_.validate();
  Rng rng(seed);
  params_.add("G.label.W0", xavier_uniform(spec_.num_classes, spec_.label_hidden, rng));
  params_.add("G.label.b0", Tensor::zeros({spec_.label_hidden}));
  params_.add("G.label.W1", xavier_uniform(spec_.label_hidden, spec_.label_embed_dim, rng));
  params_.add("G.label.b1", Tensor::zeros({spec_.label_embed_dim}));
  for (std::size_t layer = 1; layer <= spec_.num_branches() + 1; ++layer) add_layer_parameters(layer, rng);
}

std::string Generator::layer_prefix(std::size_t layer) const {
  return layer <= spec_.num_branches() ? branch_prefix(layer) : kLeafPrefix;
}

std::size_t Generator::ancestor_slots(std::size_t layer) const {
  return spec_.ancestor_window == 0 ? layer : std::min(spec_.ancestor_window, layer);
}

void Generator::add_layer_parameters(std::size_t layer, Rng& rng) {
  const std::string prefix = layer_prefix(layer);
  const std::size_t in = spec_.feature_widths[layer - 1];
  const std::size_t out = spec_.feature_widths[layer];
  const std::size_t factor =
      layer <= spec_.num_branches() ? spec_.branch_depths[layer - 1] : spec_.leaf_factor;
  for (std::size_t c = 0; c < factor; ++c)
    params_.add(prefix + "B" + std::to_string(c), xavier_uniform(in, in, rng));
  for (std::size_t j = 1; j <= spec_.support; ++j) {
    params_.add(prefix + "S" + std::to_string(j), xavier_uniform(in, out, rng));
    params_.add(prefix + "r" + std::to_string(j), Tensor::zeros({out}));
  }
  for (std::size_t j = 1; j <= ancestor_slots(layer); ++j)
    params_.add(prefix + "W" + std::to_string(j),
                xavier_uniform(spec_.feature_widths[layer - j], out, rng));
  params_.add(prefix + "b", Tensor::zeros({out}));
}

Tensor Generator::label_transform(std::span<const int> labels) const {
  const std::size_t n = spec_.num_classes;
  std::vector<Real> onehot(labels.size() * n, Real(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n)
      throw UsageError("label_transform: class " + std::to_string(labels[i]) + " outside [0," +
                       std::to_string(n) + ")");
    onehot[i * n + static_cast<std::size_t>(labels[i])] = 1;
  }
  Tensor x({labels.size(), n}, std::move(onehot));
  Tensor h = leaky_relu(add(matmul(x, params_.at("G.label.W0")), params_.at("G.label.b0")));
  return add(matmul(h, params_.at("G.label.W1")), params_.at("G.label.b1"));
}

Tensor Generator::make_point_vector(const Tensor& z_in, const Tensor& g_c) {
  if (z_in.rank() != g_c.rank() || z_in.rank() < 1 || z_in.rank() > 2 ||
      (z_in.rank() == 2 && z_in.size(0) != g_c.size(0)))
    throw ShapeError("make_point_vector: incompatible shapes " + shape_string(z_in.shape()) + " and " +
                     shape_string(g_c.shape()));
  return concat({z_in, g_c}, z_in.rank() - 1);
}

Tensor Generator::tree_layer(const TreeState& state, std::size_t layer, bool activate) const {
  if (state.depth() != layer)
    throw ShapeError("tree_gcn_layer: state holds " + std::to_string(state.depth()) +
                     " layers, cannot compute layer " + std::to_string(layer));
  const std::string prefix = layer_prefix(layer);
  const std::size_t in = spec_.feature_widths[layer - 1];
  const std::size_t factor =
      layer <= spec_.num_branches() ? spec_.branch_depths[layer - 1] : spec_.leaf_factor;

  const Tensor& parent = state.features(layer - 1);
  if (parent.size(1) != in)
    throw ShapeError("tree_gcn_layer: layer " + std::to_string(layer) + " expects width " +
                     std::to_string(in) + ", got " + std::to_string(parent.size(1)));

  // Branching: child c of a node is B_c applied to the node's features.
  std::vector<Tensor> child_maps;
  for (std::size_t c = 0; c < factor; ++c) child_maps.push_back(params_.at(prefix + "B" + std::to_string(c)));
  Tensor children = reshape(matmul(parent, concat(child_maps, 1)), {parent.size(0) * factor, in});

  // F_m(p) = sum_j S_j p + r_j
  Tensor s_total = params_.at(prefix + "S1");
  Tensor r_total = params_.at(prefix + "r1");
  for (std::size_t j = 2; j <= spec_.support; ++j) {
    s_total = add(s_total, params_.at(prefix + "S" + std::to_string(j)));
    r_total = add(r_total, params_.at(prefix + "r" + std::to_string(j)));
  }
  Tensor y = add(matmul(children, s_total), r_total);

  // Ancestor term over the nearest ancestor layers of the new nodes.
  const std::size_t n_children = state.nodes(layer - 1) * factor;
  for (std::size_t j = 1; j <= ancestor_slots(layer); ++j) {
    const std::size_t a = layer - j;
    Tensor projected = matmul(state.features(a), params_.at(prefix + "W" + std::to_string(j)));
    const std::size_t span = n_children / state.nodes(a);
    auto rows = std::make_shared<std::vector<Index>>(state.batch() * n_children);
    for (std::size_t b = 0; b < state.batch(); ++b)
      for (std::size_t t = 0; t < n_children; ++t)
        (*rows)[b * n_children + t] = static_cast<Index>(b * state.nodes(a) + t / span);
    y = add(y, gather_rows(projected, rows));
  }
  y = add(y, params_.at(prefix + "b"));
  return activate ? leaky_relu(y) : y;
}

TreeState Generator::tree_gcn_layer(TreeState state, std::size_t layer) const {
  if (layer == 0 || layer > spec_.num_branches())
    throw ShapeError("tree_gcn_layer: branch layer " + std::to_string(layer) + " out of range");
  Tensor next = tree_layer(state, layer, true);
  state.push(std::move(next), spec_.branch_depths[layer - 1]);
  return state;
}

Tensor Generator::leaf_layer(const TreeState& state) const {
  const std::size_t layer = spec_.num_branches() + 1;
  Tensor raw = tree_layer(state, layer, false);
  // Positions stay linear; colors are squashed into [-0.5, 0.5].
  Tensor xyz = narrow(raw, 1, 0, 3);
  Tensor rgb = scale(tanh(narrow(raw, 1, 3, 3)), Real(0.5));
  Tensor points = concat({xyz, rgb}, 1);
  return reshape(points, {state.batch(), state.nodes(layer - 1) * spec_.leaf_factor, 6});
}

Tensor Generator::generate(const Tensor& z_in, std::span<const int> labels) const {
  if (z_in.rank() != 2 || z_in.size(1) != spec_.z_dim || z_in.size(0) != labels.size())
    throw ShapeError("generate: z_in of shape " + shape_string(z_in.shape()) + " needs [" +
                     std::to_string(labels.size()) + "," + std::to_string(spec_.z_dim) + "]");
  TreeState state(make_point_vector(z_in, label_transform(labels)));
  for (std::size_t layer = 1; layer <= spec_.num_branches(); ++layer)
    state = tree_gcn_layer(std::move(state), layer);
  return leaf_layer(state);
}

void Generator::grow(const StageSchedule& schedule, Rng& rng) {
  if (stage_ + 1 >= schedule.stages.size())
    throw UsageError("grow: generator is already at the final stage (" + std::to_string(stage_) + ")");
  const std::size_t last = spec_.num_branches();
  const std::size_t width = spec_.feature_widths[last];
  if (spec_.branch_depths[last - 1] != 2 || spec_.feature_widths[last - 1] != width)
    throw UsageError("grow: the last branch must be a factor-2 branch mapping " + std::to_string(width) +
                     "->" + std::to_string(width) + " to be replicated");

  const std::size_t old_leaf_slots = ancestor_slots(last + 1);
  const std::size_t source_slots = ancestor_slots(last);
  spec_.branch_depths.push_back(2);
  spec_.feature_widths.insert(spec_.feature_widths.end() - 1, width);

  // New branch: a copy of the last branch. An ancestor matrix is copied only
  // when the ancestor it now reads has the same width.
  const std::string src = branch_prefix(last);
  const std::string dst = branch_prefix(last + 1);
  for (const auto& p : std::vector<Parameter>(params_.items())) {
    if (p.name.rfind(src, 0) != 0) continue;
    const std::string local = p.name.substr(src.size());
    if (local[0] == 'W') continue;
    params_.add(dst + local, p.tensor);
  }
  for (std::size_t j = 1; j <= ancestor_slots(last + 1); ++j) {
    const std::size_t fan_in = spec_.feature_widths[last + 1 - j];
    const std::string name = src + "W" + std::to_string(j);
    if (j <= source_slots && params_.at(name).shape() == Shape{fan_in, width})
      params_.add(dst + "W" + std::to_string(j), params_.at(name));
    else
      params_.add(dst + "W" + std::to_string(j), xavier_uniform(fan_in, width, rng));
  }

  // Leaf: keep every ancestor matrix whose input width is unchanged.
  const std::size_t leaf = last + 2;
  for (std::size_t j = 1; j <= ancestor_slots(leaf); ++j) {
    const std::size_t fan_in = spec_.feature_widths[leaf - j];
    const std::string name = std::string(kLeafPrefix) + "W" + std::to_string(j);
    const Shape want{fan_in, spec_.feature_widths[leaf]};
    if (j <= old_leaf_slots) {
      if (params_.at(name).shape() != want) params_.replace(name, xavier_uniform(want[0], want[1], rng));
    } else {
      params_.add(name, xavier_uniform(want[0], want[1], rng));
    }
  }
  ++stage_;
}

}  // namespace pcgan
