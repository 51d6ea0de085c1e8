#include "pcgan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "pcgan/errors.hpp"
#include "pcgan/trainer.hpp"

namespace pcgan {

namespace {

double distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double squared_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

void check_matching_sizes(const Xyz& a, const Xyz& b, const char* what) {
  if (a.empty() || b.empty()) throw ShapeError(std::string(what) + ": empty point set");
  if (a.size() != b.size())
    throw ShapeError(std::string(what) + ": sets differ in size (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
}

Eigen::MatrixXd cost_matrix(const Xyz& a, const Xyz& b) {
  Eigen::MatrixXd c(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) c(i, j) = distance(a[i], b[j]);
  return c;
}

double matched_cost(const Eigen::MatrixXd& cost, const std::vector<std::size_t>& col) {
  double total = 0;
  for (std::size_t i = 0; i < col.size(); ++i) total += cost(i, col[i]);
  return total;
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
  for (const auto& [key, value] : j.items())
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end())
      throw UsageError(std::string(what) + ": unknown key '" + key + "'");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Xyz geometry(const PointCloud& cloud) {
  Xyz out(cloud.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = {cloud.points[6 * i], cloud.points[6 * i + 1], cloud.points[6 * i + 2]};
  return out;
}

// ---- point-set distances ---------------------------------------------------------

double chamfer(const Xyz& a, const Xyz& b) {
  if (a.empty() || b.empty()) throw ShapeError("chamfer: empty point set");
  auto one_way = [](const Xyz& from, const Xyz& to) {
    double total = 0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, squared_distance(p, q));
      total += best;
    }
    return total;
  };
  return one_way(a, b) + one_way(b, a);
}

std::vector<std::size_t> hungarian(const Eigen::MatrixXd& cost) {
  if (cost.rows() != cost.cols()) throw ShapeError("hungarian: cost matrix must be square");
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // Potentials u (rows), v (columns); p[j] is the row matched to column j,
  // all 1-based with index 0 as the virtual start column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n);
  for (std::size_t j = 1; j <= n; ++j) col[p[j] - 1] = j - 1;
  return col;
}

double emd_exact(const Xyz& a, const Xyz& b) {
  check_matching_sizes(a, b, "emd");
  const Eigen::MatrixXd cost = cost_matrix(a, b);
  return matched_cost(cost, hungarian(cost)) / static_cast<double>(a.size());
}

EmdResult emd_auction(const Xyz& a, const Xyz& b, double max_relative_gap) {
  check_matching_sizes(a, b, "emd");
  if (!(max_relative_gap > 0)) throw UsageError("emd: max_relative_gap must be positive");
  const std::size_t n = a.size();
  const Eigen::MatrixXd cost = cost_matrix(a, b);
  const double max_cost = cost.maxCoeff();
  EmdResult result{0, "auction", 0};
  if (max_cost == 0) return result;

  // Forward auction with epsilon scaling on benefits -cost. Prices carry over
  // between phases; after each phase the primal cost and the dual bound
  // sum(prices) + sum_i max_j(-cost_ij - p_j) certify the optimality gap.
  const double floor = 1e-12 * max_cost * static_cast<double>(n);
  std::vector<double> price(n, 0.0);
  std::vector<std::ptrdiff_t> owner(n), assigned(n);
  std::vector<std::size_t> unassigned;
  double eps = max_cost / 4;
  for (;;) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(assigned.begin(), assigned.end(), -1);
    unassigned.resize(n);
    for (std::size_t i = 0; i < n; ++i) unassigned[i] = n - 1 - i;
    while (!unassigned.empty()) {
      const std::size_t i = unassigned.back();
      unassigned.pop_back();
      double best = -std::numeric_limits<double>::infinity(), second = best;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double value = -cost(i, j) - price[j];
        if (value > best) {
          second = best;
          best = value;
          best_j = j;
        } else if (value > second) {
          second = value;
        }
      }
      if (n == 1) second = best;
      price[best_j] += best - second + eps;
      if (owner[best_j] >= 0) {
        assigned[owner[best_j]] = -1;
        unassigned.push_back(static_cast<std::size_t>(owner[best_j]));
      }
      owner[best_j] = static_cast<std::ptrdiff_t>(i);
      assigned[i] = static_cast<std::ptrdiff_t>(best_j);
    }
    double primal = 0;
    for (std::size_t i = 0; i < n; ++i) primal += cost(i, assigned[i]);
    double dual = std::accumulate(price.begin(), price.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) best = std::max(best, -cost(i, j) - price[j]);
      dual += best;
    }
    const double lower = -dual;
    const double gap = std::max(0.0, primal - lower);
    if (gap <= max_relative_gap * lower || gap <= floor || eps * static_cast<double>(n) <= floor) {
      result.value = primal / static_cast<double>(n);
      result.relative_gap = lower > 0 ? gap / lower : 0.0;
      return result;
    }
    eps /= 5;
  }
}

EmdResult emd(const Xyz& a, const Xyz& b, const EmdOptions& options) {
  check_matching_sizes(a, b, "emd");
  const bool exact = options.solver == EmdSolver::Exact ||
                     (options.solver == EmdSolver::Auto && a.size() <= options.exact_max);
  if (exact) return {emd_exact(a, b), "hungarian", 0.0};
  return emd_auction(a, b, options.max_relative_gap);
}

double emd_brute_force(const Xyz& a, const Xyz& b) {
  check_matching_sizes(a, b, "emd");
  if (a.size() > 9) throw UsageError("emd_brute_force: at most 9 points");
  const Eigen::MatrixXd cost = cost_matrix(a, b);
  std::vector<std::size_t> perm(a.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do best = std::min(best, matched_cost(cost, perm));
  while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(a.size());
}

// ---- set-level metrics -----------------------------------------------------------

std::vector<double> occupancy_distribution(const std::vector<Xyz>& clouds, const JsdOptions& options) {
  if (clouds.empty()) throw ShapeError("jsd: empty set of clouds");
  if (options.grid == 0) throw UsageError("jsd: grid must be positive");
  const std::size_t g = options.grid;
  std::vector<double> counts(g * g * g, 0.0);
  std::vector<char> seen;
  auto bin = [g](double x) {
    const double scaled = std::floor((x + 0.5) * static_cast<double>(g));
    return static_cast<std::size_t>(std::clamp(scaled, 0.0, static_cast<double>(g - 1)));
  };
  for (const auto& cloud : clouds) {
    if (cloud.empty()) throw ShapeError("jsd: empty cloud");
    seen.assign(counts.size(), 0);
    for (const auto& p : cloud) {
      const std::size_t cell = (bin(p[0]) * g + bin(p[1])) * g + bin(p[2]);
      if (options.per_cloud_occupancy) {
        if (!seen[cell]) counts[cell] += 1;
        seen[cell] = 1;
      } else {
        counts[cell] += 1;
      }
    }
  }
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  for (double& c : counts) c /= total;
  return counts;
}

double jsd(const std::vector<Xyz>& a, const std::vector<Xyz>& b, const JsdOptions& options) {
  const auto p = occupancy_distribution(a, options);
  const auto q = occupancy_distribution(b, options);
  double kl_p = 0, kl_q = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) kl_p += p[i] * std::log2(p[i] / m);
    if (q[i] > 0) kl_q += q[i] * std::log2(q[i] / m);
  }
  return std::clamp(0.5 * kl_p + 0.5 * kl_q, 0.0, 1.0);
}

MmdCov mmd_cov(const Eigen::MatrixXd& d) {
  if (d.rows() == 0 || d.cols() == 0) throw ShapeError("mmd_cov: empty set");
  MmdCov out;
  double total = 0;
  for (Eigen::Index r = 0; r < d.rows(); ++r) total += d.row(r).minCoeff();
  out.mmd = total / static_cast<double>(d.rows());
  std::vector<char> matched(d.rows(), 0);
  for (Eigen::Index g = 0; g < d.cols(); ++g) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < d.rows(); ++r)
      if (d(r, g) < d(best, g)) best = r;
    matched[best] = 1;
  }
  out.cov = static_cast<double>(std::count(matched.begin(), matched.end(), 1)) / static_cast<double>(d.rows());
  return out;
}

Eigen::MatrixXd pairwise_distances(const std::vector<Xyz>& reference, const std::vector<Xyz>& generated,
                                   SetDistance distance, const EmdOptions& emd_options, std::size_t threads) {
  if (reference.empty() || generated.empty()) throw ShapeError("pairwise distances: empty set");
  const std::size_t n = reference.front().size();
  for (const auto* set : {&reference, &generated})
    for (const auto& c : *set)
      if (c.size() != n) throw ShapeError("pairwise distances: clouds differ in resolution");
  const std::size_t rows = reference.size(), cols = generated.size(), cells = rows * cols;
  Eigen::MatrixXd out(rows, cols);
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, cells);
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](std::size_t t) {
    try {
      for (std::size_t cell = t; cell < cells; cell += threads) {
        const std::size_t r = cell / cols, g = cell % cols;
        out(r, g) = distance == SetDistance::Chamfer ? chamfer(reference[r], generated[g])
                                                     : emd(reference[r], generated[g], emd_options).value;
      }
    } catch (...) {
      errors[t] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

MmdCov mmd_cov(const std::vector<Xyz>& reference, const std::vector<Xyz>& generated, SetDistance distance,
               const EmdOptions& emd_options) {
  return mmd_cov(pairwise_distances(reference, generated, distance, emd_options));
}

// ---- Frechet dynamic distance ----------------------------------------------------

GaussianStats GaussianStats::from_features(const Eigen::MatrixXd& features) {
  const Eigen::Index n = features.rows(), d = features.cols();
  if (n < 2) throw ShapeError("gaussian stats: need at least 2 samples");
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index k = 0; k < d; ++k)
      if (features(a, k) != features(b, k)) return features(a, k) < features(b, k);
    return a < b;
  });
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = features.row(order[i]);

  GaussianStats s;
  s.count = static_cast<std::size_t>(n);
  s.mu = Eigen::VectorXd::Zero(d);
  for (Eigen::Index i = 0; i < n; ++i) s.mu += x.row(i).transpose();
  s.mu /= static_cast<double>(n);
  x.rowwise() -= s.mu.transpose();
  Eigen::MatrixXd sigma = (x.transpose() * x) / static_cast<double>(n - 1);
  s.sigma = 0.5 * (sigma + sigma.transpose());
  return s;
}

void GaussianStats::validate() const {
  const Eigen::Index d = mu.size();
  if (sigma.rows() != d || sigma.cols() != d) throw ShapeError("gaussian stats: covariance shape mismatch");
  if (!sigma.allFinite() || !mu.allFinite()) throw NumericError("gaussian stats: non-finite values");
  if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, sigma.cwiseAbs().maxCoeff()))
    throw NumericError("gaussian stats: covariance is not symmetric");
  const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sigma, Eigen::EigenvaluesOnly)
                             .eigenvalues()
                             .minCoeff();
  const double trace = sigma.trace();
  if (min_eig < -1e-8 * trace || (trace <= 0 && min_eig < 0)) {
    std::ostringstream msg;
    msg << "gaussian stats: covariance is not positive semidefinite (min eigenvalue " << min_eig << ", trace "
        << trace << ")";
    throw NumericError(msg.str());
  }
}

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  if (eig.info() != Eigen::Success) throw NumericError("sqrtm: eigendecomposition failed");
  const Eigen::VectorXd roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

double fdd(const GaussianStats& x, const GaussianStats& y, const FddOptions& options) {
  x.validate();
  y.validate();
  if (x.mu.size() != y.mu.size()) throw ShapeError("fdd: statistics differ in dimension");
  const double mean_sq = (x.mu - y.mu).squaredNorm();
  const double mean_term = options.squared_mean_norm ? mean_sq : std::sqrt(mean_sq);
  const Eigen::MatrixXd root_x = sqrtm_psd(x.sigma);
  const Eigen::MatrixXd product = root_x * y.sigma * root_x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (product + product.transpose()), Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericError("fdd: eigendecomposition failed");
  const double cross = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  // Rounding can leave the trace term a hair below zero for equal inputs.
  const double trace_term = std::max(0.0, x.sigma.trace() + y.sigma.trace() - 2.0 * cross);
  const double value = mean_term + trace_term;
  if (!std::isfinite(value)) throw NumericError("fdd: non-finite result");
  return value;
}

Eigen::MatrixXd extract_features(const Classifier& classifier, const std::vector<PointCloud>& clouds,
                                 std::size_t batch_size) {
  if (clouds.empty()) throw ShapeError("extract_features: no clouds");
  const std::size_t d = classifier.spec().feature_widths.back();
  Eigen::MatrixXd out(clouds.size(), d);
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < clouds.size(); start += batch_size) {
    const std::size_t end = std::min(clouds.size(), start + batch_size);
    std::vector<const PointCloud*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&clouds[i]);
    const Tensor f = classifier.extract_512(to_tensor(batch));
    const auto v = f.values();
    for (std::size_t i = start; i < end; ++i)
      for (std::size_t k = 0; k < d; ++k) out(i, k) = static_cast<double>(v[(i - start) * d + k]);
  }
  return out;
}

// ---- FDD extractor training --------------------------------------------------------

void to_json(nlohmann::json& j, const ExtractorConfig& c) {
  j = nlohmann::json{{"seed", c.seed},     {"resolution", c.resolution}, {"points", c.points},
                     {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"test_fraction", c.test_fraction}, {"target_accuracy", c.target_accuracy},
                     {"classifier", c.classifier}};
}

void from_json(const nlohmann::json& j, ExtractorConfig& c) {
  reject_unknown(j,
                 {"seed", "resolution", "points", "epochs", "batch_size", "lr", "test_fraction", "target_accuracy",
                  "classifier"},
                 "extractor config");
  ExtractorConfig d;
  c.seed = j.value("seed", d.seed);
  c.resolution = j.value("resolution", d.resolution);
  c.points = j.value("points", d.points);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.test_fraction = j.value("test_fraction", d.test_fraction);
  c.target_accuracy = j.value("target_accuracy", d.target_accuracy);
  c.classifier = j.contains("classifier") ? j.at("classifier").get<ClassifierSpec>() : d.classifier;
}

PointCloud subsample(const PointCloud& cloud, std::size_t n, std::uint64_t seed) {
  const std::size_t size = cloud.size();
  if (n >= size) return cloud;
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, size - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(6 * n);
  for (std::size_t i : idx)
    out.points.insert(out.points.end(), cloud.points.begin() + 6 * i, cloud.points.begin() + 6 * i + 6);
  return out;
}

std::vector<double> per_class_accuracy(const Classifier& classifier, const std::vector<PointCloud>& clouds,
                                       std::size_t num_classes) {
  std::vector<double> correct(num_classes, 0), total(num_classes, 0);
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < clouds.size(); start += 8) {
    const std::size_t end = std::min(clouds.size(), start + 8);
    std::vector<const PointCloud*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&clouds[i]);
    const Tensor logits = classifier.logits(to_tensor(batch));
    const auto v = logits.values();
    for (std::size_t i = start; i < end; ++i) {
      const auto row = v.subspan((i - start) * num_classes, num_classes);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      const int label = clouds[i].label;
      if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
        throw DataError("classifier accuracy: label out of range");
      total[label] += 1;
      if (pred == label) correct[label] += 1;
    }
  }
  std::vector<double> acc(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) acc[c] = total[c] > 0 ? correct[c] / total[c] : 0.0;
  return acc;
}

ExtractorResult train_fdd_extractor(const fs::path& dataset_dir, const ExtractorConfig& config,
                                    std::ostream* progress) {
  if (config.batch_size == 0 || config.epochs == 0) throw UsageError("extractor: batch_size and epochs must be positive");
  if (!(config.test_fraction > 0 && config.test_fraction < 1))
    throw UsageError("extractor: test_fraction must be in (0, 1)");
  if (!(config.lr > 0)) throw UsageError("extractor: lr must be positive");
  const DatasetManifest manifest = DatasetManifest::load(dataset_dir);
  const std::size_t num_classes = manifest.classes.size();
  const std::vector<PointCloud> clouds = load_clouds(dataset_dir, manifest, config.resolution);

  // Hold out the last test_fraction of each class.
  std::vector<PointCloud> train, test;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < clouds.size(); ++i)
      if (clouds[i].label == static_cast<int>(c)) members.push_back(i);
    if (members.size() < 2) throw DataError("extractor: class '" + manifest.classes[c] + "' needs at least 2 samples");
    const auto n_test = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(config.test_fraction * static_cast<double>(members.size()))), 1,
        members.size() - 1);
    for (std::size_t k = 0; k < members.size(); ++k) {
      const PointCloud& src = clouds[members[k]];
      if (k + n_test < members.size()) {
        train.push_back(src);
      } else {
        test.push_back(src);
      }
    }
  }

  ClassifierSpec spec = config.classifier;
  spec.num_classes = num_classes;
  ExtractorResult result{Classifier(spec, derive_seed(config.seed, {1})), {}, 0, false};
  Classifier& net = result.classifier;
  Adam opt({config.lr, 0.9, 0.999, 1e-8});
  Rng rng(derive_seed(config.seed, {2}));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<PointCloud> batch;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        const PointCloud& src = train[order[k]];
        batch.push_back(config.points ? subsample(src, config.points, rng()) : src);
        labels.push_back(src.label);
      }
      const Tensor log_p = log_softmax(net.logits(to_tensor(batch)));
      const Tensor loss = scale(sum(mul(one_hot(labels, num_classes), log_p)), -1.0 / static_cast<Real>(batch.size()));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) throw NumericError("extractor: non-finite loss");
      epoch_loss += value * static_cast<double>(batch.size());
      opt.step(net.parameters(), backward(loss));
    }
    result.epochs_run = epoch + 1;
    result.per_class_accuracy = per_class_accuracy(net, test, num_classes);
    const double worst = *std::min_element(result.per_class_accuracy.begin(), result.per_class_accuracy.end());
    if (progress)
      *progress << "epoch " << epoch << " loss " << epoch_loss / static_cast<double>(train.size())
                << " min class accuracy " << worst << "\n";
    if (worst >= config.target_accuracy) {
      result.reached_target = true;
      break;
    }
  }
  return result;
}

void save_classifier(const Classifier& c, const fs::path& ckpt) {
  save_checkpoint(ckpt, to_records(c.parameters()));
  write_json(sidecar_path(ckpt), {{"spec", c.spec()}});
}

Classifier load_classifier(const fs::path& ckpt) {
  const nlohmann::json side = read_json(sidecar_path(ckpt));
  Classifier c(side.at("spec").get<ClassifierSpec>(), 0);
  assign_from_records(c.parameters(), load_checkpoint(ckpt));
  return c;
}

// ---- evaluation ------------------------------------------------------------------

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"class", r.class_name}, {"resolution", r.resolution}, {"jsd", r.jsd},
                     {"mmd_cd", r.mmd_cd},     {"mmd_emd", r.mmd_emd},       {"cov_cd", r.cov_cd},
                     {"cov_emd", r.cov_emd},   {"fdd", r.fdd},               {"n_ref", r.n_ref},
                     {"n_gen", r.n_gen},       {"emd_solver", r.emd_solver}, {"jsd_grid", r.jsd_grid},
                     {"seed", r.seed}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.class_name = j.at("class").get<std::string>();
  r.resolution = j.at("resolution").get<std::size_t>();
  r.jsd = j.at("jsd").get<double>();
  r.mmd_cd = j.at("mmd_cd").get<double>();
  r.mmd_emd = j.at("mmd_emd").get<double>();
  r.cov_cd = j.at("cov_cd").get<double>();
  r.cov_emd = j.at("cov_emd").get<double>();
  r.fdd = j.at("fdd").get<double>();
  r.n_ref = j.at("n_ref").get<std::size_t>();
  r.n_gen = j.at("n_gen").get<std::size_t>();
  r.emd_solver = j.at("emd_solver").get<std::string>();
  r.jsd_grid = j.at("jsd_grid").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
}

std::string reports_to_csv(const std::vector<MetricReport>& reports) {
  std::ostringstream out;
  out << kMetricCsvHeader << "\n";
  for (const auto& r : reports)
    out << r.class_name << ',' << r.resolution << ',' << format_double(r.jsd) << ',' << format_double(r.mmd_cd) << ','
        << format_double(r.mmd_emd) << ',' << format_double(r.cov_cd) << ',' << format_double(r.cov_emd) << ','
        << format_double(r.fdd) << ',' << r.n_ref << ',' << r.n_gen << ',' << r.emd_solver << ',' << r.jsd_grid
        << ',' << r.seed << "\n";
  return out.str();
}

MetricReport evaluate_class(const std::string& class_name, const std::vector<PointCloud>& reference,
                            const std::vector<PointCloud>& generated, const Classifier& classifier,
                            const EvaluateConfig& config) {
  if (reference.size() < 2 || generated.size() < 2)
    throw DataError("evaluate: class '" + class_name + "' needs at least 2 reference and 2 generated clouds");
  const std::size_t resolution = reference.front().size();
  for (const auto* set : {&reference, &generated})
    for (const auto& c : *set)
      if (c.size() != resolution)
        throw DataError("evaluate: class '" + class_name + "' mixes resolutions (" + std::to_string(c.size()) +
                        " vs " + std::to_string(resolution) + ")");

  // Cloud i of either set is subsampled with the same seed, so a set
  // evaluated against itself compares identical subsets.
  auto subsets = [&](const std::vector<PointCloud>& clouds, std::size_t n, bool xyz_only) {
    std::vector<PointCloud> out;
    for (std::size_t i = 0; i < clouds.size(); ++i)
      out.push_back(n ? subsample(clouds[i], n, derive_seed(config.seed, {4, i, xyz_only})) : clouds[i]);
    return out;
  };
  std::vector<Xyz> ref_xyz, gen_xyz;
  for (const auto& c : subsets(reference, config.geometry_points, true)) ref_xyz.push_back(geometry(c));
  for (const auto& c : subsets(generated, config.geometry_points, true)) gen_xyz.push_back(geometry(c));

  MetricReport r;
  r.class_name = class_name;
  r.resolution = resolution;
  r.n_ref = reference.size();
  r.n_gen = generated.size();
  r.seed = config.seed;
  r.jsd_grid = config.jsd.grid;
  r.jsd = jsd(ref_xyz, gen_xyz, config.jsd);
  const MmdCov cd = mmd_cov(ref_xyz, gen_xyz, SetDistance::Chamfer);
  const MmdCov em = mmd_cov(ref_xyz, gen_xyz, SetDistance::Emd, config.emd);
  r.mmd_cd = cd.mmd;
  r.cov_cd = cd.cov;
  r.mmd_emd = em.mmd;
  r.cov_emd = em.cov;
  r.emd_solver = emd(ref_xyz.front(), ref_xyz.front(), config.emd).solver;

  const auto ref_stats = GaussianStats::from_features(
      extract_features(classifier, subsets(reference, config.fdd_points, false)));
  const auto gen_stats = GaussianStats::from_features(
      extract_features(classifier, subsets(generated, config.fdd_points, false)));
  r.fdd = fdd(ref_stats, gen_stats, config.fdd);
  return r;
}

std::vector<MetricReport> evaluate(const fs::path& dataset_dir, const std::optional<fs::path>& generator_ckpt,
                                   const std::optional<fs::path>& generated_dataset, const fs::path& classifier_ckpt,
                                   const EvaluateConfig& config) {
  if (generator_ckpt.has_value() == generated_dataset.has_value())
    throw UsageError("evaluate: give exactly one of a generator checkpoint or a generated dataset");
  const DatasetManifest manifest = DatasetManifest::load(dataset_dir);
  const Classifier classifier = load_classifier(classifier_ckpt);

  std::optional<Generator> generator;
  std::vector<std::string> generator_classes;
  std::optional<DatasetManifest> other;
  std::size_t resolution = 0;
  if (generator_ckpt) {
    generator.emplace(load_generator(*generator_ckpt, &generator_classes));
    if (generator_classes.empty()) generator_classes = manifest.classes;
    resolution = generator->resolution();
    if (std::find(manifest.resolutions.begin(), manifest.resolutions.end(), resolution) == manifest.resolutions.end())
      throw DataError("evaluate: dataset has no clouds at the generator resolution " + std::to_string(resolution));
  } else {
    other.emplace(DatasetManifest::load(*generated_dataset));
    for (std::size_t res : manifest.resolutions)
      if (std::find(other->resolutions.begin(), other->resolutions.end(), res) != other->resolutions.end())
        resolution = std::max(resolution, res);
    if (resolution == 0) throw DataError("evaluate: the two datasets share no resolution");
  }
  if (config.geometry_points > resolution)
    throw DataError("evaluate: geometry_points " + std::to_string(config.geometry_points) +
                    " exceeds the cloud resolution " + std::to_string(resolution));

  const std::vector<PointCloud> reference = load_clouds(dataset_dir, manifest, resolution);
  std::vector<PointCloud> generated_pool;
  if (other) generated_pool = load_clouds(*generated_dataset, *other, resolution);

  std::vector<MetricReport> reports;
  for (std::size_t c = 0; c < manifest.classes.size(); ++c) {
    const std::string& name = manifest.classes[c];
    std::vector<PointCloud> ref, gen;
    for (const auto& cloud : reference)
      if (cloud.label == static_cast<int>(c)) ref.push_back(cloud);
    if (generator) {
      const auto it = std::find(generator_classes.begin(), generator_classes.end(), name);
      if (it == generator_classes.end()) throw DataError("evaluate: generator does not know class '" + name + "'");
      const int label = static_cast<int>(it - generator_classes.begin());
      const std::size_t count = config.samples_per_class ? config.samples_per_class : ref.size();
      Rng rng(derive_seed(config.seed, {5, c}));
      NoGradGuard no_grad;
      while (gen.size() < count) {
        const std::size_t b = std::min<std::size_t>(8, count - gen.size());
        const std::vector<int> labels(b, label);
        const Tensor z = sample_latent(b, generator->spec().z_dim, rng);
        for (auto& cloud : from_tensor(generator->generate(z, labels), labels)) gen.push_back(std::move(cloud));
      }
    } else {
      const int label = other->class_id(name);
      for (const auto& cloud : generated_pool)
        if (cloud.label == label) gen.push_back(cloud);
      if (config.samples_per_class && gen.size() > config.samples_per_class) gen.resize(config.samples_per_class);
    }
    reports.push_back(evaluate_class(name, ref, gen, classifier, config));
  }
  return reports;
}

}  // namespace pcgan
