#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "pcgan/data.hpp"
#include "pcgan/dgcnn.hpp"
#include "pcgan/treegen.hpp"

namespace pcgan {

/// Geometry-only view of a cloud: one xyz triple per point.
using Xyz = std::vector<std::array<double, 3>>;

/// First three channels of every point.
Xyz geometry(const PointCloud& cloud);

// ---- point-set distances ---------------------------------------------------------

/// Sum of squared nearest-neighbour distances in both directions.
double chamfer(const Xyz& a, const Xyz& b);

enum class EmdSolver { Auto, Exact, Auction };

struct EmdOptions {
  EmdSolver solver = EmdSolver::Auto;
  /// Auto uses the exact solver up to this size, the auction solver above.
  std::size_t exact_max = 1024;
  /// Auction stops once (primal - dual) <= max_relative_gap * dual.
  double max_relative_gap = 0.01;
};

struct EmdResult {
  double value = 0;       // (1/N) * total matched Euclidean length
  std::string solver;     // "hungarian" or "auction"
  double relative_gap = 0;  // certified bound on (value - optimum) / optimum
};

/// Minimum-cost perfect matching between equal-size sets, normalized by N.
EmdResult emd(const Xyz& a, const Xyz& b, const EmdOptions& options = {});
double emd_exact(const Xyz& a, const Xyz& b);
EmdResult emd_auction(const Xyz& a, const Xyz& b, double max_relative_gap = 0.01);
/// Exhaustive minimum over all N! bijections (N <= 9).
double emd_brute_force(const Xyz& a, const Xyz& b);

/// Minimum-cost assignment of a square cost matrix; returns col[row].
std::vector<std::size_t> hungarian(const Eigen::MatrixXd& cost);

// ---- set-level metrics -----------------------------------------------------------

struct JsdOptions {
  std::size_t grid = 28;
  /// Each cloud adds one count per occupied voxel; otherwise every point counts.
  bool per_cloud_occupancy = true;
};

/// Jensen-Shannon divergence (base 2) between voxel histograms over [-0.5, 0.5]^3.
double jsd(const std::vector<Xyz>& a, const std::vector<Xyz>& b, const JsdOptions& options = {});
/// Normalized histogram of a set, grid^3 entries in x-major order.
std::vector<double> occupancy_distribution(const std::vector<Xyz>& clouds, const JsdOptions& options = {});

struct MmdCov {
  double mmd = 0;
  double cov = 0;
};

/// From a [reference, generated] distance matrix: MMD is the mean over
/// reference rows of the row minimum; COV is the fraction of reference rows
/// that are the (lowest-index) nearest reference of some generated column.
MmdCov mmd_cov(const Eigen::MatrixXd& distances);

enum class SetDistance { Chamfer, Emd };

/// All pairwise distances, computed in parallel over independent pairs.
Eigen::MatrixXd pairwise_distances(const std::vector<Xyz>& reference, const std::vector<Xyz>& generated,
                                   SetDistance distance, const EmdOptions& emd_options = {},
                                   std::size_t threads = 0);

MmdCov mmd_cov(const std::vector<Xyz>& reference, const std::vector<Xyz>& generated, SetDistance distance,
               const EmdOptions& emd_options = {});

// ---- Frechet dynamic distance ----------------------------------------------------

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::size_t count = 0;

  /// Two-pass mean and unbiased covariance of the rows of `features`. Rows
  /// are put in lexicographic order first, so their order cannot change the
  /// result.
  static GaussianStats from_features(const Eigen::MatrixXd& features);
  /// NumericError unless sigma is symmetric and its minimum eigenvalue is
  /// at least -1e-8 * trace.
  void validate() const;
};

struct FddOptions {
  /// Use ||mu - mu'||^2 (FID convention) instead of ||mu - mu'||.
  bool squared_mean_norm = false;
};

/// ||mu_x - mu_y|| + tr(S_x + S_y - 2 (S_x S_y)^(1/2)), with the trace of the
/// product root taken as tr sqrtm(sqrt(S_x) S_y sqrt(S_x)).
double fdd(const GaussianStats& x, const GaussianStats& y, const FddOptions& options = {});

/// Symmetric positive semidefinite square root; eigenvalues clamped at 0.
Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m);

/// Pooled classifier features, one row per cloud.
Eigen::MatrixXd extract_features(const Classifier& classifier, const std::vector<PointCloud>& clouds,
                                 std::size_t batch_size = 8);

// ---- FDD extractor training --------------------------------------------------------

struct ExtractorConfig {
  std::uint64_t seed = 0;
  /// Points per cloud seen by the classifier (dataset resolution).
  std::size_t resolution = 1024;
  /// Random subset size per training cloud and step; 0 uses every point.
  /// Held-out accuracy is always measured on the full clouds.
  std::size_t points = 0;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double test_fraction = 0.25;
  double target_accuracy = 0.98;
  ClassifierSpec classifier;
};

void to_json(nlohmann::json& j, const ExtractorConfig& c);
void from_json(const nlohmann::json& j, ExtractorConfig& c);

struct ExtractorResult {
  Classifier classifier;
  std::vector<double> per_class_accuracy;  // on the held-out split
  std::size_t epochs_run = 0;
  bool reached_target = false;
};

/// Trains the classifier with cross-entropy until every class reaches the
/// target held-out accuracy or the epoch budget runs out. The split holds
/// out the last test_fraction of each class's samples.
ExtractorResult train_fdd_extractor(const std::filesystem::path& dataset_dir, const ExtractorConfig& config,
                                    std::ostream* progress = nullptr);

/// Fraction of correctly classified clouds per class.
std::vector<double> per_class_accuracy(const Classifier& classifier, const std::vector<PointCloud>& clouds,
                                       std::size_t num_classes);

void save_classifier(const Classifier& c, const std::filesystem::path& ckpt);
Classifier load_classifier(const std::filesystem::path& ckpt);

// ---- evaluation ------------------------------------------------------------------

struct EvaluateConfig {
  std::uint64_t seed = 0;
  /// Points per cloud for the geometry metrics (random subset without replacement).
  std::size_t geometry_points = 2048;
  /// Generated clouds per class; 0 means as many as reference clouds.
  std::size_t samples_per_class = 0;
  /// Points per cloud for FDD features; 0 uses the full clouds.
  std::size_t fdd_points = 0;
  EmdOptions emd;
  JsdOptions jsd;
  FddOptions fdd;
};

struct MetricReport {
  std::string class_name;
  std::size_t resolution = 0;
  double jsd = 0;
  double mmd_cd = 0;
  double mmd_emd = 0;
  double cov_cd = 0;
  double cov_emd = 0;
  double fdd = 0;
  std::size_t n_ref = 0;
  std::size_t n_gen = 0;
  std::string emd_solver;
  std::size_t jsd_grid = 0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

inline constexpr const char* kMetricCsvHeader =
    "class,resolution,jsd,mmd_cd,mmd_emd,cov_cd,cov_emd,fdd,n_ref,n_gen,emd_solver,jsd_grid,seed";
std::string reports_to_csv(const std::vector<MetricReport>& reports);

/// Metrics for one class: geometry metrics on `geometry_points`-point
/// subsets, FDD on all six channels (full clouds unless fdd_points is set).
MetricReport evaluate_class(const std::string& class_name, const std::vector<PointCloud>& reference,
                            const std::vector<PointCloud>& generated, const Classifier& classifier,
                            const EvaluateConfig& config);

/// Reference clouds are the dataset's samples at the generator's resolution.
/// Exactly one of `generator_ckpt` / `generated_dataset` supplies the
/// generated side; a dataset evaluated against itself gives the fixed point.
std::vector<MetricReport> evaluate(const std::filesystem::path& dataset_dir,
                                   const std::optional<std::filesystem::path>& generator_ckpt,
                                   const std::optional<std::filesystem::path>& generated_dataset,
                                   const std::filesystem::path& classifier_ckpt, const EvaluateConfig& config);

/// Random subset of `n` points (without replacement, in original order).
PointCloud subsample(const PointCloud& cloud, std::size_t n, std::uint64_t seed);

}  // namespace pcgan
