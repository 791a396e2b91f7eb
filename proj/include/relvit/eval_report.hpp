#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace relvit {

/// Average precision of one class: mean over positives of the precision at
/// that positive's score threshold. Tied scores are grouped, which makes the
/// value independent of the order of tied items.
/// Returns nullopt when the class has no positive.
std::optional<double> average_precision(std::span<const double> scores, std::span<const bool> positives);

struct MeanApResult {
    double map = 0.0;
    std::vector<int> included;
    /// Classes of the subset skipped for having no positives.
    std::vector<int> excluded;
};

/// Mean of per-class APs over `subset` (all classes when empty).
MeanApResult mean_ap(std::span<const std::optional<double>> per_class_ap, std::span<const int> subset = {});

/// Per-class APs for an (items x classes) score matrix against 0/1 labels.
std::vector<std::optional<double>> per_class_ap(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels);

/// Fraction of rows whose argmax matches the answer index.
double accuracy(const Eigen::MatrixXd& scores, std::span<const int> answers);

struct ClusterReport {
    double silhouette = 0.0;
    /// Samples that entered the score (label has >= 2 members).
    int samples = 0;
    int clusters = 0;
    /// Top-2 principal-component coordinates, one row per input sample.
    Eigen::MatrixXd projection;
};

/// Mean silhouette under cosine distance plus a deterministic 2-D PCA projection.
ClusterReport cluster_separation(const Eigen::MatrixXd& features, std::span<const int> labels);

struct TokenMatch {
    int index_a = 0;
    int index_b = 0;
    double similarity = 0.0;
    int row_a = 0;
    int col_a = 0;
    int row_b = 0;
    int col_b = 0;
};

/// Best cosine match in B for every token of A, sorted by similarity
/// (descending, ties by index in A), truncated to top_k.
std::vector<TokenMatch> correspondence(const Eigen::MatrixXd& tokens_a, const Eigen::MatrixXd& tokens_b, int grid_cols,
                                       std::size_t top_k);

/// Machine-readable metrics document (metrics.json).
struct Metrics {
    std::map<std::string, double> scalars;
    std::map<std::string, std::map<std::string, double>> sections;

    bool operator==(const Metrics&) const = default;
};

inline constexpr int kReportSchemaVersion = 1;

struct ReportPaths {
    std::filesystem::path metrics;
    std::optional<std::filesystem::path> features;
    std::optional<std::filesystem::path> correspondence;
};

struct FeatureDump {
    Eigen::MatrixXd features;
    std::vector<std::string> labels;
};

/// Writes the metrics document and, when given, the feature/label dump and
/// the correspondence pair list (tab-separated, '#' header lines).
void emit_report(const Metrics& metrics, const ReportPaths& paths, const FeatureDump* features = nullptr,
                 const std::vector<TokenMatch>* matches = nullptr);

Metrics read_metrics(const std::filesystem::path& path);

} // namespace relvit
