#pragma once

// Quantitative protocols: landmark regression from part centers, aggregated
// foreground IoU, and part/object assignment purity.

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "scops/core.hpp"

namespace scops {

struct InterOcular {
    int left_eye = 0;
    int right_eye = 1;
};

/// Ground-truth box extent in normalized units.
struct BoundingBoxNorm {
    double height = 1.0;
    double width = 1.0;
    bool diagonal = false;  // divide by the box diagonal instead of per-axis
};

using NormalizationSpec = std::variant<InterOcular, BoundingBoxNorm>;

struct LandmarkAnnotation {
    std::vector<Point> points;
    NormalizationSpec normalization = InterOcular{};
};

/// Affine map from stacked centers (u1, v1, ..., uK, vK) to stacked landmarks.
struct RegressorFit {
    Eigen::MatrixXd coefficients;  // (2K+1)×2L, last row is the bias (or 2K×2L without bias)
    double ridge = 1e-6;
    bool bias = true;

    Eigen::MatrixXd predict(const Eigen::MatrixXd& centers) const;
};

/// Closed-form ridge least squares. `centers` is N×2K, `landmarks` N×2L.
/// Requires N > 2K+1; throws Error on a rank-deficient design with ridge 0.
RegressorFit fit_landmark_regressor(const Eigen::MatrixXd& centers, const Eigen::MatrixXd& landmarks,
                                    double ridge = 1e-6, bool bias = true);

/// Mean L2 landmark error as a percentage of the normalizer.
double landmark_error(std::span<const Point> predicted, std::span<const Point> truth, const NormalizationSpec& spec);

/// IoU of {label > 0} against a binary mask (row-major, non-zero = foreground).
/// Two empty masks give 1.
double foreground_iou(const PartSegmentation& segmentation, const std::vector<unsigned char>& mask);
double mask_iou(const std::vector<unsigned char>& a, const std::vector<unsigned char>& b);

/// Majority-vote purity of predicted parts against ground-truth object parts.
/// Each predicted part k>0 is mapped to the gt part (label>0) it overlaps most
/// across the whole set; purity is the fraction of pixels labelled foreground
/// in both maps that land on their mapped gt part. Spill onto gt background is
/// left to the IoU metric.
struct PurityResult {
    double purity = 0.0;
    std::vector<int> mapping;  // predicted part -> gt part (index 0 unused)
    long part_pixels = 0;
};
PurityResult assignment_purity(const std::vector<PartSegmentation>& predicted,
                               const std::vector<std::vector<int>>& truth_labels, int truth_parts);

struct MetricRow {
    std::string split;
    std::string method;
    int parts = 0;
    std::string metric;
    double value = 0.0;
    int n_images = 0;
    int n_excluded = 0;
};

inline constexpr char kMetricsHeader[] = "split,method,K,metric,value,n_images,n_excluded";

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

} // namespace scops
