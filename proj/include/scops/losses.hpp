#pragma once

// Training objectives. Every loss returns its value together with analytic
// gradients for the tensors that receive updates during training.

#include <array>
#include <string>

#include "scops/core.hpp"

namespace scops {

struct LossWeights {
    double concentration = 0.1;
    double equivariance = 10.0;
    double semantic = 100.0;
    double orthonormal = 0.1;
    double eqv_segmentation = 10.0;  // inner weight on the KL term
    double eqv_center = 1.0;         // inner weight on the center term

    /// Throws ConfigError unless every weight is finite and non-negative.
    void validate() const;
};

/// K×C basis matrix, stored row-major. Entries are rectified before use.
struct PartBasis {
    int parts = 0;
    int channels = 0;
    std::vector<double> values;

    PartBasis() = default;
    PartBasis(int k, int c, double fill = 0.0)
        : parts(k), channels(c), values(static_cast<std::size_t>(k) * c, fill) {}

    double& at(int k, int c) { return values[static_cast<std::size_t>(k) * channels + c]; }
    double at(int k, int c) const { return values[static_cast<std::size_t>(k) * channels + c]; }
    double rectified(int k, int c) const { return std::max(at(k, c), 0.0); }
};

/// Value and dL/dR for a loss over one response map.
struct MapLoss {
    double value = 0.0;
    Tensor grad;
    int skipped_parts = 0;
};

/// Sum over foreground channels of the response-weighted spatial variance
/// around each part center. Channels with mass below 1e-8 contribute 0.
MapLoss concentration_loss(const Tensor& response, CoordinateMode mode = CoordinateMode::normalized);

struct EquivarianceLoss {
    double value = 0.0;
    double kl = 0.0;          // mean per-pixel KL over valid pixels
    double center = 0.0;      // summed squared center residual
    Tensor grad_original;     // dL/dR
    Tensor grad_transformed;  // dL/dR'
};

inline constexpr double kProbabilityFloor = 1e-8;

/// lambda_s * mean_valid KL(R'(p) || warp(R)(p)) + lambda_c * sum_k |c'_k - T(c_k)|^2.
/// Throws Error when the warp leaves no valid pixel.
EquivarianceLoss equivariance_loss(const Tensor& original, const Tensor& transformed, const SpatialTransform& transform,
                                   double lambda_segmentation, double lambda_center);
/// Variant reusing a precomputed warp plan for `transform`.
EquivarianceLoss equivariance_loss(const Tensor& original, const Tensor& transformed, const SpatialTransform& transform,
                                   const WarpPlan& plan, double lambda_segmentation, double lambda_center);

struct SemanticLoss {
    double value = 0.0;
    Tensor grad_response;           // dL/dR (background channel zero)
    std::vector<double> grad_basis; // dL/dW, same layout as PartBasis::values
};

/// Mean over pixels of |D(p) V(p) - sum_k R(k,p) max(w_k, 0)|^2.
/// `saliency` may be empty, meaning D == 1.
SemanticLoss semantic_consistency_loss(const Tensor& features, const Tensor& response, const PartBasis& basis,
                                       const Tensor& saliency);

struct OrthonormalLoss {
    double value = 0.0;
    std::vector<double> grad_basis;
    int excluded_rows = 0;
};

/// |W^ W^T - I|_F^2 over the unit-normalized rectified rows with non-zero
/// norm. Throws Error if every row is zero.
OrthonormalLoss orthonormal_loss(const PartBasis& basis);

struct LossComponents {
    double concentration = 0.0;
    double equivariance = 0.0;
    double semantic = 0.0;
    double orthonormal = 0.0;

    friend bool operator==(const LossComponents&, const LossComponents&) = default;
};

struct TotalLoss {
    double value = 0.0;
    LossComponents weighted;  // each component times its weight
};

inline constexpr std::array<const char*, 4> kLossTermNames{"concentration", "equivariance", "semantic", "orthonormal"};

/// Weighted sum. Throws LossError naming the first non-finite component.
TotalLoss total_loss(const LossComponents& components, const LossWeights& weights);

} // namespace scops
