#pragma once

// Deep feature factorization baseline: collection-wide NMF of pretrained
// features into per-pixel part coefficients and a shared basis.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "scops/core.hpp"
#include "scops/features.hpp"
#include "scops/model.hpp"

namespace scops {

struct NmfOptions {
    int parts = 3;
    int max_iters = 500;
    double tol = 1e-6;     // stop when the relative residual improves by less than this fraction
    std::uint64_t seed = 0;
    /// Multiplicative updates of each factor per outer iteration. Every
    /// individual update is non-increasing, so any count keeps monotonicity.
    int inner_updates = 1;
};

struct NmfResult {
    Eigen::MatrixXd coefficients;  // M×K (H)
    Eigen::MatrixXd basis;         // K×C (W)
    std::vector<double> residual_history;  // |V - HW|_F^2 / |V|_F^2 after each iteration

    double residual() const { return residual_history.empty() ? 1.0 : residual_history.back(); }
};

/// Frobenius-objective multiplicative-update NMF of a non-negative M×C matrix.
/// Throws ConfigError if K > min(M, C) or the input is all zero / negative.
NmfResult nmf(const Eigen::MatrixXd& data, const NmfOptions& options);

struct DffOptions {
    NmfOptions nmf;
    bool use_saliency = true;
};

struct DffResult {
    std::vector<Tensor> responses;          // (K+1)×H×W, background channel zero
    std::vector<PartSegmentation> segmentations;
    NmfResult factorization;
};

/// Factorizes the stacked features of a whole collection (at least two
/// images, all at the first image's size). `saliency` may be empty or hold
/// one map per image.
DffResult dff_segment(const std::vector<ImageTensor>& images, const FeatureProvider& provider,
                      const std::vector<SaliencyMap>& saliency, const DffOptions& options);

} // namespace scops
