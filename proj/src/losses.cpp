#include "scops/losses.hpp"

#include <algorithm>
#include <cmath>

namespace scops {

void LossWeights::validate() const {
    const double all[] = {concentration, equivariance, semantic, orthonormal, eqv_segmentation, eqv_center};
    for (double w : all) {
        if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and non-negative");
    }
}

// ---------------------------------------------------------------------------

MapLoss concentration_loss(const Tensor& response, CoordinateMode mode) {
    const int h = response.height(), w = response.width();
    MapLoss out;
    out.grad = Tensor(response.channels(), h, w);
    for (int k = 1; k < response.channels(); ++k) {
        const auto plane = response.channel(k);
        const PartCenter c = part_center(plane, h, w, mode);
        if (c.empty) {
            ++out.skipped_parts;
            continue;
        }
        double spread = 0.0;
        for (int y = 0; y < h; ++y) {
            const double du = grid_coordinate(y, h, mode) - c.center.u;
            for (int x = 0; x < w; ++x) {
                const double dv = grid_coordinate(x, w, mode) - c.center.v;
                spread += (du * du + dv * dv) * plane[static_cast<std::size_t>(y) * w + x];
            }
        }
        const double loss_k = spread / c.mass;
        out.value += loss_k;
        // The derivative through the center vanishes (first moment about the
        // mean is zero), leaving (|x - c|^2 - L_k) / z.
        auto g = out.grad.channel(k);
        for (int y = 0; y < h; ++y) {
            const double du = grid_coordinate(y, h, mode) - c.center.u;
            for (int x = 0; x < w; ++x) {
                const double dv = grid_coordinate(x, w, mode) - c.center.v;
                g[static_cast<std::size_t>(y) * w + x] = (du * du + dv * dv - loss_k) / c.mass;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

EquivarianceLoss equivariance_loss(const Tensor& original, const Tensor& transformed, const SpatialTransform& transform,
                                   double lambda_segmentation, double lambda_center) {
    const WarpPlan plan(transform, original.height(), original.width());
    return equivariance_loss(original, transformed, transform, plan, lambda_segmentation, lambda_center);
}

EquivarianceLoss equivariance_loss(const Tensor& original, const Tensor& transformed, const SpatialTransform& transform,
                                   const WarpPlan& plan, double lambda_segmentation, double lambda_center) {
    if (!original.same_shape(transformed)) throw DimensionError("equivariance loss needs maps of equal shape");
    if (plan.height() != original.height() || plan.width() != original.width()) {
        throw DimensionError("warp plan does not match map size");
    }
    const int channels = original.channels(), h = original.height(), w = original.width(), n = h * w;
    const int valid = plan.valid_count();
    if (valid == 0) throw Error("equivariance loss: no valid pixels after warping (transform too extreme for image size)");

    EquivarianceLoss out;
    out.grad_original = Tensor(channels, h, w);
    out.grad_transformed = Tensor(channels, h, w);

    // Segmentation term.
    if (lambda_segmentation != 0.0) {
        const Tensor warped = plan.apply(original);
        Tensor grad_warped(channels, h, w);
        const double scale = lambda_segmentation / valid;
        std::vector<double> q(channels), g(channels);
        for (int p = 0; p < n; ++p) {
            if (!plan.valid(p)) continue;
            double sum = 0.0;
            for (int c = 0; c < channels; ++c) sum += warped.channel(c)[p];
            sum = std::max(sum, 1e-300);
            double kl = 0.0;
            for (int c = 0; c < channels; ++c) {
                const double qc_raw = warped.channel(c)[p] / sum;
                const double rp = transformed.channel(c)[p];
                const double pc = std::max(rp, kProbabilityFloor);
                const double qc = std::max(qc_raw, kProbabilityFloor);
                q[c] = qc_raw;
                kl += pc * (std::log(pc) - std::log(qc));
                out.grad_transformed.channel(c)[p] =
                    rp >= kProbabilityFloor ? scale * (std::log(pc) - std::log(qc) + 1.0) : 0.0;
                g[c] = qc_raw >= kProbabilityFloor ? -pc / qc : 0.0;
            }
            out.kl += kl;
            double dot = 0.0;
            for (int c = 0; c < channels; ++c) dot += g[c] * q[c];
            for (int c = 0; c < channels; ++c) grad_warped.channel(c)[p] = scale * (g[c] - dot) / sum;
        }
        out.kl /= valid;
        out.grad_original = plan.apply_transpose(grad_warped);
    }

    // Center term.
    if (lambda_center != 0.0) {
        for (int k = 1; k < channels; ++k) {
            const PartCenter c = part_center(original.channel(k), h, w);
            const PartCenter ct = part_center(transformed.channel(k), h, w);
            if (c.empty || ct.empty) continue;
            const Point mapped = transform.apply(c.center);
            const double ru = ct.center.u - mapped.u, rv = ct.center.v - mapped.v;
            out.center += ru * ru + rv * rv;

            // d/dc' = 2r ; d/dc = -2 J^T r
            const auto jac = transform.jacobian(c.center);
            const double gu = -2.0 * (jac[0] * ru + jac[2] * rv);
            const double gv = -2.0 * (jac[1] * ru + jac[3] * rv);
            auto go = out.grad_original.channel(k);
            auto gt = out.grad_transformed.channel(k);
            for (int y = 0; y < h; ++y) {
                const double u = grid_coordinate(y, h);
                for (int x = 0; x < w; ++x) {
                    const double v = grid_coordinate(x, w);
                    const std::size_t p = static_cast<std::size_t>(y) * w + x;
                    go[p] += lambda_center * (gu * (u - c.center.u) + gv * (v - c.center.v)) / c.mass;
                    gt[p] += lambda_center * 2.0 * (ru * (u - ct.center.u) + rv * (v - ct.center.v)) / ct.mass;
                }
            }
        }
    }

    out.value = lambda_segmentation * out.kl + lambda_center * out.center;
    return out;
}

// ---------------------------------------------------------------------------

SemanticLoss semantic_consistency_loss(const Tensor& features, const Tensor& response, const PartBasis& basis,
                                       const Tensor& saliency) {
    const int parts = response.channels() - 1;
    const int channels = features.channels();
    if (basis.channels != channels) {
        throw DimensionError("feature dimension " + std::to_string(channels) + " does not match basis dimension " +
                             std::to_string(basis.channels));
    }
    if (basis.parts != parts) throw DimensionError("basis part count does not match response map");
    if (features.height() != response.height() || features.width() != response.width()) {
        throw DimensionError("feature map and response map differ in spatial size");
    }
    const bool masked = !saliency.empty();
    if (masked && (saliency.height() != response.height() || saliency.width() != response.width())) {
        throw DimensionError("saliency map size mismatch");
    }

    const int n = response.plane_size();
    SemanticLoss out;
    out.grad_response = Tensor(response.channels(), response.height(), response.width());
    out.grad_basis.assign(basis.values.size(), 0.0);
    std::vector<double> residual(channels);
    const double scale = 1.0 / n;
    for (int p = 0; p < n; ++p) {
        const double d = masked ? saliency.channel(0)[p] : 1.0;
        for (int c = 0; c < channels; ++c) residual[c] = d * features.channel(c)[p];
        for (int k = 0; k < parts; ++k) {
            const double r = response.channel(k + 1)[p];
            for (int c = 0; c < channels; ++c) residual[c] -= r * basis.rectified(k, c);
        }
        double sq = 0.0;
        for (double e : residual) sq += e * e;
        out.value += sq;
        for (int k = 0; k < parts; ++k) {
            double dot = 0.0;
            for (int c = 0; c < channels; ++c) dot += residual[c] * basis.rectified(k, c);
            out.grad_response.channel(k + 1)[p] = -2.0 * scale * dot;
            const double r = response.channel(k + 1)[p];
            for (int c = 0; c < channels; ++c) {
                if (basis.at(k, c) > 0.0) {
                    out.grad_basis[static_cast<std::size_t>(k) * channels + c] -= 2.0 * scale * r * residual[c];
                }
            }
        }
    }
    out.value *= scale;
    return out;
}

// ---------------------------------------------------------------------------

OrthonormalLoss orthonormal_loss(const PartBasis& basis) {
    const int k = basis.parts, c = basis.channels;
    OrthonormalLoss out;
    out.grad_basis.assign(basis.values.size(), 0.0);

    std::vector<int> rows;
    std::vector<double> norms(k, 0.0);
    std::vector<double> unit(static_cast<std::size_t>(k) * c, 0.0);
    for (int i = 0; i < k; ++i) {
        double sq = 0.0;
        for (int j = 0; j < c; ++j) sq += basis.rectified(i, j) * basis.rectified(i, j);
        norms[i] = std::sqrt(sq);
        if (norms[i] < 1e-8) {
            ++out.excluded_rows;
            continue;
        }
        rows.push_back(i);
        for (int j = 0; j < c; ++j) unit[static_cast<std::size_t>(i) * c + j] = basis.rectified(i, j) / norms[i];
    }
    if (rows.empty()) throw Error("orthonormal loss: every basis row is zero");

    // gram(a, b) - delta(a, b), then dL/dW^ = 4 (G - I) W^.
    const int m = static_cast<int>(rows.size());
    std::vector<double> diff(static_cast<std::size_t>(m) * m);
    for (int a = 0; a < m; ++a) {
        for (int b = 0; b < m; ++b) {
            double dot = 0.0;
            for (int j = 0; j < c; ++j) {
                dot += unit[static_cast<std::size_t>(rows[a]) * c + j] * unit[static_cast<std::size_t>(rows[b]) * c + j];
            }
            const double e = dot - (a == b ? 1.0 : 0.0);
            diff[static_cast<std::size_t>(a) * m + b] = e;
            out.value += e * e;
        }
    }
    std::vector<double> gunit(c);
    for (int a = 0; a < m; ++a) {
        const int i = rows[a];
        for (int j = 0; j < c; ++j) {
            double s = 0.0;
            for (int b = 0; b < m; ++b) s += diff[static_cast<std::size_t>(a) * m + b] * unit[static_cast<std::size_t>(rows[b]) * c + j];
            gunit[j] = 4.0 * s;
        }
        // Project through normalization: (I - w^ w^T) / |w|.
        double radial = 0.0;
        for (int j = 0; j < c; ++j) radial += gunit[j] * unit[static_cast<std::size_t>(i) * c + j];
        for (int j = 0; j < c; ++j) {
            if (basis.at(i, j) <= 0.0) continue;
            out.grad_basis[static_cast<std::size_t>(i) * c + j] =
                (gunit[j] - radial * unit[static_cast<std::size_t>(i) * c + j]) / norms[i];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

TotalLoss total_loss(const LossComponents& components, const LossWeights& weights) {
    const double values[] = {components.concentration, components.equivariance, components.semantic,
                             components.orthonormal};
    for (std::size_t i = 0; i < 4; ++i) {
        if (!std::isfinite(values[i])) {
            throw LossError(kLossTermNames[i], std::string("non-finite ") + kLossTermNames[i] + " loss");
        }
    }
    TotalLoss out;
    out.weighted.concentration = weights.concentration * components.concentration;
    out.weighted.equivariance = weights.equivariance * components.equivariance;
    out.weighted.semantic = weights.semantic * components.semantic;
    out.weighted.orthonormal = weights.orthonormal * components.orthonormal;
    out.value = out.weighted.concentration + out.weighted.equivariance + out.weighted.semantic +
                out.weighted.orthonormal;
    return out;
}

} // namespace scops
