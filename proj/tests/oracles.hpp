#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner. Written as plain loops over the definitions, without
// touching the library's loss code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "scops/core.hpp"
#include "scops/losses.hpp"
#include "scops/rng.hpp"

namespace oracle {

inline double coord(int i, int n) { return n > 1 ? static_cast<double>(i) / (n - 1) : 0.0; }

/// Sum over foreground channels of the weighted second moment about the
/// weighted mean, computed in two separate passes.
inline double concentration(const scops::Tensor& r) {
    double total = 0.0;
    for (int k = 1; k < r.channels(); ++k) {
        double z = 0.0, su = 0.0, sv = 0.0;
        for (int y = 0; y < r.height(); ++y)
            for (int x = 0; x < r.width(); ++x) {
                z += r(k, y, x);
                su += coord(y, r.height()) * r(k, y, x);
                sv += coord(x, r.width()) * r(k, y, x);
            }
        if (z < 1e-8) continue;
        const double cu = su / z, cv = sv / z;
        for (int y = 0; y < r.height(); ++y)
            for (int x = 0; x < r.width(); ++x) {
                const double du = coord(y, r.height()) - cu, dv = coord(x, r.width()) - cv;
                total += (du * du + dv * dv) * r(k, y, x) / z;
            }
    }
    return total;
}

/// Scalar triple loop over pixels, channels and parts.
inline double semantic(const scops::Tensor& v, const scops::Tensor& r, const scops::PartBasis& w,
                       const scops::Tensor& d) {
    double total = 0.0;
    const int h = r.height(), wd = r.width();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < wd; ++x)
            for (int c = 0; c < v.channels(); ++c) {
                double e = (d.empty() ? 1.0 : d(0, y, x)) * v(c, y, x);
                for (int k = 0; k < w.parts; ++k) e -= r(k + 1, y, x) * std::max(w.at(k, c), 0.0);
                total += e * e;
            }
    return total / (h * wd);
}

/// Frobenius distance of the Gram matrix of normalized rectified rows from I.
inline double orthonormal(const scops::PartBasis& w) {
    std::vector<std::vector<double>> rows;
    for (int k = 0; k < w.parts; ++k) {
        std::vector<double> row(w.channels);
        double n = 0.0;
        for (int c = 0; c < w.channels; ++c) {
            row[c] = std::max(w.at(k, c), 0.0);
            n += row[c] * row[c];
        }
        n = std::sqrt(n);
        if (n < 1e-8) continue;
        for (double& e : row) e /= n;
        rows.push_back(row);
    }
    double total = 0.0;
    for (std::size_t a = 0; a < rows.size(); ++a)
        for (std::size_t b = 0; b < rows.size(); ++b) {
            double g = 0.0;
            for (int c = 0; c < w.channels; ++c) g += rows[a][c] * rows[b][c];
            g -= a == b ? 1.0 : 0.0;
            total += g * g;
        }
    return total;
}

/// Random per-pixel distributions over `channels`, bounded well away from 0.
inline scops::Tensor random_simplex(scops::Rng& rng, int channels, int h, int w) {
    scops::Tensor t(channels, h, w);
    for (int p = 0; p < h * w; ++p) {
        double sum = 0.0;
        std::vector<double> e(channels);
        for (double& x : e) sum += (x = std::exp(rng.normal()));
        for (int c = 0; c < channels; ++c) t.channel(c)[p] = e[c] / sum;
    }
    return t;
}

/// Worst |a - f| / max(|a|, |f|, floor) over entries, where f is the central
/// difference of `value` at `x` with step h.
inline double gradient_error(std::vector<double>& x, const std::vector<double>& analytic,
                             const std::function<double()>& value, double h = 1e-5, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double hi = value();
        x[i] = orig - h;
        const double lo = value();
        x[i] = orig;
        const double fd = (hi - lo) / (2 * h);
        worst = std::max(worst, std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), floor}));
    }
    return worst;
}

inline double gradient_error(scops::Tensor& x, const scops::Tensor& analytic, const std::function<double()>& value) {
    return gradient_error(x.values(), analytic.values(), value);
}

/// Random instance for gradient checks: 5×6 grid, K in [1,4], C in [1,8].
struct LossInstance {
    int parts = 0, channels = 0, height = 5, width = 6;
    scops::Tensor response, transformed, features, saliency;
    scops::PartBasis basis;
    scops::SpatialTransform transform;
};

inline LossInstance random_instance(std::uint64_t seed) {
    scops::Rng rng(seed);
    LossInstance in;
    in.parts = 1 + static_cast<int>(rng.below(4));
    in.channels = 1 + static_cast<int>(rng.below(8));
    in.response = random_simplex(rng, in.parts + 1, in.height, in.width);
    in.transformed = random_simplex(rng, in.parts + 1, in.height, in.width);
    in.features = scops::Tensor(in.channels, in.height, in.width);
    for (double& v : in.features.values()) v = rng.uniform();
    in.saliency = scops::Tensor(1, in.height, in.width);
    for (double& v : in.saliency.values()) v = rng.uniform();
    in.basis = scops::PartBasis(in.parts, in.channels);
    // Keep entries clear of the rectification kink so differences are smooth.
    for (double& v : in.basis.values) {
        v = rng.uniform(-0.5, 1.0);
        if (std::abs(v) < 0.05) v = 0.3;
    }
    scops::SimilarityParams s;
    s.rotation = rng.uniform(-0.3, 0.3);
    s.scale = rng.uniform(0.9, 1.1);
    s.shift_u = rng.uniform(-0.05, 0.05);
    s.shift_v = rng.uniform(-0.05, 0.05);
    if (seed % 2 == 0) {
        scops::TpsParams t{3, {}};
        for (int i = 0; i < 9; ++i) t.offsets.push_back({rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)});
        in.transform = scops::SpatialTransform::composite(s, t);
    } else {
        in.transform = scops::SpatialTransform::similarity(s);
    }
    return in;
}

} // namespace oracle
