#include "scops/dff.hpp"

#include <cmath>

namespace scops {

namespace {

constexpr double kDenominatorFloor = 1e-300;

// Objective |V - HW|^2 relative to |V|^2.
double relative_residual(const Eigen::MatrixXd& v, const Eigen::MatrixXd& h, const Eigen::MatrixXd& w, double vnorm) {
    return (v - h * w).squaredNorm() / (vnorm * vnorm);
}

} // namespace

NmfResult nmf(const Eigen::MatrixXd& data, const NmfOptions& options) {
    const Eigen::Index m = data.rows(), c = data.cols();
    const int k = options.parts;
    if (k < 1 || k > std::min(m, c)) {
        throw ConfigError("NMF rank " + std::to_string(k) + " must be in [1, min(M, C)] = [1, " +
                          std::to_string(std::min(m, c)) + "]");
    }
    if (options.max_iters < 1 || options.inner_updates < 1) throw ConfigError("NMF iteration counts must be positive");
    if ((data.array() < 0.0).any() || !data.allFinite()) throw ConfigError("NMF input must be finite and non-negative");
    const double vnorm = data.norm();
    if (vnorm == 0.0) throw ConfigError("NMF input is all zero");

    Rng rng(options.seed);
    const double scale = std::sqrt(data.mean() / k);
    NmfResult out;
    out.coefficients.resize(m, k);
    out.basis.resize(k, c);
    for (Eigen::Index i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) out.coefficients(i, j) = scale * rng.uniform(0.01, 1.0);
    for (int i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < c; ++j) out.basis(i, j) = scale * rng.uniform(0.01, 1.0);

    Eigen::MatrixXd& h = out.coefficients;
    Eigen::MatrixXd& w = out.basis;
    double previous = relative_residual(data, h, w, vnorm);
    for (int it = 0; it < options.max_iters; ++it) {
        const Eigen::MatrixXd vwt = data * w.transpose();
        const Eigen::MatrixXd wwt = w * w.transpose();
        for (int r = 0; r < options.inner_updates; ++r) {
            const Eigen::MatrixXd denom = h * wwt;
            h = h.cwiseProduct(vwt.cwiseQuotient(denom.cwiseMax(kDenominatorFloor)));
        }
        const Eigen::MatrixXd htv = h.transpose() * data;
        const Eigen::MatrixXd hth = h.transpose() * h;
        for (int r = 0; r < options.inner_updates; ++r) {
            const Eigen::MatrixXd denom = hth * w;
            w = w.cwiseProduct(htv.cwiseQuotient(denom.cwiseMax(kDenominatorFloor)));
        }
        const double current = relative_residual(data, h, w, vnorm);
        out.residual_history.push_back(current);
        if (previous > 0.0 && (previous - current) / previous < options.tol) break;
        previous = current;
    }
    return out;
}

DffResult dff_segment(const std::vector<ImageTensor>& images, const FeatureProvider& provider,
                      const std::vector<SaliencyMap>& saliency, const DffOptions& options) {
    if (images.size() < 2) throw ConfigError("DFF requires a collection of at least two images");
    if (!saliency.empty() && saliency.size() != images.size()) {
        throw DimensionError("DFF needs one saliency map per image");
    }
    const int h = images.front().height(), w = images.front().width(), n = h * w;
    std::vector<FeatureMap> features;
    features.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        ImageTensor img = images[i];
        if (img.height() != h || img.width() != w) img.pixels = resize_bilinear(img.pixels, h, w);
        FeatureMap f = extract_features(provider, img);
        if (options.use_saliency && !saliency.empty()) {
            SaliencyMap s = saliency[i];
            if (s.values.height() != h || s.values.width() != w) s.values = resize_bilinear(s.values, h, w);
            f = mask_features(f, s);
        }
        features.push_back(std::move(f));
    }
    const int c = features.front().channels();
    Eigen::MatrixXd stacked(static_cast<Eigen::Index>(n) * images.size(), c);
    for (std::size_t i = 0; i < features.size(); ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < n; ++p) stacked(static_cast<Eigen::Index>(i) * n + p, ch) = features[i].values.channel(ch)[p];

    DffResult out;
    out.factorization = nmf(stacked, options.nmf);
    const int k = options.nmf.parts;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Tensor r(k + 1, h, w);
        for (int part = 0; part < k; ++part)
            for (int p = 0; p < n; ++p)
                r.channel(part + 1)[p] = out.factorization.coefficients(static_cast<Eigen::Index>(i) * n + p, part);
        out.segmentations.push_back(segment(normalize_responses(r)));
        out.responses.push_back(std::move(r));
    }
    return out;
}

} // namespace scops
