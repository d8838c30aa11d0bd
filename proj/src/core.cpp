#include "scops/core.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>

namespace scops {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require_finite_unit(const Tensor& t, const char* what) {
    for (double v : t.values()) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw DimensionError(std::string(what) + ": entries must be finite and within [0,1]");
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Domain types

ImageTensor::ImageTensor(Tensor t) : pixels(std::move(t)) {
    if (pixels.channels() != 3) throw DimensionError("image must have 3 channels");
    if (pixels.height() < kMinImageSize || pixels.width() < kMinImageSize) {
        throw SizingError("image must be at least 8x8, got " + std::to_string(pixels.height()) + "x" +
                          std::to_string(pixels.width()));
    }
    require_finite_unit(pixels, "image");
}

void check_response_map(const PartResponseMap& r, double tol) {
    const Tensor& t = r.values;
    if (t.channels() < 2) throw DimensionError("response map needs background plus at least one part");
    const int n = t.plane_size();
    for (int p = 0; p < n; ++p) {
        double sum = 0.0;
        for (int c = 0; c < t.channels(); ++c) {
            const double v = t.channel(c)[p];
            if (!std::isfinite(v) || v < 0.0 || v > 1.0 + tol) {
                throw DimensionError("response map entry outside [0,1]");
            }
            sum += v;
        }
        if (std::abs(sum - 1.0) > tol) throw DimensionError("response map pixel does not sum to 1");
    }
}

// ---------------------------------------------------------------------------
// Moments

double grid_coordinate(int index, int extent, CoordinateMode mode) {
    if (mode == CoordinateMode::pixel) return static_cast<double>(index);
    if (extent <= 1) return 0.0;
    return static_cast<double>(index) / static_cast<double>(extent - 1);
}

PartCenter part_center(std::span<const double> plane, int height, int width, CoordinateMode mode) {
    double z = 0.0, su = 0.0, sv = 0.0;
    for (int y = 0; y < height; ++y) {
        const double u = grid_coordinate(y, height, mode);
        for (int x = 0; x < width; ++x) {
            const double r = plane[static_cast<std::size_t>(y) * width + x];
            z += r;
            su += u * r;
            sv += grid_coordinate(x, width, mode) * r;
        }
    }
    PartCenter out;
    out.mass = z;
    if (!(z >= kEmptyPartMass)) return out;
    out.empty = false;
    out.center = {su / z, sv / z};
    return out;
}

CenterGradient part_center_gradient(std::span<const double> plane, int height, int width,
                                    CoordinateMode mode) {
    const PartCenter c = part_center(plane, height, width, mode);
    CenterGradient g;
    g.du.assign(plane.size(), 0.0);
    g.dv.assign(plane.size(), 0.0);
    if (c.empty) return g;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * width + x;
            g.du[p] = (grid_coordinate(y, height, mode) - c.center.u) / c.mass;
            g.dv[p] = (grid_coordinate(x, width, mode) - c.center.v) / c.mass;
        }
    }
    return g;
}

PartCenters part_centers(const Tensor& response, CoordinateMode mode) {
    PartCenters out;
    for (int k = 1; k < response.channels(); ++k) {
        out.parts.push_back(part_center(response.channel(k), response.height(), response.width(), mode));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Transform stages

struct SpatialTransform::Stage {
    virtual ~Stage() = default;
    virtual Point forward(Point p) const = 0;
    virtual Point inverse(Point p) const = 0;
    virtual std::array<double, 4> jacobian(Point p) const = 0;
    virtual bool is_similarity() const = 0;
    virtual void append_parameters(std::vector<double>& out) const = 0;
};

namespace {

class SimilarityStage final : public SpatialTransform::Stage {
public:
    explicit SimilarityStage(const SimilarityParams& p)
        : params_(p), cos_(std::cos(p.rotation)), sin_(std::sin(p.rotation)) {
        if (!(p.scale > 0.0) || !std::isfinite(p.scale)) throw ConfigError("similarity scale must be positive");
    }

    Point forward(Point p) const override {
        const double du = p.u - 0.5, dv = p.v - 0.5;
        return {0.5 + params_.scale * (cos_ * du - sin_ * dv) + params_.shift_u,
                0.5 + params_.scale * (sin_ * du + cos_ * dv) + params_.shift_v};
    }

    Point inverse(Point p) const override {
        const double du = (p.u - 0.5 - params_.shift_u) / params_.scale;
        const double dv = (p.v - 0.5 - params_.shift_v) / params_.scale;
        return {0.5 + cos_ * du + sin_ * dv, 0.5 - sin_ * du + cos_ * dv};
    }

    std::array<double, 4> jacobian(Point) const override {
        const double s = params_.scale;
        return {s * cos_, -s * sin_, s * sin_, s * cos_};
    }

    bool is_similarity() const override { return true; }

    void append_parameters(std::vector<double>& out) const override {
        out.insert(out.end(), {0.0, params_.rotation, params_.scale, params_.shift_u, params_.shift_v});
    }

private:
    SimilarityParams params_;
    double cos_;
    double sin_;
};

/// x -> x + d(x), d a thin-plate spline interpolating the control offsets.
class TpsStage final : public SpatialTransform::Stage {
public:
    explicit TpsStage(const TpsParams& p) : params_(p) {
        const int n = p.grid;
        if (n < 2) throw ConfigError("TPS grid must be at least 2x2");
        if (static_cast<int>(p.offsets.size()) != n * n) throw ConfigError("TPS offsets must have grid*grid entries");
        const int m = n * n;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c)
                controls_.push_back({static_cast<double>(r) / (n - 1), static_cast<double>(c) / (n - 1)});

        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m + 3, m + 3);
        Eigen::MatrixXd b = Eigen::MatrixXd::Zero(m + 3, 2);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < m; ++j) a(i, j) = kernel(distance(controls_[i], controls_[j]));
            a(i, m) = 1.0;
            a(i, m + 1) = controls_[i].u;
            a(i, m + 2) = controls_[i].v;
            a(m, i) = 1.0;
            a(m + 1, i) = controls_[i].u;
            a(m + 2, i) = controls_[i].v;
            b(i, 0) = p.offsets[i].u;
            b(i, 1) = p.offsets[i].v;
        }
        coeffs_ = a.fullPivLu().solve(b);

        // Reject fold-overs on a margin around the unit square.
        for (int i = 0; i <= 28; ++i) {
            for (int j = 0; j <= 28; ++j) {
                const Point q{-0.2 + 1.4 * i / 28.0, -0.2 + 1.4 * j / 28.0};
                const auto jac = jacobian(q);
                if (jac[0] * jac[3] - jac[1] * jac[2] < 0.05) {
                    throw ConfigError("TPS displacement field is not invertible");
                }
            }
        }
    }

    Point forward(Point p) const override {
        const Point d = displacement(p);
        return {p.u + d.u, p.v + d.v};
    }

    Point inverse(Point y) const override {
        Point x{y.u, y.v};
        const Point d0 = displacement(x);
        x = {y.u - d0.u, y.v - d0.v};
        for (int it = 0; it < 30; ++it) {
            const Point fx = forward(x);
            const double ru = fx.u - y.u, rv = fx.v - y.v;
            if (std::abs(ru) < 1e-14 && std::abs(rv) < 1e-14) break;
            const auto j = jacobian(x);
            const double det = j[0] * j[3] - j[1] * j[2];
            x.u -= (j[3] * ru - j[1] * rv) / det;
            x.v -= (-j[2] * ru + j[0] * rv) / det;
        }
        return x;
    }

    std::array<double, 4> jacobian(Point p) const override {
        const int m = static_cast<int>(controls_.size());
        double duu = coeffs_(m + 1, 0), duv = coeffs_(m + 2, 0);
        double dvu = coeffs_(m + 1, 1), dvv = coeffs_(m + 2, 1);
        for (int i = 0; i < m; ++i) {
            const double eu = p.u - controls_[i].u, ev = p.v - controls_[i].v;
            const double r = std::sqrt(eu * eu + ev * ev);
            if (r <= 0.0) continue;
            const double g = 2.0 * std::log(r) + 1.0;
            duu += coeffs_(i, 0) * eu * g;
            duv += coeffs_(i, 0) * ev * g;
            dvu += coeffs_(i, 1) * eu * g;
            dvv += coeffs_(i, 1) * ev * g;
        }
        return {1.0 + duu, duv, dvu, 1.0 + dvv};
    }

    bool is_similarity() const override { return false; }

    void append_parameters(std::vector<double>& out) const override {
        out.push_back(1.0);
        out.push_back(params_.grid);
        for (const Point& o : params_.offsets) {
            out.push_back(o.u);
            out.push_back(o.v);
        }
    }

private:
    static double distance(Point a, Point b) { return std::hypot(a.u - b.u, a.v - b.v); }
    static double kernel(double r) { return r <= 0.0 ? 0.0 : r * r * std::log(r); }

    Point displacement(Point p) const {
        const int m = static_cast<int>(controls_.size());
        double du = coeffs_(m, 0) + coeffs_(m + 1, 0) * p.u + coeffs_(m + 2, 0) * p.v;
        double dv = coeffs_(m, 1) + coeffs_(m + 1, 1) * p.u + coeffs_(m + 2, 1) * p.v;
        for (int i = 0; i < m; ++i) {
            const double k = kernel(distance(p, controls_[i]));
            du += coeffs_(i, 0) * k;
            dv += coeffs_(i, 1) * k;
        }
        return {du, dv};
    }

    TpsParams params_;
    std::vector<Point> controls_;
    Eigen::MatrixXd coeffs_;
};

bool is_identity_similarity(const SimilarityParams& p) {
    return p.rotation == 0.0 && p.scale == 1.0 && p.shift_u == 0.0 && p.shift_v == 0.0;
}

bool is_zero_tps(const TpsParams& p) {
    return std::all_of(p.offsets.begin(), p.offsets.end(), [](const Point& o) { return o.u == 0.0 && o.v == 0.0; });
}

} // namespace

SpatialTransform::SpatialTransform() = default;

SpatialTransform SpatialTransform::similarity(const SimilarityParams& params) {
    SpatialTransform t;
    if (!is_identity_similarity(params)) t.stages_.push_back(std::make_shared<SimilarityStage>(params));
    return t;
}

SpatialTransform SpatialTransform::tps(const TpsParams& params) {
    SpatialTransform t;
    auto stage = std::make_shared<TpsStage>(params);
    if (!is_zero_tps(params)) t.stages_.push_back(std::move(stage));
    return t;
}

SpatialTransform SpatialTransform::composite(const SimilarityParams& sim, const TpsParams& tps_params) {
    return tps(tps_params).after(similarity(sim));
}

SpatialTransform::Kind SpatialTransform::kind() const {
    if (stages_.size() > 1) return Kind::composite;
    if (stages_.size() == 1 && !stages_.front()->is_similarity()) return Kind::tps;
    return Kind::similarity;
}

Point SpatialTransform::apply(Point p) const {
    for (const auto& s : stages_) p = s->forward(p);
    return p;
}

Point SpatialTransform::apply_inverse(Point p) const {
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) p = (*it)->inverse(p);
    return p;
}

std::array<double, 4> SpatialTransform::jacobian(Point p) const {
    std::array<double, 4> acc{1.0, 0.0, 0.0, 1.0};
    for (const auto& s : stages_) {
        const auto j = s->jacobian(p);
        acc = {j[0] * acc[0] + j[1] * acc[2], j[0] * acc[1] + j[1] * acc[3],
               j[2] * acc[0] + j[3] * acc[2], j[2] * acc[1] + j[3] * acc[3]};
        p = s->forward(p);
    }
    return acc;
}

SpatialTransform SpatialTransform::after(const SpatialTransform& first) const {
    SpatialTransform t = first;
    t.stages_.insert(t.stages_.end(), stages_.begin(), stages_.end());
    return t;
}

std::vector<double> SpatialTransform::parameter_vector() const {
    std::vector<double> out;
    for (const auto& s : stages_) s->append_parameters(out);
    return out;
}

// ---------------------------------------------------------------------------
// Warping

WarpPlan::WarpPlan(const SpatialTransform& transform, int height, int width)
    : height_(height), width_(width), taps_(static_cast<std::size_t>(height) * width),
      valid_(static_cast<std::size_t>(height) * width, 0) {
    constexpr double eps = 1e-9;
    for (int i = 0; i < height; ++i) {
        for (int j = 0; j < width; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * width + j;
            Tap& tap = taps_[p];
            const Point src = transform.is_identity()
                                  ? Point{grid_coordinate(i, height), grid_coordinate(j, width)}
                                  : transform.apply_inverse({grid_coordinate(i, height), grid_coordinate(j, width)});
            const double y = height > 1 ? src.u * (height - 1) : src.u;
            const double x = width > 1 ? src.v * (width - 1) : src.v;
            if (!(y >= -eps && y <= height - 1 + eps && x >= -eps && x <= width - 1 + eps)) {
                for (int t = 0; t < 4; ++t) {
                    tap.index[t] = 0;
                    tap.weight[t] = 0.0;
                }
                continue;
            }
            valid_[p] = 1;
            const double yc = std::clamp(y, 0.0, static_cast<double>(height - 1));
            const double xc = std::clamp(x, 0.0, static_cast<double>(width - 1));
            const int y0 = std::min(static_cast<int>(std::floor(yc)), std::max(height - 2, 0));
            const int x0 = std::min(static_cast<int>(std::floor(xc)), std::max(width - 2, 0));
            const int y1 = std::min(y0 + 1, height - 1);
            const int x1 = std::min(x0 + 1, width - 1);
            const double fy = yc - y0, fx = xc - x0;
            tap.index[0] = y0 * width + x0;
            tap.index[1] = y0 * width + x1;
            tap.index[2] = y1 * width + x0;
            tap.index[3] = y1 * width + x1;
            tap.weight[0] = (1 - fy) * (1 - fx);
            tap.weight[1] = (1 - fy) * fx;
            tap.weight[2] = fy * (1 - fx);
            tap.weight[3] = fy * fx;
        }
    }
}

int WarpPlan::valid_count() const {
    return static_cast<int>(std::count(valid_.begin(), valid_.end(), static_cast<unsigned char>(1)));
}

Tensor WarpPlan::apply(const Tensor& source) const {
    if (source.height() != height_ || source.width() != width_) throw DimensionError("warp plan size mismatch");
    Tensor out(source.channels(), height_, width_);
    const int n = height_ * width_;
    for (int c = 0; c < source.channels(); ++c) {
        const auto src = source.channel(c);
        auto dst = out.channel(c);
        for (int p = 0; p < n; ++p) {
            if (!valid_[p]) continue;
            const Tap& t = taps_[p];
            dst[p] = t.weight[0] * src[t.index[0]] + t.weight[1] * src[t.index[1]] +
                     t.weight[2] * src[t.index[2]] + t.weight[3] * src[t.index[3]];
        }
    }
    return out;
}

Tensor WarpPlan::apply_transpose(const Tensor& dest_grad) const {
    if (dest_grad.height() != height_ || dest_grad.width() != width_) throw DimensionError("warp plan size mismatch");
    Tensor out(dest_grad.channels(), height_, width_);
    const int n = height_ * width_;
    for (int c = 0; c < dest_grad.channels(); ++c) {
        const auto g = dest_grad.channel(c);
        auto dst = out.channel(c);
        for (int p = 0; p < n; ++p) {
            if (!valid_[p]) continue;
            const Tap& t = taps_[p];
            for (int k = 0; k < 4; ++k) dst[t.index[k]] += t.weight[k] * g[p];
        }
    }
    return out;
}

WarpResult apply_transform_to_map(const Tensor& map, const SpatialTransform& transform) {
    const WarpPlan plan(transform, map.height(), map.width());
    return {plan.apply(map), plan.valid_mask()};
}

std::vector<Point> apply_transform_to_points(std::span<const Point> points, const SpatialTransform& transform) {
    std::vector<Point> out;
    out.reserve(points.size());
    for (const Point& p : points) out.push_back(transform.apply(p));
    return out;
}

ImageTensor warp_image(const ImageTensor& image, const SpatialTransform& transform) {
    ImageTensor out;
    out.pixels = apply_transform_to_map(image.pixels, transform).warped;
    for (double& v : out.pixels.values()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Color jitter

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double d = mx - mn;
    v = mx;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r) h = (g - b) / d;
    else if (mx == g) h = 2.0 + (b - r) / d;
    else h = 4.0 + (r - g) / d;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int i = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

} // namespace

ImageTensor ColorJitter::apply(const ImageTensor& image) const {
    ImageTensor out = image;
    if (is_noop()) return out;
    Tensor& t = out.pixels;
    const int n = t.plane_size();
    auto r = t.channel(0), g = t.channel(1), b = t.channel(2);
    auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };

    if (brightness != 0.0) {
        for (double& v : t.values()) v = clamp01(v * (1.0 + brightness));
    }
    if (contrast != 0.0) {
        double mean = 0.0;
        for (int p = 0; p < n; ++p) mean += luma(r[p], g[p], b[p]);
        mean /= n;
        for (double& v : t.values()) v = clamp01(mean + (1.0 + contrast) * (v - mean));
    }
    if (saturation != 0.0) {
        for (int p = 0; p < n; ++p) {
            const double gray = luma(r[p], g[p], b[p]);
            r[p] = clamp01(gray + (1.0 + saturation) * (r[p] - gray));
            g[p] = clamp01(gray + (1.0 + saturation) * (g[p] - gray));
            b[p] = clamp01(gray + (1.0 + saturation) * (b[p] - gray));
        }
    }
    if (hue != 0.0) {
        for (int p = 0; p < n; ++p) {
            double h, s, v;
            rgb_to_hsv(r[p], g[p], b[p], h, s, v);
            hsv_to_rgb(h + hue, s, v, r[p], g[p], b[p]);
            r[p] = clamp01(r[p]);
            g[p] = clamp01(g[p]);
            b[p] = clamp01(b[p]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sampling

void TransformRanges::validate() const {
    const double fields[] = {rotation_deg, shift_frac, tps_shift_frac, brightness, contrast, saturation, hue};
    for (double f : fields) {
        if (!(f >= 0.0) || !std::isfinite(f)) throw ConfigError("transform ranges must be finite and non-negative");
    }
    if (!(scale_min > 0.0)) throw ConfigError("scale range must be positive");
    if (scale_min > scale_max) throw ConfigError("degenerate scale range: min > max");
    if (tps_grid < 0 || tps_grid == 1) throw ConfigError("TPS grid must be 0 (off) or at least 2");
}

SpatialTransform sample_similarity(Rng& rng, const TransformRanges& ranges) {
    ranges.validate();
    SimilarityParams sim;
    sim.rotation = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg) * kPi / 180.0;
    sim.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
    sim.shift_u = rng.uniform(-ranges.shift_frac, ranges.shift_frac);
    sim.shift_v = rng.uniform(-ranges.shift_frac, ranges.shift_frac);
    return SpatialTransform::similarity(sim);
}

SampledAugmentation sample_transform(Rng& rng, const TransformRanges& ranges) {
    ranges.validate();
    SimilarityParams sim;
    sim.rotation = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg) * kPi / 180.0;
    sim.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
    sim.shift_u = rng.uniform(-ranges.shift_frac, ranges.shift_frac);
    sim.shift_v = rng.uniform(-ranges.shift_frac, ranges.shift_frac);

    SampledAugmentation out;
    out.spatial = SpatialTransform::similarity(sim);
    if (ranges.tps_grid >= 2) {
        TpsParams tps;
        tps.grid = ranges.tps_grid;
        // A folded draw is resampled; after a handful of failures the TPS stage is dropped.
        for (int attempt = 0; attempt < 8; ++attempt) {
            tps.offsets.clear();
            for (int i = 0; i < tps.grid * tps.grid; ++i) {
                const double du = rng.uniform(-ranges.tps_shift_frac, ranges.tps_shift_frac);
                const double dv = rng.uniform(-ranges.tps_shift_frac, ranges.tps_shift_frac);
                tps.offsets.push_back({du, dv});
            }
            try {
                out.spatial = SpatialTransform::composite(sim, tps);
                break;
            } catch (const ConfigError&) {
            }
        }
    }
    out.jitter.brightness = rng.uniform(-ranges.brightness, ranges.brightness);
    out.jitter.contrast = rng.uniform(-ranges.contrast, ranges.contrast);
    out.jitter.saturation = rng.uniform(-ranges.saturation, ranges.saturation);
    out.jitter.hue = rng.uniform(-ranges.hue, ranges.hue);
    return out;
}

// ---------------------------------------------------------------------------
// Resampling

Tensor resize_bilinear(const Tensor& src, int height, int width) {
    if (src.height() == height && src.width() == width) return src;
    Tensor out(src.channels(), height, width);
    for (int i = 0; i < height; ++i) {
        const double y = height > 1 ? static_cast<double>(i) * (src.height() - 1) / (height - 1) : 0.0;
        const int y0 = std::min(static_cast<int>(y), src.height() - 1);
        const int y1 = std::min(y0 + 1, src.height() - 1);
        const double fy = y - y0;
        for (int j = 0; j < width; ++j) {
            const double x = width > 1 ? static_cast<double>(j) * (src.width() - 1) / (width - 1) : 0.0;
            const int x0 = std::min(static_cast<int>(x), src.width() - 1);
            const int x1 = std::min(x0 + 1, src.width() - 1);
            const double fx = x - x0;
            for (int c = 0; c < src.channels(); ++c) {
                out(c, i, j) = (1 - fy) * ((1 - fx) * src(c, y0, x0) + fx * src(c, y0, x1)) +
                               fy * ((1 - fx) * src(c, y1, x0) + fx * src(c, y1, x1));
            }
        }
    }
    return out;
}

std::vector<int> resize_nearest(const std::vector<int>& labels, int src_h, int src_w, int height, int width) {
    std::vector<int> out(static_cast<std::size_t>(height) * width);
    for (int i = 0; i < height; ++i) {
        const int y = std::min(static_cast<int>((i + 0.5) * src_h / height), src_h - 1);
        for (int j = 0; j < width; ++j) {
            const int x = std::min(static_cast<int>((j + 0.5) * src_w / width), src_w - 1);
            out[static_cast<std::size_t>(i) * width + j] = labels[static_cast<std::size_t>(y) * src_w + x];
        }
    }
    return out;
}

} // namespace scops
