#pragma once

// Domain types, grid geometry, part-center moments and the spatial transform
// algebra shared by every other module.
//
// Coordinates: a point is (u, v) with u along rows and v along columns. In
// normalized units u = row / (H - 1) and v = col / (W - 1), so both axes span
// [0, 1] regardless of resolution.

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include "scops/error.hpp"
#include "scops/rng.hpp"
#include "scops/tensor.hpp"

namespace scops {

struct Point {
    double u = 0.0;
    double v = 0.0;
    friend bool operator==(const Point&, const Point&) = default;
};

inline constexpr int kMinImageSize = 8;
inline constexpr double kEmptyPartMass = 1e-8;

// ---------------------------------------------------------------------------
// Domain types

/// H×W×3 image stored channel-major, entries in [0, 1].
struct ImageTensor {
    Tensor pixels;

    ImageTensor() = default;
    explicit ImageTensor(Tensor t);

    int height() const { return pixels.height(); }
    int width() const { return pixels.width(); }
};

/// (K+1)×H×W softmax output; channel 0 is background.
struct PartResponseMap {
    Tensor values;

    int parts() const { return values.channels() - 1; }
    int height() const { return values.height(); }
    int width() const { return values.width(); }
};

/// Throws DimensionError unless every pixel is a distribution over channels
/// (entries in [0, 1], channel sum 1 within `tol`).
void check_response_map(const PartResponseMap& r, double tol = 1e-5);

/// Foreground channels rescaled to max 1, background constant 0.1.
struct NormalizedResponseMap {
    Tensor values;

    int parts() const { return values.channels() - 1; }
};

/// Per-pixel part labels in {0..K}, 0 is background. Row-major.
struct PartSegmentation {
    int height = 0;
    int width = 0;
    int parts = 0;
    std::vector<int> labels;

    int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
    friend bool operator==(const PartSegmentation&, const PartSegmentation&) = default;
};

enum class CoordinateMode { normalized, pixel };

struct PartCenter {
    Point center;
    double mass = 0.0;
    bool empty = true;
};

struct PartCenters {
    std::vector<PartCenter> parts;  // one per foreground channel

    int count() const { return static_cast<int>(parts.size()); }
};

// ---------------------------------------------------------------------------
// Grid geometry and moments

/// Coordinate of a row / column index in the given mode. A dimension of
/// extent 1 maps to coordinate 0.
double grid_coordinate(int index, int extent, CoordinateMode mode = CoordinateMode::normalized);

/// Response-weighted mean coordinate of a non-negative H×W plane.
/// Returns an `empty` result when the total mass is below 1e-8.
PartCenter part_center(std::span<const double> plane, int height, int width,
                       CoordinateMode mode = CoordinateMode::normalized);

/// Gradient of the center with respect to every plane entry:
/// d c_u / d R(p) = (u_p - c_u) / z and likewise for v.
struct CenterGradient {
    std::vector<double> du;
    std::vector<double> dv;
};
CenterGradient part_center_gradient(std::span<const double> plane, int height, int width,
                                    CoordinateMode mode = CoordinateMode::normalized);

/// Centers of foreground channels 1..K.
PartCenters part_centers(const Tensor& response, CoordinateMode mode = CoordinateMode::normalized);

// ---------------------------------------------------------------------------
// Spatial transforms

struct SimilarityParams {
    double rotation = 0.0;  // radians
    double scale = 1.0;
    double shift_u = 0.0;   // fraction of image extent
    double shift_v = 0.0;
};

/// Control-point displacements on an n×n grid spanning [0,1]^2, applied as a
/// thin-plate spline displacement field.
struct TpsParams {
    int grid = 0;
    std::vector<Point> offsets;  // row-major, grid*grid entries
};

/// Invertible parametric warp on normalized coordinates, represented as a
/// chain of stages applied first to last. Point p maps to T(p); maps are
/// warped by inverse lookup, so content at p in the source appears at T(p).
class SpatialTransform {
public:
    enum class Kind { similarity, tps, composite };

    SpatialTransform();  // identity

    static SpatialTransform identity() { return {}; }
    static SpatialTransform similarity(const SimilarityParams& params);
    /// Throws ConfigError if the displacement field folds over.
    static SpatialTransform tps(const TpsParams& params);
    /// Similarity first, then the TPS displacement.
    static SpatialTransform composite(const SimilarityParams& sim, const TpsParams& tps);

    Kind kind() const;
    bool is_identity() const { return stages_.empty(); }

    Point apply(Point p) const;
    Point apply_inverse(Point p) const;
    /// Row-major 2×2 Jacobian dT/dp at p.
    std::array<double, 4> jacobian(Point p) const;

    /// Returns the transform (this ∘ first), i.e. `first` applied first.
    SpatialTransform after(const SpatialTransform& first) const;

    /// Parameters of every stage, in order, for logging / storage.
    std::vector<double> parameter_vector() const;

    struct Stage;

private:
    std::vector<std::shared_ptr<const Stage>> stages_;
};

/// Per-pixel bilinear lookup derived from a transform; reused for the
/// forward warp and its adjoint.
class WarpPlan {
public:
    WarpPlan(const SpatialTransform& transform, int height, int width);

    int height() const { return height_; }
    int width() const { return width_; }
    bool valid(int pixel) const { return valid_[pixel] != 0; }
    const std::vector<unsigned char>& valid_mask() const { return valid_; }
    int valid_count() const;

    /// Warped tensor; invalid pixels are zero.
    Tensor apply(const Tensor& source) const;
    /// Adjoint of `apply`: scatters destination gradients back to the source.
    Tensor apply_transpose(const Tensor& dest_grad) const;

private:
    struct Tap {
        int index[4];
        double weight[4];
    };
    int height_;
    int width_;
    std::vector<Tap> taps_;
    std::vector<unsigned char> valid_;
};

struct WarpResult {
    Tensor warped;
    std::vector<unsigned char> valid_mask;  // row-major H×W
};

WarpResult apply_transform_to_map(const Tensor& map, const SpatialTransform& transform);

std::vector<Point> apply_transform_to_points(std::span<const Point> points,
                                             const SpatialTransform& transform);

/// Warp an image; out-of-bounds pixels are black.
ImageTensor warp_image(const ImageTensor& image, const SpatialTransform& transform);

// ---------------------------------------------------------------------------
// Appearance perturbation

struct ColorJitter {
    double brightness = 0.0;  // factor 1 + brightness
    double contrast = 0.0;    // factor 1 + contrast around the mean gray
    double saturation = 0.0;  // factor 1 + saturation around per-pixel gray
    double hue = 0.0;         // fraction of the hue circle

    bool is_noop() const { return brightness == 0 && contrast == 0 && saturation == 0 && hue == 0; }
    ImageTensor apply(const ImageTensor& image) const;
};

struct TransformRanges {
    double rotation_deg = 60.0;
    double shift_frac = 0.2;
    double scale_min = 0.3;
    double scale_max = 2.0;
    int tps_grid = 5;          // 0 disables the TPS stage
    double tps_shift_frac = 0.1;
    double brightness = 0.3;
    double contrast = 0.3;
    double saturation = 0.2;
    double hue = 0.2;

    /// Throws ConfigError on negative ranges or scale_min > scale_max.
    void validate() const;
};

struct SampledAugmentation {
    SpatialTransform spatial;
    ColorJitter jitter;
};

SampledAugmentation sample_transform(Rng& rng, const TransformRanges& ranges);

/// Similarity-only sample from the same ranges.
SpatialTransform sample_similarity(Rng& rng, const TransformRanges& ranges);

// ---------------------------------------------------------------------------
// Small resampling helpers shared by IO and evaluation

Tensor resize_bilinear(const Tensor& src, int height, int width);
std::vector<int> resize_nearest(const std::vector<int>& labels, int src_h, int src_w, int height, int width);

} // namespace scops
