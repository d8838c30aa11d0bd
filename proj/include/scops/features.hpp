#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "scops/core.hpp"

namespace scops {

/// C×H×W non-negative feature grid at image resolution.
struct FeatureMap {
    Tensor values;
    std::vector<std::string> source_layers;

    int channels() const { return values.channels(); }
};

/// Per-pixel foreground prior in [0, 1], stored as a 1×H×W tensor.
struct SaliencyMap {
    Tensor values;

    static SaliencyMap ones(int height, int width) { return {Tensor(1, height, width, 1.0)}; }
};

/// Frozen feature extractor. Implementations are read-only after
/// construction and never receive gradients.
class FeatureProvider {
public:
    virtual ~FeatureProvider() = default;
    virtual int channels() const = 0;
    virtual std::string name() const = 0;
    /// Features at native resolution, not yet rectified or resized.
    virtual FeatureMap compute(const ImageTensor& image) const = 0;
};

/// Rectifies then bilinearly upsamples the provider output to image size.
FeatureMap extract_features(const FeatureProvider& provider, const ImageTensor& image);

/// RGB, the two normalized coordinate ramps, and three fixed random
/// projections of RGB. Eight channels.
class SyntheticFeatureProvider final : public FeatureProvider {
public:
    SyntheticFeatureProvider();
    int channels() const override { return 8; }
    std::string name() const override { return "synthetic"; }
    FeatureMap compute(const ImageTensor& image) const override;

private:
    double projection_[3][3];
};

/// VGG-19 convolutional trunk; emits relu5_2 concatenated with relu5_4
/// (1024 channels). Weights come from a converted file, see
/// tools/convert_vgg19.py for the layout.
class Vgg19FeatureProvider final : public FeatureProvider {
public:
    /// Throws IoError with conversion instructions when the file is absent.
    explicit Vgg19FeatureProvider(const std::filesystem::path& weights_path);
    int channels() const override { return 1024; }
    std::string name() const override { return "vgg19"; }
    FeatureMap compute(const ImageTensor& image) const override;

    /// Channel widths of the 16 convolutions, in file order.
    static const std::vector<int>& layer_widths();
    static constexpr char kMagic[] = "VGG19F32";

private:
    struct Conv {
        int in_channels;
        int out_channels;
        std::vector<float> weight;  // out × in × 3 × 3
        std::vector<float> bias;
    };
    std::vector<Conv> convs_;
};

/// Builds a provider by config name ("synthetic" or "vgg19").
std::unique_ptr<FeatureProvider> make_feature_provider(const std::string& name,
                                                       const std::filesystem::path& weights_path = {});

/// Hadamard product D∘V broadcast over channels.
FeatureMap mask_features(const FeatureMap& features, const SaliencyMap& saliency);

enum class MissingSaliencyPolicy { error, fallback_ones };

/// Reads a grayscale PNG, scales to [0,1] and resizes to height×width.
/// A missing file either throws IoError or yields D ≡ 1 with a warning.
SaliencyMap load_saliency(const std::filesystem::path& path, int height, int width,
                          MissingSaliencyPolicy policy = MissingSaliencyPolicy::error);

} // namespace scops
