#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scops/core.hpp"

namespace scops {

/// Named parameter array; `shape` is informational (row-major).
struct Blob {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    friend bool operator==(const Blob&, const Blob&) = default;
};

struct ModelConfig {
    int parts = 3;
    int width = 16;
    /// One 3×3 atrous convolution + ReLU per entry, followed by a 1×1
    /// classifier to K+1 channels and a channel softmax.
    std::vector<int> dilations{1, 2, 4};
    std::uint64_t init_seed = 0;
};

/// Tiny fully convolutional part-segmentation network. Output stride is 1,
/// so responses come out at input resolution without upsampling.
class SegmentationModel {
public:
    explicit SegmentationModel(const ModelConfig& config);

    int parts() const { return config_.parts; }
    const ModelConfig& config() const { return config_; }
    /// Smallest accepted input side.
    int min_input_size() const { return kMinImageSize; }

    struct Activations {
        std::vector<Tensor> columns;   // im2col buffer per layer
        std::vector<Tensor> outputs;   // post-activation output per layer (last: logits)
        PartResponseMap response;
        int height = 0;
        int width = 0;
    };

    PartResponseMap forward(const ImageTensor& image) const;
    PartResponseMap forward(const ImageTensor& image, Activations& cache) const;
    std::vector<PartResponseMap> forward(const std::vector<ImageTensor>& batch) const;

    /// Accumulates parameter gradients for dL/dR into `grads` (same layout as
    /// `parameters()`).
    void backward(const Activations& cache, const Tensor& grad_response, std::vector<std::vector<double>>& grads) const;

    std::vector<Blob>& parameters() { return params_; }
    const std::vector<Blob>& parameters() const { return params_; }
    std::vector<std::vector<double>> zero_gradients() const;

    /// Copies values from blobs of matching name and size; throws on mismatch.
    void load_parameters(const std::vector<Blob>& blobs);

private:
    struct Layer {
        int in_channels;
        int out_channels;
        int kernel;
        int dilation;
        bool relu;
        int weight_index;
        int bias_index;
    };

    void im2col(const Tensor& input, const Layer& layer, Tensor& columns) const;
    void col2im(const Tensor& columns, const Layer& layer, Tensor& grad_input) const;

    ModelConfig config_;
    std::vector<Layer> layers_;
    std::vector<Blob> params_;
};

/// Max-normalize foreground channels, set background to 0.1.
NormalizedResponseMap normalize_responses(const PartResponseMap& r);
/// Same rule applied to any (K+1)-channel non-negative tensor (channel 0 ignored).
NormalizedResponseMap normalize_responses(const Tensor& r);

inline constexpr double kBackgroundFloor = 0.1;
/// Initial bias of the background logit in the output layer.
inline constexpr double kBackgroundLogitInit = 3.0;

/// Per-pixel argmax, ties to the lowest channel index.
PartSegmentation segment(const NormalizedResponseMap& normalized);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[] = "SCOPS1";

struct Checkpoint {
    std::string config_text;
    std::uint64_t config_hash = 0;
    std::uint64_t iteration = 0;
    std::vector<Blob> model;
    Blob part_basis;                // shape {K, C}
    std::vector<Blob> optimizer;    // momentum buffers

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws IoError on a malformed archive.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// As above; throws ConfigError if the stored hash differs from `expected_hash`.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash);

} // namespace scops
