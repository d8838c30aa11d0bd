#pragma once

// Training loop, inference, evaluation protocols and figure output.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "scops/config.hpp"
#include "scops/dataset.hpp"
#include "scops/dff.hpp"
#include "scops/evaluation.hpp"
#include "scops/features.hpp"
#include "scops/losses.hpp"
#include "scops/model.hpp"

namespace scops {

/// One logged iteration; terms are already multiplied by their weights.
struct LossRecord {
    std::uint64_t iteration = 0;
    double total = 0.0;
    LossComponents weighted;

    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

/// Per-image training data cached at working resolution.
struct TrainingSample {
    ImageTensor image;
    Tensor features;
    Tensor saliency;  // empty when saliency is disabled
};

class Trainer {
public:
    /// Loads the train split of `manifest` and initializes parameters from the seed.
    Trainer(const Config& config, const CollectionManifest& manifest);
    /// Same, with samples already in memory (tests).
    Trainer(const Config& config, std::vector<TrainingSample> samples);

    /// Restores parameters, basis, momentum and iteration; the checkpoint's
    /// config hash must match this trainer's.
    void resume(const Checkpoint& checkpoint);

    /// Runs a single optimization step and returns its losses.
    LossRecord step();

    /// Runs until `train.iterations`, checkpointing into `out_dir` (if set)
    /// and appending to train_log.csv. Returns every step's record.
    std::vector<LossRecord> run(const std::optional<std::filesystem::path>& out_dir);

    Checkpoint checkpoint() const;

    std::uint64_t iteration() const { return iteration_; }
    const SegmentationModel& model() const { return model_; }
    SegmentationModel& model() { return model_; }
    const PartBasis& basis() const { return basis_; }
    const Config& config() const { return config_; }
    const TrainConfig& settings() const { return settings_; }

private:
    void initialize();

    Config config_;
    TrainConfig settings_;
    std::vector<TrainingSample> samples_;
    SegmentationModel model_;
    PartBasis basis_;
    std::vector<std::vector<double>> momentum_;
    std::vector<double> basis_momentum_;
    std::uint64_t iteration_ = 0;
};

/// Writes `checkpoint` atomically, retrying once before giving up.
void write_checkpoint_with_retry(const std::filesystem::path& path, const Checkpoint& checkpoint);

std::vector<LossRecord> read_train_log(const std::filesystem::path& path);

/// Model restored from a checkpoint, with the configuration it was trained under.
struct LoadedModel {
    Config config;
    TrainConfig settings;
    std::unique_ptr<SegmentationModel> model;
    PartBasis basis;
    std::uint64_t iteration = 0;
};

/// With `expected` set, refuses checkpoints trained under a different config.
LoadedModel load_model(const std::filesystem::path& checkpoint_path, const std::optional<Config>& expected = {});

struct Prediction {
    PartResponseMap response;
    PartSegmentation segmentation;
    PartCenters centers;
};

/// Forward pass at the training resolution (the image is resized if needed).
Prediction predict(const SegmentationModel& model, const ImageTensor& image, const TrainConfig& settings);

/// The fixed 12-entry part palette; index 0 is background.
const std::vector<std::array<std::uint8_t, 3>>& part_palette();

struct InferenceOutputs {
    std::filesystem::path labels;
    std::filesystem::path overlay;
    std::filesystem::path centers;
};

/// Writes <stem>_labels.png (indexed, sized like the input), <stem>_overlay.png
/// and <stem>_centers.csv into `out_dir`.
InferenceOutputs infer(const LoadedModel& loaded, const std::filesystem::path& image_path,
                       const std::filesystem::path& out_dir);

/// Protocols: "landmarks", "iou", "purity", "equivariance", or "synthetic" (all four).
std::vector<std::string> expand_protocol(const std::string& protocol);

/// Runs the protocol on the manifest's test split (landmark regressors are
/// fit on the train split). Throws Error listing missing annotations.
std::vector<MetricRow> evaluate_model(const LoadedModel& loaded, const CollectionManifest& manifest,
                                      const std::string& protocol);

/// Same metrics for the DFF baseline, factorizing the test split as one collection.
std::vector<MetricRow> evaluate_dff(const Config& config, const CollectionManifest& manifest,
                                    const std::string& protocol);

/// Mean |c' - T(c)| over images, `transforms` random similarities and parts
/// that are non-empty in both branches.
double equivariance_residual(const SegmentationModel& model, const std::vector<ImageTensor>& images,
                             const TrainConfig& settings, int transforms, std::uint64_t seed);

/// Grid of image / overlay pairs for the first `count` test images.
void write_contact_sheet(const LoadedModel& loaded, const CollectionManifest& manifest, int count,
                         const std::filesystem::path& path);

} // namespace scops
