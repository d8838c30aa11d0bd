#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "scops/core.hpp"
#include "scops/features.hpp"
#include "scops/losses.hpp"
#include "scops/model.hpp"

namespace scops {

/// Layered key=value configuration. Later layers override earlier ones;
/// unknown keys are rejected so typos fail loudly.
class Config {
public:
    /// All keys with their built-in defaults.
    static Config defaults();

    /// Parses `key = value` lines; '#' starts a comment.
    void merge_text(const std::string& text, const std::string& origin = "<text>");
    void merge_file(const std::filesystem::path& path);
    /// Applies a single "key=value" override.
    void set(const std::string& assignment);
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    int get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;

    /// Canonical sorted "key=value" lines.
    std::string to_text() const;
    static Config from_text(const std::string& text);

    /// FNV-1a over the canonical text of every key that affects the training
    /// trajectory (iteration count and checkpoint cadence are excluded).
    std::uint64_t fingerprint() const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

/// Typed view of the training-relevant keys.
struct TrainConfig {
    ModelConfig model;
    LossWeights weights;
    TransformRanges ranges;
    CoordinateMode coordinates = CoordinateMode::normalized;
    int height = 128;
    int width = 128;
    int batch_size = 16;
    int iterations = 2000;
    double learning_rate = 0.05;
    double basis_learning_rate = 0.5;
    double momentum = 0.9;
    double clip_norm = 0.0;
    int checkpoint_every = 500;
    std::uint64_t seed = 0;
    bool transformed_branch_losses = false;
    int equivariance_branches = 1;
    std::string feature_provider = "synthetic";
    std::string weights_path;
    bool use_saliency = true;
    MissingSaliencyPolicy saliency_policy = MissingSaliencyPolicy::error;

    static TrainConfig from(const Config& config);
};

} // namespace scops
