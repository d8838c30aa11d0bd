#pragma once

// Collection manifests and the synthetic three-blob dataset.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "scops/core.hpp"
#include "scops/evaluation.hpp"
#include "scops/features.hpp"

namespace scops {

struct ManifestRecord {
    std::string image;                     // relative to the manifest root
    std::optional<std::string> saliency;
    std::optional<std::string> mask;       // binary foreground mask
    std::optional<std::string> parts;      // gt part label map (gray values 0..P)
    std::vector<Point> landmarks;          // normalized
    std::optional<std::array<double, 2>> bbox;  // normalized (height, width)
    std::string split = "train";
};

struct CollectionManifest {
    std::filesystem::path root;
    std::vector<ManifestRecord> records;

    std::vector<const ManifestRecord*> split(const std::string& name) const;
    std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
};

struct ManifestFilters {
    /// Minimum object area as a fraction of the image (bbox area); 0 disables.
    double min_area_fraction = 0.0;
    /// Image stems to drop (e.g. a precomputed occlusion list).
    std::vector<std::string> exclude;
    /// Lexicographically last `test_count` survivors form the test split.
    int test_count = 0;
};

enum class DatasetKind { synthetic, generic };

DatasetKind parse_dataset_kind(const std::string& name);

/// Scans `root`, applies filters and assigns splits. Ordering is
/// lexicographic by image path. Throws Error when nothing survives.
CollectionManifest build_manifest(const std::filesystem::path& root, DatasetKind kind, const ManifestFilters& filters);

/// Line-delimited JSON, one record per line; paths relative to the file's directory.
void save_manifest(const std::filesystem::path& path, const CollectionManifest& manifest);
/// Throws IoError naming the first referenced file that does not exist
/// (saliency files only when `require_saliency`).
CollectionManifest load_manifest(const std::filesystem::path& path, bool require_saliency = true);

/// Everything needed for one image at working resolution.
struct LoadedSample {
    ImageTensor image;
    SaliencyMap saliency;
    std::vector<unsigned char> mask;   // empty if not annotated
    std::vector<int> parts;            // empty if not annotated
    std::vector<Point> landmarks;
    std::optional<std::array<double, 2>> bbox;
    std::string stem;
};

/// With `with_saliency` false the saliency file is not read and D is all ones.
LoadedSample load_sample(const CollectionManifest& manifest, const ManifestRecord& record, int height, int width,
                         MissingSaliencyPolicy policy, bool with_saliency = true);

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticOptions {
    int count = 200;
    int size = 32;
    std::uint64_t seed = 0;
};

/// Canonical blob layout in object coordinates (before the per-image pose).
struct BlobSpec {
    Point center;
    double radius_u;
    double radius_v;
    std::array<double, 3> color;
};
const std::vector<BlobSpec>& synthetic_blobs();

/// Writes images/, saliency/, masks/, parts/ and meta/ under `out_dir`.
void generate_synthetic(const std::filesystem::path& out_dir, const SyntheticOptions& options);

/// Per-image pose stored in meta/<stem>.json.
SimilarityParams read_synthetic_pose(const std::filesystem::path& meta_path);

} // namespace scops
