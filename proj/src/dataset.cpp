#include "scops/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "scops/image_io.hpp"
#include "scops/log.hpp"

namespace scops {

using json = nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void write_json(const std::filesystem::path& path, const json& j) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

std::vector<Point> points_from_json(const json& j) {
    std::vector<Point> out;
    for (const auto& p : j) out.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    return out;
}

json points_to_json(const std::vector<Point>& points) {
    json arr = json::array();
    for (const Point& p : points) arr.push_back({p.u, p.v});
    return arr;
}

std::string rel_path(const std::filesystem::path& p, const std::filesystem::path& root) {
    return std::filesystem::relative(p, root).generic_string();
}

} // namespace

std::vector<const ManifestRecord*> CollectionManifest::split(const std::string& name) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
        if (r.split == name) out.push_back(&r);
    return out;
}

DatasetKind parse_dataset_kind(const std::string& name) {
    if (name == "synthetic") return DatasetKind::synthetic;
    if (name == "generic") return DatasetKind::generic;
    throw ConfigError("unknown dataset kind '" + name + "' (expected synthetic or generic)");
}

CollectionManifest build_manifest(const std::filesystem::path& root, DatasetKind kind, const ManifestFilters& filters) {
    const auto images_dir = root / "images";
    if (!std::filesystem::is_directory(images_dir)) throw IoError("no images/ directory under " + root.string());
    std::vector<std::filesystem::path> images;
    for (const auto& entry : std::filesystem::directory_iterator(images_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") images.push_back(entry.path());
    }
    std::sort(images.begin(), images.end());

    const std::set<std::string> excluded(filters.exclude.begin(), filters.exclude.end());
    const char* annotation_dir = kind == DatasetKind::synthetic ? "meta" : "annotations";

    CollectionManifest manifest;
    manifest.root = root;
    int dropped_area = 0, dropped_excluded = 0;
    for (const auto& path : images) {
        const std::string stem = path.stem().string();
        if (excluded.count(stem)) {
            ++dropped_excluded;
            continue;
        }
        ManifestRecord rec;
        rec.image = rel_path(path, root);
        const auto sal = root / "saliency" / (stem + ".png");
        if (std::filesystem::exists(sal)) rec.saliency = rel_path(sal, root);
        const auto mask = root / "masks" / (stem + ".png");
        if (std::filesystem::exists(mask)) rec.mask = rel_path(mask, root);
        const auto parts = root / "parts" / (stem + ".png");
        if (std::filesystem::exists(parts)) rec.parts = rel_path(parts, root);
        const auto ann = root / annotation_dir / (stem + ".json");
        if (std::filesystem::exists(ann)) {
            const json j = read_json(ann);
            if (j.contains("landmarks")) rec.landmarks = points_from_json(j["landmarks"]);
            if (j.contains("bbox")) rec.bbox = std::array<double, 2>{j["bbox"].at(0).get<double>(), j["bbox"].at(1).get<double>()};
        }
        if (filters.min_area_fraction > 0.0) {
            const double area = rec.bbox ? (*rec.bbox)[0] * (*rec.bbox)[1] : 0.0;
            if (area < filters.min_area_fraction) {
                ++dropped_area;
                continue;
            }
        }
        manifest.records.push_back(std::move(rec));
    }
    log_info("manifest: " + std::to_string(images.size()) + " images found, " + std::to_string(dropped_excluded) +
             " excluded by list, " + std::to_string(dropped_area) + " below area fraction " +
             std::to_string(filters.min_area_fraction) + ", " + std::to_string(manifest.records.size()) + " kept");
    if (manifest.records.empty()) {
        throw Error("no images survive the manifest filters (" + std::to_string(images.size()) + " found, " +
                    std::to_string(dropped_excluded) + " excluded, " + std::to_string(dropped_area) +
                    " below min area fraction " + std::to_string(filters.min_area_fraction) + ")");
    }
    const int n = static_cast<int>(manifest.records.size());
    if (filters.test_count < 0 || filters.test_count >= n) {
        throw ConfigError("test split of " + std::to_string(filters.test_count) + " leaves no training images");
    }
    for (int i = n - filters.test_count; i < n; ++i) manifest.records[i].split = "test";
    return manifest;
}

void save_manifest(const std::filesystem::path& path, const CollectionManifest& manifest) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    auto rebase = [&](const std::string& rel) { return rel_path(manifest.root / rel, base); };
    for (const auto& r : manifest.records) {
        json j;
        j["image"] = rebase(r.image);
        if (r.saliency) j["saliency"] = rebase(*r.saliency);
        if (r.mask) j["mask"] = rebase(*r.mask);
        if (r.parts) j["parts"] = rebase(*r.parts);
        if (!r.landmarks.empty()) j["landmarks"] = points_to_json(r.landmarks);
        if (r.bbox) j["bbox"] = {(*r.bbox)[0], (*r.bbox)[1]};
        j["split"] = r.split;
        os << j.dump() << '\n';
    }
}

CollectionManifest load_manifest(const std::filesystem::path& path, bool require_saliency) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read manifest " + path.string());
    CollectionManifest m;
    m.root = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    std::string line;
    int number = 0;
    while (std::getline(is, line)) {
        ++number;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
        ManifestRecord r;
        r.image = j.at("image").get<std::string>();
        if (j.contains("saliency")) r.saliency = j["saliency"].get<std::string>();
        if (j.contains("mask")) r.mask = j["mask"].get<std::string>();
        if (j.contains("parts")) r.parts = j["parts"].get<std::string>();
        if (j.contains("landmarks")) r.landmarks = points_from_json(j["landmarks"]);
        if (j.contains("bbox")) r.bbox = std::array<double, 2>{j["bbox"].at(0).get<double>(), j["bbox"].at(1).get<double>()};
        if (j.contains("split")) r.split = j["split"].get<std::string>();
        m.records.push_back(std::move(r));
    }
    // Eager validation of referenced files.
    for (const auto& r : m.records) {
        if (!std::filesystem::exists(m.resolve(r.image))) throw IoError("manifest references missing image " + r.image);
        if (require_saliency) {
            const std::string sal = r.saliency.value_or("saliency/" + std::filesystem::path(r.image).stem().string() + ".png");
            if (!std::filesystem::exists(m.resolve(sal))) throw IoError("missing saliency map " + sal);
        }
        for (const auto* opt : {&r.mask, &r.parts}) {
            if (*opt && !std::filesystem::exists(m.resolve(**opt))) throw IoError("manifest references missing file " + **opt);
        }
    }
    return m;
}

LoadedSample load_sample(const CollectionManifest& manifest, const ManifestRecord& record, int height, int width,
                         MissingSaliencyPolicy policy, bool with_saliency) {
    LoadedSample s;
    s.stem = std::filesystem::path(record.image).stem().string();
    ImageTensor raw = load_image(manifest.resolve(record.image));
    s.image.pixels = resize_bilinear(raw.pixels, height, width);
    for (double& v : s.image.pixels.values()) v = std::clamp(v, 0.0, 1.0);
    const std::string sal = record.saliency.value_or("saliency/" + s.stem + ".png");
    s.saliency = with_saliency ? load_saliency(manifest.resolve(sal), height, width, policy)
                               : SaliencyMap::ones(height, width);
    if (record.mask) {
        const Raster r = read_png(manifest.resolve(*record.mask));
        std::vector<int> labels(static_cast<std::size_t>(r.height) * r.width);
        for (std::size_t p = 0; p < labels.size(); ++p) labels[p] = r.pixels[p * r.channels] > 127 ? 1 : 0;
        const auto resized = resize_nearest(labels, r.height, r.width, height, width);
        s.mask.assign(resized.begin(), resized.end());
    }
    if (record.parts) {
        const Raster r = read_png(manifest.resolve(*record.parts), true);
        std::vector<int> labels(static_cast<std::size_t>(r.height) * r.width);
        for (std::size_t p = 0; p < labels.size(); ++p) labels[p] = r.pixels[p * r.channels];
        s.parts = resize_nearest(labels, r.height, r.width, height, width);
    }
    s.landmarks = record.landmarks;
    s.bbox = record.bbox;
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic generator

const std::vector<BlobSpec>& synthetic_blobs() {
    static const std::vector<BlobSpec> blobs{
        {{0.36, 0.50}, 0.11, 0.16, {0.85, 0.15, 0.15}},
        {{0.60, 0.35}, 0.10, 0.10, {0.15, 0.75, 0.20}},
        {{0.61, 0.65}, 0.08, 0.08, {0.15, 0.25, 0.85}},
    };
    return blobs;
}

namespace {

std::vector<double> gaussian_blur(const std::vector<double>& src, int h, int w, double sigma) {
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) sum += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& k : kernel) k /= sum;
    std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int i = -radius; i <= radius; ++i) {
                const int sx = std::clamp(x + i, 0, w - 1);
                tmp[y * w + x] += kernel[i + radius] * src[y * w + sx];
            }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int i = -radius; i <= radius; ++i) {
                const int sy = std::clamp(y + i, 0, h - 1);
                out[y * w + x] += kernel[i + radius] * tmp[sy * w + x];
            }
    return out;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

} // namespace

void generate_synthetic(const std::filesystem::path& out_dir, const SyntheticOptions& options) {
    if (options.count < 1) throw ConfigError("synthetic count must be positive");
    if (options.size < kMinImageSize) throw ConfigError("synthetic size must be at least 8");
    const int s = options.size, n = s * s;
    const auto& blobs = synthetic_blobs();

    for (int index = 0; index < options.count; ++index) {
        Rng rng = Rng::derive(options.seed, 0x5e7, static_cast<std::uint64_t>(index));
        std::ostringstream name;
        name << "img_" << std::setw(4) << std::setfill('0') << index;
        const std::string stem = name.str();

        SimilarityParams pose;
        pose.rotation = rng.uniform(-30.0, 30.0) * kPi / 180.0;
        pose.scale = rng.uniform(0.85, 1.15);
        pose.shift_u = rng.uniform(-0.08, 0.08);
        pose.shift_v = rng.uniform(-0.08, 0.08);
        const SpatialTransform transform = SpatialTransform::similarity(pose);

        // Textured background: gray base, faint tint and a few low-frequency waves.
        const double base = rng.uniform(0.35, 0.65);
        double tint[3];
        for (double& t : tint) t = rng.uniform(-0.05, 0.05);
        struct Wave {
            double fu, fv, phase, amp;
        };
        std::vector<Wave> waves;
        for (int i = 0; i < 3; ++i) {
            waves.push_back({rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0), rng.uniform(0.0, 2 * kPi), rng.uniform(0.03, 0.08)});
        }

        Tensor pixels(3, s, s);
        std::vector<int> labels(n, 0);
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                const Point p{grid_coordinate(y, s), grid_coordinate(x, s)};
                double texture = 0.0;
                for (const Wave& wv : waves) texture += wv.amp * std::sin(2 * kPi * (wv.fu * p.u + wv.fv * p.v) + wv.phase);
                for (int c = 0; c < 3; ++c) pixels(c, y, x) = base + tint[c] + texture;
                const Point q = transform.apply_inverse(p);
                for (std::size_t b = 0; b < blobs.size(); ++b) {
                    const double du = (q.u - blobs[b].center.u) / blobs[b].radius_u;
                    const double dv = (q.v - blobs[b].center.v) / blobs[b].radius_v;
                    if (du * du + dv * dv <= 1.0) {
                        labels[y * s + x] = static_cast<int>(b) + 1;
                        for (int c = 0; c < 3; ++c) pixels(c, y, x) = blobs[b].color[c];
                    }
                }
            }
        }
        for (double& v : pixels.values()) v = std::clamp(v + 0.02 * rng.normal(), 0.0, 1.0);
        ColorJitter jitter;
        jitter.brightness = rng.uniform(-0.1, 0.1);
        jitter.saturation = rng.uniform(-0.1, 0.1);
        jitter.hue = rng.uniform(-0.02, 0.02);
        const ImageTensor image = jitter.apply(ImageTensor(std::move(pixels)));

        std::vector<double> fg(n);
        std::vector<std::uint8_t> mask_px(n), parts_px(n), sal_px(n);
        int min_y = s, max_y = -1, min_x = s, max_x = -1, area = 0;
        for (int p = 0; p < n; ++p) {
            const bool on = labels[p] > 0;
            fg[p] = on ? 1.0 : 0.0;
            mask_px[p] = on ? 255 : 0;
            parts_px[p] = static_cast<std::uint8_t>(labels[p]);
            if (on) {
                ++area;
                min_y = std::min(min_y, p / s);
                max_y = std::max(max_y, p / s);
                min_x = std::min(min_x, p % s);
                max_x = std::max(max_x, p % s);
            }
        }
        const auto blurred = gaussian_blur(fg, s, s, 0.5);
        for (int p = 0; p < n; ++p) sal_px[p] = to_byte(blurred[p]);

        save_image(out_dir / "images" / (stem + ".png"), image);
        write_png_gray(out_dir / "saliency" / (stem + ".png"), s, s, sal_px);
        write_png_gray(out_dir / "masks" / (stem + ".png"), s, s, mask_px);
        write_png_gray(out_dir / "parts" / (stem + ".png"), s, s, parts_px);

        std::vector<Point> canonical, landmarks;
        for (const auto& b : blobs) {
            canonical.push_back(b.center);
            landmarks.push_back(transform.apply(b.center));
        }
        json meta;
        meta["pose"] = {{"rotation", pose.rotation}, {"scale", pose.scale}, {"shift_u", pose.shift_u}, {"shift_v", pose.shift_v}};
        meta["canonical"] = points_to_json(canonical);
        meta["landmarks"] = points_to_json(landmarks);
        meta["bbox"] = {max_y >= 0 ? static_cast<double>(max_y - min_y + 1) / s : 0.0,
                        max_x >= 0 ? static_cast<double>(max_x - min_x + 1) / s : 0.0};
        meta["area_fraction"] = static_cast<double>(area) / n;
        write_json(out_dir / "meta" / (stem + ".json"), meta);
    }
}

SimilarityParams read_synthetic_pose(const std::filesystem::path& meta_path) {
    const json j = read_json(meta_path);
    const json& p = j.at("pose");
    return {p.at("rotation").get<double>(), p.at("scale").get<double>(), p.at("shift_u").get<double>(),
            p.at("shift_v").get<double>()};
}

} // namespace scops
