#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "scops/image_io.hpp"
#include "scops/pipeline.hpp"

using namespace scops;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("scops_pipeline_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// A small synthetic collection shared by the training tests.
const fs::path& tiny_collection() {
    static const fs::path dir = [] {
        const fs::path d = fresh_dir("tiny");
        generate_synthetic(d, {12, 16, 7});
        ManifestFilters f;
        f.test_count = 4;
        save_manifest(d / "manifest.jsonl", build_manifest(d, DatasetKind::synthetic, f));
        return d;
    }();
    return dir;
}

Config tiny_config() {
    Config c = Config::defaults();
    c.merge_text("model.parts = 2\n"
                 "model.width = 4\n"
                 "model.dilations = 1,2\n"
                 "data.height = 16\n"
                 "data.width = 16\n"
                 "train.batch_size = 2\n"
                 "train.iterations = 6\n"
                 "train.lr = 0.01\n"
                 "train.basis_lr = 0.002\n"
                 "train.checkpoint_every = 3\n"
                 "train.log_every = 0\n"
                 "eqv.tps_grid = 3\n");
    return c;
}

CollectionManifest tiny_manifest() { return load_manifest(tiny_collection() / "manifest.jsonl"); }

void write_generic_image(const fs::path& root, const std::string& stem, double h, double w) {
    fs::create_directories(root / "images");
    fs::create_directories(root / "annotations");
    write_png_rgb(root / "images" / (stem + ".png"), 8, 8, std::vector<std::uint8_t>(8 * 8 * 3, 90));
    nlohmann::json j;
    j["bbox"] = {h, w};
    j["landmarks"] = {{0.3, 0.3}, {0.3, 0.7}};
    std::ofstream(root / "annotations" / (stem + ".json")) << j.dump();
}

} // namespace

// --- manifests and the generator -------------------------------------------

TEST_CASE("synthetic manifest keeps every image in path order") {
    const CollectionManifest m = tiny_manifest();
    REQUIRE(m.records.size() == 12);
    CHECK(m.split("test").size() == 4);
    CHECK(m.split("train").size() == 8);
    for (std::size_t i = 1; i < m.records.size(); ++i) CHECK(m.records[i - 1].image < m.records[i].image);
    for (const auto& r : m.records) {
        CHECK(r.saliency.has_value());
        CHECK(r.mask.has_value());
        CHECK(r.parts.has_value());
        CHECK(r.landmarks.size() == 3);
    }
}

TEST_CASE("area filter keeps exactly the qualifying fixtures") {
    const fs::path root = fresh_dir("area");
    // Box areas: 0.36, 0.25, 0.32, 0.09, 0.30 (exactly at the threshold).
    write_generic_image(root, "a", 0.6, 0.6);
    write_generic_image(root, "b", 0.5, 0.5);
    write_generic_image(root, "c", 0.4, 0.8);
    write_generic_image(root, "d", 0.3, 0.3);
    write_generic_image(root, "e", 0.5, 0.6);
    ManifestFilters f;
    f.min_area_fraction = 0.3;
    const CollectionManifest m = build_manifest(root, DatasetKind::generic, f);
    std::vector<std::string> kept;
    for (const auto& r : m.records) kept.push_back(fs::path(r.image).stem().string());
    CHECK(kept == std::vector<std::string>{"a", "c", "e"});

    f.exclude = {"a", "c", "e"};
    CHECK_THROWS_WITH_AS(build_manifest(root, DatasetKind::generic, f), doctest::Contains("excluded"), Error);
}

TEST_CASE("missing saliency is reported by name") {
    const fs::path root = fresh_dir("nosal");
    generate_synthetic(root, {3, 16, 1});
    save_manifest(root / "manifest.jsonl", build_manifest(root, DatasetKind::synthetic, {}));
    fs::remove(root / "saliency" / "img_0001.png");
    CHECK_THROWS_WITH_AS(load_manifest(root / "manifest.jsonl", true), doctest::Contains("img_0001"), IoError);
    CHECK_NOTHROW(load_manifest(root / "manifest.jsonl", false));
}

TEST_CASE("generator is bit-identical per seed") {
    const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
    generate_synthetic(a, {5, 24, 3});
    generate_synthetic(b, {5, 24, 3});
    int files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        ++files;
        CHECK(slurp(e.path()) == slurp(b / fs::relative(e.path(), a)));
    }
    CHECK(files == 5 * 5);
}

TEST_CASE("stored pose maps canonical blob centers onto the landmarks") {
    const CollectionManifest m = tiny_manifest();
    for (const auto& r : m.records) {
        const fs::path meta = m.root / "meta" / (fs::path(r.image).stem().string() + ".json");
        const auto pose = SpatialTransform::similarity(read_synthetic_pose(meta));
        for (std::size_t b = 0; b < synthetic_blobs().size(); ++b) {
            const Point p = pose.apply(synthetic_blobs()[b].center);
            CHECK(std::abs(p.u - r.landmarks[b].u) < 1e-9);
            CHECK(std::abs(p.v - r.landmarks[b].v) < 1e-9);
        }
        const LoadedSample s = load_sample(m, r, 16, 16, MissingSaliencyPolicy::error);
        CHECK(mask_iou(s.mask, s.mask) == 1.0);
    }
}

// --- training -----------------------------------------------------------------

TEST_CASE("zero weights leave every parameter untouched") {
    Config c = tiny_config();
    for (const char* key : {"loss.con", "loss.eqv", "loss.sc", "loss.ot"}) c.set(key, "0");
    Trainer t(c, tiny_manifest());
    const auto before = t.model().parameters();
    const auto basis = t.basis().values;
    for (int i = 0; i < 3; ++i) CHECK(t.step().total == 0.0);
    CHECK(t.model().parameters() == before);
    CHECK(t.basis().values == basis);
}

TEST_CASE("training is reproducible and resumes exactly") {
    const Config c = tiny_config();
    const fs::path out = fresh_dir("resume");
    Trainer full(c, tiny_manifest());
    const auto records = full.run(out);
    REQUIRE(records.size() == 6);
    for (const auto& r : records) CHECK(std::isfinite(r.total));

    Trainer again(c, tiny_manifest());
    CHECK(again.run(std::nullopt) == records);

    CHECK(fs::exists(out / "checkpoint_000003.scops"));
    CHECK(fs::exists(out / "latest.scops"));
    CHECK(read_train_log(out / "train_log.csv") == records);

    Trainer resumed(c, tiny_manifest());
    resumed.resume(load_checkpoint(out / "checkpoint_000003.scops", c.fingerprint()));
    CHECK(resumed.iteration() == 3);
    const auto tail = resumed.run(std::nullopt);
    REQUIRE(tail.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(tail[i] == records[3 + i]);
    CHECK(resumed.checkpoint().model == full.checkpoint().model);

    Config other = c;
    other.set("loss.sc", "50");
    Trainer mismatched(other, tiny_manifest());
    CHECK_THROWS_AS(mismatched.resume(load_checkpoint(out / "latest.scops")), ConfigError);
}

TEST_CASE("a zero-weight term is not computed at all") {
    // With both basis terms off, neither the saliency maps nor the basis they
    // seed can have any influence.
    Config with = tiny_config();
    with.set("loss.sc", "0");
    with.set("loss.ot", "0");
    Config without = with;
    without.set("saliency.enabled", "false");
    Trainer a(with, tiny_manifest()), b(without, tiny_manifest());
    for (int i = 0; i < 3; ++i) CHECK(a.step() == b.step());
    CHECK(a.model().parameters() == b.model().parameters());
}

// --- inference and evaluation ---------------------------------------------------

TEST_CASE("inference files round-trip the segmentation") {
    const fs::path out = fresh_dir("infer");
    Trainer t(tiny_config(), tiny_manifest());
    t.run(out);

    // Loadable without the training data around.
    const fs::path ckpt = out / "saved.scops";
    fs::copy_file(out / "latest.scops", ckpt);
    const LoadedModel loaded = load_model(ckpt, tiny_config());
    Config other = tiny_config();
    other.set("model.width", "5");
    CHECK_THROWS_AS(load_model(ckpt, other), ConfigError);

    const CollectionManifest m = tiny_manifest();
    const fs::path image_path = m.resolve(m.records.front().image);
    const InferenceOutputs files = infer(loaded, image_path, out / "pred");
    CHECK(files.labels.filename() == "img_0000_labels.png");
    CHECK(files.overlay.filename() == "img_0000_overlay.png");
    CHECK(files.centers.filename() == "img_0000_centers.csv");
    CHECK(fs::exists(files.overlay));
    CHECK(fs::exists(files.centers));

    const Raster labels = read_png(files.labels, true);
    const ImageTensor image = load_image(image_path);
    const Prediction p = predict(*loaded.model, image, loaded.settings);
    const PartSegmentation direct = segment(normalize_responses(loaded.model->forward(image)));
    CHECK(p.segmentation == direct);
    REQUIRE(labels.height == 16);
    REQUIRE(labels.width == 16);
    for (int i = 0; i < 16 * 16; ++i) CHECK(static_cast<int>(labels.pixels[i]) == direct.labels[i]);

    // Larger inputs are segmented at training size and scaled back up.
    const fs::path big = out / "big.png";
    save_image(big, ImageTensor(resize_bilinear(image.pixels, 20, 24)));
    const Raster big_labels = read_png(infer(loaded, big, out / "pred").labels, true);
    CHECK(big_labels.height == 20);
    CHECK(big_labels.width == 24);
}

TEST_CASE("evaluation schema and annotation checks") {
    const fs::path out = fresh_dir("eval");
    Trainer t(tiny_config(), tiny_manifest());
    t.run(out);
    const LoadedModel loaded = load_model(out / "latest.scops");
    const CollectionManifest m = tiny_manifest();

    const auto rows = evaluate_model(loaded, m, "iou");
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].metric == "foreground_iou");
    CHECK(rows[0].n_images == 4);

    const auto dff_rows = evaluate_dff(tiny_config(), m, "iou");
    write_metrics_csv(out / "scops.csv", rows);
    write_metrics_csv(out / "dff.csv", dff_rows);
    const auto header = [](const fs::path& p) {
        std::ifstream is(p);
        std::string line;
        std::getline(is, line);
        return line;
    };
    CHECK(header(out / "scops.csv") == header(out / "dff.csv"));
    CHECK(read_metrics_csv(out / "dff.csv")[0].method == "dff");

    CollectionManifest bare = m;
    for (auto& r : bare.records) {
        r.landmarks.clear();
        r.mask.reset();
    }
    CHECK_THROWS_WITH_AS(evaluate_model(loaded, bare, "iou"), doctest::Contains("mask"), Error);
    CHECK_THROWS_WITH_AS(evaluate_model(loaded, bare, "landmarks"), doctest::Contains("landmarks"), Error);
    CHECK_THROWS_AS(expand_protocol("pck"), ConfigError);
}
