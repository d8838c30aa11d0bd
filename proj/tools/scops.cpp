// Command-line front end: dataset preparation, training, inference,
// evaluation, the DFF baseline and contact sheets.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scops/config.hpp"
#include "scops/dataset.hpp"
#include "scops/log.hpp"
#include "scops/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::vector<std::string> overrides;
};

scops::Config layered_config(const Globals& g) {
    scops::Config c = scops::Config::defaults();
    if (!g.config_path.empty()) c.merge_file(g.config_path);
    if (g.seed) c.set("train.seed", std::to_string(*g.seed));
    for (const auto& o : g.overrides) c.set(o);
    return c;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw scops::IoError("cannot read " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) out.push_back(line);
    return out;
}

void print_rows(const std::vector<scops::MetricRow>& rows) {
    for (const auto& r : rows) {
        std::cout << r.split << ' ' << r.method << " K=" << r.parts << ' ' << r.metric << " = " << r.value << " ("
                  << r.n_images << " images, " << r.n_excluded << " excluded)\n";
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised co-part segmentation"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config_path, "Config file of key=value lines")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Overrides train.seed (and the generator seed)");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--set", g.overrides, "Extra key=value override, repeatable");

    // generate-synthetic
    auto* gen = app.add_subcommand("generate-synthetic", "Write the three-blob dataset");
    scops::SyntheticOptions synth;
    gen->add_option("-n,--count", synth.count, "Number of images");
    gen->add_option("--size", synth.size, "Image side in pixels");

    // build-manifest
    auto* manifest_cmd = app.add_subcommand("build-manifest", "Scan a dataset directory into manifest.jsonl");
    std::string root, kind = "synthetic", exclude_file, manifest_out;
    scops::ManifestFilters filters;
    manifest_cmd->add_option("--root", root, "Dataset directory holding images/")->required();
    manifest_cmd->add_option("--kind", kind, "synthetic or generic");
    manifest_cmd->add_option("--min-area", filters.min_area_fraction, "Minimum object bbox area fraction");
    manifest_cmd->add_option("--exclude", exclude_file, "File of image stems to drop");
    manifest_cmd->add_option("--test-count", filters.test_count, "Size of the test split");
    manifest_cmd->add_option("--manifest", manifest_out, "Output path (default <root>/manifest.jsonl)");

    // train
    auto* train = app.add_subcommand("train", "Train a segmentation network");
    std::string manifest_path, resume;
    train->add_option("--manifest", manifest_path, "manifest.jsonl")->required();
    train->add_option("--resume", resume, "Checkpoint to continue from");

    // infer
    auto* infer = app.add_subcommand("infer", "Segment images with a checkpoint");
    std::string checkpoint;
    std::vector<std::string> images;
    infer->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    infer->add_option("images", images, "Image files")->required();

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Metrics for a checkpoint on a manifest");
    std::string protocol = "synthetic";
    evaluate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    evaluate->add_option("--manifest", manifest_path, "manifest.jsonl")->required();
    evaluate->add_option("--protocol", protocol, "landmarks, iou, purity, equivariance or synthetic");

    // dff
    auto* dff = app.add_subcommand("dff", "Deep feature factorization baseline metrics");
    dff->add_option("--manifest", manifest_path, "manifest.jsonl")->required();
    dff->add_option("--protocol", protocol, "landmarks, iou, purity or synthetic");

    // visualize
    auto* visualize = app.add_subcommand("visualize", "Contact sheet of test-split overlays");
    int count = 16;
    visualize->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    visualize->add_option("--manifest", manifest_path, "manifest.jsonl")->required();
    visualize->add_option("--count", count, "Number of images");

    CLI11_PARSE(app, argc, argv);

    try {
        const fs::path out = g.out;
        if (gen->parsed()) {
            if (g.seed) synth.seed = *g.seed;
            scops::generate_synthetic(out, synth);
            std::cout << "wrote " << synth.count << " images to " << out << '\n';
        } else if (manifest_cmd->parsed()) {
            if (!exclude_file.empty()) filters.exclude = read_lines(exclude_file);
            const auto m = scops::build_manifest(root, scops::parse_dataset_kind(kind), filters);
            const fs::path path = manifest_out.empty() ? fs::path(root) / "manifest.jsonl" : fs::path(manifest_out);
            scops::save_manifest(path, m);
            std::cout << "wrote " << m.records.size() << " records to " << path << '\n';
        } else if (train->parsed()) {
            const scops::Config config = layered_config(g);
            const auto m = scops::load_manifest(manifest_path, config.get_bool("saliency.enabled") &&
                                                                   config.get("saliency.policy") == "error");
            scops::Trainer trainer(config, m);
            if (!resume.empty()) trainer.resume(scops::load_checkpoint(resume, config.fingerprint()));
            const auto records = trainer.run(out);
            if (!records.empty()) std::cout << "final loss " << records.back().total << '\n';
            std::cout << "checkpoint " << (out / "latest.scops") << '\n';
        } else if (infer->parsed()) {
            std::optional<scops::Config> expected;
            if (!g.config_path.empty() || !g.overrides.empty() || g.seed) expected = layered_config(g);
            const auto loaded = scops::load_model(checkpoint, expected);
            for (const auto& image : images) {
                const auto files = scops::infer(loaded, image, out);
                std::cout << files.labels.string() << '\n'
                          << files.overlay.string() << '\n'
                          << files.centers.string() << '\n';
            }
        } else if (evaluate->parsed()) {
            const auto loaded = scops::load_model(checkpoint);
            const auto m = scops::load_manifest(manifest_path, false);
            const auto rows = scops::evaluate_model(loaded, m, protocol);
            scops::write_metrics_csv(out / "metrics.csv", rows);
            print_rows(rows);
        } else if (dff->parsed()) {
            const scops::Config config = layered_config(g);
            const auto m = scops::load_manifest(manifest_path, config.get_bool("dff.use_saliency"));
            const auto rows = scops::evaluate_dff(config, m, protocol);
            scops::write_metrics_csv(out / "metrics_dff.csv", rows);
            print_rows(rows);
        } else if (visualize->parsed()) {
            const auto loaded = scops::load_model(checkpoint);
            const auto m = scops::load_manifest(manifest_path, false);
            const fs::path path = out / "contact_sheet.png";
            scops::write_contact_sheet(loaded, m, count, path);
            std::cout << "wrote " << path << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
