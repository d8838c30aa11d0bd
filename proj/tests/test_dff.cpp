#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "scops/dataset.hpp"
#include "scops/dff.hpp"
#include "scops/evaluation.hpp"
#include "scops/rng.hpp"

using namespace scops;
namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd random_nonneg(Rng& rng, int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform();
    return m;
}

bool non_increasing(const std::vector<double>& h) {
    for (std::size_t i = 1; i < h.size(); ++i)
        if (h[i] > h[i - 1] * (1.0 + 1e-12)) return false;
    return true;
}

} // namespace

TEST_CASE("exact rank-3 product is recovered") {
    Rng rng(1);
    const Eigen::MatrixXd v = random_nonneg(rng, 200, 3) * random_nonneg(rng, 3, 16);
    NmfOptions o;
    o.parts = 3;
    o.max_iters = 500;
    o.tol = 0.0;
    const NmfResult r = nmf(v, o);
    CHECK(r.residual() < 1e-3);
    CHECK(r.residual_history.size() <= 500);
    CHECK(non_increasing(r.residual_history));
    CHECK(r.coefficients.minCoeff() >= 0.0);
    CHECK(r.basis.minCoeff() >= 0.0);
}

TEST_CASE("rank one is exact") {
    Rng rng(2);
    const Eigen::MatrixXd v = random_nonneg(rng, 50, 1) * random_nonneg(rng, 1, 7);
    NmfOptions o;
    o.parts = 1;
    o.tol = 0.0;
    CHECK(nmf(v, o).residual() < 1e-6);
}

TEST_CASE("residual never increases on random inputs") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(10 + s);
        NmfOptions o;
        o.parts = 1 + static_cast<int>(s % 4);
        o.max_iters = 200;
        o.seed = s;
        o.tol = 0.0;
        CHECK(non_increasing(nmf(random_nonneg(rng, 40, 6), o).residual_history));
    }
}

TEST_CASE("seeded runs repeat and the scale gauge leaves the product alone") {
    Rng rng(3);
    const Eigen::MatrixXd v = random_nonneg(rng, 30, 5);
    NmfOptions o;
    o.parts = 2;
    o.seed = 9;
    const NmfResult a = nmf(v, o), b = nmf(v, o);
    CHECK(a.coefficients == b.coefficients);
    CHECK(a.basis == b.basis);

    Eigen::MatrixXd h = a.coefficients, w = a.basis;
    h.col(0) /= 3.5;
    w.row(0) *= 3.5;
    CHECK((h * w - a.coefficients * a.basis).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("nmf input validation") {
    NmfOptions o;
    o.parts = 4;
    CHECK_THROWS_AS(nmf(Eigen::MatrixXd::Ones(10, 3), o), ConfigError);
    o.parts = 2;
    CHECK_THROWS_AS(nmf(Eigen::MatrixXd::Zero(10, 3), o), ConfigError);
    Eigen::MatrixXd neg = Eigen::MatrixXd::Ones(10, 3);
    neg(2, 1) = -0.5;
    CHECK_THROWS_AS(nmf(neg, o), ConfigError);
}

TEST_CASE("a collection is required and twins segment alike") {
    const SyntheticFeatureProvider provider;
    Rng rng(4);
    Tensor t(3, 12, 12);
    for (double& x : t.values()) x = rng.uniform();
    const ImageTensor image(t);
    DffOptions o;
    o.use_saliency = false;
    o.nmf.parts = 2;
    CHECK_THROWS_WITH_AS(dff_segment({image}, provider, {}, o), doctest::Contains("collection"), Error);
    const DffResult r = dff_segment({image, image}, provider, {}, o);
    REQUIRE(r.segmentations.size() == 2);
    CHECK(r.segmentations[0] == r.segmentations[1]);
    CHECK(r.responses[0].channels() == 3);
}

TEST_CASE("synthetic blobs factor into per-blob parts") {
    const fs::path dir = fs::temp_directory_path() / "scops_dff_blobs";
    fs::remove_all(dir);
    generate_synthetic(dir, {60, 32, 0});
    const CollectionManifest m = build_manifest(dir, DatasetKind::synthetic, {});
    std::vector<ImageTensor> images;
    std::vector<SaliencyMap> saliency;
    std::vector<LoadedSample> samples;
    for (const auto& rec : m.records) {
        samples.push_back(load_sample(m, rec, 32, 32, MissingSaliencyPolicy::error));
        images.push_back(samples.back().image);
        saliency.push_back(samples.back().saliency);
    }
    DffOptions o;
    o.nmf.parts = 3;
    const DffResult r = dff_segment(images, SyntheticFeatureProvider(), saliency, o);

    double iou = 0.0;
    std::vector<std::vector<int>> truth;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        iou += foreground_iou(r.segmentations[i], samples[i].mask);
        truth.push_back(samples[i].parts);
    }
    iou /= static_cast<double>(samples.size());
    CHECK(iou > 0.5);

    // Each part lands on a different blob.
    const PurityResult p = assignment_purity(r.segmentations, truth, 3);
    CHECK(std::set<int>(p.mapping.begin() + 1, p.mapping.end()).size() == 3);
    fs::remove_all(dir);
}
