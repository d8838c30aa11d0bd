#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "scops/evaluation.hpp"
#include "scops/rng.hpp"

using namespace scops;

namespace {

PartSegmentation seg_from(const std::vector<int>& labels, int h, int w, int parts) {
    PartSegmentation s;
    s.height = h;
    s.width = w;
    s.parts = parts;
    s.labels = labels;
    return s;
}

Eigen::MatrixXd random_matrix(Rng& rng, int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform();
    return m;
}

double mean_row_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return (a - b).rowwise().norm().mean();
}

} // namespace

TEST_CASE("identity regression when centers are the landmarks") {
    Rng rng(1);
    const Eigen::MatrixXd c = random_matrix(rng, 40, 6);
    // Plain least squares is exact; the default ridge shrinks by ~eps/variance.
    CHECK(mean_row_error(fit_landmark_regressor(c, c, 0.0).predict(c), c) < 1e-8);
    CHECK(mean_row_error(fit_landmark_regressor(c, c).predict(c), c) < 1e-6);
}

TEST_CASE("an exact affine relation is recovered on held-out data") {
    Rng rng(2);
    const int k = 4, l = 5;
    const Eigen::MatrixXd a = random_matrix(rng, 2 * k, 2 * l) - Eigen::MatrixXd::Constant(2 * k, 2 * l, 0.5);
    const Eigen::RowVectorXd bias = random_matrix(rng, 1, 2 * l);
    auto truth = [&](const Eigen::MatrixXd& x) {
        Eigen::MatrixXd y = x * a;
        y.rowwise() += bias;
        return y;
    };
    const Eigen::MatrixXd train = random_matrix(rng, 60, 2 * k), test = random_matrix(rng, 30, 2 * k);
    const RegressorFit fit = fit_landmark_regressor(train, truth(train));
    CHECK(mean_row_error(fit.predict(test), truth(test)) < 1e-6);
}

TEST_CASE("regressor preconditions") {
    Rng rng(3);
    CHECK_THROWS_AS(fit_landmark_regressor(random_matrix(rng, 5, 4), random_matrix(rng, 5, 2)), Error);
    Eigen::MatrixXd degenerate = Eigen::MatrixXd::Ones(20, 4);
    CHECK_THROWS_WITH_AS(fit_landmark_regressor(degenerate, random_matrix(rng, 20, 2), 0.0),
                         doctest::Contains("ridge"), Error);
    CHECK_NOTHROW(fit_landmark_regressor(degenerate, random_matrix(rng, 20, 2), 1e-6));
}

TEST_CASE("a bias column never hurts the training fit") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const Eigen::MatrixXd c = random_matrix(rng, 30, 6), y = random_matrix(rng, 30, 4);
        const double with = (fit_landmark_regressor(c, y, 0.0, true).predict(c) - y).squaredNorm();
        const double without = (fit_landmark_regressor(c, y, 0.0, false).predict(c) - y).squaredNorm();
        CHECK(with <= without + 1e-12);
    }
}

TEST_CASE("landmark error normalizations") {
    const std::vector<Point> gt{{0.4, 0.3}, {0.4, 0.7}, {0.6, 0.5}};
    CHECK(landmark_error(gt, gt, InterOcular{0, 1}) == 0.0);

    std::vector<Point> pred = gt;
    pred[2].u += 0.4;  // one landmark off by exactly the inter-ocular distance
    CHECK(landmark_error(pred, gt, InterOcular{0, 1}) == doctest::Approx(100.0 / 3.0));

    const std::vector<Point> eyes_together{{0.5, 0.5}, {0.5, 0.5}, {0.1, 0.1}};
    CHECK_THROWS_AS(landmark_error(eyes_together, eyes_together, InterOcular{0, 1}), Error);

    // Per-axis box normalization before the norm.
    const std::vector<Point> one{{0.5, 0.5}};
    const std::vector<Point> off{{0.5 + 0.1, 0.5 + 0.2}};
    CHECK(landmark_error(off, one, BoundingBoxNorm{0.2, 0.4, false}) == doctest::Approx(100.0 * std::sqrt(0.5)));
    CHECK(landmark_error(off, one, BoundingBoxNorm{0.3, 0.4, true}) == doctest::Approx(100.0 * std::sqrt(0.05) / 0.5));
}

TEST_CASE("inter-ocular error ignores a shared similarity") {
    Rng rng(5);
    std::vector<Point> gt, pred;
    for (int i = 0; i < 6; ++i) {
        gt.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)});
        pred.push_back({gt.back().u + rng.uniform(-0.05, 0.05), gt.back().v + rng.uniform(-0.05, 0.05)});
    }
    const double base = landmark_error(pred, gt, InterOcular{0, 1});
    const auto t = SpatialTransform::similarity({0.7, 0.6, 0.05, -0.1});
    const auto mp = apply_transform_to_points(pred, t), mg = apply_transform_to_points(gt, t);
    CHECK(landmark_error(mp, mg, InterOcular{0, 1}) == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("foreground IoU on constructed masks") {
    const int h = 4, w = 4;
    std::vector<unsigned char> gt(16, 0);
    for (int p = 0; p < 8; ++p) gt[p] = 1;  // top half

    CHECK(foreground_iou(seg_from({1, 1, 1, 1, 2, 2, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0}, h, w, 2), gt) == 1.0);
    CHECK(foreground_iou(seg_from({0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1}, h, w, 1), gt) == 0.0);
    CHECK(foreground_iou(seg_from({1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, h, w, 1), gt) == 0.5);
    // Equal-area masks overlapping in half: |A∩B| = 4, |A∪B| = 12.
    CHECK(foreground_iou(seg_from({0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0}, h, w, 1), gt) ==
          doctest::Approx(1.0 / 3.0));
    CHECK(foreground_iou(seg_from(std::vector<int>(16, 0), h, w, 1), std::vector<unsigned char>(16, 0)) == 1.0);
    CHECK_THROWS_AS(foreground_iou(seg_from(std::vector<int>(16, 0), h, w, 1), std::vector<unsigned char>(15, 0)),
                    DimensionError);
}

TEST_CASE("mask IoU is symmetric and bounded") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<unsigned char> a(30), b(30);
        for (auto& x : a) x = rng.uniform() < 0.4;
        for (auto& x : b) x = rng.uniform() < 0.4;
        const double ab = mask_iou(a, b);
        CHECK(ab == mask_iou(b, a));
        CHECK((ab >= 0.0 && ab <= 1.0));
        CHECK((ab == 1.0) == (a == b));
    }
}

TEST_CASE("purity maps each part by majority") {
    // Part 1 sits mostly on gt 2, part 2 entirely on gt 1, one pixel of
    // part 1 spills on gt 1 and another on background.
    const std::vector<int> pred{1, 1, 1, 1, 2, 2, 0, 1};
    const std::vector<int> truth{2, 2, 2, 1, 1, 1, 0, 0};
    const PurityResult p = assignment_purity({seg_from(pred, 2, 4, 2)}, {truth}, 2);
    CHECK(p.mapping[1] == 2);
    CHECK(p.mapping[2] == 1);
    CHECK(p.part_pixels == 6);
    CHECK(p.purity == doctest::Approx(5.0 / 6.0));
    CHECK(assignment_purity({seg_from(truth, 2, 4, 2)}, {truth}, 2).purity == 1.0);
}

TEST_CASE("metrics CSV round trip") {
    const auto path = std::filesystem::temp_directory_path() / "scops_eval_metrics.csv";
    const std::vector<MetricRow> rows{{"test", "scops", 3, "foreground_iou", 0.625, 50, 0},
                                      {"test", "dff", 3, "landmark_error", 3.25, 48, 2}};
    write_metrics_csv(path, rows);
    const auto back = read_metrics_csv(path);
    REQUIRE(back.size() == 2);
    CHECK(back[1].method == "dff");
    CHECK(back[1].value == 3.25);
    CHECK(back[1].n_excluded == 2);
    std::filesystem::remove(path);
}
