#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "scops/losses.hpp"

using namespace scops;

namespace {

// K Gaussian bumps near the middle of a size×size grid, background takes the rest.
Tensor smooth_map(int size, int parts, double sigma_px) {
    Tensor t(parts + 1, size, size);
    const double mid = (size - 1) / 2.0;
    for (int k = 0; k < parts; ++k) {
        const double angle = 2.0 * M_PI * k / parts;
        const double cy = mid + 3.0 * std::cos(angle), cx = mid + 3.0 * std::sin(angle);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                t(k + 1, y, x) = 0.9 / parts * std::exp(-d2 / (2 * sigma_px * sigma_px));
            }
    }
    for (int p = 0; p < size * size; ++p) {
        double fg = 0.0;
        for (int k = 1; k <= parts; ++k) fg += t.channel(k)[p];
        t.channel(0)[p] = 1.0 - fg;
    }
    return t;
}

Tensor impulse_map(int parts, int h, int w) {
    Tensor t(parts + 1, h, w);
    for (int k = 1; k <= parts; ++k) t(k, k % h, (2 * k) % w) = 1.0;
    return t;
}

} // namespace

// --- concentration ---------------------------------------------------------

TEST_CASE("concentration of impulses is zero") {
    CHECK(std::abs(concentration_loss(impulse_map(3, 5, 6)).value) < 1e-12);
}

TEST_CASE("concentration on a two-cell grid") {
    Tensor t(2, 1, 2);
    t(1, 0, 0) = 0.5;
    t(1, 0, 1) = 0.5;
    CHECK(concentration_loss(t).value == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("concentration matches the two-pass oracle") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto in = oracle::random_instance(s);
        CHECK(concentration_loss(in.response).value == doctest::Approx(oracle::concentration(in.response)).epsilon(1e-10));
    }
}

TEST_CASE("concentration ignores integer translation") {
    Tensor a(2, 16, 16), b(2, 16, 16);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 4; ++x) {
            const double v = 1.0 + y * x + 0.5 * y;
            a(1, 3 + y, 2 + x) = v;
            b(1, 9 + y, 10 + x) = v;
        }
    CHECK(std::abs(concentration_loss(a).value - concentration_loss(b).value) < 1e-6);
}

TEST_CASE("concentration grows with a mean-preserving spread") {
    double previous = -1.0;
    for (int d = 0; d <= 7; ++d) {
        Tensor t(2, 1, 16);
        t(1, 0, 7 - d) += 0.5;
        t(1, 0, 8 + d) += 0.5;
        const double value = concentration_loss(t).value;
        CHECK(value >= previous);
        previous = value;
    }
}

TEST_CASE("empty channels are skipped") {
    Tensor t(3, 4, 4);
    t(1, 1, 1) = 1.0;
    t(1, 2, 3) = 1.0;
    const MapLoss l = concentration_loss(t);
    CHECK(l.skipped_parts == 1);
    for (double g : l.grad.channel(2)) CHECK(g == 0.0);
}

// --- equivariance ----------------------------------------------------------

TEST_CASE("equivariance is zero for the identity") {
    Rng rng(1);
    const Tensor r = oracle::random_simplex(rng, 4, 6, 7);
    CHECK(std::abs(equivariance_loss(r, r, SpatialTransform::identity(), 10, 1).value) < 1e-12);
}

TEST_CASE("equivariance vanishes on an exact pixel shift of a smooth map") {
    const Tensor r = smooth_map(32, 3, 2.0);
    SimilarityParams s;
    s.shift_u = 2.0 / 31;
    s.shift_v = -3.0 / 31;
    const auto t = SpatialTransform::similarity(s);
    const Tensor moved = apply_transform_to_map(r, t).warped;
    CHECK(equivariance_loss(r, moved, t, 10, 1).value < 1e-6);
}

TEST_CASE("equivariance is small for band-limited maps under similarities") {
    const Tensor r = smooth_map(32, 3, 2.5);
    Rng rng(2);
    for (int i = 0; i < 10; ++i) {
        SimilarityParams s;
        s.rotation = rng.uniform(-M_PI / 3, M_PI / 3);
        s.scale = rng.uniform(0.8, 1.25);
        s.shift_u = rng.uniform(-0.05, 0.05);
        s.shift_v = rng.uniform(-0.05, 0.05);
        const auto t = SpatialTransform::similarity(s);
        const Tensor warped = apply_transform_to_map(r, t).warped;
        CHECK(equivariance_loss(r, warped, t, 10, 1).value < 1e-3);
    }
}

TEST_CASE("equivariance on the two-pixel Bernoulli toy") {
    Tensor r(2, 1, 2, 0.5), rp(2, 1, 2);
    for (int x = 0; x < 2; ++x) {
        rp(0, 0, x) = 0.6;
        rp(1, 0, x) = 0.4;
    }
    const double expected = 10.0 * (0.6 * std::log(0.6 / 0.5) + 0.4 * std::log(0.4 / 0.5));
    const auto l = equivariance_loss(r, rp, SpatialTransform::identity(), 10, 1);
    CHECK(l.value == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(l.center) < 1e-15);
}

TEST_CASE("equivariance refuses a warp with no valid pixels") {
    Rng rng(3);
    const Tensor r = oracle::random_simplex(rng, 2, 6, 6);
    SimilarityParams s;
    s.shift_u = 5.0;
    CHECK_THROWS_AS(equivariance_loss(r, r, SpatialTransform::similarity(s), 10, 1), Error);
}

TEST_CASE("equivariance rejects mismatched shapes") {
    CHECK_THROWS_AS(equivariance_loss(Tensor(3, 5, 5), Tensor(3, 5, 6), SpatialTransform::identity(), 1, 1),
                    DimensionError);
}

// --- semantic consistency ----------------------------------------------------

TEST_CASE("semantic loss is zero for an exact reconstruction") {
    const auto in = oracle::random_instance(4);
    Tensor v(in.channels, in.height, in.width);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < in.channels; ++c)
                for (int k = 0; k < in.parts; ++k) v(c, y, x) += in.response(k + 1, y, x) * in.basis.rectified(k, c);
    CHECK(semantic_consistency_loss(v, in.response, in.basis, Tensor(1, in.height, in.width, 1.0)).value < 1e-20);
}

TEST_CASE("zero saliency leaves only the null-space term") {
    const auto in = oracle::random_instance(5);
    double expected = 0.0;
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < in.channels; ++c) {
                double s = 0.0;
                for (int k = 0; k < in.parts; ++k) s += in.response(k + 1, y, x) * in.basis.rectified(k, c);
                expected += s * s;
            }
    expected /= in.height * in.width;
    const double got =
        semantic_consistency_loss(in.features, in.response, in.basis, Tensor(1, in.height, in.width, 0.0)).value;
    CHECK(got == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("unit saliency equals the unmasked loss exactly") {
    const auto in = oracle::random_instance(6);
    const double masked =
        semantic_consistency_loss(in.features, in.response, in.basis, Tensor(1, in.height, in.width, 1.0)).value;
    CHECK(masked == semantic_consistency_loss(in.features, in.response, in.basis, Tensor()).value);
}

TEST_CASE("semantic loss matches the brute-force triple loop") {
    for (std::uint64_t s = 100; s < 150; ++s) {
        Rng rng(s);
        Tensor r = oracle::random_simplex(rng, 4, 4, 4);
        Tensor v(5, 4, 4), d(1, 4, 4);
        for (double& x : v.values()) x = rng.uniform(0.0, 2.0);
        for (double& x : d.values()) x = rng.uniform();
        PartBasis w(3, 5);
        for (double& x : w.values) x = rng.uniform(-1.0, 1.0);
        const double got = semantic_consistency_loss(v, r, w, d).value;
        CHECK(std::abs(got - oracle::semantic(v, r, w, d)) < 1e-6);
    }
}

TEST_CASE("semantic loss checks the feature dimension") {
    const auto in = oracle::random_instance(7);
    PartBasis wrong(in.parts, in.channels + 1, 0.5);
    CHECK_THROWS_AS(semantic_consistency_loss(in.features, in.response, wrong, Tensor()), DimensionError);
}

// --- orthonormal -------------------------------------------------------------

TEST_CASE("orthonormal rows cost nothing") {
    PartBasis w(3, 5);
    w.at(0, 0) = 1.0;
    w.at(1, 2) = 2.5;
    w.at(2, 4) = 0.1;
    w.at(2, 1) = -3.0;  // rectified away
    CHECK(orthonormal_loss(w).value == 0.0);
}

TEST_CASE("identical rows give K squared minus K") {
    for (int k = 1; k <= 5; ++k) {
        PartBasis w(k, 4);
        for (int i = 0; i < k; ++i) w.at(i, 1) = 2.0;
        CHECK(orthonormal_loss(w).value == static_cast<double>(k * k - k));
    }
    Rng rng(8);
    PartBasis w(4, 6);
    std::vector<double> row(6);
    for (double& x : row) x = rng.uniform(0.1, 1.0);
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 6; ++c) w.at(i, c) = row[c];
    CHECK(orthonormal_loss(w).value == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("two rows at an angle") {
    for (int i = 0; i <= 10; ++i) {
        const double theta = M_PI / 2 * i / 10.0;
        PartBasis w(2, 2);
        w.at(0, 0) = 1.0;
        w.at(1, 0) = std::cos(theta);
        w.at(1, 1) = std::sin(theta);
        if (i == 10) w.at(1, 0) = 0.0;
        const double c = std::cos(theta);
        CHECK(orthonormal_loss(w).value == doctest::Approx(2 * c * c).scale(1.0).epsilon(1e-12));
    }
}

TEST_CASE("orthonormal loss ignores row scale") {
    const auto in = oracle::random_instance(9);
    PartBasis scaled = in.basis;
    for (int k = 0; k < scaled.parts; ++k)
        for (int c = 0; c < scaled.channels; ++c) scaled.at(k, c) *= 1.0 + k;
    CHECK(orthonormal_loss(scaled).value == doctest::Approx(orthonormal_loss(in.basis).value).epsilon(1e-12));
}

TEST_CASE("zero rows are excluded, all-zero is an error") {
    PartBasis w(3, 3);
    w.at(0, 0) = 1.0;
    w.at(1, 0) = 1.0;
    w.at(2, 1) = -1.0;
    const auto l = orthonormal_loss(w);
    CHECK(l.excluded_rows == 1);
    CHECK(l.value == doctest::Approx(2.0));
    CHECK_THROWS_AS(orthonormal_loss(PartBasis(2, 3, -1.0)), Error);
}

TEST_CASE("orthonormal loss matches the Gram oracle") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto in = oracle::random_instance(s);
        if (orthonormal_loss(in.basis).excluded_rows == in.parts) continue;
        CHECK(orthonormal_loss(in.basis).value == doctest::Approx(oracle::orthonormal(in.basis)).epsilon(1e-10));
    }
}

// --- gradients ---------------------------------------------------------------

TEST_CASE("analytic gradients match central differences") {
    const double tol = 1e-4;
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto in = oracle::random_instance(s);
        INFO("instance " << s << " K=" << in.parts << " C=" << in.channels);

        const MapLoss con = concentration_loss(in.response);
        CHECK(oracle::gradient_error(in.response, con.grad, [&] { return concentration_loss(in.response).value; }) < tol);

        const WarpPlan plan(in.transform, in.height, in.width);
        const auto eqv = equivariance_loss(in.response, in.transformed, in.transform, plan, 10, 1);
        auto eqv_value = [&] { return equivariance_loss(in.response, in.transformed, in.transform, plan, 10, 1).value; };
        CHECK(oracle::gradient_error(in.response, eqv.grad_original, eqv_value) < tol);
        CHECK(oracle::gradient_error(in.transformed, eqv.grad_transformed, eqv_value) < tol);

        const auto sc = semantic_consistency_loss(in.features, in.response, in.basis, in.saliency);
        auto sc_value = [&] { return semantic_consistency_loss(in.features, in.response, in.basis, in.saliency).value; };
        CHECK(oracle::gradient_error(in.response, sc.grad_response, sc_value) < tol);
        CHECK(oracle::gradient_error(in.basis.values, sc.grad_basis, sc_value) < tol);

        if (orthonormal_loss(in.basis).excluded_rows == 0) {
            const auto ot = orthonormal_loss(in.basis);
            CHECK(oracle::gradient_error(in.basis.values, ot.grad_basis,
                                         [&] { return orthonormal_loss(in.basis).value; }) < tol);
        }
    }
}

// --- total -------------------------------------------------------------------

TEST_CASE("total loss weighting") {
    const LossWeights w;
    CHECK(total_loss({1, 1, 1, 1}, w).value == doctest::Approx(110.2).epsilon(1e-12));
    CHECK(total_loss({1, 1, 1, 1}, LossWeights{0, 0, 0, 0}).value == 0.0);
    const auto t = total_loss({2, 3, 5, 7}, w);
    CHECK(t.weighted.concentration == doctest::Approx(0.2));
    CHECK(t.weighted.equivariance == doctest::Approx(30.0));
    CHECK(t.weighted.semantic == doctest::Approx(500.0));
    CHECK(t.weighted.orthonormal == doctest::Approx(0.7));
    CHECK(t.value == doctest::Approx(530.9));
}

TEST_CASE("a non-finite term names itself") {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    try {
        total_loss({0, 0, nan, 0}, LossWeights{});
        FAIL("expected LossError");
    } catch (const LossError& e) {
        CHECK(e.term() == "semantic");
    }
    CHECK_THROWS_AS(total_loss({std::numeric_limits<double>::infinity(), 0, 0, 0}, LossWeights{}), LossError);
}

TEST_CASE("negative weights are rejected") {
    LossWeights w;
    w.orthonormal = -1.0;
    CHECK_THROWS_AS(w.validate(), ConfigError);
}
