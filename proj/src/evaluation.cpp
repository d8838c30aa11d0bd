#include "scops/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace scops {

namespace {

Eigen::MatrixXd design_matrix(const Eigen::MatrixXd& centers, bool bias) {
    Eigen::MatrixXd x(centers.rows(), centers.cols() + (bias ? 1 : 0));
    x.leftCols(centers.cols()) = centers;
    if (bias) x.col(centers.cols()).setOnes();
    return x;
}

} // namespace

Eigen::MatrixXd RegressorFit::predict(const Eigen::MatrixXd& centers) const {
    return design_matrix(centers, bias) * coefficients;
}

RegressorFit fit_landmark_regressor(const Eigen::MatrixXd& centers, const Eigen::MatrixXd& landmarks, double ridge,
                                    bool bias) {
    const Eigen::Index n = centers.rows(), d = centers.cols();
    if (landmarks.rows() != n) throw DimensionError("centers and landmarks have different image counts");
    if (n <= d + 1) {
        throw Error("landmark regression needs more than 2K+1 = " + std::to_string(d + 1) + " images, got " +
                    std::to_string(n));
    }
    if (!(ridge >= 0.0)) throw ConfigError("ridge must be non-negative");
    if (!centers.allFinite() || !landmarks.allFinite()) throw Error("landmark regression inputs must be finite");

    const Eigen::MatrixXd x = design_matrix(centers, bias);
    // Ridge as extra rows sqrt(eps) * I on the non-bias coefficients.
    Eigen::MatrixXd augmented = Eigen::MatrixXd::Zero(n + d, x.cols());
    augmented.topRows(n) = x;
    augmented.bottomRows(d).leftCols(d) = std::sqrt(ridge) * Eigen::MatrixXd::Identity(d, d);
    Eigen::MatrixXd target = Eigen::MatrixXd::Zero(n + d, landmarks.cols());
    target.topRows(n) = landmarks;

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(augmented);
    if (qr.rank() < augmented.cols()) {
        throw Error("landmark regression design is rank deficient; use ridge > 0");
    }
    RegressorFit fit;
    fit.coefficients = qr.solve(target);
    fit.ridge = ridge;
    fit.bias = bias;
    return fit;
}

double landmark_error(std::span<const Point> predicted, std::span<const Point> truth, const NormalizationSpec& spec) {
    if (predicted.size() != truth.size() || truth.empty()) throw DimensionError("landmark sets differ in size");
    double total = 0.0;
    if (const auto* io = std::get_if<InterOcular>(&spec)) {
        const int n = static_cast<int>(truth.size());
        if (io->left_eye < 0 || io->left_eye >= n || io->right_eye < 0 || io->right_eye >= n) {
            throw DimensionError("eye landmark index out of range");
        }
        const Point a = truth[io->left_eye], b = truth[io->right_eye];
        const double norm = std::hypot(a.u - b.u, a.v - b.v);
        if (!(norm > 0.0)) throw Error("inter-ocular distance is zero");
        for (std::size_t i = 0; i < truth.size(); ++i) {
            total += std::hypot(predicted[i].u - truth[i].u, predicted[i].v - truth[i].v) / norm;
        }
    } else {
        const auto& box = std::get<BoundingBoxNorm>(spec);
        if (!(box.height > 0.0) || !(box.width > 0.0)) throw Error("bounding box normalizer must be positive");
        const double diag = std::hypot(box.height, box.width);
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const double du = predicted[i].u - truth[i].u, dv = predicted[i].v - truth[i].v;
            total += box.diagonal ? std::hypot(du, dv) / diag : std::hypot(du / box.height, dv / box.width);
        }
    }
    return 100.0 * total / static_cast<double>(truth.size());
}

double mask_iou(const std::vector<unsigned char>& a, const std::vector<unsigned char>& b) {
    if (a.size() != b.size()) throw DimensionError("mask sizes differ");
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double foreground_iou(const PartSegmentation& segmentation, const std::vector<unsigned char>& mask) {
    if (mask.size() != segmentation.labels.size()) throw DimensionError("segmentation and mask sizes differ");
    std::vector<unsigned char> fg(mask.size());
    for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = segmentation.labels[i] > 0;
    return mask_iou(fg, mask);
}

PurityResult assignment_purity(const std::vector<PartSegmentation>& predicted,
                               const std::vector<std::vector<int>>& truth_labels, int truth_parts) {
    if (predicted.size() != truth_labels.size()) throw DimensionError("purity needs one gt map per prediction");
    const int k = predicted.empty() ? 0 : predicted.front().parts;
    std::vector<std::vector<long>> counts(k + 1, std::vector<long>(truth_parts + 1, 0));
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const auto& seg = predicted[i];
        if (seg.labels.size() != truth_labels[i].size()) throw DimensionError("purity map sizes differ");
        for (std::size_t p = 0; p < seg.labels.size(); ++p) {
            const int t = truth_labels[i][p];
            if (seg.labels[p] < 0 || seg.labels[p] > k || t < 0 || t > truth_parts) {
                throw DimensionError("label out of range in purity computation");
            }
            ++counts[seg.labels[p]][t];
        }
    }
    PurityResult out;
    out.mapping.assign(k + 1, 0);
    long hits = 0;
    for (int part = 1; part <= k; ++part) {
        int best = 1;
        for (int t = 2; t <= truth_parts; ++t)
            if (counts[part][t] > counts[part][best]) best = t;
        out.mapping[part] = truth_parts >= 1 ? best : 0;
        if (truth_parts >= 1) hits += counts[part][best];
        for (int t = 1; t <= truth_parts; ++t) out.part_pixels += counts[part][t];
    }
    out.purity = out.part_pixels == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(out.part_pixels);
    return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << kMetricsHeader << '\n';
    for (const MetricRow& r : rows) {
        os << r.split << ',' << r.method << ',' << r.parts << ',' << r.metric << ',' << std::setprecision(10) << r.value
           << ',' << r.n_images << ',' << r.n_excluded << '\n';
    }
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    std::string line;
    std::getline(is, line);
    if (line != kMetricsHeader) throw IoError("unexpected metrics header in " + path.string());
    std::vector<MetricRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        MetricRow r;
        std::string field;
        std::getline(ss, r.split, ',');
        std::getline(ss, r.method, ',');
        std::getline(ss, field, ',');
        r.parts = std::stoi(field);
        std::getline(ss, r.metric, ',');
        std::getline(ss, field, ',');
        r.value = std::stod(field);
        std::getline(ss, field, ',');
        r.n_images = std::stoi(field);
        std::getline(ss, field, ',');
        r.n_excluded = std::stoi(field);
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace scops
