#include "scops/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "scops/image_io.hpp"
#include "scops/log.hpp"

namespace scops {

namespace {

// Stream identifiers for Rng::derive.
constexpr std::uint64_t kBatchStream = 1;
constexpr std::uint64_t kAugmentStream = 2;
constexpr std::uint64_t kBasisStream = 3;
constexpr std::uint64_t kEvalStream = 4;

void axpy(Tensor& y, const Tensor& x, double a) {
    auto& yv = y.values();
    const auto& xv = x.values();
    for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += a * xv[i];
}

std::string checkpoint_name(std::uint64_t iteration) {
    std::ostringstream os;
    os << "checkpoint_" << std::setw(6) << std::setfill('0') << iteration << ".scops";
    return os.str();
}

std::string format_record(const LossRecord& r) {
    std::ostringstream os;
    os << std::setprecision(17) << r.iteration << ',' << r.total << ',' << r.weighted.concentration << ','
       << r.weighted.equivariance << ',' << r.weighted.semantic << ',' << r.weighted.orthonormal;
    return os.str();
}

constexpr char kTrainLogHeader[] = "iteration,total,concentration,equivariance,semantic,orthonormal";

// k-means++ seeding over salient masked feature vectors: each basis row starts
// on an actual part-like feature, far from the rows already chosen.
PartBasis seed_basis(const std::vector<TrainingSample>& samples, int parts, std::uint64_t seed) {
    const int channels = samples.front().features.channels();
    std::vector<std::vector<double>> pool;
    for (const auto& s : samples) {
        const int n = s.features.plane_size();
        for (int p = 0; p < n; ++p) {
            const double d = s.saliency.empty() ? 1.0 : s.saliency.values()[p];
            if (d < 0.5) continue;
            std::vector<double> v(channels);
            for (int c = 0; c < channels; ++c) v[c] = d * s.features.channel(c)[p];
            pool.push_back(std::move(v));
        }
    }
    PartBasis basis(parts, channels);
    Rng rng = Rng::derive(seed, kBasisStream, 0);
    if (pool.empty()) {
        for (double& v : basis.values) v = rng.uniform(0.0, 1.0);
        return basis;
    }
    std::vector<double> nearest(pool.size(), std::numeric_limits<double>::infinity());
    std::size_t pick = rng.below(pool.size());
    for (int k = 0; k < parts; ++k) {
        for (int c = 0; c < channels; ++c) basis.at(k, c) = pool[pick][c];
        double total = 0.0;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            double d2 = 0.0;
            for (int c = 0; c < channels; ++c) d2 += (pool[i][c] - pool[pick][c]) * (pool[i][c] - pool[pick][c]);
            nearest[i] = std::min(nearest[i], d2);
            total += nearest[i];
        }
        double target = rng.uniform() * total;
        for (pick = 0; pick + 1 < pool.size(); ++pick) {
            target -= nearest[pick];
            if (target <= 0.0) break;
        }
    }
    // A few Lloyd rounds pull the seeds onto cluster means.
    std::vector<double> sums(basis.values.size());
    std::vector<int> counts(parts);
    for (int round = 0; round < 25; ++round) {
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (const auto& v : pool) {
            int best = 0;
            double best_d2 = std::numeric_limits<double>::infinity();
            for (int k = 0; k < parts; ++k) {
                double d2 = 0.0;
                for (int c = 0; c < channels; ++c) d2 += (v[c] - basis.at(k, c)) * (v[c] - basis.at(k, c));
                if (d2 < best_d2) best_d2 = d2, best = k;
            }
            ++counts[best];
            for (int c = 0; c < channels; ++c) sums[static_cast<std::size_t>(best) * channels + c] += v[c];
        }
        for (int k = 0; k < parts; ++k) {
            if (counts[k] == 0) continue;
            for (int c = 0; c < channels; ++c) basis.at(k, c) = sums[static_cast<std::size_t>(k) * channels + c] / counts[k];
        }
    }
    return basis;
}

} // namespace

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const Config& config, const CollectionManifest& manifest)
    : config_(config), settings_(TrainConfig::from(config)), model_(settings_.model) {
    const auto train = manifest.split("train");
    if (train.empty()) throw Error("manifest has no training images");
    const auto provider = make_feature_provider(settings_.feature_provider, settings_.weights_path);
    samples_.reserve(train.size());
    for (const ManifestRecord* record : train) {
        LoadedSample s = load_sample(manifest, *record, settings_.height, settings_.width, settings_.saliency_policy,
                                     settings_.use_saliency);
        TrainingSample t;
        t.features = extract_features(*provider, s.image).values;
        if (settings_.use_saliency) t.saliency = s.saliency.values;
        t.image = std::move(s.image);
        samples_.push_back(std::move(t));
    }
    initialize();
}

Trainer::Trainer(const Config& config, std::vector<TrainingSample> samples)
    : config_(config), settings_(TrainConfig::from(config)), samples_(std::move(samples)), model_(settings_.model) {
    if (samples_.empty()) throw Error("trainer needs at least one sample");
    initialize();
}

void Trainer::initialize() {
    const int channels = samples_.front().features.channels();
    for (const auto& s : samples_) {
        if (s.features.channels() != channels) throw DimensionError("training samples disagree on feature channels");
        if (s.image.height() != settings_.height || s.image.width() != settings_.width) {
            throw DimensionError("training sample is not at the configured resolution");
        }
    }
    basis_ = seed_basis(samples_, settings_.model.parts, settings_.seed);
    momentum_ = model_.zero_gradients();
    basis_momentum_.assign(basis_.values.size(), 0.0);
    iteration_ = 0;
}

void Trainer::resume(const Checkpoint& checkpoint) {
    if (checkpoint.config_hash != config_.fingerprint()) {
        throw ConfigError("checkpoint was trained under a different configuration");
    }
    model_.load_parameters(checkpoint.model);
    if (checkpoint.part_basis.data.size() != basis_.values.size()) {
        throw DimensionError("checkpoint part basis has the wrong size");
    }
    basis_.values = checkpoint.part_basis.data;
    const auto& params = model_.parameters();
    if (checkpoint.optimizer.size() != params.size() + 1) throw IoError("checkpoint optimizer state is incomplete");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (checkpoint.optimizer[i].data.size() != momentum_[i].size()) throw IoError("optimizer state size mismatch");
        momentum_[i] = checkpoint.optimizer[i].data;
    }
    basis_momentum_ = checkpoint.optimizer.back().data;
    if (basis_momentum_.size() != basis_.values.size()) throw IoError("optimizer state size mismatch");
    iteration_ = checkpoint.iteration;
}

LossRecord Trainer::step() {
    const LossWeights& w = settings_.weights;
    const int batch = settings_.batch_size;
    const int branches = settings_.equivariance_branches;
    const double inv_b = 1.0 / batch;

    auto grads = model_.zero_gradients();
    std::vector<double> grad_basis(basis_.values.size(), 0.0);
    LossComponents raw;

    Rng batch_rng = Rng::derive(settings_.seed, kBatchStream, iteration_);
    std::unique_ptr<FeatureProvider> provider;

    // Concentration and semantic consistency on one branch; returns into `grad`.
    auto map_losses = [&](const PartResponseMap& r, const Tensor& features, const Tensor& saliency, Tensor& grad,
                          double share) {
        if (w.concentration > 0.0) {
            const MapLoss c = concentration_loss(r.values, settings_.coordinates);
            raw.concentration += share * c.value;
            axpy(grad, c.grad, share * w.concentration);
        }
        if (w.semantic > 0.0) {
            const SemanticLoss s = semantic_consistency_loss(features, r.values, basis_, saliency);
            raw.semantic += share * s.value;
            axpy(grad, s.grad_response, share * w.semantic);
            for (std::size_t i = 0; i < grad_basis.size(); ++i) grad_basis[i] += share * w.semantic * s.grad_basis[i];
        }
    };

    for (int e = 0; e < batch; ++e) {
        const TrainingSample& sample = samples_[batch_rng.below(samples_.size())];
        SegmentationModel::Activations cache;
        const PartResponseMap r = model_.forward(sample.image, cache);
        Tensor grad(r.values.channels(), r.height(), r.width());
        map_losses(r, sample.features, sample.saliency, grad, inv_b);

        if (w.equivariance > 0.0) {
            for (int b = 0; b < branches; ++b) {
                const std::uint64_t index = (iteration_ * batch + e) * branches + b;
                Rng aug_rng = Rng::derive(settings_.seed, kAugmentStream, index);
                const SampledAugmentation aug = sample_transform(aug_rng, settings_.ranges);
                const WarpPlan plan(aug.spatial, r.height(), r.width());
                Tensor warped = plan.apply(sample.image.pixels);
                for (double& v : warped.values()) v = std::clamp(v, 0.0, 1.0);
                const ImageTensor transformed = aug.jitter.apply(ImageTensor(std::move(warped)));

                SegmentationModel::Activations cache_t;
                const PartResponseMap rt = model_.forward(transformed, cache_t);
                const double share = inv_b / branches;
                const EquivarianceLoss eq = equivariance_loss(r.values, rt.values, aug.spatial, plan,
                                                              w.eqv_segmentation, w.eqv_center);
                raw.equivariance += share * eq.value;
                axpy(grad, eq.grad_original, share * w.equivariance);
                Tensor grad_t(rt.values.channels(), rt.height(), rt.width());
                axpy(grad_t, eq.grad_transformed, share * w.equivariance);

                if (settings_.transformed_branch_losses) {
                    if (!provider) provider = make_feature_provider(settings_.feature_provider, settings_.weights_path);
                    const Tensor features_t = extract_features(*provider, transformed).values;
                    Tensor saliency_t;
                    if (!sample.saliency.empty()) saliency_t = plan.apply(sample.saliency);
                    map_losses(rt, features_t, saliency_t, grad_t, share);
                }
                model_.backward(cache_t, grad_t, grads);
            }
        }
        model_.backward(cache, grad, grads);
    }

    if (w.orthonormal > 0.0) {
        const OrthonormalLoss o = orthonormal_loss(basis_);
        raw.orthonormal = o.value;
        for (std::size_t i = 0; i < grad_basis.size(); ++i) grad_basis[i] += w.orthonormal * o.grad_basis[i];
    }

    TotalLoss total;
    try {
        total = total_loss(raw, w);
    } catch (const LossError& e) {
        throw LossError(e.term(), std::string(e.what()) + " at iteration " + std::to_string(iteration_ + 1));
    }

    double scale = 1.0;
    if (settings_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads)
            for (double v : g) sq += v * v;
        for (double v : grad_basis) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > settings_.clip_norm) scale = settings_.clip_norm / norm;
    }

    auto& params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].data.size(); ++j) {
            double& m = momentum_[i][j];
            m = settings_.momentum * m + scale * grads[i][j];
            params[i].data[j] -= settings_.learning_rate * m;
        }
    }
    for (std::size_t j = 0; j < basis_.values.size(); ++j) {
        double& m = basis_momentum_[j];
        m = settings_.momentum * m + scale * grad_basis[j];
        basis_.values[j] -= settings_.basis_learning_rate * m;
    }

    ++iteration_;
    return {iteration_, total.value, total.weighted};
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.config_text = config_.to_text();
    c.config_hash = config_.fingerprint();
    c.iteration = iteration_;
    c.model = model_.parameters();
    c.part_basis = {"part_basis", {basis_.parts, basis_.channels}, basis_.values};
    const auto& params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        c.optimizer.push_back({"momentum/" + params[i].name, params[i].shape, momentum_[i]});
    }
    c.optimizer.push_back({"momentum/part_basis", {basis_.parts, basis_.channels}, basis_momentum_});
    return c;
}

std::vector<LossRecord> Trainer::run(const std::optional<std::filesystem::path>& out_dir) {
    std::ofstream log;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        const auto log_path = *out_dir / "train_log.csv";
        // On resume keep only the rows the checkpoint has already produced.
        std::vector<LossRecord> kept;
        if (iteration_ > 0 && std::filesystem::exists(log_path)) {
            for (const LossRecord& r : read_train_log(log_path))
                if (r.iteration <= iteration_) kept.push_back(r);
        }
        log.open(log_path, std::ios::trunc);
        if (!log) throw IoError("cannot write " + log_path.string());
        log << kTrainLogHeader << '\n';
        for (const LossRecord& r : kept) log << format_record(r) << '\n';
    }
    const int log_every = config_.get_int("train.log_every");
    std::vector<LossRecord> records;
    while (iteration_ < static_cast<std::uint64_t>(settings_.iterations)) {
        const LossRecord r = step();
        records.push_back(r);
        if (log.is_open()) log << format_record(r) << '\n';
        if (log_every > 0 && (r.iteration % log_every == 0 || r.iteration == 1)) {
            std::ostringstream os;
            os << "iter " << r.iteration << " loss " << r.total << " (con " << r.weighted.concentration << ", eqv "
               << r.weighted.equivariance << ", sc " << r.weighted.semantic << ", ot " << r.weighted.orthonormal << ")";
            log_info(os.str());
        }
        if (out_dir && settings_.checkpoint_every > 0 && iteration_ % settings_.checkpoint_every == 0) {
            log.flush();
            const Checkpoint c = checkpoint();
            write_checkpoint_with_retry(*out_dir / checkpoint_name(iteration_), c);
            write_checkpoint_with_retry(*out_dir / "latest.scops", c);
        }
    }
    if (out_dir) write_checkpoint_with_retry(*out_dir / "latest.scops", checkpoint());
    return records;
}

void write_checkpoint_with_retry(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    try {
        save_checkpoint(path, checkpoint);
    } catch (const IoError& first) {
        log_warning(std::string("checkpoint write failed, retrying: ") + first.what());
        try {
            save_checkpoint(path, checkpoint);
        } catch (const IoError& second) {
            throw IoError(std::string("checkpoint write failed after retry: ") + second.what());
        }
    }
}

std::vector<LossRecord> read_train_log(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    std::string line;
    std::getline(is, line);
    if (line != kTrainLogHeader) throw IoError("unexpected train log header in " + path.string());
    std::vector<LossRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[6];
        for (auto& s : f) std::getline(ss, s, ',');
        LossRecord r;
        r.iteration = std::stoull(f[0]);
        r.total = std::stod(f[1]);
        r.weighted = {std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])};
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Inference

LoadedModel load_model(const std::filesystem::path& checkpoint_path, const std::optional<Config>& expected) {
    const Checkpoint c = expected ? load_checkpoint(checkpoint_path, expected->fingerprint())
                                  : load_checkpoint(checkpoint_path);
    LoadedModel m;
    m.config = Config::from_text(c.config_text);
    if (m.config.fingerprint() != c.config_hash) throw IoError("checkpoint config text does not match its hash");
    m.settings = TrainConfig::from(m.config);
    m.model = std::make_unique<SegmentationModel>(m.settings.model);
    m.model->load_parameters(c.model);
    if (c.part_basis.shape.size() != 2) throw IoError("checkpoint part basis has no shape");
    m.basis = PartBasis(static_cast<int>(c.part_basis.shape[0]), static_cast<int>(c.part_basis.shape[1]));
    if (m.basis.values.size() != c.part_basis.data.size()) throw IoError("checkpoint part basis is truncated");
    m.basis.values = c.part_basis.data;
    m.iteration = c.iteration;
    return m;
}

Prediction predict(const SegmentationModel& model, const ImageTensor& image, const TrainConfig& settings) {
    Prediction p;
    if (image.height() == settings.height && image.width() == settings.width) {
        p.response = model.forward(image);
    } else {
        Tensor resized = resize_bilinear(image.pixels, settings.height, settings.width);
        for (double& v : resized.values()) v = std::clamp(v, 0.0, 1.0);
        p.response = model.forward(ImageTensor(std::move(resized)));
    }
    p.segmentation = segment(normalize_responses(p.response));
    p.centers = part_centers(p.response.values, settings.coordinates);
    return p;
}

const std::vector<std::array<std::uint8_t, 3>>& part_palette() {
    static const std::vector<std::array<std::uint8_t, 3>> palette{
        {0, 0, 0},       {230, 25, 75},  {60, 180, 75},   {0, 130, 200}, {255, 225, 25}, {245, 130, 48},
        {145, 30, 180},  {70, 240, 240}, {240, 50, 230},  {210, 245, 60}, {0, 128, 128}, {170, 110, 40},
    };
    return palette;
}

namespace {

std::array<std::uint8_t, 3> part_color(int label) {
    const auto& p = part_palette();
    if (label <= 0) return p[0];
    return p[1 + (label - 1) % (static_cast<int>(p.size()) - 1)];
}

// Image pixels with part colors blended at 50% where a part is present.
std::vector<std::uint8_t> overlay_pixels(const ImageTensor& image, const std::vector<int>& labels) {
    const int h = image.height(), w = image.width();
    std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int label = labels[static_cast<std::size_t>(y) * w + x];
            const auto color = part_color(label);
            for (int c = 0; c < 3; ++c) {
                double v = image.pixels(c, y, x) * 255.0;
                if (label > 0) v = 0.5 * v + 0.5 * color[c];
                out[(static_cast<std::size_t>(y) * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    return out;
}

} // namespace

InferenceOutputs infer(const LoadedModel& loaded, const std::filesystem::path& image_path,
                       const std::filesystem::path& out_dir) {
    const ImageTensor image = load_image(image_path);
    const Prediction p = predict(*loaded.model, image, loaded.settings);
    const int h = image.height(), w = image.width();
    const std::vector<int> labels =
        resize_nearest(p.segmentation.labels, p.segmentation.height, p.segmentation.width, h, w);

    std::filesystem::create_directories(out_dir);
    const std::string stem = image_path.stem().string();
    InferenceOutputs out{out_dir / (stem + "_labels.png"), out_dir / (stem + "_overlay.png"),
                         out_dir / (stem + "_centers.csv")};

    std::vector<std::uint8_t> indices(labels.begin(), labels.end());
    std::vector<std::array<std::uint8_t, 3>> palette;
    for (int k = 0; k <= loaded.model->parts(); ++k) palette.push_back(part_color(k));
    write_png_indexed(out.labels, h, w, indices, palette);
    write_png_rgb(out.overlay, h, w, overlay_pixels(image, labels));

    std::ofstream csv(out.centers);
    if (!csv) throw IoError("cannot write " + out.centers.string());
    csv << "part,u,v,mass,empty\n" << std::setprecision(10);
    for (int k = 0; k < p.centers.count(); ++k) {
        const PartCenter& c = p.centers.parts[k];
        csv << k + 1 << ',' << c.center.u << ',' << c.center.v << ',' << c.mass << ',' << (c.empty ? 1 : 0) << '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<std::string> expand_protocol(const std::string& protocol) {
    if (protocol == "synthetic") return {"landmarks", "iou", "purity", "equivariance"};
    if (protocol == "landmarks" || protocol == "iou" || protocol == "purity" || protocol == "equivariance") {
        return {protocol};
    }
    throw ConfigError("unknown evaluation protocol '" + protocol + "'");
}

namespace {

struct EvalSet {
    std::vector<LoadedSample> train;
    std::vector<LoadedSample> test;
};

void check_annotations(const CollectionManifest& manifest, const std::vector<std::string>& metrics,
                       const std::string& normalization) {
    std::map<std::string, int> missing;
    for (const auto& metric : metrics) {
        for (const auto& r : manifest.records) {
            const bool test = r.split == "test";
            if (metric == "landmarks") {
                if (r.landmarks.empty()) ++missing["landmarks"];
                if (normalization != "inter_ocular" && test && !r.bbox) ++missing["bbox"];
            }
            if (metric == "iou" && test && !r.mask) ++missing["mask"];
            if (metric == "purity" && test && !r.parts) ++missing["parts"];
        }
    }
    if (manifest.split("test").empty()) missing["test split"] = 1;
    if (!missing.empty()) {
        std::string msg = "evaluation protocol needs annotations the manifest lacks:";
        for (const auto& [field, count] : missing) msg += " " + field + " (" + std::to_string(count) + " records)";
        throw Error(msg);
    }
}

EvalSet load_eval_set(const CollectionManifest& manifest, const TrainConfig& settings, bool need_train,
                      bool with_saliency) {
    EvalSet set;
    for (const auto& r : manifest.records) {
        if (r.split != "test" && !need_train) continue;
        LoadedSample s = load_sample(manifest, r, settings.height, settings.width, settings.saliency_policy,
                                     with_saliency);
        (r.split == "test" ? set.test : set.train).push_back(std::move(s));
    }
    return set;
}

NormalizationSpec normalization_for(const Config& config, const LoadedSample& sample) {
    const std::string& kind = config.get("eval.normalization");
    if (kind == "inter_ocular") return InterOcular{config.get_int("eval.left_eye"), config.get_int("eval.right_eye")};
    if (kind == "bbox" || kind == "bbox_diagonal") {
        return BoundingBoxNorm{(*sample.bbox)[0], (*sample.bbox)[1], kind == "bbox_diagonal"};
    }
    throw ConfigError("eval.normalization must be inter_ocular, bbox or bbox_diagonal");
}

// Centers of every image with no empty part, as stacked rows.
struct CenterRows {
    Eigen::MatrixXd centers;
    Eigen::MatrixXd landmarks;
    std::vector<int> kept;
    int excluded = 0;
};

CenterRows stack_centers(const std::vector<PartCenters>& centers, const std::vector<LoadedSample>& samples) {
    CenterRows rows;
    for (std::size_t i = 0; i < centers.size(); ++i) {
        const bool any_empty = std::any_of(centers[i].parts.begin(), centers[i].parts.end(),
                                           [](const PartCenter& c) { return c.empty; });
        if (any_empty) {
            ++rows.excluded;
            continue;
        }
        rows.kept.push_back(static_cast<int>(i));
    }
    const int k = centers.empty() ? 0 : centers.front().count();
    const int l = samples.empty() ? 0 : static_cast<int>(samples.front().landmarks.size());
    rows.centers.resize(static_cast<Eigen::Index>(rows.kept.size()), 2 * k);
    rows.landmarks.resize(static_cast<Eigen::Index>(rows.kept.size()), 2 * l);
    for (std::size_t r = 0; r < rows.kept.size(); ++r) {
        const int i = rows.kept[r];
        for (int j = 0; j < k; ++j) {
            rows.centers(r, 2 * j) = centers[i].parts[j].center.u;
            rows.centers(r, 2 * j + 1) = centers[i].parts[j].center.v;
        }
        if (static_cast<int>(samples[i].landmarks.size()) != l) throw DimensionError("images disagree on landmark count");
        for (int j = 0; j < l; ++j) {
            rows.landmarks(r, 2 * j) = samples[i].landmarks[j].u;
            rows.landmarks(r, 2 * j + 1) = samples[i].landmarks[j].v;
        }
    }
    return rows;
}

// Shared metric computation for SCOPS and DFF outputs.
std::vector<MetricRow> compute_metrics(const Config& config, const std::string& method, int parts,
                                       const std::vector<std::string>& metrics, const EvalSet& set,
                                       const std::vector<PartCenters>& train_centers,
                                       const std::vector<PartCenters>& test_centers,
                                       const std::vector<PartSegmentation>& test_segs,
                                       const std::function<double()>& equivariance) {
    std::vector<MetricRow> rows;
    const int n_test = static_cast<int>(set.test.size());
    for (const auto& metric : metrics) {
        if (metric == "landmarks") {
            const CenterRows train = stack_centers(train_centers, set.train);
            const CenterRows test = stack_centers(test_centers, set.test);
            const RegressorFit fit = fit_landmark_regressor(train.centers, train.landmarks, config.get_double("eval.ridge"));
            const Eigen::MatrixXd predicted = fit.predict(test.centers);
            double total = 0.0;
            const int l = static_cast<int>(predicted.cols() / 2);
            for (Eigen::Index r = 0; r < predicted.rows(); ++r) {
                std::vector<Point> pred(l);
                for (int j = 0; j < l; ++j) pred[j] = {predicted(r, 2 * j), predicted(r, 2 * j + 1)};
                const LoadedSample& s = set.test[test.kept[r]];
                total += landmark_error(pred, s.landmarks, normalization_for(config, s));
            }
            const double value = predicted.rows() > 0 ? total / static_cast<double>(predicted.rows()) : std::nan("");
            rows.push_back({"test", method, parts, "landmark_error", value, static_cast<int>(predicted.rows()), test.excluded});
        } else if (metric == "iou") {
            double total = 0.0;
            for (int i = 0; i < n_test; ++i) total += foreground_iou(test_segs[i], set.test[i].mask);
            rows.push_back({"test", method, parts, "foreground_iou", total / n_test, n_test, 0});
        } else if (metric == "purity") {
            std::vector<std::vector<int>> truth;
            int truth_parts = 0;
            for (const auto& s : set.test) {
                truth.push_back(s.parts);
                for (int v : s.parts) truth_parts = std::max(truth_parts, v);
            }
            const PurityResult p = assignment_purity(test_segs, truth, truth_parts);
            rows.push_back({"test", method, parts, "purity", p.purity, n_test, 0});
        } else if (metric == "equivariance") {
            if (!equivariance) {
                log_warning("equivariance residual is not defined for " + method + "; skipped");
                continue;
            }
            rows.push_back({"test", method, parts, "equivariance_residual", equivariance(), n_test, 0});
        }
    }
    return rows;
}

} // namespace

double equivariance_residual(const SegmentationModel& model, const std::vector<ImageTensor>& images,
                             const TrainConfig& settings, int transforms, std::uint64_t seed) {
    double total = 0.0;
    long count = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const PartCenters base = predict(model, images[i], settings).centers;
        for (int t = 0; t < transforms; ++t) {
            Rng rng = Rng::derive(seed, kEvalStream, i * static_cast<std::uint64_t>(transforms) + t);
            const SpatialTransform transform = sample_similarity(rng, settings.ranges);
            const PartCenters moved = predict(model, warp_image(images[i], transform), settings).centers;
            for (int k = 0; k < base.count(); ++k) {
                if (base.parts[k].empty || moved.parts[k].empty) continue;
                const Point expected = transform.apply(base.parts[k].center);
                total += std::hypot(moved.parts[k].center.u - expected.u, moved.parts[k].center.v - expected.v);
                ++count;
            }
        }
    }
    if (count == 0) throw Error("equivariance residual has no non-empty parts to compare");
    return total / static_cast<double>(count);
}

std::vector<MetricRow> evaluate_model(const LoadedModel& loaded, const CollectionManifest& manifest,
                                      const std::string& protocol) {
    const auto metrics = expand_protocol(protocol);
    check_annotations(manifest, metrics, loaded.config.get("eval.normalization"));
    const bool need_train = std::find(metrics.begin(), metrics.end(), "landmarks") != metrics.end();
    const EvalSet set = load_eval_set(manifest, loaded.settings, need_train, false);

    std::vector<PartCenters> train_centers, test_centers;
    std::vector<PartSegmentation> test_segs;
    for (const auto& s : set.train) train_centers.push_back(predict(*loaded.model, s.image, loaded.settings).centers);
    for (const auto& s : set.test) {
        Prediction p = predict(*loaded.model, s.image, loaded.settings);
        test_centers.push_back(std::move(p.centers));
        test_segs.push_back(std::move(p.segmentation));
    }
    const auto equivariance = [&] {
        std::vector<ImageTensor> images;
        for (const auto& s : set.test) images.push_back(s.image);
        return equivariance_residual(*loaded.model, images, loaded.settings, loaded.config.get_int("eval.transforms"),
                                     loaded.settings.seed);
    };
    return compute_metrics(loaded.config, "scops", loaded.model->parts(), metrics, set, train_centers, test_centers,
                           test_segs, equivariance);
}

std::vector<MetricRow> evaluate_dff(const Config& config, const CollectionManifest& manifest,
                                    const std::string& protocol) {
    const TrainConfig settings = TrainConfig::from(config);
    const auto metrics = expand_protocol(protocol);
    check_annotations(manifest, metrics, config.get("eval.normalization"));
    DffOptions options;
    options.nmf.parts = settings.model.parts;
    options.nmf.max_iters = config.get_int("dff.iterations");
    options.nmf.seed = settings.seed;
    options.use_saliency = config.get_bool("dff.use_saliency");
    const bool need_train = std::find(metrics.begin(), metrics.end(), "landmarks") != metrics.end();
    const EvalSet set = load_eval_set(manifest, settings, need_train, options.use_saliency);

    // One factorization over every loaded image (train rows first).
    std::vector<ImageTensor> images;
    std::vector<SaliencyMap> saliency;
    for (const auto* part : {&set.train, &set.test})
        for (const auto& s : *part) {
            images.push_back(s.image);
            if (options.use_saliency) saliency.push_back(s.saliency);
        }
    const auto provider = make_feature_provider(settings.feature_provider, settings.weights_path);
    const DffResult dff = dff_segment(images, *provider, saliency, options);

    std::vector<PartCenters> train_centers, test_centers;
    std::vector<PartSegmentation> test_segs;
    for (std::size_t i = 0; i < images.size(); ++i) {
        PartCenters c = part_centers(dff.responses[i], settings.coordinates);
        if (i < set.train.size()) {
            train_centers.push_back(std::move(c));
        } else {
            test_centers.push_back(std::move(c));
            test_segs.push_back(dff.segmentations[i]);
        }
    }
    return compute_metrics(config, "dff", settings.model.parts, metrics, set, train_centers, test_centers, test_segs, {});
}

// ---------------------------------------------------------------------------
// Figures

void write_contact_sheet(const LoadedModel& loaded, const CollectionManifest& manifest, int count,
                         const std::filesystem::path& path) {
    auto records = manifest.split("test");
    if (records.empty()) records = manifest.split("train");
    if (count < 1) throw ConfigError("contact sheet needs at least one image");
    records.resize(std::min<std::size_t>(records.size(), count));
    if (records.empty()) throw Error("manifest has no images to visualize");

    const int h = loaded.settings.height, w = loaded.settings.width;
    const int zoom = std::max(1, 96 / std::max(h, w));
    const int pairs_per_row = 4, gap = 2;
    const int tile_w = 2 * w * zoom + gap, tile_h = h * zoom + gap;
    const int n = static_cast<int>(records.size());
    const int cols = std::min(n, pairs_per_row), rows = (n + pairs_per_row - 1) / pairs_per_row;
    const int sheet_w = cols * tile_w, sheet_h = rows * tile_h;
    std::vector<std::uint8_t> sheet(static_cast<std::size_t>(sheet_h) * sheet_w * 3, 255);

    for (int i = 0; i < n; ++i) {
        const LoadedSample s = load_sample(manifest, *records[i], h, w, MissingSaliencyPolicy::fallback_ones, false);
        const Prediction p = predict(*loaded.model, s.image, loaded.settings);
        const auto over = overlay_pixels(s.image, p.segmentation.labels);
        const int ox = (i % pairs_per_row) * tile_w, oy = (i / pairs_per_row) * tile_h;
        for (int y = 0; y < h * zoom; ++y)
            for (int x = 0; x < w * zoom; ++x)
                for (int c = 0; c < 3; ++c) {
                    const int sy = y / zoom, sx = x / zoom;
                    const auto plain = static_cast<std::uint8_t>(std::lround(std::clamp(s.image.pixels(c, sy, sx), 0.0, 1.0) * 255));
                    const std::size_t left = (static_cast<std::size_t>(oy + y) * sheet_w + ox + x) * 3 + c;
                    const std::size_t right = (static_cast<std::size_t>(oy + y) * sheet_w + ox + w * zoom + x) * 3 + c;
                    sheet[left] = plain;
                    sheet[right] = over[(static_cast<std::size_t>(sy) * w + sx) * 3 + c];
                }
    }
    write_png_rgb(path, sheet_h, sheet_w, sheet);
}

} // namespace scops
