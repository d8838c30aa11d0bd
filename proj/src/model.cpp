#include "scops/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <Eigen/Dense>

namespace scops {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

} // namespace

SegmentationModel::SegmentationModel(const ModelConfig& config) : config_(config) {
    if (config.parts < 1) throw ConfigError("part count must be at least 1");
    if (config.width < 1) throw ConfigError("model width must be positive");
    if (config.dilations.empty()) throw ConfigError("model needs at least one hidden layer");

    Rng rng(config.init_seed);
    auto add_layer = [&](int cin, int cout, int kernel, int dilation, bool relu, double stddev) {
        const int index = static_cast<int>(layers_.size());
        Blob w{"net/layer" + std::to_string(index) + "/weight", {cout, cin, kernel, kernel}, {}};
        w.data.resize(static_cast<std::size_t>(cout) * cin * kernel * kernel);
        for (double& v : w.data) v = stddev * rng.normal();
        Blob b{"net/layer" + std::to_string(index) + "/bias", {cout}, std::vector<double>(cout, 0.0)};
        params_.push_back(std::move(w));
        params_.push_back(std::move(b));
        layers_.push_back({cin, cout, kernel, dilation, relu, static_cast<int>(params_.size()) - 2,
                           static_cast<int>(params_.size()) - 1});
    };

    int cin = 3;
    for (int d : config.dilations) {
        if (d < 1) throw ConfigError("dilation must be positive");
        add_layer(cin, config.width, 3, d, true, std::sqrt(2.0 / (cin * 9.0)));
        cin = config.width;
    }
    add_layer(cin, config.parts + 1, 1, 1, false, 0.1 / std::sqrt(static_cast<double>(cin)));
    // Start with most mass on background: near R = 0 the masked semantic term
    // pulls parts onto salient pixels faster than it pushes them off the rest.
    params_.back().data[0] = kBackgroundLogitInit;
}

std::vector<std::vector<double>> SegmentationModel::zero_gradients() const {
    std::vector<std::vector<double>> g;
    g.reserve(params_.size());
    for (const Blob& b : params_) g.emplace_back(b.data.size(), 0.0);
    return g;
}

void SegmentationModel::load_parameters(const std::vector<Blob>& blobs) {
    for (Blob& p : params_) {
        auto it = std::find_if(blobs.begin(), blobs.end(), [&](const Blob& b) { return b.name == p.name; });
        if (it == blobs.end()) throw ConfigError("checkpoint is missing parameter " + p.name);
        if (it->data.size() != p.data.size()) throw ConfigError("parameter size mismatch for " + p.name);
        p.data = it->data;
    }
}

void SegmentationModel::im2col(const Tensor& input, const Layer& layer, Tensor& columns) const {
    const int h = input.height(), w = input.width();
    const int k = layer.kernel, d = layer.dilation, pad = d * (k - 1) / 2;
    columns = Tensor(1, layer.in_channels * k * k, h * w);
    double* out = columns.data();
    for (int c = 0; c < layer.in_channels; ++c) {
        const double* src = input.channel(c).data();
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const int dy = ky * d - pad, dx = kx * d - pad;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy;
                    double* row = out + static_cast<std::size_t>(y) * w;
                    if (sy < 0 || sy >= h) {
                        std::fill(row, row + w, 0.0);
                        continue;
                    }
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + dx;
                        row[x] = (sx >= 0 && sx < w) ? src[sy * w + sx] : 0.0;
                    }
                }
                out += static_cast<std::size_t>(h) * w;
            }
        }
    }
}

void SegmentationModel::col2im(const Tensor& columns, const Layer& layer, Tensor& grad_input) const {
    const int h = grad_input.height(), w = grad_input.width();
    const int k = layer.kernel, d = layer.dilation, pad = d * (k - 1) / 2;
    const double* in = columns.data();
    for (int c = 0; c < layer.in_channels; ++c) {
        double* dst = grad_input.channel(c).data();
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const int dy = ky * d - pad, dx = kx * d - pad;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= h) continue;
                    const double* row = in + static_cast<std::size_t>(y) * w;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + dx;
                        if (sx >= 0 && sx < w) dst[sy * w + sx] += row[x];
                    }
                }
                in += static_cast<std::size_t>(h) * w;
            }
        }
    }
}

PartResponseMap SegmentationModel::forward(const ImageTensor& image) const {
    Activations cache;
    return forward(image, cache);
}

PartResponseMap SegmentationModel::forward(const ImageTensor& image, Activations& cache) const {
    const int h = image.height(), w = image.width();
    if (h < min_input_size() || w < min_input_size()) {
        throw SizingError("input " + std::to_string(h) + "x" + std::to_string(w) + " is below the network minimum of " +
                          std::to_string(min_input_size()));
    }
    if (image.pixels.channels() != 3) throw DimensionError("image must have 3 channels");
    cache.height = h;
    cache.width = w;
    cache.columns.resize(layers_.size());
    cache.outputs.resize(layers_.size());

    Tensor input = image.pixels;
    for (double& v : input.values()) v -= 0.5;

    const Tensor* current = &input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const Layer& layer = layers_[i];
        im2col(*current, layer, cache.columns[i]);
        Tensor& out = cache.outputs[i];
        out = Tensor(layer.out_channels, h, w);
        const int rows = layer.in_channels * layer.kernel * layer.kernel;
        ConstMatrixMap weight(params_[layer.weight_index].data.data(), layer.out_channels, rows);
        ConstMatrixMap cols(cache.columns[i].data(), rows, h * w);
        MatrixMap y(out.data(), layer.out_channels, h * w);
        y.noalias() = weight * cols;
        const auto& bias = params_[layer.bias_index].data;
        for (int c = 0; c < layer.out_channels; ++c) y.row(c).array() += bias[c];
        if (layer.relu) {
            for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
        }
        current = &out;
    }

    const Tensor& logits = cache.outputs.back();
    const int channels = logits.channels(), n = h * w;
    PartResponseMap r{Tensor(channels, h, w)};
    for (int p = 0; p < n; ++p) {
        double mx = logits.channel(0)[p];
        for (int c = 1; c < channels; ++c) mx = std::max(mx, logits.channel(c)[p]);
        double sum = 0.0;
        for (int c = 0; c < channels; ++c) {
            const double e = std::exp(logits.channel(c)[p] - mx);
            r.values.channel(c)[p] = e;
            sum += e;
        }
        for (int c = 0; c < channels; ++c) r.values.channel(c)[p] /= sum;
    }
    cache.response = r;
    return r;
}

std::vector<PartResponseMap> SegmentationModel::forward(const std::vector<ImageTensor>& batch) const {
    std::vector<PartResponseMap> out;
    out.reserve(batch.size());
    for (const ImageTensor& image : batch) out.push_back(forward(image));
    return out;
}

void SegmentationModel::backward(const Activations& cache, const Tensor& grad_response,
                                 std::vector<std::vector<double>>& grads) const {
    const Tensor& r = cache.response.values;
    if (!grad_response.same_shape(r)) throw DimensionError("gradient does not match response shape");
    const int h = cache.height, w = cache.width, n = h * w, channels = r.channels();

    // Softmax adjoint.
    Tensor grad(channels, h, w);
    for (int p = 0; p < n; ++p) {
        double dot = 0.0;
        for (int c = 0; c < channels; ++c) dot += r.channel(c)[p] * grad_response.channel(c)[p];
        for (int c = 0; c < channels; ++c) {
            grad.channel(c)[p] = r.channel(c)[p] * (grad_response.channel(c)[p] - dot);
        }
    }

    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
        const Layer& layer = layers_[i];
        if (layer.relu) {
            const auto& out = cache.outputs[i].values();
            auto& g = grad.values();
            for (std::size_t j = 0; j < g.size(); ++j) {
                if (out[j] <= 0.0) g[j] = 0.0;
            }
        }
        const int rows = layer.in_channels * layer.kernel * layer.kernel;
        ConstMatrixMap dy(grad.data(), layer.out_channels, n);
        ConstMatrixMap cols(cache.columns[i].data(), rows, n);
        MatrixMap dweight(grads[layer.weight_index].data(), layer.out_channels, rows);
        dweight.noalias() += dy * cols.transpose();
        auto& dbias = grads[layer.bias_index];
        for (int c = 0; c < layer.out_channels; ++c) dbias[c] += dy.row(c).sum();
        if (i == 0) break;

        ConstMatrixMap weight(params_[layer.weight_index].data.data(), layer.out_channels, rows);
        Tensor dcols(1, rows, n);
        MatrixMap dc(dcols.data(), rows, n);
        dc.noalias() = weight.transpose() * dy;
        Tensor grad_input(layer.in_channels, h, w);
        col2im(dcols, layer, grad_input);
        grad = std::move(grad_input);
    }
}

// ---------------------------------------------------------------------------

NormalizedResponseMap normalize_responses(const Tensor& r) {
    NormalizedResponseMap out{Tensor(r.channels(), r.height(), r.width())};
    for (double& v : out.values.channel(0)) v = kBackgroundFloor;
    for (int k = 1; k < r.channels(); ++k) {
        const auto src = r.channel(k);
        const double mx = *std::max_element(src.begin(), src.end());
        auto dst = out.values.channel(k);
        if (!(mx > 0.0)) continue;
        for (std::size_t p = 0; p < src.size(); ++p) dst[p] = src[p] / mx;
    }
    return out;
}

NormalizedResponseMap normalize_responses(const PartResponseMap& r) { return normalize_responses(r.values); }

PartSegmentation segment(const NormalizedResponseMap& normalized) {
    const Tensor& t = normalized.values;
    PartSegmentation seg;
    seg.height = t.height();
    seg.width = t.width();
    seg.parts = t.channels() - 1;
    seg.labels.assign(static_cast<std::size_t>(t.plane_size()), 0);
    for (int p = 0; p < t.plane_size(); ++p) {
        int best = 0;
        double best_value = t.channel(0)[p];
        for (int c = 1; c < t.channels(); ++c) {
            if (t.channel(c)[p] > best_value) {
                best_value = t.channel(c)[p];
                best = c;
            }
        }
        seg.labels[p] = best;
    }
    return seg;
}

// ---------------------------------------------------------------------------
// Checkpoint archive: magic, u32 version, then length-prefixed fields in
// little-endian host order.

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void blob(const Blob& b) {
        str(b.name);
        u32(static_cast<std::uint32_t>(b.shape.size()));
        for (auto d : b.shape) u64(static_cast<std::uint64_t>(d));
        u64(b.data.size());
        raw(b.data.data(), b.data.size() * sizeof(double));
    }
    void raw(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

private:
    std::ostream& os_;
};

class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::string str() {
        const auto n = u64();
        if (n > (1ULL << 30)) throw IoError("checkpoint string field too large");
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    Blob blob() {
        Blob b;
        b.name = str();
        const auto dims = u32();
        if (dims > 16) throw IoError("checkpoint blob has too many dimensions");
        for (std::uint32_t i = 0; i < dims; ++i) b.shape.push_back(static_cast<std::int64_t>(u64()));
        const auto n = u64();
        if (n > (1ULL << 32)) throw IoError("checkpoint blob too large");
        b.data.resize(n);
        raw(b.data.data(), n * sizeof(double));
        return b;
    }
    void raw(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!is_) throw IoError("checkpoint truncated");
    }

private:
    std::istream& is_;
};

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        Writer w(os);
        w.raw(kCheckpointMagic, 6);
        w.u32(kCheckpointVersion);
        w.str(checkpoint.config_text);
        w.u64(checkpoint.config_hash);
        w.u64(checkpoint.iteration);
        w.u32(static_cast<std::uint32_t>(checkpoint.model.size()));
        for (const Blob& b : checkpoint.model) w.blob(b);
        w.blob(checkpoint.part_basis);
        w.u32(static_cast<std::uint32_t>(checkpoint.optimizer.size()));
        for (const Blob& b : checkpoint.optimizer) w.blob(b);
        os.flush();
        if (!os) throw IoError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    Reader r(is);
    char magic[6];
    r.raw(magic, 6);
    if (std::memcmp(magic, kCheckpointMagic, 6) != 0) throw IoError(path.string() + " is not a SCOPS1 checkpoint");
    const auto version = r.u32();
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.config_text = r.str();
    c.config_hash = r.u64();
    c.iteration = r.u64();
    const auto nmodel = r.u32();
    for (std::uint32_t i = 0; i < nmodel; ++i) c.model.push_back(r.blob());
    c.part_basis = r.blob();
    const auto nopt = r.u32();
    for (std::uint32_t i = 0; i < nopt; ++i) c.optimizer.push_back(r.blob());
    return c;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash) {
    Checkpoint c = load_checkpoint(path);
    if (c.config_hash != expected_hash) {
        throw ConfigError("checkpoint config fingerprint mismatch: checkpoint was trained with a different configuration");
    }
    return c;
}

} // namespace scops
