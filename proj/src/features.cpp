#include "scops/features.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <Eigen/Dense>

#include "scops/image_io.hpp"
#include "scops/log.hpp"

namespace scops {

FeatureMap extract_features(const FeatureProvider& provider, const ImageTensor& image) {
    FeatureMap raw = provider.compute(image);
    for (double& v : raw.values.values()) v = std::max(v, 0.0);
    raw.values = resize_bilinear(raw.values, image.height(), image.width());
    return raw;
}

// ---------------------------------------------------------------------------

SyntheticFeatureProvider::SyntheticFeatureProvider() {
    Rng rng(0x5c0b5f);
    for (auto& row : projection_)
        for (double& v : row) v = rng.uniform(-1.0, 1.0);
}

FeatureMap SyntheticFeatureProvider::compute(const ImageTensor& image) const {
    const int h = image.height(), w = image.width();
    FeatureMap out{Tensor(8, h, w), {"rgb", "ramp_u", "ramp_v", "projection"}};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double rgb[3] = {image.pixels(0, y, x), image.pixels(1, y, x), image.pixels(2, y, x)};
            for (int c = 0; c < 3; ++c) out.values(c, y, x) = rgb[c];
            out.values(3, y, x) = grid_coordinate(y, h);
            out.values(4, y, x) = grid_coordinate(x, w);
            for (int j = 0; j < 3; ++j) {
                const double p = projection_[j][0] * rgb[0] + projection_[j][1] * rgb[1] + projection_[j][2] * rgb[2];
                out.values(5 + j, y, x) = std::max(p, 0.0);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

const std::vector<int>& Vgg19FeatureProvider::layer_widths() {
    static const std::vector<int> widths{64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512};
    return widths;
}

Vgg19FeatureProvider::Vgg19FeatureProvider(const std::filesystem::path& weights_path) {
    std::ifstream is(weights_path, std::ios::binary);
    if (!is) {
        throw IoError("VGG-19 weights not found at '" + weights_path.string() +
                      "'. Convert the torchvision ImageNet weights with `python3 tools/convert_vgg19.py OUT.bin` "
                      "and point features.weights_path at the result.");
    }
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw IoError(weights_path.string() + " is not a VGG19F32 weights file");
    int cin = 3;
    for (int width : layer_widths()) {
        std::uint32_t dims[2];
        is.read(reinterpret_cast<char*>(dims), sizeof dims);
        if (!is || static_cast<int>(dims[0]) != width || static_cast<int>(dims[1]) != cin) {
            throw IoError("VGG-19 weights file has unexpected layer shapes");
        }
        Conv conv{cin, width, std::vector<float>(static_cast<std::size_t>(width) * cin * 9), std::vector<float>(width)};
        is.read(reinterpret_cast<char*>(conv.weight.data()), static_cast<std::streamsize>(conv.weight.size() * sizeof(float)));
        is.read(reinterpret_cast<char*>(conv.bias.data()), static_cast<std::streamsize>(conv.bias.size() * sizeof(float)));
        if (!is) throw IoError("VGG-19 weights file truncated");
        convs_.push_back(std::move(conv));
        cin = width;
    }
}

namespace {

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 3×3 same-padding convolution + ReLU on a (C, H*W) row-major activation.
FloatMatrix conv3x3_relu(const FloatMatrix& input, int h, int w, int out_channels, const std::vector<float>& weight,
                         const std::vector<float>& bias) {
    const int cin = static_cast<int>(input.rows());
    FloatMatrix cols(cin * 9, h * w);
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                float* row = cols.row((c * 3 + ky) * 3 + kx).data();
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + kx - 1;
                        row[y * w + x] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? input(c, sy * w + sx) : 0.0f;
                    }
                }
            }
        }
    }
    Eigen::Map<const FloatMatrix> wmat(weight.data(), out_channels, cin * 9);
    FloatMatrix out = wmat * cols;
    for (int c = 0; c < out_channels; ++c) out.row(c) = (out.row(c).array() + bias[c]).cwiseMax(0.0f);
    return out;
}

FloatMatrix max_pool2(const FloatMatrix& input, int& h, int& w) {
    const int oh = std::max(h / 2, 1), ow = std::max(w / 2, 1);
    FloatMatrix out(input.rows(), oh * ow);
    for (int c = 0; c < input.rows(); ++c) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                float m = -std::numeric_limits<float>::infinity();
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int sy = std::min(2 * y + dy, h - 1), sx = std::min(2 * x + dx, w - 1);
                        m = std::max(m, input(c, sy * w + sx));
                    }
                out(c, y * ow + x) = m;
            }
        }
    }
    h = oh;
    w = ow;
    return out;
}

} // namespace

FeatureMap Vgg19FeatureProvider::compute(const ImageTensor& image) const {
    static constexpr float mean[3] = {0.485f, 0.456f, 0.406f};
    static constexpr float stddev[3] = {0.229f, 0.224f, 0.225f};
    int h = image.height(), w = image.width();
    FloatMatrix act(3, h * w);
    for (int c = 0; c < 3; ++c)
        for (int p = 0; p < h * w; ++p) act(c, p) = (static_cast<float>(image.pixels.channel(c)[p]) - mean[c]) / stddev[c];

    // Pools follow conv1_2, conv2_2, conv3_4 and conv4_4.
    static const int pool_after[] = {1, 3, 7, 11};
    FloatMatrix relu5_2;
    int h5 = 0, w5 = 0;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        act = conv3x3_relu(act, h, w, convs_[i].out_channels, convs_[i].weight, convs_[i].bias);
        if (i == 13) {
            relu5_2 = act;
            h5 = h;
            w5 = w;
        }
        if (std::find(std::begin(pool_after), std::end(pool_after), static_cast<int>(i)) != std::end(pool_after)) {
            act = max_pool2(act, h, w);
        }
    }
    FeatureMap out{Tensor(1024, h5, w5), {"relu5_2", "relu5_4"}};
    for (int c = 0; c < 512; ++c) {
        for (int p = 0; p < h5 * w5; ++p) {
            out.values.channel(c)[p] = relu5_2(c, p);
            out.values.channel(512 + c)[p] = act(c, p);
        }
    }
    return out;
}

std::unique_ptr<FeatureProvider> make_feature_provider(const std::string& name, const std::filesystem::path& weights_path) {
    if (name == "synthetic") return std::make_unique<SyntheticFeatureProvider>();
    if (name == "vgg19") return std::make_unique<Vgg19FeatureProvider>(weights_path);
    throw ConfigError("unknown feature provider '" + name + "' (expected synthetic or vgg19)");
}

// ---------------------------------------------------------------------------

FeatureMap mask_features(const FeatureMap& features, const SaliencyMap& saliency) {
    const Tensor& v = features.values;
    const Tensor& d = saliency.values;
    if (d.height() != v.height() || d.width() != v.width()) {
        throw DimensionError("saliency map and feature map differ in spatial size");
    }
    FeatureMap out = features;
    const auto mask = d.channel(0);
    for (int c = 0; c < v.channels(); ++c) {
        auto ch = out.values.channel(c);
        for (std::size_t p = 0; p < ch.size(); ++p) ch[p] *= mask[p];
    }
    return out;
}

SaliencyMap load_saliency(const std::filesystem::path& path, int height, int width, MissingSaliencyPolicy policy) {
    if (!std::filesystem::exists(path)) {
        if (policy == MissingSaliencyPolicy::error) throw IoError("saliency map not found: " + path.string());
        log_warning("saliency map " + path.string() + " missing; using D = 1");
        return SaliencyMap::ones(height, width);
    }
    const Raster r = read_png(path);
    Tensor t(1, r.height, r.width);
    for (int p = 0; p < r.height * r.width; ++p) {
        // RGB inputs are reduced to luma.
        double v = 0.0;
        if (r.channels == 1) v = r.pixels[p];
        else v = 0.299 * r.pixels[p * 3] + 0.587 * r.pixels[p * 3 + 1] + 0.114 * r.pixels[p * 3 + 2];
        t.values()[p] = std::clamp(v / 255.0, 0.0, 1.0);
    }
    SaliencyMap out{resize_bilinear(t, height, width)};
    for (double& v : out.values.values()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

} // namespace scops
