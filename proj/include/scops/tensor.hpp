#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace scops {

/// Dense channel-major C×H×W array of doubles.
class Tensor {
public:
    Tensor() = default;
    Tensor(int channels, int height, int width, double fill = 0.0)
        : channels_(channels), height_(height), width_(width),
          data_(static_cast<std::size_t>(channels) * height * width, fill) {}

    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }
    int plane_size() const { return height_ * width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(int c, int y, int x) {
        assert(c >= 0 && c < channels_ && y >= 0 && y < height_ && x >= 0 && x < width_);
        return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
    }
    double operator()(int c, int y, int x) const {
        assert(c >= 0 && c < channels_ && y >= 0 && y < height_ && x >= 0 && x < width_);
        return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
    }

    std::span<double> channel(int c) {
        return {data_.data() + static_cast<std::size_t>(c) * plane_size(),
                static_cast<std::size_t>(plane_size())};
    }
    std::span<const double> channel(int c) const {
        return {data_.data() + static_cast<std::size_t>(c) * plane_size(),
                static_cast<std::size_t>(plane_size())};
    }

    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Tensor& other) const {
        return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

} // namespace scops
