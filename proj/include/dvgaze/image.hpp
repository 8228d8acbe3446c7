#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace dvgaze {

// Interleaved height x width x channels float image.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
        if (h <= 0 || w <= 0 || c <= 0) throw std::invalid_argument("Image: dimensions must be positive");
    }

    std::size_t index(int row, int col, int ch) const {
        return (static_cast<std::size_t>(row) * width + col) * channels + ch;
    }
    float& at(int row, int col, int ch) { return data[index(row, col, ch)]; }
    float at(int row, int col, int ch) const { return data[index(row, col, ch)]; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

}  // namespace dvgaze
