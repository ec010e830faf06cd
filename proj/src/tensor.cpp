#include "regiontok/tensor.hpp"

#include "regiontok/errors.hpp"

#include <algorithm>
#include <utility>

namespace regiontok {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape))
        throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
}

Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != numel())
        throw ShapeError("cannot reshape " + shape_string(shape) + " to " + shape_string(s));
    return Tensor(std::move(s), data);
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape) + " vs " +
                         shape_string(b.shape));
}

} // namespace regiontok
