#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace counsel {

using Shape = std::vector<std::size_t>;

// Raised when operand dimensions do not conform.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major array of doubles with an optional gradient buffer.
//
// Rank-1 tensors behave as a single row ([n] ~ [1, n]) for the matrix
// operations; a rank-0 tensor holds one value.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size()) {
            throw ShapeError("tensor shape " + shape_str(shape_) + " needs " +
                             std::to_string(shape_numel(shape_)) + " values, got " +
                             std::to_string(data_.size()));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }

    std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
    std::size_t cols() const {
        if (shape_.size() == 2) return shape_[1];
        if (shape_.size() == 1) return shape_[0];
        return 1;
    }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    double item() const {
        if (data_.size() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        }
        return data_[0];
    }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool v) { requires_grad_ = v; }

    bool has_grad() const { return !grad_.empty() || data_.empty(); }
    std::span<const double> grad() const { return grad_; }
    std::span<double> grad() { return grad_; }

    // Allocates (or resets) the gradient buffer to zeros.
    void zero_grad() { grad_.assign(data_.size(), 0.0); }
    void clear_grad() { grad_.clear(); }

    void accumulate_grad(std::span<const double> g) {
        if (g.size() != data_.size()) {
            throw ShapeError("gradient of size " + std::to_string(g.size()) +
                             " does not match tensor " + shape_str(shape_));
        }
        if (grad_.empty()) grad_.assign(data_.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    Shape shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
    bool requires_grad_ = false;
};

// Trainable tensors are shared between a model and the graphs that use them.
using Parameter = std::shared_ptr<Tensor>;

inline Parameter make_parameter(Tensor t) {
    auto p = std::make_shared<Tensor>(std::move(t));
    p->set_requires_grad(true);
    return p;
}

}  // namespace counsel
