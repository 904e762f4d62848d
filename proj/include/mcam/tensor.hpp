// Dense row-major float64 tensor value type.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mcam/errors.hpp"
#include "mcam/rng.hpp"

namespace mcam {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct Tensor {
    Shape shape;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), values(check_extents(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        if (static_cast<int64_t>(values.size()) != shape_numel(shape))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(values.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    double* data() { return values.data(); }
    const double* data() const { return values.data(); }

    double& operator[](int64_t i) { return values[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return values[static_cast<size_t>(i)]; }

    // 2-D accessors (row-major).
    double& at2(int64_t r, int64_t c) { return values[static_cast<size_t>(r * shape[1] + c)]; }
    double at2(int64_t r, int64_t c) const { return values[static_cast<size_t>(r * shape[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        std::fill(t.values.begin(), t.values.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor from(Shape s, std::initializer_list<double> v) {
        return Tensor(std::move(s), std::vector<double>(v));
    }

    static Tensor uniform(Shape s, RngStream& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.values) v = rng.uniform(lo, hi);
        return t;
    }

    static Tensor normal(Shape s, RngStream& rng, double mean = 0.0, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.values) v = mean + stddev * rng.normal();
        return t;
    }

private:
    static size_t check_extents(const Shape& s) {
        for (int64_t d : s)
            if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
        return static_cast<size_t>(shape_numel(s));
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

}  // namespace mcam
