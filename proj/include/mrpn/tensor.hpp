#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mrpn/errors.hpp"

namespace mrpn {

#ifdef MRPN_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) n *= static_cast<std::size_t>(e);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << ']';
    return os.str();
}

// Dense row-major tensor. Copying a Tensor copies the handle, not the
// buffer; parameters stay live across training steps while graphs capture
// the same storage. Gradient buffer is allocated lazily on first use.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        validate_shape(t.d_->shape);
        t.d_->values.assign(numel(t.d_->shape), real(0));
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, real value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.values()) v = value;
        return t;
    }

    static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        validate_shape(t.d_->shape);
        t.d_->values = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(real v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    // Single-row matrix [1, D].
    static Tensor row(std::vector<real> values, bool requires_grad = false) {
        const int d = static_cast<int>(values.size());
        return from({1, d}, std::move(values), requires_grad);
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<real>> rows,
                         bool requires_grad = false) {
        const int r = static_cast<int>(rows.size());
        const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        std::vector<real> v;
        v.reserve(static_cast<std::size_t>(r) * c);
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != c) throw ShapeError("ragged matrix literal");
            v.insert(v.end(), row.begin(), row.end());
        }
        return from({r, c}, std::move(v), requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }

    const Shape& shape() const { return d_->shape; }
    int ndim() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return d_->values.size(); }
    bool is_scalar() const { return size() == 1; }

    // [rows, cols] accessors for the 2-D case; 1-D tensors count as one row.
    int rows() const { return ndim() == 1 ? 1 : dim(0); }
    int cols() const { return ndim() == 1 ? dim(0) : dim(1); }

    // Handle semantics: a const Tensor is a const handle to shared storage,
    // not an immutable buffer (backward closures mutate grads through
    // captured handles).
    std::vector<real>& values() const { return d_->values; }

    real& at(int i) const { return d_->values[static_cast<std::size_t>(i)]; }
    real& at(int r, int c) const { return d_->values[static_cast<std::size_t>(r) * cols() + c]; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    bool has_grad() const { return !d_->grad.empty(); }

    std::vector<real>& grad() const {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), real(0));
        return d_->grad;
    }

    void zero_grad() const {
        if (!d_->grad.empty()) d_->grad.assign(d_->values.size(), real(0));
    }

    // Identity of the underlying buffer; used as a key by the graph.
    const void* id() const { return d_.get(); }

    // Deep copy (fresh buffer, no grad).
    Tensor clone() const {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = d_->shape;
        t.d_->values = d_->values;
        t.d_->requires_grad = d_->requires_grad;
        return t;
    }

private:
    struct Data {
        Shape shape;
        std::vector<real> values;
        std::vector<real> grad;
        bool requires_grad = false;
    };

    static void validate_shape(const Shape& s) {
        for (int e : s)
            if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    }

    std::shared_ptr<Data> d_;
};

} // namespace mrpn
