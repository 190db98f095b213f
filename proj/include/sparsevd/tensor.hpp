#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sparsevd {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Allocator whose plain construct() default-initializes, so resize() on a
// vector of doubles leaves the new elements unwritten instead of zeroing
// them. Storage is handed out 64-byte aligned: vectorized kernels split
// scalar/SIMD lanes by pointer alignment, and a fixed alignment keeps that
// split — and therefore the low-order bits — identical from run to run.
template <class T>
struct RawAlloc : std::allocator<T> {
    static constexpr std::align_val_t kAlign{64};

    template <class U>
    struct rebind {
        using other = RawAlloc<U>;
    };

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using DVec = std::vector<double, RawAlloc<double>>;

// Dense row-major tensor of 64-bit floats. Rank 1 or 2 is all the layers need.
struct Tensor {
    Shape shape;
    DVec v;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)) {
        check_shape();
        v.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    }

    Tensor(Shape s, double fill) : Tensor(std::move(s)) {
        for (double& x : v) x = fill;
    }

    Tensor(Shape s, const std::vector<double>& vals) : shape(std::move(s)) {
        check_shape();
        if (static_cast<std::int64_t>(vals.size()) != shape_numel(shape))
            throw std::invalid_argument("Tensor: " + std::to_string(vals.size()) +
                                        " values do not fill shape " + shape_str(shape));
        v.assign(vals.begin(), vals.end());
    }

    static Tensor scalar(double x) { return Tensor({1}, std::vector<double>{x}); }

    // Storage with indeterminate contents, for buffers that are fully
    // overwritten right after allocation. Never hand one out unwritten.
    static Tensor uninit(Shape s) {
        Tensor t;
        t.shape = std::move(s);
        t.check_shape();
        t.v.resize(static_cast<std::size_t>(shape_numel(t.shape)));
        return t;
    }

    void check_shape() const {
        if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
        for (int d : shape)
            if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dim in " + shape_str(shape));
    }

    std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    // 2-D accessors; rank-1 tensors behave as a single row.
    int rows() const { return ndim() == 1 ? 1 : shape[0]; }
    int cols() const { return ndim() == 1 ? shape[0] : shape[1]; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    double& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // NaN/Inf is a queryable state, never silently propagated by the trainer.
    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    void fill(double x) {
        for (double& e : v) e = x;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace sparsevd
