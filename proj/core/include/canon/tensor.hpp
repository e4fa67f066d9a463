#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace canon {

/// Shape/layout violation; message names both offending shapes.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numeric-domain violation (near-zero norm used as divisor, log of
/// non-positive input, non-finite value where finiteness is required).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t numel(const Shape& s);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Reverse step of one recorded primitive: receives the adjoint of the output
/// and one accumulation buffer per parent (nullptr for parents that do not
/// require a gradient).
using BackwardFn = std::function<void(const std::vector<double>& upstream,
                                      const std::vector<std::vector<double>*>& parent_adj)>;

struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // leaf accumulation buffer, allocated lazily
    std::vector<NodePtr> parents;
    BackwardFn backward;  // empty for leaves
};

}  // namespace detail

/// Dense row-major f64 tensor participating in a reverse-mode tape.
/// Value-semantic handle: copies share the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor from_span(Shape shape, std::span<const double> data, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t ndim() const;
    bool requires_grad() const;
    void set_requires_grad(bool v);  // leaves only

    const std::vector<double>& data() const;
    /// Mutable access for leaves (parameter updates). Mutating a tensor that
    /// is an interior node of a live graph invalidates that graph.
    std::vector<double>& raw_data();

    double item() const;  // scalar tensors only
    double at(std::initializer_list<std::size_t> idx) const;

    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();
    void clear_grad();

    /// New leaf with copied data and requires_grad = false.
    Tensor detach() const;

    detail::Node* node() const { return n_.get(); }

private:
    explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}
    detail::NodePtr n_;

    friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>, detail::BackwardFn);
};

/// Ordered parameter dictionary; iteration order is insertion order.
class ParameterStore {
public:
    /// Registers a parameter (requires_grad is forced on) and returns a
    /// handle sharing the stored node.
    Tensor add(const std::string& name, Tensor t);
    bool contains(const std::string& name) const;
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    std::size_t size() const { return items_.size(); }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    void zero_grads();
    std::size_t total_elements() const;

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---- grad mode -------------------------------------------------------------

bool grad_enabled();

/// RAII scope that disables tape recording (inference / finite differences).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- primitives ------------------------------------------------------------
// Binary elementwise ops require identical shapes, except that either operand
// may be a scalar (shape []); no other broadcasting.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softmax(const Tensor& a);  // over last axis
Tensor sum(const Tensor& a, std::vector<std::size_t> axes);
Tensor mean(const Tensor& a, std::vector<std::size_t> axes);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& a, Shape shape);
Tensor batched_dot(const Tensor& a, const Tensor& b);  // over last axis
Tensor norm_lastaxis(const Tensor& a);
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx);
Tensor take_per_row(const Tensor& a, const std::vector<std::size_t>& idx);
Tensor add_rowvec(const Tensor& x, const Tensor& b);  // [N,C] + [C]

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

/// Escape hatch for composite kernels (convolutions, group correlations):
/// wraps precomputed output data plus a custom backward into a tape node.
Tensor make_op(Shape out_shape, std::vector<double> out_data, std::vector<Tensor> inputs,
               detail::BackwardFn backward);

// ---- reverse pass ----------------------------------------------------------

/// Accumulates d(loss)/d(leaf) into the .grad of every reachable leaf that
/// requires a gradient. Repeated calls accumulate; zero_grads() resets.
void backward(const Tensor& loss);

/// Same, and additionally guarantees every parameter in the store ends up
/// with an allocated gradient (zero for parameters off the path).
void backward(const Tensor& loss, ParameterStore& params);

/// Non-mutating gradient of a scalar loss w.r.t. one tensor (zeros when the
/// tensor is not on the path). Leaves all .grad fields untouched.
std::vector<double> grad_wrt(const Tensor& loss, const Tensor& x);

// ---- numeric utilities -----------------------------------------------------

/// Permutation-invariant summation: sorts a copy of the values before adding,
/// so any reordering of the same multiset produces bit-identical results.
double stable_sum(std::span<const double> values);
double stable_mean(std::span<const double> values);

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::size_t worst_coord = 0;
    std::vector<std::size_t> kink_coords;  // reported separately, excluded from the max
};

/// Central-difference audit of the tape gradient of fn at the given point.
/// Coordinates where one-sided differences disagree (kinks such as relu at 0)
/// are flagged and excluded. step must lie in (0, 1e-3].
FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& fn,
                                   const Tensor& point, double step);

/// Same check restricted to a subset of coordinates.
FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& fn,
                                   const Tensor& point, double step,
                                   std::span<const std::size_t> coords);

}  // namespace canon
