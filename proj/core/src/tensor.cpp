#include "canon/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace canon {

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using detail::NodePtr;

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
    throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

bool is_scalar(const Shape& s) { return s.empty(); }

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

// ---- Tensor ----------------------------------------------------------------

static NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != data.size())
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::scalar(double value) { return Tensor(make_leaf({}, {value}, false)); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from_span(Shape shape, std::span<const double> data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::vector<double>(data.begin(), data.end()),
                            requires_grad));
}

const Shape& Tensor::shape() const { return n_->shape; }
std::size_t Tensor::size() const { return n_->data.size(); }
std::size_t Tensor::ndim() const { return n_->shape.size(); }
bool Tensor::requires_grad() const { return n_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
    if (n_->backward) throw std::logic_error("set_requires_grad: only valid on leaf tensors");
    n_->requires_grad = v;
}

const std::vector<double>& Tensor::data() const { return n_->data; }
std::vector<double>& Tensor::raw_data() { return n_->data; }

double Tensor::item() const {
    if (!n_->shape.empty())
        throw ShapeError("item: tensor of shape " + shape_str(n_->shape) + " is not a scalar");
    return n_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != n_->shape.size())
        throw ShapeError("at: rank mismatch for shape " + shape_str(n_->shape));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
        if (i >= n_->shape[axis]) throw ShapeError("at: index out of range");
        flat = flat * n_->shape[axis] + i;
        ++axis;
    }
    return n_->data[flat];
}

bool Tensor::has_grad() const { return !n_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (n_->grad.empty()) throw std::logic_error("grad: no gradient accumulated");
    return n_->grad;
}

void Tensor::zero_grad() { n_->grad.assign(n_->data.size(), 0.0); }
void Tensor::clear_grad() { n_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(make_leaf(n_->shape, n_->data, false)); }

// ---- ParameterStore --------------------------------------------------------

Tensor ParameterStore::add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw std::logic_error("parameter '" + name + "' already registered");
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
}

bool ParameterStore::contains(const std::string& name) const { return index_.count(name) > 0; }

Tensor& ParameterStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("parameter '" + name + "' not found");
    return items_[it->second].second;
}

const Tensor& ParameterStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("parameter '" + name + "' not found");
    return items_[it->second].second;
}

void ParameterStore::zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
}

std::size_t ParameterStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
}

// ---- grad mode -------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- op construction -------------------------------------------------------

Tensor make_op(Shape out_shape, std::vector<double> out_data, std::vector<Tensor> inputs,
               detail::BackwardFn backward) {
    auto n = make_leaf(std::move(out_shape), std::move(out_data), false);
    bool any_grad = false;
    for (const auto& in : inputs) any_grad = any_grad || in.requires_grad();
    if (g_grad_enabled && any_grad) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (const auto& in : inputs) n->parents.push_back(in.n_);
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

namespace {

Tensor unary_op(const Tensor& a, Shape out_shape, std::vector<double> out_data,
                detail::BackwardFn backward) {
    return make_op(std::move(out_shape), std::move(out_data), {a}, std::move(backward));
}

void axpy(std::vector<double>& dst, const std::vector<double>& src, double s = 1.0) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

}  // namespace

// ---- elementwise binaries --------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary_op(const char* name, BinKind kind, const Tensor& a, const Tensor& b) {
    const bool sa = is_scalar(a.shape());
    const bool sb = is_scalar(b.shape());
    if (!sa && !sb && a.shape() != b.shape()) shape_fail(name, a.shape(), b.shape());
    const Shape& out_shape = sa ? b.shape() : a.shape();
    const std::size_t n = numel(out_shape);
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(n);
    auto av = [&](std::size_t i) { return sa ? ad[0] : ad[i]; };
    auto bv = [&](std::size_t i) { return sb ? bd[0] : bd[i]; };
    switch (kind) {
        case BinKind::Add:
            for (std::size_t i = 0; i < n; ++i) out[i] = av(i) + bv(i);
            break;
        case BinKind::Sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = av(i) - bv(i);
            break;
        case BinKind::Mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = av(i) * bv(i);
            break;
        case BinKind::Div:
            for (std::size_t i = 0; i < n; ++i) out[i] = av(i) / bv(i);
            break;
    }
    auto an = a.node();
    auto bn = b.node();
    (void)an;
    (void)bn;
    std::vector<double> a_copy, b_copy;
    if (kind == BinKind::Mul || kind == BinKind::Div) {
        a_copy = a.data();
        b_copy = b.data();
    }
    return make_op(
        out_shape, std::move(out),
        {a, b},
        [kind, sa, sb, n, a_copy = std::move(a_copy), b_copy = std::move(b_copy)](
            const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
            auto accum = [&](std::vector<double>* g, bool scalar_side, auto per_elem) {
                if (!g) return;
                if (scalar_side) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < n; ++i) s += per_elem(i);
                    (*g)[0] += s;
                } else {
                    for (std::size_t i = 0; i < n; ++i) (*g)[i] += per_elem(i);
                }
            };
            auto aval = [&](std::size_t i) { return sa ? a_copy[0] : a_copy[i]; };
            auto bval = [&](std::size_t i) { return sb ? b_copy[0] : b_copy[i]; };
            switch (kind) {
                case BinKind::Add:
                    accum(pg[0], sa, [&](std::size_t i) { return up[i]; });
                    accum(pg[1], sb, [&](std::size_t i) { return up[i]; });
                    break;
                case BinKind::Sub:
                    accum(pg[0], sa, [&](std::size_t i) { return up[i]; });
                    accum(pg[1], sb, [&](std::size_t i) { return -up[i]; });
                    break;
                case BinKind::Mul:
                    accum(pg[0], sa, [&](std::size_t i) { return up[i] * bval(i); });
                    accum(pg[1], sb, [&](std::size_t i) { return up[i] * aval(i); });
                    break;
                case BinKind::Div:
                    accum(pg[0], sa, [&](std::size_t i) { return up[i] / bval(i); });
                    accum(pg[1], sb, [&](std::size_t i) {
                        const double bi = bval(i);
                        return -up[i] * aval(i) / (bi * bi);
                    });
                    break;
            }
        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op("div", BinKind::Div, a, b); }

Tensor scale(const Tensor& a, double s) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * s;
    return unary_op(a, a.shape(), std::move(out),
                    [s, n](const std::vector<double>& up,
                           const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < n; ++i) (*pg[0])[i] += s * up[i];
                    });
}

// ---- matmul / transpose ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0])
        shape_fail("matmul", a.shape(), b.shape());
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n);
    {
        ConstMatMap A(a.data().data(), m, k);
        ConstMatMap B(b.data().data(), k, n);
        MatMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    std::vector<double> a_copy = a.data();
    std::vector<double> b_copy = b.data();
    return make_op(
        {m, n}, std::move(out), {a, b},
        [m, k, n, a_copy = std::move(a_copy), b_copy = std::move(b_copy)](
            const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
            ConstMatMap U(up.data(), m, n);
            if (pg[0]) {
                ConstMatMap B(b_copy.data(), k, n);
                MatMap GA(pg[0]->data(), m, k);
                GA.noalias() += U * B.transpose();
            }
            if (pg[1]) {
                ConstMatMap A(a_copy.data(), m, k);
                MatMap GB(pg[1]->data(), k, n);
                GB.noalias() += A.transpose() * U;
            }
        });
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(a.shape()));
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
    return unary_op(a, {c, r}, std::move(out),
                    [r, c](const std::vector<double>& up,
                           const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                                (*pg[0])[i * c + j] += up[j * r + i];
                    });
}

// ---- elementwise unaries ---------------------------------------------------

Tensor relu(const Tensor& a) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    std::vector<double> x = a.data();
    return unary_op(a, a.shape(), std::move(out),
                    [n, x = std::move(x)](const std::vector<double>& up,
                                          const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < n; ++i)
                            if (x[i] > 0.0) (*pg[0])[i] += up[i];
                    });
}

Tensor tanh(const Tensor& a) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(a.data()[i]);
    std::vector<double> y = out;
    return unary_op(a, a.shape(), std::move(out),
                    [n, y = std::move(y)](const std::vector<double>& up,
                                          const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < n; ++i)
                            (*pg[0])[i] += up[i] * (1.0 - y[i] * y[i]);
                    });
}

Tensor log(const Tensor& a) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (a.data()[i] <= 0.0)
            throw NumericError("log: non-positive input " + std::to_string(a.data()[i]));
        out[i] = std::log(a.data()[i]);
    }
    std::vector<double> x = a.data();
    return unary_op(a, a.shape(), std::move(out),
                    [n, x = std::move(x)](const std::vector<double>& up,
                                          const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < n; ++i) (*pg[0])[i] += up[i] / x[i];
                    });
}

Tensor softmax(const Tensor& a) {
    if (a.ndim() == 0) throw ShapeError("softmax: scalar input");
    const std::size_t d = a.shape().back();
    const std::size_t rows = a.size() / d;
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * d;
        double mx = x[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = std::exp(x[j] - mx) / z;
    }
    std::vector<double> y = out;
    return unary_op(a, a.shape(), std::move(out),
                    [rows, d, y = std::move(y)](const std::vector<double>& up,
                                                const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t r = 0; r < rows; ++r) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < d; ++j)
                                dot += up[r * d + j] * y[r * d + j];
                            for (std::size_t j = 0; j < d; ++j)
                                (*pg[0])[r * d + j] += y[r * d + j] * (up[r * d + j] - dot);
                        }
                    });
}

// ---- reductions ------------------------------------------------------------

namespace {

struct ReducePlan {
    Shape out_shape;
    std::vector<std::size_t> out_index;  // flat input index -> flat output index
    std::size_t count = 1;               // elements folded into each output slot
};

ReducePlan plan_reduce(const Shape& in, std::vector<std::size_t> axes) {
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (std::size_t ax : axes)
        if (ax >= in.size())
            throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range for " +
                             shape_str(in));
    ReducePlan plan;
    std::vector<bool> reduced(in.size(), false);
    for (std::size_t ax : axes) {
        reduced[ax] = true;
        plan.count *= in[ax];
    }
    for (std::size_t i = 0; i < in.size(); ++i)
        if (!reduced[i]) plan.out_shape.push_back(in[i]);

    const std::size_t n = numel(in);
    plan.out_index.resize(n);
    std::vector<std::size_t> idx(in.size(), 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t out_flat = 0;
        for (std::size_t i = 0; i < in.size(); ++i)
            if (!reduced[i]) out_flat = out_flat * in[i] + idx[i];
        plan.out_index[flat] = out_flat;
        for (std::size_t i = in.size(); i-- > 0;) {
            if (++idx[i] < in[i]) break;
            idx[i] = 0;
        }
    }
    return plan;
}

Tensor reduce_op(const Tensor& a, std::vector<std::size_t> axes, bool take_mean) {
    ReducePlan plan = plan_reduce(a.shape(), std::move(axes));
    const double inv = take_mean ? 1.0 / static_cast<double>(plan.count) : 1.0;
    std::vector<double> out(numel(plan.out_shape), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) out[plan.out_index[i]] += a.data()[i];
    if (take_mean)
        for (double& v : out) v *= inv;
    auto out_index = std::make_shared<std::vector<std::size_t>>(std::move(plan.out_index));
    const std::size_t n = a.size();
    return unary_op(a, plan.out_shape, std::move(out),
                    [n, inv, out_index](const std::vector<double>& up,
                                        const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < n; ++i)
                            (*pg[0])[i] += inv * up[(*out_index)[i]];
                    });
}

}  // namespace

Tensor sum(const Tensor& a, std::vector<std::size_t> axes) {
    return reduce_op(a, std::move(axes), false);
}

Tensor mean(const Tensor& a, std::vector<std::size_t> axes) {
    return reduce_op(a, std::move(axes), true);
}

Tensor sum_all(const Tensor& a) {
    std::vector<std::size_t> axes(a.ndim());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return reduce_op(a, std::move(axes), false);
}

Tensor mean_all(const Tensor& a) {
    std::vector<std::size_t> axes(a.ndim());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return reduce_op(a, std::move(axes), true);
}

// ---- structural ops ---------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != s0.size()) shape_fail("concat", s0, p.shape());
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.shape()[i] != s0[i]) shape_fail("concat", s0, p.shape());
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<double> out(numel(out_shape));
    std::vector<std::size_t> offsets;  // per part, offset (in elements) within one outer row
    std::size_t row_len = axis_total * inner;
    {
        std::size_t off = 0;
        for (const auto& p : parts) {
            offsets.push_back(off);
            const std::size_t part_row = p.shape()[axis] * inner;
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(p.data().data() + o * part_row, part_row,
                            out.data() + o * row_len + off);
            off += part_row;
        }
    }
    std::vector<std::size_t> part_rows;
    for (const auto& p : parts) part_rows.push_back(p.shape()[axis] * inner);
    return make_op(out_shape, std::move(out), parts,
                   [outer, row_len, offsets, part_rows](
                       const std::vector<double>& up,
                       const std::vector<std::vector<double>*>& pg) {
                       for (std::size_t pi = 0; pi < pg.size(); ++pi) {
                           if (!pg[pi]) continue;
                           for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < part_rows[pi]; ++j)
                                   (*pg[pi])[o * part_rows[pi] + j] +=
                                       up[o * row_len + offsets[pi] + j];
                       }
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
    std::vector<double> out = a.data();
    return unary_op(a, std::move(shape), std::move(out),
                    [](const std::vector<double>& up,
                       const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        axpy(*pg[0], up);
                    });
}

// ---- dot / norm ------------------------------------------------------------

Tensor batched_dot(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.ndim() == 0) shape_fail("batched_dot", a.shape(), b.shape());
    const std::size_t d = a.shape().back();
    const std::size_t rows = a.size() / d;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r] += a.data()[r * d + j] * b.data()[r * d + j];
    std::vector<double> ac = a.data(), bc = b.data();
    return make_op(out_shape, std::move(out), {a, b},
                   [rows, d, ac = std::move(ac), bc = std::move(bc)](
                       const std::vector<double>& up,
                       const std::vector<std::vector<double>*>& pg) {
                       for (std::size_t r = 0; r < rows; ++r) {
                           if (pg[0])
                               for (std::size_t j = 0; j < d; ++j)
                                   (*pg[0])[r * d + j] += up[r] * bc[r * d + j];
                           if (pg[1])
                               for (std::size_t j = 0; j < d; ++j)
                                   (*pg[1])[r * d + j] += up[r] * ac[r * d + j];
                       }
                   });
}

Tensor norm_lastaxis(const Tensor& a) {
    if (a.ndim() == 0) throw ShapeError("norm_lastaxis: scalar input");
    const std::size_t d = a.shape().back();
    const std::size_t rows = a.size() / d;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a.data()[r * d + j] * a.data()[r * d + j];
        out[r] = std::sqrt(s);
    }
    std::vector<double> x = a.data(), y = out;
    return unary_op(a, out_shape, std::move(out),
                    [rows, d, x = std::move(x), y = std::move(y)](
                        const std::vector<double>& up,
                        const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t r = 0; r < rows; ++r) {
                            if (y[r] < 1e-12)
                                throw NumericError(
                                    "norm_lastaxis backward: norm below 1e-12 used as divisor");
                            for (std::size_t j = 0; j < d; ++j)
                                (*pg[0])[r * d + j] += up[r] * x[r * d + j] / y[r];
                        }
                    });
}

// ---- gather ------------------------------------------------------------------

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.ndim() == 0) throw ShapeError("gather_rows: scalar input");
    const std::size_t rows = a.shape()[0];
    const std::size_t stride = a.size() / rows;
    for (std::size_t i : idx)
        if (i >= rows) throw ShapeError("gather_rows: index " + std::to_string(i) +
                                        " out of range for " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[0] = idx.size();
    std::vector<double> out(idx.size() * stride);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(a.data().data() + idx[r] * stride, stride, out.data() + r * stride);
    auto idx_copy = std::make_shared<std::vector<std::size_t>>(idx);
    return unary_op(a, out_shape, std::move(out),
                    [stride, idx_copy](const std::vector<double>& up,
                                       const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t r = 0; r < idx_copy->size(); ++r)
                            for (std::size_t j = 0; j < stride; ++j)
                                (*pg[0])[(*idx_copy)[r] * stride + j] += up[r * stride + j];
                    });
}

Tensor take_per_row(const Tensor& a, const std::vector<std::size_t>& idx) {
    if (a.ndim() != 2) throw ShapeError("take_per_row: expected 2-D, got " + shape_str(a.shape()));
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    if (idx.size() != rows)
        throw ShapeError("take_per_row: index count " + std::to_string(idx.size()) +
                         " does not match rows of " + shape_str(a.shape()));
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] >= cols) throw ShapeError("take_per_row: index out of range");
        out[r] = a.data()[r * cols + idx[r]];
    }
    auto idx_copy = std::make_shared<std::vector<std::size_t>>(idx);
    return unary_op(a, {rows}, std::move(out),
                    [cols, idx_copy](const std::vector<double>& up,
                                     const std::vector<std::vector<double>*>& pg) {
                        if (!pg[0]) return;
                        for (std::size_t r = 0; r < idx_copy->size(); ++r)
                            (*pg[0])[r * cols + (*idx_copy)[r]] += up[r];
                    });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || x.shape()[1] != b.shape()[0])
        shape_fail("add_rowvec", x.shape(), b.shape());
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = x.data()[r * cols + j] + b.data()[j];
    return make_op(x.shape(), std::move(out), {x, b},
                   [rows, cols](const std::vector<double>& up,
                                const std::vector<std::vector<double>*>& pg) {
                       if (pg[0]) axpy(*pg[0], up);
                       if (pg[1])
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < cols; ++j)
                                   (*pg[1])[j] += up[r * cols + j];
                   });
}

// ---- reverse pass ----------------------------------------------------------

namespace {

/// Post-order (children before parents is NOT what we want -- we need each
/// node listed after all nodes that consume it; plain DFS post-order over the
/// parent edges gives exactly that when traversed in reverse).
std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    if (!root->requires_grad) return order;
    stack.push_back({root, 0});
    visited.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Node* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    return order;  // parents before consumers; iterate in reverse for backprop
}

void run_reverse(const Tensor& loss,
                 std::unordered_map<Node*, std::vector<double>>& adjoint) {
    if (!loss.shape().empty())
        throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    Node* root = loss.node();
    if (!root->requires_grad) return;
    std::vector<Node*> order = topo_order(root);
    adjoint[root] = {1.0};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* nd = *it;
        if (!nd->backward) continue;
        auto found = adjoint.find(nd);
        if (found == adjoint.end()) continue;
        std::vector<std::vector<double>*> pg(nd->parents.size(), nullptr);
        for (std::size_t i = 0; i < nd->parents.size(); ++i) {
            Node* p = nd->parents[i].get();
            if (!p->requires_grad) continue;
            auto [slot, inserted] = adjoint.try_emplace(p);
            if (inserted) slot->second.assign(p->data.size(), 0.0);
            pg[i] = &slot->second;
        }
        nd->backward(found->second, pg);
    }
}

}  // namespace

void backward(const Tensor& loss) {
    std::unordered_map<Node*, std::vector<double>> adjoint;
    run_reverse(loss, adjoint);
    for (auto& [node, adj] : adjoint) {
        if (node->backward) continue;  // interior node
        if (!node->requires_grad) continue;
        if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
        axpy(node->grad, adj);
    }
}

void backward(const Tensor& loss, ParameterStore& params) {
    backward(loss);
    for (auto& [name, t] : params.items())
        if (!t.has_grad()) t.zero_grad();
}

std::vector<double> grad_wrt(const Tensor& loss, const Tensor& x) {
    std::unordered_map<Node*, std::vector<double>> adjoint;
    run_reverse(loss, adjoint);
    auto it = adjoint.find(x.node());
    if (it == adjoint.end()) return std::vector<double>(x.size(), 0.0);
    return std::move(it->second);
}

// ---- numeric utilities -----------------------------------------------------

double stable_sum(std::span<const double> values) {
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

double stable_mean(std::span<const double> values) {
    if (values.empty()) return 0.0;
    return stable_sum(values) / static_cast<double>(values.size());
}

// ---- finite differences ----------------------------------------------------

namespace {

FiniteDiffReport fd_check_impl(const std::function<Tensor(const Tensor&)>& fn,
                               const Tensor& point, double step,
                               std::span<const std::size_t> coords) {
    if (!(step > 0.0) || step > 1e-3)
        throw std::invalid_argument("finite_diff_check: step must be in (0, 1e-3]");
    Tensor p = Tensor::from_data(point.shape(), point.data(), true);
    Tensor y = fn(p);
    if (!y.shape().empty())
        throw ShapeError("finite_diff_check: fn must return a scalar, got " +
                         shape_str(y.shape()));
    std::vector<double> g = grad_wrt(y, p);
    const double f0 = y.item();

    FiniteDiffReport report;
    NoGradGuard no_grad;
    std::vector<double> base = point.data();
    for (std::size_t ci : coords) {
        std::vector<double> xp = base, xm = base;
        xp[ci] += step;
        xm[ci] -= step;
        const double fp = fn(Tensor::from_data(point.shape(), std::move(xp))).item();
        const double fm = fn(Tensor::from_data(point.shape(), std::move(xm))).item();
        const double central = (fp - fm) / (2.0 * step);
        const double dplus = (fp - f0) / step;
        const double dminus = (f0 - fm) / step;
        // one-sided derivatives disagreeing beyond curvature noise marks a kink
        if (std::abs(dplus - dminus) > 1e-3 * std::max(std::abs(dplus), std::abs(dminus)) + 1e-7) {
            report.kink_coords.push_back(ci);
            continue;
        }
        const double rel = std::abs(g[ci] - central) / (std::abs(central) + 1e-8);
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_coord = ci;
        }
        ++report.checked;
    }
    return report;
}

}  // namespace

FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& fn,
                                   const Tensor& point, double step) {
    std::vector<std::size_t> coords(point.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    return fd_check_impl(fn, point, step, coords);
}

FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& fn,
                                   const Tensor& point, double step,
                                   std::span<const std::size_t> coords) {
    return fd_check_impl(fn, point, step, coords);
}

}  // namespace canon
