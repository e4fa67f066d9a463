#include "canon/layers.hpp"

#include <algorithm>
#include <cmath>

namespace canon {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct Tap {
    std::size_t i = 0, j = 0;
    double w = 0.0;
};

/// Up to four bilinear taps for a real position; taps outside the grid are
/// dropped (zero padding) unless wrap is set, in which case indices wrap.
std::size_t position_taps(double pi, double pj, std::size_t h, std::size_t w, bool wrap,
                          Tap taps[4]) {
    const double fi = std::floor(pi), fj = std::floor(pj);
    const long i0 = static_cast<long>(fi), j0 = static_cast<long>(fj);
    const double di = pi - fi, dj = pj - fj;
    const double ws[4] = {(1.0 - di) * (1.0 - dj), (1.0 - di) * dj, di * (1.0 - dj), di * dj};
    const long is[4] = {i0, i0, i0 + 1, i0 + 1};
    const long js[4] = {j0, j0 + 1, j0, j0 + 1};
    std::size_t count = 0;
    for (int t = 0; t < 4; ++t) {
        if (ws[t] == 0.0) continue;
        long ii = is[t], jj = js[t];
        if (wrap) {
            ii = ((ii % static_cast<long>(h)) + static_cast<long>(h)) % static_cast<long>(h);
            jj = ((jj % static_cast<long>(w)) + static_cast<long>(w)) % static_cast<long>(w);
        } else if (ii < 0 || ii >= static_cast<long>(h) || jj < 0 || jj >= static_cast<long>(w)) {
            continue;
        }
        taps[count++] = Tap{static_cast<std::size_t>(ii), static_cast<std::size_t>(jj), ws[t]};
    }
    return count;
}

/// Forward integer map p -> g(p) for exact quarter-turn elements.
std::pair<std::size_t, std::size_t> exact_forward(const PlanarDiscrete& g, std::size_t h,
                                                  std::size_t w, std::size_t i, std::size_t j) {
    std::size_t ii = i, jj = g.r ? (w - 1 - j) : j;  // flip applied first
    const int q90 = ((4 * g.k / g.n) % 4 + 4) % 4;
    switch (q90) {
        case 0:
            return {ii, jj};
        case 1:
            return {h - 1 - jj, ii};
        case 2:
            return {h - 1 - ii, w - 1 - jj};
        default:
            return {jj, w - 1 - ii};
    }
}

}  // namespace

// ---- init / conversion -------------------------------------------------------

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<double> data(numel(shape));
    for (double& v : data) v = rng.uniform(-a, a);
    return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor tensor_from_matrix(const Eigen::MatrixXd& m) {
    std::vector<double> data(static_cast<std::size_t>(m.rows() * m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            data[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    return Tensor::from_data({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                             std::move(data));
}

Eigen::MatrixXd matrix_from_tensor(const Tensor& t) {
    if (t.ndim() != 2) throw ShapeError("matrix_from_tensor: expected 2-D, got " + shape_str(t.shape()));
    Eigen::MatrixXd m(t.shape()[0], t.shape()[1]);
    for (std::size_t i = 0; i < t.shape()[0]; ++i)
        for (std::size_t j = 0; j < t.shape()[1]; ++j) m(i, j) = t.data()[i * t.shape()[1] + j];
    return m;
}

Image image_from_tensor(const Tensor& t) {
    if (t.ndim() != 3) throw ShapeError("image_from_tensor: expected [C,H,W], got " + shape_str(t.shape()));
    Image img;
    img.channels = t.shape()[0];
    img.height = t.shape()[1];
    img.width = t.shape()[2];
    img.data = t.data();
    return img;
}

Tensor tensor_from_image(const Image& img) {
    return Tensor::from_data({img.channels, img.height, img.width}, img.data);
}

// ---- linear / mlp --------------------------------------------------------------

LinearLayer::LinearLayer(ParameterStore& ps, const std::string& prefix, std::size_t in,
                         std::size_t out, Rng& rng, bool bias) {
    W = ps.add(prefix + ".w", init_uniform({out, in}, in, rng));
    if (bias) b = ps.add(prefix + ".b", init_uniform({out}, in, rng));
}

Tensor LinearLayer::forward(const Tensor& x) const {
    Tensor y = matmul(x, transpose(W));
    if (b.defined()) y = add_rowvec(y, b);
    return y;
}

Mlp::Mlp(ParameterStore& ps, const std::string& prefix, const std::vector<std::size_t>& widths,
         Rng& rng, Activation hidden_act)
    : hidden(hidden_act) {
    if (widths.size() < 2) throw std::invalid_argument("mlp: need at least input and output width");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        layers.emplace_back(ps, prefix + "." + std::to_string(i), widths[i], widths[i + 1], rng);
}

Tensor Mlp::forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward(h);
        if (i + 1 < layers.size()) {
            if (hidden == Activation::Relu) h = relu(h);
            else if (hidden == Activation::Tanh) h = tanh(h);
        }
    }
    return h;
}

// ---- convolution ----------------------------------------------------------------

namespace {

struct ConvDims {
    std::size_t batch, cin, h, w, cout, k, stride, oh, ow, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, std::size_t stride) {
    if (x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] ||
        w.shape()[2] != w.shape()[3] || w.shape()[2] % 2 == 0)
        throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
    ConvDims d;
    d.batch = x.shape()[0];
    d.cin = x.shape()[1];
    d.h = x.shape()[2];
    d.w = x.shape()[3];
    d.cout = w.shape()[0];
    d.k = w.shape()[2];
    d.stride = stride == 0 ? 1 : stride;
    d.pad = (d.k - 1) / 2;
    d.oh = (d.h + 2 * d.pad - d.k) / d.stride + 1;
    d.ow = (d.w + 2 * d.pad - d.k) / d.stride + 1;
    return d;
}

void im2col(const std::vector<double>& x, const ConvDims& d, PadMode pad,
            std::vector<double>& cols) {
    const std::size_t patch = d.cin * d.k * d.k;
    const bool wrap = pad == PadMode::Circular;
    cols.assign(d.batch * d.oh * d.ow * patch, 0.0);
    std::size_t row = 0;
    for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t oi = 0; oi < d.oh; ++oi)
            for (std::size_t oj = 0; oj < d.ow; ++oj, ++row) {
                double* dst = cols.data() + row * patch;
                for (std::size_t c = 0; c < d.cin; ++c) {
                    const double* src = x.data() + (b * d.cin + c) * d.h * d.w;
                    for (std::size_t di = 0; di < d.k; ++di) {
                        const long ii0 = static_cast<long>(oi * d.stride + di) -
                                         static_cast<long>(d.pad);
                        long ii = ii0;
                        if (wrap)
                            ii = ((ii % static_cast<long>(d.h)) + static_cast<long>(d.h)) %
                                 static_cast<long>(d.h);
                        for (std::size_t dj = 0; dj < d.k; ++dj) {
                            long jj = static_cast<long>(oj * d.stride + dj) -
                                      static_cast<long>(d.pad);
                            if (wrap)
                                jj = ((jj % static_cast<long>(d.w)) + static_cast<long>(d.w)) %
                                     static_cast<long>(d.w);
                            double v = 0.0;
                            if (ii >= 0 && ii < static_cast<long>(d.h) && jj >= 0 &&
                                jj < static_cast<long>(d.w))
                                v = src[ii * static_cast<long>(d.w) + jj];
                            dst[(c * d.k + di) * d.k + dj] = v;
                        }
                    }
                }
            }
}

void col2im(const std::vector<double>& cols, const ConvDims& d, PadMode pad,
            std::vector<double>& dx) {
    const std::size_t patch = d.cin * d.k * d.k;
    const bool wrap = pad == PadMode::Circular;
    std::size_t row = 0;
    for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t oi = 0; oi < d.oh; ++oi)
            for (std::size_t oj = 0; oj < d.ow; ++oj, ++row) {
                const double* src = cols.data() + row * patch;
                for (std::size_t c = 0; c < d.cin; ++c) {
                    double* dst = dx.data() + (b * d.cin + c) * d.h * d.w;
                    for (std::size_t di = 0; di < d.k; ++di) {
                        long ii = static_cast<long>(oi * d.stride + di) - static_cast<long>(d.pad);
                        if (wrap)
                            ii = ((ii % static_cast<long>(d.h)) + static_cast<long>(d.h)) %
                                 static_cast<long>(d.h);
                        else if (ii < 0 || ii >= static_cast<long>(d.h))
                            continue;
                        for (std::size_t dj = 0; dj < d.k; ++dj) {
                            long jj = static_cast<long>(oj * d.stride + dj) -
                                      static_cast<long>(d.pad);
                            if (wrap)
                                jj = ((jj % static_cast<long>(d.w)) + static_cast<long>(d.w)) %
                                     static_cast<long>(d.w);
                            else if (jj < 0 || jj >= static_cast<long>(d.w))
                                continue;
                            dst[ii * static_cast<long>(d.w) + jj] += src[(c * d.k + di) * d.k + dj];
                        }
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, PadMode pad) {
    ConvDims d = conv_dims(x, w, stride);
    if (!b.defined() || b.ndim() != 1 || b.shape()[0] != d.cout)
        throw ShapeError("conv2d: bias must be [" + std::to_string(d.cout) + "]");
    const std::size_t patch = d.cin * d.k * d.k;
    const std::size_t rows = d.batch * d.oh * d.ow;

    std::vector<double> cols;
    im2col(x.data(), d, pad, cols);
    std::vector<double> out_mat(rows * d.cout);
    {
        ConstMatMap C(cols.data(), rows, patch);
        ConstMatMap Wm(w.data().data(), d.cout, patch);
        MatMap O(out_mat.data(), rows, d.cout);
        O.noalias() = C * Wm.transpose();
    }
    std::vector<double> out(d.batch * d.cout * d.oh * d.ow);
    {
        std::size_t row = 0;
        for (std::size_t bb = 0; bb < d.batch; ++bb)
            for (std::size_t oi = 0; oi < d.oh; ++oi)
                for (std::size_t oj = 0; oj < d.ow; ++oj, ++row)
                    for (std::size_t co = 0; co < d.cout; ++co)
                        out[((bb * d.cout + co) * d.oh + oi) * d.ow + oj] =
                            out_mat[row * d.cout + co] + b.data()[co];
    }

    std::vector<double> x_copy = x.data();
    std::vector<double> w_copy = w.data();
    return make_op(
        {d.batch, d.cout, d.oh, d.ow}, std::move(out), {x, w, b},
        [d, pad, patch, rows, x_copy = std::move(x_copy), w_copy = std::move(w_copy)](
            const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
            // reshape upstream to [rows, cout]
            std::vector<double> up_mat(rows * d.cout);
            std::size_t row = 0;
            for (std::size_t bb = 0; bb < d.batch; ++bb)
                for (std::size_t oi = 0; oi < d.oh; ++oi)
                    for (std::size_t oj = 0; oj < d.ow; ++oj, ++row)
                        for (std::size_t co = 0; co < d.cout; ++co)
                            up_mat[row * d.cout + co] =
                                up[((bb * d.cout + co) * d.oh + oi) * d.ow + oj];
            if (pg[2]) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t co = 0; co < d.cout; ++co)
                        (*pg[2])[co] += up_mat[r * d.cout + co];
            }
            if (pg[1]) {
                std::vector<double> cols;
                im2col(x_copy, d, pad, cols);
                ConstMatMap U(up_mat.data(), rows, d.cout);
                ConstMatMap C(cols.data(), rows, patch);
                MatMap GW(pg[1]->data(), d.cout, patch);
                GW.noalias() += U.transpose() * C;
            }
            if (pg[0]) {
                std::vector<double> dcols(rows * patch);
                ConstMatMap U(up_mat.data(), rows, d.cout);
                ConstMatMap Wm(w_copy.data(), d.cout, patch);
                MatMap DC(dcols.data(), rows, patch);
                DC.noalias() = U * Wm;
                col2im(dcols, d, pad, *pg[0]);
            }
        });
}

Tensor standardize_channels(const Tensor& x, double eps) {
    if (x.ndim() != 4) throw ShapeError("standardize_channels: expected [B,C,H,W], got " +
                                        shape_str(x.shape()));
    const std::size_t groups = x.shape()[0] * x.shape()[1];
    const std::size_t spatial = x.shape()[2] * x.shape()[3];
    std::vector<double> out(x.size()), inv_sigma(groups), yhat(x.size());
    for (std::size_t g = 0; g < groups; ++g) {
        std::span<const double> vals(x.data().data() + g * spatial, spatial);
        const double mu = stable_mean(vals);
        std::vector<double> sq(spatial);
        for (std::size_t i = 0; i < spatial; ++i) {
            const double dv = vals[i] - mu;
            sq[i] = dv * dv;
        }
        const double var = stable_mean(sq);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_sigma[g] = inv;
        for (std::size_t i = 0; i < spatial; ++i) {
            const double v = (vals[i] - mu) * inv;
            out[g * spatial + i] = v;
            yhat[g * spatial + i] = v;
        }
    }
    return make_op(x.shape(), std::move(out), {x},
                   [groups, spatial, inv_sigma = std::move(inv_sigma), yhat = std::move(yhat)](
                       const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
                       if (!pg[0]) return;
                       for (std::size_t g = 0; g < groups; ++g) {
                           double mean_up = 0.0, mean_upy = 0.0;
                           for (std::size_t i = 0; i < spatial; ++i) {
                               mean_up += up[g * spatial + i];
                               mean_upy += up[g * spatial + i] * yhat[g * spatial + i];
                           }
                           mean_up /= static_cast<double>(spatial);
                           mean_upy /= static_cast<double>(spatial);
                           for (std::size_t i = 0; i < spatial; ++i)
                               (*pg[0])[g * spatial + i] +=
                                   inv_sigma[g] * (up[g * spatial + i] - mean_up -
                                                   yhat[g * spatial + i] * mean_upy);
                       }
                   });
}

Tensor global_mean_pool(const Tensor& x) {
    if (x.ndim() != 4) throw ShapeError("global_mean_pool: expected [B,C,H,W], got " +
                                        shape_str(x.shape()));
    const std::size_t groups = x.shape()[0] * x.shape()[1];
    const std::size_t spatial = x.shape()[2] * x.shape()[3];
    std::vector<double> out(groups);
    for (std::size_t g = 0; g < groups; ++g)
        out[g] = stable_mean(std::span<const double>(x.data().data() + g * spatial, spatial));
    return make_op({x.shape()[0], x.shape()[1]}, std::move(out), {x},
                   [groups, spatial](const std::vector<double>& up,
                                     const std::vector<std::vector<double>*>& pg) {
                       if (!pg[0]) return;
                       const double inv = 1.0 / static_cast<double>(spatial);
                       for (std::size_t g = 0; g < groups; ++g)
                           for (std::size_t i = 0; i < spatial; ++i)
                               (*pg[0])[g * spatial + i] += up[g] * inv;
                   });
}

Cnn::Cnn(ParameterStore& ps, const std::string& prefix, const CnnSpec& s, Rng& rng) : spec(s) {
    if (s.channels.size() != s.strides.size())
        throw std::invalid_argument("cnn: channels and strides must have equal length");
    std::size_t cin = s.in_channels;
    std::size_t hw = s.image_hw;
    for (std::size_t i = 0; i < s.channels.size(); ++i) {
        const std::size_t cout = s.channels[i];
        const std::size_t fan_in = cin * s.kernel * s.kernel;
        conv_w.push_back(ps.add(prefix + ".conv" + std::to_string(i) + ".w",
                                init_uniform({cout, cin, s.kernel, s.kernel}, fan_in, rng)));
        conv_b.push_back(ps.add(prefix + ".conv" + std::to_string(i) + ".b",
                                init_uniform({cout}, fan_in, rng)));
        cin = cout;
        hw = (hw + 2 * ((s.kernel - 1) / 2) - s.kernel) / s.strides[i] + 1;
    }
    final_hw = hw;
    const std::size_t head_in = s.head == CnnHead::Flatten ? cin * hw * hw : cin;
    fc1 = LinearLayer(ps, prefix + ".fc1", head_in, s.fc_hidden, rng);
    fc2 = LinearLayer(ps, prefix + ".fc2", s.fc_hidden, s.n_out, rng);
}

Tensor Cnn::forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
        h = conv2d(h, conv_w[i], conv_b[i], spec.strides[i], spec.pad);
        // the last conv layer feeds the global mean pool: standardizing it
        // would zero the pooled features, so normalization stops one short
        if (spec.standardize && i + 1 < conv_w.size()) h = standardize_channels(h);
        h = relu(h);
    }
    Tensor features;
    if (spec.head == CnnHead::Flatten) {
        const std::size_t b = h.shape()[0];
        features = reshape(h, {b, h.shape()[1] * h.shape()[2] * h.shape()[3]});
    } else {
        features = global_mean_pool(h);  // [B, C], permutation-stable
    }
    Tensor z = relu(fc1.forward(features));
    return fc2.forward(z);
}

// ---- vector-channel layers ---------------------------------------------------

Tensor vn_linear(const Tensor& w, const Tensor& v) {
    if (w.ndim() != 2 || v.ndim() != 3 || w.shape()[1] != v.shape()[0])
        throw ShapeError("vn_linear: incompatible shapes " + shape_str(w.shape()) + " and " +
                         shape_str(v.shape()));
    const std::size_t cin = v.shape()[0], n = v.shape()[1], d = v.shape()[2];
    const std::size_t cout = w.shape()[0];
    // hand-rolled channel mix: every point sees the identical accumulation
    // order, so permuting points permutes outputs bit-exactly
    std::vector<double> out(cout * n * d, 0.0);
    const auto& wd = w.data();
    const auto& vd = v.data();
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t c = 0; c < cin; ++c) {
            const double wv = wd[o * cin + c];
            const double* __restrict src = vd.data() + c * n * d;
            double* __restrict dst = out.data() + o * n * d;
            for (std::size_t t = 0; t < n * d; ++t) dst[t] += wv * src[t];
        }
    std::vector<double> w_copy = wd, v_copy = vd;
    return make_op({cout, n, d}, std::move(out), {w, v},
                   [cin, cout, nd = n * d, w_copy = std::move(w_copy),
                    v_copy = std::move(v_copy)](const std::vector<double>& up,
                                                const std::vector<std::vector<double>*>& pg) {
                       for (std::size_t o = 0; o < cout; ++o)
                           for (std::size_t c = 0; c < cin; ++c) {
                               if (pg[0]) {
                                   double s = 0.0;
                                   for (std::size_t t = 0; t < nd; ++t)
                                       s += up[o * nd + t] * v_copy[c * nd + t];
                                   (*pg[0])[o * cin + c] += s;
                               }
                               if (pg[1]) {
                                   const double wv = w_copy[o * cin + c];
                                   double* __restrict dst = pg[1]->data() + c * nd;
                                   const double* __restrict src = up.data() + o * nd;
                                   for (std::size_t t = 0; t < nd; ++t) dst[t] += wv * src[t];
                               }
                           }
                   });
}

Tensor vn_project(const Tensor& v, const Tensor& q,
                  const std::shared_ptr<std::size_t>& degenerate_count) {
    if (v.shape() != q.shape() || v.ndim() != 3)
        throw ShapeError("vn_project: incompatible shapes " + shape_str(v.shape()) + " and " +
                         shape_str(q.shape()));
    const std::size_t rows = v.shape()[0] * v.shape()[1];
    const std::size_t d = v.shape()[2];
    std::vector<double> out(v.size());
    const auto& vd = v.data();
    const auto& qd = q.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* vr = vd.data() + r * d;
        const double* qr = qd.data() + r * d;
        double alpha = 0.0, beta = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            alpha += vr[i] * qr[i];
            beta += qr[i] * qr[i];
        }
        double* orow = out.data() + r * d;
        if (beta <= 1e-24) {  // |q| <= 1e-12: degenerate direction passes through
            if (degenerate_count) ++*degenerate_count;
            std::copy_n(vr, d, orow);
        } else if (alpha >= 0.0) {
            std::copy_n(vr, d, orow);
        } else {
            const double s = alpha / beta;
            for (std::size_t i = 0; i < d; ++i) orow[i] = vr[i] - s * qr[i];
        }
    }
    std::vector<double> vc = vd, qc = qd;
    return make_op(v.shape(), std::move(out), {v, q},
                   [rows, d, vc = std::move(vc), qc = std::move(qc)](
                       const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* vr = vc.data() + r * d;
                           const double* qr = qc.data() + r * d;
                           const double* ur = up.data() + r * d;
                           double alpha = 0.0, beta = 0.0;
                           for (std::size_t i = 0; i < d; ++i) {
                               alpha += vr[i] * qr[i];
                               beta += qr[i] * qr[i];
                           }
                           if (beta <= 1e-24 || alpha >= 0.0) {
                               if (pg[0])
                                   for (std::size_t i = 0; i < d; ++i)
                                       (*pg[0])[r * d + i] += ur[i];
                               continue;
                           }
                           double uq = 0.0, uv = 0.0;
                           for (std::size_t i = 0; i < d; ++i) {
                               uq += ur[i] * qr[i];
                               uv += ur[i] * vr[i];
                           }
                           (void)uv;
                           if (pg[0])
                               for (std::size_t i = 0; i < d; ++i)
                                   (*pg[0])[r * d + i] += ur[i] - (uq / beta) * qr[i];
                           if (pg[1]) {
                               // y = v - (alpha / beta) q
                               for (std::size_t i = 0; i < d; ++i)
                                   (*pg[1])[r * d + i] -=
                                       (uq / beta) * vr[i] - 2.0 * alpha * uq * qr[i] / (beta * beta) +
                                       (alpha / beta) * ur[i];
                           }
                       }
                   });
}

namespace {

/// Mean over the middle axis with permutation-stable accumulation, so row
/// permutations of the input produce bit-identical pooled values.
Tensor stable_mean_axis1(const Tensor& x) {
    if (x.ndim() != 3) throw ShapeError("stable_mean_axis1: expected 3-D, got " + shape_str(x.shape()));
    const std::size_t a = x.shape()[0], n = x.shape()[1], b = x.shape()[2];
    if (n == 0) throw ShapeError("stable_mean_axis1: empty middle axis");
    std::vector<double> out(a * b);
    std::vector<double> column(n);
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            for (std::size_t k = 0; k < n; ++k) column[k] = x.data()[(i * n + k) * b + j];
            out[i * b + j] = stable_mean(column);
        }
    return make_op({a, b}, std::move(out), {x},
                   [a, n, b](const std::vector<double>& up,
                             const std::vector<std::vector<double>*>& pg) {
                       if (!pg[0]) return;
                       const double inv = 1.0 / static_cast<double>(n);
                       for (std::size_t i = 0; i < a; ++i)
                           for (std::size_t k = 0; k < n; ++k)
                               for (std::size_t j = 0; j < b; ++j)
                                   (*pg[0])[(i * n + k) * b + j] += up[i * b + j] * inv;
                   });
}

}  // namespace

Tensor vn_mean_pool(const Tensor& v) {
    if (v.ndim() != 3) throw ShapeError("vn_mean_pool: expected [C,N,d], got " + shape_str(v.shape()));
    if (v.shape()[1] == 0) throw ShapeError("vn_mean_pool: empty point set");
    return stable_mean_axis1(v);
}

VnDeepSets::VnDeepSets(ParameterStore& ps, const std::string& prefix, const VnDeepSetsSpec& s,
                       Rng& rng)
    : spec(s) {
    if (s.nonlinear) {
        w1 = ps.add(prefix + ".w1", init_uniform({s.hidden, s.in_channels}, s.in_channels, rng));
        u1 = ps.add(prefix + ".u1", init_uniform({s.hidden, s.hidden}, s.hidden, rng));
        w2 = ps.add(prefix + ".w2", init_uniform({s.out_vectors, s.hidden}, s.hidden, rng));
    } else {
        w1 = ps.add(prefix + ".w1",
                    init_uniform({s.out_vectors, s.in_channels}, s.in_channels, rng));
    }
}

Tensor VnDeepSets::forward(const Tensor& v) const {
    if (!spec.nonlinear) return vn_mean_pool(vn_linear(w1, v));
    Tensor h = vn_linear(w1, v);
    Tensor q = vn_linear(u1, h);
    h = vn_project(h, q, degenerate_directions);
    return vn_mean_pool(vn_linear(w2, h));
}

// ---- group lifting --------------------------------------------------------------

std::vector<PlanarDiscrete> fiber_elements(const GroupSpec& spec) {
    if (spec.kind != GroupKind::Cn && spec.kind != GroupKind::Dn)
        throw GroupError("fiber_elements: expected cn or dn, got " + to_string(spec));
    std::vector<PlanarDiscrete> out;
    for (int k = 0; k < spec.n; ++k) out.push_back(PlanarDiscrete{spec.n, k, false});
    if (spec.kind == GroupKind::Dn)
        for (int k = 0; k < spec.n; ++k) out.push_back(PlanarDiscrete{spec.n, k, true});
    return out;
}

std::vector<std::vector<std::size_t>> fiber_table(const GroupSpec& spec) {
    const auto elems = fiber_elements(spec);
    auto index_of = [&](const PlanarDiscrete& g) -> std::size_t {
        return static_cast<std::size_t>(g.k) + (g.r ? static_cast<std::size_t>(spec.n) : 0u);
    };
    std::vector<std::vector<std::size_t>> table(elems.size(),
                                                std::vector<std::size_t>(elems.size()));
    for (std::size_t m = 0; m < elems.size(); ++m)
        for (std::size_t d = 0; d < elems.size(); ++d)
            table[m][d] = index_of(
                std::get<PlanarDiscrete>(compose(GroupElement{elems[m]}, GroupElement{elems[d]})));
    return table;
}

namespace {

struct SamplePlan {
    // per group element, per filter position: up to 4 taps into the image
    std::vector<std::vector<Tap>> taps;       // flattened: [m][q * 4 + t]
    std::vector<std::vector<std::size_t>> counts;  // [m][q]
};

SamplePlan lifting_plan(const GroupSpec& spec, std::size_t h, std::size_t w, bool wrap) {
    const auto elems = fiber_elements(spec);
    SamplePlan plan;
    plan.taps.resize(elems.size());
    plan.counts.resize(elems.size());
    for (std::size_t m = 0; m < elems.size(); ++m) {
        const auto& g = elems[m];
        plan.taps[m].resize(h * w * 4);
        plan.counts[m].resize(h * w);
        for (std::size_t qi = 0; qi < h; ++qi)
            for (std::size_t qj = 0; qj < w; ++qj) {
                const std::size_t q = qi * w + qj;
                if (planar_is_exact(g)) {
                    auto [pi, pj] = exact_forward(g, h, w, qi, qj);
                    plan.taps[m][q * 4] = Tap{pi, pj, 1.0};
                    plan.counts[m][q] = 1;
                } else {
                    auto [pi, pj] = planar_apply_pos(g, h, w, static_cast<double>(qi),
                                                     static_cast<double>(qj));
                    plan.counts[m][q] =
                        position_taps(pi, pj, h, w, wrap, plan.taps[m].data() + q * 4);
                }
            }
    }
    return plan;
}

void check_lifting_shapes(const Tensor& img, const Tensor& w) {
    if (img.ndim() != 3 || w.ndim() != 4 || img.shape()[0] != w.shape()[1] ||
        img.shape()[1] != w.shape()[2] || img.shape()[2] != w.shape()[3] ||
        img.shape()[1] != img.shape()[2])
        throw ShapeError("lifting: filter must match square image, got " + shape_str(img.shape()) +
                         " and " + shape_str(w.shape()));
}

}  // namespace

Tensor lifting_fibers(const Tensor& img, const Tensor& w, const GroupSpec& spec) {
    check_lifting_shapes(img, w);
    const std::size_t c = img.shape()[0], h = img.shape()[1], wd = img.shape()[2];
    const std::size_t hw = h * wd, co = w.shape()[0];
    const auto plan = lifting_plan(spec, h, wd, /*wrap=*/false);
    const std::size_t m_count = plan.taps.size();

    // S[c*hw, m]: image sampled at transformed filter positions, fixed q order
    Eigen::MatrixXd S(c * hw, m_count);
    const auto& px = img.data();
    for (std::size_t m = 0; m < m_count; ++m)
        for (std::size_t cc = 0; cc < c; ++cc)
            for (std::size_t q = 0; q < hw; ++q) {
                double v = 0.0;
                for (std::size_t t = 0; t < plan.counts[m][q]; ++t) {
                    const Tap& tap = plan.taps[m][q * 4 + t];
                    v += tap.w * px[(cc * h + tap.i) * wd + tap.j];
                }
                S(cc * hw + q, m) = v;
            }

    std::vector<double> out(co * m_count);
    {
        ConstMatMap Wm(w.data().data(), co, c * hw);
        MatMap F(out.data(), co, m_count);
        F.noalias() = Wm * S;
    }

    auto splan = std::make_shared<SamplePlan>(plan);
    auto s_copy = std::make_shared<Eigen::MatrixXd>(std::move(S));
    std::vector<double> w_copy = w.data();
    return make_op(
        {co, m_count}, std::move(out), {img, w},
        [c, h, wd, hw, co, m_count, splan, s_copy, w_copy = std::move(w_copy)](
            const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
            ConstMatMap U(up.data(), co, m_count);
            if (pg[1]) {
                MatMap GW(pg[1]->data(), co, c * hw);
                GW.noalias() += U * s_copy->transpose();
            }
            if (pg[0]) {
                ConstMatMap Wm(w_copy.data(), co, c * hw);
                Eigen::MatrixXd DS = Wm.transpose() * U;  // [c*hw, m]
                for (std::size_t m = 0; m < m_count; ++m)
                    for (std::size_t cc = 0; cc < c; ++cc)
                        for (std::size_t q = 0; q < hw; ++q) {
                            const double g = DS(cc * hw + q, m);
                            if (g == 0.0) continue;
                            for (std::size_t t = 0; t < splan->counts[m][q]; ++t) {
                                const Tap& tap = splan->taps[m][q * 4 + t];
                                (*pg[0])[(cc * h + tap.i) * wd + tap.j] += tap.w * g;
                            }
                        }
            }
        });
}

Tensor lifting_fibers_spatial(const Tensor& img, const Tensor& w, const GroupSpec& spec) {
    check_lifting_shapes(img, w);
    const std::size_t c = img.shape()[0], h = img.shape()[1], wd = img.shape()[2];
    const std::size_t hw = h * wd, co = w.shape()[0];
    const auto plan = lifting_plan(spec, h, wd, /*wrap=*/true);
    const std::size_t m_count = plan.taps.size();
    const auto& px = img.data();

    // circulant table: row s holds the image circularly shifted by s, so
    // I(g_m(q) + t) = table[c][flat(g_m(q))][flat(t)]; the fiber then
    // accumulates rows in fixed q order, which keeps the exact-shift
    // equivariance bit-identical across transformed inputs
    thread_local std::vector<double> table;
    table.assign(c * hw * hw, 0.0);
    for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t si = 0; si < h; ++si)
            for (std::size_t sj = 0; sj < wd; ++sj) {
                double* row = table.data() + (cc * hw + si * wd + sj) * hw;
                for (std::size_t ti = 0; ti < h; ++ti) {
                    const double* src = px.data() + (cc * h + (si + ti) % h) * wd;
                    double* dst = row + ti * wd;
                    const std::size_t split = wd - sj;
                    std::copy_n(src + sj, split, dst);
                    std::copy_n(src, sj, dst + split);
                }
            }

    std::vector<double> out(co * m_count * hw, 0.0);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t m = 0; m < m_count; ++m) {
            double* __restrict frow = out.data() + (o * m_count + m) * hw;
            for (std::size_t cc = 0; cc < c; ++cc)
                for (std::size_t q = 0; q < hw; ++q) {
                    const double wv = w.data()[(o * c + cc) * hw + q];
                    for (std::size_t t = 0; t < plan.counts[m][q]; ++t) {
                        const Tap& tap = plan.taps[m][q * 4 + t];
                        const double coeff = wv * tap.w;
                        const double* __restrict row =
                            table.data() + (cc * hw + tap.i * wd + tap.j) * hw;
                        for (std::size_t tt = 0; tt < hw; ++tt) frow[tt] += coeff * row[tt];
                    }
                }
        }

    auto splan = std::make_shared<SamplePlan>(plan);
    std::vector<double> w_copy = w.data();
    std::vector<double> img_copy = px;
    return make_op(
        {co, m_count, hw}, std::move(out), {img, w},
        [c, h, wd, hw, co, m_count, splan, w_copy = std::move(w_copy),
         img_copy = std::move(img_copy)](const std::vector<double>& up,
                                         const std::vector<std::vector<double>*>& pg) {
            Eigen::MatrixXd R(c * hw, hw);
            for (std::size_t m = 0; m < m_count; ++m) {
                // upstream block for this element: [co, hw]
                Eigen::MatrixXd U(co, hw);
                for (std::size_t o = 0; o < co; ++o)
                    for (std::size_t t = 0; t < hw; ++t)
                        U(o, t) = up[(o * m_count + m) * hw + t];
                const bool need_r = pg[1] != nullptr;
                if (need_r) {
                    R.setZero();
                    for (std::size_t cc = 0; cc < c; ++cc)
                        for (std::size_t q = 0; q < hw; ++q)
                            for (std::size_t t = 0; t < splan->counts[m][q]; ++t) {
                                const Tap& tap = splan->taps[m][q * 4 + t];
                                for (std::size_t ti = 0; ti < h; ++ti) {
                                    const std::size_t si = (tap.i + ti) % h;
                                    const double* src = img_copy.data() + (cc * h + si) * wd;
                                    for (std::size_t tj = 0; tj < wd; ++tj)
                                        R(cc * hw + q, ti * wd + tj) +=
                                            tap.w * src[(tap.j + tj) % wd];
                                }
                            }
                    MatMap GW(pg[1]->data(), co, c * hw);
                    GW.noalias() += U * R.transpose();
                }
                if (pg[0]) {
                    ConstMatMap Wm(w_copy.data(), co, c * hw);
                    Eigen::MatrixXd DR = Wm.transpose() * U;  // [c*hw, hw]
                    for (std::size_t cc = 0; cc < c; ++cc)
                        for (std::size_t q = 0; q < hw; ++q)
                            for (std::size_t t = 0; t < splan->counts[m][q]; ++t) {
                                const Tap& tap = splan->taps[m][q * 4 + t];
                                for (std::size_t ti = 0; ti < h; ++ti) {
                                    const std::size_t si = (tap.i + ti) % h;
                                    double* dst = pg[0]->data() + (cc * h + si) * wd;
                                    for (std::size_t tj = 0; tj < wd; ++tj)
                                        dst[(tap.j + tj) % wd] +=
                                            tap.w * DR(cc * hw + q, ti * wd + tj);
                                }
                            }
                }
            }
        });
}

namespace {

Tensor group_conv_impl(const Tensor& f, const Tensor& w, const GroupSpec& spec,
                       std::size_t spatial) {
    const auto table = fiber_table(spec);
    const std::size_t m_count = table.size();
    if (w.ndim() != 3 || w.shape()[2] != m_count || w.shape()[1] != f.shape()[0])
        throw ShapeError("group_conv1x1: incompatible shapes " + shape_str(f.shape()) + " and " +
                         shape_str(w.shape()));
    if (f.shape()[1] != m_count)
        throw ShapeError("group_conv1x1: fiber axis of " + shape_str(f.shape()) +
                         " does not match group order " + std::to_string(m_count));
    const std::size_t cin = f.shape()[0], cout = w.shape()[0];
    Shape out_shape = spatial > 1 ? Shape{cout, m_count, spatial} : Shape{cout, m_count};
    std::vector<double> out(cout * m_count * spatial, 0.0);
    const auto& fd = f.data();
    const auto& wd = w.data();
    // iterate the relative element in fixed order: the same term sequence is
    // produced for shifted inputs, keeping fiber-shift equivariance bit-exact
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t m = 0; m < m_count; ++m) {
            double* orow = out.data() + (o * m_count + m) * spatial;
            for (std::size_t cc = 0; cc < cin; ++cc)
                for (std::size_t dd = 0; dd < m_count; ++dd) {
                    const double wv = wd[(o * cin + cc) * m_count + dd];
                    const double* frow = fd.data() + (cc * m_count + table[m][dd]) * spatial;
                    for (std::size_t t = 0; t < spatial; ++t) orow[t] += wv * frow[t];
                }
        }
    std::vector<double> f_copy = fd, w_copy = wd;
    auto tbl = std::make_shared<std::vector<std::vector<std::size_t>>>(table);
    return make_op(out_shape, std::move(out), {f, w},
                   [cin, cout, m_count, spatial, tbl, f_copy = std::move(f_copy),
                    w_copy = std::move(w_copy)](const std::vector<double>& up,
                                                const std::vector<std::vector<double>*>& pg) {
                       for (std::size_t o = 0; o < cout; ++o)
                           for (std::size_t m = 0; m < m_count; ++m) {
                               const double* urow = up.data() + (o * m_count + m) * spatial;
                               for (std::size_t cc = 0; cc < cin; ++cc)
                                   for (std::size_t dd = 0; dd < m_count; ++dd) {
                                       const std::size_t fi =
                                           (cc * m_count + (*tbl)[m][dd]) * spatial;
                                       if (pg[1]) {
                                           double s = 0.0;
                                           for (std::size_t t = 0; t < spatial; ++t)
                                               s += urow[t] * f_copy[fi + t];
                                           (*pg[1])[(o * cin + cc) * m_count + dd] += s;
                                       }
                                       if (pg[0]) {
                                           const double wv = w_copy[(o * cin + cc) * m_count + dd];
                                           for (std::size_t t = 0; t < spatial; ++t)
                                               (*pg[0])[fi + t] += wv * urow[t];
                                       }
                                   }
                           }
                   });
}

}  // namespace

Tensor group_conv1x1(const Tensor& f, const Tensor& w, const GroupSpec& spec) {
    if (f.ndim() != 2) throw ShapeError("group_conv1x1: expected [C,|G|], got " + shape_str(f.shape()));
    return group_conv_impl(f, w, spec, 1);
}

Tensor group_conv1x1_spatial(const Tensor& f, const Tensor& w, const GroupSpec& spec) {
    if (f.ndim() != 3) throw ShapeError("group_conv1x1_spatial: expected [C,|G|,T], got " +
                                        shape_str(f.shape()));
    return group_conv_impl(f, w, spec, f.shape()[2]);
}

Tensor fiber_logits(const Tensor& f) {
    if (f.ndim() == 2) {
        const std::size_t c = f.shape()[0], m = f.shape()[1];
        std::vector<double> out(m, 0.0);
        for (std::size_t mm = 0; mm < m; ++mm) {
            for (std::size_t cc = 0; cc < c; ++cc) out[mm] += f.data()[cc * m + mm];
            out[mm] /= static_cast<double>(c);
        }
        return make_op({m}, std::move(out), {f},
                       [c, m](const std::vector<double>& up,
                              const std::vector<std::vector<double>*>& pg) {
                           if (!pg[0]) return;
                           for (std::size_t cc = 0; cc < c; ++cc)
                               for (std::size_t mm = 0; mm < m; ++mm)
                                   (*pg[0])[cc * m + mm] += up[mm] / static_cast<double>(c);
                       });
    }
    if (f.ndim() != 3) throw ShapeError("fiber_logits: expected [C,|G|] or [C,|G|,T], got " +
                                        shape_str(f.shape()));
    const std::size_t c = f.shape()[0], m = f.shape()[1], t = f.shape()[2];
    std::vector<double> out(m, 0.0);
    for (std::size_t mm = 0; mm < m; ++mm) {
        for (std::size_t cc = 0; cc < c; ++cc)
            out[mm] += stable_mean(
                std::span<const double>(f.data().data() + (cc * m + mm) * t, t));
        out[mm] /= static_cast<double>(c);
    }
    return make_op({m}, std::move(out), {f},
                   [c, m, t](const std::vector<double>& up,
                             const std::vector<std::vector<double>*>& pg) {
                       if (!pg[0]) return;
                       const double inv = 1.0 / static_cast<double>(c * t);
                       for (std::size_t cc = 0; cc < c; ++cc)
                           for (std::size_t mm = 0; mm < m; ++mm)
                               for (std::size_t tt = 0; tt < t; ++tt)
                                   (*pg[0])[(cc * m + mm) * t + tt] += up[mm] * inv;
                   });
}

Tensor act_image_op(const Tensor& img, const PlanarDiscrete& g) {
    if (img.ndim() != 3 || img.shape()[1] != img.shape()[2])
        throw ShapeError("act_image_op: expected square [C,H,W], got " + shape_str(img.shape()));
    const std::size_t c = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
    Image in = image_from_tensor(img);
    Image rot = act_image(g, in);
    // record sampling taps for the adjoint
    auto taps = std::make_shared<std::vector<Tap>>(h * w * 4);
    auto counts = std::make_shared<std::vector<std::size_t>>(h * w);
    const bool exact = planar_is_exact(g);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t p = i * w + j;
            auto [si, sj] = planar_sample_pos(g, h, w, static_cast<double>(i),
                                              static_cast<double>(j));
            if (exact) {
                (*taps)[p * 4] = Tap{static_cast<std::size_t>(std::llround(si)),
                                     static_cast<std::size_t>(std::llround(sj)), 1.0};
                (*counts)[p] = 1;
            } else {
                (*counts)[p] = position_taps(si, sj, h, w, false, taps->data() + p * 4);
            }
        }
    return make_op({c, h, w}, std::move(rot.data), {img},
                   [c, h, w, taps, counts](const std::vector<double>& up,
                                           const std::vector<std::vector<double>*>& pg) {
                       if (!pg[0]) return;
                       for (std::size_t cc = 0; cc < c; ++cc)
                           for (std::size_t p = 0; p < h * w; ++p)
                               for (std::size_t t = 0; t < (*counts)[p]; ++t) {
                                   const Tap& tap = (*taps)[p * 4 + t];
                                   (*pg[0])[(cc * h + tap.i) * w + tap.j] +=
                                       tap.w * up[cc * h * w + p];
                               }
                   });
}

Tensor avg_pool2_stable(const Tensor& img) {
    if (img.ndim() != 3 || img.shape()[1] % 2 != 0 || img.shape()[2] % 2 != 0)
        throw ShapeError("avg_pool2_stable: expected [C,even,even], got " + shape_str(img.shape()));
    const std::size_t c = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<double> out(c * oh * ow);
    for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                double v[4] = {img.data()[(cc * h + 2 * i) * w + 2 * j],
                               img.data()[(cc * h + 2 * i) * w + 2 * j + 1],
                               img.data()[(cc * h + 2 * i + 1) * w + 2 * j],
                               img.data()[(cc * h + 2 * i + 1) * w + 2 * j + 1]};
                // sorted four-value sum: rotating the block permutes the
                // values but leaves the sum bit-identical
                std::sort(v, v + 4);
                out[(cc * oh + i) * ow + j] = (v[0] + v[1] + v[2] + v[3]) * 0.25;
            }
    return make_op({c, oh, ow}, std::move(out), {img},
                   [c, h, w, oh, ow](const std::vector<double>& up,
                                     const std::vector<std::vector<double>*>& pg) {
                       if (!pg[0]) return;
                       for (std::size_t cc = 0; cc < c; ++cc)
                           for (std::size_t i = 0; i < oh; ++i)
                               for (std::size_t j = 0; j < ow; ++j) {
                                   const double g = up[(cc * oh + i) * ow + j] * 0.25;
                                   (*pg[0])[(cc * h + 2 * i) * w + 2 * j] += g;
                                   (*pg[0])[(cc * h + 2 * i) * w + 2 * j + 1] += g;
                                   (*pg[0])[(cc * h + 2 * i + 1) * w + 2 * j] += g;
                                   (*pg[0])[(cc * h + 2 * i + 1) * w + 2 * j + 1] += g;
                               }
                   });
}

// ---- graph network ----------------------------------------------------------

Tensor scatter_mean_rows(const Tensor& messages, const std::vector<std::size_t>& dst,
                         std::size_t n_rows) {
    if (messages.ndim() != 2 || messages.shape()[0] != dst.size())
        throw ShapeError("scatter_mean_rows: message shape " + shape_str(messages.shape()) +
                         " does not match " + std::to_string(dst.size()) + " edges");
    const std::size_t e = dst.size(), f = messages.shape()[1];
    std::vector<double> counts(n_rows, 0.0);
    for (std::size_t i : dst) {
        if (i >= n_rows) throw ShapeError("scatter_mean_rows: destination out of range");
        counts[i] += 1.0;
    }
    std::vector<double> out(n_rows * f, 0.0);
    for (std::size_t ee = 0; ee < e; ++ee)
        for (std::size_t j = 0; j < f; ++j) out[dst[ee] * f + j] += messages.data()[ee * f + j];
    for (std::size_t r = 0; r < n_rows; ++r)
        if (counts[r] > 0.0)
            for (std::size_t j = 0; j < f; ++j) out[r * f + j] /= counts[r];
    auto dst_copy = std::make_shared<std::vector<std::size_t>>(dst);
    auto counts_copy = std::make_shared<std::vector<double>>(std::move(counts));
    return make_op({n_rows, f}, std::move(out), {messages},
                   [e, f, dst_copy, counts_copy](const std::vector<double>& up,
                                                 const std::vector<std::vector<double>*>& pg) {
                       if (!pg[0]) return;
                       for (std::size_t ee = 0; ee < e; ++ee) {
                           const std::size_t r = (*dst_copy)[ee];
                           const double inv = 1.0 / (*counts_copy)[r];
                           for (std::size_t j = 0; j < f; ++j)
                               (*pg[0])[ee * f + j] += up[r * f + j] * inv;
                       }
                   });
}

Gnn::Gnn(ParameterStore& ps, const std::string& prefix, const GnnSpec& s, Rng& rng) : spec(s) {
    embed = Mlp(ps, prefix + ".embed", {s.node_features, s.hidden}, rng);
    for (std::size_t l = 0; l < s.layers; ++l) {
        edge_mlps.emplace_back(ps, prefix + ".edge" + std::to_string(l),
                               std::vector<std::size_t>{2 * s.hidden + s.edge_features, s.hidden,
                                                        s.hidden},
                               rng);
        node_mlps.emplace_back(ps, prefix + ".node" + std::to_string(l),
                               std::vector<std::size_t>{2 * s.hidden, s.hidden, s.hidden}, rng);
    }
    decode = Mlp(ps, prefix + ".decode", {s.hidden, s.hidden, s.n_out}, rng);
}

Tensor Gnn::forward(const Tensor& nodes, const std::vector<std::size_t>& src,
                    const std::vector<std::size_t>& dst, const Tensor& edge_feat) const {
    const std::size_t n = nodes.shape()[0];
    Tensor h = embed.forward(nodes);
    for (std::size_t l = 0; l < edge_mlps.size(); ++l) {
        Tensor agg;
        if (!src.empty()) {
            Tensor hs = gather_rows(h, src);
            Tensor hd = gather_rows(h, dst);
            Tensor m = edge_mlps[l].forward(concat({hs, hd, edge_feat}, 1));
            agg = scatter_mean_rows(m, dst, n);
        } else {
            agg = Tensor::zeros({n, spec.hidden});
        }
        Tensor upd = node_mlps[l].forward(concat({h, agg}, 1));
        h = add(h, upd);  // residual update
    }
    return decode.forward(h);
}

// ---- set predictor -------------------------------------------------------------

DeepSetsNet::DeepSetsNet(ParameterStore& ps, const std::string& prefix, const DeepSetsSpec& s,
                         Rng& rng)
    : spec(s) {
    phi = Mlp(ps, prefix + ".phi", {s.in_features, s.phi_hidden, s.phi_out}, rng);
    rho = Mlp(ps, prefix + ".rho", {s.phi_out, s.rho_hidden, s.n_out}, rng);
}

Tensor DeepSetsNet::forward(const Tensor& x) const {
    if (x.ndim() != 3) throw ShapeError("deepsets: expected [B,N,F], got " + shape_str(x.shape()));
    const std::size_t b = x.shape()[0], n = x.shape()[1], f = x.shape()[2];
    Tensor flat = reshape(x, {b * n, f});
    Tensor feats = phi.forward(flat);
    Tensor pooled = stable_mean_axis1(reshape(feats, {b, n, spec.phi_out}));
    return rho.forward(pooled);
}

// ---- group-convolution baseline --------------------------------------------------

GcnnBaseline::GcnnBaseline(const GroupSpec& g, std::size_t ch, std::size_t n_out, Rng& rng)
    : group(g), channels(ch) {
    const auto elems = fiber_elements(g);
    const std::size_t m = elems.size();
    lift_w = Eigen::MatrixXd(ch, kernel * kernel);
    for (Eigen::Index i = 0; i < lift_w.size(); ++i)
        lift_w.data()[i] = rng.uniform(-0.3, 0.3);
    gconv_w.resize(ch * ch * m * 9);
    for (double& v : gconv_w) v = rng.uniform(-0.2, 0.2);
    head = Eigen::MatrixXd(n_out, ch);
    for (Eigen::Index i = 0; i < head.size(); ++i) head.data()[i] = rng.uniform(-0.3, 0.3);
    table = fiber_table(g);

    const long kc = static_cast<long>(kernel / 2);
    stencil_offsets.resize(m);
    lift_offsets.resize(m);
    for (std::size_t mi = 0; mi < m; ++mi) {
        const Eigen::Matrix2d rot = planar_matrix(elems[mi]);
        lift_offsets[mi].resize(kernel * kernel * 2);
        for (std::size_t di = 0; di < kernel; ++di)
            for (std::size_t dj = 0; dj < kernel; ++dj) {
                const double y = -(static_cast<double>(di) - kc),
                             x = static_cast<double>(dj) - kc;
                const Eigen::Vector2d p = rot * Eigen::Vector2d(x, y);
                lift_offsets[mi][(di * kernel + dj) * 2] = -p.y();
                lift_offsets[mi][(di * kernel + dj) * 2 + 1] = p.x();
            }
        stencil_offsets[mi].resize(9);
        for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
                const Eigen::Vector2d p = rot * Eigen::Vector2d(dj, -di);
                stencil_offsets[mi][static_cast<std::size_t>((di + 1) * 3 + (dj + 1))] = {
                    std::llround(-p.y()), std::llround(p.x())};
            }
    }
}

std::vector<double> GcnnBaseline::forward(const Image& img) const {
    const std::size_t m_count = table.size();
    const std::size_t h = img.height, w = img.width;

    // lifting: correlate each rotated filter copy across the image
    std::vector<double> f1(channels * m_count * h * w, 0.0);
    for (std::size_t m = 0; m < m_count; ++m)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    double acc = 0.0;
                    for (std::size_t q = 0; q < kernel * kernel; ++q) {
                        const double pi = static_cast<double>(i) + lift_offsets[m][q * 2];
                        const double pj = static_cast<double>(j) + lift_offsets[m][q * 2 + 1];
                        acc += lift_w(c, q) * bilinear_sample(img, 0, pi, pj);
                    }
                    f1[((c * m_count + m) * h + i) * w + j] = std::max(acc, 0.0);
                }

    // one 3x3 group convolution with rotated spatial offsets
    std::vector<double> f2(channels * m_count * h * w, 0.0);
    for (std::size_t o = 0; o < channels; ++o)
        for (std::size_t m = 0; m < m_count; ++m) {
            const auto& stencil = stencil_offsets[m];
            double* dst = f2.data() + (o * m_count + m) * h * w;
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t dd = 0; dd < m_count; ++dd) {
                    const double* src = f1.data() + (c * m_count + table[m][dd]) * h * w;
                    const double* wv = gconv_w.data() + ((o * channels + c) * m_count + dd) * 9;
                    for (std::size_t s = 0; s < 9; ++s) {
                        const long oi = stencil[s].first, oj = stencil[s].second;
                        const double wk = wv[s];
                        const long i0 = std::max(0L, -oi),
                                   i1 = std::min<long>(h, static_cast<long>(h) - oi);
                        const long j0 = std::max(0L, -oj),
                                   j1 = std::min<long>(w, static_cast<long>(w) - oj);
                        for (long i = i0; i < i1; ++i) {
                            double* __restrict drow = dst + i * static_cast<long>(w);
                            const double* __restrict srow =
                                src + (i + oi) * static_cast<long>(w) + oj;
                            for (long j = j0; j < j1; ++j) drow[j] += wk * srow[j];
                        }
                    }
                }
            for (std::size_t p = 0; p < h * w; ++p) dst[p] = std::max(dst[p], 0.0);
        }

    // pool fibers and space, linear head
    std::vector<double> pooled(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < m_count * h * w; ++i) s += f2[c * m_count * h * w + i];
        pooled[c] = s / static_cast<double>(m_count * h * w);
    }
    std::vector<double> out(static_cast<std::size_t>(head.rows()), 0.0);
    for (Eigen::Index r = 0; r < head.rows(); ++r)
        for (Eigen::Index c = 0; c < head.cols(); ++c) out[r] += head(r, c) * pooled[c];
    return out;
}

}  // namespace canon
