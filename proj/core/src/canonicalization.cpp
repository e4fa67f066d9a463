#include "canon/canonicalization.hpp"

#include <algorithm>
#include <cmath>

namespace canon {

// ---- Gram-Schmidt -------------------------------------------------------------

Eigen::MatrixXd gram_schmidt(const Eigen::MatrixXd& v) {
    if (v.rows() != v.cols() || v.rows() == 0)
        throw std::invalid_argument("gram_schmidt: expected d x d input vectors");
    const Eigen::Index d = v.cols();
    double max_norm = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) max_norm = std::max(max_norm, v.col(i).norm());
    const double eps_gs = 1e-6 * max_norm;

    Eigen::MatrixXd u = v;
    for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < i; ++j)
            u.col(i) -= (u.col(j).dot(v.col(i)) / u.col(j).squaredNorm()) * u.col(j);
        const double nrm = u.col(i).norm();
        if (nrm <= eps_gs)
            throw DegenerateFrame("gram_schmidt: residual norm " + std::to_string(nrm) +
                                      " below threshold at vector " + std::to_string(i),
                                  static_cast<std::size_t>(i));
        u.col(i) /= nrm;
    }
    return u;
}

Tensor gram_schmidt_op(const Tensor& rows) {
    if (rows.ndim() != 2 || rows.shape()[0] != rows.shape()[1])
        throw ShapeError("gram_schmidt_op: expected [d,d] rows, got " + shape_str(rows.shape()));
    const std::size_t d = rows.shape()[0];
    double max_norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += rows.data()[i * d + j] * rows.data()[i * d + j];
        max_norm = std::max(max_norm, std::sqrt(s));
    }
    const double eps_gs = 1e-6 * max_norm;

    std::vector<Tensor> basis;  // orthonormal rows, each [1, d]
    for (std::size_t i = 0; i < d; ++i) {
        Tensor vi = gather_rows(rows, {i});
        Tensor ui = vi;
        for (std::size_t j = 0; j < i; ++j) {
            Tensor alpha = reshape(batched_dot(basis[j], vi), {});
            ui = sub(ui, mul(alpha, basis[j]));  // basis rows are unit length
        }
        Tensor nrm = reshape(norm_lastaxis(ui), {});
        if (nrm.item() <= eps_gs)
            throw DegenerateFrame("gram_schmidt: residual norm " + std::to_string(nrm.item()) +
                                      " below threshold at vector " + std::to_string(i),
                                  i);
        basis.push_back(div(ui, nrm));
    }
    return concat(basis, 0);
}

// ---- straight-through -----------------------------------------------------------

std::size_t argmax_lowest(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

StraightThrough straight_through_select(const Tensor& fiber_logits) {
    if (fiber_logits.ndim() != 1)
        throw ShapeError("straight_through_select: expected a vector, got " +
                         shape_str(fiber_logits.shape()));
    const std::size_t m = fiber_logits.shape()[0];
    for (double v : fiber_logits.data())
        if (!std::isfinite(v)) throw NumericError("straight_through_select: non-finite logit");

    StraightThrough out;
    out.index = argmax_lowest(fiber_logits.data());
    for (std::size_t i = 0; i < m; ++i)
        if (i != out.index && fiber_logits.data()[i] == fiber_logits.data()[out.index])
            out.unique_argmax = false;

    // softmax of the logits drives the backward pass
    std::vector<double> soft(m);
    {
        double mx = fiber_logits.data()[0];
        for (double v : fiber_logits.data()) mx = std::max(mx, v);
        double z = 0.0;
        for (std::size_t i = 0; i < m; ++i) z += std::exp(fiber_logits.data()[i] - mx);
        for (std::size_t i = 0; i < m; ++i)
            soft[i] = std::exp(fiber_logits.data()[i] - mx) / z;
    }
    std::vector<double> onehot(m, 0.0);
    onehot[out.index] = 1.0;
    out.weights = make_op({m}, std::move(onehot), {fiber_logits},
                          [m, soft = std::move(soft)](const std::vector<double>& up,
                                                      const std::vector<std::vector<double>*>& pg) {
                              if (!pg[0]) return;
                              double dot = 0.0;
                              for (std::size_t i = 0; i < m; ++i) dot += up[i] * soft[i];
                              for (std::size_t i = 0; i < m; ++i)
                                  (*pg[0])[i] += soft[i] * (up[i] - dot);
                          });
    return out;
}

// ---- point-cloud canonicalizer ------------------------------------------------------

PointCloudCanonicalizer::PointCloudCanonicalizer(const PointCloudCanonicalizerSpec& spec,
                                                 std::uint64_t seed)
    : spec_(spec) {
    Rng rng = Rng::seeded(seed);
    VnDeepSetsSpec net_spec = spec.net;
    // Input channels are centered positions under three distinct radial
    // weights plus the offset from a pooled anchor vector (and velocities
    // when present). The radial weights are invariant scalars, so every
    // channel stays equivariant and translation invariant, and the channel
    // means are independent vectors: even a single linear layer pools a
    // full-rank frame. Raw centered positions alone would pool to zero.
    net_spec.in_channels = spec.use_velocities ? 5 : 4;
    net_spec.out_vectors = static_cast<std::size_t>(spec.dim) +
                           (spec.translation == TranslationMode::Learned ? 1 : 0);
    net_ = VnDeepSets(params_, "canonicalizer", net_spec, rng);
    spec_.net = net_spec;
}

PointCloudCanonicalizer::Result PointCloudCanonicalizer::canonicalize(const Tensor& x,
                                                                      const Tensor* v) const {
    if (x.ndim() != 2 || x.shape()[1] != static_cast<std::size_t>(spec_.dim))
        throw ShapeError("canonicalize: expected [N," + std::to_string(spec_.dim) + "], got " +
                         shape_str(x.shape()));
    const std::size_t n = x.shape()[0];
    const std::size_t d = static_cast<std::size_t>(spec_.dim);
    if (n == 0) throw EmptyCloud("canonicalize: empty point cloud");

    Tensor centroid = mean(x, {0});                       // [d]
    Tensor xc = add_rowvec(x, scale(centroid, -1.0));     // centered positions
    // the feature stack is parameter-free, so it is built from values
    const std::size_t c_in = spec_.use_velocities ? 5u : 4u;
    std::vector<double> feat_data;
    feat_data.reserve(c_in * n * d);
    std::vector<double> radius(n);
    for (std::size_t i = 0; i < n; ++i) {
        double r2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) r2 += xc.data()[i * d + j] * xc.data()[i * d + j];
        radius[i] = std::sqrt(r2);
    }
    auto push_weighted = [&](auto weight) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                feat_data.push_back(weight(radius[i]) * xc.data()[i * d + j]);
    };
    push_weighted([](double r) { return r; });
    push_weighted([](double r) { return 1.0 / (1.0 + r); });
    push_weighted([](double r) { return std::exp(-r); });
    {
        // offset from the radius-weighted mean: an equivariant anchor that
        // gives each point a second, non-collinear direction; accumulated
        // permutation-stably so reordered clouds build identical features
        std::vector<double> anchor(d, 0.0), column(n);
        for (std::size_t j = 0; j < d; ++j) {
            for (std::size_t i = 0; i < n; ++i) column[i] = radius[i] * xc.data()[i * d + j];
            anchor[j] = stable_mean(column);
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                feat_data.push_back(xc.data()[i * d + j] - anchor[j]);
    }
    if (spec_.use_velocities) {
        if (!v || v->shape() != x.shape())
            throw ShapeError("canonicalize: velocities required with matching shape");
        feat_data.insert(feat_data.end(), v->data().begin(), v->data().end());
    }
    Tensor feats = Tensor::from_data({c_in, n, d}, std::move(feat_data));
    Tensor pooled = net_.forward(feats);  // [out_vectors, d]

    Result result;
    std::vector<std::size_t> frame_idx(d);
    for (std::size_t i = 0; i < d; ++i) frame_idx[i] = i;
    Tensor frame_vectors = gather_rows(pooled, frame_idx);
    // symmetric clouds pool to (numerically) zero vectors; the relative
    // Gram-Schmidt threshold cannot see that, so an absolute floor guards it
    for (std::size_t i = 0; i < d; ++i) {
        double r2 = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            r2 += frame_vectors.data()[i * d + j] * frame_vectors.data()[i * d + j];
        if (std::sqrt(r2) < 1e-9) {
            if (!spec_.fallback_identity)
                throw DegenerateFrame("canonicalize: pooled frame vector " + std::to_string(i) +
                                          " has near-zero norm (symmetric input?)",
                                      i);
            result.degenerate = true;
            break;
        }
    }
    try {
        if (!result.degenerate) result.frame_rows = gram_schmidt_op(frame_vectors);
    } catch (const DegenerateFrame&) {
        if (!spec_.fallback_identity) throw;
        result.degenerate = true;
    }
    if (result.degenerate) {
        std::vector<double> id(d * d, 0.0);
        for (std::size_t i = 0; i < d; ++i) id[i * d + i] = 1.0;
        result.frame_rows = Tensor::from_data({d, d}, std::move(id));
    }
    if (spec_.translation == TranslationMode::Learned) {
        Tensor offset = reshape(gather_rows(pooled, {d}), {d});
        result.translation = add(centroid, offset);
    } else {
        result.translation = centroid;
    }
    return result;
}

EuclideanElement PointCloudCanonicalizer::canonicalize_element(const PointCloud& pc) const {
    NoGradGuard no_grad;
    Tensor x = tensor_from_matrix(pc.X);
    std::optional<Tensor> v;
    if (spec_.use_velocities) {
        if (!pc.has_velocities) throw ShapeError("canonicalize: cloud has no velocities");
        v = tensor_from_matrix(pc.V);
    }
    Result r = canonicalize(x, v ? &*v : nullptr);
    // rows are the frame; columns of O
    Eigen::MatrixXd e = matrix_from_tensor(r.frame_rows);
    EuclideanElement g;
    g.O = e.transpose();
    g.t = Eigen::VectorXd(spec_.dim);
    for (int i = 0; i < spec_.dim; ++i) g.t(i) = r.translation.data()[static_cast<std::size_t>(i)];
    return g;
}

// ---- image canonicalizer -------------------------------------------------------------

ImageCanonicalizer::ImageCanonicalizer(const ImageCanonicalizerSpec& spec, std::uint64_t seed)
    : spec_(spec) {
    Rng rng = Rng::seeded(seed);
    elements_ = fiber_elements(spec.group);
    if (spec.spatial) spec_.pool = 1;  // the shift-averaged route works at full resolution
    std::size_t hw = spec.image_hw;
    for (std::size_t p = 1; p < spec_.pool; p *= 2) {
        if (hw % 2 != 0)
            throw std::invalid_argument("image canonicalizer: pool factor does not divide size");
        hw /= 2;
    }
    lift_hw_ = hw;
    const std::size_t fan_in = spec.in_channels * hw * hw;
    wlift_ = params_.add("canonicalizer.lift",
                         init_uniform({spec.lift_channels, spec.in_channels, hw, hw}, fan_in, rng));
    // A positive start keeps center-route fibers alive through the relu on
    // dark images. The spatial route must start at zero: its discriminative
    // signal is exactly the relu clipping pattern (the linear part of a
    // shift-averaged correlation is the same for every fiber).
    blift_ = params_.add("canonicalizer.lift_bias",
                         Tensor::full({spec.lift_channels}, spec.spatial ? 0.0 : 0.5));
    std::size_t cin = spec.lift_channels;
    for (std::size_t l = 0; l < spec.gconv_layers; ++l) {
        const std::size_t cout = spec.gconv_channels;
        wg_.push_back(params_.add("canonicalizer.g" + std::to_string(l),
                                  init_uniform({cout, cin, elements_.size()},
                                               cin * elements_.size(), rng)));
        cin = cout;
    }
}

Tensor ImageCanonicalizer::fibers(const Tensor& img) const {
    // activations sit between layers, never after the last one: raw output
    // correlations tie only on genuinely symmetric inputs, while a trailing
    // relu would clamp whole fibers to zero and manufacture argmax ties
    Tensor reduced = img;
    for (std::size_t hw = img.shape()[1]; hw > lift_hw_; hw /= 2)
        reduced = avg_pool2_stable(reduced);
    Tensor f = spec_.spatial ? lifting_fibers_spatial(reduced, wlift_, spec_.group)
                             : lifting_fibers(reduced, wlift_, spec_.group);
    {
        // per-channel bias, identical across fibers and positions
        const std::size_t co = f.shape()[0];
        const std::size_t rest = f.size() / co;
        f = transpose(reshape(f, {co, rest}));
        f = add_rowvec(f, blift_);
        Shape back = spec_.spatial
                         ? Shape{co, f.shape()[0] / (lift_hw_ * lift_hw_), lift_hw_ * lift_hw_}
                         : Shape{co, rest};
        f = reshape(transpose(f), back);
    }
    for (const auto& w : wg_) {
        f = relu(f);
        f = spec_.spatial ? group_conv1x1_spatial(f, w, spec_.group)
                          : group_conv1x1(f, w, spec_.group);
    }
    return fiber_logits(f);
}

ImageCanonicalizer::Result ImageCanonicalizer::canonicalize(const Tensor& img, bool soft) const {
    Result r;
    r.logits = fibers(img);
    const std::size_t m = elements_.size();
    Tensor weights;
    if (soft) {
        weights = softmax(r.logits);
        r.index = argmax_lowest(r.logits.data());
    } else {
        StraightThrough st = straight_through_select(r.logits);
        weights = st.weights;
        r.index = st.index;
        r.unique_argmax = st.unique_argmax;
    }
    r.element = elements_[r.index];
    {
        double best = -std::numeric_limits<double>::infinity(),
               second = -std::numeric_limits<double>::infinity();
        for (double v : r.logits.data()) {
            if (v > best) {
                second = best;
                best = v;
            } else if (v > second) {
                second = v;
            }
        }
        r.margin = m > 1 ? best - second : 0.0;
    }

    const std::size_t chw = img.size();
    std::vector<Tensor> undone;
    undone.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        const auto inv = std::get<PlanarDiscrete>(inverse(GroupElement{elements_[i]}));
        undone.push_back(reshape(act_image_op(img, inv), {1, chw}));
    }
    Tensor stack = concat(undone, 0);                       // [m, C*H*W]
    Tensor blend = matmul(reshape(weights, {1, m}), stack);  // [1, C*H*W]
    r.canonical = reshape(blend, img.shape());
    return r;
}

void ImageCanonicalizer::refresh_fast_bank() const {
    // bank row (m*Co + o) holds the adjoint-transformed filter for element m:
    // F[o, m] = <bank_row, pooled image>
    const std::size_t hw = lift_hw_;
    const std::size_t c = spec_.in_channels, co = spec_.lift_channels;
    const std::size_t m_count = elements_.size();
    fast_bank_ = Eigen::MatrixXd::Zero(m_count * co, c * hw * hw);
    const auto& wd = wlift_.data();
    for (std::size_t m = 0; m < m_count; ++m) {
        const auto& g = elements_[m];
        for (std::size_t qi = 0; qi < hw; ++qi)
            for (std::size_t qj = 0; qj < hw; ++qj) {
                auto [pi, pj] = planar_apply_pos(g, hw, hw, static_cast<double>(qi),
                                                 static_cast<double>(qj));
                // scatter the filter tap onto the transformed position
                const double fi = std::floor(pi), fj = std::floor(pj);
                const long i0 = static_cast<long>(fi), j0 = static_cast<long>(fj);
                const double di = pi - fi, dj = pj - fj;
                const double ws[4] = {(1 - di) * (1 - dj), (1 - di) * dj, di * (1 - dj), di * dj};
                const long is[4] = {i0, i0, i0 + 1, i0 + 1};
                const long js[4] = {j0, j0 + 1, j0, j0 + 1};
                for (int t = 0; t < 4; ++t) {
                    if (ws[t] == 0.0 || is[t] < 0 || is[t] >= static_cast<long>(hw) ||
                        js[t] < 0 || js[t] >= static_cast<long>(hw))
                        continue;
                    for (std::size_t o = 0; o < co; ++o)
                        for (std::size_t cc = 0; cc < c; ++cc)
                            fast_bank_(m * co + o,
                                       (cc * hw + static_cast<std::size_t>(is[t])) * hw +
                                           static_cast<std::size_t>(js[t])) +=
                                ws[t] * wd[((o * c + cc) * hw + qi) * hw + qj];
                }
            }
    }
    fast_bank_ready_ = true;
}

ImageCanonicalizer::Result ImageCanonicalizer::canonicalize_fast(const Image& img) const {
    if (!fast_bank_ready_) refresh_fast_bank();
    if (spec_.gconv_layers != 0 || spec_.spatial)
        throw std::logic_error("canonicalize_fast: supported for lifting-only canonicalizers");
    const std::size_t m_count = elements_.size(), co = spec_.lift_channels;
    NoGradGuard no_grad;
    Tensor reduced = tensor_from_image(img);
    for (std::size_t hw = img.height; hw > lift_hw_; hw /= 2) reduced = avg_pool2_stable(reduced);
    Eigen::Map<const Eigen::VectorXd> x(reduced.data().data(), reduced.size());
    Eigen::VectorXd f = fast_bank_ * x;  // [m*Co]
    std::vector<double> logits(m_count, 0.0);
    for (std::size_t m = 0; m < m_count; ++m) {
        double s = 0.0;
        for (std::size_t o = 0; o < co; ++o) s += f(m * co + o) + blift_.data()[o];
        logits[m] = s / static_cast<double>(co);
    }
    Result r;
    r.index = argmax_lowest(logits);
    r.element = elements_[r.index];
    r.logits = Tensor::from_data({m_count}, logits);
    const auto inv = std::get<PlanarDiscrete>(inverse(GroupElement{elements_[r.index]}));
    r.canonical = tensor_from_image(act_image(inv, img));
    return r;
}

std::vector<ImageCanonicalizer::Result> ImageCanonicalizer::canonicalize_fast_batch(
    std::span<const Image> images) const {
    if (!fast_bank_ready_) refresh_fast_bank();
    if (spec_.gconv_layers != 0 || spec_.spatial)
        throw std::logic_error("canonicalize_fast: supported for lifting-only canonicalizers");
    const std::size_t m_count = elements_.size(), co = spec_.lift_channels;
    const std::size_t b = images.size();
    NoGradGuard no_grad;
    Eigen::MatrixXd pooled(lift_hw_ * lift_hw_ * spec_.in_channels, b);
    for (std::size_t i = 0; i < b; ++i) {
        Tensor reduced = tensor_from_image(images[i]);
        for (std::size_t hw = images[i].height; hw > lift_hw_; hw /= 2)
            reduced = avg_pool2_stable(reduced);
        pooled.col(static_cast<Eigen::Index>(i)) =
            Eigen::Map<const Eigen::VectorXd>(reduced.data().data(), reduced.size());
    }
    Eigen::MatrixXd f = fast_bank_ * pooled;  // [m*co, b]
    std::vector<Result> results(b);
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> logits(m_count, 0.0);
        for (std::size_t m = 0; m < m_count; ++m) {
            double s = 0.0;
            for (std::size_t o = 0; o < co; ++o)
                s += f(static_cast<Eigen::Index>(m * co + o), static_cast<Eigen::Index>(i)) +
                     blift_.data()[o];
            logits[m] = s / static_cast<double>(co);
        }
        Result& r = results[i];
        r.index = argmax_lowest(logits);
        r.element = elements_[r.index];
        r.logits = Tensor::from_data({m_count}, std::move(logits));
        const auto inv = std::get<PlanarDiscrete>(inverse(GroupElement{elements_[r.index]}));
        r.canonical = tensor_from_image(act_image(inv, images[i]));
    }
    return results;
}

// ---- optimization approach --------------------------------------------------------

double energy_s(const EnergyFn& e, const GroupElement& g, const Sample& x) {
    return e(act_sample(inverse(g), x));
}

double energy_s_orbit(const EnergyFn& e, const GroupElement& g, const GroupElement& g1,
                      const Sample& x0) {
    return e(act_sample(compose(inverse(g), g1), x0));
}

GridArgminResult canonicalize_grid(const EnergyFn& e, const GroupSpec& spec, const Sample& x) {
    GridArgminResult out;
    const auto elems = enumerate_elements(spec);
    out.energies.reserve(elems.size());
    for (const auto& g : elems) out.energies.push_back(energy_s(e, g, x));
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.energies.size(); ++i)
        if (out.energies[i] < out.energies[best]) best = i;
    out.index = best;
    out.element = elems[best];
    for (std::size_t i = 0; i < out.energies.size(); ++i)
        if (i != best && out.energies[i] == out.energies[best]) out.unique = false;
    return out;
}

AngleOptimResult canonicalize_angle(const AngleEnergyFn& e, std::size_t steps, double lr,
                                    std::size_t restarts) {
    if (restarts == 0) restarts = 1;
    AngleOptimResult out;
    std::vector<double> final_angles(restarts);
    std::vector<Tensor> final_energies(restarts);
    for (std::size_t r = 0; r < restarts; ++r) {
        double theta = 2.0 * M_PI * static_cast<double>(r) / static_cast<double>(restarts);
        std::vector<double> traj{theta};
        for (std::size_t s = 0; s < steps; ++s) {
            Tensor th = Tensor::from_data({}, {theta}, true);
            Tensor en = e(th);
            const std::vector<double> g = grad_wrt(en, th);
            theta -= lr * g[0];  // inner gradient detached (first-order unroll)
            traj.push_back(theta);
        }
        out.trajectories.push_back(std::move(traj));
        final_angles[r] = theta;
        final_energies[r] = e(Tensor::from_data({}, {theta}));
    }
    std::size_t best = 0;
    for (std::size_t r = 1; r < restarts; ++r)
        if (final_energies[r].item() < final_energies[best].item()) best = r;
    out.theta = final_angles[best];
    out.energy = final_energies[best].item();

    // straight-through over restart candidates: argmin = argmax of -E
    std::vector<Tensor> neg;
    neg.reserve(restarts);
    for (auto& en : final_energies) neg.push_back(reshape(scale(en, -1.0), {1}));
    StraightThrough st = straight_through_select(concat(neg, 0));
    Tensor angles = Tensor::from_data({restarts, 1}, final_angles);
    out.theta_blend = reshape(matmul(reshape(st.weights, {1, restarts}), angles), {});
    return out;
}

// ---- energy condition checks ----------------------------------------------------------

namespace {

bool elements_equal(const GroupElement& a, const GroupElement& b) {
    if (a.index() != b.index()) return false;
    if (const auto* pa = std::get_if<PlanarDiscrete>(&a)) {
        const auto& pb = std::get<PlanarDiscrete>(b);
        return pa->n == pb.n && pa->k == pb.k && pa->r == pb.r;
    }
    if (const auto* sa = std::get_if<PermutationElement>(&a))
        return sa->sigma == std::get<PermutationElement>(b).sigma;
    const auto& ea = std::get<EuclideanElement>(a);
    const auto& eb = std::get<EuclideanElement>(b);
    return (ea.O - eb.O).cwiseAbs().maxCoeff() == 0.0 &&
           (ea.t - eb.t).cwiseAbs().maxCoeff() == 0.0;
}

}  // namespace

EnergyConditionReport check_energy_conditions(const EnergyFn& e, const GroupSpec& spec,
                                              const std::vector<Sample>& samples, double tol) {
    if (!spec.discrete())
        throw GroupError("check_energy_conditions: requires a discrete group");
    EnergyConditionReport report;
    const auto elems = enumerate_elements(spec);
    for (std::size_t si = 0; si < samples.size(); ++si) {
        const Sample& x0 = samples[si];
        // condition 1: score identity on all (g, g1) pairs, orbit form
        for (const auto& g : elems)
            for (const auto& g1 : elems) {
                const double lhs = energy_s_orbit(e, g, g1, x0);
                const GroupElement rel = compose(inverse(g1), g);
                const double rhs = energy_s(e, rel, x0);
                ++report.condition1_checks;
                if (lhs != rhs) ++report.condition1_violations;
            }
        // condition 2: argmin set inside a single stabilizer coset
        std::vector<double> energies;
        energies.reserve(elems.size());
        for (const auto& g : elems) energies.push_back(energy_s(e, g, x0));
        const double emin = *std::min_element(energies.begin(), energies.end());
        std::vector<std::size_t> argmin;
        for (std::size_t i = 0; i < elems.size(); ++i)
            if (energies[i] == emin) argmin.push_back(i);
        const auto stab = stabilizer_elements(spec, x0, tol);
        bool ok = true;
        const GroupElement& anchor = elems[argmin[0]];
        for (std::size_t ai : argmin) {
            const GroupElement rel = compose(elems[ai], inverse(anchor));
            bool in_stab = false;
            for (const auto& s : stab)
                if (elements_equal(rel, s)) {
                    in_stab = true;
                    break;
                }
            if (!in_stab) {
                ok = false;
                break;
            }
        }
        if (!ok) {
            ++report.condition2_violations;
            report.condition2_failing_samples.push_back(si);
        }
        ++report.samples_checked;
    }
    return report;
}

// ---- heuristic (PCA) canonicalizers -----------------------------------------------------

Eigen::MatrixXd pca_frame(const Eigen::MatrixXd& x) {
    if (x.rows() == 0) throw EmptyCloud("pca_frame: empty point cloud");
    const Eigen::Index d = x.cols();
    Eigen::RowVectorXd centroid = x.colwise().mean();
    Eigen::MatrixXd xc = x.rowwise() - centroid;
    Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(x.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Eigen::MatrixXd frame(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        Eigen::VectorXd axis = es.eigenvectors().col(d - 1 - i);  // descending eigenvalues
        if (axis.dot(xc.row(0)) < 0.0) axis = -axis;
        frame.col(i) = axis;
    }
    return frame;
}

Image rotate_image_by_angle(const Image& img, double angle_ccw) {
    Image out = img;
    const double ci = (static_cast<double>(img.height) - 1.0) / 2.0;
    const double cj = (static_cast<double>(img.width) - 1.0) / 2.0;
    const double ca = std::cos(angle_ccw), sa = std::sin(angle_ccw);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t i = 0; i < img.height; ++i)
            for (std::size_t j = 0; j < img.width; ++j) {
                const double x = static_cast<double>(j) - cj, y = ci - static_cast<double>(i);
                const double xs = x * ca + y * sa;
                const double ys = -x * sa + y * ca;
                out.at(c, i, j) = bilinear_sample(img, c, ci - ys, xs + cj);
            }
    return out;
}

PcaImageResult pca_canonicalize_image(const Image& img) {
    const double ci = (static_cast<double>(img.height) - 1.0) / 2.0;
    const double cj = (static_cast<double>(img.width) - 1.0) / 2.0;
    double mass = 0.0, mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < img.height; ++i)
        for (std::size_t j = 0; j < img.width; ++j) {
            double w = 0.0;
            for (std::size_t c = 0; c < img.channels; ++c) w += img.at(c, i, j);
            const double x = static_cast<double>(j) - cj, y = ci - static_cast<double>(i);
            mass += w;
            mx += w * x;
            my += w * y;
        }
    PcaImageResult out;
    if (mass <= 1e-12) {
        out.canonical = img;
        return out;
    }
    mx /= mass;
    my /= mass;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < img.height; ++i)
        for (std::size_t j = 0; j < img.width; ++j) {
            double w = 0.0;
            for (std::size_t c = 0; c < img.channels; ++c) w += img.at(c, i, j);
            const double x = static_cast<double>(j) - cj - mx, y = ci - static_cast<double>(i) - my;
            sxx += w * x * x;
            sxy += w * x * y;
            syy += w * y * y;
        }
    // leading eigenvector angle of the 2x2 second-moment matrix
    double theta = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
    // resolve the pi ambiguity: skewness along the axis must be nonnegative
    double skew = 0.0;
    const double ca = std::cos(theta), sa = std::sin(theta);
    for (std::size_t i = 0; i < img.height; ++i)
        for (std::size_t j = 0; j < img.width; ++j) {
            double w = 0.0;
            for (std::size_t c = 0; c < img.channels; ++c) w += img.at(c, i, j);
            const double x = static_cast<double>(j) - cj - mx, y = ci - static_cast<double>(i) - my;
            const double proj = x * ca + y * sa;
            skew += w * proj * proj * proj;
        }
    if (skew < 0.0) theta += M_PI;
    out.angle = theta;
    out.canonical = rotate_image_by_angle(img, -theta);
    return out;
}

}  // namespace canon
