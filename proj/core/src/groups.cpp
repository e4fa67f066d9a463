#include "canon/groups.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace canon {

namespace {

[[noreturn]] void mismatch(const std::string& what) {
    throw GroupError("group element mismatch: " + what);
}

int mod_index(int k, int n) {
    int m = k % n;
    return m < 0 ? m + n : m;
}

}  // namespace

std::size_t GroupSpec::order() const {
    switch (kind) {
        case GroupKind::Cn:
            return static_cast<std::size_t>(n);
        case GroupKind::Dn:
            return static_cast<std::size_t>(2 * n);
        case GroupKind::Sn: {
            std::size_t f = 1;
            for (int i = 2; i <= n; ++i) f *= static_cast<std::size_t>(i);
            return f;
        }
        default:
            throw GroupError("order: group " + to_string(*this) + " is not discrete");
    }
}

GroupSpec parse_group_spec(const std::string& text) {
    auto starts = [&](const char* p) { return text.rfind(p, 0) == 0; };
    GroupSpec spec;
    std::size_t num_at = 0;
    if (starts("so")) {
        spec.kind = GroupKind::SOd;
        num_at = 2;
    } else if (starts("se")) {
        spec.kind = GroupKind::SEd;
        num_at = 2;
    } else if (starts("c")) {
        spec.kind = GroupKind::Cn;
        num_at = 1;
    } else if (starts("d")) {
        spec.kind = GroupKind::Dn;
        num_at = 1;
    } else if (starts("o")) {
        spec.kind = GroupKind::Od;
        num_at = 1;
    } else if (starts("e")) {
        spec.kind = GroupKind::Ed;
        num_at = 1;
    } else if (starts("s")) {
        spec.kind = GroupKind::Sn;
        num_at = 1;
    } else {
        throw GroupError("cannot parse group spec '" + text + "'");
    }
    try {
        spec.n = std::stoi(text.substr(num_at));
    } catch (const std::exception&) {
        throw GroupError("cannot parse group spec '" + text + "': missing integer");
    }
    if (spec.n <= 0) throw GroupError("group spec '" + text + "': count must be positive");
    return spec;
}

std::string to_string(const GroupSpec& spec) {
    switch (spec.kind) {
        case GroupKind::Cn:
            return "c" + std::to_string(spec.n);
        case GroupKind::Dn:
            return "d" + std::to_string(spec.n);
        case GroupKind::SOd:
            return "so" + std::to_string(spec.n);
        case GroupKind::Od:
            return "o" + std::to_string(spec.n);
        case GroupKind::Ed:
            return "e" + std::to_string(spec.n);
        case GroupKind::SEd:
            return "se" + std::to_string(spec.n);
        case GroupKind::Sn:
            return "s" + std::to_string(spec.n);
    }
    return "?";
}

std::string to_string(const GroupElement& g) {
    std::ostringstream os;
    if (const auto* p = std::get_if<PlanarDiscrete>(&g)) {
        os << "planar(n=" << p->n << ",k=" << p->k << ",r=" << (p->r ? 1 : 0) << ")";
    } else if (const auto* e = std::get_if<EuclideanElement>(&g)) {
        os << "euclidean(d=" << e->O.rows() << ")";
    } else {
        const auto& s = std::get<PermutationElement>(g);
        os << "perm(";
        for (std::size_t i = 0; i < s.sigma.size(); ++i) os << (i ? "," : "") << s.sigma[i];
        os << ")";
    }
    return os.str();
}

// ---- identity / compose / inverse -------------------------------------------

GroupElement identity_like(const GroupElement& g) {
    if (const auto* p = std::get_if<PlanarDiscrete>(&g)) return PlanarDiscrete{p->n, 0, false};
    if (const auto* e = std::get_if<EuclideanElement>(&g)) {
        const auto d = e->O.rows();
        return EuclideanElement{Eigen::MatrixXd::Identity(d, d), Eigen::VectorXd::Zero(d)};
    }
    const auto& s = std::get<PermutationElement>(g);
    PermutationElement id;
    id.sigma.resize(s.sigma.size());
    std::iota(id.sigma.begin(), id.sigma.end(), 0u);
    return id;
}

GroupElement identity_element(const GroupSpec& spec) {
    switch (spec.kind) {
        case GroupKind::Cn:
        case GroupKind::Dn:
            return PlanarDiscrete{spec.n, 0, false};
        case GroupKind::Sn: {
            PermutationElement id;
            id.sigma.resize(static_cast<std::size_t>(spec.n));
            std::iota(id.sigma.begin(), id.sigma.end(), 0u);
            return id;
        }
        default:
            return EuclideanElement{Eigen::MatrixXd::Identity(spec.n, spec.n),
                                    Eigen::VectorXd::Zero(spec.n)};
    }
}

GroupElement compose(const GroupElement& g1, const GroupElement& g2) {
    if (g1.index() != g2.index()) mismatch("different variants");
    if (const auto* a = std::get_if<PlanarDiscrete>(&g1)) {
        const auto& b = std::get<PlanarDiscrete>(g2);
        if (a->n != b.n) mismatch("planar fold counts " + std::to_string(a->n) + " vs " +
                                  std::to_string(b.n));
        // R_k F^r convention: F R_k = R_{-k} F, so
        // (k1,r1)(k2,r2) = (k1 + k2 * (-1)^{r1}, r1 xor r2).
        const int k = mod_index(a->k + (a->r ? -b.k : b.k), a->n);
        return PlanarDiscrete{a->n, k, a->r != b.r};
    }
    if (const auto* a = std::get_if<EuclideanElement>(&g1)) {
        const auto& b = std::get<EuclideanElement>(g2);
        if (a->O.rows() != b.O.rows()) mismatch("euclidean dimensions");
        return EuclideanElement{a->O * b.O, a->O * b.t + a->t};
    }
    const auto& a = std::get<PermutationElement>(g1);
    const auto& b = std::get<PermutationElement>(g2);
    if (a.sigma.size() != b.sigma.size()) mismatch("permutation sizes");
    PermutationElement out;
    out.sigma.resize(a.sigma.size());
    for (std::size_t i = 0; i < a.sigma.size(); ++i) out.sigma[i] = a.sigma[b.sigma[i]];
    return out;
}

GroupElement inverse(const GroupElement& g) {
    if (const auto* p = std::get_if<PlanarDiscrete>(&g)) {
        // (R_k)^-1 = R_{-k}; (R_k F)^-1 = F R_{-k} = R_k F (self-inverse).
        if (p->r) return *p;
        return PlanarDiscrete{p->n, mod_index(-p->k, p->n), false};
    }
    if (const auto* e = std::get_if<EuclideanElement>(&g))
        return EuclideanElement{e->O.transpose(), -(e->O.transpose() * e->t)};
    const auto& s = std::get<PermutationElement>(g);
    PermutationElement out;
    out.sigma.resize(s.sigma.size());
    for (std::size_t i = 0; i < s.sigma.size(); ++i) out.sigma[s.sigma[i]] = i;
    return out;
}

// ---- actions ------------------------------------------------------------------

Eigen::Matrix2d planar_matrix(const PlanarDiscrete& g) {
    const double a = 2.0 * M_PI * static_cast<double>(g.k) / static_cast<double>(g.n);
    Eigen::Matrix2d rot;
    rot << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    if (!g.r) return rot;
    Eigen::Matrix2d flip;
    flip << -1.0, 0.0, 0.0, 1.0;  // horizontal flip: x -> -x
    return rot * flip;            // flip applied before rotation
}

PointCloud act_pointcloud(const GroupElement& g, const PointCloud& pc) {
    if (const auto* e = std::get_if<EuclideanElement>(&g)) {
        if (e->O.cols() != pc.X.cols()) mismatch("euclidean dimension vs point cloud");
        PointCloud out = pc;
        out.X = (pc.X * e->O.transpose()).rowwise() + e->t.transpose();
        if (pc.has_velocities) out.V = pc.V * e->O.transpose();
        return out;
    }
    if (const auto* p = std::get_if<PlanarDiscrete>(&g)) {
        if (pc.X.cols() != 2) mismatch("planar element acts on 2-D point clouds");
        EuclideanElement e{planar_matrix(*p), Eigen::Vector2d::Zero()};
        return act_pointcloud(GroupElement{e}, pc);
    }
    const auto& s = std::get<PermutationElement>(g);
    if (static_cast<Eigen::Index>(s.sigma.size()) != pc.X.rows())
        mismatch("permutation size vs point count");
    PointCloud out = pc;
    for (std::size_t i = 0; i < s.sigma.size(); ++i) {
        const auto dst = static_cast<Eigen::Index>(s.sigma[i]);
        out.X.row(dst) = pc.X.row(i);
        if (pc.has_velocities) out.V.row(dst) = pc.V.row(i);
        if (pc.q.size()) out.q(dst) = pc.q(static_cast<Eigen::Index>(i));
    }
    return out;
}

bool planar_is_exact(const PlanarDiscrete& g) { return (4 * g.k) % g.n == 0; }

namespace {

/// Integer source index for the exact 90-degree cases: output pixel (i, j)
/// reads input (is, js); q90 counts quarter turns, flip applies after the
/// rotation on the sampling side (q = F^r(R_{-k} p)).
std::pair<std::size_t, std::size_t> exact_source(int q90, bool r, std::size_t h, std::size_t w,
                                                 std::size_t i, std::size_t j) {
    std::size_t is = i, js = j;
    switch (q90 & 3) {
        case 0:
            break;
        case 1:  // 90 degrees CCW
            is = j;
            js = w - 1 - i;
            break;
        case 2:
            is = h - 1 - i;
            js = w - 1 - j;
            break;
        case 3:
            is = h - 1 - j;
            js = i;
            break;
    }
    if (r) js = w - 1 - js;
    return {is, js};
}

}  // namespace

std::pair<double, double> planar_sample_pos(const PlanarDiscrete& g, std::size_t height,
                                            std::size_t width, double i, double j) {
    const double ci = (static_cast<double>(height) - 1.0) / 2.0;
    const double cj = (static_cast<double>(width) - 1.0) / 2.0;
    const double a = 2.0 * M_PI * static_cast<double>(g.k) / static_cast<double>(g.n);
    // math coordinates: x right, y up; rotate by -a, then flip x if reflected
    const double x = j - cj, y = ci - i;
    double xs = x * std::cos(a) + y * std::sin(a);
    const double ys = -x * std::sin(a) + y * std::cos(a);
    if (g.r) xs = -xs;
    return {ci - ys, xs + cj};
}

std::pair<double, double> planar_apply_pos(const PlanarDiscrete& g, std::size_t height,
                                           std::size_t width, double i, double j) {
    const double ci = (static_cast<double>(height) - 1.0) / 2.0;
    const double cj = (static_cast<double>(width) - 1.0) / 2.0;
    const double a = 2.0 * M_PI * static_cast<double>(g.k) / static_cast<double>(g.n);
    double x = j - cj, y = ci - i;
    if (g.r) x = -x;  // flip first, then rotate
    const double xr = x * std::cos(a) - y * std::sin(a);
    const double yr = x * std::sin(a) + y * std::cos(a);
    return {ci - yr, xr + cj};
}

double bilinear_sample(const Image& img, std::size_t channel, double i, double j) {
    const auto h = static_cast<long>(img.height), w = static_cast<long>(img.width);
    const double fi = std::floor(i), fj = std::floor(j);
    const long i0 = static_cast<long>(fi), j0 = static_cast<long>(fj);
    const double di = i - fi, dj = j - fj;
    auto px = [&](long ii, long jj) -> double {
        if (ii < 0 || ii >= h || jj < 0 || jj >= w) return 0.0;
        return img.at(channel, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
    };
    return (1.0 - di) * (1.0 - dj) * px(i0, j0) + (1.0 - di) * dj * px(i0, j0 + 1) +
           di * (1.0 - dj) * px(i0 + 1, j0) + di * dj * px(i0 + 1, j0 + 1);
}

Image act_image(const PlanarDiscrete& g, const Image& img) {
    if (img.height != img.width)
        throw GroupError("act_image: image must be square, got " + std::to_string(img.height) +
                         "x" + std::to_string(img.width));
    Image out = img;
    if (planar_is_exact(g)) {
        const int q90 = mod_index(4 * g.k / g.n, 4);
        for (std::size_t c = 0; c < img.channels; ++c)
            for (std::size_t i = 0; i < img.height; ++i)
                for (std::size_t j = 0; j < img.width; ++j) {
                    auto [is, js] = exact_source(q90, g.r, img.height, img.width, i, j);
                    out.at(c, i, j) = img.at(c, is, js);
                }
        return out;
    }
    // hoisted affine sampling: q = F^r(R_{-k}(p)) with the trig evaluated once
    const double ci = (static_cast<double>(img.height) - 1.0) / 2.0;
    const double a = 2.0 * M_PI * static_cast<double>(g.k) / static_cast<double>(g.n);
    const double ca = std::cos(a), sa = std::sin(a);
    const double flip = g.r ? -1.0 : 1.0;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t i = 0; i < img.height; ++i) {
            const double y = ci - static_cast<double>(i);
            for (std::size_t j = 0; j < img.width; ++j) {
                const double x = static_cast<double>(j) - ci;
                const double xs = flip * (x * ca + y * sa);
                const double ys = -x * sa + y * ca;
                out.at(c, i, j) = bilinear_sample(img, c, ci - ys, xs + ci);
            }
        }
    return out;
}

Sample act_sample(const GroupElement& g, const Sample& x) {
    if (const auto* img = std::get_if<Image>(&x)) {
        const auto* p = std::get_if<PlanarDiscrete>(&g);
        if (!p) mismatch("only planar elements act on images");
        return act_image(*p, *img);
    }
    return act_pointcloud(g, std::get<PointCloud>(x));
}

// ---- sampling -------------------------------------------------------------------

Eigen::MatrixXd random_orthogonal(int d, Rng& rng, bool special) {
    Eigen::MatrixXd a(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = rng.gaussian();
    // modified Gram-Schmidt on columns; R has positive diagonal by
    // construction, which makes Q Haar-distributed
    Eigen::MatrixXd q = a;
    for (int c = 0; c < d; ++c) {
        for (int prev = 0; prev < c; ++prev) q.col(c) -= q.col(prev).dot(q.col(c)) * q.col(prev);
        const double nrm = q.col(c).norm();
        if (nrm < 1e-12) return random_orthogonal(d, rng, special);  // measure-zero retry
        q.col(c) /= nrm;
    }
    if (special && q.determinant() < 0.0) q.col(0).swap(q.col(1));
    return q;
}

GroupElement random_element(const GroupSpec& spec, Rng& rng) {
    switch (spec.kind) {
        case GroupKind::Cn:
            return PlanarDiscrete{spec.n, static_cast<int>(rng.uniform_index(spec.n)), false};
        case GroupKind::Dn: {
            const auto idx = rng.uniform_index(2 * static_cast<std::uint64_t>(spec.n));
            return PlanarDiscrete{spec.n, static_cast<int>(idx % spec.n), idx >= static_cast<std::uint64_t>(spec.n)};
        }
        case GroupKind::Sn: {
            PermutationElement p;
            p.sigma.resize(static_cast<std::size_t>(spec.n));
            std::iota(p.sigma.begin(), p.sigma.end(), 0u);
            for (std::size_t i = p.sigma.size(); i > 1; --i)
                std::swap(p.sigma[i - 1], p.sigma[rng.uniform_index(i)]);
            return p;
        }
        case GroupKind::SOd:
        case GroupKind::Od: {
            EuclideanElement e{random_orthogonal(spec.n, rng, spec.kind == GroupKind::SOd),
                               Eigen::VectorXd::Zero(spec.n)};
            return e;
        }
        case GroupKind::Ed:
        case GroupKind::SEd: {
            EuclideanElement e{random_orthogonal(spec.n, rng, spec.kind == GroupKind::SEd),
                               Eigen::VectorXd(spec.n)};
            for (int i = 0; i < spec.n; ++i) e.t(i) = rng.gaussian();
            return e;
        }
    }
    throw GroupError("random_element: unknown group kind");
}

// ---- enumeration ------------------------------------------------------------------

std::vector<GroupElement> enumerate_elements(const GroupSpec& spec) {
    std::vector<GroupElement> out;
    switch (spec.kind) {
        case GroupKind::Cn:
            for (int k = 0; k < spec.n; ++k) out.push_back(PlanarDiscrete{spec.n, k, false});
            return out;
        case GroupKind::Dn:
            for (int k = 0; k < spec.n; ++k) out.push_back(PlanarDiscrete{spec.n, k, false});
            for (int k = 0; k < spec.n; ++k) out.push_back(PlanarDiscrete{spec.n, k, true});
            return out;
        case GroupKind::Sn: {
            if (spec.n > 8) throw GroupError("enumerate_elements: s" + std::to_string(spec.n) +
                                             " is too large to enumerate");
            std::vector<std::size_t> perm(static_cast<std::size_t>(spec.n));
            std::iota(perm.begin(), perm.end(), 0u);
            do {
                out.push_back(PermutationElement{perm});
            } while (std::next_permutation(perm.begin(), perm.end()));
            return out;
        }
        default:
            throw GroupError("enumerate_elements: group " + to_string(spec) + " is continuous");
    }
}

namespace {

/// Point clouds are sets: a transformed cloud matches the original when a
/// bijection pairs every row within tol (greedy matching; N is small).
double set_diff(const PointCloud& a, const PointCloud& b, double tol) {
    if (a.X.rows() != b.X.rows()) return std::numeric_limits<double>::infinity();
    const Eigen::Index n = a.X.rows();
    std::vector<bool> used(static_cast<std::size_t>(n), false);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        Eigen::Index best_j = -1;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (used[static_cast<std::size_t>(j)]) continue;
            double d = (a.X.row(i) - b.X.row(j)).cwiseAbs().maxCoeff();
            if (a.has_velocities && b.has_velocities)
                d = std::max(d, (a.V.row(i) - b.V.row(j)).cwiseAbs().maxCoeff());
            if (a.q.size() && b.q.size()) d = std::max(d, std::abs(a.q(i) - b.q(j)));
            if (d < best) {
                best = d;
                best_j = j;
            }
        }
        if (best > tol) return best;
        used[static_cast<std::size_t>(best_j)] = true;
        worst = std::max(worst, best);
    }
    return worst;
}

}  // namespace

double set_matched_diff(const Sample& a, const Sample& b, double tol) {
    if (const auto* pa = std::get_if<PointCloud>(&a))
        return set_diff(*pa, std::get<PointCloud>(b), tol);
    return max_abs_diff(a, b);
}

std::vector<GroupElement> stabilizer_elements(const GroupSpec& spec, const Sample& x, double tol) {
    if (!spec.discrete())
        throw GroupError("stabilizer_elements: continuous group " + to_string(spec) +
                         " is unsupported");
    if (tol < 0.0) throw std::invalid_argument("stabilizer_elements: tol must be >= 0");
    std::vector<GroupElement> out;
    for (const auto& g : enumerate_elements(spec))
        if (set_matched_diff(act_sample(g, x), x, tol) <= tol) out.push_back(g);
    return out;
}

std::vector<Sample> orbit(const GroupSpec& spec, const Sample& x) {
    std::vector<Sample> out;
    for (const auto& g : enumerate_elements(spec)) out.push_back(act_sample(g, x));
    return out;
}

double max_abs_diff(const Sample& a, const Sample& b) {
    if (const auto* ia = std::get_if<Image>(&a)) {
        const auto& ib = std::get<Image>(b);
        if (ia->data.size() != ib.data.size()) return std::numeric_limits<double>::infinity();
        double m = 0.0;
        for (std::size_t i = 0; i < ia->data.size(); ++i)
            m = std::max(m, std::abs(ia->data[i] - ib.data[i]));
        return m;
    }
    const auto& pa = std::get<PointCloud>(a);
    const auto& pb = std::get<PointCloud>(b);
    if (pa.X.rows() != pb.X.rows() || pa.X.cols() != pb.X.cols())
        return std::numeric_limits<double>::infinity();
    double m = (pa.X - pb.X).cwiseAbs().maxCoeff();
    if (pa.has_velocities && pb.has_velocities)
        m = std::max(m, (pa.V - pb.V).cwiseAbs().maxCoeff());
    return m;
}

}  // namespace canon
