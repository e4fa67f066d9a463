#include "canon/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace canon {

// ---- n-body ---------------------------------------------------------------------

Eigen::MatrixXd nbody_forces(const Eigen::MatrixXd& x, const Eigen::VectorXd& q,
                             double softening) {
    const Eigen::Index n = x.rows();
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(n, x.cols());
    const double eps2 = softening * softening;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const Eigen::RowVectorXd r = x.row(i) - x.row(j);
            const double d2 = r.squaredNorm() + eps2;
            f.row(i) += q(i) * q(j) * r / (d2 * std::sqrt(d2));
        }
    return f;
}

Eigen::MatrixXd nbody_simulate(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& v0,
                               const Eigen::VectorXd& q, double dt, std::size_t n_steps,
                               double softening, Eigen::MatrixXd* v_final) {
    Eigen::MatrixXd x = x0, v = v0;
    Eigen::MatrixXd a = nbody_forces(x, q, softening);  // unit masses
    for (std::size_t s = 0; s < n_steps; ++s) {
        v += 0.5 * dt * a;
        x += dt * v;
        a = nbody_forces(x, q, softening);
        v += 0.5 * dt * a;
    }
    if (v_final) *v_final = v;
    return x;
}

double nbody_total_energy(const Eigen::MatrixXd& x, const Eigen::MatrixXd& v,
                          const Eigen::VectorXd& q, double softening) {
    double e = 0.5 * v.squaredNorm();
    const double eps2 = softening * softening;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = i + 1; j < x.rows(); ++j)
            e += q(i) * q(j) / std::sqrt((x.row(i) - x.row(j)).squaredNorm() + eps2);
    return e;
}

NBodyDataset gen_nbody(const NBodyGenConfig& cfg, std::uint64_t seed) {
    NBodyDataset ds;
    ds.n_particles = cfg.n_particles;
    ds.samples.resize(cfg.n_samples);
    const Rng base = Rng::seeded(seed);
    for (std::size_t s = 0; s < cfg.n_samples; ++s) {
        Rng rng = base.fork(s);
        NBodySample& smp = ds.samples[s];
        const auto n = static_cast<Eigen::Index>(cfg.n_particles);
        smp.x0 = Eigen::MatrixXd(n, 3);
        smp.v0 = Eigen::MatrixXd(n, 3);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < 3; ++j) {
                smp.x0(i, j) = rng.gaussian();
                smp.v0(i, j) = rng.gaussian(0.0, 0.5);
            }
        smp.v0.rowwise() -= smp.v0.colwise().mean();  // zero net momentum
        smp.q = Eigen::VectorXd(n);
        for (Eigen::Index i = 0; i < n; ++i)
            smp.q(i) = (i % 2 == 0) ? 1.0 : -1.0;  // one extra +1 when odd
        for (Eigen::Index i = n; i > 1; --i) {
            const auto j = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(i)));
            std::swap(smp.q(i - 1), smp.q(j));
        }
        smp.xt = nbody_simulate(smp.x0, smp.v0, smp.q, cfg.dt, cfg.n_steps, cfg.softening);
    }
    return ds;
}

// ---- glyphs -----------------------------------------------------------------------

namespace {

using Point = std::pair<double, double>;          // (x = column, y = row-down)
using Polyline = std::vector<Point>;

/// Class polylines on a 28-unit canvas, scaled at render time. Classes come
/// in two families sharing a base stroke; what distinguishes them is a short
/// tick whose position is defined relative to the base shape. A classifier
/// without orientation handling has to bind tick placement to the global
/// pose, which is what makes the rotated task hard. Every glyph is
/// asymmetric: no nonidentity planar rotation or reflection maps it to
/// itself, so orbits never collide across classes.
const std::vector<std::vector<Polyline>>& glyph_polylines() {
    static const std::vector<Polyline> ell = {{{9, 5}, {9, 20}}, {{9, 20}, {20, 20}}};
    static const std::vector<Polyline> zee = {
        {{8, 7}, {19, 7}}, {{19, 7}, {8, 21}}, {{8, 21}, {19, 21}}, {{19, 21}, {19, 17}}};
    auto with_tick = [](std::vector<Polyline> base, Point from, Point to) {
        base.push_back(Polyline{from, to});
        return base;
    };
    static const std::vector<std::vector<Polyline>> glyphs = {
        with_tick(ell, {9, 12}, {5.8, 12}),     // 0: L, tick west
        with_tick(ell, {9, 12}, {12.2, 12}),    // 1: L, tick east
        with_tick(ell, {9, 12}, {6.7, 9.7}),    // 2: L, tick northwest
        with_tick(ell, {9, 12}, {6.7, 14.3}),   // 3: L, tick southwest
        with_tick(zee, {13.5, 14}, {13.5, 10.8}),  // 4: Z, tick north
        with_tick(zee, {13.5, 14}, {13.5, 17.2}),  // 5: Z, tick south
        with_tick(zee, {13.5, 14}, {16.7, 14}),    // 6: Z, tick east
        with_tick(zee, {13.5, 14}, {15.8, 11.7}),  // 7: Z, tick northeast
    };
    return glyphs;
}

/// Fourfold-symmetric plus sign; only reachable behind a config flag.
const std::vector<Polyline>& symmetric_glyph() {
    static const std::vector<Polyline> plus = {{{13.5, 6}, {13.5, 21}}, {{6, 13.5}, {21, 13.5}}};
    return plus;
}

double dist_to_segment(double px, double py, const Point& a, const Point& b) {
    const double vx = b.first - a.first, vy = b.second - a.second;
    const double wx = px - a.first, wy = py - a.second;
    const double vv = vx * vx + vy * vy;
    double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (a.first + t * vx), dy = py - (a.second + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

Image rasterize(const std::vector<Polyline>& lines, std::size_t hw) {
    Image img;
    img.channels = 1;
    img.height = hw;
    img.width = hw;
    img.data.assign(hw * hw, 0.0);
    const double s = static_cast<double>(hw) / 28.0;
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
            const double px = static_cast<double>(j), py = static_cast<double>(i);
            double v = 0.0;
            for (const auto& line : lines)
                for (std::size_t k = 0; k + 1 < line.size(); ++k) {
                    Point a{line[k].first * s, line[k].second * s};
                    Point b{line[k + 1].first * s, line[k + 1].second * s};
                    const double d = dist_to_segment(px, py, a, b);
                    v = std::max(v, std::clamp(1.6 * s - d, 0.0, 1.0));
                }
            img.data[i * hw + j] = v;
        }
    return img;
}

std::vector<Polyline> class_lines(std::size_t class_id, bool symmetric_extra) {
    const auto& glyphs = glyph_polylines();
    if (symmetric_extra && class_id == glyphs.size()) return symmetric_glyph();
    if (class_id >= glyphs.size())
        throw std::out_of_range("glyph class " + std::to_string(class_id) + " does not exist");
    return glyphs[class_id];
}

}  // namespace

std::size_t glyph_class_count(bool include_symmetric_class) {
    return glyph_polylines().size() + (include_symmetric_class ? 1 : 0);
}

Image render_glyph_clean(std::size_t class_id, std::size_t hw, bool symmetric_extra) {
    return rasterize(class_lines(class_id, symmetric_extra), hw);
}

Image render_glyph(std::size_t class_id, std::size_t hw, Rng& rng, bool jitter,
                   bool symmetric_extra) {
    std::vector<Polyline> lines = class_lines(class_id, symmetric_extra);
    if (jitter) {
        for (auto& line : lines) {
            const double ox = std::clamp(rng.gaussian(0.0, 0.45), -1.0, 1.0);
            const double oy = std::clamp(rng.gaussian(0.0, 0.45), -1.0, 1.0);
            for (auto& p : line) {
                p.first += ox + std::clamp(rng.gaussian(0.0, 0.22), -0.5, 0.5);
                p.second += oy + std::clamp(rng.gaussian(0.0, 0.22), -0.5, 0.5);
            }
        }
    }
    return rasterize(lines, hw);
}

GlyphDataset gen_glyphs(const GlyphGenConfig& cfg, std::uint64_t seed) {
    GlyphDataset ds;
    const std::size_t n_classes =
        std::min<std::size_t>(cfg.n_classes, glyph_class_count(cfg.include_symmetric_class));
    ds.n_classes = n_classes;
    ds.hw = cfg.hw;
    ds.samples.resize(cfg.n_samples);
    const Rng base = Rng::seeded(seed);
    for (std::size_t s = 0; s < cfg.n_samples; ++s) {
        Rng rng = base.fork(s);
        GlyphSample& smp = ds.samples[s];
        smp.label = s % n_classes;
        const bool sym_extra =
            cfg.include_symmetric_class && smp.label == glyph_polylines().size();
        Image upright = render_glyph(smp.label, cfg.hw, rng, cfg.jitter, sym_extra);
        const GroupElement g = random_element(cfg.group, rng);
        smp.applied_g = std::get<PlanarDiscrete>(g);
        smp.image = act_image(smp.applied_g, upright);
    }
    return ds;
}

GlyphDataset gen_glyphs_with_classes(const GlyphGenConfig& cfg, std::uint64_t seed) {
    return gen_glyphs(cfg, seed);
}

// ---- shapes ------------------------------------------------------------------------

Eigen::MatrixXd sample_shape_surface(std::size_t class_id, std::size_t n_points, Rng& rng) {
    Eigen::MatrixXd pts(n_points, 3);
    auto unit_sphere = [&rng]() {
        Eigen::Vector3d u;
        do {
            u << rng.gaussian(), rng.gaussian(), rng.gaussian();
        } while (u.norm() < 1e-9);
        return Eigen::Vector3d(u / u.norm());
    };
    switch (class_id) {
        case 0: {  // ellipsoid, anisotropic axes
            const Eigen::Vector3d axes(1.0, 0.65, 0.4);
            for (std::size_t i = 0; i < n_points; ++i)
                pts.row(i) = unit_sphere().cwiseProduct(axes).transpose();
            break;
        }
        case 1: {  // box surface, area-weighted faces
            const Eigen::Vector3d h(1.0, 0.7, 0.45);
            const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
            const double total = areas[0] + areas[1] + areas[2];
            for (std::size_t i = 0; i < n_points; ++i) {
                const double pick = rng.uniform() * total;
                const int axis = pick < areas[0] ? 0 : (pick < areas[0] + areas[1] ? 1 : 2);
                Eigen::Vector3d p(rng.uniform(-1, 1) * h.x(), rng.uniform(-1, 1) * h.y(),
                                  rng.uniform(-1, 1) * h.z());
                p(axis) = (rng.uniform() < 0.5 ? -1.0 : 1.0) * h(axis);
                pts.row(i) = p.transpose();
            }
            break;
        }
        case 2: {  // dumbbell: two spheres
            for (std::size_t i = 0; i < n_points; ++i) {
                const double side = rng.uniform() < 0.5 ? -0.75 : 0.75;
                Eigen::Vector3d p = 0.45 * unit_sphere();
                p.x() += side;
                pts.row(i) = p.transpose();
            }
            break;
        }
        case 3: {  // torus, area-uniform via rejection on the minor angle
            const double R = 0.75, r = 0.28;
            for (std::size_t i = 0; i < n_points; ++i) {
                const double u = rng.uniform() * 2.0 * M_PI;
                double v;
                do {
                    v = rng.uniform() * 2.0 * M_PI;
                } while (rng.uniform() > (R + r * std::cos(v)) / (R + r));
                pts.row(i) << (R + r * std::cos(v)) * std::cos(u),
                    (R + r * std::cos(v)) * std::sin(u), r * std::sin(v);
            }
            break;
        }
        default:
            throw std::out_of_range("shape class " + std::to_string(class_id) + " does not exist");
    }
    return pts;
}

ShapeDataset gen_shapes(const ShapeGenConfig& cfg, std::uint64_t seed) {
    ShapeDataset ds;
    ds.n_classes = cfg.n_classes;
    ds.samples.resize(cfg.n_samples);
    const Rng base = Rng::seeded(seed);
    for (std::size_t s = 0; s < cfg.n_samples; ++s) {
        Rng rng = base.fork(s);
        ShapeSample& smp = ds.samples[s];
        smp.label = s % cfg.n_classes;
        Eigen::MatrixXd pts = sample_shape_surface(smp.label, cfg.n_points, rng);
        for (Eigen::Index i = 0; i < pts.rows(); ++i)
            for (Eigen::Index j = 0; j < 3; ++j) pts(i, j) += rng.gaussian(0.0, cfg.noise);
        const Eigen::MatrixXd rot = random_orthogonal(3, rng, /*special=*/true);
        Eigen::RowVector3d t(rng.gaussian(0.0, 0.5), rng.gaussian(0.0, 0.5),
                             rng.gaussian(0.0, 0.5));
        smp.points = (pts * rot.transpose()).rowwise() + t;
    }
    return ds;
}

// ---- IDX ----------------------------------------------------------------------------

namespace {

std::uint32_t read_be_u32(std::istream& is, const std::string& path, std::size_t offset) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is)
        throw IoError("IDX: truncated header in " + path + " at byte offset " +
                      std::to_string(offset));
    return (static_cast<std::uint32_t>(buf[0]) << 24) | (static_cast<std::uint32_t>(buf[1]) << 16) |
           (static_cast<std::uint32_t>(buf[2]) << 8) | static_cast<std::uint32_t>(buf[3]);
}

}  // namespace

std::vector<Image> read_idx_images(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("IDX: cannot open " + path);
    const std::uint32_t magic = read_be_u32(is, path, 0);
    if (magic != 0x00000803u)
        throw IoError("IDX: bad magic in " + path + ": expected 0x00000803, got 0x" +
                      [&] {
                          char b[16];
                          std::snprintf(b, sizeof b, "%08x", magic);
                          return std::string(b);
                      }() +
                      " at byte offset 0");
    const std::uint32_t n = read_be_u32(is, path, 4);
    const std::uint32_t h = read_be_u32(is, path, 8);
    const std::uint32_t w = read_be_u32(is, path, 12);
    std::vector<Image> images(n);
    std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
    for (std::uint32_t i = 0; i < n; ++i) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!is)
            throw IoError("IDX: truncated payload in " + path + " at byte offset " +
                          std::to_string(16 + static_cast<std::size_t>(i) * row.size()));
        Image& img = images[i];
        img.channels = 1;
        img.height = h;
        img.width = w;
        img.data.resize(row.size());
        for (std::size_t p = 0; p < row.size(); ++p)
            img.data[p] = static_cast<double>(row[p]) / 255.0;
    }
    return images;
}

std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("IDX: cannot open " + path);
    const std::uint32_t magic = read_be_u32(is, path, 0);
    if (magic != 0x00000801u)
        throw IoError("IDX: bad magic in " + path + ": expected 0x00000801, got 0x" +
                      [&] {
                          char b[16];
                          std::snprintf(b, sizeof b, "%08x", magic);
                          return std::string(b);
                      }() +
                      " at byte offset 0");
    const std::uint32_t n = read_be_u32(is, path, 4);
    std::vector<std::uint8_t> labels(n);
    is.read(reinterpret_cast<char*>(labels.data()), n);
    if (!is) throw IoError("IDX: truncated payload in " + path + " at byte offset 8");
    return labels;
}

// ---- dataset containers ----------------------------------------------------------------

namespace {

constexpr const char* kGeneratorVersion = "1";

void write_meta(const std::string& path, const std::string& task, std::size_t count,
                std::uint64_t seed) {
    std::ofstream os(path + ".meta");
    if (!os) throw IoError("cannot open " + path + ".meta for writing");
    os << "task = " << task << "\n";
    os << "count = " << count << "\n";
    os << "seed = " << seed << "\n";
    os << "generator_version = " << kGeneratorVersion << "\n";
}

Tensor pack_matrix_stack(const std::vector<const Eigen::MatrixXd*>& mats) {
    const auto n = mats.size();
    const std::size_t r = static_cast<std::size_t>(mats[0]->rows());
    const std::size_t c = static_cast<std::size_t>(mats[0]->cols());
    std::vector<double> data;
    data.reserve(n * r * c);
    for (const auto* m : mats)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) data.push_back((*m)(i, j));
    return Tensor::from_data({n, r, c}, std::move(data));
}

}  // namespace

void save_nbody(const std::string& path, const NBodyDataset& ds, std::uint64_t seed) {
    std::vector<const Eigen::MatrixXd*> x0s, v0s, xts;
    std::vector<double> charges;
    for (const auto& s : ds.samples) {
        x0s.push_back(&s.x0);
        v0s.push_back(&s.v0);
        xts.push_back(&s.xt);
        for (Eigen::Index i = 0; i < s.q.size(); ++i) charges.push_back(s.q(i));
    }
    const std::size_t n = ds.samples.size();
    write_canon1(path, {{"x0", pack_matrix_stack(x0s)},
                        {"v0", pack_matrix_stack(v0s)},
                        {"xt", pack_matrix_stack(xts)},
                        {"q", Tensor::from_data({n, ds.n_particles}, charges)}});
    write_meta(path, "nbody", n, seed);
}

NBodyDataset load_nbody(const std::string& path) {
    auto tensors = read_canon1(path);
    auto find = [&](const std::string& name) -> Tensor& {
        for (auto& [n, t] : tensors)
            if (n == name) return t;
        throw IoError("dataset " + path + ": missing tensor '" + name + "'");
    };
    Tensor& x0 = find("x0");
    Tensor& v0 = find("v0");
    Tensor& xt = find("xt");
    Tensor& q = find("q");
    NBodyDataset ds;
    const std::size_t n = x0.shape()[0], p = x0.shape()[1], d = x0.shape()[2];
    ds.n_particles = p;
    ds.samples.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
        auto unpack = [&](const Tensor& t) {
            Eigen::MatrixXd m(p, d);
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < d; ++j) m(i, j) = t.data()[(s * p + i) * d + j];
            return m;
        };
        ds.samples[s].x0 = unpack(x0);
        ds.samples[s].v0 = unpack(v0);
        ds.samples[s].xt = unpack(xt);
        ds.samples[s].q = Eigen::VectorXd(p);
        for (std::size_t i = 0; i < p; ++i) ds.samples[s].q(i) = q.data()[s * p + i];
    }
    return ds;
}

void save_glyphs(const std::string& path, const GlyphDataset& ds, std::uint64_t seed) {
    const std::size_t n = ds.samples.size(), hw = ds.hw;
    std::vector<double> pixels, labels, ks, rs, folds;
    pixels.reserve(n * hw * hw);
    for (const auto& s : ds.samples) {
        pixels.insert(pixels.end(), s.image.data.begin(), s.image.data.end());
        labels.push_back(static_cast<double>(s.label));
        ks.push_back(static_cast<double>(s.applied_g.k));
        rs.push_back(s.applied_g.r ? 1.0 : 0.0);
        folds.push_back(static_cast<double>(s.applied_g.n));
    }
    write_canon1(path, {{"images", Tensor::from_data({n, 1, hw, hw}, std::move(pixels))},
                        {"labels", Tensor::from_data({n}, labels)},
                        {"applied_k", Tensor::from_data({n}, ks)},
                        {"applied_r", Tensor::from_data({n}, rs)},
                        {"applied_n", Tensor::from_data({n}, folds)}});
    write_meta(path, "glyphs", n, seed);
}

GlyphDataset load_glyphs(const std::string& path) {
    auto tensors = read_canon1(path);
    auto find = [&](const std::string& name) -> Tensor& {
        for (auto& [n, t] : tensors)
            if (n == name) return t;
        throw IoError("dataset " + path + ": missing tensor '" + name + "'");
    };
    Tensor& images = find("images");
    Tensor& labels = find("labels");
    Tensor& ks = find("applied_k");
    Tensor& rs = find("applied_r");
    Tensor& folds = find("applied_n");
    GlyphDataset ds;
    const std::size_t n = images.shape()[0], hw = images.shape()[2];
    ds.hw = hw;
    std::size_t max_label = 0;
    ds.samples.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
        GlyphSample& smp = ds.samples[s];
        smp.image.channels = 1;
        smp.image.height = hw;
        smp.image.width = hw;
        smp.image.data.assign(images.data().begin() + static_cast<long>(s * hw * hw),
                              images.data().begin() + static_cast<long>((s + 1) * hw * hw));
        smp.label = static_cast<std::size_t>(labels.data()[s]);
        max_label = std::max(max_label, smp.label);
        smp.applied_g = PlanarDiscrete{static_cast<int>(folds.data()[s]),
                                       static_cast<int>(ks.data()[s]), rs.data()[s] != 0.0};
    }
    ds.n_classes = max_label + 1;
    return ds;
}

void save_shapes(const std::string& path, const ShapeDataset& ds, std::uint64_t seed) {
    const std::size_t n = ds.samples.size();
    const std::size_t p = n ? static_cast<std::size_t>(ds.samples[0].points.rows()) : 0;
    std::vector<double> pts, labels;
    pts.reserve(n * p * 3);
    for (const auto& s : ds.samples) {
        for (Eigen::Index i = 0; i < s.points.rows(); ++i)
            for (Eigen::Index j = 0; j < 3; ++j) pts.push_back(s.points(i, j));
        labels.push_back(static_cast<double>(s.label));
    }
    write_canon1(path, {{"points", Tensor::from_data({n, p, 3}, std::move(pts))},
                        {"labels", Tensor::from_data({n}, labels)}});
    write_meta(path, "shapes", n, seed);
}

ShapeDataset load_shapes(const std::string& path) {
    auto tensors = read_canon1(path);
    auto find = [&](const std::string& name) -> Tensor& {
        for (auto& [n, t] : tensors)
            if (n == name) return t;
        throw IoError("dataset " + path + ": missing tensor '" + name + "'");
    };
    Tensor& points = find("points");
    Tensor& labels = find("labels");
    ShapeDataset ds;
    const std::size_t n = points.shape()[0], p = points.shape()[1];
    std::size_t max_label = 0;
    ds.samples.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
        ShapeSample& smp = ds.samples[s];
        smp.points = Eigen::MatrixXd(p, 3);
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                smp.points(i, j) = points.data()[(s * p + i) * 3 + j];
        smp.label = static_cast<std::size_t>(labels.data()[s]);
        max_label = std::max(max_label, smp.label);
    }
    ds.n_classes = max_label + 1;
    return ds;
}

}  // namespace canon
