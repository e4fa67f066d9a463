#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "canon/checkpoint.hpp"
#include "canon/groups.hpp"
#include "canon/rng.hpp"

namespace canon {

// ---- charged-particle dynamics -----------------------------------------------

struct NBodySample {
    Eigen::MatrixXd x0, v0, xt;  // N x 3
    Eigen::VectorXd q;           // +1 / -1 charges
};

struct NBodyDataset {
    std::vector<NBodySample> samples;
    std::size_t n_particles = 5;
};

struct NBodyGenConfig {
    std::size_t n_samples = 1000;
    std::size_t n_particles = 5;
    double dt = 1e-3;
    std::size_t n_steps = 1000;
    double softening = 0.1;
};

/// Softened pairwise force on each particle:
/// F_i = sum_j q_i q_j (r_i - r_j) / (|r_i - r_j|^2 + eps^2)^{3/2}.
Eigen::MatrixXd nbody_forces(const Eigen::MatrixXd& x, const Eigen::VectorXd& q,
                             double softening);

/// Kick-drift-kick integration for n_steps; returns final positions.
Eigen::MatrixXd nbody_simulate(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& v0,
                               const Eigen::VectorXd& q, double dt, std::size_t n_steps,
                               double softening,
                               Eigen::MatrixXd* v_final = nullptr);

double nbody_total_energy(const Eigen::MatrixXd& x, const Eigen::MatrixXd& v,
                          const Eigen::VectorXd& q, double softening);

/// Positions ~ N(0,1), velocities ~ N(0,0.5) with the mean velocity removed,
/// balanced charges (one extra +1 for odd counts, order shuffled per sample).
/// Per-sample generator streams derive from (seed, index).
NBodyDataset gen_nbody(const NBodyGenConfig& cfg, std::uint64_t seed);

// ---- synthetic glyph images ----------------------------------------------------

struct GlyphSample {
    Image image;  // 1 x hw x hw, values in [0, 1]
    std::size_t label = 0;
    PlanarDiscrete applied_g;
};

struct GlyphDataset {
    std::vector<GlyphSample> samples;
    std::size_t n_classes = 8;
    std::size_t hw = 28;
};

struct GlyphGenConfig {
    std::size_t n_samples = 1000;
    std::size_t n_classes = 8;
    GroupSpec group{GroupKind::Cn, 8};  // c1 leaves glyphs unrotated
    std::size_t hw = 28;
    bool jitter = true;
    bool include_symmetric_class = false;  // appends a fourfold-symmetric class
};

/// Anti-aliased rasterization of the fixed class polylines at the given
/// size, without jitter or rotation.
Image render_glyph_clean(std::size_t class_id, std::size_t hw, bool symmetric_extra = false);

/// Jittered render: every polyline is offset by clamped Gaussian noise of at
/// most one pixel, plus smaller per-vertex wobble.
Image render_glyph(std::size_t class_id, std::size_t hw, Rng& rng, bool jitter,
                   bool symmetric_extra = false);

std::size_t glyph_class_count(bool include_symmetric_class);

GlyphDataset gen_glyphs(const GlyphGenConfig& cfg, std::uint64_t seed);

// ---- synthetic point-cloud shapes ------------------------------------------------

struct ShapeSample {
    Eigen::MatrixXd points;  // N x 3
    std::size_t label = 0;
};

struct ShapeDataset {
    std::vector<ShapeSample> samples;
    std::size_t n_classes = 4;
};

struct ShapeGenConfig {
    std::size_t n_samples = 400;
    std::size_t n_points = 128;
    std::size_t n_classes = 4;  // ellipsoid, box, dumbbell, torus
    double noise = 0.02;
};

/// Surface points in the object frame, before noise, scaling and pose.
Eigen::MatrixXd sample_shape_surface(std::size_t class_id, std::size_t n_points, Rng& rng);

GlyphDataset gen_glyphs_with_classes(const GlyphGenConfig& cfg, std::uint64_t seed);

ShapeDataset gen_shapes(const ShapeGenConfig& cfg, std::uint64_t seed);

// ---- IDX ingestion -----------------------------------------------------------------

/// Big-endian IDX image file (magic 0x00000803); pixel bytes scaled to [0,1].
std::vector<Image> read_idx_images(const std::string& path);

/// Big-endian IDX label file (magic 0x00000801).
std::vector<std::uint8_t> read_idx_labels(const std::string& path);

// ---- dataset containers --------------------------------------------------------------

/// Datasets are CANON1 tensor containers plus a text sidecar (path + ".meta")
/// recording task, counts, seed and generator version; round-trips are
/// bit-exact.
void save_nbody(const std::string& path, const NBodyDataset& ds, std::uint64_t seed);
NBodyDataset load_nbody(const std::string& path);
void save_glyphs(const std::string& path, const GlyphDataset& ds, std::uint64_t seed);
GlyphDataset load_glyphs(const std::string& path);
void save_shapes(const std::string& path, const ShapeDataset& ds, std::uint64_t seed);
ShapeDataset load_shapes(const std::string& path);

}  // namespace canon
