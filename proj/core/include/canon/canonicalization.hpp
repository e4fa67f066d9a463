#pragma once

#include <functional>
#include <optional>

#include "canon/groups.hpp"
#include "canon/layers.hpp"
#include "canon/tensor.hpp"

namespace canon {

/// Frame extraction failed: a residual collapsed during orthonormalization,
/// which happens exactly on (near-)symmetric or degenerate inputs.
class DegenerateFrame : public std::runtime_error {
public:
    DegenerateFrame(const std::string& msg, std::size_t index)
        : std::runtime_error(msg), failing_index(index) {}
    std::size_t failing_index;
};

class EmptyCloud : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---- Gram-Schmidt -------------------------------------------------------------

/// Orthonormalizes d linearly independent vectors (columns of v). The result
/// has orthonormal columns, first column v1/|v1|, preserved span and
/// preserved orientation sign. Throws DegenerateFrame when a residual norm
/// falls below 1e-6 times the largest input norm.
Eigen::MatrixXd gram_schmidt(const Eigen::MatrixXd& v);

/// Tape-recorded variant on a [d, d] tensor whose rows are the input
/// vectors; returns a [d, d] tensor whose rows are the orthonormal frame.
Tensor gram_schmidt_op(const Tensor& rows);

// ---- straight-through selection -------------------------------------------------

struct StraightThrough {
    std::size_t index = 0;    // argmax, ties broken to the lowest index
    Tensor weights;           // forward: exact one-hot; backward: softmax Jacobian
    bool unique_argmax = true;
};

/// Discrete selection with the straight-through gradient estimator: the
/// forward value is the exact one-hot of the argmax while the backward pass
/// behaves as if the output were softmax(logits).
StraightThrough straight_through_select(const Tensor& fiber_logits);

std::size_t argmax_lowest(std::span<const double> v);

// ---- point-cloud canonicalizer ----------------------------------------------------

enum class TranslationMode { Centroid, Learned };

struct PointCloudCanonicalizerSpec {
    int dim = 3;
    bool use_velocities = false;
    VnDeepSetsSpec net;            // out_vectors is derived, leave default
    TranslationMode translation = TranslationMode::Centroid;
    bool fallback_identity = false;  // identity frame instead of DegenerateFrame
};

/// Direct canonicalizer for point clouds: an equivariant vector-channel
/// network pools d vectors which Gram-Schmidt turns into a frame; the
/// translation part is the centroid, optionally plus a learned equivariant
/// offset.
class PointCloudCanonicalizer {
public:
    PointCloudCanonicalizer(const PointCloudCanonicalizerSpec& spec, std::uint64_t seed);

    struct Result {
        Tensor frame_rows;   // [d, d], rows form the orthonormal frame
        Tensor translation;  // [d]
        bool degenerate = false;
    };

    /// Differentiable canonicalization; x: [N, d], v optional [N, d].
    Result canonicalize(const Tensor& x, const Tensor* v = nullptr) const;

    /// Convenience wrapper producing a group element (no tape).
    EuclideanElement canonicalize_element(const PointCloud& pc) const;

    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }
    const PointCloudCanonicalizerSpec& spec() const { return spec_; }
    std::size_t degenerate_direction_count() const { return *net_.degenerate_directions; }

private:
    PointCloudCanonicalizerSpec spec_;
    ParameterStore params_;
    VnDeepSets net_;
};

// ---- image canonicalizer -----------------------------------------------------------

struct ImageCanonicalizerSpec {
    GroupSpec group{GroupKind::Cn, 4};
    std::size_t in_channels = 1;
    std::size_t image_hw = 28;
    std::size_t pool = 2;  // 2x2 rotation-exact pre-pooling stages (1 = off)
    std::size_t lift_channels = 2;
    std::size_t gconv_layers = 1;
    std::size_t gconv_channels = 2;
    bool spatial = false;  // average fibers over all circular shifts (partial route)
};

/// Direct canonicalizer for images: a lifting correlation plus 1x1 group
/// convolutions produce one logit per group element; the argmax picks the
/// orientation and the inverse element maps the image to its canonical pose.
class ImageCanonicalizer {
public:
    ImageCanonicalizer(const ImageCanonicalizerSpec& spec, std::uint64_t seed);

    struct Result {
        std::size_t index = 0;
        PlanarDiscrete element;  // selected group element
        Tensor canonical;        // [C, H, W] canonical image
        Tensor logits;           // [|G|]
        bool unique_argmax = true;
        double margin = 0.0;  // max logit minus runner-up
    };

    /// Fiber logits [|G|] for an image tensor [C, H, W].
    Tensor fibers(const Tensor& img) const;

    /// Full canonicalization. With soft = true the blend uses softmax weights
    /// end to end (no hard selection), which is the differentiability path
    /// checked by finite differences.
    Result canonicalize(const Tensor& img, bool soft = false) const;

    /// Inference path: precomputed transformed filter bank, single GEMV per
    /// image, no tape. Same map as canonicalize() up to float reassociation.
    Result canonicalize_fast(const Image& img) const;
    /// Batched inference: one filter-bank GEMM for the whole batch.
    std::vector<Result> canonicalize_fast_batch(std::span<const Image> images) const;
    void refresh_fast_bank() const;

    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }
    const ImageCanonicalizerSpec& spec() const { return spec_; }
    const std::vector<PlanarDiscrete>& elements() const { return elements_; }

private:
    ImageCanonicalizerSpec spec_;
    ParameterStore params_;
    std::size_t lift_hw_ = 28;
    Tensor wlift_;
    Tensor blift_;  // per-channel, constant across fibers: keeps equivariance
    std::vector<Tensor> wg_;
    std::vector<PlanarDiscrete> elements_;
    mutable Eigen::MatrixXd fast_bank_;  // [|G|*Co, C*H*W]
    mutable bool fast_bank_ready_ = false;
};

// ---- optimization approach ----------------------------------------------------------

/// Plain scalar energy over samples (no tape); the optimization approach
/// scores group elements by s(g, x) = E(act(g^{-1}, x)).
using EnergyFn = std::function<double(const Sample&)>;

double energy_s(const EnergyFn& e, const GroupElement& g, const Sample& x);

/// Same score with the input given in orbit form (x = g1 . x0): the group
/// bookkeeping happens in index arithmetic and the action is applied exactly
/// once, so the defining identity s(g, g1 . x0) = s(g1^{-1} g, x0) holds
/// bit-exactly for discrete groups.
double energy_s_orbit(const EnergyFn& e, const GroupElement& g, const GroupElement& g1,
                      const Sample& x0);

struct GridArgminResult {
    std::size_t index = 0;  // lowest-index minimizer
    GroupElement element;
    std::vector<double> energies;
    bool unique = true;
};

/// Exact argmin of s(g, x) over an enumerable group.
GridArgminResult canonicalize_grid(const EnergyFn& e, const GroupSpec& spec, const Sample& x);

/// Energy of a continuous 2-D rotation angle, tape-recorded so the inner
/// gradient steps can differentiate through it.
using AngleEnergyFn = std::function<Tensor(const Tensor& theta)>;

struct AngleOptimResult {
    double theta = 0.0;                    // best final angle across restarts
    double energy = 0.0;
    std::vector<std::vector<double>> trajectories;  // per restart, per step angle
    Tensor theta_blend;  // straight-through blend over restart candidates
};

/// Unrolled first-order descent on the angle: each restart runs `steps`
/// updates theta <- theta - lr * dE/dtheta with the inner gradient detached;
/// the final candidates are combined by a straight-through selection over
/// their energies so training signal reaches the energy parameters.
AngleOptimResult canonicalize_angle(const AngleEnergyFn& e, std::size_t steps, double lr,
                                    std::size_t restarts);

// ---- Theorem B.1-style checks ---------------------------------------------------------

struct EnergyConditionReport {
    std::size_t samples_checked = 0;
    std::size_t condition1_checks = 0;
    std::size_t condition1_violations = 0;
    std::size_t condition2_violations = 0;
    std::vector<std::size_t> condition2_failing_samples;
};

/// Verifies the two sufficient conditions for the optimization approach on a
/// discrete group: (1) the score identity on every (g, g1, x) triple, checked
/// bit-exactly in orbit form; (2) every argmin set lies inside one stabilizer
/// coset. Violations are reported, not fatal.
EnergyConditionReport check_energy_conditions(const EnergyFn& e, const GroupSpec& spec,
                                              const std::vector<Sample>& samples, double tol);

// ---- heuristic (PCA) canonicalizers ---------------------------------------------------

/// Principal-axes frame: eigenvectors of the centered covariance in
/// eigenvalue-descending order, each sign-fixed to a nonnegative dot product
/// with the first point's centered position.
Eigen::MatrixXd pca_frame(const Eigen::MatrixXd& x);

struct PcaImageResult {
    double angle = 0.0;  // selected orientation, counterclockwise radians
    Image canonical;
};

/// Orients an image by the principal axis of its intensity mass; the sign
/// ambiguity is resolved by requiring nonnegative skewness along the axis.
PcaImageResult pca_canonicalize_image(const Image& img);

Image rotate_image_by_angle(const Image& img, double angle_ccw);

}  // namespace canon
