#pragma once

#include <Eigen/Core>

#include <memory>
#include <string>
#include <vector>

#include "canon/groups.hpp"
#include "canon/rng.hpp"
#include "canon/tensor.hpp"

namespace canon {

/// Uniform init in [-a, a] with a = sqrt(1 / fan_in).
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

Tensor tensor_from_matrix(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_tensor(const Tensor& t);

// ---- plain building blocks ---------------------------------------------------

struct LinearLayer {
    Tensor W;  // [out, in]
    Tensor b;  // [out], absent when bias = false

    LinearLayer() = default;
    LinearLayer(ParameterStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
                Rng& rng, bool bias = true);
    Tensor forward(const Tensor& x) const;  // [N, in] -> [N, out]
};

enum class Activation { Relu, Tanh, None };

struct Mlp {
    std::vector<LinearLayer> layers;
    Activation hidden = Activation::Relu;

    Mlp() = default;
    Mlp(ParameterStore& ps, const std::string& prefix, const std::vector<std::size_t>& widths,
        Rng& rng, Activation hidden_act = Activation::Relu);
    Tensor forward(const Tensor& x) const;
};

// ---- convolution ---------------------------------------------------------------

enum class PadMode { Zero, Circular };

/// 2-D convolution (cross-correlation) with "same" padding of (k-1)/2.
/// x: [B, C, H, W], w: [Co, C, kh, kw], b: [Co]. Odd kernels only.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, PadMode pad);

/// Per-(sample, channel) standardization over the spatial extent:
/// y = (x - mu) / sqrt(var + eps). Reductions use permutation-stable sums so
/// spatially permuted inputs standardize bit-identically.
Tensor standardize_channels(const Tensor& x, double eps = 1e-5);

/// Global mean pool over the spatial extent, [B, C, H, W] -> [B, C], with
/// permutation-stable accumulation.
Tensor global_mean_pool(const Tensor& x);

enum class CnnHead { Flatten, GlobalPool };

struct CnnSpec {
    std::size_t in_channels = 1;
    std::size_t image_hw = 28;
    std::vector<std::size_t> channels = {8, 16, 32};
    std::vector<std::size_t> strides = {1, 2, 2};
    std::size_t kernel = 3;
    PadMode pad = PadMode::Zero;
    bool standardize = true;
    CnnHead head = CnnHead::Flatten;  // GlobalPool keeps the head shift-invariant
    std::size_t fc_hidden = 64;
    std::size_t n_out = 8;
};

struct Cnn {
    CnnSpec spec;
    std::size_t final_hw = 0;
    std::vector<Tensor> conv_w, conv_b;
    LinearLayer fc1, fc2;

    Cnn() = default;
    Cnn(ParameterStore& ps, const std::string& prefix, const CnnSpec& s, Rng& rng);
    Tensor forward(const Tensor& x) const;  // [B, C, H, W] -> [B, n_out]
};

// ---- vector-channel (rotation-equivariant) blocks -----------------------------
// Features are [C, N, d]: C vector channels per point, each a d-vector.
// Channel mixing acts identically on every coordinate, so rotating all
// vectors commutes with every layer here.

Tensor vn_linear(const Tensor& w, const Tensor& v);  // [C',C] x [C,N,d] -> [C',N,d]

/// Projection nonlinearity: with direction q (a learned channel mix of v),
/// keeps v when <v,q> >= 0 and removes the q-component otherwise. Directions
/// with near-zero norm pass through and bump the warning counter.
Tensor vn_project(const Tensor& v, const Tensor& q,
                  const std::shared_ptr<std::size_t>& degenerate_count);

Tensor vn_mean_pool(const Tensor& v);  // [C,N,d] -> [C,d]

struct VnDeepSetsSpec {
    std::size_t in_channels = 1;   // 1 for positions, 2 with velocities
    std::size_t hidden = 32;
    std::size_t out_vectors = 3;   // frame vectors (+1 when a translation head is learned)
    bool nonlinear = true;         // false = single linear layer + pooling
};

struct VnDeepSets {
    VnDeepSetsSpec spec;
    Tensor w1, u1, w2;
    std::shared_ptr<std::size_t> degenerate_directions = std::make_shared<std::size_t>(0);

    VnDeepSets() = default;
    VnDeepSets(ParameterStore& ps, const std::string& prefix, const VnDeepSetsSpec& s, Rng& rng);
    /// [C_in, N, d] per-point vector features -> [out_vectors, d] pooled.
    Tensor forward(const Tensor& v) const;
};

// ---- group-lifting correlation -------------------------------------------------

/// Index layout of fibers: rotations 0..n-1 first, then (for dihedral groups)
/// the reflected copies n..2n-1.
std::vector<PlanarDiscrete> fiber_elements(const GroupSpec& spec);

/// Cayley table over fiber_elements: table[m][d] = index of g_m * g_d.
std::vector<std::vector<std::size_t>> fiber_table(const GroupSpec& spec);

/// Lifting correlation with image-sized filters evaluated at the centered
/// alignment only: F[o, m] = sum_{c,q} w[o,c,q] * I(g_m(q)). The sum runs
/// over filter positions in fixed order, so inputs transformed by an exact
/// group element produce bit-identically permuted fibers.
/// img: [C, H, W], w: [Co, C, H, W] -> [Co, |G|].
Tensor lifting_fibers(const Tensor& img, const Tensor& w, const GroupSpec& spec);

/// Spatially extended variant with circular wrap-around:
/// F[o, m, t] = sum_{c,q} w[o,c,q] * I(g_m(q) + t). Averaging the t axis
/// afterwards makes the fiber head invariant to circular shifts.
/// Output: [Co, |G|, H*W].
Tensor lifting_fibers_spatial(const Tensor& img, const Tensor& w, const GroupSpec& spec);

/// 1x1 group convolution: F'[c', m] = sum_{c, d} w[c', c, d] * F[c, m*d].
/// The inner sum iterates the relative element d in fixed order, preserving
/// bit-exact fiber-shift equivariance.
Tensor group_conv1x1(const Tensor& f, const Tensor& w, const GroupSpec& spec);

/// Same with a trailing spatial axis: [C, |G|, T] -> [C', |G|, T].
Tensor group_conv1x1_spatial(const Tensor& f, const Tensor& w, const GroupSpec& spec);

/// Averages channels (and spatial positions when present, permutation-stably)
/// into one logit per fiber: [C, |G|] or [C, |G|, T] -> [|G|].
Tensor fiber_logits(const Tensor& f);

/// Differentiable-in-pixels application of a fixed planar element.
Tensor act_image_op(const Tensor& img, const PlanarDiscrete& g);

/// 2x2 average pooling with permutation-stable four-value sums: quarter
/// turns of the input map to bit-exact quarter turns of the output.
Tensor avg_pool2_stable(const Tensor& img);  // [C,H,W] -> [C,H/2,W/2]

Image image_from_tensor(const Tensor& t);
Tensor tensor_from_image(const Image& img);

// ---- graph network --------------------------------------------------------------

struct GnnSpec {
    std::size_t node_features = 7;  // position, velocity, charge
    std::size_t edge_features = 2;  // charge product, squared distance
    std::size_t hidden = 32;
    std::size_t layers = 4;
    std::size_t n_out = 3;
};

/// Message passing on a fixed edge list: messages from MLPs over
/// (source, target, edge features), mean-aggregated per target node.
struct Gnn {
    GnnSpec spec;
    Mlp embed;
    std::vector<Mlp> edge_mlps, node_mlps;
    Mlp decode;

    Gnn() = default;
    Gnn(ParameterStore& ps, const std::string& prefix, const GnnSpec& s, Rng& rng);
    /// nodes: [N_total, node_features]; src/dst: edge endpoints into the node
    /// rows; edge_feat: [E, edge_features]. Returns [N_total, n_out].
    Tensor forward(const Tensor& nodes, const std::vector<std::size_t>& src,
                   const std::vector<std::size_t>& dst, const Tensor& edge_feat) const;
};

/// Mean aggregation of edge messages onto nodes; fixed edge order.
Tensor scatter_mean_rows(const Tensor& messages, const std::vector<std::size_t>& dst,
                         std::size_t n_rows);

// ---- point-cloud predictor -------------------------------------------------------

struct DeepSetsSpec {
    std::size_t in_features = 3;
    std::size_t phi_hidden = 64;
    std::size_t phi_out = 128;
    std::size_t rho_hidden = 64;
    std::size_t n_out = 4;
};

/// Permutation-invariant set network: shared per-point MLP, mean pooling,
/// then an output MLP.
struct DeepSetsNet {
    DeepSetsSpec spec;
    Mlp phi, rho;

    DeepSetsNet() = default;
    DeepSetsNet(ParameterStore& ps, const std::string& prefix, const DeepSetsSpec& s, Rng& rng);
    /// x: [B, N, F] -> [B, n_out].
    Tensor forward(const Tensor& x) const;
};

// ---- group-convolution baseline (timing comparisons) ------------------------------

/// Forward-only predictor where every layer carries the fiber axis: a k x k
/// lifting layer followed by 3 x 3 group convolutions. Cost grows with the
/// square of the group order; used as the scaling baseline in benchmarks.
struct GcnnBaseline {
    GroupSpec group;
    std::size_t channels = 4;
    std::size_t kernel = 5;
    Eigen::MatrixXd lift_w;       // [channels, kernel*kernel]
    std::vector<double> gconv_w;  // [channels, channels, |G|, 3, 3]
    Eigen::MatrixXd head;         // [n_out, channels]
    // per fiber: bilinear taps of the rotated lifting offsets, rounded
    // integer offsets of the rotated 3x3 stencil, and the Cayley table
    std::vector<std::vector<std::pair<long, long>>> stencil_offsets;
    std::vector<std::vector<double>> lift_offsets;  // [m][q*2]: (di, dj) real
    std::vector<std::vector<std::size_t>> table;

    GcnnBaseline(const GroupSpec& g, std::size_t ch, std::size_t n_out, Rng& rng);
    std::vector<double> forward(const Image& img) const;
};

}  // namespace canon
