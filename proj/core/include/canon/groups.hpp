#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "canon/rng.hpp"

namespace canon {

class GroupError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Element of a cyclic (r always false) or dihedral planar group: rotation by
/// 2*pi*k/n counterclockwise, optionally preceded by a horizontal flip.
struct PlanarDiscrete {
    int n = 1;
    int k = 0;
    bool r = false;
};

/// Element of E(d): orthogonal matrix plus translation, acting as x -> Ox + t.
struct EuclideanElement {
    Eigen::MatrixXd O;
    Eigen::VectorXd t;
};

/// Permutation sending row i to row sigma[i].
struct PermutationElement {
    std::vector<std::size_t> sigma;
};

using GroupElement = std::variant<PlanarDiscrete, EuclideanElement, PermutationElement>;

enum class GroupKind { Cn, Dn, SOd, Od, Ed, SEd, Sn };

struct GroupSpec {
    GroupKind kind = GroupKind::Cn;
    int n = 1;  // fold count, spatial dimension, or set size depending on kind

    bool discrete() const { return kind == GroupKind::Cn || kind == GroupKind::Dn || kind == GroupKind::Sn; }
    std::size_t order() const;  // discrete kinds only
};

/// Parses config strings of the form c4, d8, so3, o3, e3, se3, s5.
GroupSpec parse_group_spec(const std::string& text);
std::string to_string(const GroupSpec& spec);
std::string to_string(const GroupElement& g);

// ---- samples a group can act on ---------------------------------------------

struct PointCloud {
    Eigen::MatrixXd X;   // N x d positions
    Eigen::MatrixXd V;   // N x d velocities (rows may be empty)
    Eigen::VectorXd q;   // optional per-point scalars (charges); invariant under the action
    bool has_velocities = false;
};

struct Image {
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;  // row-major [c][i][j]

    double at(std::size_t c, std::size_t i, std::size_t j) const {
        return data[(c * height + i) * width + j];
    }
    double& at(std::size_t c, std::size_t i, std::size_t j) {
        return data[(c * height + i) * width + j];
    }
};

using Sample = std::variant<PointCloud, Image>;

// ---- group operations --------------------------------------------------------

GroupElement identity_like(const GroupElement& g);
GroupElement identity_element(const GroupSpec& spec);

/// Composition with the action-compatible convention:
/// act(compose(g1, g2), x) == act(g1, act(g2, x)).
/// For E(d) this is (O1, t1)(O2, t2) = (O1 O2, O1 t2 + t1).
GroupElement compose(const GroupElement& g1, const GroupElement& g2);
GroupElement inverse(const GroupElement& g);

/// Euclidean/permutation action on positions (rows of X) and velocities;
/// velocities see the orthogonal part only, never the translation.
/// PlanarDiscrete elements act on 2-D clouds through their 2x2 matrix.
PointCloud act_pointcloud(const GroupElement& g, const PointCloud& pc);

/// Planar action on a square image: exact pixel permutation at multiples of
/// 90 degrees, bilinear interpolation with zero padding otherwise. Reflection
/// is a horizontal flip applied before the rotation.
Image act_image(const PlanarDiscrete& g, const Image& img);

Sample act_sample(const GroupElement& g, const Sample& x);

/// True when the element's rotation angle is a multiple of 90 degrees, i.e.
/// the image action is an exact index permutation.
bool planar_is_exact(const PlanarDiscrete& g);

/// Source position sampled by the image action at output pixel (i, j):
/// returns (i_src, j_src) = g^{-1}(p) in pixel coordinates.
std::pair<double, double> planar_sample_pos(const PlanarDiscrete& g, std::size_t height,
                                            std::size_t width, double i, double j);

/// Position of g applied to pixel (i, j) (forward map, used by lifting
/// correlations which sample the image at transformed filter positions).
std::pair<double, double> planar_apply_pos(const PlanarDiscrete& g, std::size_t height,
                                           std::size_t width, double i, double j);

/// 2x2 orthogonal matrix of a planar element (rotation times optional flip).
Eigen::Matrix2d planar_matrix(const PlanarDiscrete& g);

/// Bilinear read with zero padding outside the grid.
double bilinear_sample(const Image& img, std::size_t channel, double i, double j);

GroupElement random_element(const GroupSpec& spec, Rng& rng);

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with positive
/// diagonal correction); det forced to +1 by a column swap when special=true.
Eigen::MatrixXd random_orthogonal(int d, Rng& rng, bool special);

/// All elements of a discrete group (Cn, Dn, or Sn with n <= 8).
std::vector<GroupElement> enumerate_elements(const GroupSpec& spec);

/// Elements g with ||act(g, x) - x||_inf <= tol; always contains the
/// identity. Discrete groups only.
std::vector<GroupElement> stabilizer_elements(const GroupSpec& spec, const Sample& x, double tol);

std::vector<Sample> orbit(const GroupSpec& spec, const Sample& x);

double max_abs_diff(const Sample& a, const Sample& b);

/// Set-aware comparison: point clouds match up to a row bijection (greedy
/// pairing within tol); images compare elementwise.
double set_matched_diff(const Sample& a, const Sample& b, double tol);

}  // namespace canon
