#pragma once

#include <memory>
#include <optional>
#include <span>

#include "canon/canonicalization.hpp"
#include "canon/groups.hpp"
#include "canon/layers.hpp"

namespace canon {

/// How the output transforms under the group: not at all (class logits), or
/// as positions (rows see the full Euclidean action).
enum class OutputRep { Invariant, Positions };

/// Applies the declared output action to a flattened output vector.
std::vector<double> apply_output_rep(OutputRep rep, const GroupElement& g,
                                     const std::vector<double>& y, std::size_t n_rows,
                                     std::size_t dim);

struct PipelineOutput {
    Tensor y;
    bool unique_argmax = true;  // image pipelines: fiber argmax was unique
    bool degenerate = false;    // point clouds: frame extraction fell back
    std::optional<Sample> canonical;
};

/// A full canonicalize-then-predict model over task samples.
class Pipeline {
public:
    virtual ~Pipeline() = default;
    virtual PipelineOutput forward_sample(const Sample& x, bool want_canonical = false) = 0;
    virtual Tensor forward_batch(std::span<const Sample> xs) = 0;
    virtual OutputRep output_rep() const = 0;
    /// Parameter stores in optimizer order: canonicalizer first (when
    /// trainable), then the predictor.
    virtual std::vector<ParameterStore*> parameter_stores() = 0;
    virtual ParameterStore* canonicalizer_store() = 0;
};

enum class CanonKind { Learned, Pca, None };

// ---- point-cloud classification -----------------------------------------------

struct PointCloudClassifierSpec {
    CanonKind canon = CanonKind::Learned;
    PointCloudCanonicalizerSpec canonicalizer;  // use_velocities forced off
    DeepSetsSpec predictor;
};

class PointCloudClassifierPipeline : public Pipeline {
public:
    PointCloudClassifierPipeline(const PointCloudClassifierSpec& spec, std::uint64_t seed);

    PipelineOutput forward_sample(const Sample& x, bool want_canonical = false) override;
    Tensor forward_batch(std::span<const Sample> xs) override;
    OutputRep output_rep() const override { return OutputRep::Invariant; }
    std::vector<ParameterStore*> parameter_stores() override;
    ParameterStore* canonicalizer_store() override;

    PointCloudCanonicalizer* canonicalizer() { return canonicalizer_.get(); }
    DeepSetsNet& predictor() { return predictor_; }

private:
    Tensor canonical_points(const Tensor& x);
    PointCloudClassifierSpec spec_;
    std::unique_ptr<PointCloudCanonicalizer> canonicalizer_;
    ParameterStore predictor_params_;
    DeepSetsNet predictor_;
};

// ---- n-body dynamics ------------------------------------------------------------

struct NBodyPipelineSpec {
    CanonKind canon = CanonKind::Learned;
    PointCloudCanonicalizerSpec canonicalizer;  // use_velocities forced on
    GnnSpec predictor;
};

/// Positions head: the network predicts displacements in the canonical frame
/// and the selected group element carries them back, so translations cancel
/// identically and rotations act exactly on the output.
class NBodyPipeline : public Pipeline {
public:
    NBodyPipeline(const NBodyPipelineSpec& spec, std::uint64_t seed);

    PipelineOutput forward_sample(const Sample& x, bool want_canonical = false) override;
    Tensor forward_batch(std::span<const Sample> xs) override;  // [B*N, 3]
    OutputRep output_rep() const override { return OutputRep::Positions; }
    std::vector<ParameterStore*> parameter_stores() override;
    ParameterStore* canonicalizer_store() override;

    PointCloudCanonicalizer* canonicalizer() { return canonicalizer_.get(); }
    std::size_t degenerate_in_last_batch() const { return degenerate_last_batch_; }

private:
    NBodyPipelineSpec spec_;
    std::unique_ptr<PointCloudCanonicalizer> canonicalizer_;
    ParameterStore predictor_params_;
    Gnn predictor_;
    std::size_t degenerate_last_batch_ = 0;
};

// ---- image classification ----------------------------------------------------------

struct ImageClassifierSpec {
    CanonKind canon = CanonKind::Learned;
    bool partial = false;  // rotation canonicalizer + shift-equivariant predictor
    ImageCanonicalizerSpec canonicalizer;
    CnnSpec predictor;
};

/// Full route: the canonicalizer removes the whole planar group and the
/// predictor is unconstrained. Partial route: fibers are averaged over all
/// circular shifts (shift-invariant orientation estimate) and the predictor
/// uses circular padding with stride 1, so composite rotation+shift inputs
/// map to identical logits.
class ImageClassifierPipeline : public Pipeline {
public:
    ImageClassifierPipeline(const ImageClassifierSpec& spec, std::uint64_t seed);

    PipelineOutput forward_sample(const Sample& x, bool want_canonical = false) override;
    Tensor forward_batch(std::span<const Sample> xs) override;
    OutputRep output_rep() const override { return OutputRep::Invariant; }
    std::vector<ParameterStore*> parameter_stores() override;
    ParameterStore* canonicalizer_store() override;

    ImageCanonicalizer* canonicalizer() { return canonicalizer_.get(); }
    Cnn& predictor() { return predictor_; }
    /// Soft selection end to end (finite-difference path).
    void set_soft_selection(bool v) { soft_ = v; }

private:
    Tensor canonical_image(const Tensor& img, bool* unique_argmax);
    ImageClassifierSpec spec_;
    std::unique_ptr<ImageCanonicalizer> canonicalizer_;
    ParameterStore predictor_params_;
    Cnn predictor_;
    bool soft_ = false;
};

// ---- equivariance audit --------------------------------------------------------------

struct EquivarianceReport {
    GroupSpec group;
    std::size_t n_samples = 0;
    std::size_t n_transforms = 0;
    double max_abs_dev = 0.0;
    double max_rel_dev = 0.0;
    std::size_t worst_sample = 0, worst_transform = 0;
    std::size_t symmetric_inputs_flagged = 0;
    std::size_t relaxed_failures = 0;
    bool symmetric_detection_supported = true;  // false for continuous groups

    struct Row {
        std::size_t sample_id, transform_id;
        std::string group_desc;
        double abs_dev, rel_dev;
        bool symmetric_flag;
    };
    std::vector<Row> rows;
};

struct AuditOptions {
    std::size_t n_transforms = 4;
    double tol = 1e-6;
    double stabilizer_tol = 1e-9;
    bool exhaustive_discrete = false;  // iterate all elements instead of sampling
};

/// Compares phi(g.x) against rho'(g).phi(x) over random (or exhaustive)
/// group elements. Samples with a nontrivial stabilizer (discrete groups
/// only) and image fiber ties are flagged and checked under the relaxed
/// criterion: canonical samples must agree up to a stabilizer element of the
/// canonical sample.
EquivarianceReport audit_equivariance(Pipeline& model, const GroupSpec& spec,
                                      std::span<const Sample> dataset, const AuditOptions& opts,
                                      Rng& rng);

/// CSV with columns sample_id, transform_id, group_desc, abs_dev, rel_dev,
/// symmetric_flag.
void write_report_csv(const std::string& path, const EquivarianceReport& report);

Image circular_shift(const Image& img, long di, long dj);

}  // namespace canon
