#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "canon/pipeline.hpp"
#include "canon/tasks.hpp"

using namespace canon;

namespace {

PointCloud random_cloud(std::size_t n, Rng& rng, bool velocities = false) {
    PointCloud pc;
    pc.X = Eigen::MatrixXd(n, 3);
    for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) pc.X(static_cast<Eigen::Index>(i), j) = rng.gaussian();
    if (velocities) {
        pc.V = Eigen::MatrixXd(n, 3);
        for (std::size_t i = 0; i < n; ++i)
            for (int j = 0; j < 3; ++j) pc.V(static_cast<Eigen::Index>(i), j) = rng.gaussian(0, 0.5);
        pc.has_velocities = true;
        pc.q = Eigen::VectorXd(n);
        for (std::size_t i = 0; i < n; ++i) pc.q(static_cast<Eigen::Index>(i)) = i % 2 ? 1.0 : -1.0;
    }
    return pc;
}

PointCloudClassifierSpec small_classifier_spec(CanonKind kind) {
    PointCloudClassifierSpec spec;
    spec.canon = kind;
    spec.canonicalizer.dim = 3;
    spec.canonicalizer.net.hidden = 8;
    spec.predictor.in_features = 3;
    spec.predictor.phi_hidden = 16;
    spec.predictor.phi_out = 16;
    spec.predictor.rho_hidden = 16;
    spec.predictor.n_out = 4;
    return spec;
}

ImageClassifierSpec small_image_spec(CanonKind kind, bool partial, int group_n = 4,
                                     std::size_t hw = 12) {
    ImageClassifierSpec spec;
    spec.canon = kind;
    spec.partial = partial;
    spec.canonicalizer.group = GroupSpec{GroupKind::Cn, group_n};
    spec.canonicalizer.image_hw = hw;
    spec.canonicalizer.lift_channels = 2;
    spec.canonicalizer.gconv_layers = 1;
    spec.predictor.in_channels = 1;
    spec.predictor.image_hw = hw;
    spec.predictor.channels = {4, 8};
    spec.predictor.strides = {1, 2};
    spec.predictor.n_out = 8;
    return spec;
}

Image glyph_like(std::size_t hw, Rng& rng) {
    Image img = render_glyph(rng.uniform_index(8), hw, rng, true);
    return img;
}

}  // namespace

TEST_CASE("point-cloud classifier is invariant to the euclidean group") {
    PointCloudClassifierPipeline model(small_classifier_spec(CanonKind::Learned), 31);
    Rng rng(201);
    const PointCloud pc = random_cloud(9, rng);
    NoGradGuard no_grad;
    const auto base = model.forward_sample(Sample{pc});
    for (int trial = 0; trial < 25; ++trial) {
        EuclideanElement g;
        g.O = random_orthogonal(3, rng, false);
        g.t = Eigen::Vector3d(rng.gaussian(), rng.gaussian(), rng.gaussian());
        const auto out = model.forward_sample(act_sample(GroupElement{g}, Sample{pc}));
        for (std::size_t i = 0; i < base.y.size(); ++i) {
            const double rel = std::abs(out.y.data()[i] - base.y.data()[i]) /
                               (std::abs(base.y.data()[i]) + 1e-12);
            CHECK(rel < 1e-8);
        }
    }
}

TEST_CASE("identity canonicalizer reduces the pipeline to the predictor") {
    PointCloudClassifierPipeline model(small_classifier_spec(CanonKind::None), 32);
    Rng rng(202);
    const PointCloud pc = random_cloud(5, rng);
    NoGradGuard no_grad;
    const auto out = model.forward_sample(Sample{pc});
    Tensor direct = model.predictor().forward(
        reshape(tensor_from_matrix(pc.X), {1, 5, 3}));
    CHECK(out.y.data() == direct.data());
}

TEST_CASE("n-body pipeline translation cancellation is near-exact") {
    NBodyPipelineSpec spec;
    spec.canon = CanonKind::Learned;
    spec.canonicalizer.net.hidden = 8;
    spec.predictor.hidden = 8;
    spec.predictor.layers = 2;
    NBodyPipeline model(spec, 33);
    Rng rng(203);
    const PointCloud pc = random_cloud(5, rng, true);
    NoGradGuard no_grad;
    const auto base = model.forward_sample(Sample{pc});
    const Eigen::Vector3d t0(0.4, -2.0, 1.1);
    PointCloud moved = pc;
    moved.X.rowwise() += t0.transpose();
    const auto out = model.forward_sample(Sample{moved});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(std::abs(out.y.data()[i * 3 + j] -
                           (base.y.data()[i * 3 + j] + t0(static_cast<Eigen::Index>(j)))) < 1e-12);
}

TEST_CASE("n-body pipeline is equivariant to rotations and permutations") {
    NBodyPipelineSpec spec;
    spec.canon = CanonKind::Learned;
    spec.canonicalizer.net.hidden = 8;
    spec.predictor.hidden = 8;
    spec.predictor.layers = 2;
    NBodyPipeline model(spec, 34);
    Rng rng(204);
    const PointCloud pc = random_cloud(5, rng, true);
    NoGradGuard no_grad;
    const auto base = model.forward_sample(Sample{pc});
    SUBCASE("rotation + translation") {
        for (int trial = 0; trial < 20; ++trial) {
            EuclideanElement g;
            g.O = random_orthogonal(3, rng, false);
            g.t = Eigen::Vector3d(rng.gaussian(), rng.gaussian(), rng.gaussian());
            const auto out = model.forward_sample(act_sample(GroupElement{g}, Sample{pc}));
            const auto expected = apply_output_rep(OutputRep::Positions, GroupElement{g},
                                                   base.y.data(), 5, 3);
            for (std::size_t i = 0; i < expected.size(); ++i) {
                const double rel =
                    std::abs(out.y.data()[i] - expected[i]) / (std::abs(expected[i]) + 1e-12);
                CHECK(rel < 1e-6);
            }
        }
    }
    SUBCASE("permutations of the particles") {
        PermutationElement sigma;
        sigma.sigma = {3, 0, 4, 1, 2};
        const auto out = model.forward_sample(act_sample(GroupElement{sigma}, Sample{pc}));
        const auto expected =
            apply_output_rep(OutputRep::Positions, GroupElement{sigma}, base.y.data(), 5, 3);
        for (std::size_t i = 0; i < expected.size(); ++i)
            CHECK(std::abs(out.y.data()[i] - expected[i]) < 1e-8);
    }
}

TEST_CASE("image pipeline: full canonicalization gives bit-equal logits at 90 degrees") {
    ImageClassifierPipeline model(small_image_spec(CanonKind::Learned, false), 35);
    Rng rng(205);
    NoGradGuard no_grad;
    for (int sample = 0; sample < 5; ++sample) {
        const Image img = glyph_like(12, rng);
        const auto base = model.forward_sample(Sample{img});
        if (!base.unique_argmax) continue;
        for (int k = 0; k < 4; ++k) {
            const auto out =
                model.forward_sample(Sample{act_image(PlanarDiscrete{4, k, false}, img)});
            REQUIRE(out.unique_argmax);
            CHECK(out.y.data() == base.y.data());
        }
    }
}

TEST_CASE("image pipeline: partial route is exact under shifts and quarter turns") {
    ImageClassifierPipeline model(small_image_spec(CanonKind::Learned, true), 36);
    Rng rng(206);
    NoGradGuard no_grad;
    const Image img = glyph_like(12, rng);
    const auto base = model.forward_sample(Sample{img});
    REQUIRE(base.unique_argmax);

    SUBCASE("quarter turns give identical logits") {
        for (int k = 1; k < 4; ++k) {
            const auto out =
                model.forward_sample(Sample{act_image(PlanarDiscrete{4, k, false}, img)});
            CHECK(out.y.data() == base.y.data());
        }
    }
    SUBCASE("circular shifts give identical logits") {
        for (long s : {1L, 4L, 9L}) {
            const auto out = model.forward_sample(Sample{circular_shift(img, s, 2 * s)});
            for (std::size_t i = 0; i < base.y.size(); ++i)
                CHECK(std::abs(out.y.data()[i] - base.y.data()[i]) < 1e-10);
        }
    }
    SUBCASE("composite shift then rotation gives identical logits") {
        const Image moved =
            act_image(PlanarDiscrete{4, 3, false}, circular_shift(img, 2, 5));
        const auto out = model.forward_sample(Sample{moved});
        for (std::size_t i = 0; i < base.y.size(); ++i)
            CHECK(std::abs(out.y.data()[i] - base.y.data()[i]) < 1e-10);
    }
}

TEST_CASE("audit: frozen random canonicalizer still passes") {
    PointCloudClassifierPipeline model(small_classifier_spec(CanonKind::Learned), 37);
    Rng rng(207);
    std::vector<Sample> dataset;
    for (int i = 0; i < 10; ++i) dataset.push_back(Sample{random_cloud(8, rng)});
    AuditOptions opts;
    opts.n_transforms = 5;
    Rng audit_rng(208);
    const EquivarianceReport report =
        audit_equivariance(model, GroupSpec{GroupKind::Od, 3}, dataset, opts, audit_rng);
    CHECK(report.max_rel_dev < 1e-6);
    CHECK(report.rows.size() == 50);
    CHECK(report.symmetric_detection_supported == false);  // continuous group
}

TEST_CASE("audit: identity-only transforms give zero deviation") {
    ImageClassifierPipeline model(small_image_spec(CanonKind::None, false), 38);
    Rng rng(209);
    std::vector<Sample> dataset{Sample{glyph_like(12, rng)}};
    AuditOptions opts;
    opts.exhaustive_discrete = true;
    Rng audit_rng(210);
    // C1: the only element is the identity
    const EquivarianceReport report =
        audit_equivariance(model, GroupSpec{GroupKind::Cn, 1}, dataset, opts, audit_rng);
    CHECK(report.max_abs_dev == 0.0);
}

TEST_CASE("audit: a plain predictor fails the rotation audit") {
    PointCloudClassifierPipeline model(small_classifier_spec(CanonKind::None), 39);
    Rng rng(211);
    std::vector<Sample> dataset;
    for (int i = 0; i < 5; ++i) dataset.push_back(Sample{random_cloud(8, rng)});
    AuditOptions opts;
    opts.n_transforms = 4;
    Rng audit_rng(212);
    const EquivarianceReport report =
        audit_equivariance(model, GroupSpec{GroupKind::Od, 3}, dataset, opts, audit_rng);
    CHECK(report.max_rel_dev > 1e-3);  // no equivariance without canonicalization
}

TEST_CASE("audit: symmetric images are flagged and checked under the relaxed criterion") {
    ImageClassifierPipeline model(small_image_spec(CanonKind::Learned, false), 40);
    Image flat;
    flat.channels = 1;
    flat.height = 12;
    flat.width = 12;
    flat.data.assign(144, 0.5);
    std::vector<Sample> dataset{Sample{flat}};
    AuditOptions opts;
    opts.exhaustive_discrete = true;
    Rng audit_rng(213);
    const EquivarianceReport report =
        audit_equivariance(model, GroupSpec{GroupKind::Cn, 4}, dataset, opts, audit_rng);
    CHECK(report.symmetric_inputs_flagged == 4);
    CHECK(report.relaxed_failures == 0);
}

TEST_CASE("report csv has the frozen schema and is deterministic") {
    PointCloudClassifierPipeline model(small_classifier_spec(CanonKind::Learned), 41);
    Rng rng(214);
    std::vector<Sample> dataset{Sample{random_cloud(5, rng)}};
    AuditOptions opts;
    opts.n_transforms = 2;
    auto run = [&](const std::string& path) {
        Rng audit_rng(215);
        const EquivarianceReport report =
            audit_equivariance(model, GroupSpec{GroupKind::SOd, 3}, dataset, opts, audit_rng);
        write_report_csv(path, report);
        std::ifstream is(path);
        std::stringstream ss;
        ss << is.rdbuf();
        return ss.str();
    };
    const auto tmp = std::filesystem::temp_directory_path();
    const std::string a = run((tmp / "audit_a.csv").string());
    const std::string b = run((tmp / "audit_b.csv").string());
    CHECK(a == b);
    CHECK(a.rfind("sample_id,transform_id,group_desc,abs_dev,rel_dev,symmetric_flag\n", 0) == 0);
    std::filesystem::remove(tmp / "audit_a.csv");
    std::filesystem::remove(tmp / "audit_b.csv");
}
