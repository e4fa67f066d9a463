#include <doctest.h>

#include <cmath>

#include "canon/groups.hpp"

using namespace canon;

namespace {

/// Homogeneous-matrix oracle for E(d) composition and inversion.
Eigen::MatrixXd homogeneous(const EuclideanElement& e) {
    const auto d = e.O.rows();
    Eigen::MatrixXd h = Eigen::MatrixXd::Identity(d + 1, d + 1);
    h.topLeftCorner(d, d) = e.O;
    h.topRightCorner(d, 1) = e.t;
    return h;
}

EuclideanElement rot2d(double angle, double tx, double ty) {
    EuclideanElement e;
    e.O = Eigen::Matrix2d();
    e.O << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    e.t = Eigen::Vector2d(tx, ty);
    return e;
}

Image index_image_2x2(double a, double b, double c, double d) {
    Image img;
    img.channels = 1;
    img.height = 2;
    img.width = 2;
    img.data = {a, b, c, d};
    return img;
}

/// Smooth test image supported well inside the inscribed circle, so rotated
/// content never clips at the corners.
Image smooth_image(std::size_t hw) {
    Image img;
    img.channels = 1;
    img.height = hw;
    img.width = hw;
    img.data.resize(hw * hw);
    const double c = (static_cast<double>(hw) - 1.0) / 2.0;
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
            const double x = (static_cast<double>(j) - c) / c, y = (c - static_cast<double>(i)) / c;
            img.data[i * hw + j] = 0.8 * std::exp(-8.0 * ((x - 0.15) * (x - 0.15) + y * y)) +
                                   0.5 * std::exp(-10.0 * (x * x + (y - 0.25) * (y - 0.25)));
        }
    return img;
}

}  // namespace

TEST_CASE("euclidean composition matches the homogeneous-matrix oracle") {
    const EuclideanElement g1 = rot2d(M_PI / 2.0, 1.0, 0.0);
    const EuclideanElement g2 = rot2d(0.0, 0.0, 1.0);
    const auto composed = std::get<EuclideanElement>(compose(GroupElement{g1}, GroupElement{g2}));
    const Eigen::MatrixXd expected = homogeneous(g1) * homogeneous(g2);
    CHECK((homogeneous(composed) - expected).cwiseAbs().maxCoeff() < 1e-15);
    // R90 with t1=(1,0) composed with pure translation (0,1) cancels
    CHECK(composed.t.cwiseAbs().maxCoeff() < 1e-15);

    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        GroupSpec spec{GroupKind::Ed, 3};
        const auto a = std::get<EuclideanElement>(random_element(spec, rng));
        const auto b = std::get<EuclideanElement>(random_element(spec, rng));
        const auto ab = std::get<EuclideanElement>(compose(GroupElement{a}, GroupElement{b}));
        CHECK((homogeneous(ab) - homogeneous(a) * homogeneous(b)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("planar composition is modular addition") {
    const PlanarDiscrete a{4, 3, false}, b{4, 2, false};
    const auto c = std::get<PlanarDiscrete>(compose(GroupElement{a}, GroupElement{b}));
    CHECK(c.k == 1);
    CHECK(!c.r);
}

TEST_CASE("composition with the identity is the identity map") {
    Rng rng(17);
    for (const char* text : {"c8", "d4", "so3", "e3", "s5"}) {
        const GroupSpec spec = parse_group_spec(text);
        for (int trial = 0; trial < 100; ++trial) {
            const GroupElement g = random_element(spec, rng);
            const GroupElement gi = compose(g, identity_like(g));
            if (const auto* p = std::get_if<PlanarDiscrete>(&g)) {
                const auto& q = std::get<PlanarDiscrete>(gi);
                CHECK(p->k == q.k);
                CHECK(p->r == q.r);
            } else if (const auto* e = std::get_if<EuclideanElement>(&g)) {
                const auto& q = std::get<EuclideanElement>(gi);
                CHECK((e->O - q.O).cwiseAbs().maxCoeff() < 1e-15);
                CHECK((e->t - q.t).cwiseAbs().maxCoeff() < 1e-15);
            } else {
                CHECK(std::get<PermutationElement>(g).sigma ==
                      std::get<PermutationElement>(gi).sigma);
            }
        }
    }
}

TEST_CASE("inverse matches the homogeneous oracle and planar negation") {
    const auto id = identity_element(parse_group_spec("c6"));
    const auto idi = inverse(id);
    CHECK(std::get<PlanarDiscrete>(idi).k == 0);

    CHECK(std::get<PlanarDiscrete>(inverse(GroupElement{PlanarDiscrete{8, 3, false}})).k == 5);

    Rng rng(23);
    GroupSpec spec{GroupKind::Ed, 3};
    for (int trial = 0; trial < 50; ++trial) {
        const auto g = std::get<EuclideanElement>(random_element(spec, rng));
        const auto gi = std::get<EuclideanElement>(inverse(GroupElement{g}));
        CHECK((homogeneous(gi) - homogeneous(g).inverse()).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("compose(g, inverse(g)) is the identity within 1e-12") {
    Rng rng(31);
    for (const char* text : {"c12", "d8", "o3", "se3", "s6"}) {
        const GroupSpec spec = parse_group_spec(text);
        for (int trial = 0; trial < 1000; ++trial) {
            const GroupElement g = random_element(spec, rng);
            const GroupElement e = compose(g, inverse(g));
            if (const auto* p = std::get_if<PlanarDiscrete>(&e)) {
                CHECK(p->k == 0);
                CHECK(!p->r);
            } else if (const auto* eu = std::get_if<EuclideanElement>(&e)) {
                CHECK((eu->O - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
                CHECK(eu->t.cwiseAbs().maxCoeff() < 1e-12);
            } else {
                const auto& s = std::get<PermutationElement>(e).sigma;
                for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == i);
            }
        }
    }
}

TEST_CASE("point-cloud action basics") {
    PointCloud pc;
    pc.X = Eigen::MatrixXd(1, 3);
    pc.X << 1, 0, 0;
    pc.V = Eigen::MatrixXd(1, 3);
    pc.V << 0.5, -0.25, 2;
    pc.has_velocities = true;

    SUBCASE("identity leaves the cloud unchanged") {
        const auto out = act_pointcloud(identity_element(GroupSpec{GroupKind::Ed, 3}), pc);
        CHECK((out.X - pc.X).cwiseAbs().maxCoeff() == 0.0);
        CHECK((out.V - pc.V).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("90-degree z-rotation maps x-axis to y-axis") {
        EuclideanElement g;
        g.O = Eigen::Matrix3d();
        g.O << 0, -1, 0, 1, 0, 0, 0, 0, 1;
        g.t = Eigen::Vector3d::Zero();
        const auto out = act_pointcloud(GroupElement{g}, pc);
        CHECK(out.X(0, 0) == doctest::Approx(0.0));
        CHECK(out.X(0, 1) == doctest::Approx(1.0));
        CHECK(out.X(0, 2) == doctest::Approx(0.0));
    }
    SUBCASE("translations move positions but not velocities") {
        EuclideanElement g;
        g.O = Eigen::Matrix3d::Identity();
        g.t = Eigen::Vector3d(3, -1, 2);
        const auto out = act_pointcloud(GroupElement{g}, pc);
        CHECK(out.X(0, 0) == doctest::Approx(4.0));
        CHECK((out.V - pc.V).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("image action: 90-degree rotation permutes pixels exactly") {
    const Image img = index_image_2x2(1, 2, 3, 4);  // [[a,b],[c,d]]
    const Image rot = act_image(PlanarDiscrete{4, 1, false}, img);
    CHECK(rot.data == std::vector<double>{2, 4, 1, 3});  // [[b,d],[a,c]]

    const Image same = act_image(PlanarDiscrete{4, 0, false}, img);
    CHECK(same.data == img.data);
}

TEST_CASE("image action: rotate by k then n-k restores the image exactly") {
    const Image img = smooth_image(12);
    for (int k = 0; k < 4; ++k) {
        const Image once = act_image(PlanarDiscrete{4, k, false}, img);
        const Image back = act_image(PlanarDiscrete{4, (4 - k) % 4, false}, once);
        CHECK(back.data == img.data);
    }
}

TEST_CASE("action homomorphism") {
    Rng rng(41);
    SUBCASE("exact for permutations") {
        GroupSpec spec{GroupKind::Sn, 6};
        PointCloud pc;
        pc.X = Eigen::MatrixXd::Random(6, 3);
        for (int trial = 0; trial < 20; ++trial) {
            const GroupElement g1 = random_element(spec, rng);
            const GroupElement g2 = random_element(spec, rng);
            const Sample lhs = act_sample(compose(g1, g2), Sample{pc});
            const Sample rhs = act_sample(g1, act_sample(g2, Sample{pc}));
            CHECK(max_abs_diff(lhs, rhs) == 0.0);
        }
    }
    SUBCASE("exact for images at 90-degree multiples") {
        GroupSpec spec{GroupKind::Dn, 4};
        const Sample img{smooth_image(8)};
        for (const auto& g1 : enumerate_elements(spec))
            for (const auto& g2 : enumerate_elements(spec)) {
                const Sample lhs = act_sample(compose(g1, g2), img);
                const Sample rhs = act_sample(g1, act_sample(g2, img));
                CHECK(max_abs_diff(lhs, rhs) == 0.0);
            }
    }
    SUBCASE("within 1e-10 for euclidean point clouds") {
        GroupSpec spec{GroupKind::Ed, 3};
        PointCloud pc;
        pc.X = Eigen::MatrixXd::Random(10, 3);
        for (int trial = 0; trial < 100; ++trial) {
            const GroupElement g1 = random_element(spec, rng);
            const GroupElement g2 = random_element(spec, rng);
            const Sample lhs = act_sample(compose(g1, g2), Sample{pc});
            const Sample rhs = act_sample(g1, act_sample(g2, Sample{pc}));
            CHECK(max_abs_diff(lhs, rhs) < 1e-10);
        }
    }
    SUBCASE("interpolated c8 rotations agree within 0.05 on smooth images") {
        // non-90-degree angles interpolate, so the homomorphism holds only up
        // to resampling error; this documents the gap
        GroupSpec spec{GroupKind::Cn, 8};
        const Sample img{smooth_image(28)};
        double worst = 0.0;
        for (const auto& g1 : enumerate_elements(spec))
            for (const auto& g2 : enumerate_elements(spec)) {
                const Sample lhs = act_sample(compose(g1, g2), img);
                const Sample rhs = act_sample(g1, act_sample(g2, img));
                worst = std::max(worst, max_abs_diff(lhs, rhs));
            }
        CHECK(worst < 0.05);
        CHECK(worst > 0.0);  // the gap is real
    }
}

TEST_CASE("euclidean actions preserve pairwise distances") {
    Rng rng(51);
    GroupSpec spec{GroupKind::Ed, 3};
    PointCloud pc;
    pc.X = Eigen::MatrixXd::Random(12, 3) * 2.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto out = act_pointcloud(random_element(spec, rng), pc);
        for (Eigen::Index i = 0; i < pc.X.rows(); ++i)
            for (Eigen::Index j = i + 1; j < pc.X.rows(); ++j) {
                const double before = (pc.X.row(i) - pc.X.row(j)).norm();
                const double after = (out.X.row(i) - out.X.row(j)).norm();
                CHECK(std::abs(before - after) < 1e-10);
            }
    }
}

TEST_CASE("cyclic sampling is uniform") {
    Rng rng(61);
    GroupSpec spec{GroupKind::Cn, 4};
    std::vector<std::size_t> counts(4, 0);
    for (int i = 0; i < 40000; ++i)
        ++counts[static_cast<std::size_t>(std::get<PlanarDiscrete>(random_element(spec, rng)).k)];
    for (std::size_t k = 0; k < 4; ++k) {
        const double freq = static_cast<double>(counts[k]) / 40000.0;
        CHECK(freq > 0.24);
        CHECK(freq < 0.26);
    }
}

TEST_CASE("orthogonal sampling satisfies the group constraints") {
    Rng rng(71);
    GroupSpec spec{GroupKind::SOd, 3};
    for (int i = 0; i < 200; ++i) {
        const auto g = std::get<EuclideanElement>(random_element(spec, rng));
        CHECK((g.O.transpose() * g.O - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(std::abs(g.O.determinant() - 1.0) < 1e-10);
    }
    GroupSpec ospec{GroupKind::Od, 3};
    bool saw_reflection = false;
    for (int i = 0; i < 200; ++i) {
        const auto g = std::get<EuclideanElement>(random_element(ospec, rng));
        CHECK(std::abs(std::abs(g.O.determinant()) - 1.0) < 1e-10);
        if (g.O.determinant() < 0.0) saw_reflection = true;
    }
    CHECK(saw_reflection);
}

TEST_CASE("orthogonal sampling looks rotation-invariant (first-column mean)") {
    Rng rng(81);
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    const int n = 10000;
    for (int i = 0; i < n; ++i)
        mean += std::get<EuclideanElement>(random_element(GroupSpec{GroupKind::SOd, 3}, rng))
                    .O.col(0);
    mean /= static_cast<double>(n);
    CHECK(mean.norm() < 0.02);
}

TEST_CASE("stabilizers") {
    SUBCASE("asymmetric cloud has the trivial stabilizer") {
        PointCloud pc;
        pc.X = Eigen::MatrixXd(3, 2);
        pc.X << 1.0, 0.3, -0.2, 0.9, 0.1, -1.4;
        const auto stab = stabilizer_elements(GroupSpec{GroupKind::Cn, 4}, Sample{pc}, 1e-9);
        REQUIRE(stab.size() == 1);
        CHECK(std::get<PlanarDiscrete>(stab[0]).k == 0);
    }
    SUBCASE("antipodal pair is fixed by the half turn") {
        PointCloud pc;
        pc.X = Eigen::MatrixXd(2, 2);
        pc.X << 1, 0, -1, 0;
        const auto stab = stabilizer_elements(GroupSpec{GroupKind::Cn, 4}, Sample{pc}, 1e-9);
        REQUIRE(stab.size() == 2);
        CHECK(std::get<PlanarDiscrete>(stab[1]).k == 2);
    }
    SUBCASE("constant image is fixed by the whole group") {
        Image img;
        img.channels = 1;
        img.height = 6;
        img.width = 6;
        img.data.assign(36, 0.7);
        CHECK(stabilizer_elements(GroupSpec{GroupKind::Cn, 4}, Sample{img}, 0.0).size() == 4);
    }
    SUBCASE("continuous groups are rejected") {
        PointCloud pc;
        pc.X = Eigen::MatrixXd::Random(3, 3);
        CHECK_THROWS_AS(stabilizer_elements(GroupSpec{GroupKind::SOd, 3}, Sample{pc}, 1e-9),
                        GroupError);
    }
}

TEST_CASE("group spec parsing") {
    CHECK(parse_group_spec("c4").kind == GroupKind::Cn);
    CHECK(parse_group_spec("c4").n == 4);
    CHECK(parse_group_spec("d8").kind == GroupKind::Dn);
    CHECK(parse_group_spec("so3").kind == GroupKind::SOd);
    CHECK(parse_group_spec("o3").kind == GroupKind::Od);
    CHECK(parse_group_spec("e3").kind == GroupKind::Ed);
    CHECK(parse_group_spec("se3").kind == GroupKind::SEd);
    CHECK(parse_group_spec("s5").kind == GroupKind::Sn);
    CHECK(parse_group_spec("d8").order() == 16);
    CHECK_THROWS_AS(parse_group_spec("q7"), GroupError);
    CHECK_THROWS_AS(parse_group_spec("c"), GroupError);
    CHECK_THROWS_AS(parse_group_spec("c0"), GroupError);
}

TEST_CASE("reflection convention: flip before rotation") {
    // a horizontal gradient: flip reverses columns, then rotation permutes
    Image img;
    img.channels = 1;
    img.height = 4;
    img.width = 4;
    img.data.resize(16);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) img.data[i * 4 + j] = static_cast<double>(j);
    const Image flipped = act_image(PlanarDiscrete{4, 0, true}, img);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(flipped.data[i * 4 + j] == static_cast<double>(3 - j));
    // flip-then-rotate equals composing the two actions in that order
    const Image manual =
        act_image(PlanarDiscrete{4, 1, false}, act_image(PlanarDiscrete{4, 0, true}, img));
    const Image direct = act_image(PlanarDiscrete{4, 1, true}, img);
    CHECK(manual.data == direct.data);
}
