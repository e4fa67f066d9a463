#include <doctest.h>

#include <cmath>

#include "canon/layers.hpp"
#include "canon/pipeline.hpp"

using namespace canon;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = scale * rng.gaussian();
    return Tensor::from_data(std::move(shape), std::move(data));
}

/// Rotates every vector (last axis) of a [C, N, d] feature block by O.
Tensor rotate_features(const Tensor& v, const Eigen::MatrixXd& o) {
    const std::size_t c = v.shape()[0], n = v.shape()[1], d = v.shape()[2];
    std::vector<double> out(v.size());
    for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t nn = 0; nn < n; ++nn) {
            Eigen::VectorXd x(d);
            for (std::size_t j = 0; j < d; ++j) x(j) = v.data()[(cc * n + nn) * d + j];
            Eigen::VectorXd y = o * x;
            for (std::size_t j = 0; j < d; ++j) out[(cc * n + nn) * d + j] = y(j);
        }
    return Tensor::from_data(v.shape(), std::move(out));
}

double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Image smooth_image(std::size_t hw, double phase = 0.0) {
    Image img;
    img.channels = 1;
    img.height = hw;
    img.width = hw;
    img.data.resize(hw * hw);
    const double c = (static_cast<double>(hw) - 1.0) / 2.0;
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
            const double x = (static_cast<double>(j) - c) / c, y = (c - static_cast<double>(i)) / c;
            img.data[i * hw + j] = 0.4 + 0.3 * std::exp(-4.0 * ((x - 0.3) * (x - 0.3) +
                                                                (y - 0.1 - phase) * (y - 0.1)));
        }
    return img;
}

}  // namespace

TEST_CASE("vn_linear basics") {
    Rng rng(5);
    SUBCASE("identity weights leave features unchanged") {
        Tensor v = random_tensor({3, 4, 3}, rng);
        Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        CHECK(vn_linear(eye, v).data() == v.data());
    }
    SUBCASE("two channels summed") {
        Tensor v = Tensor::from_data({2, 1, 3}, {1, 0, 0, 0, 1, 0});
        Tensor w = Tensor::from_data({1, 2}, {1, 1});
        CHECK(vn_linear(w, v).data() == std::vector<double>{1, 1, 0});
    }
    SUBCASE("commutes with rotations to machine precision") {
        Tensor v = random_tensor({4, 6, 3}, rng);
        Tensor w = random_tensor({2, 4}, rng);
        for (int trial = 0; trial < 20; ++trial) {
            Eigen::MatrixXd o = random_orthogonal(3, rng, false);
            Tensor lhs = vn_linear(w, rotate_features(v, o));
            Tensor rhs = rotate_features(vn_linear(w, v), o);
            CHECK(max_abs(lhs.data(), rhs.data()) < 1e-12);
        }
    }
}

TEST_CASE("vn_project behavior") {
    auto counter = std::make_shared<std::size_t>(0);
    SUBCASE("vectors aligned with the direction pass through") {
        Tensor v = Tensor::from_data({1, 1, 3}, {1, 2, 3});
        Tensor q = Tensor::from_data({1, 1, 3}, {2, 4, 6});
        CHECK(vn_project(v, q, counter).data() == v.data());
    }
    SUBCASE("opposite vectors project to zero") {
        Tensor v = Tensor::from_data({1, 1, 3}, {1, -2, 0.5});
        Tensor q = Tensor::from_data({1, 1, 3}, {-1, 2, -0.5});
        for (double x : vn_project(v, q, counter).data())
            CHECK(std::abs(x) < 1e-15);
    }
    SUBCASE("degenerate directions pass through and count") {
        Tensor v = Tensor::from_data({1, 1, 3}, {1, 2, 3});
        Tensor q = Tensor::from_data({1, 1, 3}, {0, 0, 0});
        CHECK(vn_project(v, q, counter).data() == v.data());
        CHECK(*counter == 1);
    }
    SUBCASE("equivariance under 100 random rotations") {
        Rng rng(6);
        Tensor v = random_tensor({3, 5, 3}, rng);
        Tensor q = random_tensor({3, 5, 3}, rng);
        for (int trial = 0; trial < 100; ++trial) {
            Eigen::MatrixXd o = random_orthogonal(3, rng, false);
            Tensor lhs = vn_project(rotate_features(v, o), rotate_features(q, o), counter);
            Tensor rhs = rotate_features(vn_project(v, q, counter), o);
            CHECK(max_abs(lhs.data(), rhs.data()) < 1e-10);
        }
    }
    SUBCASE("gradient matches finite differences away from the branch kink") {
        Rng rng(7);
        Tensor q = random_tensor({2, 3, 3}, rng);
        auto fn = [&](const Tensor& v) {
            auto c = std::make_shared<std::size_t>(0);
            return sum_all(vn_project(v, q, c));
        };
        FiniteDiffReport r = finite_diff_check(fn, random_tensor({2, 3, 3}, rng), 1e-6);
        CHECK(r.max_rel_err < 1e-4);
        auto fn_q = [&](const Tensor& qq) {
            auto c = std::make_shared<std::size_t>(0);
            Tensor v = Tensor::from_data({2, 3, 3},
                                         std::vector<double>{0.3, -1, 2, 0.5, 0.7, -0.2, 1.1, 0.4,
                                                             -0.9, 0.2, -0.6, 1.4, -1.2, 0.8, 0.3,
                                                             0.9, -0.4, 0.6});
            return sum_all(vn_project(v, qq, c));
        };
        FiniteDiffReport rq = finite_diff_check(fn_q, random_tensor({2, 3, 3}, rng), 1e-6);
        CHECK(rq.max_rel_err < 1e-4);
    }
}

TEST_CASE("vn deep sets") {
    ParameterStore ps;
    Rng rng(8);
    VnDeepSetsSpec spec;
    spec.in_channels = 2;
    spec.hidden = 8;
    spec.out_vectors = 3;
    VnDeepSets net(ps, "vn", spec, rng);

    Tensor v = random_tensor({2, 10, 3}, rng);

    SUBCASE("permuting points leaves the pooled output bit-identical") {
        std::vector<std::size_t> perm = {7, 2, 9, 0, 4, 1, 8, 3, 6, 5};
        std::vector<double> permuted(v.size());
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t n = 0; n < 10; ++n)
                for (std::size_t j = 0; j < 3; ++j)
                    permuted[(c * 10 + n) * 3 + j] = v.data()[(c * 10 + perm[n]) * 3 + j];
        Tensor vp = Tensor::from_data(v.shape(), std::move(permuted));
        CHECK(net.forward(v).data() == net.forward(vp).data());
    }
    SUBCASE("rotation equivariance within 1e-10") {
        for (int trial = 0; trial < 50; ++trial) {
            Eigen::MatrixXd o = random_orthogonal(3, rng, false);
            Tensor lhs = net.forward(rotate_features(v, o));
            Tensor rhs = rotate_features(reshape(net.forward(v), {3, 1, 3}), o);
            CHECK(max_abs(lhs.data(), rhs.data()) < 1e-10);
        }
    }
    SUBCASE("zero features map to zero vectors") {
        Tensor zeros = Tensor::zeros({2, 1, 3});
        Tensor out = net.forward(zeros);
        for (double x : out.data()) CHECK(x == 0.0);
    }
}

TEST_CASE("lifting correlation") {
    GroupSpec c4{GroupKind::Cn, 4};
    Rng rng(9);

    SUBCASE("filter equal to the image peaks at the identity fiber") {
        Image img = smooth_image(8);
        // make the image clearly asymmetric
        img.data[9] += 2.0;
        Tensor it = tensor_from_image(img);
        Tensor w = reshape(it, {1, 1, 8, 8});
        Tensor f = lifting_fibers(it, w, c4);
        std::size_t best = 0;
        for (std::size_t m = 1; m < 4; ++m)
            if (f.data()[m] > f.data()[best]) best = m;
        CHECK(best == 0);
    }
    SUBCASE("rotating the image cyclically shifts the fiber bit-exactly") {
        Image img = smooth_image(8);
        img.data[13] += 1.5;
        Tensor w = random_tensor({2, 1, 8, 8}, rng);
        Tensor base = lifting_fibers(tensor_from_image(img), w, c4);
        for (int l = 0; l < 4; ++l) {
            Tensor rotated =
                lifting_fibers(tensor_from_image(act_image(PlanarDiscrete{4, l, false}, img)), w,
                               c4);
            for (std::size_t o = 0; o < 2; ++o)
                for (int m = 0; m < 4; ++m) {
                    const int src = ((m - l) % 4 + 4) % 4;  // F'(m) = F(l^{-1} m)
                    CHECK(rotated.data()[o * 4 + static_cast<std::size_t>(m)] ==
                          base.data()[o * 4 + static_cast<std::size_t>(src)]);
                }
        }
    }
    SUBCASE("zero image gives zero fibers") {
        Tensor z = Tensor::zeros({1, 8, 8});
        Tensor w = random_tensor({2, 1, 8, 8}, rng);
        Tensor f = lifting_fibers(z, w, c4);
        for (double x : f.data()) CHECK(x == 0.0);
    }
    SUBCASE("gradients pass finite differences") {
        Image img = smooth_image(6);
        Tensor it = tensor_from_image(img);
        auto fn_w = [&](const Tensor& w) {
            return sum_all(mul(lifting_fibers(it, w, c4),
                               Tensor::from_data({2, 4}, {1, -1, 2, 0.5, 0.3, 1.1, -0.7, 0.2})));
        };
        FiniteDiffReport r = finite_diff_check(fn_w, random_tensor({2, 1, 6, 6}, rng), 1e-6);
        CHECK(r.max_rel_err < 1e-4);
    }
}

TEST_CASE("1x1 group convolution") {
    GroupSpec c4{GroupKind::Cn, 4};
    Rng rng(10);
    SUBCASE("weights concentrated at the identity only mix channels") {
        Tensor f = random_tensor({2, 4}, rng);
        std::vector<double> wd(3 * 2 * 4, 0.0);
        // w[c', c, delta]: delta = 0 picks the untranslated fiber
        wd[(0 * 2 + 0) * 4 + 0] = 1.0;
        wd[(1 * 2 + 1) * 4 + 0] = 1.0;
        wd[(2 * 2 + 0) * 4 + 0] = 0.5;
        wd[(2 * 2 + 1) * 4 + 0] = 0.5;
        Tensor w = Tensor::from_data({3, 2, 4}, wd);
        Tensor out = group_conv1x1(f, w, c4);
        for (std::size_t m = 0; m < 4; ++m) {
            CHECK(out.data()[0 * 4 + m] == f.data()[0 * 4 + m]);
            CHECK(out.data()[1 * 4 + m] == f.data()[1 * 4 + m]);
            CHECK(out.data()[2 * 4 + m] ==
                  doctest::Approx(0.5 * f.data()[0 * 4 + m] + 0.5 * f.data()[1 * 4 + m]));
        }
    }
    SUBCASE("fiber shifts commute with the convolution bit-exactly") {
        Tensor f = random_tensor({3, 4}, rng);
        Tensor w = random_tensor({2, 3, 4}, rng);
        Tensor base = group_conv1x1(f, w, c4);
        for (int l = 0; l < 4; ++l) {
            // left translation of the input fiber: F'(m) = F(l^{-1} m)
            std::vector<double> shifted(f.size());
            for (std::size_t c = 0; c < 3; ++c)
                for (int m = 0; m < 4; ++m)
                    shifted[c * 4 + static_cast<std::size_t>(m)] =
                        f.data()[c * 4 + static_cast<std::size_t>(((m - l) % 4 + 4) % 4)];
            Tensor out = group_conv1x1(Tensor::from_data({3, 4}, shifted), w, c4);
            for (std::size_t c = 0; c < 2; ++c)
                for (int m = 0; m < 4; ++m)
                    CHECK(out.data()[c * 4 + static_cast<std::size_t>(m)] ==
                          base.data()[c * 4 + static_cast<std::size_t>(((m - l) % 4 + 4) % 4)]);
        }
    }
    SUBCASE("the one-element group reduces to a plain channel mix") {
        GroupSpec c1{GroupKind::Cn, 1};
        Tensor f = random_tensor({3, 1}, rng);
        Tensor w = random_tensor({2, 3, 1}, rng);
        Tensor out = group_conv1x1(f, w, c1);
        for (std::size_t o = 0; o < 2; ++o) {
            double expect = 0.0;
            for (std::size_t c = 0; c < 3; ++c)
                expect += w.data()[(o * 3 + c) * 1] * f.data()[c];
            CHECK(out.data()[o] == doctest::Approx(expect).epsilon(1e-15));
        }
    }
    SUBCASE("gradients pass finite differences") {
        Tensor f0 = random_tensor({2, 4}, rng);
        Tensor upw = random_tensor({2, 4}, rng);
        auto fn = [&](const Tensor& w) {
            return sum_all(mul(group_conv1x1(f0, w, c4), upw));
        };
        FiniteDiffReport r = finite_diff_check(fn, random_tensor({2, 2, 4}, rng), 1e-6);
        CHECK(r.max_rel_err < 1e-4);
    }
}

TEST_CASE("spatially extended lifting is shift-invariant after pooling") {
    GroupSpec c4{GroupKind::Cn, 4};
    Rng rng(11);
    Image img = smooth_image(10);
    img.data[31] += 1.0;
    Tensor w = random_tensor({2, 1, 10, 10}, rng);

    Tensor base = fiber_logits(relu(lifting_fibers_spatial(tensor_from_image(img), w, c4)));

    SUBCASE("circular shifts leave fiber logits bit-identical") {
        for (long shift : {1L, 3L, 7L}) {
            Image shifted = circular_shift(img, shift, 2 * shift);
            Tensor logits =
                fiber_logits(relu(lifting_fibers_spatial(tensor_from_image(shifted), w, c4)));
            CHECK(logits.data() == base.data());
        }
    }
    SUBCASE("quarter turns shift fiber logits bit-exactly") {
        for (int l = 0; l < 4; ++l) {
            Image rotated = act_image(PlanarDiscrete{4, l, false}, img);
            Tensor logits =
                fiber_logits(relu(lifting_fibers_spatial(tensor_from_image(rotated), w, c4)));
            for (int m = 0; m < 4; ++m)
                CHECK(logits.data()[static_cast<std::size_t>(m)] ==
                      base.data()[static_cast<std::size_t>(((m - l) % 4 + 4) % 4)]);
        }
    }
}

TEST_CASE("conv2d") {
    Rng rng(12);
    SUBCASE("finite differences on weights, bias and input") {
        Tensor x = random_tensor({2, 2, 5, 5}, rng);
        Tensor w = random_tensor({3, 2, 3, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        auto fn_w = [&](const Tensor& wt) { return mean_all(conv2d(x, wt, b, 1, PadMode::Zero)); };
        CHECK(finite_diff_check(fn_w, w, 1e-6).max_rel_err < 1e-4);
        auto fn_x = [&](const Tensor& xt) { return mean_all(conv2d(xt, w, b, 2, PadMode::Zero)); };
        CHECK(finite_diff_check(fn_x, x, 1e-6).max_rel_err < 1e-4);
        auto fn_b = [&](const Tensor& bt) {
            return mean_all(conv2d(x, w, bt, 1, PadMode::Circular));
        };
        CHECK(finite_diff_check(fn_b, b, 1e-6).max_rel_err < 1e-4);
    }
    SUBCASE("circular padding makes stride-1 conv shift-equivariant bit-exactly") {
        Tensor x = random_tensor({1, 1, 6, 6}, rng);
        Tensor w = random_tensor({2, 1, 3, 3}, rng);
        Tensor b = random_tensor({2}, rng);
        Tensor base = conv2d(x, w, b, 1, PadMode::Circular);
        const long di = 2, dj = 5;
        std::vector<double> shifted(x.size());
        for (long i = 0; i < 6; ++i)
            for (long j = 0; j < 6; ++j)
                shifted[static_cast<std::size_t>(i * 6 + j)] =
                    x.data()[static_cast<std::size_t>((((i - di) % 6 + 6) % 6) * 6 +
                                                      (((j - dj) % 6 + 6) % 6))];
        Tensor out = conv2d(Tensor::from_data({1, 1, 6, 6}, shifted), w, b, 1, PadMode::Circular);
        for (std::size_t c = 0; c < 2; ++c)
            for (long i = 0; i < 6; ++i)
                for (long j = 0; j < 6; ++j)
                    CHECK(out.data()[c * 36 + static_cast<std::size_t>(i * 6 + j)] ==
                          base.data()[c * 36 +
                                      static_cast<std::size_t>((((i - di) % 6 + 6) % 6) * 6 +
                                                               (((j - dj) % 6 + 6) % 6))]);
    }
}

TEST_CASE("channel standardization") {
    Rng rng(13);
    Tensor x = random_tensor({2, 3, 4, 4}, rng, 2.0);
    SUBCASE("zero mean, near-unit variance per sample and channel") {
        Tensor y = standardize_channels(x);
        for (std::size_t g = 0; g < 6; ++g) {
            double mu = 0.0;
            for (std::size_t i = 0; i < 16; ++i) mu += y.data()[g * 16 + i];
            CHECK(std::abs(mu / 16.0) < 1e-12);
        }
    }
    SUBCASE("finite differences") {
        Tensor up = random_tensor({1, 2, 3, 3}, rng);
        auto fn = [&](const Tensor& t) {
            return sum_all(mul(standardize_channels(t), up));
        };
        CHECK(finite_diff_check(fn, random_tensor({1, 2, 3, 3}, rng), 1e-6).max_rel_err < 1e-4);
    }
}

TEST_CASE("mlp with zero weights outputs the bias") {
    ParameterStore ps;
    Rng rng(14);
    Mlp mlp(ps, "mlp", {3, 4}, rng);
    for (auto& [name, t] : ps.items())
        if (name == "mlp.0.w") std::fill(t.raw_data().begin(), t.raw_data().end(), 0.0);
    Tensor x = random_tensor({2, 3}, rng);
    Tensor y = mlp.forward(x);
    const auto& bias = ps.at("mlp.0.b").data();
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < 4; ++j) CHECK(y.data()[r * 4 + j] == bias[j]);
}

TEST_CASE("cnn shape contract follows the stride plan") {
    // shape-propagation oracle: hw' = (hw + 2*floor(k/2) - k)/stride + 1
    auto out_hw = [](std::size_t hw, const std::vector<std::size_t>& strides, std::size_t k) {
        for (std::size_t s : strides) hw = (hw + 2 * ((k - 1) / 2) - k) / s + 1;
        return hw;
    };
    CHECK(out_hw(28, {1, 1, 1, 2, 1, 1, 2}, 3) == 7);

    ParameterStore ps;
    Rng rng(15);
    CnnSpec spec;
    spec.in_channels = 1;
    spec.image_hw = 28;
    spec.channels = {4, 4, 4, 8, 8, 8, 16};
    spec.strides = {1, 1, 1, 2, 1, 1, 2};
    spec.n_out = 10;
    Cnn cnn(ps, "cnn", spec, rng);
    Rng drng(16);
    Tensor x = random_tensor({2, 1, 28, 28}, drng);
    Tensor y = cnn.forward(x);
    CHECK(y.shape() == Shape{2, 10});
}

TEST_CASE("gnn on a single node reduces to node updates without messages") {
    ParameterStore ps;
    Rng rng(17);
    GnnSpec spec;
    spec.node_features = 4;
    spec.edge_features = 2;
    spec.hidden = 6;
    spec.layers = 2;
    spec.n_out = 3;
    Gnn gnn(ps, "gnn", spec, rng);
    Tensor nodes = random_tensor({1, 4}, rng);
    Tensor out = gnn.forward(nodes, {}, {}, Tensor::zeros({0, 2}));
    CHECK(out.shape() == Shape{1, 3});

    // replicate by hand: embed -> per-layer node update with zero aggregate
    Tensor h = gnn.embed.forward(nodes);
    for (std::size_t l = 0; l < 2; ++l) {
        Tensor agg = Tensor::zeros({1, 6});
        h = add(h, gnn.node_mlps[l].forward(concat({h, agg}, 1)));
    }
    Tensor expect = gnn.decode.forward(h);
    CHECK(out.data() == expect.data());
}

TEST_CASE("gnn gradients pass finite differences") {
    ParameterStore ps;
    Rng rng(18);
    GnnSpec spec;
    spec.node_features = 4;
    spec.edge_features = 2;
    spec.hidden = 5;
    spec.layers = 2;
    spec.n_out = 2;
    Gnn gnn(ps, "gnn", spec, rng);
    const std::vector<std::size_t> src = {0, 1, 2, 2};
    const std::vector<std::size_t> dst = {1, 0, 0, 1};
    Tensor edge_feat = random_tensor({4, 2}, rng);
    Tensor nodes = random_tensor({3, 4}, rng);
    auto loss = [&] { return mean_all(gnn.forward(nodes, src, dst, edge_feat)); };
    ps.zero_grads();
    backward(loss(), ps);
    // manual central differences on a few coordinates of one edge-MLP weight
    Tensor w = ps.at("gnn.edge0.0.w");
    NoGradGuard no_grad;
    const double h = 1e-6;
    for (std::size_t ci : {0ul, 3ul, 11ul, w.size() - 1}) {
        const double saved = w.raw_data()[ci];
        w.raw_data()[ci] = saved + h;
        const double fp = loss().item();
        w.raw_data()[ci] = saved - h;
        const double fm = loss().item();
        w.raw_data()[ci] = saved;
        const double central = (fp - fm) / (2.0 * h);
        const double rel = std::abs(w.grad()[ci] - central) / (std::abs(central) + 1e-8);
        CHECK(rel < 1e-4);
    }
}

TEST_CASE("act_image_op matches the plain action and is differentiable") {
    Rng rng(19);
    Image img = smooth_image(9);
    Tensor it = tensor_from_image(img);
    for (int k = 0; k < 8; ++k) {
        const PlanarDiscrete g{8, k, false};
        Tensor out = act_image_op(it, g);
        CHECK(out.data() == act_image(g, img).data);
    }
    auto fn = [&](const Tensor& t) {
        return sum_all(act_image_op(t, PlanarDiscrete{8, 3, false}));
    };
    CHECK(finite_diff_check(fn, random_tensor({1, 7, 7}, rng), 1e-6).max_rel_err < 1e-4);
}
