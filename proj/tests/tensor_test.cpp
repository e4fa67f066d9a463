#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>

#include "canon/checkpoint.hpp"
#include "canon/rng.hpp"
#include "canon/tensor.hpp"

using namespace canon;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = scale * rng.gaussian();
    return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

TEST_CASE("matmul identity") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(a, eye);
    CHECK(c.data() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("softmax of equal logits is uniform") {
    Tensor s = softmax(Tensor::from_data({3}, {0, 0, 0}));
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("relu definition") {
    Tensor y = relu(Tensor::from_data({3}, {-1.0, 0.0, 2.5}));
    CHECK(y.data() == std::vector<double>{0.0, 0.0, 2.5});
}

TEST_CASE("backward of sum gives ones") {
    Tensor p = Tensor::from_data({3}, {5, -1, 2}, true);
    backward(sum_all(p));
    CHECK(p.grad() == std::vector<double>{1, 1, 1});
}

TEST_CASE("backward of sum of squares") {
    Tensor p = Tensor::from_data({2}, {1, 2}, true);
    backward(sum_all(mul(p, p)));
    CHECK(p.grad() == std::vector<double>{2, 4});
}

TEST_CASE("mean-relu-matmul gradient matches central differences") {
    Rng rng(42);
    Tensor w = random_tensor({4, 3}, rng);
    Tensor x = random_tensor({3, 2}, rng);
    auto fn = [&](const Tensor& wt) { return mean_all(relu(matmul(wt, x))); };
    FiniteDiffReport report = finite_diff_check(fn, w, 1e-6);
    CHECK(report.max_rel_err < 1e-5);
    CHECK(report.checked > 0);
}

TEST_CASE("finite differences: quadratic") {
    auto fn = [](const Tensor& t) { return mul(t, t); };
    FiniteDiffReport r = finite_diff_check(
        [&](const Tensor& t) { return sum_all(mul(t, t)); }, Tensor::from_data({}, {3.0}), 1e-6);
    (void)fn;
    CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("finite differences: softmax component matches analytic Jacobian") {
    Tensor point = Tensor::from_data({3}, {1, 2, 3});
    auto fn = [](const Tensor& t) { return reshape(gather_rows(softmax(t), {0}), Shape{}); };
    FiniteDiffReport r = finite_diff_check(fn, point, 1e-6);
    CHECK(r.max_rel_err < 1e-5);

    // analytic softmax Jacobian row 0: y0 * (delta_j0 - y_j)
    Tensor p = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor y = softmax(p);
    std::vector<double> g = grad_wrt(reshape(gather_rows(y, {0}), Shape{}), p);
    for (std::size_t j = 0; j < 3; ++j) {
        const double expected = y.data()[0] * ((j == 0 ? 1.0 : 0.0) - y.data()[j]);
        CHECK(g[j] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("finite differences: relu kink at zero is flagged and excluded") {
    Tensor point = Tensor::from_data({3}, {0.0, 1.0, -1.0});
    auto fn = [](const Tensor& t) { return sum_all(relu(t)); };
    FiniteDiffReport r = finite_diff_check(fn, point, 1e-6);
    REQUIRE(r.kink_coords.size() == 1);
    CHECK(r.kink_coords[0] == 0);
    CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradient correctness across primitives at 50 random points") {
    Rng rng(7);
    struct Case {
        const char* name;
        Shape shape;
        std::function<Tensor(const Tensor&)> fn;
    };
    Tensor other = random_tensor({3, 4}, rng);
    Tensor rows = random_tensor({4, 4}, rng);
    std::vector<Case> cases;
    cases.push_back({"add", {3, 4}, [&](const Tensor& t) { return sum_all(add(t, other)); }});
    cases.push_back({"sub", {3, 4}, [&](const Tensor& t) { return sum_all(sub(other, t)); }});
    cases.push_back({"mul", {3, 4}, [&](const Tensor& t) { return sum_all(mul(t, other)); }});
    cases.push_back({"div", {3, 4}, [&](const Tensor& t) {
                         return sum_all(div(t, Tensor::scalar(1.7)));
                     }});
    cases.push_back({"scale", {3, 4}, [&](const Tensor& t) { return sum_all(scale(t, -2.5)); }});
    cases.push_back({"matmul", {3, 4}, [&](const Tensor& t) {
                         return sum_all(matmul(t, rows));
                     }});
    cases.push_back({"transpose", {3, 4}, [&](const Tensor& t) {
                         return sum_all(mul(transpose(t), transpose(other)));
                     }});
    cases.push_back({"tanh", {3, 4}, [&](const Tensor& t) { return sum_all(tanh(t)); }});
    cases.push_back({"softmax", {3, 4}, [&](const Tensor& t) {
                         return sum_all(mul(softmax(t), other));
                     }});
    cases.push_back({"mean_axes", {3, 4}, [&](const Tensor& t) {
                         return sum_all(mean(t, {1}));
                     }});
    cases.push_back({"concat", {3, 4}, [&](const Tensor& t) {
                         return sum_all(mul(concat({t, other}, 0), concat({other, t}, 0)));
                     }});
    cases.push_back({"reshape", {3, 4}, [&](const Tensor& t) {
                         return sum_all(mul(reshape(t, {4, 3}), reshape(other, {4, 3})));
                     }});
    cases.push_back({"batched_dot", {3, 4}, [&](const Tensor& t) {
                         return sum_all(batched_dot(t, other));
                     }});
    cases.push_back({"norm_lastaxis", {3, 4}, [&](const Tensor& t) {
                         return sum_all(norm_lastaxis(t));
                     }});
    cases.push_back({"gather_rows", {3, 4}, [&](const Tensor& t) {
                         return sum_all(gather_rows(t, {2, 0, 2}));
                     }});
    cases.push_back({"take_per_row", {3, 4}, [&](const Tensor& t) {
                         return sum_all(take_per_row(t, {1, 3, 0}));
                     }});
    cases.push_back({"add_rowvec", {3, 4}, [&](const Tensor& t) {
                         return sum_all(add_rowvec(t, Tensor::from_data({4}, {1, -2, 3, 0.5})));
                     }});
    cases.push_back({"log", {3, 4}, [&](const Tensor& t) {
                         return sum_all(log(add(mul(t, t), Tensor::scalar(0.5))));
                     }});

    for (auto& c : cases) {
        double worst = 0.0;
        for (int pt = 0; pt < 50; ++pt) {
            Tensor point = random_tensor(c.shape, rng);
            FiniteDiffReport r = finite_diff_check(c.fn, point, 1e-6);
            worst = std::max(worst, r.max_rel_err);
        }
        INFO(c.name);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("backward is linear") {
    Rng rng(3);
    Tensor p = random_tensor({5}, rng);
    auto grad_of = [&](double a, double b) {
        Tensor leaf = Tensor::from_data({5}, p.data(), true);
        Tensor f = sum_all(mul(leaf, leaf));
        Tensor g = sum_all(tanh(leaf));
        Tensor combined = add(scale(f, a), scale(g, b));
        return grad_wrt(combined, leaf);
    };
    const auto gf = grad_of(1.0, 0.0);
    const auto gg = grad_of(0.0, 1.0);
    const auto gc = grad_of(2.5, -1.25);
    for (std::size_t i = 0; i < 5; ++i)
        CHECK(std::abs(gc[i] - (2.5 * gf[i] - 1.25 * gg[i])) < 1e-12);
}

TEST_CASE("shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    try {
        add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("norm backward guards near-zero divisor") {
    Tensor p = Tensor::from_data({1, 3}, {0.0, 0.0, 0.0}, true);
    Tensor y = sum_all(norm_lastaxis(p));
    CHECK_THROWS_AS(backward(y), NumericError);
}

TEST_CASE("non-scalar loss is rejected") {
    Tensor p = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(p, p)), ShapeError);
}

TEST_CASE("gradients accumulate and reset") {
    Tensor p = Tensor::from_data({2}, {1, 2}, true);
    backward(sum_all(p));
    backward(sum_all(p));
    CHECK(p.grad() == std::vector<double>{2, 2});
    p.zero_grad();
    CHECK(p.grad() == std::vector<double>{0, 0});
}

TEST_CASE("parameters off the gradient path get zero gradients") {
    ParameterStore params;
    Tensor used = params.add("used", Tensor::from_data({2}, {1, 2}));
    params.add("unused", Tensor::from_data({3}, {1, 2, 3}));
    backward(sum_all(mul(used, used)), params);
    CHECK(params.at("unused").grad() == std::vector<double>{0, 0, 0});
    CHECK(params.at("used").grad() == std::vector<double>{2, 4});
}

TEST_CASE("parameter store enforces unique names and insertion order") {
    ParameterStore params;
    params.add("b", Tensor::zeros({1}));
    params.add("a", Tensor::zeros({1}));
    CHECK_THROWS(params.add("a", Tensor::zeros({1})));
    CHECK(params.items()[0].first == "b");
    CHECK(params.items()[1].first == "a");
}

TEST_CASE("deterministic forward and gradients under a fixed seed") {
    auto run = [] {
        Rng rng(123);
        Tensor w = random_tensor({6, 6}, rng);
        Tensor x = random_tensor({6, 2}, rng);
        Tensor wl = Tensor::from_data({6, 6}, w.data(), true);
        Tensor loss = mean_all(relu(matmul(wl, x)));
        auto g = grad_wrt(loss, wl);
        return std::make_pair(loss.item(), g);
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}

TEST_CASE("stable_sum is invariant to permutations") {
    Rng rng(9);
    std::vector<double> v(257);
    for (double& x : v) x = rng.gaussian() * std::exp(rng.gaussian());
    std::vector<double> shuffled = v;
    for (std::size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[rng.uniform_index(i)]);
    CHECK(stable_sum(v) == stable_sum(shuffled));
}

TEST_CASE("CANON1 round trip is bit-exact") {
    Rng rng(11);
    std::vector<std::pair<std::string, Tensor>> tensors;
    tensors.emplace_back("weights.0", random_tensor({3, 4}, rng));
    tensors.emplace_back("scalar", Tensor::from_data({}, {-0.1234567890123456789}));
    tensors.emplace_back("empty name ok", random_tensor({2, 2, 2}, rng));
    const std::string path =
        (std::filesystem::temp_directory_path() / "canon1_roundtrip.canon1").string();
    write_canon1(path, tensors);
    auto loaded = read_canon1(path);
    REQUIRE(loaded.size() == tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        CHECK(loaded[i].first == tensors[i].first);
        CHECK(loaded[i].second.shape() == tensors[i].second.shape());
        CHECK(loaded[i].second.data() == tensors[i].second.data());
    }
    std::filesystem::remove(path);
}

TEST_CASE("CANON1 rejects bad magic") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "bad_magic.canon1").string();
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOTCANON\n1\nx\n2\n";
    }
    CHECK_THROWS_AS(read_canon1(path), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("CANON1 rejects truncated payload") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "truncated.canon1").string();
    {
        std::ofstream os(path, std::ios::binary);
        os << "CANON1\n1\nx\n4\n";
        const double partial = 1.0;
        os.write(reinterpret_cast<const char*>(&partial), sizeof partial);
    }
    CHECK_THROWS_AS(read_canon1(path), IoError);
    std::filesystem::remove(path);
}
