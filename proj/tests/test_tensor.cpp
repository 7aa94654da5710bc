#include <cmath>
#include <vector>

#include "citemtl/tensor.hpp"
#include "doctest.h"
#include "support/finite_diff.hpp"

using namespace citemtl;

namespace {

// Scalar triple-loop reference for matrix products.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
    std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int t = 0; t < k; ++t) c[i * n + j] += a[i * k + t] * b[t * n + j];
    return c;
}

Tensor<double> random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data()) v = rng.next_normal();
    t.set_requires_grad(requires_grad);
    return t;
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity and zero cases") {
    auto eye = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
    auto m = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
    auto r = matmul(eye, m);
    CHECK(r.data() == std::vector<float>{1, 2, 3, 4});

    auto z = Tensor<float>::from_data({2, 1}, {0, 0});
    auto rz = matmul(m, z);
    CHECK(rz.data() == std::vector<float>{0, 0});
}

TEST_CASE("matmul hand example matches triple-loop oracle") {
    auto a = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<double>::from_data({2, 1}, {5, 6});
    auto r = matmul(a, b);
    CHECK(r.data()[0] == 17.0);
    CHECK(r.data()[1] == 39.0);
    const auto oracle = matmul_oracle(a.data(), b.data(), 2, 2, 1);
    CHECK(r.data()[0] == oracle[0]);
    CHECK(r.data()[1] == oracle[1]);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({4, 5});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2, 3]"), std::invalid_argument);
    try {
        matmul(a, b);
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("[4, 5]") != std::string::npos);
    }
}

TEST_CASE("matmul against random oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = 1 + static_cast<int>(rng.next_below(5));
        const int k = 1 + static_cast<int>(rng.next_below(5));
        const int n = 1 + static_cast<int>(rng.next_below(5));
        auto a = random_tensor({m, k}, rng, false);
        auto b = random_tensor({k, n}, rng, false);
        const auto expect = matmul_oracle(a.data(), b.data(), m, k, n);
        const auto got = matmul(a, b);
        for (std::size_t i = 0; i < expect.size(); ++i) {
            CHECK(got.data()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("softmax rows sum to one and match direct evaluation") {
    auto t = Tensor<double>::from_data({1, 3}, {1, 2, 3});
    auto s = softmax_lastdim(t);
    // oracle: direct exp/sum in 64-bit
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(s.data()[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
    CHECK(s.data()[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));
    CHECK(s.data()[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
    // frozen values
    CHECK(s.data()[0] == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(s.data()[1] == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(s.data()[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax symmetric and stable at extreme logits") {
    auto u = softmax_lastdim(Tensor<float>::from_data({1, 3}, {0, 0, 0}));
    for (float v : u.data()) CHECK(v == doctest::Approx(1.0f / 3.0f));

    auto big = softmax_lastdim(Tensor<float>::from_data({1, 2}, {1000.0f, 0.0f}));
    CHECK(std::isfinite(big.data()[0]));
    CHECK(std::isfinite(big.data()[1]));
    CHECK(big.data()[0] == doctest::Approx(1.0));
    CHECK(big.data()[1] == doctest::Approx(0.0));
}

TEST_CASE("softmax properties: sum to one, shift invariance") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int rows = 1 + static_cast<int>(rng.next_below(4));
        const int k = 1 + static_cast<int>(rng.next_below(6));
        auto x = random_tensor({rows, k}, rng, false);
        auto y = softmax_lastdim(x);
        for (int r = 0; r < rows; ++r) {
            double sum = 0;
            for (int j = 0; j < k; ++j) {
                sum += y.data()[r * k + j];
                CHECK(y.data()[r * k + j] >= 0.0);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
        // add a constant to all logits
        const double c = rng.next_normal() * 10;
        auto shifted = x;
        auto xs = Tensor<double>::from_data(x.shape(), x.data());
        for (auto& v : xs.data()) v += c;
        auto ys = softmax_lastdim(xs);
        for (std::size_t i = 0; i < y.data().size(); ++i) {
            CHECK(ys.data()[i] == doctest::Approx(y.data()[i]).epsilon(1e-6));
        }
    }
}

TEST_CASE("cross entropy trivial and derived values") {
    // uniform logits, K=4: ln 4 regardless of target
    auto u = Tensor<double>::from_data({1, 4}, {0.5, 0.5, 0.5, 0.5});
    CHECK(cross_entropy(u, {2}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // confident correct
    auto conf = Tensor<double>::from_data({1, 2}, {10, -10});
    CHECK(cross_entropy(conf, {0}).item() < 1e-4);

    // derived: -log softmax([1,2,3])[1]
    auto l = Tensor<double>::from_data({1, 3}, {1, 2, 3});
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const double expect = -std::log(std::exp(2.0) / z);
    auto ce = cross_entropy(l, {1});
    CHECK(ce.item() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(ce.item() == doctest::Approx(1.40761).epsilon(1e-4));
}

TEST_CASE("cross entropy rejects out-of-range targets") {
    auto l = Tensor<float>::zeros({2, 3});
    CHECK_THROWS_AS(cross_entropy(l, {0, 3}), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(l, {-1, 0}), std::out_of_range);
}

TEST_CASE("cross entropy is nonnegative and ln K at uniform") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const int b = 1 + static_cast<int>(rng.next_below(4));
        const int k = 2 + static_cast<int>(rng.next_below(5));
        auto logits = random_tensor({b, k}, rng, false);
        std::vector<int> targets(b);
        for (auto& t : targets) t = static_cast<int>(rng.next_below(k));
        CHECK(cross_entropy(logits, targets).item() >= 0.0);

        auto uniform = Tensor<double>::full({b, k}, 1.7);
        CHECK(cross_entropy(uniform, targets).item() ==
              doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-12));
    }
}

TEST_CASE("backward of sum gives all-ones gradient") {
    auto x = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
    auto loss = sum_all(x);
    loss.backward();
    for (float g : x.grad_view()) CHECK(g == 1.0f);
}

TEST_CASE("backward of x*x at 3 gives 6") {
    auto x = Tensor<double>::from_data({1}, {3.0}).set_requires_grad(true);
    auto loss = mul(x, x);
    loss.backward();
    CHECK(x.grad_view()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar loss and double invocation") {
    auto x = Tensor<float>::from_data({2}, {1, 2}).set_requires_grad(true);
    auto y = add(x, x);
    CHECK_THROWS_AS(y.backward(), std::invalid_argument);

    auto loss = sum_all(y);
    loss.backward();
    CHECK_THROWS_AS(loss.backward(), std::logic_error);
}

TEST_CASE("gradient accumulates when a tensor is used twice") {
    auto x = Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
    auto loss = sum_all(add(x, x));
    loss.backward();
    CHECK(x.grad_view()[0] == 2.0);
    CHECK(x.grad_view()[1] == 2.0);
}

TEST_CASE("ops are deterministic: same inputs, identical bits") {
    Rng rng(99);
    auto a = random_tensor({7, 5}, rng, false);
    auto b = random_tensor({5, 4}, rng, false);
    auto r1 = matmul(a, b);
    auto r2 = matmul(a, b);
    CHECK(r1.data() == r2.data());
    auto s1 = softmax_lastdim(a);
    auto s2 = softmax_lastdim(a);
    CHECK(s1.data() == s2.data());
}

TEST_CASE("finite-difference gradient check per op") {
    Rng rng(42);

    SUBCASE("matmul") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 2}, rng);
        auto run = [&]() { return sum_all(matmul(a, b)); };
        auto res = citemtl::testing::check_gradients(
            {{"a", a}, {"b", b}}, [&]() { NoGradGuard ng; return run().item(); },
            [&]() {
                a.zero_grad();
                b.zero_grad();
                run().backward();
            });
        CHECK_MESSAGE(res.ok, res.worst_param, "[", res.worst_index, "] rel err ",
                      res.worst_rel_err);
    }

    SUBCASE("bmm and bmm_nt") {
        auto a = random_tensor({2, 3, 4}, rng);
        auto b = random_tensor({2, 4, 2}, rng);
        auto c = random_tensor({2, 5, 4}, rng);
        auto d = random_tensor({2, 5, 2}, rng, false);
        auto run2 = [&]() {
            return sum_all(add(bmm(a, b), bmm(bmm_nt(a, c, 0.5), d)));
        };
        auto res = citemtl::testing::check_gradients(
            {{"a", a}, {"b", b}, {"c", c}},
            [&]() { NoGradGuard ng; return run2().item(); },
            [&]() {
                a.zero_grad();
                b.zero_grad();
                c.zero_grad();
                run2().backward();
            });
        CHECK_MESSAGE(res.ok, res.worst_param, "[", res.worst_index, "] rel err ",
                      res.worst_rel_err);
    }

    SUBCASE("gelu, layer_norm, softmax, add_bias") {
        auto x = random_tensor({4, 6}, rng);
        auto g = random_tensor({6}, rng);
        auto b = random_tensor({6}, rng);
        auto w = random_tensor({6}, rng);
        auto run = [&]() {
            auto h = layer_norm(x, g, b);
            auto s = softmax_lastdim(gelu(add_bias(h, w)));
            return mean_all(s);
        };
        auto res = citemtl::testing::check_gradients(
            {{"x", x}, {"g", g}, {"b", b}, {"w", w}},
            [&]() { NoGradGuard ng; return run().item(); },
            [&]() {
                x.zero_grad();
                g.zero_grad();
                b.zero_grad();
                w.zero_grad();
                run().backward();
            });
        CHECK_MESSAGE(res.ok, res.worst_param, "[", res.worst_index, "] rel err ",
                      res.worst_rel_err);
    }

    SUBCASE("cross entropy") {
        auto logits = random_tensor({5, 3}, rng);
        std::vector<int> targets{0, 2, 1, 1, 0};
        auto res = citemtl::testing::check_gradients(
            {{"logits", logits}},
            [&]() {
                NoGradGuard ng;
                return cross_entropy(logits, targets).item();
            },
            [&]() {
                logits.zero_grad();
                cross_entropy(logits, targets).backward();
            });
        CHECK_MESSAGE(res.ok, res.worst_param, "[", res.worst_index, "] rel err ",
                      res.worst_rel_err);
    }

    SUBCASE("embedding lookup, split/merge heads, concat, reshape") {
        auto table = random_tensor({9, 8}, rng);
        std::vector<int> ids{1, 4, 7, 2, 0, 5};
        auto run = [&]() {
            auto e = embedding_lookup(table, ids, 2, 3);  // [2,3,8]
            auto heads = split_heads(e, 2);               // [4,3,4]
            auto merged = merge_heads(heads, 2);          // [2,3,8]
            auto flat = reshape(merged, {6, 8});
            auto cat = concat_rows(std::vector<Tensor<double>>{flat, flat});
            return mean_all(cat);
        };
        auto res = citemtl::testing::check_gradients(
            {{"table", table}}, [&]() { NoGradGuard ng; return run().item(); },
            [&]() {
                table.zero_grad();
                run().backward();
            });
        CHECK_MESSAGE(res.ok, res.worst_param, "[", res.worst_index, "] rel err ",
                      res.worst_rel_err);
    }
}

TEST_CASE("embedding lookup rejects out-of-range ids") {
    auto table = Tensor<float>::zeros({4, 2});
    CHECK_THROWS_AS(embedding_lookup(table, {0, 4}, 1, 2), std::out_of_range);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    auto p = Tensor<float>::from_data({3}, {1, 2, 3}).set_requires_grad(true);
    Adam<float> adam({p});
    for (int i = 0; i < 5; ++i) {
        p.zero_grad();
        p.grad();  // allocate zeros
        adam.step(0.1f);
    }
    CHECK(p.data() == std::vector<float>{1, 2, 3});
}

TEST_CASE("adam: one-step bias-corrected update") {
    // m_hat = v_hat = 1 after one step with g = 1, so the step is ~lr.
    auto p = Tensor<double>::from_data({1}, {0.0}).set_requires_grad(true);
    Adam<double> adam({p});
    p.grad()[0] = 1.0;
    adam.step(0.1);
    CHECK(p.data()[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam: identical params and grads stay identical") {
    auto a = Tensor<float>::from_data({2}, {0.5f, -0.25f}).set_requires_grad(true);
    auto b = Tensor<float>::from_data({2}, {0.5f, -0.25f}).set_requires_grad(true);
    Adam<float> adam({a, b});
    Rng rng(5);
    for (int step = 0; step < 10; ++step) {
        const float g0 = static_cast<float>(rng.next_normal());
        const float g1 = static_cast<float>(rng.next_normal());
        a.zero_grad();
        b.zero_grad();
        a.grad()[0] = g0;
        a.grad()[1] = g1;
        b.grad()[0] = g0;
        b.grad()[1] = g1;
        adam.step(0.01f);
        CHECK(a.data() == b.data());
    }
}

TEST_CASE("dropout: disabled is identity, enabled rescales kept entries") {
    Rng rng(17);
    auto x = random_tensor({4, 4}, rng, false);
    auto same = dropout(x, 0.5, rng, false);
    CHECK(same.data() == x.data());

    Rng stream(123);
    auto dropped = dropout(x, 0.5, stream, true);
    int kept = 0;
    for (std::size_t i = 0; i < dropped.data().size(); ++i) {
        if (dropped.data()[i] != 0.0) {
            ++kept;
            CHECK(dropped.data()[i] == doctest::Approx(x.data()[i] * 2.0));
        }
    }
    CHECK(kept > 0);
    CHECK(kept < 16);
}

TEST_SUITE_END();
