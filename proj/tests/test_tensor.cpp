#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "mvrag/optim.hpp"
#include "mvrag/tensor.hpp"
#include "testutil.hpp"

using namespace mvrag;
using namespace mvrag::testing;

TEST_CASE("tensor invariants") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 6.0);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), std::invalid_argument);
}

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor I({2, 2}, {1, 0, 0, 1});
    Tensor M({2, 2}, {3, -1, 2, 7});
    auto R = matmul(I, M);
    CHECK(R.data() == M.data());

    Tensor A({2, 2}, {1, 2, 3, 4});
    Tensor x({2, 1}, {1, 1});
    auto y = matmul(A, x);
    CHECK(y.at({0, 0}) == doctest::Approx(3.0));
    CHECK(y.at({1, 0}) == doctest::Approx(7.0));
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor a({2, 3});
    Tensor b({4, 2});
    try {
        matmul(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient of sum equals ones * b^T") {
    Rng rng(11);
    Tensor a = Tensor::randn({5, 7}, rng);
    Tensor b = Tensor::randn({7, 3}, rng);
    a.set_requires_grad(true);
    auto loss = sum_all(matmul(a, b));
    loss.backward();
    // d(sum)/da = ones(5,3) * b^T
    std::vector<double> ones(15, 1.0);
    std::vector<double> bt(21);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 3; ++j) bt[(size_t)j * 7 + i] = b.at({i, j});
    auto expect = naive_matmul(ones, bt, 5, 3, 7);
    CHECK(max_abs_diff(std::vector<double>(a.grad().begin(), a.grad().end()), expect) < 1e-12);

    // and against the finite-difference oracle
    auto res = gradcheck([&](std::vector<Tensor>& in) { return sum_all(matmul(in[0], b)); },
                         {Tensor::randn({5, 7}, rng)});
    CHECK_MESSAGE(res.ok, res.detail);
}

TEST_CASE("matmul batched broadcast and transposes vs oracle") {
    Rng rng(3);
    Tensor a = Tensor::randn({2, 4, 5}, rng);
    Tensor b = Tensor::randn({5, 3}, rng);
    auto c = matmul(a, b);
    CHECK(c.shape() == std::vector<int>{2, 4, 3});
    for (int i = 0; i < 2; ++i) {
        std::vector<double> as(a.data().begin() + i * 20, a.data().begin() + (i + 1) * 20);
        auto ref = naive_matmul(as, b.data(), 4, 5, 3);
        std::vector<double> cs(c.data().begin() + i * 12, c.data().begin() + (i + 1) * 12);
        CHECK(max_abs_diff(cs, ref) < 1e-12);
    }

    // all four transpose combinations, gradients vs finite differences
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Tensor x = Tensor::randn(ta ? std::vector<int>{4, 3} : std::vector<int>{3, 4}, rng);
            Tensor y = Tensor::randn(tb ? std::vector<int>{5, 4} : std::vector<int>{4, 5}, rng);
            auto res = gradcheck(
                [&](std::vector<Tensor>& in) {
                    return mean_all(matmul(in[0], in[1], ta, tb));
                },
                {x, y});
            CHECK_MESSAGE(res.ok, "ta=", ta, " tb=", tb, " ", res.detail);
        }
}

TEST_CASE("softmax symmetry, stabilization, gradient") {
    Tensor x({3}, {0, 0, 0});
    auto y = softmax_lastdim(x);
    for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Tensor big({2}, {1000, 0});
    auto z = softmax_lastdim(big);
    CHECK(std::abs(z.data()[0] - 1.0) < 1e-12);
    CHECK(std::abs(z.data()[1]) < 1e-12);

    // rows sum to one
    Rng rng(5);
    Tensor r = Tensor::randn({4, 7}, rng, 3.0);
    auto s = softmax_lastdim(r);
    for (int i = 0; i < 4; ++i) {
        double sum = 0;
        for (int j = 0; j < 7; ++j) sum += s.at({i, j});
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }

    auto res = gradcheck(
        [&](std::vector<Tensor>& in) {
            auto sm = softmax_lastdim(in[0]);
            return sum_all(mul(sm, sm));  // non-trivial downstream
        },
        {Tensor::randn({3, 4}, rng)});
    CHECK_MESSAGE(res.ok, res.detail);
}

TEST_CASE("attention single key broadcasts v, ignores q") {
    Rng rng(7);
    Tensor q1 = Tensor::randn({1, 3, 4}, rng);
    Tensor q2 = Tensor::randn({1, 3, 4}, rng);
    Tensor k = Tensor::randn({1, 1, 4}, rng);
    Tensor v = Tensor::randn({1, 1, 5}, rng);
    auto o1 = attention(q1, k, v);
    auto o2 = attention(q2, k, v);
    CHECK(bitwise_equal(o1.data(), o2.data()));
    for (int i = 0; i < 3; ++i)
        for (int c = 0; c < 5; ++c) CHECK(o1.at({0, i, c}) == doctest::Approx(v.at({0, 0, c})));
}

TEST_CASE("attention key permutation invariance") {
    Rng rng(13);
    Tensor q = Tensor::randn({2, 3, 4}, rng);
    Tensor k = Tensor::randn({2, 5, 4}, rng);
    Tensor v = Tensor::randn({2, 5, 6}, rng);
    auto base = attention(q, k, v);
    // permute key axis jointly in k and v
    std::vector<int> perm{3, 0, 4, 1, 2};
    Tensor kp({2, 5, 4}), vp({2, 5, 6});
    for (int b = 0; b < 2; ++b)
        for (int j = 0; j < 5; ++j) {
            std::memcpy(&kp.data()[((size_t)b * 5 + j) * 4], &k.data()[((size_t)b * 5 + perm[j]) * 4],
                        4 * sizeof(double));
            std::memcpy(&vp.data()[((size_t)b * 5 + j) * 6], &v.data()[((size_t)b * 5 + perm[j]) * 6],
                        6 * sizeof(double));
        }
    auto permuted = attention(q, kp, vp);
    CHECK(max_abs_diff(base.data(), permuted.data()) < 1e-12);
}

TEST_CASE("attention matches naive two-loop oracle") {
    Rng rng(17);
    Tensor q = Tensor::randn({3, 4, 8}, rng);
    Tensor k = Tensor::randn({3, 6, 8}, rng);
    Tensor v = Tensor::randn({3, 6, 5}, rng);
    auto out = attention(q, k, v);
    auto ref = naive_attention(q.data(), k.data(), v.data(), 3, 4, 6, 8, 5);
    CHECK(max_abs_diff(out.data(), ref) < 1e-10);

    auto res = gradcheck(
        [&](std::vector<Tensor>& in) { return mean_all(attention(in[0], in[1], in[2])); },
        {Tensor::randn({2, 3, 4}, rng), Tensor::randn({2, 5, 4}, rng), Tensor::randn({2, 5, 3}, rng)});
    CHECK_MESSAGE(res.ok, res.detail);
}

TEST_CASE("gradcheck core op set") {
    Rng rng(23);
    auto check = [&](const char* name, std::function<Tensor(std::vector<Tensor>&)> f,
                     std::vector<Tensor> ins) {
        auto res = gradcheck(f, std::move(ins));
        CHECK_MESSAGE(res.ok, name, ": ", res.detail);
    };
    check("add broadcast", [](std::vector<Tensor>& in) { return mean_all(add(in[0], in[1])); },
          {Tensor::randn({3, 4}, rng), Tensor::randn({4}, rng)});
    check("mul broadcast", [](std::vector<Tensor>& in) { return mean_all(mul(in[0], in[1])); },
          {Tensor::randn({3, 4}, rng), Tensor::randn({4}, rng)});
    check("silu", [](std::vector<Tensor>& in) { return mean_all(silu(in[0])); },
          {Tensor::randn({4, 5}, rng)});
    check("gelu", [](std::vector<Tensor>& in) { return mean_all(gelu(in[0])); },
          {Tensor::randn({4, 5}, rng)});
    check("reshape+slice+concat",
          [](std::vector<Tensor>& in) {
              auto r = reshape(in[0], {2, 6});
              auto s = slice(r, 1, 1, 3);
              auto c = concat({s, s}, 1);
              return mean_all(mul(c, c));
          },
          {Tensor::randn({3, 4}, rng)});
    check("swap_axes_12",
          [](std::vector<Tensor>& in) {
              auto t = swap_axes_12(in[0]);
              return mean_all(mul(t, t));
          },
          {Tensor::randn({2, 3, 4, 2}, rng)});
    check("mean_axis",
          [](std::vector<Tensor>& in) { return sum_all(mean_axis(in[0], 1)); },
          {Tensor::randn({2, 5, 3}, rng)});
    check("layer_norm",
          [](std::vector<Tensor>& in) {
              auto y = layer_norm(in[0], in[1], in[2]);
              return mean_all(mul(y, y));
          },
          {Tensor::randn({3, 6}, rng), Tensor::randn({6}, rng), Tensor::randn({6}, rng)});
    check("group_norm",
          [](std::vector<Tensor>& in) {
              auto y = group_norm(in[0], 2, in[1], in[2]);
              return mean_all(mul(y, y));
          },
          {Tensor::randn({2, 3, 3, 4}, rng), Tensor::randn({4}, rng), Tensor::randn({4}, rng)});
    check("log_softmax",
          [](std::vector<Tensor>& in) { return mean_all(mul(log_softmax_lastdim(in[0]), in[1])); },
          {Tensor::randn({3, 5}, rng), Tensor::randn({3, 5}, rng)});
    check("linear",
          [](std::vector<Tensor>& in) { return mean_all(linear(in[0], in[1], in[2])); },
          {Tensor::randn({6, 4}, rng), Tensor::randn({4, 3}, rng), Tensor::randn({3}, rng)});
    check("conv2d k3",
          [](std::vector<Tensor>& in) { return mean_all(conv2d(in[0], in[1], in[2], 3)); },
          {Tensor::randn({2, 4, 4, 3}, rng), Tensor::randn({27, 5}, rng), Tensor::randn({5}, rng)});
    check("conv2d k1",
          [](std::vector<Tensor>& in) { return mean_all(conv2d(in[0], in[1], in[2], 1)); },
          {Tensor::randn({2, 4, 4, 3}, rng), Tensor::randn({3, 5}, rng), Tensor::randn({5}, rng)});
    check("avg_pool2", [](std::vector<Tensor>& in) { return mean_all(mul(avg_pool2(in[0]), avg_pool2(in[0]))); },
          {Tensor::randn({2, 4, 4, 3}, rng)});
    check("upsample_nearest2",
          [](std::vector<Tensor>& in) {
              auto u = upsample_nearest2(in[0]);
              return mean_all(mul(u, u));
          },
          {Tensor::randn({2, 3, 3, 2}, rng)});
    check("patchify/unpatchify",
          [](std::vector<Tensor>& in) {
              auto p = patchify(in[0], 2);
              auto u = unpatchify(p, 2);
              return mean_all(mul(u, in[0]));
          },
          {Tensor::randn({1, 4, 4, 3}, rng)});
    check("embedding",
          [](std::vector<Tensor>& in) {
              auto e = embedding(in[0], {0, 2, 1, 2}, {4});
              return mean_all(mul(e, e));
          },
          {Tensor::randn({3, 5}, rng)});
}

TEST_CASE("patchify round trip is exact") {
    Rng rng(31);
    Tensor x = Tensor::randn({2, 8, 8, 3}, rng);
    auto back = unpatchify(patchify(x, 2), 2);
    CHECK(bitwise_equal(x.data(), back.data()));
}

TEST_CASE("op determinism: same seed, same bits") {
    auto run = [] {
        Rng rng(99);
        Tensor a = Tensor::randn({16, 32}, rng);
        Tensor b = Tensor::randn({32, 8}, rng);
        auto y = softmax_lastdim(matmul(a, b));
        return y.data();
    };
    CHECK(bitwise_equal(run(), run()));
}

TEST_CASE("adamw: zero gradient leaves parameter unchanged") {
    Rng rng(41);
    Parameter p(Tensor::randn({4, 4}, rng), "p");
    auto before = p.tensor.data();
    AdamW opt(1e-2, 0.9, 0.999, 1e-8, 0.0);
    for (int i = 0; i < 3; ++i) opt.step({&p});
    CHECK(bitwise_equal(before, p.tensor.data()));
}

TEST_CASE("adamw: first-step closed form") {
    Parameter p(Tensor({2}, {1.0, -2.0}), "p");
    p.tensor.node()->ensure_grad();
    p.tensor.node()->grad = {0.5, -0.25};
    const double lr = 1e-3, eps = 1e-8;
    AdamW opt(lr, 0.9, 0.999, eps, 0.0);
    opt.step({&p});
    // after bias correction at t=1, mhat = g, vhat = g^2
    for (int i = 0; i < 2; ++i) {
        const double g = (i == 0) ? 0.5 : -0.25;
        const double expect = ((i == 0) ? 1.0 : -2.0) - lr * g / (std::sqrt(g * g) + eps);
        CHECK(p.tensor.data()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("adamw: 100 steps on f(x)=x^2 converges from 5") {
    Parameter p(Tensor({1}, {5.0}), "x");
    AdamW opt(0.1, 0.9, 0.999, 1e-8, 0.0);
    for (int i = 0; i < 100; ++i) {
        opt.zero_grad({&p});
        auto loss = mul(p.tensor, p.tensor);
        loss.backward();
        opt.step({&p});
    }
    CHECK(std::abs(p.tensor.data()[0]) < 0.5);
}

TEST_CASE("frozen parameter is bitwise identical after steps") {
    Rng rng(43);
    Parameter p(Tensor::randn({8}, rng), "frozen.w");
    p.set_frozen(true);
    auto before = p.tensor.data();
    AdamW opt(1e-2);
    for (int i = 0; i < 10; ++i) {
        p.tensor.node()->ensure_grad();
        for (auto& g : p.tensor.node()->grad) g = 1.0;
        opt.step({&p});
    }
    CHECK(bitwise_equal(before, p.tensor.data()));
}

TEST_CASE("backward populates grads for all reachable requires_grad tensors") {
    Rng rng(47);
    Tensor a = Tensor::randn({3, 3}, rng).set_requires_grad(true);
    Tensor b = Tensor::randn({3, 3}, rng).set_requires_grad(true);
    auto mid = add(a, b);
    auto loss = mean_all(mul(mid, mid));
    loss.backward();
    CHECK(a.has_grad());
    CHECK(b.has_grad());
    CHECK(mid.has_grad());
}
