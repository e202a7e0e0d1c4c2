#include <catch2/catch_amalgamated.hpp>

#include "rdpm/conv.hpp"
#include "rdpm/grad_check.hpp"
#include "rdpm/nn.hpp"
#include "rdpm/rng.hpp"
#include "rdpm/tensor.hpp"

using namespace rdpm;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool grad = true) {
    auto t = Tensor::zeros(std::move(shape), grad);
    for (auto& v : t.mutable_data()) v = -2.0 + 4.0 * rng.uniform();
    return t;
}

// Reduces an op output to a scalar with fixed random weights so grad_check
// exercises the full Jacobian, not just the row sums.
std::vector<double> rand_weights(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    for (auto& v : w) v = -1.0 + 2.0 * rng.uniform();
    return w;
}

Tensor weighted_sum(const Tensor& t, const std::vector<double>& w) {
    Tensor wt = Tensor::from_data(t.shape(), w);
    return sum(mul(t, wt));
}

}  // namespace

TEST_CASE("elementwise op values") {
    Tensor a = Tensor::from_data({2}, {1, 2});
    Tensor b = Tensor::from_data({2}, {3, 4});
    auto r = add(a, b);
    CHECK(r.at(0) == 4.0);
    CHECK(r.at(1) == 6.0);
    auto s = sub(b, a);
    CHECK(s.at(0) == 2.0);
    auto m = mul(a, b);
    CHECK(m.at(1) == 8.0);
}

TEST_CASE("softmax of constants is uniform") {
    Tensor a = Tensor::zeros({3});
    auto y = softmax_last(a);
    for (int i = 0; i < 3; ++i)
        CHECK_THAT(y.at(i), Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-15));
}

TEST_CASE("matmul identity") {
    Rng rng(7);
    Tensor a = rand_tensor({3, 3}, rng, false);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.mutable_data()[i * 3 + i] = 1.0;
    auto y = matmul(eye, a);
    for (std::size_t i = 0; i < 9; ++i) CHECK(y.at(i) == a.at(i));
}

TEST_CASE("matmul against reference evaluation") {
    Rng rng(11);
    Tensor a = rand_tensor({4, 5}, rng, false);
    Tensor b = rand_tensor({5, 3}, rng, false);
    auto c = matmul(a, b);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
            double ref = 0.0;
            for (int k = 0; k < 5; ++k) ref += a.at(i * 5 + k) * b.at(k * 3 + j);
            CHECK_THAT(c.at(i * 3 + j), Catch::Matchers::WithinAbs(ref, 1e-12));
        }
}

TEST_CASE("shape mismatch errors name the op and shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4});
    CHECK_THROWS_WITH(add(a, b), Catch::Matchers::ContainsSubstring("add") &&
                                     Catch::Matchers::ContainsSubstring("[2,3]") &&
                                     Catch::Matchers::ContainsSubstring("[4]"));
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({4, 2})), ShapeError);
}

TEST_CASE("backward: analytic cases") {
    Tensor p = Tensor::from_data({3}, {1, 2, 3}, true);
    auto loss = sum(square(p));
    loss.backward();
    CHECK(p.grad()[0] == 2.0);
    CHECK(p.grad()[1] == 4.0);
    CHECK(p.grad()[2] == 6.0);

    Tensor q = Tensor::from_data({5}, {1, 2, 3, 4, 5}, true);
    auto l2 = mean(q);
    l2.backward();
    for (double g : q.grad()) CHECK_THAT(g, Catch::Matchers::WithinAbs(0.2, 1e-15));
}

TEST_CASE("backward: non-scalar loss and reuse are errors") {
    Tensor p = Tensor::from_data({2}, {1, 2}, true);
    auto y = square(p);
    CHECK_THROWS_AS(y.backward(), GraphError);
    auto loss = sum(y);
    loss.backward();
    CHECK_THROWS_AS(loss.backward(), GraphError);
}

TEST_CASE("gradient soundness of primitives vs central differences") {
    Rng rng(42);
    const double h = 1e-5, tol = 1e-4;

    auto check = [&](const char* name, auto make_loss, Shape pshape) {
        for (int rep = 0; rep < 3; ++rep) {
            Tensor p = rand_tensor(pshape, rng);
            auto rep_w = rand_weights(0, rng);
            auto f = [&](Tensor& t) { return make_loss(t); };
            auto r = grad_check(f, p, h, tol, 64);
            INFO(name << " rep " << rep << " max_rel_err " << r.max_rel_err);
            CHECK(r.pass);
        }
    };

    Rng wr(99);
    {
        Tensor other = rand_tensor({4, 6}, wr, false);
        auto w = rand_weights(24, wr);
        check("add", [&](Tensor& t) { return weighted_sum(add(t, other), w); }, {4, 6});
        check("sub", [&](Tensor& t) { return weighted_sum(sub(other, t), w); }, {4, 6});
        check("mul", [&](Tensor& t) { return weighted_sum(mul(t, other), w); }, {4, 6});
    }
    {
        // suffix broadcast: bias side of add
        Tensor big = rand_tensor({3, 4, 6}, wr, false);
        auto w = rand_weights(72, wr);
        check("add-broadcast", [&](Tensor& t) { return weighted_sum(add(big, t), w); }, {6});
    }
    {
        auto w = rand_weights(12, wr);
        check("square", [&](Tensor& t) { return weighted_sum(square(t), w); }, {3, 4});
        check("exp", [&](Tensor& t) { return weighted_sum(exp_(t), w); }, {3, 4});
        check("gelu", [&](Tensor& t) { return weighted_sum(gelu(t), w); }, {3, 4});
        check("silu", [&](Tensor& t) { return weighted_sum(silu(t), w); }, {3, 4});
        check("softmax", [&](Tensor& t) { return weighted_sum(softmax_last(t), w); }, {3, 4});
        check("layer_norm", [&](Tensor& t) { return weighted_sum(layer_norm_last(t), w); }, {3, 4});
    }
    {
        // log on positive inputs
        auto w = rand_weights(8, wr);
        auto f = [&](Tensor& t) { return weighted_sum(log_(t), w); };
        Tensor p = Tensor::zeros({2, 4}, true);
        for (auto& v : p.mutable_data()) v = 0.5 + 2.0 * wr.uniform();
        auto r = grad_check(f, p, h, tol);
        CHECK(r.pass);
    }
    {
        Tensor b = rand_tensor({5, 3}, wr, false);
        auto w = rand_weights(12, wr);
        check("matmul-a", [&](Tensor& t) { return weighted_sum(matmul(t, b), w); }, {4, 5});
        Tensor a = rand_tensor({4, 5}, wr, false);
        check("matmul-b", [&](Tensor& t) { return weighted_sum(matmul(a, t), w); }, {5, 3});
    }
    {
        Tensor b3 = rand_tensor({2, 5, 3}, wr, false);
        auto w = rand_weights(2 * 4 * 3, wr);
        check("bmm", [&](Tensor& t) { return weighted_sum(bmm(t, b3), w); }, {2, 4, 5});
        Tensor bT = rand_tensor({2, 3, 5}, wr, false);
        check("bmm-transB", [&](Tensor& t) { return weighted_sum(bmm(t, bT, true), w); }, {2, 4, 5});
        Tensor a3 = rand_tensor({2, 4, 5}, wr, false);
        check("bmm-rhs", [&](Tensor& t) { return weighted_sum(bmm(a3, t), w); }, {2, 5, 3});
        check("bmm-rhs-transB", [&](Tensor& t) { return weighted_sum(bmm(a3, t, true), w); }, {2, 3, 5});
    }
    {
        auto w = rand_weights(24, wr);
        check("permute", [&](Tensor& t) { return weighted_sum(permute(t, {2, 0, 1}), w); }, {2, 3, 4});
        check("reshape", [&](Tensor& t) { return weighted_sum(reshape(t, {6, 4}), w); }, {2, 3, 4});
    }
    {
        Tensor other = rand_tensor({2, 3}, wr, false);
        auto w = rand_weights(2 * 7, wr);
        check("concat", [&](Tensor& t) { return weighted_sum(concat_last(t, other), w); }, {2, 4});
        auto w2 = rand_weights(2 * 2, wr);
        check("slice", [&](Tensor& t) { return weighted_sum(slice_last(t, 1, 2), w2); }, {2, 4});
    }
    {
        auto w = rand_weights(2 * 3 * 4, wr);
        Tensor cond = rand_tensor({2, 4}, wr, false);
        Tensor cond2 = rand_tensor({2, 4}, wr, false);
        check("affine_tokens-x",
              [&](Tensor& t) { return weighted_sum(affine_tokens(t, cond, cond2), w); },
              {2, 3, 4});
        Tensor x = rand_tensor({2, 3, 4}, wr, false);
        check("affine_tokens-scale",
              [&](Tensor& t) { return weighted_sum(affine_tokens(x, t, cond2), w); },
              {2, 4});
        check("gate_tokens-g",
              [&](Tensor& t) { return weighted_sum(gate_tokens(x, t), w); }, {2, 4});
    }
    {
        std::vector<int> ids = {2, 0, 2, 1};
        auto w = rand_weights(4 * 3, wr);
        check("embedding", [&](Tensor& t) { return weighted_sum(embedding(t, ids), w); }, {4, 3});
    }
    {
        std::vector<int> targets = {1, 0, 2};
        check("cross_entropy", [&](Tensor& t) { return cross_entropy(t, targets); }, {3, 4});
    }
    {
        Tensor cw = rand_tensor({3, 2, 3, 3}, wr, false);
        Tensor cb = rand_tensor({3}, wr, false);
        auto w = rand_weights(1 * 3 * 4 * 4, wr);
        check("conv2d-x",
              [&](Tensor& t) { return weighted_sum(conv2d(t, cw, cb, 1, 1), w); },
              {1, 2, 4, 4});
        Tensor cx = rand_tensor({1, 2, 4, 4}, wr, false);
        check("conv2d-w",
              [&](Tensor& t) { return weighted_sum(conv2d(cx, t, cb, 1, 1), w); },
              {3, 2, 3, 3});
        auto ws = rand_weights(1 * 3 * 2 * 2, wr);
        check("conv2d-stride2",
              [&](Tensor& t) { return weighted_sum(conv2d(t, cw, cb, 2, 1), ws); },
              {1, 2, 4, 4});
        auto wu = rand_weights(1 * 2 * 8 * 8, wr);
        check("upsample",
              [&](Tensor& t) { return weighted_sum(upsample_nearest2(t), wu); },
              {1, 2, 4, 4});
    }
}

TEST_CASE("two-layer MLP gradient matches finite differences") {
    Rng rng(5);
    Tensor x = rand_tensor({4, 6}, rng, false);
    Tensor w2 = rand_tensor({8, 1}, rng, false);
    auto f = [&](Tensor& w1) {
        auto h = gelu(matmul(x, w1));
        return mean(square(matmul(h, w2)));
    };
    Tensor w1 = rand_tensor({6, 8}, rng);
    auto r = grad_check(f, w1, 1e-5, 1e-4);
    INFO("max rel err " << r.max_rel_err);
    CHECK(r.pass);
}

TEST_CASE("grad_check detects a wrong gradient rule") {
    // x^3 evaluated but gradient computed as if it were x^2
    auto bad_cube = [](Tensor& t) {
        auto tn = t.node();
        Tensor out = make_op(t.shape(), {t}, [tn](detail::Node& o) {
            tn->ensure_grad();
            for (std::size_t i = 0; i < o.data.size(); ++i)
                tn->grad[i] += 2.0 * tn->data[i] * o.grad[i];  // wrong on purpose
        });
        for (std::size_t i = 0; i < t.numel(); ++i)
            out.node()->data[i] = t.at(i) * t.at(i) * t.at(i);
        return sum(out);
    };
    Tensor p = Tensor::from_data({2}, {1.5, -0.7}, true);
    auto r = grad_check(bad_cube, p, 1e-5, 1e-4);
    CHECK_FALSE(r.pass);
}

TEST_CASE("grad_check simple square") {
    Tensor p = Tensor::scalar(3.0, true);
    auto f = [](Tensor& t) { return mul(t, t); };
    auto r = grad_check(f, p, 1e-5, 1e-6);
    CHECK(r.pass);
}

TEST_CASE("layer_norm output statistics") {
    Rng rng(3);
    Tensor x = rand_tensor({10, 32}, rng, false);
    auto y = layer_norm_last(x);
    for (int r = 0; r < 10; ++r) {
        double mu = 0.0, var = 0.0;
        for (int i = 0; i < 32; ++i) mu += y.at(r * 32 + i);
        mu /= 32;
        for (int i = 0; i < 32; ++i) {
            double d = y.at(r * 32 + i) - mu;
            var += d * d;
        }
        var /= 32;
        CHECK(std::abs(mu) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-4);
    }
}

TEST_CASE("rng determinism and stream independence") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng c(123);
    Rng d1 = c.derive(1), d2 = c.derive(2);
    CHECK(d1.next_u64() != d2.next_u64());
    // derived streams are reproducible without touching the parent
    Rng e = Rng(123).derive(1);
    Rng f = Rng(123).derive(1);
    CHECK(e.normal() == f.normal());
    // uniform stays inside the open interval
    Rng g(9);
    for (int i = 0; i < 1000; ++i) {
        double u = g.uniform();
        CHECK(u > 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("adamw decreases a quadratic") {
    Rng rng(1);
    Params ps;
    Tensor p = ps.add("p", rand_tensor({8}, rng));
    AdamW opt;
    opt.lr = 0.05;
    opt.init(ps);
    double first = 0.0, last = 0.0;
    for (int it = 0; it < 100; ++it) {
        ps.zero_grad();
        auto loss = sum(square(p));
        if (it == 0) first = loss.value();
        last = loss.value();
        loss.backward();
        opt.step(ps);
    }
    CHECK(last < 0.01 * first);
}

TEST_CASE("clip_grad_norm scales to the requested norm") {
    Params ps;
    Tensor p = ps.add("p", Tensor::from_data({2}, {3, 4}, true));
    auto loss = sum(square(p));  // grad (6,8), norm 10
    loss.backward();
    double pre = clip_grad_norm(ps, 1.0);
    CHECK_THAT(pre, Catch::Matchers::WithinAbs(10.0, 1e-12));
    double post = 0.0;
    for (double g : p.grad()) post += g * g;
    CHECK_THAT(std::sqrt(post), Catch::Matchers::WithinAbs(1.0, 1e-12));
}
