#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "mambaloc/rng.hpp"
#include "mambaloc/tensor.hpp"

using namespace mambaloc;

namespace {

// Independent dense matmul oracle: plain triple loop over explicit indices.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int M, int K, int P) {
    std::vector<double> out(static_cast<std::size_t>(M * P), 0.0);
    for (int m = 0; m < M; ++m)
        for (int p = 0; p < P; ++p)
            for (int k = 0; k < K; ++k)
                out[static_cast<std::size_t>(m * P + p)] += a[static_cast<std::size_t>(m * K + k)] *
                                                            b[static_cast<std::size_t>(k * P + p)];
    return out;
}

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, scale);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and oracle values") {
    Graph g;
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor y = g.matmul(a, eye);
    CHECK(y.at({0, 0}) == 1.0);
    CHECK(y.at({0, 1}) == 2.0);
    CHECK(y.at({1, 0}) == 3.0);
    CHECK(y.at({1, 1}) == 4.0);

    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor y2 = g.matmul(a, b);
    const auto expect = matmul_oracle(a.values(), b.values(), 2, 2, 2);
    for (int i = 0; i < 4; ++i) CHECK(y2.values()[static_cast<std::size_t>(i)] == expect[static_cast<std::size_t>(i)]);
    CHECK(y2.at({0, 0}) == 19.0);
    CHECK(y2.at({0, 1}) == 22.0);
    CHECK(y2.at({1, 0}) == 43.0);
    CHECK(y2.at({1, 1}) == 50.0);
}

TEST_CASE("matmul shape mismatch raises with both shapes in message") {
    Graph g;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        g.matmul(a, b);
        FAIL("expected ShapeMismatch");
    } catch (const ShapeMismatch& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
}

TEST_CASE("matmul broadcasts weights over leading batch dims") {
    Graph g;
    Rng rng(7);
    Tensor x = random_tensor({3, 4, 5}, rng);
    Tensor w = random_tensor({5, 2}, rng);
    Tensor y = g.matmul(x, w);
    REQUIRE(y.shape() == Shape{3, 4, 2});
    // spot-check one batch against the oracle
    for (int n = 0; n < 3; ++n) {
        std::vector<double> xa(x.data() + n * 20, x.data() + (n + 1) * 20);
        const auto expect = matmul_oracle(xa, w.values(), 4, 5, 2);
        for (int i = 0; i < 8; ++i) {
            CHECK(y.values()[static_cast<std::size_t>(n * 8 + i)] ==
                  doctest::Approx(expect[static_cast<std::size_t>(i)]).epsilon(1e-14));
        }
    }
}

TEST_CASE("activation closed-form points") {
    Graph g;
    Tensor z = Tensor::scalar(0.0);
    CHECK(g.silu(z).item() == 0.0);
    CHECK(g.gelu(z).item() == 0.0);
    CHECK(g.softplus(z).item() == doctest::Approx(0.6931471805599453).epsilon(1e-15));
    CHECK(g.exp(z).item() == 1.0);
    CHECK(g.tanh(z).item() == 0.0);
}

TEST_CASE("layernorm basics") {
    Graph g;
    Tensor gain = Tensor::from_data({3}, {1, 1, 1});
    Tensor bias = Tensor::from_data({3}, {0, 0, 0});

    // constant row: zero variance is absorbed by eps, output all zeros
    Tensor c = Tensor::from_data({1, 3}, {5, 5, 5});
    Tensor y = g.layernorm(c, gain, bias, 1e-5);
    for (double v : y.values()) CHECK(v == 0.0);

    // [1,-1] already has mean 0 and population std 1
    Tensor gain2 = Tensor::from_data({2}, {1, 1});
    Tensor bias2 = Tensor::from_data({2}, {0, 0});
    Tensor x = Tensor::from_data({1, 2}, {1, -1});
    Tensor y2 = g.layernorm(x, gain2, bias2, 1e-12);
    CHECK(y2.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(y2.at({0, 1}) == doctest::Approx(-1.0).epsilon(1e-9));

    // constant input with bias b comes out as exactly b
    Tensor bias3 = Tensor::from_data({3}, {2.5, -1.0, 0.25});
    Tensor y3 = g.layernorm(c, gain, bias3, 1e-5);
    CHECK(y3.at({0, 0}) == 2.5);
    CHECK(y3.at({0, 1}) == -1.0);
    CHECK(y3.at({0, 2}) == 0.25);
}

TEST_CASE("softmax family") {
    Graph g;
    Tensor c = Tensor::from_data({3}, {4.2, 4.2, 4.2});
    Tensor s = g.softmax(c);
    for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Tensor z = Tensor::from_data({2}, {0, 0});
    Tensor ls = g.logsoftmax(z);
    for (double v : ls.values()) CHECK(v == doctest::Approx(-0.6931471805599453).epsilon(1e-15));

    // argmax preserved
    Rng rng(3);
    Tensor x = random_tensor({8}, rng, 2.0);
    Tensor sm = g.softmax(x);
    std::int64_t am_in = 0, am_out = 0;
    for (std::int64_t i = 1; i < 8; ++i) {
        if (x.values()[static_cast<std::size_t>(i)] > x.values()[static_cast<std::size_t>(am_in)]) am_in = i;
        if (sm.values()[static_cast<std::size_t>(i)] > sm.values()[static_cast<std::size_t>(am_out)]) am_out = i;
    }
    CHECK(am_in == am_out);
    double total = 0.0;
    for (double v : sm.values()) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("structural ops") {
    Graph g;
    Rng rng(11);
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor ff = g.flip_last_dim(g.flip_last_dim(x));
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(ff.values()[static_cast<std::size_t>(i)] == x.values()[static_cast<std::size_t>(i)]);

    Tensor a = random_tensor({2, 1, 4}, rng);
    Tensor b = random_tensor({2, 1, 4}, rng);
    Tensor cat = g.concat_dim1(a, b);
    REQUIRE(cat.shape() == Shape{2, 2, 4});
    CHECK(cat.at({1, 0, 2}) == a.at({1, 0, 2}));
    CHECK(cat.at({1, 1, 2}) == b.at({1, 0, 2}));

    Tensor v = Tensor::from_data({2}, {3, 4});
    CHECK(g.l2norm_last_dim(v).item() == 5.0);

    // slice_dim1 picks the stated window
    Tensor s = g.slice_dim1(cat, 1, 1);
    REQUIRE(s.shape() == Shape{2, 1, 4});
    CHECK(s.at({0, 0, 1}) == b.at({0, 0, 1}));

    CHECK_THROWS_AS(g.concat_dim1(a, random_tensor({2, 1, 5}, rng)), ShapeMismatch);
}

TEST_CASE("dropout is bit-deterministic given seed") {
    Rng rng(5);
    Tensor x = random_tensor({4, 8}, rng);
    Graph g1, g2;
    Tensor y1 = g1.dropout(x, 0.4, 1234, true);
    Tensor y2 = g2.dropout(x, 0.4, 1234, true);
    for (std::int64_t i = 0; i < x.size(); ++i) {
        CHECK(y1.values()[static_cast<std::size_t>(i)] == y2.values()[static_cast<std::size_t>(i)]);
    }
    // different seed gives a different mask
    Graph g3;
    Tensor y3 = g3.dropout(x, 0.4, 99, true);
    bool any_diff = false;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        if (y3.values()[static_cast<std::size_t>(i)] != y1.values()[static_cast<std::size_t>(i)]) any_diff = true;
    }
    CHECK(any_diff);
    // eval mode is the identity
    Graph g4;
    Tensor y4 = g4.dropout(x, 0.4, 1234, false);
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y4.values()[static_cast<std::size_t>(i)] == x.values()[static_cast<std::size_t>(i)]);
}

TEST_CASE("backward: square, matmul-sum, unused leaf") {
    {
        Graph g;
        Tensor x = Tensor::scalar(3.0, true);
        Tensor loss = g.mul(x, x);
        g.backward(loss);
        CHECK(x.grad()[0] == 6.0);
    }
    {
        // loss = sum(A.B) = mean * numel; dA = ones * B^T
        Graph g;
        Rng rng(21);
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Tensor y = g.matmul(a, b);
        Tensor loss = g.scale(g.mean(y), 6.0);  // sum = mean * 6 elements
        g.backward(loss);
        for (int m = 0; m < 3; ++m) {
            for (int k = 0; k < 4; ++k) {
                double expect = 0.0;
                for (int p = 0; p < 2; ++p) expect += b.at({k, p});
                CHECK(a.grad()[static_cast<std::size_t>(m * 4 + k)] == doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }
    {
        Graph g;
        Tensor x = Tensor::scalar(3.0, true);
        Tensor unused = Tensor::scalar(7.0, true);
        Tensor loss = g.mul(x, x);
        g.backward(loss);
        CHECK(unused.grad()[0] == 0.0);
    }
}

TEST_CASE("backward rejects non-scalar loss") {
    Graph g;
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = g.scale(x, 2.0);
    CHECK_THROWS_AS(g.backward(y), NonScalarLoss);
}

TEST_CASE("backward is linear in upstream gradient") {
    Rng rng(31);
    Tensor x0 = random_tensor({3, 5}, rng);
    auto run = [&](double upstream) {
        Tensor x = x0.clone();
        x.set_requires_grad(true);
        Graph g;
        Tensor loss = g.mean(g.gelu(g.matmul(x, g.transpose_last2(x))));
        g.backward(loss, upstream);
        return x.grad();
    };
    const auto g1 = run(1.0);
    const auto g2 = run(2.0);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == 2.0 * g1[i]);
}

TEST_CASE("grad_check: linear map is exact, composite is tight") {
    Rng rng(41);
    {
        Tensor x = random_tensor({4}, rng);
        Tensor w = random_tensor({4}, rng);
        auto f = [w](Graph& g, std::vector<Tensor>& leaves) {
            return g.mean(g.mul(leaves[0], w));
        };
        CHECK(grad_check(f, {x}, 1e-6) < 1e-10);
    }
    {
        Tensor x = random_tensor({2, 3}, rng);
        Tensor w = random_tensor({3, 3}, rng);
        auto f = [](Graph& g, std::vector<Tensor>& leaves) {
            return g.mean(g.gelu(g.matmul(leaves[0], leaves[1])));
        };
        CHECK(grad_check(f, {x, w}, 1e-6) < 1e-5);
    }
}

TEST_CASE("grad_check flags a non-deterministic builder") {
    Rng rng(43);
    Tensor x = random_tensor({6}, rng);
    int call = 0;
    auto f = [&call](Graph& g, std::vector<Tensor>& leaves) {
        // unseeded-style misuse: a different dropout mask on every call
        return g.mean(g.dropout(leaves[0], 0.5, static_cast<std::uint64_t>(call++), true));
    };
    CHECK(grad_check(f, {x}, 1e-6) > 1e-3);
}

TEST_CASE("gradient suite: every op passes grad_check on 20 random seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed * 977 + 13);
        Tensor x = random_tensor({2, 3, 4}, rng);
        Tensor w = random_tensor({4, 4}, rng);
        Tensor gain = random_tensor({4}, rng, 0.5);
        Tensor bias = random_tensor({4}, rng, 0.5);
        Tensor other = random_tensor({2, 3, 4}, rng);
        Tensor probe = random_tensor({2, 3, 4}, rng);  // fixed weights making the loss non-uniform

        auto with_probe = [probe](Graph& g, Tensor t) { return g.mean(g.mul(t, probe)); };

        std::vector<std::pair<const char*, std::function<Tensor(Graph&, std::vector<Tensor>&)>>> cases;
        cases.emplace_back("matmul", [&](Graph& g, std::vector<Tensor>& l) {
            return with_probe(g, g.matmul(l[0], l[1]));
        });
        cases.emplace_back("gelu", [&](Graph& g, std::vector<Tensor>& l) { return with_probe(g, g.gelu(l[0])); });
        cases.emplace_back("silu", [&](Graph& g, std::vector<Tensor>& l) { return with_probe(g, g.silu(l[0])); });
        cases.emplace_back("softplus", [&](Graph& g, std::vector<Tensor>& l) { return with_probe(g, g.softplus(l[0])); });
        cases.emplace_back("exp", [&](Graph& g, std::vector<Tensor>& l) { return with_probe(g, g.exp(l[0])); });
        cases.emplace_back("tanh", [&](Graph& g, std::vector<Tensor>& l) { return with_probe(g, g.tanh(l[0])); });
        cases.emplace_back("layernorm", [&](Graph& g, std::vector<Tensor>& l) {
            return with_probe(g, g.layernorm(l[0], l[2], l[3]));
        });
        cases.emplace_back("softmax", [&](Graph& g, std::vector<Tensor>& l) { return with_probe(g, g.softmax(l[0])); });
        cases.emplace_back("logsoftmax", [&](Graph& g, std::vector<Tensor>& l) {
            return with_probe(g, g.logsoftmax(l[0]));
        });
        cases.emplace_back("flip", [&](Graph& g, std::vector<Tensor>& l) {
            return with_probe(g, g.flip_last_dim(l[0]));
        });
        cases.emplace_back("concat+slice", [&](Graph& g, std::vector<Tensor>& l) {
            Tensor cat = g.concat_dim1(l[0], l[4]);
            return g.mean(g.mul(g.slice_dim1(cat, 2, 3), g.slice_dim1(cat, 1, 3)));
        });
        cases.emplace_back("add*mul", [&](Graph& g, std::vector<Tensor>& l) {
            return g.mean(g.mul(g.add(l[0], l[4]), l[0]));
        });
        cases.emplace_back("bias-broadcast", [&](Graph& g, std::vector<Tensor>& l) {
            return with_probe(g, g.add(l[0], l[3]));
        });
        cases.emplace_back("l2norm", [&](Graph& g, std::vector<Tensor>& l) {
            return g.mean(g.l2norm_last_dim(l[0]));
        });
        cases.emplace_back("row_normalize", [&](Graph& g, std::vector<Tensor>& l) {
            return with_probe(g, g.row_normalize(l[0]));
        });
        cases.emplace_back("sum_last+scale", [&](Graph& g, std::vector<Tensor>& l) {
            return g.mean(g.scale(g.sum_last_dim(l[0]), 0.7, 0.1));
        });
        cases.emplace_back("transpose+reshape", [&](Graph& g, std::vector<Tensor>& l) {
            return g.mean(g.mul(g.reshape(g.transpose_last2(l[0]), {2, 12}), g.reshape(l[4], {2, 12})));
        });
        cases.emplace_back("dropout", [&](Graph& g, std::vector<Tensor>& l) {
            return with_probe(g, g.dropout(l[0], 0.3, 777, true));
        });

        std::vector<Tensor> leaves = {x, w, gain, bias, other};
        for (auto& [name, f] : cases) {
            std::vector<Tensor> fresh;
            fresh.reserve(leaves.size());
            for (auto& t : leaves) fresh.push_back(t.clone());
            const double err = grad_check(f, fresh, 1e-6);
            INFO("op=" << name << " seed=" << seed);
            CHECK(err < 1e-5);
        }
    }
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::from_data({2}, {1.0, std::nan("")}), NonFiniteValue);
    CHECK_THROWS_AS(Tensor::from_data({3}, {1.0, 2.0}), ShapeMismatch);
    Tensor t = Tensor::zeros({2, 2});
    CHECK(t.size() == 4);
    CHECK(t.grad().size() == 4);  // grad matches data shape
}
