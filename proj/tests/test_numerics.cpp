#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cacheproc/gradcheck.h"
#include "cacheproc/ops.h"
#include "cacheproc/rng.h"
#include "cacheproc/tape.h"
#include "cacheproc/tensor.h"

using namespace cacheproc;
namespace op = cacheproc::ops;

TEST_CASE("matmul against identity") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor c = op::matmul(a, eye);
    for (size_t i = 0; i < 4; ++i) CHECK(c.at(i) == doctest::Approx(a.at(i)));
}

TEST_CASE("matmul matches naive triple loop on random inputs") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t m = 1 + rng.uniform_u64(6), k = 1 + rng.uniform_u64(6),
                     n = 1 + rng.uniform_u64(6);
        Tensor a = Tensor::randn({m, k}, rng, 1.0, DType::F64);
        Tensor b = Tensor::randn({k, n}, rng, 1.0, DType::F64);
        Tensor c = op::matmul(a, b);
        for (size_t i = 0; i < m; ++i) {
            for (size_t j = 0; j < n; ++j) {
                double acc = 0;
                for (size_t q = 0; q < k; ++q) acc += a.at2(i, q) * b.at2(q, j);
                CHECK(c.at2(i, j) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("row softmax of a constant row is uniform") {
    Tensor x = Tensor::from_data({1, 3}, {0, 0, 0});
    Tensor y = op::row_softmax(x);
    for (size_t j = 0; j < 3; ++j) CHECK(y.at(j) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(11);
    Tensor x = Tensor::randn({5, 9}, rng, 3.0);
    Tensor y = op::row_softmax(x);
    for (size_t r = 0; r < 5; ++r) {
        double s = 0;
        for (size_t j = 0; j < 9; ++j) s += y.at2(r, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("logistic value at -4") {
    Tensor g = Tensor::scalar(-4.0, DType::F64);
    Tensor s = op::sigmoid(g);
    CHECK(std::fabs(s.item() - 0.01799) < 1e-5);
}

TEST_CASE("shape mismatch error names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    try {
        op::add(a, b);
        FAIL("expected an exception");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("non-finite output raises naming the op") {
    Tensor a = Tensor::from_data({1}, {1e38});
    Tensor b = Tensor::from_data({1}, {1e38});
    try {
        Tensor c = op::mul(a, b);  // overflows f32
        FAIL("expected an exception");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("backward of sum(W x) has outer-product structure") {
    // loss = sum(W x) => dL/dW[i][j] = x[j], dL/dx[j] = sum_i W[i][j]
    Rng rng(3);
    Tensor w = Tensor::randn({3, 4}, rng, 1.0, DType::F64).set_requires_grad(true);
    Tensor x = Tensor::randn({4, 1}, rng, 1.0, DType::F64).set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = op::sum(op::matmul(w, x));
        tape.backward(loss);
    }
    for (size_t i = 0; i < 3; ++i)
        for (size_t j = 0; j < 4; ++j)
            CHECK(w.grad_at(i * 4 + j) == doctest::Approx(x.at(j)).epsilon(1e-12));
    for (size_t j = 0; j < 4; ++j) {
        double col = 0;
        for (size_t i = 0; i < 3; ++i) col += w.at2(i, j);
        CHECK(x.grad_at(j) == doctest::Approx(col).epsilon(1e-12));
    }
}

TEST_CASE("leaf not on the loss path gets exactly zero grad") {
    Tensor p = Tensor::scalar(2.0, DType::F64).set_requires_grad(true);
    Tensor q = Tensor::scalar(3.0, DType::F64).set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor unused = op::scale(q, 2.0);  // on the tape, off the loss path
        Tensor loss = op::mul(p, p);
        tape.backward(loss);
    }
    CHECK(p.grad_at(0) == doctest::Approx(4.0));
    CHECK(q.has_grad());
    CHECK(q.grad_at(0) == 0.0);
}

TEST_CASE("gate derivative: d(sigma(g)*c)/dg = c*sigma*(1-sigma)") {
    const double g0 = 0.3, c0 = 2.5;
    Tensor g = Tensor::scalar(g0, DType::F64).set_requires_grad(true);
    Tensor c = Tensor::scalar(c0, DType::F64);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = op::mul(op::sigmoid(g), c);
        tape.backward(loss);
    }
    const double s = 1.0 / (1.0 + std::exp(-g0));
    CHECK(g.grad_at(0) == doctest::Approx(c0 * s * (1 - s)).epsilon(1e-12));
}

TEST_CASE("backward on non-scalar loss is an error") {
    Tensor x = Tensor::zeros({2, 2}, DType::F64).set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = op::scale(x, 2.0);
    CHECK_THROWS(tape.backward(y));
}

TEST_CASE("double backward without reset is an error") {
    Tensor x = Tensor::scalar(1.0, DType::F64).set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = op::mul(x, x);
        tape.backward(loss);
        CHECK_THROWS(tape.backward(loss));
        tape.reset();
    }
    {
        TapeScope scope(tape);
        Tensor loss = op::mul(x, x);
        tape.backward(loss);  // fine after reset
    }
}

TEST_CASE("backward visits each node exactly once") {
    Tensor x = Tensor::scalar(1.5, DType::F64).set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = op::mul(x, x);
        Tensor z = op::add(y, x);
        Tensor loss = op::sum(z);
        tape.backward(loss);
    }
    CHECK(tape.last_backward_visits() == tape.size());
    CHECK(tape.size() == 3);
}

TEST_CASE("gradient accumulation is linear over summed losses") {
    Rng rng(17);
    Tensor w = Tensor::randn({4, 4}, rng, 1.0, DType::F64).set_requires_grad(true);
    Tensor a = Tensor::randn({4, 1}, rng, 1.0, DType::F64);
    Tensor b = Tensor::randn({4, 1}, rng, 1.0, DType::F64);

    auto grads_for = [&](bool first, bool second) {
        w.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        std::vector<Tensor> losses;
        if (first) losses.push_back(op::sum(op::matmul(w, a)));
        if (second) losses.push_back(op::sum(op::silu(op::matmul(w, b))));
        Tensor total = losses.size() == 1 ? losses[0] : op::add(losses[0], losses[1]);
        tape.backward(total);
        std::vector<double> g(w.numel());
        for (size_t i = 0; i < g.size(); ++i) g[i] = w.grad_at(i);
        return g;
    };

    auto g1 = grads_for(true, false);
    auto g2 = grads_for(false, true);
    auto g12 = grads_for(true, true);
    for (size_t i = 0; i < g12.size(); ++i)
        CHECK(g12[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
}

TEST_CASE("detach blocks upstream gradient exactly") {
    Tensor x = Tensor::scalar(2.0, DType::F64).set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = op::mul(x, x);
        Tensor z = op::detach(y);
        Tensor loss = op::mul(z, z);
        // x -> y is on the tape but the loss path was severed by detach.
        Tensor combined = op::add(loss, op::scale(y, 0.0));
        tape.backward(combined);
    }
    CHECK(x.grad_at(0) == 0.0);
}

TEST_CASE("finite differences on a quadratic") {
    Tensor w = Tensor::scalar(3.0, DType::F64).set_requires_grad(true);
    const double err =
        finite_diff_check([&] { return op::mul(w, w); }, {w}, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("finite differences on a linear map are near machine exact") {
    Rng rng(5);
    Tensor w = Tensor::randn({3, 3}, rng, 1.0, DType::F64).set_requires_grad(true);
    Tensor x = Tensor::randn({3, 1}, rng, 1.0, DType::F64);
    const double err =
        finite_diff_check([&] { return op::sum(op::matmul(w, x)); }, {w}, 1e-5);
    CHECK(err < 1e-9);
}

TEST_CASE("finite_diff_check rejects a non-deterministic function") {
    Tensor w = Tensor::scalar(1.0, DType::F64).set_requires_grad(true);
    int calls = 0;
    auto f = [&] {
        ++calls;
        return op::scale(w, static_cast<double>(calls));
    };
    CHECK_THROWS(finite_diff_check(f, {w}));
}

// Every primitive's analytic gradient vs central differences, randomized.
TEST_CASE("per-primitive gradient fidelity (100 randomized trials)") {
    Rng rng(29);
    int trials = 0;
    double worst = 0.0;

    auto run = [&](const std::function<Tensor()>& f, const std::vector<Tensor>& params) {
        const double err = finite_diff_check(f, params, 1e-6);
        worst = std::max(worst, err);
        CHECK(err < 1e-6);
        ++trials;
    };

    for (int rep = 0; rep < 5; ++rep) {
        const size_t m = 2 + rng.uniform_u64(3), n = 2 + rng.uniform_u64(3);
        auto mk = [&](std::vector<size_t> shape) {
            return Tensor::randn(shape, rng, 1.0, DType::F64).set_requires_grad(true);
        };

        {
            Tensor a = mk({m, n}), b = mk({m, n});
            run([&] { return op::sum(op::add(a, b)); }, {a, b});
            run([&] { return op::sum(op::sub(a, b)); }, {a, b});
            run([&] { return op::sum(op::mul(a, b)); }, {a, b});
            run([&] { return op::sum(op::scale(a, 1.7)); }, {a});
        }
        {
            Tensor a = mk({m, n}), b = mk({n, m});
            run([&] { return op::sum(op::matmul(a, b)); }, {a, b});
            run([&] { return op::sum(op::transpose(a)); }, {a});
        }
        {
            Tensor a = mk({m, n});
            Tensor probe = Tensor::randn({m, n}, rng, 1.0, DType::F64);
            run([&] { return op::sum(op::mul(op::row_softmax(a), probe)); }, {a});
            run([&] { return op::sum(op::silu(a)); }, {a});
            run([&] { return op::sum(op::sigmoid(a)); }, {a});
            run([&] { return op::mean(a); }, {a});
        }
        {
            Tensor x = mk({m, n});
            Tensor gain = mk({n});
            Tensor probe = Tensor::randn({m, n}, rng, 1.0, DType::F64);
            run([&] { return op::sum(op::mul(op::rms_norm(x, gain), probe)); }, {x, gain});
        }
        {
            Tensor a = mk({m, n}), b = mk({m, n});
            run([&] { return op::sum(op::concat_rows({a, b})); }, {a, b});
            run([&] { return op::sum(op::concat_cols({a, b})); }, {a, b});
            run([&] { return op::sum(op::slice_rows(a, 0, 1)); }, {a});
            run([&] { return op::sum(op::slice_cols(a, 1, n)); }, {a});
            run([&] { return op::sum(op::reshape(a, {n, m})); }, {a});
        }
        {
            Tensor a = mk({4, n});
            Tensor rows = mk({2, n});
            std::vector<size_t> gidx{1, 1, 3};  // duplicates exercise accumulation
            std::vector<size_t> sidx{0, 2};
            run([&] { return op::sum(op::gather_rows(a, gidx)); }, {a});
            run([&] { return op::sum(op::mul(op::scatter_rows(a, sidx, rows),
                                             op::scatter_rows(a, sidx, rows))); },
                {a, rows});
        }
        {
            Tensor table = mk({5, n});
            std::vector<int> ids{0, 3, 3, 1};
            run([&] { return op::sum(op::embedding(table, ids)); }, {table});
        }
        {
            Tensor q = mk({m, 4});  // one head, dim 4
            run([&] { return op::sum(op::rope(q, 2, 1, 10000.0)); }, {q});
        }
        {
            Tensor logits = mk({m, 5});
            std::vector<int> targets;
            for (size_t i = 0; i < m; ++i)
                targets.push_back(static_cast<int>(rng.uniform_u64(5)));
            run([&] { return op::mean(op::cross_entropy_with_logits(logits, targets)); },
                {logits});
        }
        {
            Tensor a = mk({m, n});
            Tensor s = mk({1});
            run([&] { return op::sum(op::scale_by(a, s)); }, {a, s});
        }
    }
    CHECK(trials >= 100);
    INFO("worst relative error ", worst);
}

TEST_CASE("scatter_rows rejects duplicate and misaligned indices") {
    Tensor x = Tensor::zeros({4, 2});
    Tensor rows = Tensor::zeros({2, 2});
    CHECK_THROWS(op::scatter_rows(x, {1, 1}, rows));
    CHECK_THROWS(op::scatter_rows(x, {0, 1, 2}, rows));
}

TEST_CASE("argmax tie-break picks the lowest index") {
    Tensor t = Tensor::from_data({1, 4}, {0.5, 0.9, 0.9, 0.1});
    CHECK(op::argmax_row(t, 0) == 1);
    Tensor u = Tensor::from_data({1, 3}, {2.0, 2.0, 2.0});
    CHECK(op::argmax_row(u, 0) == 0);
}

TEST_CASE("f32/f64 dtype mixing is an error") {
    Tensor a = Tensor::zeros({2}, DType::F32);
    Tensor b = Tensor::zeros({2}, DType::F64);
    CHECK_THROWS(op::add(a, b));
}
