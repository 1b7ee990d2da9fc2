#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "diffret/rng.hpp"
#include "diffret/tensor.hpp"

using diffret::Rng;
using diffret::ad::NodeId;
using diffret::ad::Tape;
using diffret::ad::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.gaussian() * scale;
    return t;
}

// Central-difference check of d(sum_sq(f(x)))/dx against backprop.
void gradcheck(const Tensor& x0, const std::function<NodeId(Tape&, NodeId)>& f,
               double h = 1e-6, double tol = 1e-6) {
    Tape tape;
    NodeId x = tape.input(x0, true);
    NodeId loss = tape.sum_sq(f(tape, x));
    tape.backward(loss);
    Tensor g = tape.grad_of(x);

    auto eval = [&](const Tensor& xv) {
        Tape t2;
        NodeId xn = t2.input(xv, false);
        return t2.val(t2.sum_sq(f(t2, xn))).data[0];
    };

    for (int64_t i = 0; i < x0.numel(); ++i) {
        Tensor xp = x0, xm = x0;
        xp.data[i] += h;
        xm.data[i] -= h;
        double fd = (eval(xp) - eval(xm)) / (2.0 * h);
        double denom = std::max({std::fabs(fd), std::fabs(g.data[i]), 1.0});
        CHECK(std::fabs(fd - g.data[i]) / denom < tol);
    }
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    Rng rng(42);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);

    gradcheck(a, [&](Tape& t, NodeId x) { return t.add_const(x, b); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.mul_const(x, b); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.scale(x, -1.7); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.add_scalar(x, 0.3); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.exp(t.scale(x, 0.5)); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.silu(x); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.mul(x, t.add_scalar(x, 1.0)); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.sub(t.scale(x, 2.0), x); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.add(x, t.silu(x)); });
}

TEST_CASE("relu gradient away from kink") {
    Tensor a({4}, {0.5, -0.7, 1.2, -0.1});
    gradcheck(a, [&](Tape& t, NodeId x) { return t.relu(x); });
}

TEST_CASE("shape op gradients") {
    Rng rng(7);
    Tensor a = random_tensor({2, 6}, rng);
    Tensor b = random_tensor({2, 4}, rng);
    Tensor c = random_tensor({1, 2, 2, 3}, rng);

    gradcheck(a, [&](Tape& t, NodeId x) { return t.reshape(x, {3, 4}); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.slice_last(x, 1, 3); });
    gradcheck(a, [&](Tape& t, NodeId x) { return t.concat_last(x, t.input(b, false)); });
    gradcheck(b, [&](Tape& t, NodeId x) { return t.concat_last(t.input(a, false), x); });
    gradcheck(c, [&](Tape& t, NodeId x) { return t.tile_batch(x, 3); });
}

TEST_CASE("tile_batch replicates the leading unit axis") {
    Rng rng(43);
    Tensor c = random_tensor({1, 2, 2, 2}, rng);
    Tape t;
    NodeId x = t.input(c, false);
    const Tensor& out = t.val(t.tile_batch(x, 4));
    CHECK(out.shape == std::vector<int>{4, 2, 2, 2});
    for (int k = 0; k < 4; ++k)
        for (int64_t i = 0; i < c.numel(); ++i) CHECK(out.data[k * c.numel() + i] == c.data[i]);
}

TEST_CASE("linear and matmul gradients") {
    Rng rng(11);
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor bias = random_tensor({5}, rng);
    Tensor m2 = random_tensor({6, 4}, rng);
    Tensor m3 = random_tensor({4, 6}, rng);

    gradcheck(x, [&](Tape& t, NodeId n) { return t.linear(n, w, bias); });
    gradcheck(x, [&](Tape& t, NodeId n) { return t.matmul_nt(n, t.input(m2, false)); });
    gradcheck(m2, [&](Tape& t, NodeId n) { return t.matmul_nt(t.input(x, false), n); });
    gradcheck(x, [&](Tape& t, NodeId n) { return t.matmul_nn(n, t.input(m3, false)); });
    gradcheck(m3, [&](Tape& t, NodeId n) { return t.matmul_nn(t.input(x, false), n); });
}

TEST_CASE("softmax gradient") {
    Rng rng(13);
    Tensor x = random_tensor({3, 5}, rng);
    gradcheck(x, [&](Tape& t, NodeId n) { return t.softmax_last(n); });
}

TEST_CASE("conv2d gradient, strides and padding") {
    Rng rng(17);
    Tensor x = random_tensor({2, 5, 6, 3}, rng);
    Tensor w1 = random_tensor({3, 3, 3, 4}, rng, 0.5);
    Tensor b1 = random_tensor({4}, rng, 0.1);
    Tensor w2 = random_tensor({1, 1, 3, 2}, rng);

    gradcheck(x, [&](Tape& t, NodeId n) { return t.conv2d(n, w1, b1, 1, 1); });
    gradcheck(x, [&](Tape& t, NodeId n) { return t.conv2d(n, w1, b1, 2, 1); });
    gradcheck(x, [&](Tape& t, NodeId n) { return t.conv2d(n, w2, Tensor{}, 1, 0); });
}

TEST_CASE("group_norm gradient") {
    Rng rng(19);
    Tensor x = random_tensor({2, 3, 3, 4}, rng);
    gradcheck(x, [&](Tape& t, NodeId n) { return t.group_norm(n, 2); }, 1e-6, 1e-5);
    gradcheck(x, [&](Tape& t, NodeId n) { return t.group_norm(n, 4); }, 1e-6, 1e-5);
}

TEST_CASE("upsample and pooling gradients") {
    Rng rng(23);
    Tensor x = random_tensor({2, 3, 4, 3}, rng);
    Tensor bias = random_tensor({3}, rng);
    gradcheck(x, [&](Tape& t, NodeId n) { return t.upsample2x(n); });
    gradcheck(x, [&](Tape& t, NodeId n) { return t.add_channel_bias(n, bias); });
    // max-pool argmax must be stable under the probe step
    gradcheck(x, [&](Tape& t, NodeId n) { return t.global_max_pool(n); }, 1e-8);
}

TEST_CASE("reduction and vector op gradients") {
    Rng rng(29);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor v = random_tensor({6}, rng);
    Tensor u = random_tensor({6}, rng);

    gradcheck(x, [&](Tape& t, NodeId n) { return t.mean_batch(n); });
    gradcheck(v, [&](Tape& t, NodeId n) { return t.l2_normalize(n); });
    gradcheck(x, [&](Tape& t, NodeId n) { return t.l2_normalize(n); });
    gradcheck(v, [&](Tape& t, NodeId n) { return t.euclidean(n, t.input(u, false)); });
    gradcheck(u, [&](Tape& t, NodeId n) { return t.euclidean(t.input(v, false), n); });
    gradcheck(v, [&](Tape& t, NodeId n) {
        return t.mean_list({n, t.scale(n, 2.0), t.input(u, false)});
    });
}

TEST_CASE("gradients accumulate across shared subexpressions") {
    Rng rng(31);
    Tensor v = random_tensor({5}, rng);
    gradcheck(v, [&](Tape& t, NodeId n) {
        NodeId s = t.silu(n);
        return t.add(t.mul(s, s), t.scale(s, 0.5));
    });
}

TEST_CASE("no-grad path records no backward work") {
    Rng rng(37);
    Tensor v = random_tensor({4}, rng);
    Tape t;
    NodeId x = t.input(v, false);
    NodeId y = t.sum_sq(t.silu(x));
    CHECK_FALSE(t.needs_grad(y));
}

TEST_CASE("frozen weights never receive gradients") {
    // weights enter ops by const reference, not as tape nodes; the only
    // differentiable surface is the input leaf
    Rng rng(41);
    Tensor x = random_tensor({1, 4, 4, 2}, rng);
    Tensor w = random_tensor({3, 3, 2, 2}, rng);
    uint64_t before = diffret::ad::checksum(w);
    Tape t;
    NodeId n = t.input(x, true);
    NodeId loss = t.sum_sq(t.conv2d(n, w, Tensor{}, 1, 1));
    t.backward(loss);
    CHECK(diffret::ad::checksum(w) == before);
}
