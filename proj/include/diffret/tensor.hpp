#pragma once

#include <cstdint>
#include <functional>
#include <vector>

namespace diffret::ad {

// Dense row-major double tensor. Axis meanings are contextual:
// feature maps are {n, h, w, c}, matrices {rows, cols}, vectors {len}.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool empty() const { return data.empty(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    std::vector<float> to_f32() const {
        std::vector<float> out(data.size());
        for (size_t i = 0; i < data.size(); ++i) out[i] = static_cast<float>(data[i]);
        return out;
    }
    static Tensor from_f32(std::vector<int> s, const std::vector<float>& d) {
        Tensor t(std::move(s));
        for (size_t i = 0; i < d.size(); ++i) t.data[i] = d[i];
        return t;
    }
};

uint64_t checksum(const Tensor& t);

using NodeId = int32_t;

// Reverse-mode tape. Ops evaluate eagerly and record a backward closure when
// any operand requires gradients; weight tensors passed by const reference
// stay outside the tape, so frozen parameters can never receive gradients.
class Tape {
public:
    NodeId input(Tensor value, bool requires_grad = false);

    const Tensor& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].val; }
    bool needs_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    // Gradient of the last backward() root w.r.t. node id (zeros if unreached).
    Tensor grad_of(NodeId id) const;

    // elementwise
    NodeId add(NodeId a, NodeId b);
    NodeId add_const(NodeId a, const Tensor& b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId mul_const(NodeId a, const Tensor& b);
    NodeId scale(NodeId a, double s);
    NodeId add_scalar(NodeId a, double s);
    NodeId exp(NodeId a);
    NodeId relu(NodeId a);
    NodeId silu(NodeId a);

    // shape
    NodeId reshape(NodeId a, std::vector<int> shape);
    NodeId concat_last(NodeId a, NodeId b);
    NodeId slice_last(NodeId a, int start, int len);
    NodeId tile_batch(NodeId a, int k);  // {1,...} -> {k,...}

    // linear algebra; w is a frozen constant and must outlive the tape
    NodeId linear(NodeId x, const Tensor& w, const Tensor& bias);
    NodeId matmul_nt(NodeId a, NodeId b);  // {n,r,k} x {m,k}^T -> {n,r,m}
    NodeId matmul_nn(NodeId a, NodeId b);  // {n,r,k} x {k,m}   -> {n,r,m}
    NodeId softmax_last(NodeId a);

    // spatial ops on {n,h,w,c}; conv weights must outlive the tape
    NodeId conv2d(NodeId x, const Tensor& w, const Tensor& bias, int stride, int pad);
    NodeId group_norm(NodeId x, int groups, double eps = 1e-5);
    NodeId upsample2x(NodeId x);
    NodeId add_channel_bias(NodeId x, const Tensor& bias);
    NodeId global_max_pool(NodeId x);  // -> {n,c}

    // reductions / vector ops
    NodeId mean_batch(NodeId x);                     // {n,c} -> {c}
    NodeId mean_list(const std::vector<NodeId>& xs); // same shapes, elementwise mean
    NodeId l2_normalize(NodeId x, double eps = 1e-12);  // rows over last dim
    NodeId euclidean(NodeId a, NodeId b);            // vectors -> {1}
    NodeId sum_sq(NodeId a);                         // -> {1}

    void backward(NodeId root);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;  // allocated lazily during backward
        bool requires_grad = false;
        std::function<void(Tape&)> back;
    };

    std::vector<Node> nodes_;

    NodeId push(Tensor val, bool requires_grad, std::function<void(Tape&)> back);
    Tensor& grad_ref(NodeId id);
    bool has_grad(NodeId id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

    friend struct TapeOps;
};

}  // namespace diffret::ad
