#include "diffret/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "diffret/errors.hpp"
#include "diffret/rng.hpp"

namespace diffret::ad {

uint64_t checksum(const Tensor& t) {
    uint64_t h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int));
    return fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
}

NodeId Tape::input(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

NodeId Tape::push(Tensor val, bool requires_grad, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(val), Tensor{}, requires_grad, requires_grad ? std::move(back) : nullptr});
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Tape::grad_ref(NodeId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor(n.val.shape);
    return n.grad;
}

Tensor Tape::grad_of(NodeId id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) return Tensor(n.val.shape);
    return n.grad;
}

void Tape::backward(NodeId root) {
    const Tensor& rv = val(root);
    if (rv.numel() != 1) throw ShapeError("backward: root must be scalar");
    grad_ref(root).data[0] = 1.0;
    for (NodeId i = root; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.requires_grad && n.back && !n.grad.empty()) n.back(*this);
    }
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

NodeId Tape::add(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "add");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
    bool rg = needs_grad(a) || needs_grad(b);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, b, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_ref(a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_ref(b);
                for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
            }
        };
    }
    return id;
}

NodeId Tape::add_const(NodeId a, const Tensor& b) {
    const Tensor& av = val(a);
    check_same_shape(av, b, "add_const");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        };
    }
    return id;
}

NodeId Tape::sub(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "sub");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
    bool rg = needs_grad(a) || needs_grad(b);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, b, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_ref(a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_ref(b);
                for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
            }
        };
    }
    return id;
}

NodeId Tape::mul(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "mul");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
    bool rg = needs_grad(a) || needs_grad(b);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, b, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& av2 = t.val(a);
            const Tensor& bv2 = t.val(b);
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_ref(a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_ref(b);
                for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * av2.data[i];
            }
        };
    }
    return id;
}

NodeId Tape::mul_const(NodeId a, const Tensor& b) {
    const Tensor& av = val(a);
    check_same_shape(av, b, "mul_const");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= b.data[i];
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        Tensor bc = b;
        nodes_.back().back = [a, id, bc = std::move(bc)](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bc.data[i];
        };
    }
    return id;
}

NodeId Tape::scale(NodeId a, double s) {
    Tensor out = val(a);
    for (double& v : out.data) v *= s;
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id, s](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * s;
        };
    }
    return id;
}

NodeId Tape::add_scalar(NodeId a, double s) {
    Tensor out = val(a);
    for (double& v : out.data) v += s;
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        };
    }
    return id;
}

NodeId Tape::exp(NodeId a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::exp(v);
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& y = t.val(id);
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * y.data[i];
        };
    }
    return id;
}

NodeId Tape::relu(NodeId a) {
    Tensor out = val(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& x = t.val(a);
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < g.numel(); ++i)
                if (x.data[i] > 0.0) ga.data[i] += g.data[i];
        };
    }
    return id;
}

NodeId Tape::silu(NodeId a) {
    Tensor out = val(a);
    for (double& v : out.data) v = v * sigmoid(v);
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& x = t.val(a);
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                double s = sigmoid(x.data[i]);
                ga.data[i] += g.data[i] * s * (1.0 + x.data[i] * (1.0 - s));
            }
        };
    }
    return id;
}

NodeId Tape::reshape(NodeId a, std::vector<int> shape) {
    const Tensor& av = val(a);
    if (Tensor::count(shape) != av.numel()) throw ShapeError("reshape: element count mismatch");
    Tensor out(std::move(shape));
    out.data = av.data;
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        };
    }
    return id;
}

NodeId Tape::concat_last(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.ndim() != bv.ndim()) throw ShapeError("concat_last: rank mismatch");
    for (int i = 0; i + 1 < av.ndim(); ++i)
        if (av.dim(i) != bv.dim(i)) throw ShapeError("concat_last: leading dims differ");
    int ca = av.dim(av.ndim() - 1);
    int cb = bv.dim(bv.ndim() - 1);
    std::vector<int> shape = av.shape;
    shape.back() = ca + cb;
    Tensor out(shape);
    int64_t rows = av.numel() / ca;
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.ptr() + r * (ca + cb), av.ptr() + r * ca, sizeof(double) * ca);
        std::memcpy(out.ptr() + r * (ca + cb) + ca, bv.ptr() + r * cb, sizeof(double) * cb);
    }
    bool rg = needs_grad(a) || needs_grad(b);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, b, id, ca, cb, rows](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_ref(a);
                for (int64_t r = 0; r < rows; ++r)
                    for (int i = 0; i < ca; ++i) ga.data[r * ca + i] += g.data[r * (ca + cb) + i];
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_ref(b);
                for (int64_t r = 0; r < rows; ++r)
                    for (int i = 0; i < cb; ++i) gb.data[r * cb + i] += g.data[r * (ca + cb) + ca + i];
            }
        };
    }
    return id;
}

NodeId Tape::slice_last(NodeId a, int start, int len) {
    const Tensor& av = val(a);
    int c = av.dim(av.ndim() - 1);
    if (start < 0 || len <= 0 || start + len > c) throw ShapeError("slice_last: out of range");
    std::vector<int> shape = av.shape;
    shape.back() = len;
    Tensor out(shape);
    int64_t rows = av.numel() / c;
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.ptr() + r * len, av.ptr() + r * c + start, sizeof(double) * len);
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id, start, len, c, rows](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& ga = t.grad_ref(a);
            for (int64_t r = 0; r < rows; ++r)
                for (int i = 0; i < len; ++i) ga.data[r * c + start + i] += g.data[r * len + i];
        };
    }
    return id;
}

NodeId Tape::tile_batch(NodeId a, int k) {
    const Tensor& av = val(a);
    if (av.ndim() < 1 || av.dim(0) != 1) throw ShapeError("tile_batch: leading dim must be 1");
    if (k < 1) throw ShapeError("tile_batch: k must be >= 1");
    std::vector<int> shape = av.shape;
    shape[0] = k;
    Tensor out(shape);
    int64_t block = av.numel();
    for (int i = 0; i < k; ++i)
        std::memcpy(out.ptr() + static_cast<int64_t>(i) * block, av.ptr(), sizeof(double) * block);
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id, k, block](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& ga = t.grad_ref(a);
            for (int i = 0; i < k; ++i) {
                const double* gr = g.ptr() + static_cast<int64_t>(i) * block;
                for (int64_t j = 0; j < block; ++j) ga.data[j] += gr[j];
            }
        };
    }
    return id;
}

NodeId Tape::linear(NodeId x, const Tensor& w, const Tensor& bias) {
    const Tensor& xv = val(x);
    if (w.ndim() != 2) throw ShapeError("linear: weight must be 2-d");
    int k = w.dim(0);
    int m = w.dim(1);
    if (xv.dim(xv.ndim() - 1) != k) throw ShapeError("linear: inner dim mismatch");
    if (!bias.empty() && bias.numel() != m) throw ShapeError("linear: bias dim mismatch");
    std::vector<int> shape = xv.shape;
    shape.back() = m;
    Tensor out(shape);
    int64_t rows = xv.numel() / k;
    for (int64_t r = 0; r < rows; ++r) {
        double* o = out.ptr() + r * m;
        if (!bias.empty()) std::memcpy(o, bias.ptr(), sizeof(double) * m);
        const double* xr = xv.ptr() + r * k;
        for (int kk = 0; kk < k; ++kk) {
            double xvv = xr[kk];
            const double* wr = w.ptr() + static_cast<int64_t>(kk) * m;
            for (int mm = 0; mm < m; ++mm) o[mm] += xvv * wr[mm];
        }
    }
    bool rg = needs_grad(x);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        const Tensor* wp = &w;  // frozen weights outlive the tape
        nodes_.back().back = [x, id, k, m, rows, wp](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& gx = t.grad_ref(x);
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g.ptr() + r * m;
                double* gxr = gx.ptr() + r * k;
                for (int kk = 0; kk < k; ++kk) {
                    const double* wr = wp->ptr() + static_cast<int64_t>(kk) * m;
                    double acc = 0.0;
                    for (int mm = 0; mm < m; ++mm) acc += gr[mm] * wr[mm];
                    gxr[kk] += acc;
                }
            }
        };
    }
    return id;
}

namespace {

// Interprets a as {batch, r, k} where batch collapses all leading axes.
void matmul_dims(const Tensor& a, int& batch, int& r, int& k) {
    if (a.ndim() < 2) throw ShapeError("matmul: operand rank < 2");
    k = a.dim(a.ndim() - 1);
    r = a.dim(a.ndim() - 2);
    batch = static_cast<int>(a.numel() / (static_cast<int64_t>(r) * k));
}

}  // namespace

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (bv.ndim() != 2) throw ShapeError("matmul_nt: rhs must be 2-d");
    int batch, r, k;
    matmul_dims(av, batch, r, k);
    int m = bv.dim(0);
    if (bv.dim(1) != k) throw ShapeError("matmul_nt: inner dim mismatch");
    std::vector<int> shape = av.shape;
    shape.back() = m;
    Tensor out(shape);
    for (int n = 0; n < batch; ++n)
        for (int rr = 0; rr < r; ++rr) {
            const double* ar = av.ptr() + (static_cast<int64_t>(n) * r + rr) * k;
            double* o = out.ptr() + (static_cast<int64_t>(n) * r + rr) * m;
            for (int mm = 0; mm < m; ++mm) {
                const double* br = bv.ptr() + static_cast<int64_t>(mm) * k;
                double acc = 0.0;
                for (int kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
                o[mm] = acc;
            }
        }
    bool rg = needs_grad(a) || needs_grad(b);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, b, id, batch, r, k, m](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& av2 = t.val(a);
            const Tensor& bv2 = t.val(b);
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_ref(a);
                for (int n = 0; n < batch; ++n)
                    for (int rr = 0; rr < r; ++rr) {
                        const double* gr = g.ptr() + (static_cast<int64_t>(n) * r + rr) * m;
                        double* gar = ga.ptr() + (static_cast<int64_t>(n) * r + rr) * k;
                        for (int mm = 0; mm < m; ++mm) {
                            double gv = gr[mm];
                            const double* br = bv2.ptr() + static_cast<int64_t>(mm) * k;
                            for (int kk = 0; kk < k; ++kk) gar[kk] += gv * br[kk];
                        }
                    }
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_ref(b);
                for (int n = 0; n < batch; ++n)
                    for (int rr = 0; rr < r; ++rr) {
                        const double* gr = g.ptr() + (static_cast<int64_t>(n) * r + rr) * m;
                        const double* ar = av2.ptr() + (static_cast<int64_t>(n) * r + rr) * k;
                        for (int mm = 0; mm < m; ++mm) {
                            double gv = gr[mm];
                            double* gbr = gb.ptr() + static_cast<int64_t>(mm) * k;
                            for (int kk = 0; kk < k; ++kk) gbr[kk] += gv * ar[kk];
                        }
                    }
            }
        };
    }
    return id;
}

NodeId Tape::matmul_nn(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (bv.ndim() != 2) throw ShapeError("matmul_nn: rhs must be 2-d");
    int batch, r, k;
    matmul_dims(av, batch, r, k);
    if (bv.dim(0) != k) throw ShapeError("matmul_nn: inner dim mismatch");
    int m = bv.dim(1);
    std::vector<int> shape = av.shape;
    shape.back() = m;
    Tensor out(shape);
    for (int n = 0; n < batch; ++n)
        for (int rr = 0; rr < r; ++rr) {
            const double* ar = av.ptr() + (static_cast<int64_t>(n) * r + rr) * k;
            double* o = out.ptr() + (static_cast<int64_t>(n) * r + rr) * m;
            for (int kk = 0; kk < k; ++kk) {
                double xv = ar[kk];
                const double* br = bv.ptr() + static_cast<int64_t>(kk) * m;
                for (int mm = 0; mm < m; ++mm) o[mm] += xv * br[mm];
            }
        }
    bool rg = needs_grad(a) || needs_grad(b);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, b, id, batch, r, k, m](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& av2 = t.val(a);
            const Tensor& bv2 = t.val(b);
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_ref(a);
                for (int n = 0; n < batch; ++n)
                    for (int rr = 0; rr < r; ++rr) {
                        const double* gr = g.ptr() + (static_cast<int64_t>(n) * r + rr) * m;
                        double* gar = ga.ptr() + (static_cast<int64_t>(n) * r + rr) * k;
                        for (int kk = 0; kk < k; ++kk) {
                            const double* br = bv2.ptr() + static_cast<int64_t>(kk) * m;
                            double acc = 0.0;
                            for (int mm = 0; mm < m; ++mm) acc += gr[mm] * br[mm];
                            gar[kk] += acc;
                        }
                    }
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_ref(b);
                for (int n = 0; n < batch; ++n)
                    for (int rr = 0; rr < r; ++rr) {
                        const double* gr = g.ptr() + (static_cast<int64_t>(n) * r + rr) * m;
                        const double* ar = av2.ptr() + (static_cast<int64_t>(n) * r + rr) * k;
                        for (int kk = 0; kk < k; ++kk) {
                            double xv = ar[kk];
                            double* gbr = gb.ptr() + static_cast<int64_t>(kk) * m;
                            for (int mm = 0; mm < m; ++mm) gbr[mm] += xv * gr[mm];
                        }
                    }
            }
        };
    }
    return id;
}

NodeId Tape::softmax_last(NodeId a) {
    const Tensor& av = val(a);
    int c = av.dim(av.ndim() - 1);
    int64_t rows = av.numel() / c;
    Tensor out = av;
    for (int64_t r = 0; r < rows; ++r) {
        double* o = out.ptr() + r * c;
        double mx = o[0];
        for (int i = 1; i < c; ++i) mx = std::max(mx, o[i]);
        double sum = 0.0;
        for (int i = 0; i < c; ++i) {
            o[i] = std::exp(o[i] - mx);
            sum += o[i];
        }
        double inv = 1.0 / sum;
        for (int i = 0; i < c; ++i) o[i] *= inv;
    }
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id, c, rows](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& y = t.val(id);
            Tensor& ga = t.grad_ref(a);
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g.ptr() + r * c;
                const double* yr = y.ptr() + r * c;
                double dot = 0.0;
                for (int i = 0; i < c; ++i) dot += gr[i] * yr[i];
                double* gar = ga.ptr() + r * c;
                for (int i = 0; i < c; ++i) gar[i] += yr[i] * (gr[i] - dot);
            }
        };
    }
    return id;
}

NodeId Tape::conv2d(NodeId x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    const Tensor& xv = val(x);
    if (xv.ndim() != 4) throw ShapeError("conv2d: input must be {n,h,w,c}");
    if (w.ndim() != 4) throw ShapeError("conv2d: weight must be {kh,kw,ci,co}");
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Ci = xv.dim(3);
    const int kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
    if (w.dim(2) != Ci) throw ShapeError("conv2d: channel mismatch");
    if (!bias.empty() && bias.numel() != co) throw ShapeError("conv2d: bias mismatch");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output");
    Tensor out({N, Ho, Wo, co});
    for (int n = 0; n < N; ++n) {
        const double* xn = xv.ptr() + static_cast<int64_t>(n) * H * W * Ci;
        double* on = out.ptr() + static_cast<int64_t>(n) * Ho * Wo * co;
        for (int yo = 0; yo < Ho; ++yo)
            for (int xo = 0; xo < Wo; ++xo) {
                double* o = on + (static_cast<int64_t>(yo) * Wo + xo) * co;
                if (!bias.empty()) std::memcpy(o, bias.ptr(), sizeof(double) * co);
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = yo * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        int ix = xo * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        const double* xr = xn + (static_cast<int64_t>(iy) * W + ix) * Ci;
                        const double* wr = w.ptr() + (static_cast<int64_t>(ky) * kw + kx) * Ci * co;
                        for (int ci = 0; ci < Ci; ++ci) {
                            double xvv = xr[ci];
                            const double* wc = wr + static_cast<int64_t>(ci) * co;
                            for (int c = 0; c < co; ++c) o[c] += xvv * wc[c];
                        }
                    }
                }
            }
    }
    bool rg = needs_grad(x);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        const Tensor* wp = &w;  // frozen weights outlive the tape
        nodes_.back().back = [x, id, stride, pad, N, H, W, Ci, kh, kw, co, wp](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const int Ho = g.dim(1), Wo = g.dim(2);
            Tensor& gx = t.grad_ref(x);
            for (int n = 0; n < N; ++n) {
                double* gxn = gx.ptr() + static_cast<int64_t>(n) * H * W * Ci;
                const double* gn = g.ptr() + static_cast<int64_t>(n) * Ho * Wo * co;
                for (int yo = 0; yo < Ho; ++yo)
                    for (int xo = 0; xo < Wo; ++xo) {
                        const double* gr = gn + (static_cast<int64_t>(yo) * Wo + xo) * co;
                        for (int ky = 0; ky < kh; ++ky) {
                            int iy = yo * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                int ix = xo * stride + kx - pad;
                                if (ix < 0 || ix >= W) continue;
                                double* gxr = gxn + (static_cast<int64_t>(iy) * W + ix) * Ci;
                                const double* wr = wp->ptr() + (static_cast<int64_t>(ky) * kw + kx) * Ci * co;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    const double* wcc = wr + static_cast<int64_t>(ci) * co;
                                    double acc = 0.0;
                                    for (int c = 0; c < co; ++c) acc += gr[c] * wcc[c];
                                    gxr[ci] += acc;
                                }
                            }
                        }
                    }
            }
        };
    }
    return id;
}

NodeId Tape::group_norm(NodeId x, int groups, double eps) {
    const Tensor& xv = val(x);
    if (xv.ndim() != 4) throw ShapeError("group_norm: input must be {n,h,w,c}");
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const int cg = C / groups;
    const int64_t cnt = static_cast<int64_t>(H) * W * cg;
    Tensor out(xv.shape);
    std::vector<double> inv_std(static_cast<size_t>(N) * groups);
    std::vector<double> means(static_cast<size_t>(N) * groups);
    for (int n = 0; n < N; ++n)
        for (int gi = 0; gi < groups; ++gi) {
            double sum = 0.0, sq = 0.0;
            for (int p = 0; p < H * W; ++p) {
                const double* xr = xv.ptr() + (static_cast<int64_t>(n) * H * W + p) * C + gi * cg;
                for (int c = 0; c < cg; ++c) {
                    sum += xr[c];
                    sq += xr[c] * xr[c];
                }
            }
            double mean = sum / static_cast<double>(cnt);
            double var = sq / static_cast<double>(cnt) - mean * mean;
            double inv = 1.0 / std::sqrt(std::max(var, 0.0) + eps);
            means[static_cast<size_t>(n) * groups + gi] = mean;
            inv_std[static_cast<size_t>(n) * groups + gi] = inv;
            for (int p = 0; p < H * W; ++p) {
                const double* xr = xv.ptr() + (static_cast<int64_t>(n) * H * W + p) * C + gi * cg;
                double* o = out.ptr() + (static_cast<int64_t>(n) * H * W + p) * C + gi * cg;
                for (int c = 0; c < cg; ++c) o[c] = (xr[c] - mean) * inv;
            }
        }
    bool rg = needs_grad(x);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [x, id, groups, N, H, W, C, cg, cnt, means = std::move(means),
                              inv_std = std::move(inv_std)](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& y = t.val(id);
            Tensor& gx = t.grad_ref(x);
            for (int n = 0; n < N; ++n)
                for (int gi = 0; gi < groups; ++gi) {
                    double inv = inv_std[static_cast<size_t>(n) * groups + gi];
                    double gsum = 0.0, gysum = 0.0;
                    for (int p = 0; p < H * W; ++p) {
                        int64_t base = (static_cast<int64_t>(n) * H * W + p) * C + gi * cg;
                        for (int c = 0; c < cg; ++c) {
                            gsum += g.data[base + c];
                            gysum += g.data[base + c] * y.data[base + c];
                        }
                    }
                    double gmean = gsum / static_cast<double>(cnt);
                    double gymean = gysum / static_cast<double>(cnt);
                    for (int p = 0; p < H * W; ++p) {
                        int64_t base = (static_cast<int64_t>(n) * H * W + p) * C + gi * cg;
                        for (int c = 0; c < cg; ++c)
                            gx.data[base + c] += inv * (g.data[base + c] - gmean - y.data[base + c] * gymean);
                    }
                }
        };
    }
    return id;
}

NodeId Tape::upsample2x(NodeId x) {
    const Tensor& xv = val(x);
    if (xv.ndim() != 4) throw ShapeError("upsample2x: input must be {n,h,w,c}");
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor out({N, 2 * H, 2 * W, C});
    for (int n = 0; n < N; ++n)
        for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx) {
                const double* src = xv.ptr() + ((static_cast<int64_t>(n) * H + y / 2) * W + xx / 2) * C;
                double* dst = out.ptr() + ((static_cast<int64_t>(n) * 2 * H + y) * 2 * W + xx) * C;
                std::memcpy(dst, src, sizeof(double) * C);
            }
    bool rg = needs_grad(x);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [x, id, N, H, W, C](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& gx = t.grad_ref(x);
            for (int n = 0; n < N; ++n)
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx) {
                        double* dst = gx.ptr() + ((static_cast<int64_t>(n) * H + y / 2) * W + xx / 2) * C;
                        const double* src = g.ptr() + ((static_cast<int64_t>(n) * 2 * H + y) * 2 * W + xx) * C;
                        for (int c = 0; c < C; ++c) dst[c] += src[c];
                    }
        };
    }
    return id;
}

NodeId Tape::add_channel_bias(NodeId x, const Tensor& bias) {
    const Tensor& xv = val(x);
    int c = xv.dim(xv.ndim() - 1);
    if (bias.numel() != c) throw ShapeError("add_channel_bias: bias dim mismatch");
    Tensor out = xv;
    int64_t rows = xv.numel() / c;
    for (int64_t r = 0; r < rows; ++r) {
        double* o = out.ptr() + r * c;
        for (int i = 0; i < c; ++i) o[i] += bias.data[i];
    }
    bool rg = needs_grad(x);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [x, id](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& gx = t.grad_ref(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
        };
    }
    return id;
}

NodeId Tape::global_max_pool(NodeId x) {
    const Tensor& xv = val(x);
    if (xv.ndim() != 4) throw ShapeError("global_max_pool: input must be {n,h,w,c}");
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor out({N, C});
    std::vector<int32_t> argmax(static_cast<size_t>(N) * C);
    for (int n = 0; n < N; ++n) {
        double* o = out.ptr() + static_cast<int64_t>(n) * C;
        int32_t* am = argmax.data() + static_cast<int64_t>(n) * C;
        const double* base = xv.ptr() + static_cast<int64_t>(n) * H * W * C;
        for (int c = 0; c < C; ++c) {
            o[c] = base[c];
            am[c] = 0;
        }
        for (int p = 1; p < H * W; ++p) {
            const double* xr = base + static_cast<int64_t>(p) * C;
            for (int c = 0; c < C; ++c)
                if (xr[c] > o[c]) {
                    o[c] = xr[c];
                    am[c] = p;
                }
        }
    }
    bool rg = needs_grad(x);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [x, id, N, H, W, C, argmax = std::move(argmax)](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& gx = t.grad_ref(x);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    int32_t p = argmax[static_cast<size_t>(n) * C + c];
                    gx.data[(static_cast<int64_t>(n) * H * W + p) * C + c] +=
                        g.data[static_cast<int64_t>(n) * C + c];
                }
        };
    }
    return id;
}

NodeId Tape::mean_batch(NodeId x) {
    const Tensor& xv = val(x);
    if (xv.ndim() != 2) throw ShapeError("mean_batch: input must be {n,c}");
    const int N = xv.dim(0), C = xv.dim(1);
    Tensor out({C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) out.data[c] += xv.data[static_cast<int64_t>(n) * C + c];
    double inv = 1.0 / N;
    for (double& v : out.data) v *= inv;
    bool rg = needs_grad(x);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [x, id, N, C, inv](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            Tensor& gx = t.grad_ref(x);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) gx.data[static_cast<int64_t>(n) * C + c] += g.data[c] * inv;
        };
    }
    return id;
}

NodeId Tape::mean_list(const std::vector<NodeId>& xs) {
    if (xs.empty()) throw ShapeError("mean_list: empty input");
    const Tensor& first = val(xs[0]);
    for (NodeId n : xs) check_same_shape(val(n), first, "mean_list");
    Tensor out(first.shape);
    for (NodeId n : xs) {
        const Tensor& v = val(n);
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += v.data[i];
    }
    double inv = 1.0 / static_cast<double>(xs.size());
    for (double& v : out.data) v *= inv;
    bool rg = false;
    for (NodeId n : xs) rg = rg || needs_grad(n);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        std::vector<NodeId> deps = xs;
        nodes_.back().back = [id, inv, deps = std::move(deps)](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            for (NodeId n : deps) {
                if (!t.needs_grad(n)) continue;
                Tensor& gn = t.grad_ref(n);
                for (int64_t i = 0; i < g.numel(); ++i) gn.data[i] += g.data[i] * inv;
            }
        };
    }
    return id;
}

NodeId Tape::l2_normalize(NodeId x, double eps) {
    const Tensor& xv = val(x);
    int c = xv.dim(xv.ndim() - 1);
    int64_t rows = xv.numel() / c;
    Tensor out = xv;
    std::vector<double> norms(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        double* o = out.ptr() + r * c;
        double s = 0.0;
        for (int i = 0; i < c; ++i) s += o[i] * o[i];
        double nrm = std::max(std::sqrt(s), eps);
        norms[static_cast<size_t>(r)] = nrm;
        double inv = 1.0 / nrm;
        for (int i = 0; i < c; ++i) o[i] *= inv;
    }
    bool rg = needs_grad(x);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [x, id, c, rows, norms = std::move(norms)](Tape& t) {
            const Tensor& g = t.nodes_[id].grad;
            const Tensor& y = t.val(id);
            Tensor& gx = t.grad_ref(x);
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g.ptr() + r * c;
                const double* yr = y.ptr() + r * c;
                double dot = 0.0;
                for (int i = 0; i < c; ++i) dot += gr[i] * yr[i];
                double inv = 1.0 / norms[static_cast<size_t>(r)];
                double* gxr = gx.ptr() + r * c;
                for (int i = 0; i < c; ++i) gxr[i] += (gr[i] - yr[i] * dot) * inv;
            }
        };
    }
    return id;
}

NodeId Tape::euclidean(NodeId a, NodeId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "euclidean");
    double s = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) {
        double d = av.data[i] - bv.data[i];
        s += d * d;
    }
    double dist = std::sqrt(s);
    Tensor out({1});
    out.data[0] = dist;
    bool rg = needs_grad(a) || needs_grad(b);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, b, id, dist](Tape& t) {
            if (dist < 1e-12) return;  // subgradient 0 at coincident points
            double gv = t.nodes_[id].grad.data[0] / dist;
            const Tensor& av2 = t.val(a);
            const Tensor& bv2 = t.val(b);
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_ref(a);
                for (int64_t i = 0; i < av2.numel(); ++i)
                    ga.data[i] += gv * (av2.data[i] - bv2.data[i]);
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_ref(b);
                for (int64_t i = 0; i < av2.numel(); ++i)
                    gb.data[i] -= gv * (av2.data[i] - bv2.data[i]);
            }
        };
    }
    return id;
}

NodeId Tape::sum_sq(NodeId a) {
    const Tensor& av = val(a);
    double s = 0.0;
    for (double v : av.data) s += v * v;
    Tensor out({1});
    out.data[0] = s;
    bool rg = needs_grad(a);
    NodeId id = push(std::move(out), rg, nullptr);
    if (rg) {
        nodes_.back().back = [a, id](Tape& t) {
            double gv = t.nodes_[id].grad.data[0];
            const Tensor& av2 = t.val(a);
            Tensor& ga = t.grad_ref(a);
            for (int64_t i = 0; i < av2.numel(); ++i) ga.data[i] += 2.0 * gv * av2.data[i];
        };
    }
    return id;
}

}  // namespace diffret::ad
