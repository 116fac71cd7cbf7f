// Reverse-mode computation graph over Tensors.
//
// A Graph is a tape: nodes are appended in evaluation order, so every node's
// inputs precede it and backward() is a single reverse sweep. Values are
// immutable once recorded; gradients live in a parallel map keyed by node id.
#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pjx/common.hpp"
#include "pjx/tensor.hpp"

namespace pjx {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

class Graph {
public:
    struct Node {
        const char* op;
        std::vector<NodeId> inputs;
        Tensor value;
        std::string label;  // leaves only: parameter/input name
        std::function<void(Graph&, const Node&, const Tensor&)> back;
    };

    std::size_t size() const { return nodes_.size(); }

    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    const Node& node(NodeId id) const { return nodes_.at(id); }

    bool has_grad(NodeId id) const { return id < grads_.size() && grads_[id].size() > 0; }

    const Tensor& grad(NodeId id) const {
        if (!has_grad(id))
            throw ContractError("no gradient recorded for node " + std::to_string(id) +
                                " (op " + std::string(nodes_.at(id).op) + ")");
        return grads_[id];
    }

    // --- node constructors --------------------------------------------

    NodeId leaf(Tensor value, std::string label = {}) {
        return push("leaf", {}, std::move(value), nullptr, std::move(label));
    }

    NodeId add(NodeId a, NodeId b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (!va.same_shape(vb))
            throw ShapeError("add: shapes " + shape_str(va.shape()) + " vs " +
                             shape_str(vb.shape()));
        Tensor out = va;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return push("add", {a, b}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        g.accum(n.inputs[0], go);
                        g.accum(n.inputs[1], go);
                    });
    }

    NodeId scale(NodeId x, double k) {
        Tensor out = value(x);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= k;
        return push("scale", {x}, std::move(out),
                    [k](Graph& g, const Node& n, const Tensor& go) {
                        Tensor gi = go;
                        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] *= k;
                        g.accum(n.inputs[0], std::move(gi));
                    });
    }

    // Elementwise product. Equal shapes multiply componentwise; additionally a
    // length-C vector fuses with a CxNxM tensor by replication over the grid.
    NodeId mul(NodeId a, NodeId b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.same_shape(vb)) {
            Tensor out = va;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
            return push("mul", {a, b}, std::move(out),
                        [](Graph& g, const Node& n, const Tensor& go) {
                            const Tensor& x = g.value(n.inputs[0]);
                            const Tensor& y = g.value(n.inputs[1]);
                            Tensor ga(x.shape());
                            Tensor gb(y.shape());
                            for (std::size_t i = 0; i < go.size(); ++i) {
                                ga[i] = go[i] * y[i];
                                gb[i] = go[i] * x[i];
                            }
                            g.accum(n.inputs[0], std::move(ga));
                            g.accum(n.inputs[1], std::move(gb));
                        });
        }
        if (va.ndim() == 1 && vb.ndim() == 3 && va.extent(0) == vb.extent(0))
            return mul_broadcast(a, b);
        if (vb.ndim() == 1 && va.ndim() == 3 && vb.extent(0) == va.extent(0))
            return mul_broadcast(b, a);
        throw ShapeError("mul: no legal broadcast between " + shape_str(va.shape()) + " and " +
                         shape_str(vb.shape()));
    }

    NodeId signed_sqrt(NodeId x) {
        Tensor out = value(x);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = std::copysign(std::sqrt(std::fabs(out[i])), out[i]);
        return push("signed_sqrt", {x}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& x = g.value(n.inputs[0]);
                        Tensor gi(x.shape());
                        for (std::size_t i = 0; i < x.size(); ++i) {
                            // derivative clamped near 0 where 1/(2 sqrt|x|) blows up
                            const double d = std::max(std::sqrt(std::fabs(x[i])), 1e-6);
                            gi[i] = go[i] / (2.0 * d);
                        }
                        g.accum(n.inputs[0], std::move(gi));
                    });
    }

    static constexpr double kL2Eps = 1e-12;

    // Whole-tensor L2 normalization, out = x / max(|x|_2, eps).
    NodeId l2_normalize(NodeId x) {
        const Tensor& vx = value(x);
        Tensor out = vx;
        normalize_span(out.data(), out.size());
        return push("l2_normalize", {x}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& x = g.value(n.inputs[0]);
                        Tensor gi(x.shape());
                        normalize_span_grad(x.data(), go.data(), gi.data(), x.size());
                        g.accum(n.inputs[0], std::move(gi));
                    });
    }

    // Per-location L2 normalization of a CxNxM tensor: each channel column at
    // a grid cell is normalized independently.
    NodeId l2_normalize_locations(NodeId x) {
        const Tensor& vx = value(x);
        if (vx.ndim() != 3)
            throw ShapeError("l2_normalize_locations: expected rank-3 tensor, got " +
                             shape_str(vx.shape()));
        const std::size_t c = vx.extent(0), hw = vx.extent(1) * vx.extent(2);
        Tensor out(vx.shape());
        std::vector<double> col(c);
        for (std::size_t p = 0; p < hw; ++p) {
            for (std::size_t k = 0; k < c; ++k) col[k] = vx[k * hw + p];
            normalize_span(col.data(), c);
            for (std::size_t k = 0; k < c; ++k) out[k * hw + p] = col[k];
        }
        return push("l2_normalize_locations", {x}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& x = g.value(n.inputs[0]);
                        const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
                        Tensor gi(x.shape());
                        std::vector<double> col(c), gcol(c), gicol(c);
                        for (std::size_t p = 0; p < hw; ++p) {
                            for (std::size_t k = 0; k < c; ++k) {
                                col[k] = x[k * hw + p];
                                gcol[k] = go[k * hw + p];
                            }
                            normalize_span_grad(col.data(), gcol.data(), gicol.data(), c);
                            for (std::size_t k = 0; k < c; ++k) gi[k * hw + p] = gicol[k];
                        }
                        g.accum(n.inputs[0], std::move(gi));
                    });
    }

    // Softmax over all cells of an NxM grid of logits.
    NodeId softmax_grid(NodeId logits) {
        const Tensor& vx = value(logits);
        if (vx.ndim() != 2)
            throw ShapeError("softmax_grid: expected rank-2 logits, got " + shape_str(vx.shape()));
        return push("softmax_grid", {logits}, softmax_values(vx), softmax_back());
    }

    // Softmax over a vector (answer distribution for predicted conditioning).
    NodeId softmax_vec(NodeId logits) {
        const Tensor& vx = value(logits);
        if (vx.ndim() != 1)
            throw ShapeError("softmax_vec: expected rank-1 logits, got " + shape_str(vx.shape()));
        return push("softmax_vec", {logits}, softmax_values(vx), softmax_back());
    }

    NodeId relu(NodeId x) {
        Tensor out = value(x);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
        return push("relu", {x}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& x = g.value(n.inputs[0]);
                        Tensor gi(x.shape());
                        for (std::size_t i = 0; i < x.size(); ++i)
                            gi[i] = x[i] > 0.0 ? go[i] : 0.0;
                        g.accum(n.inputs[0], std::move(gi));
                    });
    }

    NodeId tanh_op(NodeId x) {
        Tensor out = value(x);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
        return push("tanh", {x}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& y = n.value;
                        Tensor gi(y.shape());
                        for (std::size_t i = 0; i < y.size(); ++i)
                            gi[i] = go[i] * (1.0 - y[i] * y[i]);
                        g.accum(n.inputs[0], std::move(gi));
                    });
    }

    NodeId sigmoid(NodeId x) {
        Tensor out = value(x);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
        return push("sigmoid", {x}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& y = n.value;
                        Tensor gi(y.shape());
                        for (std::size_t i = 0; i < y.size(); ++i)
                            gi[i] = go[i] * y[i] * (1.0 - y[i]);
                        g.accum(n.inputs[0], std::move(gi));
                    });
    }

    // out = W x (+ b). W: out_dim x in_dim, x: in_dim, b: out_dim or kNoNode.
    NodeId linear(NodeId w, NodeId x, NodeId b = kNoNode) {
        const Tensor& vw = value(w);
        const Tensor& vx = value(x);
        if (vw.ndim() != 2 || vx.ndim() != 1 || vw.extent(1) != vx.extent(0))
            throw ShapeError("linear: W " + shape_str(vw.shape()) + " incompatible with x " +
                             shape_str(vx.shape()));
        const std::size_t rows = vw.extent(0), cols = vw.extent(1);
        Tensor out({rows});
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            const double* wr = vw.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * vx[c];
            out[r] = acc;
        }
        std::vector<NodeId> ins{w, x};
        if (b != kNoNode) {
            const Tensor& vb = value(b);
            if (vb.ndim() != 1 || vb.extent(0) != rows)
                throw ShapeError("linear: bias " + shape_str(vb.shape()) + " does not match " +
                                 std::to_string(rows) + " outputs");
            for (std::size_t r = 0; r < rows; ++r) out[r] += vb[r];
            ins.push_back(b);
        }
        return push("linear", std::move(ins), std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& vw = g.value(n.inputs[0]);
                        const Tensor& vx = g.value(n.inputs[1]);
                        const std::size_t rows = vw.extent(0), cols = vw.extent(1);
                        Tensor gw(vw.shape());
                        Tensor gx(vx.shape());
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double* wr = vw.data() + r * cols;
                            double* gwr = gw.data() + r * cols;
                            const double gr = go[r];
                            for (std::size_t c = 0; c < cols; ++c) {
                                gwr[c] = gr * vx[c];
                                gx[c] += gr * wr[c];
                            }
                        }
                        g.accum(n.inputs[0], std::move(gw));
                        g.accum(n.inputs[1], std::move(gx));
                        if (n.inputs.size() == 3) g.accum(n.inputs[2], go);
                    });
    }

    // 1x1 convolution: linear map applied independently at each grid location.
    // W: C' x C, x: C x N x M, b: C' or kNoNode.
    NodeId conv1x1(NodeId w, NodeId x, NodeId b = kNoNode) {
        const Tensor& vw = value(w);
        const Tensor& vx = value(x);
        if (vw.ndim() != 2 || vx.ndim() != 3 || vw.extent(1) != vx.extent(0))
            throw ShapeError("conv1x1: W " + shape_str(vw.shape()) + " incompatible with x " +
                             shape_str(vx.shape()));
        const std::size_t co = vw.extent(0), ci = vw.extent(1);
        const std::size_t hw = vx.extent(1) * vx.extent(2);
        Tensor out({co, vx.extent(1), vx.extent(2)});
        for (std::size_t o = 0; o < co; ++o) {
            const double* wr = vw.data() + o * ci;
            double* dst = out.data() + o * hw;
            for (std::size_t c = 0; c < ci; ++c) {
                const double wv = wr[c];
                if (wv == 0.0) continue;
                const double* src = vx.data() + c * hw;
                for (std::size_t p = 0; p < hw; ++p) dst[p] += wv * src[p];
            }
        }
        std::vector<NodeId> ins{w, x};
        if (b != kNoNode) {
            const Tensor& vb = value(b);
            if (vb.ndim() != 1 || vb.extent(0) != co)
                throw ShapeError("conv1x1: bias " + shape_str(vb.shape()) + " does not match " +
                                 std::to_string(co) + " channels");
            for (std::size_t o = 0; o < co; ++o) {
                double* dst = out.data() + o * hw;
                for (std::size_t p = 0; p < hw; ++p) dst[p] += vb[o];
            }
            ins.push_back(b);
        }
        return push("conv1x1", std::move(ins), std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& vw = g.value(n.inputs[0]);
                        const Tensor& vx = g.value(n.inputs[1]);
                        const std::size_t co = vw.extent(0), ci = vw.extent(1);
                        const std::size_t hw = vx.extent(1) * vx.extent(2);
                        Tensor gw(vw.shape());
                        Tensor gx(vx.shape());
                        for (std::size_t o = 0; o < co; ++o) {
                            const double* gor = go.data() + o * hw;
                            const double* wr = vw.data() + o * ci;
                            double* gwr = gw.data() + o * ci;
                            for (std::size_t c = 0; c < ci; ++c) {
                                const double* src = vx.data() + c * hw;
                                double* gsrc = gx.data() + c * hw;
                                double acc = 0.0;
                                const double wv = wr[c];
                                for (std::size_t p = 0; p < hw; ++p) {
                                    acc += gor[p] * src[p];
                                    gsrc[p] += gor[p] * wv;
                                }
                                gwr[c] = acc;
                            }
                        }
                        g.accum(n.inputs[0], std::move(gw));
                        g.accum(n.inputs[1], std::move(gx));
                        if (n.inputs.size() == 3) {
                            Tensor gb({co});
                            for (std::size_t o = 0; o < co; ++o) {
                                const double* gor = go.data() + o * hw;
                                double acc = 0.0;
                                for (std::size_t p = 0; p < hw; ++p) acc += gor[p];
                                gb[o] = acc;
                            }
                            g.accum(n.inputs[2], std::move(gb));
                        }
                    });
    }

    // Attention-weighted sum over grid locations: out_c = sum_nm a[n,m] f[c,n,m].
    // Requires a normalized map; tolerance matches the operating contract.
    NodeId attend(NodeId features, NodeId alpha) {
        const Tensor& vf = value(features);
        const Tensor& va = value(alpha);
        if (vf.ndim() != 3 || va.ndim() != 2 || vf.extent(1) != va.extent(0) ||
            vf.extent(2) != va.extent(1))
            throw ShapeError("attend: features " + shape_str(vf.shape()) + " vs map " +
                             shape_str(va.shape()));
        const double mass = va.sum();
        if (std::fabs(mass - 1.0) > 1e-6)
            throw ContractError("attend: attention map mass " + std::to_string(mass) +
                                " is not 1 within 1e-6");
        const std::size_t c = vf.extent(0), hw = va.size();
        Tensor out({c});
        for (std::size_t k = 0; k < c; ++k) {
            const double* src = vf.data() + k * hw;
            double acc = 0.0;
            for (std::size_t p = 0; p < hw; ++p) acc += va[p] * src[p];
            out[k] = acc;
        }
        return push("attend", {features, alpha}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& vf = g.value(n.inputs[0]);
                        const Tensor& va = g.value(n.inputs[1]);
                        const std::size_t c = vf.extent(0), hw = va.size();
                        Tensor gf(vf.shape());
                        Tensor ga(va.shape());
                        for (std::size_t k = 0; k < c; ++k) {
                            const double* src = vf.data() + k * hw;
                            double* gsrc = gf.data() + k * hw;
                            const double gk = go[k];
                            for (std::size_t p = 0; p < hw; ++p) {
                                gsrc[p] = gk * va[p];
                                ga[p] += gk * src[p];
                            }
                        }
                        g.accum(n.inputs[0], std::move(gf));
                        g.accum(n.inputs[1], std::move(ga));
                    });
    }

    NodeId concat(NodeId a, NodeId b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.ndim() != 1 || vb.ndim() != 1)
            throw ShapeError("concat: expected two vectors, got " + shape_str(va.shape()) +
                             " and " + shape_str(vb.shape()));
        Tensor out({va.size() + vb.size()});
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i];
        for (std::size_t i = 0; i < vb.size(); ++i) out[va.size() + i] = vb[i];
        return push("concat", {a, b}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const std::size_t na = g.value(n.inputs[0]).size();
                        Tensor ga({na});
                        Tensor gb({go.size() - na});
                        for (std::size_t i = 0; i < na; ++i) ga[i] = go[i];
                        for (std::size_t i = na; i < go.size(); ++i) gb[i - na] = go[i];
                        g.accum(n.inputs[0], std::move(ga));
                        g.accum(n.inputs[1], std::move(gb));
                    });
    }

    // Row lookup into an embedding matrix; gradient scatters into that row.
    NodeId row(NodeId matrix, std::size_t index) {
        const Tensor& vm = value(matrix);
        if (vm.ndim() != 2)
            throw ShapeError("row: expected rank-2 matrix, got " + shape_str(vm.shape()));
        if (index >= vm.extent(0))
            throw ContractError("row: index " + std::to_string(index) + " out of range for " +
                                std::to_string(vm.extent(0)) + " rows");
        const std::size_t d = vm.extent(1);
        Tensor out({d});
        for (std::size_t i = 0; i < d; ++i) out[i] = vm.data()[index * d + i];
        return push("row", {matrix}, std::move(out),
                    [index](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& vm = g.value(n.inputs[0]);
                        Tensor gm(vm.shape());
                        const std::size_t d = vm.extent(1);
                        for (std::size_t i = 0; i < d; ++i) gm.data()[index * d + i] = go[i];
                        g.accum(n.inputs[0], std::move(gm));
                    });
    }

    NodeId slice(NodeId x, std::size_t start, std::size_t len) {
        const Tensor& vx = value(x);
        if (vx.ndim() != 1 || start + len > vx.size())
            throw ShapeError("slice: [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of " + shape_str(vx.shape()));
        Tensor out({len});
        for (std::size_t i = 0; i < len; ++i) out[i] = vx[start + i];
        return push("slice", {x}, std::move(out),
                    [start](Graph& g, const Node& n, const Tensor& go) {
                        Tensor gx(g.value(n.inputs[0]).shape());
                        for (std::size_t i = 0; i < go.size(); ++i) gx[start + i] = go[i];
                        g.accum(n.inputs[0], std::move(gx));
                    });
    }

    NodeId sum(NodeId x) {
        return push("sum", {x}, Tensor::scalar(value(x).sum()),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        Tensor gx(g.value(n.inputs[0]).shape(), go[0]);
                        g.accum(n.inputs[0], std::move(gx));
                    });
    }

    // Same data, new extents (sizes must agree).
    NodeId reshape(NodeId x, Shape shape) {
        const Tensor& vx = value(x);
        Tensor out(std::move(shape), vx.values());
        return push("reshape", {x}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        g.accum(n.inputs[0], Tensor(g.value(n.inputs[0]).shape(), go.values()));
                    });
    }

    // Train-time inverted dropout. Evaluation mode (or rate 0) is the
    // identity and adds no node.
    NodeId dropout(NodeId x, double rate, Rng& rng, bool train) {
        if (!train || rate <= 0.0) return x;
        if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
        const Tensor& vx = value(x);
        Tensor mask(vx.shape());
        const double keep = 1.0 - rate;
        for (std::size_t i = 0; i < mask.size(); ++i)
            mask[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
        Tensor out = vx;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
        return push("dropout", {x}, std::move(out),
                    [mask = std::move(mask)](Graph& g, const Node& n, const Tensor& go) {
                        Tensor gx = go;
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= mask[i];
                        g.accum(n.inputs[0], std::move(gx));
                    });
    }

    // Negative log-likelihood of class `target` under softmax(logits).
    NodeId cross_entropy(NodeId logits, std::size_t target) {
        const Tensor& vx = value(logits);
        if (vx.ndim() != 1)
            throw ShapeError("cross_entropy: expected rank-1 logits, got " +
                             shape_str(vx.shape()));
        if (target >= vx.size())
            throw ContractError("cross_entropy: target " + std::to_string(target) +
                                " out of range for " + std::to_string(vx.size()) + " classes");
        double mx = vx[0];
        for (std::size_t i = 1; i < vx.size(); ++i) mx = std::max(mx, vx[i]);
        double lse = 0.0;
        for (std::size_t i = 0; i < vx.size(); ++i) lse += std::exp(vx[i] - mx);
        const double loss = std::log(lse) + mx - vx[target];
        return push("cross_entropy", {logits}, Tensor::scalar(loss),
                    [target](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& vx = g.value(n.inputs[0]);
                        double mx = vx[0];
                        for (std::size_t i = 1; i < vx.size(); ++i) mx = std::max(mx, vx[i]);
                        double lse = 0.0;
                        for (std::size_t i = 0; i < vx.size(); ++i) lse += std::exp(vx[i] - mx);
                        Tensor gx(vx.shape());
                        for (std::size_t i = 0; i < vx.size(); ++i)
                            gx[i] = go[0] * (std::exp(vx[i] - mx) / lse - (i == target ? 1.0 : 0.0));
                        g.accum(n.inputs[0], std::move(gx));
                    });
    }

    // --- backward -------------------------------------------------------

    void backward(NodeId loss) {
        if (value(loss).size() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                shape_str(value(loss).shape()));
        grads_.assign(nodes_.size(), Tensor());
        grads_[loss] = Tensor::scalar(1.0);
        for (std::size_t i = loss + 1; i-- > 0;) {
            if (grads_[i].size() == 0) continue;
            const Node& n = nodes_[i];
            if (n.back) n.back(*this, n, grads_[i]);
        }
    }

    void accum(NodeId id, Tensor g) {
        const Tensor& v = nodes_[id].value;
        if (!g.same_shape(v))
            throw ShapeError("gradient shape " + shape_str(g.shape()) +
                             " does not match value shape " + shape_str(v.shape()));
        if (grads_[id].size() == 0) {
            grads_[id] = std::move(g);
        } else {
            Tensor& acc = grads_[id];
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
        }
    }

    // Labels of all labeled leaves reachable from `from`; used to assert what
    // supervision a loss actually touches.
    std::vector<std::string> reachable_leaf_labels(NodeId from) const {
        std::vector<char> seen(nodes_.size(), 0);
        std::vector<NodeId> stack{from};
        std::vector<std::string> labels;
        while (!stack.empty()) {
            const NodeId id = stack.back();
            stack.pop_back();
            if (seen[id]) continue;
            seen[id] = 1;
            const Node& n = nodes_[id];
            if (n.inputs.empty() && !n.label.empty()) labels.push_back(n.label);
            for (NodeId in : n.inputs) stack.push_back(in);
        }
        return labels;
    }

private:
    NodeId push(const char* op, std::vector<NodeId> inputs, Tensor value,
                std::function<void(Graph&, const Node&, const Tensor&)> back,
                std::string label = {}) {
        for (NodeId in : inputs)
            if (in >= nodes_.size())
                throw ContractError("graph node references input created later");
        nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(label),
                              std::move(back)});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId mul_broadcast(NodeId vec, NodeId grid) {
        const Tensor& vv = value(vec);
        const Tensor& vg = value(grid);
        const std::size_t c = vv.size(), hw = vg.extent(1) * vg.extent(2);
        Tensor out(vg.shape());
        for (std::size_t k = 0; k < c; ++k) {
            const double* src = vg.data() + k * hw;
            double* dst = out.data() + k * hw;
            for (std::size_t p = 0; p < hw; ++p) dst[p] = vv[k] * src[p];
        }
        return push("mul_broadcast", {vec, grid}, std::move(out),
                    [](Graph& g, const Node& n, const Tensor& go) {
                        const Tensor& vv = g.value(n.inputs[0]);
                        const Tensor& vg = g.value(n.inputs[1]);
                        const std::size_t c = vv.size(), hw = vg.extent(1) * vg.extent(2);
                        Tensor gv(vv.shape());
                        Tensor gg(vg.shape());
                        for (std::size_t k = 0; k < c; ++k) {
                            const double* src = vg.data() + k * hw;
                            const double* gos = go.data() + k * hw;
                            double* ggs = gg.data() + k * hw;
                            double acc = 0.0;
                            for (std::size_t p = 0; p < hw; ++p) {
                                acc += gos[p] * src[p];
                                ggs[p] = gos[p] * vv[k];
                            }
                            gv[k] = acc;
                        }
                        g.accum(n.inputs[0], std::move(gv));
                        g.accum(n.inputs[1], std::move(gg));
                    });
    }

    static Tensor softmax_values(const Tensor& vx) {
        Tensor out = vx;
        double mx = out[0];
        for (std::size_t i = 1; i < out.size(); ++i) mx = std::max(mx, out[i]);
        double total = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = std::exp(out[i] - mx);
            total += out[i];
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i] /= total;
        return out;
    }

    static std::function<void(Graph&, const Node&, const Tensor&)> softmax_back() {
        return [](Graph& g, const Node& n, const Tensor& go) {
            const Tensor& y = n.value;
            double dot = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) dot += go[i] * y[i];
            Tensor gi(y.shape());
            for (std::size_t i = 0; i < y.size(); ++i) gi[i] = y[i] * (go[i] - dot);
            g.accum(n.inputs[0], std::move(gi));
        };
    }

    static void normalize_span(double* x, std::size_t n) {
        double sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) sq += x[i] * x[i];
        const double norm = std::max(std::sqrt(sq), kL2Eps);
        for (std::size_t i = 0; i < n; ++i) x[i] /= norm;
    }

    static void normalize_span_grad(const double* x, const double* go, double* gi,
                                    std::size_t n) {
        double sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) sq += x[i] * x[i];
        const double norm = std::sqrt(sq);
        if (norm < kL2Eps) {
            for (std::size_t i = 0; i < n; ++i) gi[i] = go[i] / kL2Eps;
            return;
        }
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += x[i] * go[i];
        const double n3 = norm * norm * norm;
        for (std::size_t i = 0; i < n; ++i) gi[i] = go[i] / norm - x[i] * dot / n3;
    }

    // deque: node references stay valid while the tape grows
    std::deque<Node> nodes_;
    std::vector<Tensor> grads_;
};

// Standard LSTM cell built from graph primitives. Weight layout packs the
// four gates as [input; forget; candidate; output], each of size `hidden`.
//   wx: 4H x in, wh: 4H x H, b: 4H
struct LstmState {
    NodeId h;
    NodeId c;
};

inline LstmState lstm_step(Graph& g, NodeId x, NodeId h_prev, NodeId c_prev, NodeId wx,
                           NodeId wh, NodeId b) {
    const std::size_t hidden = g.value(h_prev).size();
    if (g.value(c_prev).size() != hidden || g.value(wx).extent(0) != 4 * hidden ||
        g.value(wh).extent(0) != 4 * hidden || g.value(wh).extent(1) != hidden ||
        g.value(b).size() != 4 * hidden)
        throw ShapeError("lstm_step: inconsistent hidden size across h/c/params");
    const NodeId gates = g.add(g.linear(wx, x, b), g.linear(wh, h_prev));
    const NodeId i = g.sigmoid(g.slice(gates, 0, hidden));
    const NodeId f = g.sigmoid(g.slice(gates, hidden, hidden));
    const NodeId cand = g.tanh_op(g.slice(gates, 2 * hidden, hidden));
    const NodeId o = g.sigmoid(g.slice(gates, 3 * hidden, hidden));
    const NodeId c = g.add(g.mul(f, c_prev), g.mul(i, cand));
    const NodeId h = g.mul(o, g.tanh_op(c));
    return {h, c};
}

// Central-difference check of the analytic gradient of a scalar-valued graph
// function of one tensor input. Returns the max over coordinates of
// |analytic - numeric| / max(|analytic|, 1e-8).
using ScalarGraphFn = std::function<NodeId(Graph&, NodeId)>;

inline double finite_diff_check(const ScalarGraphFn& f, const Tensor& x, double h = 1e-5) {
    Graph g;
    const NodeId in = g.leaf(x, "fd_input");
    const NodeId loss = f(g, in);
    g.backward(loss);
    const Tensor analytic = g.has_grad(in) ? g.grad(in) : Tensor(x.shape());

    auto eval = [&](const Tensor& point) {
        Graph ge;
        const NodeId leaf = ge.leaf(point, "fd_input");
        return ge.value(f(ge, leaf))[0];
    };

    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = eval(probe);
        probe[i] = x[i] - h;
        const double down = eval(probe);
        probe[i] = x[i];
        const double numeric = (up - down) / (2.0 * h);
        const double err = std::fabs(analytic[i] - numeric) /
                           std::max(std::fabs(analytic[i]), 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace pjx
