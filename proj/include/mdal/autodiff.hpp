#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdal/tensor.hpp"

namespace mdal::ad {

using NodeId = int32_t;

/// Reverse-mode engine over a dynamic graph. Forward values are computed
/// eagerly at op-construction time, so data-dependent control flow (hard
/// negative mining, per-pass noise) can inspect values mid-build. A graph
/// is single-owner; distinct graphs are independent.
class Graph {
public:
    NodeId constant(Tensor v) { return add_node(std::move(v), {}, nullptr); }

    NodeId scalar(double v) { return constant(Tensor::scalar(v)); }

    const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
    const Tensor& grad(NodeId id) const { return nodes_[check(id)].grad; }
    size_t size() const { return nodes_.size(); }

    // ---- elementwise ----

    NodeId add(NodeId a, NodeId b) {
        check_same_shape("add", value(a), value(b));
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
        return add_node(std::move(out), {a, b}, [](Graph& g, NodeId self) {
            const Tensor& go = g.nodes_[self].grad;
            g.accum(g.nodes_[self].inputs[0], go);
            g.accum(g.nodes_[self].inputs[1], go);
        });
    }

    NodeId sub(NodeId a, NodeId b) {
        check_same_shape("sub", value(a), value(b));
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
        return add_node(std::move(out), {a, b}, [](Graph& g, NodeId self) {
            const Tensor& go = g.nodes_[self].grad;
            g.accum(g.nodes_[self].inputs[0], go);
            g.accum_scaled(g.nodes_[self].inputs[1], go, -1.0);
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        check_same_shape("mul", value(a), value(b));
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
        return add_node(std::move(out), {a, b}, [](Graph& g, NodeId self) {
            const auto& in = g.nodes_[self].inputs;
            const Tensor& go = g.nodes_[self].grad;
            g.accum_mul(in[0], go, g.value(in[1]));
            g.accum_mul(in[1], go, g.value(in[0]));
        });
    }

    NodeId div(NodeId a, NodeId b) {
        check_same_shape("div", value(a), value(b));
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= vb.data[i];
        return add_node(std::move(out), {a, b}, [](Graph& g, NodeId self) {
            const auto& in = g.nodes_[self].inputs;
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& va = g.value(in[0]);
            const Tensor& vb2 = g.value(in[1]);
            Tensor& ga = g.nodes_[in[0]].grad;
            Tensor& gb = g.nodes_[in[1]].grad;
            for (size_t i = 0; i < go.data.size(); ++i) {
                ga.data[i] += go.data[i] / vb2.data[i];
                gb.data[i] -= go.data[i] * va.data[i] / (vb2.data[i] * vb2.data[i]);
            }
        });
    }

    NodeId scale(NodeId a, double c) {
        Tensor out = value(a);
        for (double& v : out.data) v *= c;
        return add_node(std::move(out), {a}, [c](Graph& g, NodeId self) {
            g.accum_scaled(g.nodes_[self].inputs[0], g.nodes_[self].grad, c);
        });
    }

    NodeId add_scalar(NodeId a, double c) {
        Tensor out = value(a);
        for (double& v : out.data) v += c;
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            g.accum(g.nodes_[self].inputs[0], g.nodes_[self].grad);
        });
    }

    NodeId exp(NodeId a) {
        Tensor out = value(a);
        for (double& v : out.data) v = std::exp(v);
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            g.accum_mul(g.nodes_[self].inputs[0], g.nodes_[self].grad,
                        g.nodes_[self].value);
        });
    }

    /// log with inputs clamped to >= 1e-300; gradient uses the clamped value.
    NodeId log(NodeId a) {
        Tensor out = value(a);
        for (double& v : out.data) v = std::log(std::max(v, 1e-300));
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            const NodeId in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& vi = g.value(in);
            Tensor& gi = g.nodes_[in].grad;
            for (size_t i = 0; i < go.data.size(); ++i)
                gi.data[i] += go.data[i] / std::max(vi.data[i], 1e-300);
        });
    }

    NodeId sigmoid(NodeId a) {
        Tensor out = value(a);
        for (double& v : out.data) {
            if (v >= 0) {
                v = 1.0 / (1.0 + std::exp(-v));
            } else {
                const double e = std::exp(v);
                v = e / (1.0 + e);
            }
        }
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            const NodeId in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& s = g.nodes_[self].value;
            Tensor& gi = g.nodes_[in].grad;
            for (size_t i = 0; i < go.data.size(); ++i)
                gi.data[i] += go.data[i] * s.data[i] * (1.0 - s.data[i]);
        });
    }

    NodeId relu(NodeId a) {
        Tensor out = value(a);
        for (double& v : out.data) v = std::max(v, 0.0);
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            const NodeId in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& vi = g.value(in);
            Tensor& gi = g.nodes_[in].grad;
            for (size_t i = 0; i < go.data.size(); ++i)
                if (vi.data[i] > 0.0) gi.data[i] += go.data[i];
        });
    }

    NodeId square(NodeId a) {
        Tensor out = value(a);
        for (double& v : out.data) v *= v;
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            const NodeId in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& vi = g.value(in);
            Tensor& gi = g.nodes_[in].grad;
            for (size_t i = 0; i < go.data.size(); ++i)
                gi.data[i] += go.data[i] * 2.0 * vi.data[i];
        });
    }

    NodeId sqrt(NodeId a) {
        Tensor out = value(a);
        for (double& v : out.data) v = std::sqrt(v);
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            const NodeId in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& s = g.nodes_[self].value;
            Tensor& gi = g.nodes_[in].grad;
            for (size_t i = 0; i < go.data.size(); ++i)
                gi.data[i] += go.data[i] * 0.5 / std::max(s.data[i], 1e-300);
        });
    }

    /// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    NodeId huber(NodeId a) {
        Tensor out = value(a);
        for (double& v : out.data)
            v = std::fabs(v) < 1.0 ? 0.5 * v * v : std::fabs(v) - 0.5;
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            const NodeId in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& vi = g.value(in);
            Tensor& gi = g.nodes_[in].grad;
            for (size_t i = 0; i < go.data.size(); ++i) {
                const double x = vi.data[i];
                gi.data[i] += go.data[i] * (std::fabs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0));
            }
        });
    }

    /// max(v, c); gradient flows only where v > c.
    NodeId clamp_min(NodeId a, double c) {
        Tensor out = value(a);
        for (double& v : out.data) v = std::max(v, c);
        return add_node(std::move(out), {a}, [c](Graph& g, NodeId self) {
            const NodeId in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& vi = g.value(in);
            Tensor& gi = g.nodes_[in].grad;
            for (size_t i = 0; i < go.data.size(); ++i)
                if (vi.data[i] > c) gi.data[i] += go.data[i];
        });
    }

    // ---- shape ----

    NodeId reshape(NodeId a, std::vector<int64_t> new_shape) {
        if (Tensor::numel_of(new_shape) != value(a).numel())
            throw std::invalid_argument("reshape: element count mismatch");
        Tensor out(std::move(new_shape), value(a).data);
        return add_node(std::move(out), {a}, [](Graph& g, NodeId self) {
            const NodeId in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            Tensor& gi = g.nodes_[in].grad;
            for (size_t i = 0; i < go.data.size(); ++i) gi.data[i] += go.data[i];
        });
    }

    // ---- reductions ----

    NodeId sum(NodeId a) {
        double s = 0.0;
        for (double v : value(a).data) s += v;
        return add_node(Tensor::scalar(s), {a}, [](Graph& g, NodeId self) {
            const double go = g.nodes_[self].grad.data[0];
            Tensor& gi = g.nodes_[g.nodes_[self].inputs[0]].grad;
            for (double& v : gi.data) v += go;
        });
    }

    NodeId sum_lastdim(NodeId a) {
        const Tensor& v = value(a);
        if (v.rank() < 1) throw std::invalid_argument("sum_lastdim: rank 0 input");
        const int64_t last = v.shape.back();
        const int64_t rows = v.numel() / std::max<int64_t>(last, 1);
        Tensor out(std::vector<int64_t>(v.shape.begin(), v.shape.end() - 1));
        for (int64_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int64_t j = 0; j < last; ++j) s += v.data[r * last + j];
            out.data[r] = s;
        }
        return add_node(std::move(out), {a}, [last, rows](Graph& g, NodeId self) {
            const Tensor& go = g.nodes_[self].grad;
            Tensor& gi = g.nodes_[g.nodes_[self].inputs[0]].grad;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < last; ++j) gi.data[r * last + j] += go.data[r];
        });
    }

    /// Max over all elements (subgradient to the first argmax).
    NodeId max(NodeId a) {
        const Tensor& v = value(a);
        if (v.numel() == 0) throw std::invalid_argument("max: empty tensor");
        size_t arg = 0;
        for (size_t i = 1; i < v.data.size(); ++i)
            if (v.data[i] > v.data[arg]) arg = i;
        return add_node(Tensor::scalar(v.data[arg]), {a}, [arg](Graph& g, NodeId self) {
            g.nodes_[g.nodes_[self].inputs[0]].grad.data[arg] +=
                g.nodes_[self].grad.data[0];
        });
    }

    // ---- softmax family (max-subtraction stabilized) ----

    NodeId softmax_lastdim(NodeId a) {
        const Tensor& v = value(a);
        if (v.rank() < 1) throw std::invalid_argument("softmax_lastdim: rank 0 input");
        const int64_t last = v.shape.back();
        const int64_t rows = v.numel() / last;
        Tensor out = v;
        for (int64_t r = 0; r < rows; ++r) {
            double* row = out.data.data() + r * last;
            double m = row[0];
            for (int64_t j = 1; j < last; ++j) m = std::max(m, row[j]);
            double s = 0.0;
            for (int64_t j = 0; j < last; ++j) {
                row[j] = std::exp(row[j] - m);
                s += row[j];
            }
            for (int64_t j = 0; j < last; ++j) row[j] /= s;
        }
        return add_node(std::move(out), {a}, [last, rows](Graph& g, NodeId self) {
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& y = g.nodes_[self].value;
            Tensor& gi = g.nodes_[g.nodes_[self].inputs[0]].grad;
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = y.data.data() + r * last;
                const double* gr = go.data.data() + r * last;
                double dot = 0.0;
                for (int64_t j = 0; j < last; ++j) dot += yr[j] * gr[j];
                for (int64_t j = 0; j < last; ++j)
                    gi.data[r * last + j] += yr[j] * (gr[j] - dot);
            }
        });
    }

    NodeId logsumexp_lastdim(NodeId a) {
        const Tensor& v = value(a);
        if (v.rank() < 1) throw std::invalid_argument("logsumexp_lastdim: rank 0 input");
        const int64_t last = v.shape.back();
        const int64_t rows = v.numel() / last;
        Tensor out(std::vector<int64_t>(v.shape.begin(), v.shape.end() - 1));
        for (int64_t r = 0; r < rows; ++r) {
            const double* row = v.data.data() + r * last;
            double m = row[0];
            for (int64_t j = 1; j < last; ++j) m = std::max(m, row[j]);
            double s = 0.0;
            for (int64_t j = 0; j < last; ++j) s += std::exp(row[j] - m);
            out.data[r] = m + std::log(s);
        }
        return add_node(std::move(out), {a}, [last, rows](Graph& g, NodeId self) {
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& vi = g.value(g.nodes_[self].inputs[0]);
            const Tensor& lse = g.nodes_[self].value;
            Tensor& gi = g.nodes_[g.nodes_[self].inputs[0]].grad;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < last; ++j)
                    gi.data[r * last + j] +=
                        go.data[r] * std::exp(vi.data[r * last + j] - lse.data[r]);
        });
    }

    // ---- indexing ----

    /// View input as [n0, rest] and pick rows. Backward scatter-adds.
    NodeId gather_rows(NodeId a, std::vector<int64_t> idx) {
        const Tensor& v = value(a);
        if (v.rank() < 1) throw std::invalid_argument("gather_rows: rank 0 input");
        const int64_t n0 = v.shape[0];
        const int64_t rest = v.numel() / std::max<int64_t>(n0, 1);
        std::vector<int64_t> oshape = v.shape;
        oshape[0] = static_cast<int64_t>(idx.size());
        Tensor out(oshape);
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= n0)
                throw std::out_of_range("gather_rows: index out of range");
            std::memcpy(out.data.data() + i * rest, v.data.data() + idx[i] * rest,
                        sizeof(double) * static_cast<size_t>(rest));
        }
        return add_node(std::move(out), {a},
                        [idx = std::move(idx), rest](Graph& g, NodeId self) {
                            const Tensor& go = g.nodes_[self].grad;
                            Tensor& gi = g.nodes_[g.nodes_[self].inputs[0]].grad;
                            for (size_t i = 0; i < idx.size(); ++i)
                                for (int64_t j = 0; j < rest; ++j)
                                    gi.data[idx[i] * rest + j] += go.data[i * rest + j];
                        });
    }

    /// View input as [rows, last] and pick columns: out[r,c] = in[r, idx[c]].
    NodeId gather_cols(NodeId a, std::vector<int64_t> idx) {
        const Tensor& v = value(a);
        if (v.rank() < 1) throw std::invalid_argument("gather_cols: rank 0 input");
        const int64_t last = v.shape.back();
        const int64_t rows = v.numel() / last;
        const int64_t m = static_cast<int64_t>(idx.size());
        std::vector<int64_t> oshape = v.shape;
        oshape.back() = m;
        Tensor out(oshape);
        for (int64_t c = 0; c < m; ++c)
            if (idx[c] < 0 || idx[c] >= last)
                throw std::out_of_range("gather_cols: index out of range");
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < m; ++c)
                out.data[r * m + c] = v.data[r * last + idx[c]];
        return add_node(std::move(out), {a},
                        [idx = std::move(idx), last, rows, m](Graph& g, NodeId self) {
                            const Tensor& go = g.nodes_[self].grad;
                            Tensor& gi = g.nodes_[g.nodes_[self].inputs[0]].grad;
                            for (int64_t r = 0; r < rows; ++r)
                                for (int64_t c = 0; c < m; ++c)
                                    gi.data[r * last + idx[c]] += go.data[r * m + c];
                        });
    }

    /// View input as [rows, last]; out[r] = in[r, idx[r]].
    NodeId select_lastdim(NodeId a, std::vector<int64_t> idx) {
        const Tensor& v = value(a);
        const int64_t last = v.shape.back();
        const int64_t rows = v.numel() / last;
        if (static_cast<int64_t>(idx.size()) != rows)
            throw std::invalid_argument("select_lastdim: one index per row required");
        Tensor out(std::vector<int64_t>(v.shape.begin(), v.shape.end() - 1));
        for (int64_t r = 0; r < rows; ++r) {
            if (idx[r] < 0 || idx[r] >= last)
                throw std::out_of_range("select_lastdim: index out of range");
            out.data[r] = v.data[r * last + idx[r]];
        }
        return add_node(std::move(out), {a},
                        [idx = std::move(idx), last, rows](Graph& g, NodeId self) {
                            const Tensor& go = g.nodes_[self].grad;
                            Tensor& gi = g.nodes_[g.nodes_[self].inputs[0]].grad;
                            for (int64_t r = 0; r < rows; ++r)
                                gi.data[r * last + idx[r]] += go.data[r];
                        });
    }

    // ---- linear algebra / conv ----

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0])
            throw std::invalid_argument("matmul: incompatible shapes " +
                                        va.shape_str() + " x " + vb.shape_str());
        const int64_t m = va.shape[0], k = va.shape[1], n = vb.shape[1];
        Tensor out({m, n});
        for (int64_t i = 0; i < m; ++i)
            for (int64_t p = 0; p < k; ++p) {
                const double aip = va.data[i * k + p];
                for (int64_t j = 0; j < n; ++j)
                    out.data[i * n + j] += aip * vb.data[p * n + j];
            }
        return add_node(std::move(out), {a, b}, [m, k, n](Graph& g, NodeId self) {
            const auto& in = g.nodes_[self].inputs;
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& va2 = g.value(in[0]);
            const Tensor& vb2 = g.value(in[1]);
            Tensor& ga = g.nodes_[in[0]].grad;
            Tensor& gb = g.nodes_[in[1]].grad;
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    const double go_ij = go.data[i * n + j];
                    for (int64_t p = 0; p < k; ++p) {
                        ga.data[i * k + p] += go_ij * vb2.data[p * n + j];
                        gb.data[p * n + j] += go_ij * va2.data[i * k + p];
                    }
                }
        });
    }

    /// x: [Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout]. Zero padding.
    NodeId conv2d(NodeId x, NodeId w, NodeId bias, int stride, int pad) {
        const Tensor& vx = value(x);
        const Tensor& vw = value(w);
        const Tensor& vb = value(bias);
        if (vx.rank() != 3 || vw.rank() != 4 || vb.rank() != 1 ||
            vx.shape[0] != vw.shape[1] || vb.shape[0] != vw.shape[0])
            throw std::invalid_argument("conv2d: incompatible shapes");
        const int64_t cin = vx.shape[0], h = vx.shape[1], wd = vx.shape[2];
        const int64_t cout = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
        const int64_t ho = (h + 2 * pad - kh) / stride + 1;
        const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
        if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: empty output");
        Tensor out({cout, ho, wo});
        conv_forward(vx, vw, vb, out, stride, pad);
        ConvDims d{cin, h, wd, cout, kh, kw, ho, wo, stride, pad};
        return add_node(std::move(out), {x, w, bias}, [d](Graph& g, NodeId self) {
            const auto& in = g.nodes_[self].inputs;
            conv_backward(g.nodes_[self].grad, g.value(in[0]), g.value(in[1]),
                          g.nodes_[in[0]].grad, g.nodes_[in[1]].grad,
                          g.nodes_[in[2]].grad, d);
        });
    }

    /// Permute a [D*rest, F, F] conv output into anchor-major rows
    /// [F*F*D, rest]; anchor index = (y*F + x)*D + d.
    NodeId chw_to_anchor_rows(NodeId a, int64_t anchors_per_cell) {
        const Tensor& v = value(a);
        if (v.rank() != 3) throw std::invalid_argument("chw_to_anchor_rows: want CHW");
        const int64_t c = v.shape[0], h = v.shape[1], w = v.shape[2];
        if (c % anchors_per_cell != 0)
            throw std::invalid_argument("chw_to_anchor_rows: channels not divisible");
        const int64_t rest = c / anchors_per_cell;
        Tensor out({h * w * anchors_per_cell, rest});
        const int64_t dd = anchors_per_cell;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t d = 0; d < dd; ++d)
                    for (int64_t r = 0; r < rest; ++r)
                        out.data[(((y * w + x) * dd + d)) * rest + r] =
                            v.data[(d * rest + r) * h * w + y * w + x];
        return add_node(std::move(out), {a}, [h, w, dd, rest](Graph& g, NodeId self) {
            const Tensor& go = g.nodes_[self].grad;
            Tensor& gi = g.nodes_[g.nodes_[self].inputs[0]].grad;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x)
                    for (int64_t d = 0; d < dd; ++d)
                        for (int64_t r = 0; r < rest; ++r)
                            gi.data[(d * rest + r) * h * w + y * w + x] +=
                                go.data[(((y * w + x) * dd + d)) * rest + r];
        });
    }

    // ---- backward ----

    /// Propagate gradients from a scalar root. Each node is visited exactly
    /// once, in reverse construction order (a topological order by
    /// construction). Unreached leaves keep zero gradients.
    void backward(NodeId root) {
        check(root);
        if (value(root).numel() != 1 || value(root).rank() != 0)
            throw std::invalid_argument("backward: root must be a scalar");
        for (auto& n : nodes_) {
            n.grad.shape = n.value.shape;
            n.grad.data.assign(n.value.data.size(), 0.0);
        }
        nodes_[root].grad.data[0] = 1.0;
        for (NodeId i = root; i >= 0; --i)
            if (nodes_[i].backward && has_nonzero(nodes_[i].grad))
                nodes_[i].backward(*this, i);
    }

private:
    struct ConvDims {
        int64_t cin, h, w, cout, kh, kw, ho, wo;
        int stride, pad;
    };

    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<NodeId> inputs;
        std::function<void(Graph&, NodeId)> backward;
    };

    std::vector<Node> nodes_;

    NodeId add_node(Tensor v, std::vector<NodeId> inputs,
                    std::function<void(Graph&, NodeId)> bw) {
        nodes_.push_back(Node{std::move(v), Tensor{}, std::move(inputs), std::move(bw)});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId check(NodeId id) const {
        if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
            throw std::out_of_range("Graph: bad node id");
        return id;
    }

    static bool has_nonzero(const Tensor& t) {
        for (double v : t.data)
            if (v != 0.0) return true;
        return false;
    }

    void accum(NodeId id, const Tensor& g) {
        Tensor& dst = nodes_[id].grad;
        for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
    }
    void accum_scaled(NodeId id, const Tensor& g, double c) {
        Tensor& dst = nodes_[id].grad;
        for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += c * g.data[i];
    }
    void accum_mul(NodeId id, const Tensor& g, const Tensor& m) {
        Tensor& dst = nodes_[id].grad;
        for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i] * m.data[i];
    }

    static void conv_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                             Tensor& out, int stride, int pad) {
        const int64_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2];
        const int64_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        const int64_t ho = out.shape[1], wo = out.shape[2];
        for (int64_t oc = 0; oc < cout; ++oc) {
            double* op = out.data.data() + oc * ho * wo;
            for (int64_t i = 0; i < ho * wo; ++i) op[i] = b.data[oc];
            for (int64_t ic = 0; ic < cin; ++ic) {
                const double* xp = x.data.data() + ic * h * wd;
                const double* wp = w.data.data() + ((oc * cin + ic) * kh) * kw;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy0 = oy * stride - pad;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix0 = ox * stride - pad;
                        double acc = 0.0;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = iy0 + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = ix0 + kx;
                                if (ix < 0 || ix >= wd) continue;
                                acc += xp[iy * wd + ix] * wp[ky * kw + kx];
                            }
                        }
                        op[oy * wo + ox] += acc;
                    }
                }
            }
        }
    }

    static void conv_backward(const Tensor& go, const Tensor& x, const Tensor& w,
                              Tensor& gx, Tensor& gw, Tensor& gb, const ConvDims& d) {
        for (int64_t oc = 0; oc < d.cout; ++oc) {
            const double* gop = go.data.data() + oc * d.ho * d.wo;
            double acc = 0.0;
            for (int64_t i = 0; i < d.ho * d.wo; ++i) acc += gop[i];
            gb.data[oc] += acc;
            for (int64_t ic = 0; ic < d.cin; ++ic) {
                const double* xp = x.data.data() + ic * d.h * d.w;
                const double* wp = w.data.data() + ((oc * d.cin + ic) * d.kh) * d.kw;
                double* gxp = gx.data.data() + ic * d.h * d.w;
                double* gwp = gw.data.data() + ((oc * d.cin + ic) * d.kh) * d.kw;
                for (int64_t oy = 0; oy < d.ho; ++oy) {
                    const int64_t iy0 = oy * d.stride - d.pad;
                    for (int64_t ox = 0; ox < d.wo; ++ox) {
                        const double g = gop[oy * d.wo + ox];
                        if (g == 0.0) continue;
                        const int64_t ix0 = ox * d.stride - d.pad;
                        for (int64_t ky = 0; ky < d.kh; ++ky) {
                            const int64_t iy = iy0 + ky;
                            if (iy < 0 || iy >= d.h) continue;
                            for (int64_t kx = 0; kx < d.kw; ++kx) {
                                const int64_t ix = ix0 + kx;
                                if (ix < 0 || ix >= d.w) continue;
                                gxp[iy * d.w + ix] += g * wp[ky * d.kw + kx];
                                gwp[ky * d.kw + kx] += g * xp[iy * d.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
};

// ---- finite differences ----

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string worst;  // "param_index/elem_index" of the worst entry
};

/// Compares an analytic gradient against central finite differences.
/// `fn` must be deterministic (any per-pass noise frozen); this is checked
/// by evaluating the base point twice.
inline FiniteDiffReport finite_diff_check(
    const std::function<double(const std::vector<Tensor>&)>& fn,
    const std::function<std::vector<Tensor>(const std::vector<Tensor>&)>& analytic,
    std::vector<Tensor> params, double step, double tolerance) {
    const double f0 = fn(params);
    const double f1 = fn(params);
    if (std::memcmp(&f0, &f1, sizeof(double)) != 0)
        throw std::runtime_error("finite_diff_check: fn is not deterministic");
    const std::vector<Tensor> g = analytic(params);
    if (g.size() != params.size())
        throw std::invalid_argument("finite_diff_check: gradient count mismatch");
    FiniteDiffReport rep;
    for (size_t p = 0; p < params.size(); ++p) {
        if (!g[p].same_shape(params[p]))
            throw std::invalid_argument("finite_diff_check: gradient shape mismatch");
        for (size_t i = 0; i < params[p].data.size(); ++i) {
            const double orig = params[p].data[i];
            params[p].data[i] = orig + step;
            const double fp = fn(params);
            params[p].data[i] = orig - step;
            const double fm = fn(params);
            params[p].data[i] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = g[p].data[i];
            const double denom = std::max({std::fabs(an), std::fabs(fd), 1.0});
            const double rel = std::fabs(an - fd) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = std::to_string(p) + "/" + std::to_string(i);
            }
        }
    }
    rep.pass = rep.max_rel_err <= tolerance;
    return rep;
}

}  // namespace mdal::ad
