// SPDX-License-Identifier: Apache-2.0
#include "evl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evl/kernels.hpp"

namespace evl {

namespace {

using BackwardFn = std::function<void(Node&)>;

Tensor make_op(Shape shape, std::vector<double> value, const char* op, std::vector<NodePtr> parents,
               BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    node->seq = next_sequence_number();
    const bool track = GradMode::enabled() &&
                       std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (track) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(fn);
    }
    return Tensor(std::move(node));
}

// Number of times `b` repeats inside `a` under trailing-suffix broadcasting.
std::size_t broadcast_outer(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    bool ok = sb.size() <= sa.size();
    for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sa[sa.size() - sb.size() + i] == sb[i];
    if (!ok) throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(sb) + " onto " + to_string(sa));
    return a.numel() / b.numel();
}

Shape with_last_two(const Shape& batch, std::size_t r, std::size_t c) {
    Shape s = batch;
    s.push_back(r);
    s.push_back(c);
    return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const std::size_t outer = broadcast_outer(a, b, "add");
    const std::size_t inner = b.numel();
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += bd[i];
    return make_op(a.shape(), std::move(out), "add", {a.ptr(), b.ptr()}, [outer, inner](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const std::size_t outer = broadcast_outer(a, b, "sub");
    const std::size_t inner = b.numel();
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] -= bd[i];
    return make_op(a.shape(), std::move(out), "sub", {a.ptr(), b.ptr()}, [outer, inner](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) g[i] -= self.grad[o * inner + i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const std::size_t outer = broadcast_outer(a, b, "mul");
    const std::size_t inner = b.numel();
    std::vector<double> out(a.numel());
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = ad[o * inner + i] * bd[i];
    return make_op(a.shape(), std::move(out), "mul", {a.ptr(), b.ptr()}, [outer, inner](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) g[o * inner + i] += self.grad[o * inner + i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i] * pa.value[o * inner + i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= factor;
    return make_op(a.shape(), std::move(out), "scale", {a.ptr()}, [factor](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return make_op({1}, {total}, "sum", {a.ptr()}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
    }
    const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
    const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    const bool batch_ok = a_batch == b_batch || a_batch.empty() || b_batch.empty();
    if (k != kb || !batch_ok) {
        throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const Shape batch_shape = a_batch.empty() ? b_batch : a_batch;
    const std::size_t batch = numel(batch_shape);
    const bool a_bcast = a_batch.empty() && batch > 1;
    const bool b_bcast = b_batch.empty() && batch > 1;

    kernels::GemmShape s;
    s.batch = batch;
    s.m = m;
    s.n = n;
    s.k = k;
    s.stride_a = a_bcast ? 0 : m * k;
    s.stride_b = b_bcast ? 0 : k * n;
    s.stride_c = m * n;
    std::vector<double> out(batch * m * n);
    kernels::gemm(s, a.data().data(), b.data().data(), out.data(), false);

    return make_op(with_last_two(batch_shape, m, n), std::move(out), "matmul", {a.ptr(), b.ptr()},
                   [=](Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const double* g = self.grad.data();
                       if (pa.requires_grad) {
                           // da = g * b^T
                           auto& ga = pa.ensure_grad();
                           kernels::GemmShape d;
                           d.m = m;
                           d.n = k;
                           d.k = n;
                           d.trans_b = true;
                           if (!a_bcast) {
                               d.batch = batch;
                               d.stride_a = m * n;
                               d.stride_b = b_bcast ? 0 : k * n;
                               d.stride_c = m * k;
                               kernels::gemm(d, g, pb.value.data(), ga.data(), true);
                           } else {
                               for (std::size_t i = 0; i < batch; ++i)
                                   kernels::gemm(d, g + i * m * n, pb.value.data() + i * k * n, ga.data(), true);
                           }
                       }
                       if (pb.requires_grad) {
                           // db = a^T * g
                           auto& gb = pb.ensure_grad();
                           kernels::GemmShape d;
                           d.m = k;
                           d.n = n;
                           d.k = m;
                           d.trans_a = true;
                           if (!b_bcast) {
                               d.batch = batch;
                               d.stride_a = a_bcast ? 0 : m * k;
                               d.stride_b = m * n;
                               d.stride_c = k * n;
                               kernels::gemm(d, pa.value.data(), g, gb.data(), true);
                           } else {
                               for (std::size_t i = 0; i < batch; ++i)
                                   kernels::gemm(d, pa.value.data() + i * m * k, g + i * m * n, gb.data(), true);
                           }
                       }
                   });
}

Tensor transpose_last(const Tensor& a) {
    if (a.rank() < 2) throw DimensionError("transpose_last needs rank >= 2, got " + to_string(a.shape()));
    std::vector<std::size_t> perm(a.rank());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
    const auto& in_shape = a.shape();
    const std::size_t r = in_shape.size();
    if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + to_string(in_shape));
    std::vector<bool> seen(r, false);
    for (auto p : perm) {
        if (p >= r || seen[p]) throw DimensionError("permute: invalid axis order for " + to_string(in_shape));
        seen[p] = true;
    }
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
    Shape out_shape(r);
    std::vector<std::size_t> src_strides(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in_shape[perm[i]];
        src_strides[i] = in_strides[perm[i]];
    }
    // source offset for each output element, reused by backward
    const std::size_t total = a.numel();
    auto index = std::make_shared<std::vector<std::size_t>>(total);
    std::vector<std::size_t> counter(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < total; ++o) {
        (*index)[o] = src;
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            src += src_strides[d];
            if (counter[d] < out_shape[d]) break;
            src -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    std::vector<double> out(total);
    const auto ad = a.data();
    for (std::size_t o = 0; o < total; ++o) out[o] = ad[(*index)[o]];
    return make_op(std::move(out_shape), std::move(out), "permute", {a.ptr()}, [index](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*index)[o]] += self.grad[o];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw DimensionError("reshape " + to_string(a.shape()) + " -> " + to_string(shape) + " changes element count");
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op(std::move(shape), std::move(out), "reshape", {a.ptr()}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor softmax(const Tensor& x, int axis) {
    const auto r = static_cast<int>(x.rank());
    const int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for " + to_string(x.shape()));
    if (ax != r - 1) {
        // Move the axis last, normalize, move it back.
        std::vector<std::size_t> perm(x.rank());
        std::iota(perm.begin(), perm.end(), 0);
        perm.erase(perm.begin() + ax);
        perm.push_back(static_cast<std::size_t>(ax));
        std::vector<std::size_t> inverse(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
        return permute(softmax(permute(x, perm), -1), inverse);
    }
    const std::size_t n = x.dim(-1);
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    kernels::softmax_rows(x.data().data(), out.data(), rows, n);
    return make_op(x.shape(), std::move(out), "softmax", {x.ptr()}, [rows, n](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        kernels::softmax_rows_backward(self.value.data(), self.grad.data(), g.data(), rows, n);
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t n = x.dim(-1);
    if (gain.numel() != n || bias.numel() != n) {
        throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                             " do not match last extent of " + to_string(x.shape()));
    }
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    kernels::layer_norm_rows(x.data().data(), gain.data().data(), bias.data().data(), eps, out.data(), xhat->data(),
                             rstd->data(), rows, n);
    return make_op(x.shape(), std::move(out), "layer_norm", {x.ptr(), gain.ptr(), bias.ptr()},
                   [rows, n, xhat, rstd](Node& self) {
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       const double* g = self.grad.data();
                       const double* xh = xhat->data();
                       if (pg.requires_grad) {
                           auto& gg = pg.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xh[r * n + j];
                       }
                       if (pb.requires_grad) {
                           auto& gb = pb.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                       }
                       if (px.requires_grad) {
                           auto& gx = px.ensure_grad();
                           const double inv_n = 1.0 / static_cast<double>(n);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double dxh = g[r * n + j] * pg.value[j];
                                   m1 += dxh;
                                   m2 += dxh * xh[r * n + j];
                               }
                               m1 *= inv_n;
                               m2 *= inv_n;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double dxh = g[r * n + j] * pg.value[j];
                                   gx[r * n + j] += (*rstd)[r] * (dxh - m1 - xh[r * n + j] * m2);
                               }
                           }
                       }
                   });
}

Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.numel());
    kernels::gelu(x.data().data(), out.data(), out.size());
    return make_op(x.shape(), std::move(out), "gelu", {x.ptr()}, [](Node& self) {
        auto& px = *self.parents[0];
        kernels::gelu_backward(px.value.data(), self.grad.data(), px.ensure_grad().data(), self.grad.size());
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2 || x.dim(-1) != weight.dim(0)) {
        throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                             to_string(weight.shape()));
    }
    const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
    const bool has_bias = bias.defined();
    if (has_bias && bias.numel() != out_dim) {
        throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                             to_string(weight.shape()));
    }
    const std::size_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    std::vector<double> out(rows * out_dim);
    if (has_bias) {
        for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * out_dim);
    }
    kernels::GemmShape s;
    s.m = rows;
    s.n = out_dim;
    s.k = in;
    kernels::gemm(s, x.data().data(), weight.data().data(), out.data(), has_bias);

    std::vector<NodePtr> parents{x.ptr(), weight.ptr()};
    if (has_bias) parents.push_back(bias.ptr());
    return make_op(std::move(out_shape), std::move(out), "linear", std::move(parents), [=](Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const double* g = self.grad.data();
        if (px.requires_grad) {
            kernels::GemmShape d;
            d.m = rows;
            d.n = in;
            d.k = out_dim;
            d.trans_b = true;
            kernels::gemm(d, g, pw.value.data(), px.ensure_grad().data(), true);
        }
        if (pw.requires_grad) {
            kernels::GemmShape d;
            d.m = in;
            d.n = out_dim;
            d.k = rows;
            d.trans_a = true;
            kernels::gemm(d, px.value.data(), g, pw.ensure_grad().data(), true);
        }
        if (has_bias && self.parents[2]->requires_grad) {
            auto& gb = self.parents[2]->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
        }
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id) {
    if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
        throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                             std::to_string(targets.size()) + " targets");
    }
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    std::size_t count = 0;
    for (std::size_t t = 0; t < rows; ++t) {
        const int y = targets[t];
        if (y == ignore_id) continue;
        if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
            throw IndexError("cross_entropy: target " + std::to_string(y) + " at position " + std::to_string(t) +
                             " outside vocabulary of " + std::to_string(vocab));
        }
        ++count;
    }
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    kernels::softmax_rows(logits.data().data(), probs->data(), rows, vocab);
    double total = 0.0;
    const auto ld = logits.data();
    for (std::size_t t = 0; t < rows; ++t) {
        const int y = targets[t];
        if (y == ignore_id) continue;
        const double* row = ld.data() + t * vocab;
        const double mx = *std::max_element(row, row + vocab);
        double z = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
        total += std::log(z) + mx - row[y];
    }
    const double loss = count ? total / static_cast<double>(count) : 0.0;
    std::vector<int> tgt(targets.begin(), targets.end());
    return make_op({1}, {loss}, "cross_entropy", {logits.ptr()}, [=](Node& self) {
        if (count == 0) return;
        auto& g = self.parents[0]->ensure_grad();
        const double w = self.grad[0] / static_cast<double>(count);
        for (std::size_t t = 0; t < rows; ++t) {
            if (tgt[t] == ignore_id) continue;
            for (std::size_t j = 0; j < vocab; ++j) g[t * vocab + j] += w * (*probs)[t * vocab + j];
            g[t * vocab + static_cast<std::size_t>(tgt[t])] -= w;
        }
    });
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
    if (prediction.shape() != target.shape()) {
        throw DimensionError("mse_loss: " + to_string(prediction.shape()) + " vs " + to_string(target.shape()));
    }
    return mean(mul(sub(prediction, target), sub(prediction, target)));
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) throw DimensionError("embedding table must be 2-D, got " + to_string(table.shape()));
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<double> out(ids.size() * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
            throw IndexError("embedding: id " + std::to_string(ids[t]) + " outside table of " + std::to_string(vocab));
        }
        std::copy_n(table.data().begin() + ids[t] * d, d, out.begin() + t * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return make_op({ids.size(), d}, std::move(out), "embedding", {table.ptr()}, [idv, d](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t t = 0; t < idv.size(); ++t)
            for (std::size_t j = 0; j < d; ++j) g[idv[t] * d + j] += self.grad[t * d + j];
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    std::vector<std::size_t> offsets;
    std::vector<double> out;
    std::vector<NodePtr> parents;
    for (const auto& p : parts) {
        if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
            throw DimensionError("concat_rows: " + to_string(p.shape()) + " does not match " + to_string(parts[0].shape()));
        }
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
        rows += p.dim(0);
        parents.push_back(p.ptr());
    }
    Shape shape = tail;
    shape.insert(shape.begin(), rows);
    return make_op(std::move(shape), std::move(out), "concat_rows", std::move(parents), [offsets](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = *self.parents[i];
            if (!p.requires_grad) continue;
            auto& g = p.ensure_grad();
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[offsets[i] + j];
        }
    });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    if (begin >= end || end > x.dim(0)) {
        throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                             to_string(x.shape()));
    }
    const std::size_t row = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = end - begin;
    std::vector<double> out(x.data().begin() + begin * row, x.data().begin() + end * row);
    return make_op(std::move(shape), std::move(out), "slice_rows", {x.ptr()}, [begin, row](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t j = 0; j < self.grad.size(); ++j) g[begin * row + j] += self.grad[j];
    });
}

Tensor combine_rows(const Tensor& x, const std::vector<std::vector<RowTerm>>& terms) {
    if (x.rank() != 2) throw DimensionError("combine_rows expects [rows, d], got " + to_string(x.shape()));
    const std::size_t rows = x.dim(0), d = x.dim(1);
    std::vector<double> out(terms.size() * d, 0.0);
    const auto xd = x.data();
    for (std::size_t j = 0; j < terms.size(); ++j) {
        for (const auto& t : terms[j]) {
            if (t.row >= rows) throw IndexError("combine_rows: row " + std::to_string(t.row) + " out of range");
            for (std::size_t c = 0; c < d; ++c) out[j * d + c] += t.weight * xd[t.row * d + c];
        }
    }
    return make_op({terms.size(), d}, std::move(out), "combine_rows", {x.ptr()}, [terms, d](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t j = 0; j < terms.size(); ++j)
            for (const auto& t : terms[j])
                for (std::size_t c = 0; c < d; ++c) g[t.row * d + c] += t.weight * self.grad[j * d + c];
    });
}

}  // namespace evl
