#include "delta/autodiff.hpp"

#include "delta/error.hpp"

#include <algorithm>
#include <cmath>

namespace delta {

const Tensor &Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->needs_grad(id_); }

Var Tape::constant(Tensor value) {
    DELTA_CHECK(value.all_finite(), NumericalError, "non-finite constant recorded on tape");
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Parameter &param) {
    DELTA_CHECK(param.value.all_finite(), NumericalError, "parameter '" + param.name + "' holds non-finite values");
    Node n;
    n.value = param.value;
    n.needs_grad = param.requires_grad;
    n.param = param.requires_grad ? &param : nullptr;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Tensor &Tape::grad(std::size_t id) {
    Node &n = nodes_[id];
    if (n.grad.empty()) {
        n.grad = Tensor(n.value.shape());
    }
    return n.grad;
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char *op_name) {
    if (!value.all_finite()) {
        throw NumericalError(std::string("non-finite output from op '") + op_name + "' with shape " +
                             shape_str(value.shape()));
    }
    Node n;
    n.value = std::move(value);
    for (const Var &v : inputs) {
        DELTA_CHECK(&v.tape() == this, ContractError, std::string("op '") + op_name + "' mixes tapes");
        n.inputs.push_back(v.id());
        n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
    }
    if (n.needs_grad) {
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
    DELTA_CHECK(&loss.tape() == this, ContractError, "loss does not belong to this tape");
    DELTA_CHECK(loss.value().numel() == 1, ContractError,
                "backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!nodes_[loss.id()].needs_grad) {
        return;
    }
    for (Node &n : nodes_) {
        n.grad = Tensor();
    }
    grad(loss.id()).fill(1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node &n = nodes_[id];
        if (!n.needs_grad || n.grad.empty()) {
            continue;
        }
        if (n.backward) {
            n.backward(*this, id);
        }
        if (n.param) {
            Parameter &p = *n.param;
            if (p.grad.empty()) {
                p.grad = Tensor(p.value.shape());
            }
            for (std::size_t i = 0; i < p.grad.numel(); ++i) {
                p.grad[i] += n.grad[i];
            }
        }
    }
}

namespace {

void require_same_shape(const Var &a, const Var &b, const char *op) {
    DELTA_CHECK(a.shape() == b.shape(), DimensionError,
                std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_matrix(const Var &a, const char *op) {
    DELTA_CHECK(a.shape().size() == 2, DimensionError,
                std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

void accumulate(Tensor &dst, const Tensor &src, double factor = 1.0) {
    for (std::size_t i = 0; i < dst.numel(); ++i) {
        dst[i] += factor * src[i];
    }
}

} // namespace

Var matmul(Var a, Var b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    DELTA_CHECK(b.shape()[0] == k, DimensionError,
                "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out({n, m});
    kernels::matmul(a.value().data(), b.value().data(), out.data(), n, k, m);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(
        std::move(out), {a, b},
        [ia, ib, n, k, m](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            if (t.needs_grad(ia)) {
                kernels::matmul_nt_acc(g.data(), t.value(ib).data(), t.grad(ia).data(), n, m, k);
            }
            if (t.needs_grad(ib)) {
                kernels::matmul_tn_acc(t.value(ia).data(), g.data(), t.grad(ib).data(), n, k, m);
            }
        },
        "matmul");
}

static Var add_scaled(Var a, Var b, double sb, const char *op) {
    require_same_shape(a, b, op);
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] += sb * b.value()[i];
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(
        std::move(out), {a, b},
        [ia, ib, sb](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            if (t.needs_grad(ia)) {
                accumulate(t.grad(ia), g);
            }
            if (t.needs_grad(ib)) {
                accumulate(t.grad(ib), g, sb);
            }
        },
        op);
}

Var add(Var a, Var b) { return add_scaled(a, b, 1.0, "add"); }

Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] -= b.value()[i];
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(
        std::move(out), {a, b},
        [ia, ib](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            if (t.needs_grad(ia)) {
                accumulate(t.grad(ia), g);
            }
            if (t.needs_grad(ib)) {
                accumulate(t.grad(ib), g, -1.0);
            }
        },
        "sub");
}

Var scale(Var a, double s) {
    Tensor out = a.value();
    for (double &v : out.values()) {
        v *= s;
    }
    const std::size_t ia = a.id();
    return a.tape().record(
        std::move(out), {a}, [ia, s](Tape &t, std::size_t self) { accumulate(t.grad(ia), t.grad(self), s); },
        "scale");
}

Var add_bias(Var x, Var bias) {
    require_matrix(x, "add_bias");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    DELTA_CHECK(bias.value().numel() == m, DimensionError,
                "add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
    Tensor out = x.value();
    kernels::add_row_bias(out.data(), bias.value().data(), n, m);
    const std::size_t ix = x.id(), ib = bias.id();
    return x.tape().record(
        std::move(out), {x, bias},
        [ix, ib, n, m](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            if (t.needs_grad(ix)) {
                accumulate(t.grad(ix), g);
            }
            if (t.needs_grad(ib)) {
                Tensor &gb = t.grad(ib);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < m; ++j) {
                        gb[j] += g[i * m + j];
                    }
                }
            }
        },
        "add_bias");
}

Var gelu(Var x) {
    Tensor out(x.shape());
    kernels::gelu(x.value().data(), out.data(), out.numel());
    const std::size_t ix = x.id();
    return x.tape().record(
        std::move(out), {x},
        [ix](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            const Tensor &xv = t.value(ix);
            Tensor &gx = t.grad(ix);
            for (std::size_t i = 0; i < gx.numel(); ++i) {
                gx[i] += g[i] * kernels::gelu_grad(xv[i]);
            }
        },
        "gelu");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    require_matrix(x, "layer_norm");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    DELTA_CHECK(gain.value().numel() == m && bias.value().numel() == m, DimensionError,
                "layer_norm: gain/bias width differs from input " + shape_str(x.shape()));
    Tensor out({n, m});
    std::vector<double> cache(n * m + n);
    kernels::layer_norm(x.value().data(), gain.value().data(), bias.value().data(), out.data(), cache.data(),
                        cache.data() + n * m, n, m, eps);
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
    Var y = x.tape().record(
        std::move(out), {x, gain, bias},
        [ix, ig, ib, n, m](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            const std::vector<double> &c = t.scratch(self);
            const double *xhat = c.data();
            const double *rstd = c.data() + n * m;
            const Tensor &gv = t.value(ig);
            if (t.needs_grad(ig) || t.needs_grad(ib)) {
                Tensor &gg = t.grad(ig);
                Tensor &gb = t.grad(ib);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < m; ++j) {
                        gg[j] += g[i * m + j] * xhat[i * m + j];
                        gb[j] += g[i * m + j];
                    }
                }
            }
            if (t.needs_grad(ix)) {
                Tensor &gx = t.grad(ix);
                const double inv_m = 1.0 / static_cast<double>(m);
                for (std::size_t i = 0; i < n; ++i) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        double d = g[i * m + j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[i * m + j];
                    }
                    mean_d *= inv_m;
                    mean_dx *= inv_m;
                    for (std::size_t j = 0; j < m; ++j) {
                        double d = g[i * m + j] * gv[j];
                        gx[i * m + j] += rstd[i] * (d - mean_d - xhat[i * m + j] * mean_dx);
                    }
                }
            }
        },
        "layer_norm");
    if (y.requires_grad()) {
        y.tape().scratch(y.id()) = std::move(cache);
    }
    return y;
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
    require_matrix(table, "embedding");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    DELTA_CHECK(!ids.empty(), LengthError, "embedding: empty id sequence");
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        DELTA_CHECK(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab, IndexError,
                    "embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                        std::to_string(vocab));
        std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    const std::size_t it = table.id();
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    return table.tape().record(
        std::move(out), {table},
        [it, idv = std::move(idv), d](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            Tensor &gt = t.grad(it);
            for (std::size_t i = 0; i < idv.size(); ++i) {
                double *dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += g[i * d + j];
                }
            }
        },
        "embedding");
}

Var add_positional(Var x, Var table) {
    require_matrix(x, "add_positional");
    require_matrix(table, "add_positional");
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    DELTA_CHECK(table.shape()[1] == d, DimensionError, "add_positional: width mismatch");
    DELTA_CHECK(n <= table.shape()[0], LengthError,
                "sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                    std::to_string(table.shape()[0]));
    Tensor out = x.value();
    for (std::size_t i = 0; i < n * d; ++i) {
        out[i] += table.value()[i];
    }
    const std::size_t ix = x.id(), it = table.id();
    return x.tape().record(
        std::move(out), {x, table},
        [ix, it, n, d](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            if (t.needs_grad(ix)) {
                accumulate(t.grad(ix), g);
            }
            if (t.needs_grad(it)) {
                Tensor &gt = t.grad(it);
                for (std::size_t i = 0; i < n * d; ++i) {
                    gt[i] += g[i];
                }
            }
        },
        "add_positional");
}

Var causal_self_attention(Var qkv, std::size_t n_heads) {
    require_matrix(qkv, "causal_self_attention");
    const std::size_t T = qkv.shape()[0];
    DELTA_CHECK(qkv.shape()[1] % 3 == 0, DimensionError, "attention input must be [T, 3d]");
    const std::size_t d = qkv.shape()[1] / 3;
    DELTA_CHECK(n_heads > 0 && d % n_heads == 0, DimensionError, "d_model not divisible by n_heads");
    const std::size_t stride = 3 * d;
    Tensor out({T, d});
    std::vector<double> probs(n_heads * T * T);
    const double *base = qkv.value().data();
    kernels::causal_attention(base, stride, base + d, stride, base + 2 * d, stride, out.data(), d, T, 0, d, n_heads,
                              probs.data());
    const std::size_t iq = qkv.id();
    Var y = qkv.tape().record(
        std::move(out), {qkv},
        [iq, T, d, n_heads, stride](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            const std::vector<double> &P = t.scratch(self);
            const double *x = t.value(iq).data();
            double *gx = t.grad(iq).data();
            const std::size_t hd = d / n_heads;
            const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
            std::vector<double> dp(T);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t off = h * hd;
                for (std::size_t i = 0; i < T; ++i) {
                    const double *pi = P.data() + (h * T + i) * T;
                    const double *go = g.data() + i * d + off;
                    double dot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double *vj = x + j * stride + 2 * d + off;
                        double *gvj = gx + j * stride + 2 * d + off;
                        double s = 0.0;
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += go[c] * vj[c];
                            gvj[c] += pi[j] * go[c];
                        }
                        dp[j] = s;
                        dot += pi[j] * s;
                    }
                    const double *qi = x + i * stride + off;
                    double *gqi = gx + i * stride + off;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = pi[j] * (dp[j] - dot) * sc;
                        if (ds == 0.0) {
                            continue;
                        }
                        const double *kj = x + j * stride + d + off;
                        double *gkj = gx + j * stride + d + off;
                        for (std::size_t c = 0; c < hd; ++c) {
                            gqi[c] += ds * kj[c];
                            gkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        },
        "causal_self_attention");
    if (y.requires_grad()) {
        y.tape().scratch(y.id()) = std::move(probs);
    }
    return y;
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
    require_matrix(x, "select_rows");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    DELTA_CHECK(!rows.empty(), ContractError, "select_rows: no rows selected");
    Tensor out({rows.size(), m});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        DELTA_CHECK(rows[i] < n, IndexError, "select_rows: row " + std::to_string(rows[i]) + " out of range");
        std::copy_n(x.value().data() + rows[i] * m, m, out.data() + i * m);
    }
    const std::size_t ix = x.id();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    return x.tape().record(
        std::move(out), {x},
        [ix, rv = std::move(rv), m](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            Tensor &gx = t.grad(ix);
            for (std::size_t i = 0; i < rv.size(); ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    gx[rv[i] * m + j] += g[i * m + j];
                }
            }
        },
        "select_rows");
}

Var combine_logits(Var l_m, Var l_prime, Var l_o, double alpha) {
    require_same_shape(l_m, l_prime, "combine_logits");
    require_same_shape(l_m, l_o, "combine_logits");
    DELTA_CHECK(alpha >= 0.0, ContractError, "combine_logits: alpha must be nonnegative");
    Tensor out(l_m.shape());
    kernels::combine(l_m.value().data(), l_prime.value().data(), l_o.value().data(), alpha, out.data(),
                     out.numel());
    const std::size_t im = l_m.id(), ip = l_prime.id(), io = l_o.id();
    return l_m.tape().record(
        std::move(out), {l_m, l_prime, l_o},
        [im, ip, io, alpha](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            if (t.needs_grad(im)) {
                accumulate(t.grad(im), g);
            }
            if (t.needs_grad(ip)) {
                accumulate(t.grad(ip), g, alpha);
            }
            if (t.needs_grad(io)) {
                accumulate(t.grad(io), g, -alpha);
            }
        },
        "combine_logits");
}

Var nll_rows(Var logits, std::span<const std::int32_t> targets) {
    require_matrix(logits, "nll_rows");
    const std::size_t n = logits.shape()[0], V = logits.shape()[1];
    DELTA_CHECK(targets.size() == n, DimensionError, "nll_rows: one target per row required");
    Tensor out({n});
    std::vector<double> probs(n * V);
    std::vector<double> logp(V);
    for (std::size_t i = 0; i < n; ++i) {
        DELTA_CHECK(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < V, IndexError,
                    "target id " + std::to_string(targets[i]) + " outside vocabulary of " + std::to_string(V));
        auto row = logits.value().row(i);
        log_softmax_row(row, logp);
        out[i] = -logp[static_cast<std::size_t>(targets[i])];
        for (std::size_t j = 0; j < V; ++j) {
            probs[i * V + j] = std::exp(logp[j]);
        }
    }
    const std::size_t il = logits.id();
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    Var y = logits.tape().record(
        std::move(out), {logits},
        [il, tv = std::move(tv), n, V](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            const std::vector<double> &p = t.scratch(self);
            Tensor &gl = t.grad(il);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < V; ++j) {
                    gl[i * V + j] += g[i] * p[i * V + j];
                }
                gl[i * V + static_cast<std::size_t>(tv[i])] -= g[i];
            }
        },
        "nll_rows");
    if (y.requires_grad()) {
        y.tape().scratch(y.id()) = std::move(probs);
    }
    return y;
}

Var kl_rows(const Tensor &ref_logits, Var logits) {
    require_matrix(logits, "kl_rows");
    DELTA_CHECK(ref_logits.shape() == logits.shape(), DimensionError,
                "kl_rows: reference " + shape_str(ref_logits.shape()) + " vs logits " + shape_str(logits.shape()));
    const std::size_t n = logits.shape()[0], V = logits.shape()[1];
    Tensor out({n});
    std::vector<double> p(n * V), q(n * V);
    std::vector<double> logp(V), logq(V);
    for (std::size_t i = 0; i < n; ++i) {
        log_softmax_row(ref_logits.row(i), logp);
        log_softmax_row(logits.value().row(i), logq);
        double kl = 0.0;
        for (std::size_t j = 0; j < V; ++j) {
            p[i * V + j] = std::exp(logp[j]);
            kl += p[i * V + j] * (logp[j] - logq[j]);
            q[i * V + j] = std::exp(logq[j]);
        }
        out[i] = kl;
    }
    const std::size_t il = logits.id();
    Var y = logits.tape().record(
        std::move(out), {logits},
        [il, p = std::move(p), n, V](Tape &t, std::size_t self) {
            const Tensor &g = t.grad(self);
            const std::vector<double> &qv = t.scratch(self);
            Tensor &gl = t.grad(il);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < V; ++j) {
                    gl[i * V + j] += g[i] * (qv[i * V + j] - p[i * V + j]);
                }
            }
        },
        "kl_rows");
    if (y.requires_grad()) {
        y.tape().scratch(y.id()) = std::move(q);
    }
    return y;
}

Var softmax_cross_entropy(Var logits, std::int32_t target) {
    const std::size_t V = logits.value().numel();
    DELTA_CHECK(target >= 0 && static_cast<std::size_t>(target) < V, IndexError,
                "target id " + std::to_string(target) + " outside vocabulary of " + std::to_string(V));
    std::vector<double> logp(V);
    log_softmax_row(logits.value().values(), logp);
    Tensor out = Tensor::scalar(-logp[static_cast<std::size_t>(target)]);
    const std::size_t il = logits.id();
    return logits.tape().record(
        std::move(out), {logits},
        [il, target, logp = std::move(logp)](Tape &t, std::size_t self) {
            const double g = t.grad(self)[0];
            Tensor &gl = t.grad(il);
            for (std::size_t j = 0; j < gl.numel(); ++j) {
                gl[j] += g * std::exp(logp[j]);
            }
            gl[static_cast<std::size_t>(target)] -= g;
        },
        "softmax_cross_entropy");
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().values()) {
        s += v;
    }
    const std::size_t ix = x.id();
    return x.tape().record(
        Tensor::scalar(s), {x},
        [ix](Tape &t, std::size_t self) {
            const double g = t.grad(self)[0];
            for (double &v : t.grad(ix).values()) {
                v += g;
            }
        },
        "sum");
}

Var mean(Var x) {
    const double inv = 1.0 / static_cast<double>(x.value().numel());
    return scale(sum(x), inv);
}

} // namespace delta
