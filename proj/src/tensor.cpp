#include "delta/tensor.hpp"

#include "delta/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace delta {

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ']';
    return os.str();
}

static std::size_t shape_numel(const Shape &shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        DELTA_CHECK(e > 0, DimensionError, "tensor extents must be positive, got " + shape_str(shape));
        n *= e;
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    DELTA_CHECK(!shape_.empty(), DimensionError, "tensor needs at least one dimension");
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    DELTA_CHECK(!shape_.empty(), DimensionError, "tensor needs at least one dimension");
    DELTA_CHECK(shape_numel(shape_) == data_.size(), DimensionError,
                "shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) + " values");
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    DELTA_CHECK(rows.size() > 0, DimensionError, "empty matrix literal");
    std::size_t cols = rows.begin()->size();
    std::vector<double> values;
    for (const auto &r : rows) {
        DELTA_CHECK(r.size() == cols, DimensionError, "ragged matrix literal");
        values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
    DELTA_CHECK(numel() == 1, ContractError, "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void softmax_row(std::span<const double> logits, std::span<double> out) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    double inv = 1.0 / sum;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] *= inv;
    }
}

void log_softmax_row(std::span<const double> logits, std::span<double> out) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits) {
        sum += std::exp(l - mx);
    }
    double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    softmax_row(logits, out);
    return out;
}

namespace kernels {

namespace {

// Register tile handled by the vectorized path. Shapes were picked by
// measurement; GCC keeps a 4x32 accumulator block in registers.
constexpr std::size_t kTileCols = 32;

template <std::size_t R>
void gemm_tile(const double *__restrict a, const double *__restrict b, double *__restrict c, std::size_t k,
               std::size_t m, std::size_t i0, std::size_t j0) {
    double acc[R][kTileCols];
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < kTileCols; ++j) {
            acc[r][j] = c[(i0 + r) * m + j0 + j];
        }
    }
    for (std::size_t p = 0; p < k; ++p) {
        const double *bp = b + p * m + j0;
#pragma GCC unroll 8
        for (std::size_t r = 0; r < R; ++r) {
            const double s = a[(i0 + r) * k + p];
#pragma GCC unroll 16
            for (std::size_t j = 0; j < kTileCols; ++j) {
                acc[r][j] += s * bp[j];
            }
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < kTileCols; ++j) {
            c[(i0 + r) * m + j0 + j] = acc[r][j];
        }
    }
}

// c[n,m] += a[n,k] * b[k,m]. Every output element accumulates its k products
// in ascending order on top of its initial value, whichever path computes it,
// so a row's result never depends on how rows were grouped.
void gemm_acc(const double *a, const double *b, double *c, std::size_t n, std::size_t k, std::size_t m) {
    const std::size_t m_tiled = m - m % kTileCols;
    std::size_t i0 = 0;
    for (; i0 + 4 <= n; i0 += 4) {
        for (std::size_t j0 = 0; j0 < m_tiled; j0 += kTileCols) {
            gemm_tile<4>(a, b, c, k, m, i0, j0);
        }
    }
    for (std::size_t i = i0; i < n; ++i) {
        for (std::size_t j0 = 0; j0 < m_tiled; j0 += kTileCols) {
            gemm_tile<1>(a, b, c, k, m, i, j0);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = m_tiled; j < m; ++j) {
            double acc = c[i * m + j];
            for (std::size_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[p * m + j];
            }
            c[i * m + j] = acc;
        }
    }
}

std::vector<double> transpose(const double *x, std::size_t rows, std::size_t cols) {
    std::vector<double> t(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    return t;
}

} // namespace

void matmul(const double *a, const double *b, double *out, std::size_t n, std::size_t k, std::size_t m) {
    std::fill(out, out + n * m, 0.0);
    gemm_acc(a, b, out, n, k, m);
}

void matmul_nt_acc(const double *a, const double *b, double *out, std::size_t n, std::size_t k, std::size_t m) {
    std::vector<double> bt = transpose(b, m, k);
    gemm_acc(a, bt.data(), out, n, k, m);
}

void matmul_tn_acc(const double *a, const double *b, double *out, std::size_t n, std::size_t k, std::size_t m) {
    std::vector<double> at = transpose(a, n, k);
    gemm_acc(at.data(), b, out, k, n, m);
}

void add_row_bias(double *x, const double *bias, std::size_t n, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        double *r = x + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            r[j] += bias[j];
        }
    }
}

void layer_norm(const double *x, const double *gain, const double *bias, double *out, double *xhat, double *rstd,
                std::size_t n, std::size_t m, double eps) {
    for (std::size_t i = 0; i < n; ++i) {
        const double *r = x + i * m;
        double mean = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            mean += r[j];
        }
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            double c = r[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(m);
        double inv = 1.0 / std::sqrt(var + eps);
        if (rstd) {
            rstd[i] = inv;
        }
        for (std::size_t j = 0; j < m; ++j) {
            double h = (r[j] - mean) * inv;
            if (xhat) {
                xhat[i * m + j] = h;
            }
            out[i * m + j] = h * gain[j] + bias[j];
        }
    }
}

namespace {
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace

void gelu(const double *x, double *out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        double v = x[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
}

double gelu_grad(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

void causal_attention(const double *q, std::size_t q_stride, const double *k, std::size_t k_stride, const double *v,
                      std::size_t v_stride, double *out, std::size_t out_stride, std::size_t n_queries,
                      std::size_t pos0, std::size_t d_model, std::size_t n_heads, double *probs) {
    const std::size_t hd = d_model / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t n_keys = pos0 + n_queries;
    std::vector<double> w(n_keys);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < n_queries; ++i) {
            const std::size_t last = pos0 + i;
            const double *qi = q + i * q_stride + off;
            double mx = -INFINITY;
            for (std::size_t j = 0; j <= last; ++j) {
                const double *kj = k + j * k_stride + off;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                    s += qi[c] * kj[c];
                }
                w[j] = s * scale;
                mx = std::max(mx, w[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= last; ++j) {
                w[j] = std::exp(w[j] - mx);
                sum += w[j];
            }
            const double inv = 1.0 / sum;
            double *oi = out + i * out_stride + off;
            std::fill(oi, oi + hd, 0.0);
            for (std::size_t j = 0; j <= last; ++j) {
                w[j] *= inv;
                const double *vj = v + j * v_stride + off;
                for (std::size_t c = 0; c < hd; ++c) {
                    oi[c] += w[j] * vj[c];
                }
            }
            if (probs) {
                double *pr = probs + (h * n_queries + i) * n_keys;
                std::copy(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(last + 1), pr);
                std::fill(pr + last + 1, pr + n_keys, 0.0);
            }
        }
    }
}

void combine(const double *l_m, const double *l_prime, const double *l_o, double alpha, double *out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = l_m[i] + alpha * (l_prime[i] - l_o[i]);
    }
}

} // namespace kernels

} // namespace delta
