#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace delta {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape &shape);

// Dense row-major tensor of doubles. Plain value type; gradient bookkeeping
// lives on the tape and on Parameter.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::initializer_list<double> values);

    const Shape &shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Leading extent and product of the remaining extents.
    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return rows() == 0 ? 0 : numel() / rows(); }

    double *data() { return data_.data(); }
    const double *data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double &operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double &at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    double item() const;
    void fill(double v);
    bool all_finite() const;

    bool operator==(const Tensor &o) const { return shape_ == o.shape_ && data_ == o.data_; }

  private:
    Shape shape_;
    std::vector<double> data_;
};

// Numerically stable softmax / log-softmax over a single row.
void softmax_row(std::span<const double> logits, std::span<double> out);
void log_softmax_row(std::span<const double> logits, std::span<double> out);
std::vector<double> softmax(std::span<const double> logits);

// Raw kernels shared by the tape ops and the no-grad inference path. Keeping a
// single compiled copy of each makes both paths agree to the last bit.
namespace kernels {

// out[n,m] = a[n,k] * b[k,m]; rows of out depend only on the matching row of a.
void matmul(const double *a, const double *b, double *out, std::size_t n, std::size_t k, std::size_t m);
// out[n,m] += a[n,k] * b[m,k]^T
void matmul_nt_acc(const double *a, const double *b, double *out, std::size_t n, std::size_t k, std::size_t m);
// out[k,m] += a[n,k]^T * b[n,m]
void matmul_tn_acc(const double *a, const double *b, double *out, std::size_t n, std::size_t k, std::size_t m);

void add_row_bias(double *x, const double *bias, std::size_t n, std::size_t m);

// Per-row layer norm; writes normalized activations (xhat) and 1/std when non-null.
void layer_norm(const double *x, const double *gain, const double *bias, double *out, double *xhat, double *rstd,
                std::size_t n, std::size_t m, double eps);

void gelu(const double *x, double *out, std::size_t n);
double gelu_grad(double x);

// Causal multi-head attention. Query i sits at absolute position pos0 + i and
// attends to key/value rows [0, pos0 + i]. probs (optional) receives the
// attention weights laid out [head][query][key] with key extent pos0 + n_queries.
void causal_attention(const double *q, std::size_t q_stride, const double *k, std::size_t k_stride, const double *v,
                      std::size_t v_stride, double *out, std::size_t out_stride, std::size_t n_queries,
                      std::size_t pos0, std::size_t d_model, std::size_t n_heads, double *probs);

// l_e = l_M + alpha * (l_prime - l_o), elementwise.
void combine(const double *l_m, const double *l_prime, const double *l_o, double alpha, double *out, std::size_t n);

} // namespace kernels

} // namespace delta
