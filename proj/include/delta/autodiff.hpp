#pragma once

#include "delta/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace delta {

// A trainable leaf. grad is empty until the first backward pass touches it.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool requires_grad = true;

    bool has_grad() const { return !grad.empty(); }
    void zero_grad() { grad = Tensor(); }
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
  public:
    Var() = default;
    Var(Tape *tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape &tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor &value() const;
    const Shape &shape() const { return value().shape(); }
    bool requires_grad() const;

  private:
    Tape *tape_ = nullptr;
    std::size_t id_ = 0;
};

// Wengert list: operations are appended in execution order, so every node's
// inputs precede it and a single reverse sweep visits each node once.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape &, std::size_t self)>;

    Tape() = default;
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    Var constant(Tensor value);
    Var leaf(Parameter &param);

    // Populates grads of every tracked leaf reachable from loss. Parameter
    // grads accumulate across calls; intermediate grads are reset each call.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

    const Tensor &value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    const std::vector<std::size_t> &inputs(std::size_t id) const { return nodes_[id].inputs; }
    // Gradient buffer of a node, allocated (zeroed) on first access.
    Tensor &grad(std::size_t id);
    const Tensor &grad_or_empty(std::size_t id) const { return nodes_[id].grad; }

    // Records a new node. Throws NumericalError if the value is not finite.
    Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char *op_name);

    // Per-node scratch storage for ops that keep forward intermediates.
    std::vector<double> &scratch(std::size_t id) { return nodes_[id].scratch; }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Parameter *param = nullptr;
        std::vector<double> scratch;
    };
    std::vector<Node> nodes_;
};

// Differentiable ops. All inputs must live on the same tape.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var add_bias(Var x, Var bias); // x[n,m] + bias[m]
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var embedding(Var table, std::span<const std::int32_t> ids);
Var add_positional(Var x, Var table); // x[T,d] + table[0..T)
Var causal_self_attention(Var qkv, std::size_t n_heads);
Var select_rows(Var x, std::span<const std::size_t> rows);
Var combine_logits(Var l_m, Var l_prime, Var l_o, double alpha);

// Per-row negative log-likelihood of targets under softmax(logits): shape [n].
Var nll_rows(Var logits, std::span<const std::int32_t> targets);
// Per-row KL(softmax(ref_logits) || softmax(logits)), ref_logits constant:
// shape [n]. Both sides go through the same log-softmax, so identical
// inputs give exactly zero.
Var kl_rows(const Tensor &ref_logits, Var logits);
// -log softmax(logits)[target] for a single logit vector.
Var softmax_cross_entropy(Var logits, std::int32_t target);

Var sum(Var x);
Var mean(Var x);

} // namespace delta
