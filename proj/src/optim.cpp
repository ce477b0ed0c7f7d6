#include "delta/optim.hpp"

#include "delta/error.hpp"

#include <cmath>

namespace delta {

double global_grad_norm(const std::vector<Parameter *> &params) {
    double ss = 0.0;
    for (const Parameter *p : params) {
        if (p->has_grad()) {
            for (double g : p->grad.values()) {
                ss += g * g;
            }
        }
    }
    return std::sqrt(ss);
}

void Adam::step(std::vector<Parameter *> params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i]->value.numel(), 0.0);
            v_[i].assign(params[i]->value.numel(), 0.0);
        }
    }
    DELTA_CHECK(m_.size() == params.size(), ContractError, "Adam::step called with a different parameter list");
    for (const Parameter *p : params) {
        DELTA_CHECK(p->has_grad(), ContractError, "Adam::step: parameter '" + p->name + "' has no gradient");
    }
    double clip = 1.0;
    if (opts_.clip_norm > 0.0) {
        double norm = global_grad_norm(params);
        if (norm > opts_.clip_norm) {
            clip = opts_.clip_norm / norm;
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter &p = *params[i];
        if (!p.requires_grad) {
            continue;
        }
        std::vector<double> &m = m_[i];
        std::vector<double> &v = v_[i];
        for (std::size_t j = 0; j < p.value.numel(); ++j) {
            const double g = p.grad[j] * clip;
            m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g;
            v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p.value[j] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
        }
    }
}

} // namespace delta
