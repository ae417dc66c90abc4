#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mrpn/graph.hpp"
#include "mrpn/tensor.hpp"

namespace mrpn {

// Builds a scalar loss from the current parameter values. The callable must
// be deterministic: fixed batch, dropout disabled or test mode.
using LossFn = std::function<Tensor(Graph&)>;

// Central-difference check of the reverse-mode gradient of `f` with respect
// to `theta`. Returns max over coordinates of
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline real grad_check(const LossFn& f, Tensor theta, real eps = real(1e-5)) {
    theta.set_requires_grad(true);
    theta.zero_grad();
    {
        Graph g;
        Tensor loss = f(g);
        g.backward(loss);
    }
    std::vector<real> analytic = theta.grad();

    real worst = 0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const real saved = theta.values()[i];
        theta.values()[i] = saved + eps;
        real fp;
        {
            Graph g;
            fp = f(g).at(0);
        }
        theta.values()[i] = saved - eps;
        real fm;
        {
            Graph g;
            fm = f(g).at(0);
        }
        theta.values()[i] = saved;
        const real numeric = (fp - fm) / (2 * eps);
        const real a = analytic[i];
        const real rel = std::abs(a - numeric) /
                         std::max(real(1e-8), std::abs(a) + std::abs(numeric));
        worst = std::max(worst, rel);
    }
    theta.zero_grad();
    return worst;
}

// Convenience: worst relative error across a set of parameters.
inline real grad_check_all(const LossFn& f, const std::vector<Tensor>& params,
                           real eps = real(1e-5)) {
    real worst = 0;
    for (const auto& p : params) worst = std::max(worst, grad_check(f, p, eps));
    return worst;
}

} // namespace mrpn
