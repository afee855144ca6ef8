#pragma once

#include "cvit/ops.hpp"
#include "cvit/tape.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace cvit {

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences. `f` receives a fresh tape and the leaf for x and must
/// return a scalar Var. Returns max over coordinates of
/// |analytic - central| / max(1, |analytic|). 64-bit only; inputs should be
/// sampled away from ReLU/maxpool ties.
inline double finite_diff_check(
    const std::function<Var(Tape<double>&, Var)>& f, const Tensor<double>& x,
    double h = 1e-5) {
    Tensor<double> analytic;
    {
        Tape<double> tape;
        Var xv = tape.leaf(x, true);
        Var loss = f(tape, xv);
        tape.backward(loss);
        analytic = tape.grad(xv);
    }
    auto eval = [&](const Tensor<double>& xp) {
        Tape<double> tape;
        Var xv = tape.leaf(xp, false);
        return tape.value(f(tape, xv))[0];
    };
    double worst = 0.0;
    Tensor<double> xp = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = xp[i];
        xp[i] = orig + h;
        const double fp = eval(xp);
        xp[i] = orig - h;
        const double fm = eval(xp);
        xp[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err =
            std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace cvit
