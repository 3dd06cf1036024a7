#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "orup/ops.hpp"
#include "orup/random.hpp"
#include "orup/tensor.hpp"

namespace testing {

using orup::Rng;
using orup::Shape;
using orup::Tensor;

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    const std::size_t n = orup::numel_of(shape);
    return Tensor(std::move(shape), orup::uniform_vector(rng, n, lo, hi));
}

inline Tensor gaussian_tensor(Rng& rng, Shape shape, double sd = 1.0) {
    const std::size_t n = orup::numel_of(shape);
    return Tensor(std::move(shape), orup::normal_vector(rng, n, 0.0, sd));
}

inline double max_abs(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

using MultiFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Worst |analytic − numeric| / max(1, |numeric|) over every input element of
// the scalar loss Σ w ⊙ fn(inputs) with fixed random weights w.
inline double gradient_error(const MultiFn& fn, std::vector<Tensor> inputs, Rng& rng, double h = 1e-5) {
    Tensor probe;
    {
        orup::NoGradScope ng;
        probe = fn(inputs);
    }
    const Tensor w = random_tensor(rng, probe.shape());
    auto loss_of = [&](const std::vector<Tensor>& in) {
        orup::NoGradScope ng;
        return orup::sum_all(orup::mul(fn(in), w)).item();
    };
    std::vector<Tensor> params;
    for (const Tensor& t : inputs) params.push_back(Tensor::parameter(t.shape(), {t.data().begin(), t.data().end()}));
    orup::Tape tape;
    Tensor loss;
    {
        orup::TapeScope scope(tape);
        loss = orup::sum_all(orup::mul(fn(params), w));
    }
    tape.backward(loss);

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            std::vector<Tensor> hi = inputs, lo = inputs;
            hi[k] = inputs[k].clone();
            lo[k] = inputs[k].clone();
            hi[k].mutable_data()[i] += h;
            lo[k].mutable_data()[i] -= h;
            const double numeric = (loss_of(hi) - loss_of(lo)) / (2.0 * h);
            const double analytic = params[k].has_grad() ? params[k].grad()[i] : 0.0;
            worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
        }
    }
    return worst;
}

}  // namespace testing
