#ifndef HOPFLOW_GRADCHECK_HPP
#define HOPFLOW_GRADCHECK_HPP

// Central finite-difference checks of tape gradients, in double precision.
// Error metric per entry: |analytic - numeric| / max(1, |analytic|).

#include <functional>

#include "autodiff.hpp"
#include "params.hpp"

namespace hopflow::gradcheck {

struct Result {
    double max_error = 0;
    std::string worst; // "<input or parameter>[index]"
    std::size_t checked = 0;
};

inline void note(Result& r, double analytic, double numeric, const std::string& where, std::size_t i)
{
    const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
    if (r.checked++ == 0 || err > r.max_error) {
        r.max_error = err;
        r.worst = where + "[" + std::to_string(i) + "]";
    }
}

using Builder = std::function<ad::Var(ad::Tape<double>&, const std::vector<ad::Var>&)>;

/// Checks d(build(inputs))/d(inputs). `build` must return a scalar and be a pure
/// function of its inputs (recreate any RNG inside it).
inline Result check_inputs(const std::vector<Tensor<double>>& inputs, const Builder& build, double eps = 1e-5)
{
    ad::Tape<double> tape;
    std::vector<ad::Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    tape.backward(build(tape, vars));
    std::vector<std::vector<double>> analytic;
    for (auto v : vars) analytic.push_back(tape.grad(v));

    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        ad::Tape<double> t;
        std::vector<ad::Var> vs;
        for (const auto& x : xs) vs.push_back(t.variable(x));
        return t.scalar(build(t, vs));
    };
    Result r;
    auto work = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k)
        for (std::size_t i = 0; i < inputs[k].data.size(); ++i) {
            const double orig = work[k].data[i];
            work[k].data[i] = orig + eps;
            const double up = eval(work);
            work[k].data[i] = orig - eps;
            const double down = eval(work);
            work[k].data[i] = orig;
            note(r, analytic[k][i], (up - down) / (2 * eps), "input" + std::to_string(k), i);
        }
    return r;
}

/// Checks d(loss)/d(param) for every parameter in `store`. `loss` builds the objective
/// on a fresh tape, reading parameters through tape.parameter(store, name).
inline Result check_params(ParamStore<double>& store, const std::function<ad::Var(ad::Tape<double>&)>& loss, double eps = 1e-5)
{
    store.zero_grad();
    {
        ad::Tape<double> tape;
        tape.backward(loss(tape));
    }
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, e] : store) analytic[name] = e.grad;
    auto eval = [&] {
        ad::Tape<double> t;
        return t.scalar(loss(t));
    };
    Result r;
    for (auto& [name, e] : store)
        for (std::size_t i = 0; i < e.value.data.size(); ++i) {
            const double orig = e.value.data[i];
            e.value.data[i] = orig + eps;
            const double up = eval();
            e.value.data[i] = orig - eps;
            const double down = eval();
            e.value.data[i] = orig;
            note(r, analytic[name][i], (up - down) / (2 * eps), name, i);
        }
    store.zero_grad();
    return r;
}

} // namespace hopflow::gradcheck

#endif
