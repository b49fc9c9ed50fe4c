#include "surgecast/optim.hpp"

#include <algorithm>
#include <cmath>

#include "surgecast/random.hpp"

namespace surgecast {

template <std::floating_point T>
const Tensor<T>& ParameterSet<T>::add(const std::string& name,
                                      Shape shape,
                                      InitScheme scheme,
                                      std::size_t fan_in,
                                      std::uint64_t seed) {
    const std::uint64_t stream = Rng::derive(seed, name);
    std::vector<T> values(shape_size(shape));
    switch (scheme) {
    case InitScheme::Zeros:
        break;
    case InitScheme::Ones:
        std::fill(values.begin(), values.end(), T(1));
        break;
    case InitScheme::Uniform: {
        Rng rng(stream);
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
        for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
    }
    }
    adopt({name, Tensor<T>::from(std::move(shape), std::move(values), true), {scheme, fan_in, stream}});
    return items_.back().tensor;
}

template <std::floating_point T>
void ParameterSet<T>::adopt(Parameter<T> p) {
    if (contains(p.name)) throw std::invalid_argument("duplicate parameter name '" + p.name + "'");
    items_.push_back(std::move(p));
}

template <std::floating_point T>
bool ParameterSet<T>::contains(const std::string& name) const {
    return std::any_of(items_.begin(), items_.end(), [&](const auto& p) { return p.name == name; });
}

template <std::floating_point T>
const Tensor<T>& ParameterSet<T>::at(const std::string& name) const {
    for (const auto& p : items_) {
        if (p.name == name) return p.tensor;
    }
    throw std::out_of_range("no parameter named '" + name + "'");
}

template <std::floating_point T>
Tensor<T>& ParameterSet<T>::at(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).at(name));
}

template <std::floating_point T>
std::size_t ParameterSet<T>::count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
}

template <std::floating_point T>
void ParameterSet<T>::zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
}

template <std::floating_point T>
AdamState<T> AdamState<T>::zeros_like(const ParameterSet<T>& params) {
    AdamState s;
    for (const auto& p : params.items()) {
        s.m.emplace_back(p.tensor.numel(), T(0));
        s.v.emplace_back(p.tensor.numel(), T(0));
    }
    return s;
}

template <std::floating_point T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
    auto& items = params.items();
    if (state.m.size() != items.size() || state.v.size() != items.size()) {
        throw ShapeError("adam_step: optimizer state holds " + std::to_string(state.m.size()) + " entries for " +
                         std::to_string(items.size()) + " parameters");
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
        const std::size_t n = items[i].tensor.numel();
        if (state.m[i].size() != n || state.v[i].size() != n) {
            throw ShapeError("adam_step: state for '" + items[i].name + "' does not match " +
                             shape_string(items[i].tensor.shape()));
        }
    }

    ++state.t;
    const auto t = static_cast<double>(state.t);
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    const T lr = static_cast<T>(cfg.lr);
    const T eps = static_cast<T>(cfg.eps);
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& tensor = items[i].tensor;
        if (!tensor.has_grad()) {
            // Zero gradient: moments decay, the parameter still moves if they are nonzero.
            tensor.node().grad_buffer();
        }
        const auto g = tensor.grad();
        auto p = tensor.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            p[j] -= lr * (m[j] * c1) / (std::sqrt(v[j] * c2) + eps);
        }
    }
}

template <std::floating_point T>
std::vector<double> grad_norms(const ParameterSet<T>& params) {
    std::vector<double> out;
    for (const auto& p : params.items()) {
        double s = 0.0;
        if (p.tensor.has_grad()) {
            for (T g : p.tensor.grad()) s += static_cast<double>(g) * static_cast<double>(g);
        }
        out.push_back(std::sqrt(s));
    }
    return out;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(ParameterSet<float>&, AdamState<float>&, const AdamConfig&);
template void adam_step(ParameterSet<double>&, AdamState<double>&, const AdamConfig&);
template std::vector<double> grad_norms(const ParameterSet<float>&);
template std::vector<double> grad_norms(const ParameterSet<double>&);

}  // namespace surgecast
