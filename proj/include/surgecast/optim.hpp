#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "surgecast/tensor.hpp"

namespace surgecast {

enum class InitScheme { Uniform, Zeros, Ones };

struct InitSpec {
    InitScheme scheme = InitScheme::Zeros;
    std::size_t fan_in = 1;  // Uniform draws from +-1/sqrt(fan_in)
    std::uint64_t stream = 0;
};

template <std::floating_point T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    InitSpec init;
};

/// Named trainable tensors in registration order.
template <std::floating_point T>
class ParameterSet {
public:
    /// Registers and initializes a parameter. Uniform values are drawn in
    /// double from the substream derived from (seed, name), then rounded to T,
    /// so float and double sets built from one seed agree up to rounding.
    const Tensor<T>& add(const std::string& name, Shape shape, InitScheme scheme, std::size_t fan_in, std::uint64_t seed);

    bool contains(const std::string& name) const;
    const Tensor<T>& at(const std::string& name) const;
    Tensor<T>& at(const std::string& name);

    std::vector<Parameter<T>>& items() noexcept { return items_; }
    const std::vector<Parameter<T>>& items() const noexcept { return items_; }
    std::size_t size() const noexcept { return items_.size(); }
    /// Total scalar count.
    std::size_t count() const;

    void zero_grad();

    /// Same names and values at another width, each requiring gradients.
    template <std::floating_point U>
    ParameterSet<U> cast() const {
        ParameterSet<U> out;
        for (const auto& p : items_) {
            std::vector<U> values(p.tensor.data().begin(), p.tensor.data().end());
            out.adopt({p.name, Tensor<U>::from(p.tensor.shape(), std::move(values), true), p.init});
        }
        return out;
    }

    /// Inserts an existing parameter; throws on a duplicate name.
    void adopt(Parameter<T> p);

private:
    std::vector<Parameter<T>> items_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First and second moments per parameter, in ParameterSet order.
template <std::floating_point T>
struct AdamState {
    std::uint64_t t = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    static AdamState zeros_like(const ParameterSet<T>& params);
};

/// One bias-corrected Adam update from the parameters' current gradients.
/// Parameters without a gradient buffer are treated as having zero gradient.
template <std::floating_point T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, const AdamConfig& cfg);

/// sqrt of the summed squared gradient per parameter, for diagnostics.
template <std::floating_point T>
std::vector<double> grad_norms(const ParameterSet<T>& params);

}  // namespace surgecast
