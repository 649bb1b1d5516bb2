#ifndef HOPFLOW_PARAMS_HPP
#define HOPFLOW_PARAMS_HPP

#include <map>
#include <string>

#include "common.hpp"

namespace hopflow {

/// Named dense parameter arrays, each with a gradient slot of the same shape.
/// Iteration order is by name, which fixes the checkpoint layout.
template <class Real>
class ParamStore {
public:
    struct Entry {
        Tensor<Real> value;
        std::vector<Real> grad;
    };

    Tensor<Real>& add(const std::string& name, Tensor<Real> value)
    {
        if (entries_.count(name)) throw ConfigError("duplicate parameter " + name);
        Entry e{std::move(value), {}};
        e.grad.assign(e.value.numel(), Real(0));
        return entries_.emplace(name, std::move(e)).first->second.value;
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& entry(const std::string& name)
    {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter " + name);
        return it->second;
    }
    const Entry& entry(const std::string& name) const
    {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter " + name);
        return it->second;
    }

    Tensor<Real>& value(const std::string& name) { return entry(name).value; }
    const Tensor<Real>& value(const std::string& name) const { return entry(name).value; }
    std::vector<Real>& grad(const std::string& name) { return entry(name).grad; }
    const std::vector<Real>& grad(const std::string& name) const { return entry(name).grad; }

    void zero_grad()
    {
        for (auto& [_, e] : entries_) std::fill(e.grad.begin(), e.grad.end(), Real(0));
    }

    std::size_t num_scalars() const
    {
        std::size_t n = 0;
        for (const auto& [_, e] : entries_) n += e.value.numel();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

    template <class Other>
    ParamStore<Other> cast() const
    {
        ParamStore<Other> out;
        for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<Other>());
        return out;
    }

private:
    std::map<std::string, Entry> entries_;
};

} // namespace hopflow

#endif
