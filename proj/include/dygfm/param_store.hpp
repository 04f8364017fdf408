#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dygfm/matrix.hpp"
#include "dygfm/rng.hpp"

namespace dygfm {

// Named differentiable parameter bank. Entries are grouped by an owner tag
// (aligner/encoder/timer/adapter/prompt/...) so training loops can freeze or
// select whole components. Adam state lives next to each entry.
class ParamStore {
public:
    struct Entry {
        std::string name;
        std::string owner;
        Matrix value;
        Matrix grad;
        Matrix adam_m;
        Matrix adam_v;
        std::uint64_t adam_step = 0;
        bool frozen = false;
    };

    std::size_t add(const std::string& name, const std::string& owner, Matrix value) {
        if (index_.count(name))
            throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
        Entry e;
        e.name = name;
        e.owner = owner;
        e.grad = Matrix(value.rows(), value.cols());
        e.adam_m = Matrix(value.rows(), value.cols());
        e.adam_v = Matrix(value.rows(), value.cols());
        e.value = std::move(value);
        entries_.push_back(std::move(e));
        index_[name] = entries_.size() - 1;
        return entries_.size() - 1;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }

    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    Entry& entry(const std::string& name) { return entries_[index_of(name)]; }
    const Entry& entry(const std::string& name) const { return entries_[index_of(name)]; }

    Matrix& value(const std::string& name) { return entry(name).value; }
    const Matrix& value(const std::string& name) const { return entry(name).value; }
    Matrix& grad(const std::string& name) { return entry(name).grad; }

    std::size_t count() const { return entries_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    std::size_t trainable_scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (!e.frozen) n += e.value.size();
        return n;
    }

    void set_frozen(const std::string& name, bool frozen) { entry(name).frozen = frozen; }

    void freeze_owner(const std::string& owner, bool frozen = true) {
        for (auto& e : entries_)
            if (e.owner == owner) e.frozen = frozen;
    }

    void freeze_all(bool frozen = true) {
        for (auto& e : entries_) e.frozen = frozen;
    }

    void zero_grads() {
        for (auto& e : entries_)
            for (double& g : e.grad.values()) g = 0.0;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

    std::vector<std::string> names_with_owner(const std::string& owner) const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (e.owner == owner) out.push_back(e.name);
        return out;
    }

    // FNV-1a over the raw value bytes of selected entries; used by the
    // freezing-contract checks.
    std::uint64_t checksum(const std::vector<std::string>& names) const {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& n : names) {
            const Entry& e = entry(n);
            for (double v : e.value.values()) {
                std::uint64_t bits;
                static_assert(sizeof(bits) == sizeof(v));
                std::memcpy(&bits, &v, sizeof(bits));
                for (int b = 0; b < 8; ++b) {
                    h ^= (bits >> (8 * b)) & 0xffu;
                    h *= 1099511628211ull;
                }
            }
        }
        return h;
    }

    std::uint64_t checksum_all() const { return checksum(names()); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// One Adam update over every unfrozen entry. Bias-corrected, per-entry step
// counter; gradients are zeroed afterwards (frozen entries included).
inline void adam_step(ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
    for (auto& e : store) {
        if (!e.frozen) {
            e.adam_step += 1;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(e.adam_step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(e.adam_step));
            for (std::size_t i = 0; i < e.value.size(); ++i) {
                const double g = e.grad.at(i);
                e.adam_m.at(i) = beta1 * e.adam_m.at(i) + (1.0 - beta1) * g;
                e.adam_v.at(i) = beta2 * e.adam_v.at(i) + (1.0 - beta2) * g * g;
                const double mhat = e.adam_m.at(i) / bc1;
                const double vhat = e.adam_v.at(i) / bc2;
                e.value.at(i) -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
        for (double& g : e.grad.values()) g = 0.0;
    }
}

}  // namespace dygfm
