#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dgseg/tensor.hpp"

namespace dgseg {

// A named set of parameter tensors updated (or frozen) together. A group
// marked non-trainable is bit-identical before and after any optimizer step.
template <typename Scalar>
struct ParamGroup {
    std::string name;
    bool trainable = true;
    std::vector<std::pair<std::string, Tensor<Scalar>>> params;

    Tensor<Scalar>& add(const std::string& pname, Tensor<Scalar> t) {
        t.set_requires_grad(trainable);
        params.emplace_back(pname, std::move(t));
        return params.back().second;
    }

    void zero_grad() {
        for (auto& [n, t] : params) t.zero_grad();
    }
};

template <typename Scalar>
struct AdamWConfig {
    Scalar lr = Scalar(1e-4);
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar eps = Scalar(1e-8);
    Scalar weight_decay = Scalar(0.01);
};

// AdamW with decoupled weight decay. One step advances the shared timestep
// and updates every trainable group in declaration order; non-trainable
// groups are never touched, not even by weight decay.
template <typename Scalar>
class AdamW {
public:
    struct Slot {
        std::vector<Scalar> m, v;
    };

    AdamW() = default;
    explicit AdamW(AdamWConfig<Scalar> cfg) : cfg_(cfg) {}

    const AdamWConfig<Scalar>& config() const { return cfg_; }

    void step(std::vector<ParamGroup<Scalar>>& groups) {
        ++t_;
        const Scalar bc1 = Scalar(1) - Scalar(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_)));
        const Scalar bc2 = Scalar(1) - Scalar(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_)));
        for (auto& g : groups) {
            if (!g.trainable) continue;
            for (auto& [pname, p] : g.params) {
                Slot& s = slot(g.name + "/" + pname, p.numel());
                auto& val = p.data();
                const bool has_g = p.has_grad();
                const auto& gr = p.grad();
                for (std::size_t i = 0; i < val.size(); ++i) {
                    const Scalar gi = has_g ? gr[i] : Scalar(0);
                    s.m[i] = cfg_.beta1 * s.m[i] + (Scalar(1) - cfg_.beta1) * gi;
                    s.v[i] = cfg_.beta2 * s.v[i] + (Scalar(1) - cfg_.beta2) * gi * gi;
                    const Scalar mhat = s.m[i] / bc1;
                    const Scalar vhat = s.v[i] / bc2;
                    val[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * val[i]);
                }
            }
        }
    }

    std::int64_t timestep() const { return t_; }

    // Checkpoint surface: slots in insertion order plus the timestep.
    const std::vector<std::pair<std::string, Slot>>& slots() const { return slots_; }
    void restore(std::int64_t t, std::vector<std::pair<std::string, Slot>> slots) {
        t_ = t;
        slots_ = std::move(slots);
        index_.clear();
        for (std::size_t i = 0; i < slots_.size(); ++i) index_[slots_[i].first] = i;
    }

private:
    Slot& slot(const std::string& key, std::int64_t n) {
        auto it = index_.find(key);
        if (it == index_.end()) {
            slots_.push_back({key, Slot{std::vector<Scalar>(static_cast<std::size_t>(n), Scalar(0)),
                                        std::vector<Scalar>(static_cast<std::size_t>(n), Scalar(0))}});
            index_[key] = slots_.size() - 1;
            return slots_.back().second;
        }
        return slots_[it->second].second;
    }

    AdamWConfig<Scalar> cfg_;
    std::int64_t t_ = 0;
    std::vector<std::pair<std::string, Slot>> slots_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Convenience: one optimizer step over a bundle's groups.
template <typename Scalar>
void adamw_step(AdamW<Scalar>& opt, std::vector<ParamGroup<Scalar>>& groups) {
    opt.step(groups);
}

}  // namespace dgseg
