#pragma once

#include "zsad/graph.hpp"
#include "zsad/rng.hpp"

#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace zsad {

struct Param {
    std::string name;
    Mat value;
    Mat grad;
    // Adam state
    Mat adam_m, adam_v;
    bool trainable = false;

    void zero_grad() { grad.setZero(); }
};

// Named parameter registry with stable (sorted) iteration order.
class ParamStore {
public:
    Param& create(const std::string& name, Eigen::Index rows, Eigen::Index cols);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    void remove_prefix(const std::string& prefix);

    std::vector<std::string> names() const;
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;

    void set_trainable(const std::set<std::string>& trainable_names);
    std::vector<Param*> trainable();
    void zero_grads();

    size_t size() const { return params_.size(); }

    template <typename Fn>
    void for_each(Fn&& fn) {  // ordered by name
        for (auto& [name, p] : params_) fn(*p);
    }
    template <typename Fn>
    void for_each(Fn&& fn) const {
        for (const auto& [name, p] : params_) fn(*p);
    }

private:
    std::map<std::string, std::unique_ptr<Param>> params_;
};

// Disjoint trainable/frozen split over every parameter in a store.
struct ParameterPartition {
    std::set<std::string> trainable;
    std::set<std::string> frozen;

    void validate_against(const ParamStore& store) const;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping
};

// Adam over the store's trainable set. Frozen parameters are never touched.
class Adam {
public:
    Adam(ParamStore& store, AdamConfig cfg);
    // Applies one update from accumulated gradients; lr_scale multiplies the
    // configured learning rate (cosine schedules pass a factor here).
    void step(double lr_scale = 1.0);
    double last_grad_norm() const { return last_grad_norm_; }

private:
    ParamStore& store_;
    AdamConfig cfg_;
    long t_ = 0;
    double last_grad_norm_ = 0.0;
};

// SHA-256 hex digest over the named parameter set (values only, sorted by
// name); used to assert the freezing contracts.
std::string digest_params(const ParamStore& store, const std::set<std::string>& names);
std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);

}  // namespace zsad
