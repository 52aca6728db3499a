#include "zsad/params.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace zsad {

Param& ParamStore::create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (params_.count(name)) throw std::logic_error("parameter already exists: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Mat::Zero(rows, cols);
    p->grad = Mat::Zero(rows, cols);
    p->adam_m = Mat::Zero(rows, cols);
    p->adam_v = Mat::Zero(rows, cols);
    Param& ref = *p;
    params_.emplace(name, std::move(p));
    return ref;
}

Param& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
    return *it->second;
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
    return *it->second;
}

bool ParamStore::contains(const std::string& name) const {
    return params_.count(name) > 0;
}

void ParamStore::remove_prefix(const std::string& prefix) {
    for (auto it = params_.begin(); it != params_.end();) {
        if (it->first.rfind(prefix, 0) == 0)
            it = params_.erase(it);
        else
            ++it;
    }
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, p] : params_) out.push_back(name);
    return out;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, p] : params_)
        if (name.rfind(prefix, 0) == 0) out.push_back(name);
    return out;
}

void ParamStore::set_trainable(const std::set<std::string>& trainable_names) {
    for (const auto& n : trainable_names)
        if (!params_.count(n)) throw std::out_of_range("no such parameter: " + n);
    for (auto& [name, p] : params_) p->trainable = trainable_names.count(name) > 0;
}

std::vector<Param*> ParamStore::trainable() {
    std::vector<Param*> out;
    for (auto& [name, p] : params_)
        if (p->trainable) out.push_back(p.get());
    return out;
}

void ParamStore::zero_grads() {
    for (auto& [name, p] : params_)
        if (p->trainable) p->zero_grad();
}

void ParameterPartition::validate_against(const ParamStore& store) const {
    for (const auto& n : trainable)
        if (frozen.count(n))
            throw std::logic_error("partition overlap on parameter: " + n);
    size_t covered = 0;
    store.for_each([&](const Param& p) {
        if (trainable.count(p.name) || frozen.count(p.name)) ++covered;
    });
    if (covered != store.size() || trainable.size() + frozen.size() != store.size())
        throw std::logic_error("partition does not cover the parameter set exactly");
}

Adam::Adam(ParamStore& store, AdamConfig cfg) : store_(store), cfg_(cfg) {}

void Adam::step(double lr_scale) {
    auto params = store_.trainable();
    double sq = 0.0;
    for (Param* p : params) sq += p->grad.squaredNorm();
    last_grad_norm_ = std::sqrt(sq);
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && last_grad_norm_ > cfg_.clip_norm)
        scale = cfg_.clip_norm / last_grad_norm_;

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    double lr = cfg_.lr * lr_scale;
    for (Param* p : params) {
        Mat g = scale * p->grad;
        p->adam_m = cfg_.beta1 * p->adam_m + (1.0 - cfg_.beta1) * g;
        p->adam_v = cfg_.beta2 * p->adam_v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        Mat mhat = p->adam_m / bc1;
        Mat denom = (p->adam_v / bc2).cwiseSqrt();
        denom.array() += cfg_.eps;
        p->value -= lr * mhat.cwiseQuotient(denom);
    }
}

std::string sha256_hex(const void* data, size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, data, n) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256 failed");
    }
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(size_t(len) * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string digest_params(const ParamStore& store, const std::set<std::string>& names) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 init failed");
    for (const auto& name : names) {  // std::set iterates sorted
        const Param& p = store.at(name);
        EVP_DigestUpdate(ctx, name.data(), name.size());
        EVP_DigestUpdate(ctx, p.value.data(),
                         sizeof(double) * size_t(p.value.size()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx, md, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256 final failed");
    }
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

}  // namespace zsad
