#include "zsad/adapters.hpp"

#include <cmath>
#include <stdexcept>

namespace zsad {

void AdapterConfig::validate(int encoder_depth) const {
    if (count < 1) throw std::invalid_argument("adapter count must be >= 1");
    if (count > encoder_depth)
        throw std::invalid_argument("adapter count exceeds encoder depth");
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("adapter lambda must lie in [0,1]");
}

AdapterActivation adapter_activation_from_string(const std::string& s) {
    if (s == "gelu") return AdapterActivation::gelu;
    if (s == "relu") return AdapterActivation::relu;
    if (s == "identity") return AdapterActivation::identity;
    throw std::invalid_argument("unknown adapter activation: " + s);
}

AdapterNorm adapter_norm_from_string(const std::string& s) {
    if (s == "l2") return AdapterNorm::l2;
    if (s == "identity") return AdapterNorm::identity;
    throw std::invalid_argument("unknown adapter norm: " + s);
}

std::string to_string(AdapterActivation a) {
    switch (a) {
        case AdapterActivation::gelu: return "gelu";
        case AdapterActivation::relu: return "relu";
        case AdapterActivation::identity: return "identity";
    }
    return "gelu";
}

std::string to_string(AdapterNorm n) {
    return n == AdapterNorm::l2 ? "l2" : "identity";
}

AdapterStack attach_adapters(ParamStore& store, const std::string& prefix,
                             const AdapterConfig& cfg, int width, int encoder_depth,
                             uint64_t seed) {
    cfg.validate(encoder_depth);
    AdapterStack stack{cfg, prefix};
    if (store.contains(stack.weight_name(1)))
        throw std::logic_error("adapters already attached at " + prefix);
    double bound = 1.0 / std::sqrt(double(width));
    for (int i = 1; i <= cfg.count; ++i) {
        Param& w = store.create(stack.weight_name(i), width, width);
        Rng rng(mix_seed(seed, stack.weight_name(i)));
        for (Eigen::Index r = 0; r < w.value.rows(); ++r)
            for (Eigen::Index c = 0; c < w.value.cols(); ++c)
                w.value(r, c) = rng.uniform(-bound, bound);
    }
    return stack;
}

ag::Ref adapter_forward(ag::Graph& g, ag::Ref x, ParamStore& store,
                        const AdapterStack& stack, int layer_index) {
    if (layer_index < 1 || layer_index > stack.cfg.count)
        throw std::out_of_range("no adapter at layer " + std::to_string(layer_index));
    ag::Ref w = g.param(store.at(stack.weight_name(layer_index)));
    ag::Ref h = ag::matmul_nt(x, w);
    switch (stack.cfg.act) {
        case AdapterActivation::gelu: h = ag::gelu(h); break;
        case AdapterActivation::relu: h = ag::relu(h); break;
        case AdapterActivation::identity: break;
    }
    if (stack.cfg.norm == AdapterNorm::l2)
        h = ag::l2normalize_rows(h, stack.cfg.norm_eps);
    return h;
}

ag::Ref fuse(ag::Ref x, ag::Ref x_residual, double lambda) {
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("fuse: lambda must lie in [0,1]");
    return ag::linear2(x_residual, x, lambda, 1.0 - lambda);
}

}  // namespace zsad
