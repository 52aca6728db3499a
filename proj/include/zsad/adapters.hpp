#pragma once

#include "zsad/graph.hpp"
#include "zsad/params.hpp"

#include <string>
#include <vector>

namespace zsad {

enum class AdapterActivation { gelu, relu, identity };
enum class AdapterNorm { l2, identity };

// Per-layer bottleneck-free residual adapter: a square linear map followed by
// an activation and a row normalization, blended into the layer stream at a
// fixed ratio lambda.
struct AdapterConfig {
    int count = 0;             // K, adapters sit on layers 1..K
    double lambda = 0.1;       // fusion ratio, 0 = exact no-op
    AdapterActivation act = AdapterActivation::gelu;
    AdapterNorm norm = AdapterNorm::l2;
    double norm_eps = 1e-8;

    void validate(int encoder_depth) const;
};

AdapterActivation adapter_activation_from_string(const std::string& s);
AdapterNorm adapter_norm_from_string(const std::string& s);
std::string to_string(AdapterActivation a);
std::string to_string(AdapterNorm n);

// Weights live in the model's parameter store under "<prefix>.<i>.w"
// (1-based layer index). Attachment creates them; the stack only records
// config and the name prefix.
struct AdapterStack {
    AdapterConfig cfg;
    std::string prefix;  // "adapter.text" or "adapter.vision"

    std::string weight_name(int layer_index) const {
        return prefix + "." + std::to_string(layer_index) + ".w";
    }
};

// Creates K square weight matrices initialised uniform(-1/sqrt(width), +1/sqrt(width)).
AdapterStack attach_adapters(ParamStore& store, const std::string& prefix,
                             const AdapterConfig& cfg, int width, int encoder_depth,
                             uint64_t seed);

// x_residual = Norm(Act(x W^T)) for the adapter at 1-based layer_index.
ag::Ref adapter_forward(ag::Graph& g, ag::Ref x, ParamStore& store,
                        const AdapterStack& stack, int layer_index);

// x_enhanced = lambda * x_residual + (1 - lambda) * x
ag::Ref fuse(ag::Ref x, ag::Ref x_residual, double lambda);

}  // namespace zsad
