#pragma once

#include "ssf/network.hpp"
#include "ssf/scene_io.hpp"

namespace ssf {

// Every tensor of params (trainable and running statistics), in tensor_refs order.
WeightBundle to_weight_bundle(const SsfParams<float>& params);

// Infers widths, stage count, kernel size and norm usage from tensor shapes;
// stride and pooling mode come from `base`. Missing, extra or misshapen
// tensors raise ParseError(kStructure) naming the tensor.
SsfParams<float> from_weight_bundle(const WeightBundle& bundle, const UnetConfig& base);

UnetConfig infer_config(const WeightBundle& bundle, const UnetConfig& base);

}  // namespace ssf
