#include "ssf/weights.hpp"

#include <set>

#include "ssf/errors.hpp"

namespace ssf {

namespace {

[[noreturn]] void bad(const std::string& name, const std::string& what) {
  throw ParseError(ParseErrorKind::kStructure, name, name + ": " + what);
}

const NamedTensor& need(const WeightBundle& b, const std::string& name, std::size_t ndim) {
  const NamedTensor* t = b.find(name);
  if (!t) bad(name, "tensor missing");
  if (t->shape.size() != ndim) bad(name, "unexpected rank");
  return *t;
}

}  // namespace

WeightBundle to_weight_bundle(const SsfParams<float>& params) {
  WeightBundle out;
  for (const auto& ref : tensor_refs(const_cast<SsfParams<float>&>(params))) {
    out.tensors.push_back({ref.name, ref.shape, *ref.values});
  }
  return out;
}

UnetConfig infer_config(const WeightBundle& b, const UnetConfig& base) {
  UnetConfig cfg = base;
  const NamedTensor& v0 = need(b, "vfe.0.w", 2);
  const NamedTensor& v1 = need(b, "vfe.1.w", 2);
  if (v0.shape[0] != kPointFeatureWidth) bad(v0.name, "input width must be 9");
  cfg.vfe_hidden = v0.shape[1];
  cfg.vfe_channels = v1.shape[1];
  cfg.use_norm = b.find("vfe.0.norm.gamma") != nullptr;

  cfg.stage_widths.clear();
  for (std::size_t s = 0;; ++s) {
    const std::string name = "enc." + std::to_string(s) + ".down.w";
    if (!b.find(name)) break;
    const NamedTensor& t = need(b, name, 5);
    if (s == 0) {
      if (t.shape[1] != t.shape[2]) bad(name, "kernel must be square in x and y");
      cfg.kernel_size = static_cast<std::int32_t>(t.shape[2]);
      cfg.collapse_z = t.shape[0] == 1 && t.shape[2] != 1;
    }
    cfg.stage_widths.push_back(t.shape[4]);
  }
  if (cfg.stage_widths.empty()) bad("enc.0.down.w", "tensor missing");
  cfg.final_width = need(b, "dec.0.up.w", 5).shape[4];

  cfg.head_hidden.clear();
  std::size_t layers = 0;
  while (b.find("head." + std::to_string(layers) + ".w")) ++layers;
  if (layers == 0) bad("head.0.w", "tensor missing");
  for (std::size_t i = 0; i + 1 < layers; ++i) {
    cfg.head_hidden.push_back(need(b, "head." + std::to_string(i) + ".w", 2).shape[1]);
  }
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    bad("config", e.what());
  }
  return cfg;
}

SsfParams<float> from_weight_bundle(const WeightBundle& bundle, const UnetConfig& base) {
  const UnetConfig cfg = infer_config(bundle, base);
  SsfParams<float> params = init_params<float>(cfg, 0);
  std::set<std::string> used;
  for (auto& ref : tensor_refs(params)) {
    const NamedTensor* t = bundle.find(ref.name);
    if (!t) bad(ref.name, "tensor missing");
    if (t->shape != ref.shape) bad(ref.name, "shape does not match the inferred network");
    if (t->values.size() != ref.values->size()) bad(ref.name, "value count differs from shape");
    *ref.values = t->values;
    used.insert(ref.name);
  }
  for (const NamedTensor& t : bundle.tensors) {
    if (!used.count(t.name)) bad(t.name, "tensor does not belong to the network");
  }
  return params;
}

}  // namespace ssf
