#include "ssf/network.hpp"

#include <cmath>
#include <map>
#include <string>

#include "ssf/errors.hpp"
#include "ssf/rng.hpp"

namespace ssf {

// ---------------------------------------------------------------------------
// Configuration

KernelShape UnetConfig::kernel() const {
  return {kernel_size, kernel_size, collapse_z ? 1 : kernel_size};
}

Stride UnetConfig::stride_shape() const {
  return {stride, stride, collapse_z ? 1 : stride};
}

void UnetConfig::validate() const {
  SSF_REQUIRE(vfe_hidden > 0 && vfe_channels > 0 && final_width > 0,
              "network widths must be positive");
  SSF_REQUIRE(!stage_widths.empty(), "network needs at least one stage");
  for (std::size_t w : stage_widths) SSF_REQUIRE(w > 0, "stage widths must be positive");
  for (std::size_t w : head_hidden) SSF_REQUIRE(w > 0, "head widths must be positive");
  SSF_REQUIRE(kernel_size >= 1 && kernel_size % 2 == 1, "kernel size must be odd");
  SSF_REQUIRE(stride >= 1, "stride must be >= 1");
}

UnetConfig UnetConfig::toy() {
  UnetConfig cfg;
  cfg.vfe_hidden = 16;
  cfg.vfe_channels = 8;
  cfg.stage_widths = {16, 32};
  cfg.final_width = 16;
  cfg.head_hidden = {32};
  // Full-batch overfitting on a handful of pairs: batch statistics of the
  // training batch do not transfer to eval-phase running statistics.
  cfg.use_norm = false;
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping

namespace {

template <typename T>
LinearParams<T> make_linear(std::size_t in, std::size_t out, bool bias = true) {
  LinearParams<T> p;
  p.in_features = in;
  p.out_features = out;
  p.weight.assign(in * out, T{0});
  if (bias) p.bias.assign(out, T{0});
  return p;
}

template <typename T>
ConvBlock<T> make_block(const KernelShape& k, std::size_t in, std::size_t out, bool norm) {
  ConvBlock<T> b;
  b.conv.kernel = k;
  b.conv.in_channels = in;
  b.conv.out_channels = out;
  b.conv.weight.assign(k.volume() * in * out, T{0});
  // A bias in front of normalisation is cancelled by the mean subtraction.
  if (norm) {
    b.norm = make_batchnorm<T>(out);
  } else {
    b.conv.bias.assign(out, T{0});
  }
  return b;
}

template <typename T>
struct Visitor {
  std::vector<TensorRef<T>>& out;

  void add(std::string name, std::vector<std::size_t> shape, std::vector<T>& v,
           bool trainable) {
    out.push_back({std::move(name), std::move(shape), &v, trainable});
  }
  void norm(const std::string& prefix, std::optional<BatchNormParams<T>>& n) {
    if (!n) return;
    add(prefix + ".norm.gamma", {n->channels}, n->gamma, true);
    add(prefix + ".norm.beta", {n->channels}, n->beta, true);
    add(prefix + ".norm.running_mean", {n->channels}, n->running_mean, false);
    add(prefix + ".norm.running_var", {n->channels}, n->running_var, false);
  }
  void linear(const std::string& prefix, LinearParams<T>& l) {
    add(prefix + ".w", {l.in_features, l.out_features}, l.weight, true);
    if (!l.bias.empty()) add(prefix + ".b", {l.out_features}, l.bias, true);
  }
  void block(const std::string& prefix, ConvBlock<T>& b) {
    const KernelShape& k = b.conv.kernel;
    add(prefix + ".w",
        {static_cast<std::size_t>(k.z), static_cast<std::size_t>(k.y),
         static_cast<std::size_t>(k.x), b.conv.in_channels, b.conv.out_channels},
        b.conv.weight, true);
    if (!b.conv.bias.empty()) add(prefix + ".b", {b.conv.out_channels}, b.conv.bias, true);
    norm(prefix, b.norm);
  }
};

template <typename T>
void add_into(std::vector<T>& dst, const std::vector<T>& src) {
  SSF_REQUIRE(dst.size() == src.size(), "gradient accumulator shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
  SSF_REQUIRE(dst.rows() == src.rows() && dst.cols() == src.cols(),
              "gradient shape mismatch");
  add_into(dst.values(), src.values());
}

template <typename U, typename T>
std::vector<U> cast_vec(const std::vector<T>& v) {
  return std::vector<U>(v.begin(), v.end());
}

template <typename U, typename T>
LinearParams<U> cast_linear(const LinearParams<T>& p) {
  return {p.in_features, p.out_features, cast_vec<U>(p.weight), cast_vec<U>(p.bias)};
}

template <typename U, typename T>
std::optional<BatchNormParams<U>> cast_norm(const std::optional<BatchNormParams<T>>& p) {
  if (!p) return std::nullopt;
  BatchNormParams<U> n;
  n.channels = p->channels;
  n.gamma = cast_vec<U>(p->gamma);
  n.beta = cast_vec<U>(p->beta);
  n.running_mean = cast_vec<U>(p->running_mean);
  n.running_var = cast_vec<U>(p->running_var);
  n.momentum = static_cast<U>(p->momentum);
  n.eps = static_cast<U>(p->eps);
  return n;
}

template <typename U, typename T>
ConvBlock<U> cast_block(const ConvBlock<T>& b) {
  ConvBlock<U> o;
  o.conv.kernel = b.conv.kernel;
  o.conv.in_channels = b.conv.in_channels;
  o.conv.out_channels = b.conv.out_channels;
  o.conv.weight = cast_vec<U>(b.conv.weight);
  o.conv.bias = cast_vec<U>(b.conv.bias);
  o.norm = cast_norm<U>(b.norm);
  return o;
}

}  // namespace

template <typename T>
std::vector<TensorRef<T>> tensor_refs(SsfParams<T>& p) {
  std::vector<TensorRef<T>> refs;
  Visitor<T> v{refs};
  v.linear("vfe.0", p.vfe.layer0.linear);
  v.norm("vfe.0", p.vfe.layer0.norm);
  v.linear("vfe.1", p.vfe.layer1.linear);
  v.norm("vfe.1", p.vfe.layer1.norm);
  for (std::size_t s = 0; s < p.encoder.size(); ++s) {
    const std::string prefix = "enc." + std::to_string(s);
    v.block(prefix + ".down", p.encoder[s].down);
    v.block(prefix + ".sub0", p.encoder[s].sub0);
    v.block(prefix + ".sub1", p.encoder[s].sub1);
  }
  for (std::size_t s = 0; s < p.decoder.size(); ++s) {
    const std::string prefix = "dec." + std::to_string(s);
    v.block(prefix + ".lateral", p.decoder[s].lateral);
    v.block(prefix + ".merge", p.decoder[s].merge);
    v.linear(prefix + ".reduce", p.decoder[s].reduce);
    v.block(prefix + ".up", p.decoder[s].up);
  }
  for (std::size_t i = 0; i < p.head.size(); ++i) {
    v.linear("head." + std::to_string(i), p.head[i]);
  }
  return refs;
}

template <typename T>
std::size_t trainable_parameter_count(const SsfParams<T>& params) {
  std::size_t n = 0;
  for (const auto& r : tensor_refs(const_cast<SsfParams<T>&>(params))) {
    if (r.trainable) n += r.values->size();
  }
  return n;
}

template <typename T>
SsfParams<T> init_params(const UnetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const KernelShape k = cfg.kernel();
  SsfParams<T> p;
  p.config = cfg;
  p.vfe.layer0.linear = make_linear<T>(kPointFeatureWidth, cfg.vfe_hidden, !cfg.use_norm);
  p.vfe.layer1.linear = make_linear<T>(cfg.vfe_hidden, cfg.vfe_channels, !cfg.use_norm);
  if (cfg.use_norm) {
    p.vfe.layer0.norm = make_batchnorm<T>(cfg.vfe_hidden);
    p.vfe.layer1.norm = make_batchnorm<T>(cfg.vfe_channels);
  }
  p.vfe.pool = cfg.pool;

  std::size_t in = 2 * cfg.vfe_channels;
  for (std::size_t w : cfg.stage_widths) {
    p.encoder.push_back({make_block<T>(k, in, w, cfg.use_norm),
                         make_block<T>(k, w, w, cfg.use_norm),
                         make_block<T>(k, w, w, cfg.use_norm)});
    in = w;
  }
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    const std::size_t w = cfg.stage_widths[s];
    const std::size_t out = s > 0 ? cfg.stage_widths[s - 1] : cfg.final_width;
    p.decoder.push_back({make_block<T>(k, w, w, cfg.use_norm),
                         make_block<T>(k, 2 * w, w, cfg.use_norm),
                         make_linear<T>(2 * w, w), make_block<T>(k, w, out, cfg.use_norm)});
  }
  in = cfg.final_width + cfg.vfe_channels + kPointFeatureWidth;
  for (std::size_t h : cfg.head_hidden) {
    p.head.push_back(make_linear<T>(in, h));
    in = h;
  }
  p.head.push_back(make_linear<T>(in, 3));

  SplitMix64 rng(seed);
  std::map<std::string, double> fan_in;
  for (auto& ref : tensor_refs(p)) {
    const bool is_weight = ref.name.ends_with(".w");
    const bool is_bias = ref.name.ends_with(".b");
    if (!is_weight && !is_bias) continue;
    const std::string stem = ref.name.substr(0, ref.name.size() - 2);
    double bound = 0.0;
    if (is_weight) {
      double f = 1.0;
      for (std::size_t d = 0; d + 1 < ref.shape.size(); ++d) f *= static_cast<double>(ref.shape[d]);
      fan_in[stem] = f;
      bound = std::sqrt(6.0 / f);
    } else {
      bound = 1.0 / std::sqrt(fan_in.at(stem));
    }
    for (T& v : *ref.values) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return p;
}

template <typename U, typename T>
SsfParams<U> cast_params(const SsfParams<T>& p) {
  SsfParams<U> o;
  o.config = p.config;
  o.vfe.layer0 = {cast_linear<U>(p.vfe.layer0.linear), cast_norm<U>(p.vfe.layer0.norm)};
  o.vfe.layer1 = {cast_linear<U>(p.vfe.layer1.linear), cast_norm<U>(p.vfe.layer1.norm)};
  o.vfe.pool = p.vfe.pool;
  for (const auto& e : p.encoder) {
    o.encoder.push_back({cast_block<U>(e.down), cast_block<U>(e.sub0), cast_block<U>(e.sub1)});
  }
  for (const auto& d : p.decoder) {
    o.decoder.push_back({cast_block<U>(d.lateral), cast_block<U>(d.merge),
                         cast_linear<U>(d.reduce), cast_block<U>(d.up)});
  }
  for (const auto& h : p.head) o.head.push_back(cast_linear<U>(h));
  return o;
}

template <typename T>
SsfParams<T> zeros_like(const SsfParams<T>& params) {
  SsfParams<T> z = params;
  for (auto& ref : tensor_refs(z)) std::fill(ref.values->begin(), ref.values->end(), T{0});
  return z;
}

// ---------------------------------------------------------------------------
// U-Net

std::size_t UnetTopology::pair_count() const {
  std::size_t n = 0;
  for (const auto& r : down) n += r.pair_count();
  for (const auto& r : sub) n += r.pair_count();
  for (const auto& r : up) n += r.pair_count();
  return n;
}

UnetTopology build_unet_topology(const std::vector<VoxelCoord>& coords, const Extent& extent,
                                 const UnetConfig& cfg) {
  UnetTopology topo;
  topo.level_coords.push_back(coords);
  topo.level_extents.push_back(extent);
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    topo.down.push_back(build_rulebook_strided(topo.level_coords[s], topo.level_extents[s],
                                               cfg.kernel(), cfg.stride_shape()));
    topo.level_coords.push_back(topo.down.back().output_coords);
    topo.level_extents.push_back(topo.down.back().output_extent);
    topo.sub.push_back(build_rulebook_submanifold(topo.level_coords[s + 1], cfg.kernel()));
    topo.up.push_back(invert_rulebook(topo.down.back()));
  }
  return topo;
}

namespace {

template <typename T>
SparseFeatureMap<T> block_forward(const SparseFeatureMap<T>& x, const Rulebook& rb,
                                  const ConvBlock<T>& b, NormPhase phase,
                                  ConvBlockCache<T>* cache, const std::string& name) {
  SparseFeatureMap<T> y;
  try {
    y = conv_forward(x, rb, b.conv);
  } catch (const NumericError&) {
    throw NumericError(name, "non-finite convolution output");
  }
  if (b.norm) {
    y.features =
        batchnorm_forward(y.features, *b.norm, phase, {}, cache ? &cache->norm : nullptr);
  }
  // Checked before the ReLU, which would map NaN to zero.
  check_finite<T>(y.features.values(), name);
  relu_inplace(y.features);
  if (cache) {
    cache->input = x;
    cache->output = y.features;
  }
  return y;
}

template <typename T>
Matrix<T> block_backward(Matrix<T> grad, const ConvBlockCache<T>& cache, const Rulebook& rb,
                         const ConvBlock<T>& b, ConvBlock<T>& g) {
  relu_backward_inplace(grad, cache.output);
  if (b.norm) {
    BatchNormGrads<T> bn = batchnorm_backward(grad, cache.norm, *b.norm);
    add_into(g.norm->gamma, bn.gamma);
    add_into(g.norm->beta, bn.beta);
    grad = std::move(bn.input);
  }
  ConvGrads<T> cg = conv_backward(grad, cache.input, rb, b.conv);
  add_into(g.conv.weight, cg.weight);
  if (!b.conv.bias.empty()) add_into(g.conv.bias, cg.bias);
  return std::move(cg.input);
}

}  // namespace

template <typename T>
SparseFeatureMap<T> unet_forward(const SparseFeatureMap<T>& fused, const UnetTopology& topo,
                                 const SsfParams<T>& params, NormPhase phase,
                                 UnetCache<T>* cache, ForwardStats* stats) {
  const std::size_t stages = params.encoder.size();
  SSF_REQUIRE(params.decoder.size() == stages && topo.down.size() == stages,
              "unet: stage count mismatch");
  SSF_REQUIRE(fused.coords == topo.level_coords[0],
              "unet: input coordinates differ from the topology");
  SSF_REQUIRE(fused.channels() == params.encoder[0].down.conv.in_channels,
              "unet: fused width differs from stage-0 input width");
  ForwardStats local;
  ForwardStats& st = stats ? *stats : local;
  st.rulebook_pairs += topo.pair_count();
  if (cache) {
    cache->encoder.assign(stages, {});
    cache->decoder.assign(stages, {});
  }

  std::vector<SparseFeatureMap<T>> skips(stages);
  const SparseFeatureMap<T>* current = &fused;
  for (std::size_t s = 0; s < stages; ++s) {
    const std::string prefix = "enc." + std::to_string(s);
    const auto& e = params.encoder[s];
    auto* c = cache ? &cache->encoder[s] : nullptr;
    SparseFeatureMap<T> h =
        block_forward(*current, topo.down[s], e.down, phase, c ? &(*c)[0] : nullptr,
                      prefix + ".down");
    st.acquire(h.rows());
    SparseFeatureMap<T> h2 =
        block_forward(h, topo.sub[s], e.sub0, phase, c ? &(*c)[1] : nullptr, prefix + ".sub0");
    st.acquire(h2.rows());
    st.release(h.rows());
    skips[s] =
        block_forward(h2, topo.sub[s], e.sub1, phase, c ? &(*c)[2] : nullptr, prefix + ".sub1");
    st.acquire(skips[s].rows());
    st.release(h2.rows());
    current = &skips[s];
  }

  SparseFeatureMap<T> bottom = skips[stages - 1];
  for (std::size_t si = stages; si-- > 0;) {
    const std::string prefix = "dec." + std::to_string(si);
    const auto& d = params.decoder[si];
    auto* c = cache ? &cache->decoder[si] : nullptr;
    SparseFeatureMap<T> lateral = block_forward(skips[si], topo.sub[si], d.lateral, phase,
                                                c ? &c->lateral : nullptr, prefix + ".lateral");
    st.acquire(lateral.rows());
    if (!(bottom.coords == lateral.coords)) {
      contract_failure("unet: skip connection coordinate mismatch at stage " +
                       std::to_string(si));
    }
    SparseFeatureMap<T> merged{lateral.coords, concat_cols(bottom.features, lateral.features)};
    st.acquire(merged.rows());
    st.release(lateral.rows());
    SparseFeatureMap<T> m =
        block_forward(merged, topo.sub[si], d.merge, phase, c ? &c->merge : nullptr,
                      prefix + ".merge");
    st.acquire(m.rows());
    Matrix<T> reduced = linear_forward(merged.features, d.reduce);
    st.acquire(reduced.rows());
    add_into(m.features, reduced);
    st.release(reduced.rows());
    st.release(merged.rows());
    SparseFeatureMap<T> up =
        block_forward(m, topo.up[si], d.up, phase, c ? &c->up : nullptr, prefix + ".up");
    st.acquire(up.rows());
    st.release(m.rows());
    st.release(bottom.rows());
    if (si + 1 != stages) st.release(skips[si].rows());
    if (!(up.coords == topo.level_coords[si])) {
      contract_failure("unet: decoder stage " + std::to_string(si) +
                       " did not restore its input coordinates");
    }
    bottom = std::move(up);
  }
  return bottom;
}

template <typename T>
SparseFeatureMap<T> unet_forward(const SparseFeatureMap<T>& fused, const Extent& extent,
                                 const SsfParams<T>& params, NormPhase phase) {
  const UnetTopology topo = build_unet_topology(fused.coords, extent, params.config);
  return unet_forward(fused, topo, params, phase);
}

template <typename T>
Matrix<T> unet_backward(const Matrix<T>& grad_out, const UnetTopology& topo,
                        const UnetCache<T>& cache, const SsfParams<T>& params,
                        SsfParams<T>& grads) {
  const std::size_t stages = params.encoder.size();
  SSF_REQUIRE(cache.encoder.size() == stages && cache.decoder.size() == stages,
              "unet backward: missing saved state");
  std::vector<Matrix<T>> g_skip(stages);
  for (std::size_t s = 0; s < stages; ++s) {
    g_skip[s] = Matrix<T>(topo.level_coords[s + 1].size(), params.encoder[s].sub1.conv.out_channels);
  }

  Matrix<T> g_bottom = grad_out;
  for (std::size_t s = 0; s < stages; ++s) {
    const auto& dc = cache.decoder[s];
    const auto& dp = params.decoder[s];
    auto& dg = grads.decoder[s];
    Matrix<T> g_sum = block_backward(std::move(g_bottom), dc.up, topo.up[s], dp.up, dg.up);
    Matrix<T> g_merged = block_backward(g_sum, dc.merge, topo.sub[s], dp.merge, dg.merge);
    LinearGrads<T> lg = linear_backward(g_sum, dc.merge.input.features, dp.reduce);
    add_into(dg.reduce.weight, lg.weight);
    add_into(dg.reduce.bias, lg.bias);
    add_into(g_merged, lg.input);
    Matrix<T> g_b;
    Matrix<T> g_lat;
    split_cols(g_merged, dp.lateral.conv.out_channels, g_b, g_lat);
    add_into(g_skip[s],
             block_backward(std::move(g_lat), dc.lateral, topo.sub[s], dp.lateral, dg.lateral));
    g_bottom = std::move(g_b);
  }
  add_into(g_skip[stages - 1], g_bottom);

  Matrix<T> carry;
  for (std::size_t s = stages; s-- > 0;) {
    const auto& ec = cache.encoder[s];
    const auto& ep = params.encoder[s];
    auto& eg = grads.encoder[s];
    Matrix<T> g = std::move(g_skip[s]);
    if (s + 1 < stages) add_into(g, carry);
    g = block_backward(std::move(g), ec[2], topo.sub[s], ep.sub1, eg.sub1);
    g = block_backward(std::move(g), ec[1], topo.sub[s], ep.sub0, eg.sub0);
    carry = block_backward(std::move(g), ec[0], topo.down[s], ep.down, eg.down);
  }
  return carry;
}

// ---------------------------------------------------------------------------
// Unpillar and head

template <typename T>
Matrix<T> unpillar(const SparseFeatureMap<T>& voxel_feats, const JointVoxelization& jv) {
  SSF_REQUIRE(voxel_feats.coords == jv.union_coords,
              "unpillar: features are not on the union coordinates");
  const auto& a = jv.assignment_t;
  Matrix<T> out(a.kept_count(), voxel_feats.channels());
  for (std::size_t i = 0; i < a.kept_count(); ++i) {
    const auto v = static_cast<std::size_t>(a.point_to_voxel[i]);
    SSF_REQUIRE(jv.mask_t[v], "unpillar: scan-t point mapped to a virtual voxel");
    auto src = voxel_feats.features.row(v);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename T>
Matrix<T> head_forward(const Matrix<T>& decoder_points, const Matrix<T>& vfe_points,
                       const Matrix<T>& offsets9, const std::vector<LinearParams<T>>& head,
                       HeadCache<T>* cache) {
  SSF_REQUIRE(!head.empty(), "head: no layers");
  SSF_REQUIRE(offsets9.cols() == kPointFeatureWidth, "head: point features must be 9 wide");
  Matrix<T> x = concat_cols(concat_cols(decoder_points, vfe_points), offsets9);
  if (cache) {
    cache->inputs.clear();
    cache->outputs.clear();
  }
  for (std::size_t i = 0; i < head.size(); ++i) {
    Matrix<T> y = linear_forward(x, head[i]);
    check_finite<T>(y.values(), "head." + std::to_string(i));
    if (i + 1 < head.size()) relu_inplace(y);
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->outputs.push_back(y);
    }
    x = std::move(y);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Full pipeline

template <typename T>
FlowPrediction ssf_forward(const FramePair& pair, const SsfParams<T>& params,
                           const GridConfig& grid, NormPhase phase, SsfTrace<T>* trace) {
  pair.validate();
  grid.validate();
  params.config.validate();
  const std::size_t n = pair.cloud_t.size();
  FlowPrediction out;
  out.flow.flow = ego_flow(pair.cloud_t.positions, pair.ego_motion);
  out.flow.validity.assign(n, 1);
  out.processed.assign(n, 0);
  out.residual.assign(n, Vec3::Zero());

  const GroundRemoval ng_t = remove_ground(pair.cloud_t);
  const GroundRemoval ng_t1 = remove_ground(pair.cloud_t1);
  const std::vector<Vec3> points_t = apply_transform(ng_t.cloud.positions, pair.ego_motion);
  const std::vector<Vec3>& points_t1 = ng_t1.cloud.positions;

  SsfTrace<T> local;
  SsfTrace<T>& tr = trace ? *trace : local;
  tr = SsfTrace<T>{};
  tr.phase = phase;
  tr.jv = joint_voxelize(points_t, points_t1, grid);
  const JointVoxelization& jv = tr.jv;
  for (std::int32_t r : jv.assignment_t.kept_point_rows) {
    tr.processed_rows.push_back(ng_t.source_rows[static_cast<std::size_t>(r)]);
  }
  out.stats.union_voxels = jv.size();
  if (tr.processed_rows.empty()) {
    tr.has_backward_state = trace != nullptr;
    return out;
  }

  tr.features_t = augment_point_features(points_t, jv.assignment_t, grid).cast<T>();
  tr.features_t1 = augment_point_features(points_t1, jv.assignment_t1, grid).cast<T>();
  VirtualVfeOutput<T> e_t =
      vfe_scan_with_virtual(jv, false, tr.features_t, grid, params.vfe, phase,
                            trace ? &tr.vfe_t : nullptr);
  VirtualVfeOutput<T> e_t1 =
      vfe_scan_with_virtual(jv, true, tr.features_t1, grid, params.vfe, phase,
                            trace ? &tr.vfe_t1 : nullptr);
  ForwardStats& st = out.stats;
  st.acquire(e_t.point_features.rows());
  st.acquire(2 * jv.size());
  SparseFeatureMap<T> fused = concat_fused(e_t.voxel_features, e_t1.voxel_features,
                                           jv.union_coords);
  st.acquire(fused.rows());
  st.release(2 * jv.size());

  tr.topology = build_unet_topology(jv.union_coords, grid_extent(grid), params.config);
  SparseFeatureMap<T> decoded =
      unet_forward(fused, tr.topology, params, phase, trace ? &tr.unet : nullptr, &st);
  st.release(fused.rows());

  Matrix<T> point_decoded = unpillar(decoded, jv);
  st.acquire(point_decoded.rows());
  tr.residual = head_forward(point_decoded, e_t.point_features, tr.features_t, params.head,
                             trace ? &tr.head : nullptr);
  st.release(point_decoded.rows());
  st.release(e_t.point_features.rows());

  for (std::size_t i = 0; i < tr.processed_rows.size(); ++i) {
    const auto row = static_cast<std::size_t>(tr.processed_rows[i]);
    const Vec3 r(static_cast<double>(tr.residual(i, 0)), static_cast<double>(tr.residual(i, 1)),
                 static_cast<double>(tr.residual(i, 2)));
    out.residual[row] = r;
    out.flow.flow[row] += r;
    out.processed[row] = 1;
  }
  tr.has_backward_state = trace != nullptr;
  return out;
}

template <typename T>
SsfParams<T> backward_pipeline(const SsfTrace<T>& trace, const SsfParams<T>& params,
                               const Matrix<T>& grad_residual) {
  SSF_REQUIRE(trace.has_backward_state, "backward_pipeline: forward state was not saved");
  SsfParams<T> grads = zeros_like(params);
  const std::size_t n = trace.processed_rows.size();
  SSF_REQUIRE(grad_residual.rows() == n && (n == 0 || grad_residual.cols() == 3),
              "backward_pipeline: residual gradient shape mismatch");
  if (n == 0) return grads;
  SSF_REQUIRE(trace.head.inputs.size() == params.head.size(),
              "backward_pipeline: head state missing");

  Matrix<T> g = grad_residual;
  for (std::size_t i = params.head.size(); i-- > 0;) {
    if (i + 1 < params.head.size()) relu_backward_inplace(g, trace.head.outputs[i]);
    LinearGrads<T> lg = linear_backward(g, trace.head.inputs[i], params.head[i]);
    add_into(grads.head[i].weight, lg.weight);
    add_into(grads.head[i].bias, lg.bias);
    g = std::move(lg.input);
  }
  const std::size_t f = params.config.final_width;
  const std::size_t c = params.config.vfe_channels;
  Matrix<T> g_dec;
  Matrix<T> g_rest;
  split_cols(g, f, g_dec, g_rest);
  Matrix<T> g_vfe_points;
  Matrix<T> g_offsets;
  split_cols(g_rest, c, g_vfe_points, g_offsets);

  const JointVoxelization& jv = trace.jv;
  Matrix<T> g_decoded(jv.size(), f);
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = g_decoded.row(static_cast<std::size_t>(jv.assignment_t.point_to_voxel[i]));
    auto src = g_dec.row(i);
    for (std::size_t j = 0; j < f; ++j) dst[j] += src[j];
  }
  Matrix<T> g_fused = unet_backward(g_decoded, trace.topology, trace.unet, params, grads);
  Matrix<T> g_e_t;
  Matrix<T> g_e_t1;
  split_cols(g_fused, c, g_e_t, g_e_t1);
  vfe_scan_with_virtual_backward(g_e_t, &g_vfe_points, jv, false, trace.vfe_t, params.vfe,
                                 grads.vfe);
  vfe_scan_with_virtual_backward(g_e_t1, static_cast<const Matrix<T>*>(nullptr), jv, true,
                                 trace.vfe_t1, params.vfe, grads.vfe);
  return grads;
}

namespace {

template <typename T>
void update_norm(std::optional<BatchNormParams<T>>& p, const BatchNormCache<T>& c) {
  if (p) ssf::update_running_stats(*p, c);
}

template <typename T>
void update_block(ConvBlock<T>& b, const ConvBlockCache<T>& c) {
  update_norm(b.norm, c.norm);
}

}  // namespace

template <typename T>
void update_running_stats(SsfParams<T>& params, const SsfTrace<T>& trace) {
  if (trace.phase != NormPhase::kTrain || trace.processed_rows.empty()) return;
  for (const auto* vc : {&trace.vfe_t, &trace.vfe_t1}) {
    update_norm(params.vfe.layer0.norm, vc->vfe.layer0.norm);
    update_norm(params.vfe.layer1.norm, vc->vfe.layer1.norm);
  }
  for (std::size_t s = 0; s < params.encoder.size(); ++s) {
    update_block(params.encoder[s].down, trace.unet.encoder[s][0]);
    update_block(params.encoder[s].sub0, trace.unet.encoder[s][1]);
    update_block(params.encoder[s].sub1, trace.unet.encoder[s][2]);
    update_block(params.decoder[s].lateral, trace.unet.decoder[s].lateral);
    update_block(params.decoder[s].merge, trace.unet.decoder[s].merge);
    update_block(params.decoder[s].up, trace.unet.decoder[s].up);
  }
}

#define SSF_INSTANTIATE(T)                                                                 \
  template std::vector<TensorRef<T>> tensor_refs<T>(SsfParams<T>&);                        \
  template std::size_t trainable_parameter_count<T>(const SsfParams<T>&);                  \
  template SsfParams<T> init_params<T>(const UnetConfig&, std::uint64_t);                  \
  template SsfParams<T> zeros_like<T>(const SsfParams<T>&);                                \
  template SparseFeatureMap<T> unet_forward<T>(const SparseFeatureMap<T>&,                 \
                                               const UnetTopology&, const SsfParams<T>&,   \
                                               NormPhase, UnetCache<T>*, ForwardStats*);   \
  template SparseFeatureMap<T> unet_forward<T>(const SparseFeatureMap<T>&, const Extent&,  \
                                               const SsfParams<T>&, NormPhase);            \
  template Matrix<T> unet_backward<T>(const Matrix<T>&, const UnetTopology&,               \
                                      const UnetCache<T>&, const SsfParams<T>&,            \
                                      SsfParams<T>&);                                      \
  template Matrix<T> unpillar<T>(const SparseFeatureMap<T>&, const JointVoxelization&);    \
  template Matrix<T> head_forward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, \
                                     const std::vector<LinearParams<T>>&, HeadCache<T>*);  \
  template FlowPrediction ssf_forward<T>(const FramePair&, const SsfParams<T>&,            \
                                         const GridConfig&, NormPhase, SsfTrace<T>*);      \
  template SsfParams<T> backward_pipeline<T>(const SsfTrace<T>&, const SsfParams<T>&,      \
                                             const Matrix<T>&);                            \
  template void update_running_stats<T>(SsfParams<T>&, const SsfTrace<T>&);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

template SsfParams<double> cast_params<double, float>(const SsfParams<float>&);
template SsfParams<float> cast_params<float, double>(const SsfParams<double>&);
template SsfParams<float> cast_params<float, float>(const SsfParams<float>&);
template SsfParams<double> cast_params<double, double>(const SsfParams<double>&);

}  // namespace ssf
