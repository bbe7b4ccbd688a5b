#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssf/core.hpp"
#include "ssf/fusion.hpp"
#include "ssf/layers.hpp"
#include "ssf/spconv.hpp"
#include "ssf/voxelizer.hpp"

namespace ssf {

struct UnetConfig {
  std::size_t vfe_hidden = 32;
  std::size_t vfe_channels = 32;  // C; the fused map has 2C channels
  std::vector<std::size_t> stage_widths{64, 128, 256};
  std::int32_t kernel_size = 3;
  std::int32_t stride = 2;
  std::size_t final_width = 64;
  std::vector<std::size_t> head_hidden{64};
  bool use_norm = true;
  bool collapse_z = true;  // pillar grids: kernels act as K x K x 1
  PoolMode pool = PoolMode::kMax;

  KernelShape kernel() const;
  Stride stride_shape() const;
  std::size_t stages() const { return stage_widths.size(); }
  void validate() const;

  // Small configuration used for desk-scale overfitting runs.
  static UnetConfig toy();
};

template <typename T>
struct ConvBlock {
  ConvParams<T> conv;
  std::optional<BatchNormParams<T>> norm;
};

template <typename T>
struct EncoderStage {
  ConvBlock<T> down;
  ConvBlock<T> sub0;
  ConvBlock<T> sub1;
};

template <typename T>
struct DecoderStage {
  ConvBlock<T> lateral;
  ConvBlock<T> merge;
  LinearParams<T> reduce;
  ConvBlock<T> up;
};

template <typename T>
struct SsfParams {
  UnetConfig config;
  VfeParams<T> vfe;
  std::vector<EncoderStage<T>> encoder;
  std::vector<DecoderStage<T>> decoder;
  std::vector<LinearParams<T>> head;  // ReLU between layers, none after the last
};

// Shape-only view of one named tensor. Running normalisation statistics are
// listed with trainable == false.
template <typename T>
struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T>* values;
  bool trainable;
};

template <typename T>
std::vector<TensorRef<T>> tensor_refs(SsfParams<T>& params);

template <typename T>
std::size_t trainable_parameter_count(const SsfParams<T>& params);

// Deterministic fan-in scaled uniform initialisation.
template <typename T>
SsfParams<T> init_params(const UnetConfig& cfg, std::uint64_t seed);

// Same structure, every tensor zero (gradient accumulator).
template <typename T>
SsfParams<T> zeros_like(const SsfParams<T>& params);

template <typename U, typename T>
SsfParams<U> cast_params(const SsfParams<T>& params);

// Counters for the scaling benchmark.
struct ForwardStats {
  std::size_t live_rows = 0;
  std::size_t peak_feature_rows = 0;
  std::size_t rulebook_pairs = 0;
  std::size_t union_voxels = 0;

  void acquire(std::size_t rows) {
    live_rows += rows;
    peak_feature_rows = std::max(peak_feature_rows, live_rows);
  }
  void release(std::size_t rows) { live_rows -= rows; }
};

// Coordinates and rulebooks for every level of the U-Net.
struct UnetTopology {
  std::vector<std::vector<VoxelCoord>> level_coords;  // level 0 = input sites
  std::vector<Extent> level_extents;
  std::vector<Rulebook> down;  // stage s: level s -> s + 1
  std::vector<Rulebook> sub;   // submanifold at level s + 1
  std::vector<Rulebook> up;    // transposed down[s]: level s + 1 -> s

  std::size_t pair_count() const;
};

UnetTopology build_unet_topology(const std::vector<VoxelCoord>& coords, const Extent& extent,
                                 const UnetConfig& cfg);

template <typename T>
struct ConvBlockCache {
  SparseFeatureMap<T> input;
  BatchNormCache<T> norm;
  Matrix<T> output;
};

template <typename T>
struct DecoderCache {
  ConvBlockCache<T> lateral;
  ConvBlockCache<T> merge;  // its input is the concatenated tensor
  ConvBlockCache<T> up;
};

template <typename T>
struct UnetCache {
  std::vector<std::array<ConvBlockCache<T>, 3>> encoder;
  std::vector<DecoderCache<T>> decoder;  // indexed by stage
};

template <typename T>
SparseFeatureMap<T> unet_forward(const SparseFeatureMap<T>& fused, const UnetTopology& topo,
                                 const SsfParams<T>& params, NormPhase phase,
                                 UnetCache<T>* cache = nullptr, ForwardStats* stats = nullptr);

// Builds the topology internally.
template <typename T>
SparseFeatureMap<T> unet_forward(const SparseFeatureMap<T>& fused, const Extent& extent,
                                 const SsfParams<T>& params, NormPhase phase);

template <typename T>
Matrix<T> unet_backward(const Matrix<T>& grad_out, const UnetTopology& topo,
                        const UnetCache<T>& cache, const SsfParams<T>& params,
                        SsfParams<T>& grads);

// Feature row of each scan-t point's voxel. Only genuinely occupied voxels are
// ever read; a read of a voxel with mask_t == false is a contract violation.
template <typename T>
Matrix<T> unpillar(const SparseFeatureMap<T>& voxel_feats, const JointVoxelization& jv);

template <typename T>
struct HeadCache {
  std::vector<Matrix<T>> inputs;
  std::vector<Matrix<T>> outputs;
};

// [decoder | per-point VFE | 9-wide point features] -> affine stack -> 3.
template <typename T>
Matrix<T> head_forward(const Matrix<T>& decoder_points, const Matrix<T>& vfe_points,
                       const Matrix<T>& offsets9, const std::vector<LinearParams<T>>& head,
                       HeadCache<T>* cache = nullptr);

// Saved state of one ssf_forward call, enough to run backward_pipeline.
template <typename T>
struct SsfTrace {
  bool has_backward_state = false;
  NormPhase phase = NormPhase::kEval;
  std::vector<std::int32_t> processed_rows;  // cloud_t rows, in kept order
  JointVoxelization jv;
  Matrix<T> features_t;
  Matrix<T> features_t1;
  VirtualVfeCache<T> vfe_t;
  VirtualVfeCache<T> vfe_t1;
  UnetTopology topology;
  UnetCache<T> unet;
  HeadCache<T> head;
  Matrix<T> residual;  // processed points x 3
};

struct FlowPrediction {
  FlowField flow;                        // total flow on cloud_t rows
  std::vector<std::uint8_t> processed;   // 1 where the network produced a residual
  std::vector<Vec3> residual;            // zero where not processed
  ForwardStats stats;
};

// remove ground -> ego-compensate scan t -> joint voxelisation -> VFE with
// virtual voxels -> fusion -> U-Net -> unpillar -> head; total flow is ego
// flow plus the residual, ego flow alone for unprocessed rows.
template <typename T>
FlowPrediction ssf_forward(const FramePair& pair, const SsfParams<T>& params,
                           const GridConfig& grid, NormPhase phase = NormPhase::kEval,
                           SsfTrace<T>* trace = nullptr);

// Reverse pass from d(loss)/d(residual) (processed points x 3) to parameters.
template <typename T>
SsfParams<T> backward_pipeline(const SsfTrace<T>& trace, const SsfParams<T>& params,
                               const Matrix<T>& grad_residual);

// Folds train-phase batch statistics of a trace into running statistics.
template <typename T>
void update_running_stats(SsfParams<T>& params, const SsfTrace<T>& trace);

}  // namespace ssf
