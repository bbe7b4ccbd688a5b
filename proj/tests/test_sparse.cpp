#include <doctest.h>

#include "ssf/errors.hpp"
#include "ssf/parallel.hpp"
#include "ssf/sparse_tensor.hpp"
#include "ssf/spconv.hpp"
#include "support.hpp"

using namespace ssf;
using namespace ssf::testing;

TEST_CASE("coordinate packing preserves canonical order") {
  SplitMix64 rng(7);
  std::vector<VoxelCoord> coords;
  for (int i = 0; i < 500; ++i) {
    coords.push_back({static_cast<std::int32_t>(rng.below(kCoordLimit)),
                      static_cast<std::int32_t>(rng.below(kCoordLimit)),
                      static_cast<std::int32_t>(rng.below(kCoordLimit))});
  }
  for (const VoxelCoord& c : coords) CHECK(unpack_coord(pack_coord(c)) == c);
  for (std::size_t i = 1; i < coords.size(); ++i) {
    const auto& a = coords[i - 1];
    const auto& b = coords[i];
    CHECK((a < b) == (pack_coord(a) < pack_coord(b)));
  }
}

TEST_CASE("coordinate index") {
  const std::vector<VoxelCoord> coords{{0, 0, 0}, {3, 1, 0}, {2, 2, 1}};
  const CoordIndex index(coords);
  CHECK(index.find({3, 1, 0}) == 1);
  CHECK(index.find({1, 1, 1}) == -1);
  const std::vector<VoxelCoord> dup{{1, 1, 0}, {1, 1, 0}};
  CHECK_THROWS_AS(CoordIndex{dup}, ContractError);
  CHECK(is_canonical(coords));
  CHECK_FALSE(is_canonical(std::vector<VoxelCoord>{{1, 0, 0}, {0, 0, 0}}));
}

TEST_CASE("output extent") {
  CHECK(conv_output_extent({16, 16, 1}, {3, 3, 1}, {2, 2, 1}) == Extent{8, 8, 1});
  CHECK(conv_output_extent({15, 9, 1}, {3, 3, 1}, {2, 2, 1}) == Extent{8, 5, 1});
  CHECK(conv_output_extent({5, 5, 5}, {3, 3, 3}, {1, 1, 1}) == Extent{5, 5, 5});
}

TEST_CASE("submanifold rulebook matches neighbour enumeration") {
  SplitMix64 rng(11);
  const Extent e{9, 7, 3};
  const auto coords = random_coords(rng, e, 0.3);
  const KernelShape k{3, 3, 3};
  const Rulebook rb = build_rulebook_submanifold(coords, k);
  CHECK(rb.output_coords == coords);
  std::size_t expected = 0;
  std::set<VoxelCoord> active(coords.begin(), coords.end());
  for (const VoxelCoord& c : coords) {
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) expected += active.count({c.x + dx, c.y + dy, c.z + dz});
      }
    }
  }
  CHECK(rb.pair_count() == expected);
  for (const auto& pairs : rb.pairs) {
    std::set<std::int32_t> ins, outs;
    for (const RulePair& p : pairs) {
      CHECK(ins.insert(p.input_row).second);
      CHECK(outs.insert(p.output_row).second);
    }
  }
}

TEST_CASE("submanifold rejects even kernels") {
  const std::vector<VoxelCoord> coords{{0, 0, 0}};
  CHECK_THROWS_AS(build_rulebook_submanifold(coords, {2, 2, 1}), ContractError);
}

TEST_CASE("strided rulebook output sites") {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Extent e{static_cast<std::int32_t>(3 + rng.below(12)),
                   static_cast<std::int32_t>(3 + rng.below(12)), 1};
    const auto coords = random_coords(rng, e, 0.15);
    const Rulebook rb = build_rulebook_strided(coords, e, {3, 3, 1}, {2, 2, 1});
    CHECK(rb.output_coords == brute_coarse_sites(coords, e, {3, 3, 1}, {2, 2, 1}));
    CHECK(rb.output_extent == conv_output_extent(e, {3, 3, 1}, {2, 2, 1}));
  }
}

TEST_CASE("inverse rulebook swaps roles") {
  SplitMix64 rng(9);
  const Extent e{10, 10, 1};
  const auto coords = random_coords(rng, e, 0.2);
  const Rulebook down = build_rulebook_strided(coords, e, {3, 3, 1}, {2, 2, 1});
  const Rulebook up = invert_rulebook(down);
  CHECK(up.kind == ConvKind::kInverse);
  CHECK(up.input_coords == down.output_coords);
  CHECK(up.output_coords == down.input_coords);
  CHECK(up.pair_count() == down.pair_count());
  for (std::size_t k = 0; k < up.pairs.size(); ++k) {
    std::set<std::pair<int, int>> a, b;
    for (const auto& p : down.pairs[k]) a.insert({p.input_row, p.output_row});
    for (const auto& p : up.pairs[k]) b.insert({p.output_row, p.input_row});
    CHECK(a == b);
  }
}

TEST_CASE("sparse conv equals direct neighbour sums") {
  SplitMix64 rng(21);
  const Extent e{8, 8, 2};
  const auto coords = random_coords(rng, e, 0.3);
  const SparseFeatureMap<double> x{coords, random_matrix<double>(rng, coords.size(), 3)};
  SUBCASE("submanifold") {
    const auto w = random_conv<double>(rng, {3, 3, 3}, 3, 4);
    const auto rb = build_rulebook_submanifold(coords, w.kernel);
    const auto y = conv_forward(x, rb, w);
    const auto ref = brute_conv(coords, x.features, coords, w, {1, 1, 1});
    CHECK(max_rel_diff(y.features.values(), ref.values()) < 1e-12);
  }
  SUBCASE("strided") {
    const auto w = random_conv<double>(rng, {3, 3, 1}, 3, 2);
    const auto rb = build_rulebook_strided(coords, e, w.kernel, {2, 2, 1});
    const auto y = conv_forward(x, rb, w);
    const auto ref = brute_conv(coords, x.features, rb.output_coords, w, {2, 2, 1});
    CHECK(max_rel_diff(y.features.values(), ref.values()) < 1e-12);
  }
}

TEST_CASE("conv rejects a feature map on other coordinates") {
  const std::vector<VoxelCoord> a{{0, 0, 0}, {1, 0, 0}};
  const std::vector<VoxelCoord> b{{0, 0, 0}, {2, 0, 0}};
  const auto rb = build_rulebook_submanifold(a, {3, 3, 1});
  SplitMix64 rng(1);
  const auto w = random_conv<double>(rng, {3, 3, 1}, 2, 2);
  const SparseFeatureMap<double> x{b, Matrix<double>(2, 2, 1.0)};
  CHECK_THROWS_AS(conv_forward(x, rb, w), ContractError);
  const SparseFeatureMap<double> wrong_width{a, Matrix<double>(2, 3, 1.0)};
  CHECK_THROWS_AS(conv_forward(wrong_width, rb, w), ContractError);
}

TEST_CASE("conv output does not depend on the thread count") {
  SplitMix64 rng(3);
  const Extent e{32, 32, 1};
  const auto coords = random_coords(rng, e, 0.3);
  const SparseFeatureMap<float> x{coords, random_matrix<float>(rng, coords.size(), 16)};
  const auto w = random_conv<float>(rng, {3, 3, 1}, 16, 16);
  const auto rb = build_rulebook_submanifold(coords, w.kernel);
  const int before = thread_count();
  set_thread_count(1);
  const auto one = conv_forward(x, rb, w);
  const Matrix<float> g(one.rows(), 16, 0.5f);
  const auto g1 = conv_backward(g, x, rb, w);
  set_thread_count(4);
  const auto four = conv_forward(x, rb, w);
  const auto g4 = conv_backward(g, x, rb, w);
  set_thread_count(before);
  CHECK(one.features == four.features);
  CHECK(g1.weight == g4.weight);
  CHECK(g1.input == g4.input);
}

TEST_CASE("non-finite conv output raises a numeric error") {
  const std::vector<VoxelCoord> a{{0, 0, 0}};
  const auto rb = build_rulebook_submanifold(a, {1, 1, 1});
  ConvParams<float> w;
  w.kernel = {1, 1, 1};
  w.in_channels = 1;
  w.out_channels = 1;
  w.weight = {INFINITY};
  const SparseFeatureMap<float> x{a, Matrix<float>(1, 1, 0.0f)};
  CHECK_THROWS_AS(conv_forward(x, rb, w), NumericError);
}

TEST_CASE("float conv tracks the double dense reference") {
  SplitMix64 rng(21);
  const Extent e{12, 10, 1};
  const auto coords = random_coords(rng, e, 0.4);
  const Matrix<double> xd = random_matrix<double>(rng, coords.size(), 6);
  const ConvParams<double> wd = random_conv<double>(rng, {3, 3, 1}, 6, 5);
  Matrix<float> xf(xd.rows(), xd.cols());
  std::transform(xd.values().begin(), xd.values().end(), xf.values().begin(),
                 [](double v) { return static_cast<float>(v); });
  ConvParams<float> wf{wd.kernel, 6, 5, {wd.weight.begin(), wd.weight.end()},
                       {wd.bias.begin(), wd.bias.end()}};
  const Rulebook rb = build_rulebook_strided(coords, e, wd.kernel, {2, 2, 1});
  const auto y = conv_forward(SparseFeatureMap<float>{coords, xf}, rb, wf);
  // Reference on the float-rounded inputs, in double.
  Matrix<double> xr(xf.rows(), xf.cols());
  std::copy(xf.values().begin(), xf.values().end(), xr.values().begin());
  ConvParams<double> wr{wd.kernel, 6, 5, {wf.weight.begin(), wf.weight.end()},
                        {wf.bias.begin(), wf.bias.end()}};
  const auto ref = sample_dense(
      dense_oracle_conv(densify(SparseFeatureMap<double>{coords, xr}, e), wr, {2, 2, 1}),
      rb.output_coords);
  double scale = 0.0, err = 0.0;
  for (std::size_t i = 0; i < ref.values().size(); ++i) {
    scale = std::max(scale, std::abs(ref.values()[i]));
    err = std::max(err, std::abs(ref.values()[i] - static_cast<double>(y.features.values()[i])));
  }
  CHECK(err / scale <= 1e-5);
}
