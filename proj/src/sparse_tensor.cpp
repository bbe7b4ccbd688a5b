#include "ssf/sparse_tensor.hpp"

#include "ssf/errors.hpp"

namespace ssf {

CoordIndex::CoordIndex(std::span<const VoxelCoord> coords) {
  rows_.reserve(coords.size() * 2);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    SSF_REQUIRE(coord_in_range(coords[i]), "coordinate outside 21-bit packing range");
    const bool inserted =
        rows_.emplace(pack_coord(coords[i]), static_cast<std::int32_t>(i)).second;
    SSF_REQUIRE(inserted, "duplicate coordinate in sparse tensor");
  }
}

bool is_canonical(std::span<const VoxelCoord> coords) {
  for (std::size_t i = 1; i < coords.size(); ++i) {
    if (!(coords[i - 1] < coords[i])) return false;
  }
  return true;
}

}  // namespace ssf
