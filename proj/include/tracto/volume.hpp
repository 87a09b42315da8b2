#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tracto/vec3.hpp"

namespace tracto {

// Row-major 4x4 voxel-index-to-world-mm transform.
struct Affine {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  static Affine scaling(const Vec3& voxel_size, const Vec3& origin);

  Vec3 apply(const Vec3& p) const {
    return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
            m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
            m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
  }

  // Throws std::invalid_argument if singular.
  Affine inverse() const;
};

struct VoxelIndex {
  int x = 0, y = 0, z = 0;
  bool operator==(const VoxelIndex&) const = default;
};

// Dense 3-D multi-channel grid. Voxel (0,0,0)'s center maps through `affine`;
// data layout is channel-fastest, then x, then y, then z. Immutable once
// built, so concurrent read-only sampling is safe.
class Volume {
 public:
  Volume() = default;
  Volume(std::array<uint32_t, 3> dims, Vec3 voxel_size, const Affine& affine, uint32_t channels);

  const std::array<uint32_t, 3>& dims() const { return dims_; }
  const Vec3& voxel_size() const { return voxel_size_; }
  const Affine& affine() const { return affine_; }
  const Affine& inverse_affine() const { return inv_affine_; }
  uint32_t channels() const { return channels_; }
  size_t voxel_count() const { return size_t(dims_[0]) * dims_[1] * dims_[2]; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  size_t index(int x, int y, int z, uint32_t c = 0) const {
    return c + channels_ * (size_t(x) + size_t(dims_[0]) * (size_t(y) + size_t(dims_[1]) * z));
  }
  float at(int x, int y, int z, uint32_t c = 0) const { return data_[index(x, y, z, c)]; }
  float& at(int x, int y, int z, uint32_t c = 0) { return data_[index(x, y, z, c)]; }

  // Continuous voxel coordinate (integers are voxel centers).
  Vec3 world_to_voxel(const Vec3& world) const { return inv_affine_.apply(world); }
  Vec3 voxel_to_world(const VoxelIndex& v) const {
    return affine_.apply({double(v.x), double(v.y), double(v.z)});
  }

  // Voxel whose cube (center +/- half a voxel) contains the point, if any.
  std::optional<VoxelIndex> voxel_of(const Vec3& world) const;

  bool contains_voxel(const VoxelIndex& v) const {
    return v.x >= 0 && v.y >= 0 && v.z >= 0 && uint32_t(v.x) < dims_[0] &&
           uint32_t(v.y) < dims_[1] && uint32_t(v.z) < dims_[2];
  }

  // True when the continuous voxel coordinate lies inside the lattice hull
  // [0, n-1] on every axis (the domain where trilinear sampling is defined).
  bool in_sampling_bounds(const Vec3& voxel_coord) const;

 private:
  std::array<uint32_t, 3> dims_{0, 0, 0};
  Vec3 voxel_size_{1, 1, 1};
  Affine affine_;
  Affine inv_affine_;
  uint32_t channels_ = 0;
  std::vector<float> data_;
};

// VOL1 file format, little-endian throughout:
//   magic 'VOL1', u32 version=1, u32 nx ny nz nchannels,
//   3*f32 voxel size (mm), 16*f32 row-major voxel-to-world affine,
//   nx*ny*nz*nchannels f32 values, channel index fastest, then x, y, z.
void write_volume(const std::string& path, const Volume& vol);
Volume read_volume(const std::string& path);

// Mask helpers: a mask is a single-channel volume holding 0.0f / 1.0f.
inline bool mask_set(const Volume& mask, const VoxelIndex& v) {
  return mask.at(v.x, v.y, v.z) != 0.0f;
}
size_t mask_count(const Volume& mask);

}  // namespace tracto
