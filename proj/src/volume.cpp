#include "tracto/volume.hpp"

#include <cmath>
#include <stdexcept>

#include "tracto/binio.hpp"

namespace tracto {

Affine Affine::scaling(const Vec3& voxel_size, const Vec3& origin) {
  Affine a;
  a.m = {voxel_size.x, 0, 0, origin.x,  //
         0, voxel_size.y, 0, origin.y,  //
         0, 0, voxel_size.z, origin.z,  //
         0, 0, 0, 1};
  return a;
}

Affine Affine::inverse() const {
  // Gauss-Jordan on the 4x4; affines here are small and well-conditioned.
  std::array<double, 32> a{};
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) a[r * 8 + c] = m[r * 4 + c];
    a[r * 8 + 4 + r] = 1.0;
  }
  for (int col = 0; col < 4; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(a[r * 8 + col]) > std::abs(a[pivot * 8 + col])) pivot = r;
    if (std::abs(a[pivot * 8 + col]) < 1e-12)
      throw std::invalid_argument("affine is not invertible");
    if (pivot != col)
      for (int c = 0; c < 8; ++c) std::swap(a[col * 8 + c], a[pivot * 8 + c]);
    const double inv = 1.0 / a[col * 8 + col];
    for (int c = 0; c < 8; ++c) a[col * 8 + c] *= inv;
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      const double f = a[r * 8 + col];
      if (f == 0.0) continue;
      for (int c = 0; c < 8; ++c) a[r * 8 + c] -= f * a[col * 8 + c];
    }
  }
  Affine out;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) out.m[r * 4 + c] = a[r * 8 + 4 + c];
  return out;
}

Volume::Volume(std::array<uint32_t, 3> dims, Vec3 voxel_size, const Affine& affine,
               uint32_t channels)
    : dims_(dims),
      voxel_size_(voxel_size),
      affine_(affine),
      inv_affine_(affine.inverse()),
      channels_(channels) {
  if (dims_[0] == 0 || dims_[1] == 0 || dims_[2] == 0)
    throw std::invalid_argument("volume dims must be positive");
  if (voxel_size_.x <= 0 || voxel_size_.y <= 0 || voxel_size_.z <= 0)
    throw std::invalid_argument("voxel size must be positive");
  if (channels_ == 0) throw std::invalid_argument("volume needs at least one channel");
  data_.assign(voxel_count() * channels_, 0.0f);
}

std::optional<VoxelIndex> Volume::voxel_of(const Vec3& world) const {
  const Vec3 p = world_to_voxel(world);
  const VoxelIndex v{int(std::floor(p.x + 0.5)), int(std::floor(p.y + 0.5)),
                     int(std::floor(p.z + 0.5))};
  if (!contains_voxel(v)) return std::nullopt;
  return v;
}

bool Volume::in_sampling_bounds(const Vec3& p) const {
  return p.x >= 0.0 && p.y >= 0.0 && p.z >= 0.0 && p.x <= double(dims_[0] - 1) &&
         p.y <= double(dims_[1] - 1) && p.z <= double(dims_[2] - 1);
}

void write_volume(const std::string& path, const Volume& vol) {
  BinWriter w(path);
  w.magic("VOL1");
  w.u32(1);
  for (int i = 0; i < 3; ++i) w.u32(vol.dims()[i]);
  w.u32(vol.channels());
  w.f32(float(vol.voxel_size().x));
  w.f32(float(vol.voxel_size().y));
  w.f32(float(vol.voxel_size().z));
  for (double v : vol.affine().m) w.f32(float(v));
  w.f32_array(vol.data().data(), vol.data().size());
  w.close();
}

Volume read_volume(const std::string& path) {
  BinReader r(path);
  r.expect_magic("VOL1");
  const uint32_t version = r.u32();
  if (version != 1) r.fail("unsupported VOL1 version " + std::to_string(version));
  std::array<uint32_t, 3> dims{r.u32(), r.u32(), r.u32()};
  const uint32_t channels = r.u32();
  const Vec3 vs{double(r.f32()), double(r.f32()), double(r.f32())};
  Affine affine;
  for (double& v : affine.m) v = double(r.f32());
  Volume vol(dims, vs, affine, channels);
  r.f32_array(vol.data().data(), vol.data().size());
  r.expect_eof();
  return vol;
}

size_t mask_count(const Volume& mask) {
  size_t n = 0;
  for (float v : mask.data()) n += (v != 0.0f);
  return n;
}

}  // namespace tracto
