#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <unistd.h>
#include <filesystem>
#include <fstream>

#include "tracto/digest.hpp"
#include "tracto/errors.hpp"
#include "tracto/kvfile.hpp"
#include "tracto/rng.hpp"
#include "tracto/streamline.hpp"
#include "tracto/volume.hpp"

using namespace tracto;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("tracto_io_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void corrupt_at(const std::string& path, size_t offset, char byte) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(std::streamoff(offset));
  f.write(&byte, 1);
}

void truncate_to(const std::string& path, size_t size) {
  fs::resize_file(path, size);
}

}  // namespace

TEST_CASE("VOL1 round-trip is lossless") {
  TempDir dir;
  Volume vol(std::array<uint32_t, 3>{3, 4, 5}, {0.9, 1.0, 1.1},
             Affine::scaling({0.9, 1.0, 1.1}, {0.45, 0.5, 0.55}), 7);
  Rng rng(3);
  for (float& v : vol.data()) v = float(rng.normal(0.0, 1.0));

  const auto path = dir.file("vol.vol");
  write_volume(path, vol);
  const Volume back = read_volume(path);
  CHECK(back.dims() == vol.dims());
  CHECK(back.channels() == vol.channels());
  CHECK(back.voxel_size().x == doctest::Approx(0.9f));
  CHECK(back.data() == vol.data());
  for (int i = 0; i < 16; ++i)
    CHECK(back.affine().m[i] == doctest::Approx(float(vol.affine().m[i])).epsilon(1e-7));
}

TEST_CASE("VOL1 bad magic names offset 0") {
  TempDir dir;
  Volume vol(std::array<uint32_t, 3>{2, 2, 2}, {1, 1, 1}, Affine{}, 1);
  const auto path = dir.file("vol.vol");
  write_volume(path, vol);
  corrupt_at(path, 0, 'X');
  try {
    read_volume(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }
}

TEST_CASE("VOL1 truncated payload is a format error with an offset") {
  TempDir dir;
  Volume vol(std::array<uint32_t, 3>{4, 4, 4}, {1, 1, 1}, Affine{}, 2);
  const auto path = dir.file("vol.vol");
  write_volume(path, vol);
  truncate_to(path, 100);
  try {
    read_volume(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
}

TEST_CASE("VOL1 trailing bytes are rejected") {
  TempDir dir;
  Volume vol(std::array<uint32_t, 3>{2, 2, 2}, {1, 1, 1}, Affine{}, 1);
  const auto path = dir.file("vol.vol");
  write_volume(path, vol);
  { std::ofstream(path, std::ios::app | std::ios::binary) << "junk"; }
  CHECK_THROWS_AS(read_volume(path), FormatError);
}

TEST_CASE("TRX1 round-trip keeps labels and f32 vertices") {
  TempDir dir;
  Tractogram tracts;
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    Streamline s;
    s.label = (i % 3 == 0) ? kUnlabeled : uint32_t(i % 3);
    const int n = 2 + int(rng.below(50));
    for (int k = 0; k < n; ++k)
      s.points.push_back({double(float(rng.normal(0, 20))), double(float(rng.normal(0, 20))),
                          double(float(rng.normal(0, 20)))});
    tracts.streamlines.push_back(std::move(s));
  }
  const auto path = dir.file("t.trx");
  write_tracts(path, tracts);
  const Tractogram back = read_tracts(path);
  REQUIRE(back.size() == tracts.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back.streamlines[i].label == tracts.streamlines[i].label);
    REQUIRE(back.streamlines[i].points.size() == tracts.streamlines[i].points.size());
    for (size_t k = 0; k < back.streamlines[i].points.size(); ++k)
      CHECK(back.streamlines[i].points[k] == tracts.streamlines[i].points[k]);
  }
  // Byte-identical when re-written.
  const auto path2 = dir.file("t2.trx");
  write_tracts(path2, back);
  CHECK(digest_file(path) == digest_file(path2));
}

TEST_CASE("TRX1 empty tractogram round-trips to empty") {
  TempDir dir;
  const auto path = dir.file("empty.trx");
  write_tracts(path, Tractogram{});
  CHECK(read_tracts(path).empty());
}

TEST_CASE("TRX1 bad magic and truncation") {
  TempDir dir;
  Tractogram tracts;
  tracts.streamlines.push_back({{{0, 0, 0}, {1, 0, 0}}, 0});
  const auto path = dir.file("t.trx");
  write_tracts(path, tracts);

  SUBCASE("magic") {
    corrupt_at(path, 0, 'X');
    try {
      read_tracts(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    }
  }
  SUBCASE("vertex payload cut short") {
    truncate_to(path, fs::file_size(path) - 5);
    CHECK_THROWS_AS(read_tracts(path), FormatError);
  }
}

TEST_CASE("key=value parsing") {
  KvFile kv = KvFile::parse_text("a = 1\n# comment\nb = 2.5 3.5\nname = run1  # eol comment\n");
  CHECK(kv.get_int("a") == 1);
  const auto v = kv.get_doubles("b");
  REQUIRE(v.size() == 2);
  CHECK(v[1] == doctest::Approx(3.5));
  CHECK(kv.get_string("name") == "run1");
  CHECK_NOTHROW(kv.finish());

  KvFile kv2 = KvFile::parse_text("a = 1\nunused = 2\n");
  CHECK(kv2.get_int("a") == 1);
  CHECK_THROWS_AS(kv2.finish(), Error);
  CHECK_THROWS_AS(KvFile::parse_text("novalue\n"), FormatError);
  CHECK_THROWS_AS(KvFile::parse_text("a = 1\na = 2\n"), FormatError);
}

TEST_CASE("file digests detect content changes") {
  TempDir dir;
  const auto path = dir.file("blob.bin");
  { std::ofstream(path, std::ios::binary) << "some payload"; }
  const uint64_t d1 = digest_file(path);
  CHECK(d1 == digest_file(path));
  { std::ofstream(path, std::ios::binary) << "some payloae"; }
  CHECK(d1 != digest_file(path));
  CHECK(digest_hex(d1).size() == 16);
}
