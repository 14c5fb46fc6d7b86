#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "sflab/pair_io.hpp"
#include "sflab/scene_gen.hpp"

using namespace sflab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "sflab_data_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("identity motion produces zero flow and an aligned copy") {
  SceneGenConfig cfg;
  cfg.n_points = 64;
  cfg.translation_range = 0.0;
  cfg.rotation_range = 0.0;
  cfg.noise_sigma = 0.0;
  cfg.occlusion_fraction = 0.0;
  ScenePair pair = generate(cfg);
  pair.validate();
  for (double v : pair.gt_flow) CHECK(v == 0.0);
  CHECK(pair.pc1 == pair.pc2);  // same order, no permutation
  for (uint8_t m : pair.mask) CHECK(m == 1);
}

TEST_CASE("single-object pure translation moves every point equally") {
  SceneGenConfig cfg;
  cfg.n_points = 32;
  cfg.n_objects = 1;
  cfg.translation_range = 0.3;
  cfg.rotation_range = 0.0;
  cfg.seed = 9;
  ScenePair pair = generate(cfg);
  for (int64_t i = 1; i < 32; ++i) {
    for (int c = 0; c < 3; ++c) {
      CHECK(pair.gt_flow[i * 3 + c] == Catch::Approx(pair.gt_flow[c]).margin(1e-12));
    }
  }
}

TEST_CASE("unmasked points warped by the flow land on second-frame points") {
  SceneGenConfig cfg;
  cfg.n_points = 100;
  cfg.n_objects = 3;
  cfg.occlusion_fraction = 0.25;
  cfg.seed = 4;
  ScenePair pair = generate(cfg);

  int64_t occluded = 0;
  for (int64_t i = 0; i < 100; ++i) {
    if (!pair.mask[i]) {
      ++occluded;
      continue;
    }
    for (int c = 0; c < 3; ++c) {
      const double warped = pair.pc1[i * 3 + c] + pair.gt_flow[i * 3 + c];
      CHECK(std::abs(warped - pair.pc2[i * 3 + c]) <= 1e-12);
    }
  }
  CHECK(occluded == 25);
}

TEST_CASE("generation is deterministic per seed and validates its config") {
  SceneGenConfig cfg;
  cfg.n_points = 40;
  cfg.seed = 11;
  ScenePair a = generate(cfg);
  ScenePair b = generate(cfg);
  CHECK(a.pc1 == b.pc1);
  CHECK(a.pc2 == b.pc2);
  CHECK(a.gt_flow == b.gt_flow);

  cfg.n_points = 0;
  CHECK_THROWS_AS(generate(cfg), std::invalid_argument);
  cfg.n_points = 8;
  cfg.occlusion_fraction = 1.0;
  CHECK_THROWS_AS(generate(cfg), std::invalid_argument);
}

TEST_CASE("pair files round-trip bit-exactly") {
  fs::path dir = scratch_dir("roundtrip");
  SceneGenConfig cfg;
  cfg.n_points = 48;
  cfg.occlusion_fraction = 0.1;
  cfg.noise_sigma = 0.01;
  cfg.seed = 3;
  ScenePair pair = generate(cfg);

  const std::string path = (dir / "a.sfp").string();
  write_pair(pair, path);
  ScenePair loaded = read_pair(path);
  CHECK(loaded.pc1 == pair.pc1);
  CHECK(loaded.pc2 == pair.pc2);
  CHECK(loaded.gt_flow == pair.gt_flow);
  CHECK(loaded.mask == pair.mask);

  const std::string path2 = (dir / "b.sfp").string();
  write_pair(loaded, path2);
  CHECK(file_bytes(path) == file_bytes(path2));
}

TEST_CASE("truncated and malformed pair files are rejected with an offset") {
  fs::path dir = scratch_dir("broken");
  SceneGenConfig cfg;
  cfg.n_points = 16;
  ScenePair pair = generate(cfg);
  const std::string path = (dir / "ok.sfp").string();
  write_pair(pair, path);

  auto bytes = file_bytes(path);
  const std::string cut_path = (dir / "cut.sfp").string();
  std::ofstream(cut_path, std::ios::binary)
      .write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  CHECK_THROWS_WITH(read_pair(cut_path), Catch::Matchers::ContainsSubstring("at byte"));

  bytes[0] = 'X';
  const std::string bad_path = (dir / "bad.sfp").string();
  std::ofstream(bad_path, std::ios::binary)
      .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK_THROWS_WITH(read_pair(bad_path), Catch::Matchers::ContainsSubstring("bad magic"));

  auto padded = file_bytes(path);
  padded.push_back('\0');
  const std::string pad_path = (dir / "pad.sfp").string();
  std::ofstream(pad_path, std::ios::binary)
      .write(padded.data(), static_cast<std::streamsize>(padded.size()));
  CHECK_THROWS_WITH(read_pair(pad_path), Catch::Matchers::ContainsSubstring("trailing"));
}

TEST_CASE("a pair file without the mask flag defaults to all-true") {
  fs::path dir = scratch_dir("nomask");
  // Hand-build a minimal file with flags = 0.
  const std::string path = (dir / "m.sfp").string();
  std::ofstream out(path, std::ios::binary);
  out.write(kPairMagic, 7);
  uint32_t n1 = 2, n2 = 2;
  out.write(reinterpret_cast<const char*>(&n1), 4);
  out.write(reinterpret_cast<const char*>(&n2), 4);
  uint8_t flags = 0;
  out.write(reinterpret_cast<const char*>(&flags), 1);
  std::vector<double> payload(2 * 3 * 3, 0.5);
  out.write(reinterpret_cast<const char*>(payload.data()), payload.size() * 8);
  out.close();

  ScenePair pair = read_pair(path);
  CHECK(pair.mask == std::vector<uint8_t>{1, 1});
}

TEST_CASE("make_split partitions disjointly and deterministically") {
  fs::path dir = scratch_dir("split");
  SceneGenConfig cfg;
  cfg.n_points = 8;
  for (int i = 0; i < 10; ++i) {
    cfg.seed = 100 + i;
    char name[32];
    std::snprintf(name, sizeof name, "pair_%06d.sfp", i);
    write_pair(generate(cfg), (dir / name).string());
  }

  auto manifests = make_split(dir.string(), {0.7, 0.3}, 5);
  REQUIRE(manifests.size() == 2);
  auto read_lines = [](const std::string& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    std::string l;
    while (std::getline(in, l)) lines.push_back(l);
    return lines;
  };
  auto train = read_lines(manifests[0]);
  auto val = read_lines(manifests[1]);
  CHECK(train.size() == 7);
  CHECK(val.size() == 3);
  CHECK(std::is_sorted(train.begin(), train.end()));
  CHECK(std::is_sorted(val.begin(), val.end()));

  std::set<std::string> all(train.begin(), train.end());
  all.insert(val.begin(), val.end());
  CHECK(all.size() == 10);  // disjoint and covering

  auto again = make_split(dir.string(), {0.7, 0.3}, 5);
  CHECK(read_lines(again[0]) == train);

  auto solo = make_split(dir.string(), {1.0}, 5);
  CHECK(read_lines(solo[0]).size() == 10);

  CHECK_THROWS_AS(make_split(dir.string(), {0.5, 0.4}, 5), std::invalid_argument);
  fs::path empty = scratch_dir("empty");
  CHECK_THROWS_AS(make_split(empty.string(), {1.0}, 5), std::invalid_argument);
}

TEST_CASE("list_pair_files reads directories and manifests") {
  fs::path dir = scratch_dir("list");
  SceneGenConfig cfg;
  cfg.n_points = 8;
  for (int i = 0; i < 3; ++i) {
    cfg.seed = i;
    char name[32];
    std::snprintf(name, sizeof name, "pair_%06d.sfp", i);
    write_pair(generate(cfg), (dir / name).string());
  }
  auto from_dir = list_pair_files(dir.string());
  CHECK(from_dir.size() == 3);
  CHECK(std::is_sorted(from_dir.begin(), from_dir.end()));

  make_split(dir.string(), {1.0}, 1);
  auto from_manifest = list_pair_files((dir / "train.txt").string());
  CHECK(from_manifest.size() == 3);
  for (const auto& p : from_manifest) CHECK_NOTHROW(read_pair(p));
}
