#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include "sflab/scene_pair.hpp"

namespace sflab {

// On-disk sample format, little endian:
//   magic "SFPAIR1" (7 bytes)
//   n1, n2: u32
//   flags:  u8, bit0 = mask present
//   pc1 coords   n1 x 3 f64
//   pc2 coords   n2 x 3 f64
//   gt_flow      n1 x 3 f64
//   mask         n1 bytes (only when flagged)
inline constexpr char kPairMagic[] = "SFPAIR1";

inline void write_pair(const ScenePair& pair, const std::string& path) {
  pair.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kPairMagic, 7);
  const uint32_t n1 = static_cast<uint32_t>(pair.n1());
  const uint32_t n2 = static_cast<uint32_t>(pair.n2());
  out.write(reinterpret_cast<const char*>(&n1), 4);
  out.write(reinterpret_cast<const char*>(&n2), 4);
  const uint8_t flags = 1;  // mask always written
  out.write(reinterpret_cast<const char*>(&flags), 1);
  out.write(reinterpret_cast<const char*>(pair.pc1.data()), pair.pc1.size() * 8);
  out.write(reinterpret_cast<const char*>(pair.pc2.data()), pair.pc2.size() * 8);
  out.write(reinterpret_cast<const char*>(pair.gt_flow.data()), pair.gt_flow.size() * 8);
  out.write(reinterpret_cast<const char*>(pair.mask.data()), pair.mask.size());
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline ScenePair read_pair(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  uint64_t offset = 0;
  auto need = [&](char* dst, size_t count) {
    in.read(dst, static_cast<std::streamsize>(count));
    if (static_cast<size_t>(in.gcount()) != count) {
      throw IoError("truncated pair file '" + path + "' at byte " + std::to_string(offset));
    }
    offset += count;
  };
  char magic[7];
  need(magic, 7);
  if (std::memcmp(magic, kPairMagic, 7) != 0) {
    throw IoError("bad magic in '" + path + "' at byte 0");
  }
  uint32_t n1 = 0, n2 = 0;
  need(reinterpret_cast<char*>(&n1), 4);
  need(reinterpret_cast<char*>(&n2), 4);
  uint8_t flags = 0;
  need(reinterpret_cast<char*>(&flags), 1);
  if (n1 == 0 || n2 == 0) {
    throw IoError("empty cloud in '" + path + "' at byte 7");
  }

  ScenePair pair;
  pair.pc1.resize(static_cast<size_t>(n1) * 3);
  pair.pc2.resize(static_cast<size_t>(n2) * 3);
  pair.gt_flow.resize(static_cast<size_t>(n1) * 3);
  need(reinterpret_cast<char*>(pair.pc1.data()), pair.pc1.size() * 8);
  need(reinterpret_cast<char*>(pair.pc2.data()), pair.pc2.size() * 8);
  need(reinterpret_cast<char*>(pair.gt_flow.data()), pair.gt_flow.size() * 8);
  if (flags & 1) {
    pair.mask.resize(n1);
    need(reinterpret_cast<char*>(pair.mask.data()), n1);
  } else {
    pair.mask.assign(n1, 1);
  }
  // Trailing bytes mean the counts in the header do not match the payload.
  char extra;
  in.read(&extra, 1);
  if (in.gcount() == 1) {
    throw IoError("unexpected trailing data in '" + path + "' at byte " + std::to_string(offset));
  }
  return pair;
}

// Seeded disjoint partition of the .sfp files in a directory into up to three
// manifests (train.txt, val.txt, test.txt), each a sorted list of file names.
inline std::vector<std::string> make_split(const std::string& dir,
                                           const std::vector<double>& fractions, uint64_t seed) {
  if (fractions.empty() || fractions.size() > 3) {
    throw std::invalid_argument("make_split: expected 1 to 3 fractions");
  }
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0) throw std::invalid_argument("make_split: negative fraction");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("make_split: fractions must sum to 1");
  }

  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".sfp") files.push_back(entry.path().filename().string());
  }
  if (files.empty()) throw std::invalid_argument("make_split: no .sfp files in '" + dir + "'");
  std::sort(files.begin(), files.end());
  Rng rng(seed);
  std::shuffle(files.begin(), files.end(), rng);

  const int64_t n = static_cast<int64_t>(files.size());
  const char* names[] = {"train.txt", "val.txt", "test.txt"};
  std::vector<std::string> manifests;
  double cum = 0.0;
  int64_t taken = 0;
  for (size_t s = 0; s < fractions.size(); ++s) {
    cum += fractions[s];
    const int64_t upto = s + 1 == fractions.size()
                             ? n
                             : static_cast<int64_t>(std::floor(cum * n + 0.5));
    std::vector<std::string> part(files.begin() + taken, files.begin() + upto);
    std::sort(part.begin(), part.end());
    const std::string path = (fs::path(dir) / names[s]).string();
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& f : part) out << f << '\n';
    manifests.push_back(path);
    taken = upto;
  }
  return manifests;
}

// Reads the pair files named by a manifest (paths relative to its directory),
// or every .sfp file in a directory, sorted.
inline std::vector<std::string> list_pair_files(const std::string& data_path) {
  namespace fs = std::filesystem;
  std::vector<std::string> out;
  if (fs::is_directory(data_path)) {
    for (const auto& entry : fs::directory_iterator(data_path)) {
      if (entry.path().extension() == ".sfp") out.push_back(entry.path().string());
    }
    std::sort(out.begin(), out.end());
  } else {
    std::ifstream in(data_path);
    if (!in) throw IoError("cannot open manifest '" + data_path + "'");
    const fs::path base = fs::path(data_path).parent_path();
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) out.push_back((base / line).string());
    }
  }
  if (out.empty()) throw std::invalid_argument("no pair files found at '" + data_path + "'");
  return out;
}

}  // namespace sflab
