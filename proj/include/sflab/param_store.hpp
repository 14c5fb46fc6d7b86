#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sflab/diff_array.hpp"

namespace sflab {

enum class ParamInit { xavier_uniform, zeros };

// Named trainable parameters plus their Adam moment buffers.  Creation order
// does not matter for serialization: records are written in name order.
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : rng_(seed) {}

  DiffArray create(const std::string& name, Shape shape, ParamInit init) {
    if (params_.count(name)) {
      throw std::invalid_argument("ParamStore: duplicate parameter name '" + name + "'");
    }
    std::vector<double> values(shape_size(shape), 0.0);
    if (init == ParamInit::xavier_uniform) {
      int64_t fan_in = shape.size() == 2 ? shape[0] : shape[0];
      int64_t fan_out = shape.size() == 2 ? shape[1] : shape[0];
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (double& v : values) v = uniform(rng_, -limit, limit);
    }
    DiffArray p = DiffArray::leaf(std::move(shape), std::move(values), /*requires_grad=*/true);
    params_.emplace(name, p);
    m_.emplace(name, std::vector<double>(p.size(), 0.0));
    v_.emplace(name, std::vector<double>(p.size(), 0.0));
    return p;
  }

  DiffArray at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
    }
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const std::map<std::string, DiffArray>& params() const { return params_; }
  int64_t step_count() const { return step_count_; }

  int64_t total_values() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.clear_grad();
  }

  // Standard Adam with bias correction.  Requires every parameter to hold a
  // gradient; a parameter the last backward pass never reached is an error.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.99, double eps = 1e-8) {
    for (const auto& [name, p] : params_) {
      if (!p.has_grad()) {
        throw std::invalid_argument("adam_step: parameter '" + name + "' has no gradient");
      }
    }
    step_count_ += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
    for (auto& [name, p] : params_) {
      auto grad = p.grad();
      auto& m = m_[name];
      auto& v = v_[name];
      auto values = p.mutable_values();
      for (int64_t i = 0; i < p.size(); ++i) {
        const double g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      }
    }
  }

  // Checkpoint layout: magic "SFLAB01"; u32 parameter count; one record per
  // parameter (u32 name length, name bytes, u32 rank, u64 extents, f64 values,
  // little endian); then the Adam m and v buffers in the same record framing;
  // finally u64 step count.  Round-trips bit-exactly.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(kMagic, 7);
    write_u32(out, static_cast<uint32_t>(params_.size()));
    for (const auto& [name, p] : params_) {
      write_record(out, name, p.shape(), p.values().data(), p.size());
    }
    for (const auto& [name, p] : params_) {
      write_record(out, name, p.shape(), m_.at(name).data(), p.size());
    }
    for (const auto& [name, p] : params_) {
      write_record(out, name, p.shape(), v_.at(name).data(), p.size());
    }
    const uint64_t steps = static_cast<uint64_t>(step_count_);
    out.write(reinterpret_cast<const char*>(&steps), 8);
    if (!out) throw IoError("write failed for '" + path + "'");
  }

  // Loads a checkpoint written for the same parameter set: names and shapes
  // must match this store exactly.  Values, moments, and the step count are
  // overwritten in place so existing DiffArray handles stay valid.
  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    Reader r{in, 0, path};
    char magic[7];
    r.bytes(magic, 7);
    if (std::memcmp(magic, kMagic, 7) != 0) {
      throw IoError("bad magic in '" + path + "' at byte 0");
    }
    const uint32_t count = r.u32();
    if (count != params_.size()) {
      throw IoError("parameter count mismatch in '" + path + "': file has " +
                    std::to_string(count) + ", store has " + std::to_string(params_.size()));
    }
    for (auto& [name, p] : params_) {
      read_record(r, name, p.shape(), p.mutable_values().data(), p.size());
    }
    for (auto& [name, p] : params_) read_record(r, name, p.shape(), m_[name].data(), p.size());
    for (auto& [name, p] : params_) read_record(r, name, p.shape(), v_[name].data(), p.size());
    uint64_t steps = 0;
    r.bytes(reinterpret_cast<char*>(&steps), 8);
    step_count_ = static_cast<int64_t>(steps);
  }

 private:
  static constexpr const char* kMagic = "SFLAB01";

  struct Reader {
    std::ifstream& in;
    uint64_t offset;
    const std::string& path;

    void bytes(char* dst, size_t n) {
      in.read(dst, static_cast<std::streamsize>(n));
      if (static_cast<size_t>(in.gcount()) != n) {
        throw IoError("truncated checkpoint '" + path + "' at byte " + std::to_string(offset));
      }
      offset += n;
    }
    uint32_t u32() {
      uint32_t v = 0;
      bytes(reinterpret_cast<char*>(&v), 4);
      return v;
    }
  };

  static void write_u32(std::ofstream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
  }

  static void write_record(std::ofstream& out, const std::string& name, const Shape& shape,
                           const double* data, int64_t n) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<uint32_t>(shape.size()));
    for (int64_t e : shape) {
      const uint64_t ext = static_cast<uint64_t>(e);
      out.write(reinterpret_cast<const char*>(&ext), 8);
    }
    out.write(reinterpret_cast<const char*>(data), n * 8);
  }

  void read_record(Reader& r, const std::string& expect_name, const Shape& expect_shape,
                   double* data, int64_t n) {
    const uint64_t start = r.offset;
    const uint32_t name_len = r.u32();
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    if (name != expect_name) {
      throw IoError("checkpoint record '" + name + "' at byte " + std::to_string(start) +
                    " does not match parameter '" + expect_name + "'");
    }
    const uint32_t rank = r.u32();
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
      uint64_t ext = 0;
      r.bytes(reinterpret_cast<char*>(&ext), 8);
      shape[i] = static_cast<int64_t>(ext);
    }
    if (shape != expect_shape) {
      throw IoError("checkpoint record '" + name + "' has shape " + shape_str(shape) +
                    ", expected " + shape_str(expect_shape));
    }
    r.bytes(reinterpret_cast<char*>(data), static_cast<size_t>(n) * 8);
  }

  std::map<std::string, DiffArray> params_;
  std::map<std::string, std::vector<double>> m_, v_;
  int64_t step_count_ = 0;
  Rng rng_;
};

}  // namespace sflab
