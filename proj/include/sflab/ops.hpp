#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sflab/diff_array.hpp"
#include "sflab/gemm.hpp"

namespace sflab {

// Index table with `rows` x `cols` entries, as produced by neighbour searches.
struct IndexMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int64_t> data;

  int64_t at(int64_t r, int64_t c) const { return data[r * cols + c]; }
  int64_t& at(int64_t r, int64_t c) { return data[r * cols + c]; }
};

namespace detail {

struct AxisGeom {
  int64_t outer, n, inner;
};

inline AxisGeom axis_geom(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " +
                                shape_str(shape));
  }
  AxisGeom g{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) g.outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) g.inner *= shape[i];
  return g;
}

enum class BinaryMode { same_shape, broadcast_last };

// Binary ops accept identical shapes, or a right operand that matches the left
// on every extent except a trailing extent of 1 (per-row broadcast).
inline BinaryMode binary_mode(const Shape& a, const Shape& b, const char* who) {
  if (a == b) return BinaryMode::same_shape;
  if (a.size() == b.size() && !a.empty() && b.back() == 1) {
    bool ok = true;
    for (size_t i = 0; i + 1 < a.size(); ++i) ok = ok && a[i] == b[i];
    if (ok) return BinaryMode::broadcast_last;
  }
  throw std::invalid_argument(std::string(who) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

template <class Fwd>
inline std::vector<double> binary_forward(const DiffArray& a, const DiffArray& b,
                                          BinaryMode mode, Fwd&& f) {
  std::vector<double> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  if (mode == BinaryMode::same_shape) {
    for (int64_t i = 0; i < a.size(); ++i) out[i] = f(av[i], bv[i]);
  } else {
    const int64_t c = a.shape().back();
    for (int64_t r = 0; r < b.size(); ++r) {
      for (int64_t j = 0; j < c; ++j) out[r * c + j] = f(av[r * c + j], bv[r]);
    }
  }
  return out;
}

}  // namespace detail

inline DiffArray add(const DiffArray& a, const DiffArray& b) {
  auto mode = detail::binary_mode(a.shape(), b.shape(), "add");
  auto values = detail::binary_forward(a, b, mode, [](double x, double y) { return x + y; });
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(
      a.shape(), std::move(values), detail::grad_parents_of({&a, &b}),
      [an, bn, mode](detail::Node& self) {
        const int64_t n = self.size();
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          for (int64_t i = 0; i < n; ++i) ga[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          if (mode == detail::BinaryMode::same_shape) {
            for (int64_t i = 0; i < n; ++i) gb[i] += self.grad[i];
          } else {
            const int64_t c = self.shape.back();
            for (int64_t r = 0; r < bn->size(); ++r) {
              double acc = 0.0;
              for (int64_t j = 0; j < c; ++j) acc += self.grad[r * c + j];
              gb[r] += acc;
            }
          }
        }
      });
}

inline DiffArray sub(const DiffArray& a, const DiffArray& b) {
  auto mode = detail::binary_mode(a.shape(), b.shape(), "sub");
  auto values = detail::binary_forward(a, b, mode, [](double x, double y) { return x - y; });
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(
      a.shape(), std::move(values), detail::grad_parents_of({&a, &b}),
      [an, bn, mode](detail::Node& self) {
        const int64_t n = self.size();
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          for (int64_t i = 0; i < n; ++i) ga[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          if (mode == detail::BinaryMode::same_shape) {
            for (int64_t i = 0; i < n; ++i) gb[i] -= self.grad[i];
          } else {
            const int64_t c = self.shape.back();
            for (int64_t r = 0; r < bn->size(); ++r) {
              double acc = 0.0;
              for (int64_t j = 0; j < c; ++j) acc += self.grad[r * c + j];
              gb[r] -= acc;
            }
          }
        }
      });
}

inline DiffArray mul(const DiffArray& a, const DiffArray& b) {
  auto mode = detail::binary_mode(a.shape(), b.shape(), "mul");
  auto values = detail::binary_forward(a, b, mode, [](double x, double y) { return x * y; });
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(
      a.shape(), std::move(values), detail::grad_parents_of({&a, &b}),
      [an, bn, mode](detail::Node& self) {
        const int64_t n = self.size();
        const int64_t c = self.shape.back();
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          if (mode == detail::BinaryMode::same_shape) {
            for (int64_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bn->values[i];
          } else {
            for (int64_t r = 0; r < bn->size(); ++r) {
              for (int64_t j = 0; j < c; ++j) ga[r * c + j] += self.grad[r * c + j] * bn->values[r];
            }
          }
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          if (mode == detail::BinaryMode::same_shape) {
            for (int64_t i = 0; i < n; ++i) gb[i] += self.grad[i] * an->values[i];
          } else {
            for (int64_t r = 0; r < bn->size(); ++r) {
              double acc = 0.0;
              for (int64_t j = 0; j < c; ++j) acc += self.grad[r * c + j] * an->values[r * c + j];
              gb[r] += acc;
            }
          }
        }
      });
}

inline DiffArray div(const DiffArray& a, const DiffArray& b) {
  auto mode = detail::binary_mode(a.shape(), b.shape(), "div");
  auto values = detail::binary_forward(a, b, mode, [](double x, double y) { return x / y; });
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(
      a.shape(), std::move(values), detail::grad_parents_of({&a, &b}),
      [an, bn, mode](detail::Node& self) {
        const int64_t n = self.size();
        const int64_t c = self.shape.back();
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          if (mode == detail::BinaryMode::same_shape) {
            for (int64_t i = 0; i < n; ++i) ga[i] += self.grad[i] / bn->values[i];
          } else {
            for (int64_t r = 0; r < bn->size(); ++r) {
              for (int64_t j = 0; j < c; ++j) ga[r * c + j] += self.grad[r * c + j] / bn->values[r];
            }
          }
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          if (mode == detail::BinaryMode::same_shape) {
            for (int64_t i = 0; i < n; ++i) {
              gb[i] -= self.grad[i] * an->values[i] / (bn->values[i] * bn->values[i]);
            }
          } else {
            for (int64_t r = 0; r < bn->size(); ++r) {
              double acc = 0.0;
              for (int64_t j = 0; j < c; ++j) acc += self.grad[r * c + j] * an->values[r * c + j];
              gb[r] -= acc / (bn->values[r] * bn->values[r]);
            }
          }
        }
      });
}

inline DiffArray scale(const DiffArray& a, double s) {
  std::vector<double> values(a.size());
  auto av = a.values();
  for (int64_t i = 0; i < a.size(); ++i) values[i] = av[i] * s;
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(values), detail::grad_parents_of({&a}),
                         [an, s](detail::Node& self) {
                           auto& ga = an->ensure_grad();
                           for (int64_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i] * s;
                         });
}

inline DiffArray add_scalar(const DiffArray& a, double s) {
  std::vector<double> values(a.size());
  auto av = a.values();
  for (int64_t i = 0; i < a.size(); ++i) values[i] = av[i] + s;
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(values), detail::grad_parents_of({&a}),
                         [an](detail::Node& self) {
                           auto& ga = an->ensure_grad();
                           for (int64_t i = 0; i < self.size(); ++i) ga[i] += self.grad[i];
                         });
}

// y = x . W + b over the last extent of x; leading extents are batch rows.
inline DiffArray linear(const DiffArray& x, const DiffArray& W, const DiffArray& b) {
  if (W.rank() != 2 || b.rank() != 1 || x.rank() < 1) {
    throw std::invalid_argument("linear: expected x[...,c_in], W[c_in,c_out], b[c_out]");
  }
  const int64_t c_in = x.shape().back();
  const int64_t c_out = W.extent(1);
  if (W.extent(0) != c_in) {
    throw std::invalid_argument("linear: x " + shape_str(x.shape()) + " does not match W " +
                                shape_str(W.shape()));
  }
  if (b.extent(0) != c_out) {
    throw std::invalid_argument("linear: W " + shape_str(W.shape()) + " does not match b " +
                                shape_str(b.shape()));
  }
  const int64_t rows = x.size() / c_in;
  std::vector<double> values(rows * c_out);
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(b.values().begin(), b.values().end(), values.begin() + r * c_out);
  }
  detail::gemm_nn(rows, c_out, c_in, x.values().data(), W.values().data(), values.data());

  Shape out_shape = x.shape();
  out_shape.back() = c_out;
  auto xn = x.node();
  auto Wn = W.node();
  auto bn = b.node();
  return detail::make_op(
      std::move(out_shape), std::move(values), detail::grad_parents_of({&x, &W, &b}),
      [xn, Wn, bn, rows, c_in, c_out](detail::Node& self) {
        if (xn->requires_grad) {
          detail::gemm_nt(rows, c_in, c_out, self.grad.data(), Wn->values.data(),
                          xn->ensure_grad().data());
        }
        if (Wn->requires_grad) {
          detail::gemm_tn(rows, c_in, c_out, xn->values.data(), self.grad.data(),
                          Wn->ensure_grad().data());
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < c_out; ++j) gb[j] += self.grad[r * c_out + j];
          }
        }
      });
}

inline DiffArray leaky_relu(const DiffArray& x, double slope = 0.1) {
  std::vector<double> values(x.size());
  auto xv = x.values();
  for (int64_t i = 0; i < x.size(); ++i) values[i] = xv[i] >= 0.0 ? xv[i] : slope * xv[i];
  auto xn = x.node();
  return detail::make_op(x.shape(), std::move(values), detail::grad_parents_of({&x}),
                         [xn, slope](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t i = 0; i < self.size(); ++i) {
                             gx[i] += self.grad[i] * (xn->values[i] >= 0.0 ? 1.0 : slope);
                           }
                         });
}

inline DiffArray sigmoid(const DiffArray& x) {
  std::vector<double> values(x.size());
  auto xv = x.values();
  for (int64_t i = 0; i < x.size(); ++i) values[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  auto xn = x.node();
  return detail::make_op(x.shape(), std::move(values), detail::grad_parents_of({&x}),
                         [xn](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t i = 0; i < self.size(); ++i) {
                             const double y = self.values[i];
                             gx[i] += self.grad[i] * y * (1.0 - y);
                           }
                         });
}

inline DiffArray tanh(const DiffArray& x) {
  std::vector<double> values(x.size());
  auto xv = x.values();
  for (int64_t i = 0; i < x.size(); ++i) values[i] = std::tanh(xv[i]);
  auto xn = x.node();
  return detail::make_op(x.shape(), std::move(values), detail::grad_parents_of({&x}),
                         [xn](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t i = 0; i < self.size(); ++i) {
                             const double y = self.values[i];
                             gx[i] += self.grad[i] * (1.0 - y * y);
                           }
                         });
}

inline DiffArray sqrt(const DiffArray& x) {
  auto xv = x.values();
  for (int64_t i = 0; i < x.size(); ++i) {
    if (!(xv[i] > 0.0)) {
      throw std::invalid_argument("sqrt: inputs must be strictly positive");
    }
  }
  std::vector<double> values(x.size());
  for (int64_t i = 0; i < x.size(); ++i) values[i] = std::sqrt(xv[i]);
  auto xn = x.node();
  return detail::make_op(x.shape(), std::move(values), detail::grad_parents_of({&x}),
                         [xn](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t i = 0; i < self.size(); ++i) {
                             gx[i] += self.grad[i] * 0.5 / self.values[i];
                           }
                         });
}

// Concatenation along the last axis; all parts must agree on leading extents.
inline DiffArray concat_last(std::span<const DiffArray> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no parts");
  if (parts.size() == 1) return parts[0];
  const Shape& first = parts[0].shape();
  int64_t total_c = 0;
  for (const DiffArray& p : parts) {
    if (p.rank() != static_cast<int>(first.size())) {
      throw std::invalid_argument("concat_last: rank mismatch between " + shape_str(first) +
                                  " and " + shape_str(p.shape()));
    }
    for (size_t i = 0; i + 1 < first.size(); ++i) {
      if (p.shape()[i] != first[i]) {
        throw std::invalid_argument("concat_last: leading extents differ: " + shape_str(first) +
                                    " vs " + shape_str(p.shape()));
      }
    }
    total_c += p.shape().back();
  }
  const int64_t rows = shape_size(first) / first.back();
  std::vector<double> values(rows * total_c);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const DiffArray& p : parts) {
    const int64_t c = p.shape().back();
    offsets.push_back(off);
    auto pv = p.values();
    for (int64_t r = 0; r < rows; ++r) {
      std::copy(pv.begin() + r * c, pv.begin() + (r + 1) * c, values.begin() + r * total_c + off);
    }
    off += c;
  }
  Shape out_shape = first;
  out_shape.back() = total_c;

  std::vector<std::shared_ptr<detail::Node>> all_nodes;
  std::vector<std::shared_ptr<detail::Node>> grad_parents;
  for (const DiffArray& p : parts) {
    all_nodes.push_back(p.node());
    if (p.requires_grad()) grad_parents.push_back(p.node());
  }
  return detail::make_op(
      std::move(out_shape), std::move(values), std::move(grad_parents),
      [all_nodes, offsets, rows, total_c](detail::Node& self) {
        for (size_t pi = 0; pi < all_nodes.size(); ++pi) {
          auto& pn = all_nodes[pi];
          if (!pn->requires_grad) continue;
          const int64_t c = pn->shape.back();
          const int64_t off = offsets[pi];
          auto& gp = pn->ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < c; ++j) gp[r * c + j] += self.grad[r * total_c + off + j];
          }
        }
      });
}

inline DiffArray concat_last(std::initializer_list<DiffArray> parts) {
  std::vector<DiffArray> v(parts);
  return concat_last(std::span<const DiffArray>(v));
}

// Half-open channel range [lo, hi) of the last axis.
inline DiffArray slice_last(const DiffArray& x, int64_t lo, int64_t hi) {
  const int64_t c = x.shape().back();
  if (lo < 0 || hi > c || lo >= hi) {
    throw std::invalid_argument("slice_last: bad range [" + std::to_string(lo) + "," +
                                std::to_string(hi) + ") for " + shape_str(x.shape()));
  }
  const int64_t rows = x.size() / c;
  const int64_t w = hi - lo;
  std::vector<double> values(rows * w);
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(xv.begin() + r * c + lo, xv.begin() + r * c + hi, values.begin() + r * w);
  }
  Shape out_shape = x.shape();
  out_shape.back() = w;
  auto xn = x.node();
  return detail::make_op(std::move(out_shape), std::move(values), detail::grad_parents_of({&x}),
                         [xn, lo, rows, w, c](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                             for (int64_t j = 0; j < w; ++j) {
                               gx[r * c + lo + j] += self.grad[r * w + j];
                             }
                           }
                         });
}

// Numerically stable softmax along `axis`; rejects non-finite inputs.
inline DiffArray softmax_over(const DiffArray& x, int axis) {
  auto g = detail::axis_geom(x.shape(), axis);
  auto xv = x.values();
  for (int64_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(xv[i])) {
      throw std::invalid_argument("softmax_over: non-finite input");
    }
  }
  std::vector<double> values(x.size());
  for (int64_t o = 0; o < g.outer; ++o) {
    for (int64_t i = 0; i < g.inner; ++i) {
      const int64_t base = o * g.n * g.inner + i;
      double mx = xv[base];
      for (int64_t k = 1; k < g.n; ++k) mx = std::max(mx, xv[base + k * g.inner]);
      double sum = 0.0;
      for (int64_t k = 0; k < g.n; ++k) {
        const double e = std::exp(xv[base + k * g.inner] - mx);
        values[base + k * g.inner] = e;
        sum += e;
      }
      for (int64_t k = 0; k < g.n; ++k) values[base + k * g.inner] /= sum;
    }
  }
  auto xn = x.node();
  return detail::make_op(
      x.shape(), std::move(values), detail::grad_parents_of({&x}),
      [xn, g](detail::Node& self) {
        auto& gx = xn->ensure_grad();
        for (int64_t o = 0; o < g.outer; ++o) {
          for (int64_t i = 0; i < g.inner; ++i) {
            const int64_t base = o * g.n * g.inner + i;
            double dot = 0.0;
            for (int64_t k = 0; k < g.n; ++k) {
              const int64_t idx = base + k * g.inner;
              dot += self.grad[idx] * self.values[idx];
            }
            for (int64_t k = 0; k < g.n; ++k) {
              const int64_t idx = base + k * g.inner;
              gx[idx] += self.values[idx] * (self.grad[idx] - dot);
            }
          }
        }
      });
}

struct MaxReduceResult {
  DiffArray values;             // input shape with `axis` removed
  std::vector<int64_t> argmax;  // per reduced slice; ties to the lowest index
};

// Max over `axis`; the gradient routes entirely to the argmax element.
inline MaxReduceResult max_reduce(const DiffArray& x, int axis) {
  auto g = detail::axis_geom(x.shape(), axis);
  auto xv = x.values();
  std::vector<double> values(g.outer * g.inner);
  std::vector<int64_t> argmax(g.outer * g.inner);
  for (int64_t o = 0; o < g.outer; ++o) {
    for (int64_t i = 0; i < g.inner; ++i) {
      const int64_t base = o * g.n * g.inner + i;
      double best = xv[base];
      int64_t best_k = 0;
      for (int64_t k = 1; k < g.n; ++k) {
        const double v = xv[base + k * g.inner];
        if (v > best) {
          best = v;
          best_k = k;
        }
      }
      values[o * g.inner + i] = best;
      argmax[o * g.inner + i] = best_k;
    }
  }
  Shape out_shape;
  for (int i = 0; i < static_cast<int>(x.shape().size()); ++i) {
    if (i != axis) out_shape.push_back(x.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  auto xn = x.node();
  auto arg_copy = argmax;
  DiffArray out = detail::make_op(
      std::move(out_shape), std::move(values), detail::grad_parents_of({&x}),
      [xn, g, arg_copy](detail::Node& self) {
        auto& gx = xn->ensure_grad();
        for (int64_t o = 0; o < g.outer; ++o) {
          for (int64_t i = 0; i < g.inner; ++i) {
            const int64_t flat = o * g.inner + i;
            gx[o * g.n * g.inner + arg_copy[flat] * g.inner + i] += self.grad[flat];
          }
        }
      });
  return {std::move(out), std::move(argmax)};
}

inline DiffArray sum_axis(const DiffArray& x, int axis) {
  auto g = detail::axis_geom(x.shape(), axis);
  auto xv = x.values();
  std::vector<double> values(g.outer * g.inner, 0.0);
  for (int64_t o = 0; o < g.outer; ++o) {
    for (int64_t k = 0; k < g.n; ++k) {
      const int64_t base = (o * g.n + k) * g.inner;
      for (int64_t i = 0; i < g.inner; ++i) values[o * g.inner + i] += xv[base + i];
    }
  }
  Shape out_shape;
  for (int i = 0; i < static_cast<int>(x.shape().size()); ++i) {
    if (i != axis) out_shape.push_back(x.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  auto xn = x.node();
  return detail::make_op(std::move(out_shape), std::move(values), detail::grad_parents_of({&x}),
                         [xn, g](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t o = 0; o < g.outer; ++o) {
                             for (int64_t k = 0; k < g.n; ++k) {
                               const int64_t base = (o * g.n + k) * g.inner;
                               for (int64_t i = 0; i < g.inner; ++i) {
                                 gx[base + i] += self.grad[o * g.inner + i];
                               }
                             }
                           }
                         });
}

inline DiffArray sum_all(const DiffArray& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto xn = x.node();
  return detail::make_op({1}, {acc}, detail::grad_parents_of({&x}),
                         [xn](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (auto& g : gx) g += self.grad[0];
                         });
}

// out[i, ...] = x[idx[i], ...]
inline DiffArray gather_rows(const DiffArray& x, std::span<const int64_t> idx) {
  if (x.rank() < 1) throw std::invalid_argument("gather_rows: rank-0 input");
  const int64_t n = x.extent(0);
  const int64_t stride = x.size() / n;
  for (int64_t i : idx) {
    if (i < 0 || i >= n) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) +
                                  " out of range [0," + std::to_string(n) + ")");
    }
  }
  std::vector<double> values(idx.size() * stride);
  auto xv = x.values();
  for (size_t r = 0; r < idx.size(); ++r) {
    std::copy(xv.begin() + idx[r] * stride, xv.begin() + (idx[r] + 1) * stride,
              values.begin() + r * stride);
  }
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int64_t>(idx.size());
  auto xn = x.node();
  std::vector<int64_t> idx_copy(idx.begin(), idx.end());
  return detail::make_op(std::move(out_shape), std::move(values), detail::grad_parents_of({&x}),
                         [xn, idx_copy, stride](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (size_t r = 0; r < idx_copy.size(); ++r) {
                             const int64_t dst = idx_copy[r] * stride;
                             for (int64_t j = 0; j < stride; ++j) {
                               gx[dst + j] += self.grad[r * stride + j];
                             }
                           }
                         });
}

// out[r, k, :] = x[idx(r,k), :] for x of shape n x c.
inline DiffArray gather_pairs(const DiffArray& x, const IndexMatrix& idx) {
  if (x.rank() != 2) throw std::invalid_argument("gather_pairs: expected a rank-2 input");
  const int64_t n = x.extent(0);
  const int64_t c = x.extent(1);
  for (int64_t i : idx.data) {
    if (i < 0 || i >= n) {
      throw std::invalid_argument("gather_pairs: index " + std::to_string(i) +
                                  " out of range [0," + std::to_string(n) + ")");
    }
  }
  std::vector<double> values(idx.rows * idx.cols * c);
  auto xv = x.values();
  for (int64_t r = 0; r < idx.rows * idx.cols; ++r) {
    std::copy(xv.begin() + idx.data[r] * c, xv.begin() + (idx.data[r] + 1) * c,
              values.begin() + r * c);
  }
  auto xn = x.node();
  auto idx_copy = idx.data;
  return detail::make_op({idx.rows, idx.cols, c}, std::move(values),
                         detail::grad_parents_of({&x}),
                         [xn, idx_copy, c](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (size_t r = 0; r < idx_copy.size(); ++r) {
                             const int64_t dst = idx_copy[r] * c;
                             for (int64_t j = 0; j < c; ++j) gx[dst + j] += self.grad[r * c + j];
                           }
                         });
}

// n x c -> n x k x c by repetition along a new middle axis.
inline DiffArray expand_mid(const DiffArray& x, int64_t k) {
  if (x.rank() != 2) throw std::invalid_argument("expand_mid: expected a rank-2 input");
  if (k <= 0) throw std::invalid_argument("expand_mid: k must be positive");
  const int64_t n = x.extent(0);
  const int64_t c = x.extent(1);
  std::vector<double> values(n * k * c);
  auto xv = x.values();
  for (int64_t r = 0; r < n; ++r) {
    for (int64_t j = 0; j < k; ++j) {
      std::copy(xv.begin() + r * c, xv.begin() + (r + 1) * c,
                values.begin() + (r * k + j) * c);
    }
  }
  auto xn = x.node();
  return detail::make_op({n, k, c}, std::move(values), detail::grad_parents_of({&x}),
                         [xn, n, k, c](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t r = 0; r < n; ++r) {
                             for (int64_t j = 0; j < k; ++j) {
                               const int64_t src = (r * k + j) * c;
                               for (int64_t q = 0; q < c; ++q) gx[r * c + q] += self.grad[src + q];
                             }
                           }
                         });
}

// shape -> m x shape by repetition along a new leading axis.
inline DiffArray expand_front(const DiffArray& x, int64_t m) {
  if (m <= 0) throw std::invalid_argument("expand_front: m must be positive");
  const int64_t sz = x.size();
  std::vector<double> values(m * sz);
  auto xv = x.values();
  for (int64_t r = 0; r < m; ++r) std::copy(xv.begin(), xv.end(), values.begin() + r * sz);
  Shape out_shape;
  out_shape.push_back(m);
  for (int64_t e : x.shape()) out_shape.push_back(e);
  auto xn = x.node();
  return detail::make_op(std::move(out_shape), std::move(values), detail::grad_parents_of({&x}),
                         [xn, m, sz](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t r = 0; r < m; ++r) {
                             for (int64_t j = 0; j < sz; ++j) gx[j] += self.grad[r * sz + j];
                           }
                         });
}

// Euclidean norm over the last axis, keeping it as an extent of 1.  Uses the
// zero subgradient at the origin.
inline DiffArray norm_last(const DiffArray& x) {
  const int64_t c = x.shape().back();
  const int64_t rows = x.size() / c;
  std::vector<double> values(rows);
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t j = 0; j < c; ++j) acc += xv[r * c + j] * xv[r * c + j];
    values[r] = std::sqrt(acc);
  }
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  auto xn = x.node();
  return detail::make_op(std::move(out_shape), std::move(values), detail::grad_parents_of({&x}),
                         [xn, rows, c](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                             const double nrm = self.values[r];
                             if (nrm == 0.0) continue;
                             const double s = self.grad[r] / nrm;
                             for (int64_t j = 0; j < c; ++j) gx[r * c + j] += s * xn->values[r * c + j];
                           }
                         });
}

// x / max(|x|_2, per row) with an epsilon guard against zero rows.
inline DiffArray l2_normalize_last(const DiffArray& x, double eps = 1e-12) {
  return div(x, add_scalar(norm_last(x), eps));
}

// Sum over the last axis, keeping it as an extent of 1 (broadcast-friendly).
inline DiffArray sum_last(const DiffArray& x) {
  const int64_t c = x.shape().back();
  const int64_t rows = x.size() / c;
  std::vector<double> values(rows, 0.0);
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < c; ++j) values[r] += xv[r * c + j];
  }
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  auto xn = x.node();
  return detail::make_op(std::move(out_shape), std::move(values), detail::grad_parents_of({&x}),
                         [xn, rows, c](detail::Node& self) {
                           auto& gx = xn->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                             for (int64_t j = 0; j < c; ++j) gx[r * c + j] += self.grad[r];
                           }
                         });
}

inline DiffArray mean_last(const DiffArray& x) {
  return scale(sum_last(x), 1.0 / static_cast<double>(x.shape().back()));
}

// Per-row dot product of two same-shape arrays, keeping a trailing extent of 1.
inline DiffArray dot_last(const DiffArray& a, const DiffArray& b) {
  return sum_last(mul(a, b));
}

// Per-row standardization over the last axis: (x - mean) / (std + guard).
inline DiffArray standardize_last(const DiffArray& x, double eps = 1e-12) {
  DiffArray centered = sub(x, mean_last(x));
  DiffArray stddev = sqrt(add_scalar(mean_last(mul(centered, centered)), eps));
  return div(centered, stddev);
}

}  // namespace sflab
