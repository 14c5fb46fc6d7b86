#pragma once

#include <array>
#include <optional>
#include <sstream>

#include "sflab/layers.hpp"
#include "sflab/scene_pair.hpp"

namespace sflab {

enum class PredictorKind { mlp, gru };
enum class RefinementDesign { four_layer_full, interp_n1, interp_4n };

// Architecture hyperparameters.  The stored values describe the full-size
// network; `scale_factor` divides point counts and channel widths uniformly so
// the same description covers the CPU-sized default (factor 4).
struct NetworkConfig {
  int64_t n_input = 8192;
  std::array<int64_t, 4> level_sizes{2048, 1024, 256, 64};  // finest..coarsest
  std::array<int64_t, 4> level_widths{32, 64, 128, 256};
  int64_t embed_width = 128;
  int64_t flow_feat_width = 64;
  int64_t k_setconv = 16;
  int64_t k_upconv = 8;
  int64_t k_reembed = 16;
  int64_t k_gru = 8;
  EmbeddingConfig embedding;
  PredictorKind predictor_kind = PredictorKind::mlp;
  PredictorInputsMask predictor_inputs;
  RefinementDesign refinement_design = RefinementDesign::four_layer_full;
  int64_t scale_factor = 4;
  uint64_t seed = 1;

  // Applies scale_factor and returns the concrete configuration.
  NetworkConfig resolved() const {
    NetworkConfig c = *this;
    if (c.scale_factor > 1) {
      const int64_t s = c.scale_factor;
      auto shrink = [s](int64_t v) { return std::max<int64_t>(1, v / s); };
      c.n_input = shrink(c.n_input);
      for (auto& v : c.level_sizes) v = shrink(v);
      for (auto& v : c.level_widths) v = shrink(v);
      c.embed_width = shrink(c.embed_width);
      c.flow_feat_width = shrink(c.flow_feat_width);
      c.scale_factor = 1;
    }
    c.validate();
    return c;
  }

  void validate() const {
    if (n_input != 4 * level_sizes[0]) {
      throw std::invalid_argument("NetworkConfig: n_input must be 4x the finest level, got " +
                                  std::to_string(n_input) + " vs " +
                                  std::to_string(level_sizes[0]));
    }
    for (int i = 0; i < 3; ++i) {
      if (level_sizes[i] <= level_sizes[i + 1]) {
        throw std::invalid_argument("NetworkConfig: level sizes must be strictly decreasing");
      }
    }
    if (level_sizes[3] < 1) throw std::invalid_argument("NetworkConfig: empty level");
    for (int64_t w : level_widths) {
      if (w < 1) throw std::invalid_argument("NetworkConfig: channel widths must be positive");
    }
    if (embed_width < 1 || flow_feat_width < 1) {
      throw std::invalid_argument("NetworkConfig: embedding widths must be positive");
    }
    if (k_setconv < 1 || k_upconv < 1 || k_reembed < 1 || k_gru < 1 ||
        embedding.knn_k < 1) {
      throw std::invalid_argument("NetworkConfig: neighbourhood sizes must be positive");
    }
  }
};

inline NetworkConfig desk_config() { return NetworkConfig{}; }  // scale_factor 4

inline NetworkConfig full_config() {
  NetworkConfig c;
  c.scale_factor = 1;
  return c;
}

struct RefinementLayer {
  std::optional<SetUpconv> upconv;  // absent at the coarsest level, or when unused
  FlowReembedding reembed;
  std::optional<FlowEncoder> flow_encoder;  // absent when the flow feature is dropped
  std::optional<PredictorMlp> predictor_mlp;
  std::optional<PredictorGru> predictor_gru;
};

struct Model {
  NetworkConfig cfg;  // resolved
  ParamStore store;
  SetConv conv1, conv2, conv3, conv4;
  FlowEmbeddingLayer mixture_embedding;
  AttentiveAggregation mixture_aggregation;
  SetConv smooth1, smooth2;
  SetUpconv initial_upconv;
  Linear initial_head;
  std::vector<RefinementLayer> refinements;  // coarse to fine
  int64_t bottleneck_size = 0;
};

struct PyramidLevel {
  DiffArray coords;
  DiffArray flow;
  std::optional<DiffArray> embedding;
  std::vector<int64_t> input_indices;  // rows of the raw first-frame input
};

// Per-level predicted flow, finest level first.
struct FlowPyramid {
  std::array<PyramidLevel, 4> levels;
};

// First-frame feature width consumed at each refinement level, coarse to fine.
// The coarsest refinement runs on points resampled from the third pyramid
// level and inherits that level's features.
namespace detail {

inline std::array<int64_t, 4> refinement_pc1_widths(const NetworkConfig& c) {
  return {c.level_widths[2], c.level_widths[2], c.level_widths[1], c.level_widths[0]};
}

inline std::array<int64_t, 4> refinement_pc2_widths(const NetworkConfig& c) {
  return {c.level_widths[3], c.level_widths[2], c.level_widths[1], c.level_widths[0]};
}

inline std::vector<int64_t> compose_indices(const std::vector<int64_t>& parent,
                                            const std::vector<int64_t>& child) {
  std::vector<int64_t> out(child.size());
  for (size_t i = 0; i < child.size(); ++i) out[i] = parent[child[i]];
  return out;
}

}  // namespace detail

inline Model build(const NetworkConfig& config) {
  NetworkConfig c = config.resolved();
  Model m{c, ParamStore(c.seed)};
  const auto& N = c.level_sizes;
  const auto& W = c.level_widths;
  const int64_t e = c.embed_width;

  auto kmin = [](int64_t k, int64_t n) { return std::min(k, n); };

  m.conv1 = make_set_conv(m.store, "conv1", 0, N[0], kmin(c.k_setconv, c.n_input),
                          {W[0], W[0]});
  m.conv2 = make_set_conv(m.store, "conv2", W[0], N[1], kmin(c.k_setconv, N[0]), {W[1], W[1]});
  m.conv3 = make_set_conv(m.store, "conv3", W[1], N[2], kmin(c.k_setconv, N[1]), {W[2], W[2]});
  m.conv4 = make_set_conv(m.store, "conv4", W[2], N[3], kmin(c.k_setconv, N[2]), {W[3], W[3]});

  EmbeddingConfig emb_cfg = c.embedding;
  emb_cfg.knn_k = kmin(emb_cfg.knn_k, N[2]);
  m.mixture_embedding = make_flow_embedding(m.store, "mixture.embedding", W[2], emb_cfg, e);
  m.mixture_aggregation =
      make_attentive_aggregation(m.store, "mixture.aggregation", e, kmin(c.k_reembed, N[2]), e);
  m.smooth1 = make_set_conv(m.store, "mixture.smooth1", e, N[3], kmin(c.k_setconv, N[2]), {e, e});
  m.bottleneck_size = std::max<int64_t>(N[3] / 2, 1);
  m.smooth2 = make_set_conv(m.store, "mixture.smooth2", e, m.bottleneck_size,
                            kmin(c.k_setconv, N[3]), {e, e});
  m.initial_upconv =
      make_set_upconv(m.store, "initial.upconv", e, e, kmin(c.k_upconv, m.bottleneck_size), e);
  m.initial_head = make_linear(m.store, "initial.head", e, 3, /*zero_init=*/true);

  const auto pw = detail::refinement_pc1_widths(c);
  const auto qw = detail::refinement_pc2_widths(c);
  const std::array<int64_t, 4> level_n{N[3], N[2], N[1], N[0]};  // coarse to fine
  const std::array<int64_t, 4> pc2_n{N[3], N[2], N[1], N[0]};
  const int n_refine = c.refinement_design == RefinementDesign::interp_n1 ? 3 : 4;
  // Modules whose output nothing would consume are not built: with the
  // up-sampled embedding dropped from an MLP predictor the per-level upconvs
  // are dead weight (the gru predictor keeps them: the embedding is its hidden
  // state), and with the flow feature dropped the flow encoders are.
  const bool needs_upconv =
      c.predictor_kind == PredictorKind::gru || c.predictor_inputs.de;
  const bool needs_flow_encoder = c.predictor_inputs.f_enc;
  for (int r = 0; r < n_refine; ++r) {
    const std::string name = "refine" + std::to_string(4 - r);
    RefinementLayer layer;
    if (r > 0 && needs_upconv) {
      layer.upconv = make_set_upconv(m.store, name + ".upconv", e, pw[r],
                                     kmin(c.k_upconv, level_n[r - 1]), e);
    }
    layer.reembed = make_flow_reembedding(m.store, name + ".reembed", pw[r], qw[r],
                                          kmin(c.k_reembed, pc2_n[r]),
                                          kmin(c.k_reembed, level_n[r]), e);
    if (needs_flow_encoder) {
      layer.flow_encoder =
          make_flow_encoder(m.store, name + ".flow_encoder", kmin(c.k_setconv, level_n[r]),
                            c.flow_feat_width);
    }
    if (c.predictor_kind == PredictorKind::mlp) {
      layer.predictor_mlp = make_predictor_mlp(m.store, name + ".predictor", e, e, pw[r],
                                               c.flow_feat_width, c.predictor_inputs, e);
    } else {
      layer.predictor_gru =
          make_predictor_gru(m.store, name + ".predictor", e, e, pw[r], c.flow_feat_width,
                             c.predictor_inputs, kmin(c.k_gru, level_n[r]), e);
    }
    m.refinements.push_back(std::move(layer));
  }
  return m;
}

inline FlowPyramid forward(const Model& m, const PointCloud& pc1, const PointCloud& pc2) {
  const NetworkConfig& c = m.cfg;
  if (pc1.size() != c.n_input || pc2.size() != c.n_input) {
    throw std::invalid_argument("forward: expected " + std::to_string(c.n_input) +
                                " points per cloud, got " + std::to_string(pc1.size()) + "/" +
                                std::to_string(pc2.size()));
  }

  // Shared-weight feature pyramids: three levels for the first frame, four
  // for the second.
  SetConvResult a1 = m.conv1(pc1);
  SetConvResult a2 = m.conv2(a1.cloud);
  SetConvResult a3 = m.conv3(a2.cloud);
  SetConvResult b1 = m.conv1(pc2);
  SetConvResult b2 = m.conv2(b1.cloud);
  SetConvResult b3 = m.conv3(b2.cloud);
  SetConvResult b4 = m.conv4(b3.cloud);

  std::vector<int64_t> orig1 = a1.center_indices;
  std::vector<int64_t> orig2 = detail::compose_indices(orig1, a2.center_indices);
  std::vector<int64_t> orig3 = detail::compose_indices(orig2, a3.center_indices);

  // All-to-all point mixture at the third level, then two smoothing set conv
  // layers that carry the embedding down to the bottleneck.
  AttentiveResult fe = m.mixture_embedding(a3.cloud, b3.cloud);
  AttentiveResult mixed = m.mixture_aggregation(a3.cloud.coords, fe.out);
  SetConvResult sm1 = m.smooth1(PointCloud{a3.cloud.coords, mixed.out, {}});
  SetConvResult sm2 = m.smooth2(sm1.cloud);

  // Initial flow embedding and initial flow at the coarsest level.
  DiffArray de0 = m.initial_upconv(sm2.cloud.coords, *sm2.cloud.feats, sm1.cloud);
  DiffArray f0 = m.initial_head(de0);

  struct LevelCtx {
    DiffArray coords;
    DiffArray feats;
    const PointCloud* pc2_cloud;
    std::vector<int64_t> orig;
  };
  DiffArray level4_feats = gather_rows(*a3.cloud.feats, sm1.center_indices);
  PointCloud pc2_l4{b4.cloud.coords, b4.cloud.feats, {}};
  PointCloud pc2_l3{b3.cloud.coords, b3.cloud.feats, {}};
  PointCloud pc2_l2{b2.cloud.coords, b2.cloud.feats, {}};
  PointCloud pc2_l1{b1.cloud.coords, b1.cloud.feats, {}};
  std::array<LevelCtx, 4> levels{
      LevelCtx{sm1.cloud.coords, level4_feats, &pc2_l4,
               detail::compose_indices(orig3, sm1.center_indices)},
      LevelCtx{a3.cloud.coords, *a3.cloud.feats, &pc2_l3, orig3},
      LevelCtx{a2.cloud.coords, *a2.cloud.feats, &pc2_l2, orig2},
      LevelCtx{a1.cloud.coords, *a1.cloud.feats, &pc2_l1, orig1},
  };

  FlowPyramid pyramid;
  DiffArray prev_coords = levels[0].coords;
  DiffArray prev_flow = f0;
  DiffArray prev_emb = de0;
  const bool uses_de =
      m.cfg.predictor_kind == PredictorKind::gru || m.cfg.predictor_inputs.de;
  for (size_t r = 0; r < m.refinements.size(); ++r) {
    const RefinementLayer& layer = m.refinements[r];
    const LevelCtx& lvl = levels[r];
    PointCloud level_cloud{lvl.coords, lvl.feats, {}};

    std::optional<DiffArray> de;
    if (layer.upconv) {
      de = (*layer.upconv)(prev_coords, prev_emb, level_cloud);
    } else if (r == 0 && uses_de) {
      de = prev_emb;  // the coarsest refinement keeps the point count
    }
    WarpResult w = warp(lvl.coords, prev_coords, prev_flow);
    PointCloud warped{w.warped_coords, lvl.feats, {}};
    DiffArray re = layer.reembed(warped, *lvl.pc2_cloud);
    std::optional<DiffArray> f_enc;
    if (layer.flow_encoder) f_enc = (*layer.flow_encoder)(lvl.coords, w.flow_dense);

    RefinementInputs inputs{de, re, lvl.feats, w.flow_dense, f_enc};
    PredictorResult pred = layer.predictor_mlp ? (*layer.predictor_mlp)(inputs)
                                               : (*layer.predictor_gru)(lvl.coords, inputs);

    const size_t slot = 3 - r;  // pyramid stores finest first
    pyramid.levels[slot] =
        PyramidLevel{lvl.coords, pred.flow, pred.embedding, lvl.orig};
    prev_coords = lvl.coords;
    prev_flow = pred.flow;
    prev_emb = pred.embedding;
  }

  if (m.cfg.refinement_design == RefinementDesign::interp_n1) {
    // The finest level is produced by interpolation instead of a refinement
    // layer.
    WarpResult w = warp(levels[3].coords, prev_coords, prev_flow);
    pyramid.levels[0] = PyramidLevel{levels[3].coords, w.flow_dense, {}, levels[3].orig};
  } else if (m.cfg.refinement_design == RefinementDesign::interp_4n) {
    // An extra interpolation estimates flow for every raw input point; that
    // field is what the finest supervision sees.
    WarpResult w = warp(pc1.coords, prev_coords, prev_flow);
    std::vector<int64_t> iota(c.n_input);
    std::iota(iota.begin(), iota.end(), 0);
    pyramid.levels[0] = PyramidLevel{pc1.coords, w.flow_dense, {}, iota};
  }
  return pyramid;
}

struct InferResult {
  std::vector<double> flow;             // finest-level flow, n x 3
  std::vector<int64_t> input_indices;   // rows of the raw input those flows belong to
  std::vector<uint8_t> mask;            // validity inherited from the pair
  std::vector<double> per_point_epe;    // empty when the pair has no ground truth
};

// Runs the network on a sample and reports the finest-level flow, plus
// per-point end point errors when ground truth is available.
inline InferResult infer(const Model& m, const ScenePair& pair, bool with_errors = true) {
  if (pair.n1() != m.cfg.n_input || pair.n2() != m.cfg.n_input) {
    throw std::invalid_argument("infer: pair has " + std::to_string(pair.n1()) + "/" +
                                std::to_string(pair.n2()) + " points, config needs " +
                                std::to_string(m.cfg.n_input));
  }
  PointCloud pc1 = cloud_from_coords(pair.pc1);
  PointCloud pc2 = cloud_from_coords(pair.pc2);
  FlowPyramid pyr = forward(m, pc1, pc2);
  const PyramidLevel& finest = pyr.levels[0];

  InferResult out;
  out.flow.assign(finest.flow.values().begin(), finest.flow.values().end());
  out.input_indices = finest.input_indices;
  out.mask.resize(finest.input_indices.size());
  for (size_t i = 0; i < finest.input_indices.size(); ++i) {
    out.mask[i] = pair.mask.empty() ? 1 : pair.mask[finest.input_indices[i]];
  }
  if (with_errors && !pair.gt_flow.empty()) {
    out.per_point_epe.resize(finest.input_indices.size());
    for (size_t i = 0; i < finest.input_indices.size(); ++i) {
      const int64_t src = finest.input_indices[i];
      double acc = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double d = out.flow[i * 3 + c] - pair.gt_flow[src * 3 + c];
        acc += d * d;
      }
      out.per_point_epe[i] = std::sqrt(acc);
    }
  }
  return out;
}

// Plain-text parameter ledger: name, shape, count per row, then the total.
inline std::string describe(const Model& m) {
  std::ostringstream os;
  int64_t total = 0;
  for (const auto& [name, p] : m.store.params()) {
    os << name << '\t' << shape_str(p.shape()) << '\t' << p.size() << '\n';
    total += p.size();
  }
  os << "total\t" << total << '\n';
  return os.str();
}

}  // namespace sflab
