#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sflab/param_store.hpp"
#include "sflab/point_ops.hpp"

namespace sflab {

// A single linear map (what the architecture calls an FC: no activation).
struct Linear {
  DiffArray W, b;

  DiffArray operator()(const DiffArray& x) const { return linear(x, W, b); }
  int64_t in_width() const { return W.extent(0); }
  int64_t out_width() const { return W.extent(1); }
};

inline Linear make_linear(ParamStore& store, const std::string& name, int64_t in, int64_t out,
                          bool zero_init = false) {
  const ParamInit w_init = zero_init ? ParamInit::zeros : ParamInit::xavier_uniform;
  return Linear{store.create(name + ".W", {in, out}, w_init),
                store.create(name + ".b", {out}, ParamInit::zeros)};
}

// Hidden linear+activation layers followed by a final linear layer.
struct Mlp {
  std::vector<Linear> hidden;
  Linear out;

  DiffArray operator()(const DiffArray& x) const {
    DiffArray h = x;
    for (const Linear& layer : hidden) h = leaky_relu(layer(h));
    return out(h);
  }
  int64_t out_width() const { return out.out_width(); }
};

inline Mlp make_mlp(ParamStore& store, const std::string& name, int64_t in,
                    const std::vector<int64_t>& widths) {
  if (widths.empty()) throw std::invalid_argument("make_mlp: empty width list");
  Mlp mlp;
  int64_t w = in;
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    mlp.hidden.push_back(make_linear(store, name + ".h" + std::to_string(i), w, widths[i]));
    w = widths[i];
  }
  mlp.out = make_linear(store, name + ".out", w, widths.back());
  return mlp;
}

struct SetConvResult {
  PointCloud cloud;
  std::vector<int64_t> center_indices;
};

// Neighbourhood feature extraction: sample centers, group the K nearest input
// points as (relative coordinate ++ feature), run the shared MLP, max-pool.
// n_out < 0 keeps the input point set in input order (no resampling).
struct SetConv {
  Mlp mlp;
  int64_t n_out;
  int64_t K;

  SetConvResult operator()(const PointCloud& in) const {
    const int64_t n = in.size();
    if (K > n) {
      throw std::invalid_argument("set_conv: K " + std::to_string(K) + " exceeds " +
                                  std::to_string(n) + " input points");
    }
    std::vector<int64_t> centers;
    DiffArray center_coords;
    if (n_out < 0 || n_out == n) {
      centers.resize(n);
      std::iota(centers.begin(), centers.end(), 0);
      center_coords = in.coords;
    } else {
      centers = farthest_point_sample(in.coords, n_out);
      center_coords = gather_rows(in.coords, centers);
    }
    KnnResult nn = knn(center_coords, in.coords, K);
    DiffArray grouped =
        group_relative(center_coords, nn.indices, in.coords, in.feats ? &*in.feats : nullptr);
    DiffArray pooled = max_reduce(mlp(grouped), 1).values;

    SetConvResult out;
    out.cloud.coords = center_coords;
    out.cloud.feats = pooled;
    if (in.mask) {
      std::vector<uint8_t> m(centers.size());
      for (size_t i = 0; i < centers.size(); ++i) m[i] = (*in.mask)[centers[i]];
      out.cloud.mask = std::move(m);
    }
    out.center_indices = std::move(centers);
    return out;
  }
};

inline SetConv make_set_conv(ParamStore& store, const std::string& name, int64_t in_feat_width,
                             int64_t n_out, int64_t K, const std::vector<int64_t>& widths) {
  return SetConv{make_mlp(store, name + ".mlp", 3 + in_feat_width, widths), n_out, K};
}

enum class SimilarityMode { concat, product, cosine, normalized_product };

inline const char* to_string(SimilarityMode m) {
  switch (m) {
    case SimilarityMode::concat: return "concat";
    case SimilarityMode::product: return "product";
    case SimilarityMode::cosine: return "cosine";
    case SimilarityMode::normalized_product: return "normalized_product";
  }
  return "?";
}

struct AttentiveResult {
  DiffArray out;                   // n1 x e
  DiffArray attn;                  // n1 x K x e softmax weights
  DiffArray pair_geometry;         // n1 x K x 10
  std::optional<DiffArray> s_pc2;  // n2 x c_s backward vector (before gathering)
};

// Shared attentive correlation pattern.  Per query/candidate pair it builds
// the 10-channel geometry vector, a feature block that depends on the
// similarity mode, and optionally the backward consistency vector pooled over
// all queries; an MLP turns that into a pair embedding which is softly
// aggregated over candidates with learned per-channel attention.
struct AttentiveStage {
  Mlp h_mlp;
  Linear d_fc;
  Mlp w_mlp;
  std::optional<Linear> backward_fc;
  std::optional<SimilarityMode> sim_mode;  // nullopt: candidate features enter directly

  AttentiveResult apply(const DiffArray& q_coords, const DiffArray* q_feats,
                        const DiffArray& t_coords, const DiffArray& t_feats,
                        const IndexMatrix& idx) const {
    const int64_t K = idx.cols;
    DiffArray x_exp = expand_mid(q_coords, K);
    DiffArray y_cand = gather_pairs(t_coords, idx);
    DiffArray delta = sub(x_exp, y_cand);
    DiffArray d = concat_last({x_exp, y_cand, delta, norm_last(delta)});

    DiffArray block;
    if (!sim_mode) {
      block = gather_pairs(t_feats, idx);
    } else {
      if (!q_feats) throw std::invalid_argument("attentive stage: missing query features");
      switch (*sim_mode) {
        case SimilarityMode::concat:
          block = concat_last({expand_mid(l2_normalize_last(*q_feats), K),
                               gather_pairs(l2_normalize_last(t_feats), idx)});
          break;
        case SimilarityMode::product:
          block = dot_last(expand_mid(*q_feats, K), gather_pairs(t_feats, idx));
          break;
        case SimilarityMode::cosine:
          block = dot_last(expand_mid(l2_normalize_last(*q_feats), K),
                           gather_pairs(l2_normalize_last(t_feats), idx));
          break;
        case SimilarityMode::normalized_product:
          block = dot_last(expand_mid(standardize_last(*q_feats), K),
                           gather_pairs(standardize_last(t_feats), idx));
          break;
      }
    }

    std::optional<DiffArray> s_pc2;
    std::vector<DiffArray> h_parts{d, block};
    if (backward_fc) {
      if (!q_feats || q_feats->extent(1) != t_feats.extent(1)) {
        throw std::invalid_argument("attentive stage: backward validation needs equal widths");
      }
      const int64_t n1 = q_coords.extent(0);
      const int64_t n2 = t_coords.extent(0);
      DiffArray prod = mul(expand_mid(*q_feats, n2), expand_front(t_feats, n1));
      DiffArray pooled = max_reduce(prod, 0).values;  // n2 x c
      s_pc2 = (*backward_fc)(pooled);
      h_parts.push_back(gather_pairs(*s_pc2, idx));
    }

    DiffArray h = h_mlp(concat_last(std::span<const DiffArray>(h_parts)));
    DiffArray attn = softmax_over(w_mlp(concat_last({d_fc(d), h})), 1);
    DiffArray out = sum_axis(mul(h, attn), 1);
    return AttentiveResult{std::move(out), std::move(attn), std::move(d), std::move(s_pc2)};
  }
};

inline AttentiveStage make_attentive_stage(ParamStore& store, const std::string& name,
                                           int64_t block_width, int64_t backward_width,
                                           int64_t e) {
  AttentiveStage s;
  s.h_mlp = make_mlp(store, name + ".h_mlp", 10 + block_width + backward_width, {e, e});
  s.d_fc = make_linear(store, name + ".d_fc", 10, e);
  s.w_mlp = make_mlp(store, name + ".w_mlp", 2 * e, {e, e});
  return s;
}

enum class CandidateMode { all_to_all, knn };

// First correlation between the two frames.  In all-to-all mode every target
// point is a candidate for every query point; the knn mode is the ablation
// that restricts candidates to the K nearest targets.
struct FlowEmbeddingLayer {
  AttentiveStage stage;
  CandidateMode candidate_mode = CandidateMode::all_to_all;
  int64_t knn_k = 16;

  AttentiveResult operator()(const PointCloud& pc1, const PointCloud& pc2) const {
    if (!pc1.feats || !pc2.feats) {
      throw std::invalid_argument("flow embedding: both clouds need features");
    }
    if (pc1.feat_width() != pc2.feat_width()) {
      throw std::invalid_argument("flow embedding: channel mismatch, " +
                                  shape_str(pc1.feats->shape()) + " vs " +
                                  shape_str(pc2.feats->shape()));
    }
    IndexMatrix idx;
    if (candidate_mode == CandidateMode::all_to_all) {
      const int64_t n1 = pc1.size(), n2 = pc2.size();
      idx = IndexMatrix{n1, n2, std::vector<int64_t>(n1 * n2)};
      for (int64_t i = 0; i < n1; ++i) {
        for (int64_t j = 0; j < n2; ++j) idx.at(i, j) = j;
      }
    } else {
      idx = knn(pc1.coords, pc2.coords, knn_k).indices;
    }
    return stage.apply(pc1.coords, &*pc1.feats, pc2.coords, *pc2.feats, idx);
  }
};

struct EmbeddingConfig {
  SimilarityMode similarity_mode = SimilarityMode::concat;
  bool backward_validation = true;
  CandidateMode candidate_mode = CandidateMode::all_to_all;
  int64_t knn_k = 16;
};

inline FlowEmbeddingLayer make_flow_embedding(ParamStore& store, const std::string& name,
                                              int64_t feat_width, const EmbeddingConfig& cfg,
                                              int64_t e) {
  const int64_t block =
      cfg.similarity_mode == SimilarityMode::concat ? 2 * feat_width : 1;
  const int64_t backward = cfg.backward_validation ? feat_width : 0;
  FlowEmbeddingLayer layer;
  layer.stage = make_attentive_stage(store, name, block, backward, e);
  if (cfg.backward_validation) {
    layer.stage.backward_fc = make_linear(store, name + ".backward_fc", feat_width, feat_width);
  }
  layer.stage.sim_mode = cfg.similarity_mode;
  layer.candidate_mode = cfg.candidate_mode;
  layer.knn_k = cfg.knn_k;
  return layer;
}

// Second stage: attentive aggregation of embeddings within one cloud.
struct AttentiveAggregation {
  AttentiveStage stage;  // sim_mode empty, no backward term
  int64_t K = 16;

  AttentiveResult operator()(const DiffArray& coords, const DiffArray& embedding) const {
    IndexMatrix idx = knn(coords, coords, K).indices;
    return stage.apply(coords, nullptr, coords, embedding, idx);
  }
};

inline AttentiveAggregation make_attentive_aggregation(ParamStore& store, const std::string& name,
                                                       int64_t emb_width, int64_t K, int64_t e) {
  return AttentiveAggregation{make_attentive_stage(store, name, emb_width, 0, e), K};
}

// Correlation of the warped first frame against the second frame at one
// refinement level: a knn-candidate attentive embedding followed by the
// in-cloud aggregation, no backward term.
struct FlowReembedding {
  AttentiveStage stage1;  // concat similarity
  AttentiveAggregation stage2;
  int64_t K = 16;

  DiffArray operator()(const PointCloud& warped_pc1, const PointCloud& pc2) const {
    if (!warped_pc1.feats || !pc2.feats) {
      throw std::invalid_argument("flow re-embedding: both clouds need features");
    }
    IndexMatrix idx = knn(warped_pc1.coords, pc2.coords, K).indices;
    AttentiveResult first =
        stage1.apply(warped_pc1.coords, &*warped_pc1.feats, pc2.coords, *pc2.feats, idx);
    return stage2(warped_pc1.coords, first.out).out;
  }
};

inline FlowReembedding make_flow_reembedding(ParamStore& store, const std::string& name,
                                             int64_t pc1_width, int64_t pc2_width, int64_t K,
                                             int64_t K_agg, int64_t e) {
  FlowReembedding r;
  r.stage1 = make_attentive_stage(store, name + ".stage1", pc1_width + pc2_width, 0, e);
  r.stage1.sim_mode = SimilarityMode::concat;
  r.stage2 = make_attentive_aggregation(store, name + ".stage2", e, K_agg, e);
  r.K = K;
  return r;
}

// Propagates embeddings from a sparse level to a dense one: each dense point
// pools an MLP over its K nearest sparse carriers, then mixes in its own
// feature through a linear layer.
struct SetUpconv {
  Mlp mlp;
  Linear mix;
  int64_t K;

  DiffArray operator()(const DiffArray& sparse_coords, const DiffArray& sparse_emb,
                       const PointCloud& dense) const {
    const int64_t n_sparse = sparse_coords.extent(0);
    if (dense.size() < n_sparse) {
      throw std::invalid_argument("set_upconv: dense level smaller than sparse level");
    }
    if (K > n_sparse) {
      throw std::invalid_argument("set_upconv: K " + std::to_string(K) + " exceeds " +
                                  std::to_string(n_sparse) + " sparse points");
    }
    if (!dense.feats) throw std::invalid_argument("set_upconv: dense cloud needs features");
    IndexMatrix idx = knn(dense.coords, sparse_coords, K).indices;
    DiffArray grouped = group_relative(dense.coords, idx, sparse_coords, &sparse_emb);
    DiffArray pooled = max_reduce(mlp(grouped), 1).values;
    return mix(concat_last({pooled, *dense.feats}));
  }
};

inline SetUpconv make_set_upconv(ParamStore& store, const std::string& name, int64_t sparse_width,
                                 int64_t dense_width, int64_t K, int64_t e) {
  return SetUpconv{make_mlp(store, name + ".mlp", 3 + sparse_width, {e, e}),
                   make_linear(store, name + ".mix", e + dense_width, e), K};
}

struct WarpResult {
  DiffArray flow_dense;    // n x 3 interpolated flow
  DiffArray warped_coords; // n x 3
};

// Inverse-distance interpolation of a sparse flow field at dense coordinates,
// then displacement of those coordinates by the interpolated flow.
inline WarpResult warp(const DiffArray& dense_coords, const DiffArray& sparse_coords,
                       const DiffArray& sparse_flow) {
  ThreeNnResult tnn = three_nn_weights(dense_coords.values(), sparse_coords.values());
  const int64_t m = dense_coords.extent(0);
  DiffArray weights = DiffArray::leaf({m, 3, 1}, tnn.weights);
  DiffArray gathered = gather_pairs(sparse_flow, tnn.indices);
  DiffArray flow_dense = sum_axis(mul(gathered, weights), 1);
  return WarpResult{flow_dense, add(dense_coords, flow_dense)};
}

// Two same-resolution set conv layers that turn the dense flow field into a
// learned flow feature.
struct FlowEncoder {
  SetConv conv1, conv2;

  DiffArray operator()(const DiffArray& coords, const DiffArray& flow_dense) const {
    PointCloud in{coords, flow_dense, {}};
    SetConvResult a = conv1(in);
    SetConvResult b = conv2(a.cloud);
    return *b.cloud.feats;
  }
};

inline FlowEncoder make_flow_encoder(ParamStore& store, const std::string& name, int64_t K,
                                     int64_t d_enc) {
  return FlowEncoder{make_set_conv(store, name + ".conv1", 3, -1, K, {d_enc, d_enc}),
                     make_set_conv(store, name + ".conv2", d_enc, -1, K, {d_enc, d_enc})};
}

// Which optional inputs the flow predictor consumes; the re-embedding is
// always used.
struct PredictorInputsMask {
  bool de = true;
  bool p = true;
  bool f_dense = true;
  bool f_enc = true;
};

// de and f_enc are absent when the configuration drops them: the modules that
// would produce them are not built at all, so no parameter is left without a
// gradient path.
struct RefinementInputs {
  std::optional<DiffArray> de;  // up-sampled coarse dense flow embedding, n x d_dense
  DiffArray re;                 // flow re-embedding, n x d_re
  DiffArray p;                  // first-frame point features at this level, n x d_pc1
  DiffArray f_dense;            // coarse dense flow, n x 3
  std::optional<DiffArray> f_enc;  // dense flow feature, n x d_enc
};

inline void check_rows_match(const RefinementInputs& in) {
  const int64_t n = in.re.extent(0);
  auto check = [n](const DiffArray& a) {
    if (a.extent(0) != n) {
      throw std::invalid_argument("predictor: row mismatch, " + shape_str(a.shape()) +
                                  " vs n=" + std::to_string(n));
    }
  };
  if (in.de) check(*in.de);
  check(in.p);
  check(in.f_dense);
  if (in.f_enc) check(*in.f_enc);
}

struct PredictorResult {
  DiffArray embedding;  // refined flow embedding (or updated hidden state)
  DiffArray flow;       // f_dense + residual
};

// Refines the flow embedding from the concatenated inputs and regresses a
// residual flow on top of the coarse dense flow.
struct PredictorMlp {
  Mlp mlp;
  Linear head;  // zero-initialized
  PredictorInputsMask inputs;

  PredictorResult operator()(const RefinementInputs& in) const {
    check_rows_match(in);
    std::vector<DiffArray> parts;
    if (inputs.de) {
      if (!in.de) throw std::invalid_argument("predictor: configured for de but none given");
      parts.push_back(*in.de);
    }
    parts.push_back(in.re);
    if (inputs.p) parts.push_back(in.p);
    if (inputs.f_dense) parts.push_back(in.f_dense);
    if (inputs.f_enc) {
      if (!in.f_enc) throw std::invalid_argument("predictor: configured for f_enc but none given");
      parts.push_back(*in.f_enc);
    }
    DiffArray de2 = mlp(concat_last(std::span<const DiffArray>(parts)));
    DiffArray f = add(in.f_dense, head(de2));
    return PredictorResult{std::move(de2), std::move(f)};
  }
};

inline PredictorMlp make_predictor_mlp(ParamStore& store, const std::string& name, int64_t d_de,
                                       int64_t d_re, int64_t d_p, int64_t d_enc,
                                       const PredictorInputsMask& inputs, int64_t e) {
  int64_t in = d_re;
  if (inputs.de) in += d_de;
  if (inputs.p) in += d_p;
  if (inputs.f_dense) in += 3;
  if (inputs.f_enc) in += d_enc;
  return PredictorMlp{make_mlp(store, name + ".mlp", in, {e, e}),
                      make_linear(store, name + ".head", e, 3, /*zero_init=*/true), inputs};
}

// Gated update of the dense flow embedding, used as the predictor ablation.
// The up-sampled embedding is the hidden state; gates are neighbourhood MLPs
// with max-pooling over a K neighbourhood at the level's coordinates.
struct PredictorGru {
  Mlp z_mlp, r_mlp, n_mlp;
  Linear head;  // zero-initialized
  PredictorInputsMask inputs;
  int64_t K = 8;

  PredictorResult operator()(const DiffArray& coords, const RefinementInputs& in) const {
    check_rows_match(in);
    if (!in.de) throw std::invalid_argument("predictor_gru: the hidden state is required");
    std::vector<DiffArray> x_parts{in.re};
    if (inputs.p) x_parts.push_back(in.p);
    if (inputs.f_dense) x_parts.push_back(in.f_dense);
    if (inputs.f_enc) {
      if (!in.f_enc) throw std::invalid_argument("predictor_gru: configured for f_enc but none given");
      x_parts.push_back(*in.f_enc);
    }
    DiffArray x = concat_last(std::span<const DiffArray>(x_parts));
    const DiffArray& h = *in.de;

    IndexMatrix idx = knn(coords, coords, K).indices;
    auto gate = [&](const Mlp& mlp, const DiffArray& feats) {
      DiffArray grouped = group_relative(coords, idx, coords, &feats);
      return max_reduce(mlp(grouped), 1).values;
    };
    DiffArray hx = concat_last({h, x});
    DiffArray z = sigmoid(gate(z_mlp, hx));
    DiffArray r = sigmoid(gate(r_mlp, hx));
    DiffArray n = tanh(gate(n_mlp, concat_last({mul(r, h), x})));
    DiffArray one = DiffArray::full(z.shape(), 1.0);
    DiffArray h2 = add(mul(sub(one, z), h), mul(z, n));
    DiffArray f = add(in.f_dense, head(h2));
    return PredictorResult{std::move(h2), std::move(f)};
  }
};

inline PredictorGru make_predictor_gru(ParamStore& store, const std::string& name, int64_t d_de,
                                       int64_t d_re, int64_t d_p, int64_t d_enc,
                                       const PredictorInputsMask& inputs, int64_t K, int64_t e) {
  if (d_de != e) {
    throw std::invalid_argument("predictor_gru: hidden width " + std::to_string(d_de) +
                                " must equal the gate width " + std::to_string(e));
  }
  int64_t xw = d_re;
  if (inputs.p) xw += d_p;
  if (inputs.f_dense) xw += 3;
  if (inputs.f_enc) xw += d_enc;
  PredictorGru g;
  g.z_mlp = make_mlp(store, name + ".z_mlp", 3 + d_de + xw, {e, e});
  g.r_mlp = make_mlp(store, name + ".r_mlp", 3 + d_de + xw, {e, e});
  g.n_mlp = make_mlp(store, name + ".n_mlp", 3 + d_de + xw, {e, e});
  g.head = make_linear(store, name + ".head", e, 3, /*zero_init=*/true);
  g.inputs = inputs;
  g.K = K;
  return g;
}

}  // namespace sflab
