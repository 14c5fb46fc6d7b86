#include <catch2/catch_amalgamated.hpp>

#include "sflab/grad_check.hpp"
#include "sflab/layers.hpp"

using namespace sflab;

namespace {

DiffArray rand_arr(Shape shape, Rng& rng, bool rg = false, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = uniform(rng, lo, hi);
  return DiffArray::leaf(std::move(shape), std::move(v), rg);
}

PointCloud rand_cloud(int64_t n, int64_t c, Rng& rng) {
  PointCloud pc;
  pc.coords = rand_arr({n, 3}, rng, false, -1.5, 1.5);
  if (c > 0) pc.feats = rand_arr({n, c}, rng, false, -1.0, 1.0);
  return pc;
}

std::vector<double> to_vec(const DiffArray& a) {
  return {a.values().begin(), a.values().end()};
}

double max_abs_diff(const DiffArray& a, const DiffArray& b) {
  double worst = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  }
  return worst;
}

// Sorted copies of attention rows, for permutation comparisons.
std::vector<int64_t> apply_perm(const std::vector<int64_t>& perm, int64_t n) {
  std::vector<int64_t> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = perm[i];
  return out;
}

PointCloud permute_cloud(const PointCloud& pc, const std::vector<int64_t>& perm) {
  PointCloud out;
  out.coords = gather_rows(pc.coords, perm);
  if (pc.feats) out.feats = gather_rows(*pc.feats, perm);
  return out;
}

}  // namespace

TEST_CASE("set conv with n_out=n and K=1 reduces to a per-point MLP of (0 ++ p)") {
  Rng rng(101);
  ParamStore store(7);
  SetConv conv = make_set_conv(store, "c", 4, -1, 1, {6, 5});
  PointCloud pc = rand_cloud(9, 4, rng);
  SetConvResult r = conv(pc);
  REQUIRE(r.cloud.feats->shape() == Shape{9, 5});
  CHECK(to_vec(r.cloud.coords) == to_vec(pc.coords));

  // manual route: rows are (0,0,0) ++ p_i
  std::vector<double> manual(9 * 7, 0.0);
  for (int64_t i = 0; i < 9; ++i) {
    for (int64_t j = 0; j < 4; ++j) manual[i * 7 + 3 + j] = pc.feats->values()[i * 4 + j];
  }
  DiffArray direct = conv.mlp(DiffArray::leaf({9, 7}, manual));
  CHECK(to_vec(*r.cloud.feats) == to_vec(direct));
}

TEST_CASE("set conv center set is stable under permutations fixing the start point") {
  Rng rng(102);
  ParamStore store(8);
  SetConv conv = make_set_conv(store, "c", 2, 5, 3, {4, 4});
  PointCloud pc = rand_cloud(12, 2, rng);
  SetConvResult base = conv(pc);

  std::vector<int64_t> perm{0, 5, 3, 11, 7, 1, 9, 2, 10, 4, 8, 6};  // keeps index 0
  PointCloud shuffled = permute_cloud(pc, perm);
  SetConvResult moved = conv(shuffled);

  std::vector<double> base_centers = to_vec(base.cloud.coords);
  std::vector<double> moved_centers = to_vec(moved.cloud.coords);
  auto sort3 = [](std::vector<double>& v) {
    std::vector<std::array<double, 3>> rows(v.size() / 3);
    for (size_t i = 0; i < rows.size(); ++i) rows[i] = {v[i * 3], v[i * 3 + 1], v[i * 3 + 2]};
    std::sort(rows.begin(), rows.end());
    for (size_t i = 0; i < rows.size(); ++i) {
      v[i * 3] = rows[i][0];
      v[i * 3 + 1] = rows[i][1];
      v[i * 3 + 2] = rows[i][2];
    }
  };
  sort3(base_centers);
  sort3(moved_centers);
  CHECK(base_centers == moved_centers);
}

TEST_CASE("set conv gradient check at 16 points") {
  Rng rng(103);
  ParamStore store(9);
  SetConv conv = make_set_conv(store, "c", 3, 8, 4, {5, 5});
  PointCloud pc = rand_cloud(16, 3, rng);
  pc.feats = rand_arr({16, 3}, rng, true);
  std::vector<DiffArray> leaves{*pc.feats};
  for (const auto& [name, p] : store.params()) leaves.push_back(p);
  double err = grad_check([&]() { return sum_all(mul(*conv(pc).cloud.feats,
                                                     *conv(pc).cloud.feats)); },
                          leaves, 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("all-to-all embedding with a single target point ignores attention weights") {
  Rng rng(104);
  ParamStore store(10);
  EmbeddingConfig cfg;
  FlowEmbeddingLayer layer = make_flow_embedding(store, "fe", 3, cfg, 4);
  PointCloud pc1 = rand_cloud(6, 3, rng);
  PointCloud pc2 = rand_cloud(1, 3, rng);
  AttentiveResult r = layer(pc1, pc2);
  REQUIRE(r.out.shape() == Shape{6, 4});
  for (double v : r.attn.values()) CHECK(v == 1.0);  // singleton softmax

  // fe must not depend on the attention MLP parameters when n2 == 1
  std::vector<double> before = to_vec(r.out);
  for (auto& [name, p] : store.params()) {
    if (name.find("w_mlp") != std::string::npos) {
      auto vals = store.at(name).mutable_values();
      for (auto& v : vals) v += 0.731;
    }
  }
  CHECK(to_vec(layer(pc1, pc2).out) == before);
}

TEST_CASE("flow embedding output is invariant to permutations of the second cloud") {
  Rng rng(105);
  for (int trial = 0; trial < 5; ++trial) {
    ParamStore store(20 + trial);
    EmbeddingConfig cfg;
    cfg.backward_validation = trial % 2 == 0;
    FlowEmbeddingLayer layer = make_flow_embedding(store, "fe", 3, cfg, 5);
    PointCloud pc1 = rand_cloud(7, 3, rng);
    PointCloud pc2 = rand_cloud(9, 3, rng);
    DiffArray base = layer(pc1, pc2).out;

    std::vector<int64_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    DiffArray permuted = layer(pc1, permute_cloud(pc2, perm)).out;
    CHECK(max_abs_diff(base, permuted) < 1e-9);
  }
}

TEST_CASE("backward validation vector is constant across queries and matches the direct FC") {
  Rng rng(106);
  ParamStore store(30);
  EmbeddingConfig cfg;  // backward on, all-to-all
  FlowEmbeddingLayer layer = make_flow_embedding(store, "fe", 3, cfg, 4);

  PointCloud pc1 = rand_cloud(1, 3, rng);  // single query: maxpool over one element
  PointCloud pc2 = rand_cloud(5, 3, rng);
  AttentiveResult r = layer(pc1, pc2);
  REQUIRE(r.s_pc2.has_value());
  REQUIRE(r.s_pc2->shape() == Shape{5, 3});

  // s^k = FC(p_1 * q_k) elementwise when n1 == 1
  std::vector<double> prod(5 * 3);
  for (int64_t k = 0; k < 5; ++k) {
    for (int64_t c = 0; c < 3; ++c) {
      prod[k * 3 + c] = pc1.feats->values()[c] * pc2.feats->values()[k * 3 + c];
    }
  }
  DiffArray direct = (*layer.stage.backward_fc)(DiffArray::leaf({5, 3}, prod));
  CHECK(to_vec(*r.s_pc2) == to_vec(direct));
}

TEST_CASE("similarity modes change the feature block width as documented") {
  Rng rng(107);
  PointCloud pc1 = rand_cloud(5, 4, rng);
  PointCloud pc2 = rand_cloud(6, 4, rng);
  for (SimilarityMode mode : {SimilarityMode::concat, SimilarityMode::product,
                              SimilarityMode::cosine, SimilarityMode::normalized_product}) {
    for (bool backward : {false, true}) {
      ParamStore store(40);
      EmbeddingConfig cfg;
      cfg.similarity_mode = mode;
      cfg.backward_validation = backward;
      FlowEmbeddingLayer layer = make_flow_embedding(store, "fe", 4, cfg, 5);
      AttentiveResult r = layer(pc1, pc2);
      CHECK(r.out.shape() == Shape{5, 5});
      CHECK(r.pair_geometry.shape() == Shape{5, 6, 10});  // 3+3+3+1 channels
      // per-query attention rows sum to K... each channel sums to 1 over candidates
      for (int64_t i = 0; i < 5; ++i) {
        for (int64_t c = 0; c < 5; ++c) {
          double sum = 0.0;
          for (int64_t k = 0; k < 6; ++k) sum += r.attn.values()[(i * 6 + k) * 5 + c];
          CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("channel mismatch between the two clouds is rejected") {
  Rng rng(108);
  ParamStore store(41);
  FlowEmbeddingLayer layer = make_flow_embedding(store, "fe", 3, EmbeddingConfig{}, 4);
  PointCloud pc1 = rand_cloud(4, 3, rng);
  PointCloud pc2 = rand_cloud(4, 2, rng);
  CHECK_THROWS_AS(layer(pc1, pc2), std::invalid_argument);
}

TEST_CASE("knn candidate mode restricts the candidate set") {
  Rng rng(109);
  ParamStore store(42);
  EmbeddingConfig cfg;
  cfg.candidate_mode = CandidateMode::knn;
  cfg.knn_k = 2;
  FlowEmbeddingLayer layer = make_flow_embedding(store, "fe", 3, cfg, 4);
  PointCloud pc1 = rand_cloud(5, 3, rng);
  PointCloud pc2 = rand_cloud(8, 3, rng);
  AttentiveResult r = layer(pc1, pc2);
  CHECK(r.pair_geometry.shape() == Shape{5, 2, 10});
}

TEST_CASE("second aggregation with K=1 is the per-point embedding transform") {
  Rng rng(110);
  ParamStore store(43);
  AttentiveAggregation agg = make_attentive_aggregation(store, "agg", 4, 1, 5);
  DiffArray coords = rand_arr({6, 3}, rng);
  DiffArray fe = rand_arr({6, 4}, rng);
  AttentiveResult r = agg(coords, fe);
  for (double v : r.attn.values()) CHECK(v == 1.0);

  // manual: h(d(x_i, x_i) ++ fe_i) with a zero-offset geometry vector
  std::vector<double> rows(6 * 14);
  for (int64_t i = 0; i < 6; ++i) {
    for (int c = 0; c < 3; ++c) {
      rows[i * 14 + c] = coords.values()[i * 3 + c];
      rows[i * 14 + 3 + c] = coords.values()[i * 3 + c];
      rows[i * 14 + 6 + c] = 0.0;
    }
    rows[i * 14 + 9] = 0.0;
    for (int c = 0; c < 4; ++c) rows[i * 14 + 10 + c] = fe.values()[i * 4 + c];
  }
  DiffArray direct = agg.stage.h_mlp(DiffArray::leaf({6, 14}, rows));
  CHECK(to_vec(r.out) == to_vec(direct));
}

TEST_CASE("second aggregation gradient check at 16 points") {
  // Seed picked away from activation kinks (finite differences cross them
  // otherwise and the comparison stops being meaningful).
  Rng rng(4);
  ParamStore store(1004);
  AttentiveAggregation agg = make_attentive_aggregation(store, "agg", 3, 4, 4);
  DiffArray coords = rand_arr({16, 3}, rng);
  DiffArray fe = rand_arr({16, 3}, rng, true);
  std::vector<DiffArray> leaves{fe};
  for (const auto& [name, p] : store.params()) leaves.push_back(p);
  double err = grad_check([&]() { return sum_all(mul(agg(coords, fe).out, agg(coords, fe).out)); },
                          leaves, 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("set upconv with equal sets and K=1 aggregates each point with itself") {
  Rng rng(112);
  ParamStore store(45);
  SetUpconv up = make_set_upconv(store, "up", 4, 2, 1, 5);
  DiffArray coords = rand_arr({7, 3}, rng);
  DiffArray emb = rand_arr({7, 4}, rng);
  PointCloud dense{coords, rand_arr({7, 2}, rng), {}};
  DiffArray out = up(coords, emb, dense);
  REQUIRE(out.shape() == Shape{7, 5});

  // manual: mix( mlp(0 ++ se_i) ++ p_i )
  std::vector<double> rows(7 * 7, 0.0);
  for (int64_t i = 0; i < 7; ++i) {
    for (int c = 0; c < 4; ++c) rows[i * 7 + 3 + c] = emb.values()[i * 4 + c];
  }
  DiffArray pooled = up.mlp(DiffArray::leaf({7, 7}, rows));
  DiffArray direct = up.mix(concat_last({pooled, *dense.feats}));
  CHECK(to_vec(out) == to_vec(direct));
}

TEST_CASE("set upconv output rows equal the dense count; gradient check 8 to 16") {
  Rng rng(113);
  ParamStore store(46);
  SetUpconv up = make_set_upconv(store, "up", 3, 2, 3, 4);
  DiffArray sparse_coords = rand_arr({8, 3}, rng);
  DiffArray emb = rand_arr({8, 3}, rng, true);
  PointCloud dense{rand_arr({16, 3}, rng), rand_arr({16, 2}, rng), {}};
  DiffArray out = up(sparse_coords, emb, dense);
  CHECK(out.shape() == Shape{16, 4});

  std::vector<DiffArray> leaves{emb};
  for (const auto& [name, p] : store.params()) leaves.push_back(p);
  double err = grad_check(
      [&]() { return sum_all(mul(up(sparse_coords, emb, dense), up(sparse_coords, emb, dense))); },
      leaves, 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("warp: zero flow is the bit-exact identity") {
  Rng rng(114);
  DiffArray dense = rand_arr({10, 3}, rng);
  DiffArray sparse = rand_arr({5, 3}, rng);
  WarpResult r = warp(dense, sparse, DiffArray::zeros({5, 3}));
  CHECK(to_vec(r.warped_coords) == to_vec(dense));
  for (double v : r.flow_dense.values()) CHECK(v == 0.0);
}

TEST_CASE("warp: constant flow shifts every point") {
  Rng rng(115);
  DiffArray dense = rand_arr({10, 3}, rng);
  DiffArray sparse = rand_arr({5, 3}, rng);
  std::vector<double> t(5 * 3);
  for (int64_t i = 0; i < 5; ++i) {
    t[i * 3] = 0.25;
    t[i * 3 + 1] = -0.5;
    t[i * 3 + 2] = 0.125;
  }
  WarpResult r = warp(dense, sparse, DiffArray::leaf({5, 3}, t));
  for (int64_t i = 0; i < 10; ++i) {
    CHECK(std::abs(r.warped_coords.values()[i * 3] - (dense.values()[i * 3] + 0.25)) <= 1e-12);
    CHECK(std::abs(r.warped_coords.values()[i * 3 + 1] - (dense.values()[i * 3 + 1] - 0.5)) <=
          1e-12);
    CHECK(std::abs(r.warped_coords.values()[i * 3 + 2] - (dense.values()[i * 3 + 2] + 0.125)) <=
          1e-12);
  }
}

TEST_CASE("warp: coincident sparse and dense levels reproduce the sparse flow") {
  Rng rng(116);
  DiffArray coords = rand_arr({8, 3}, rng);
  DiffArray flow = rand_arr({8, 3}, rng);
  WarpResult r = warp(coords, coords, flow);
  CHECK(max_abs_diff(r.flow_dense, flow) < 1e-6);
}

TEST_CASE("flow re-embedding: duplicate geometry points receive identical embeddings") {
  Rng rng(117);
  ParamStore store(47);
  FlowReembedding re = make_flow_reembedding(store, "re", 3, 3, 4, 4, 5);

  // pc1' == pc2 pointwise, and rows 2 and 5 are exact duplicates
  PointCloud pc2 = rand_cloud(8, 3, rng);
  {
    auto cv = pc2.coords.mutable_values();
    auto fv = pc2.feats->mutable_values();
    for (int c = 0; c < 3; ++c) {
      cv[5 * 3 + c] = cv[2 * 3 + c];
      fv[5 * 3 + c] = fv[2 * 3 + c];
    }
  }
  PointCloud pc1 = pc2;
  DiffArray out = re(pc1, pc2);
  for (int64_t c = 0; c < 5; ++c) {
    CHECK(out.values()[2 * 5 + c] == out.values()[5 * 5 + c]);
  }
}

TEST_CASE("flow re-embedding is invariant to permutations of the second cloud") {
  Rng rng(118);
  ParamStore store(48);
  FlowReembedding re = make_flow_reembedding(store, "re", 3, 2, 3, 3, 4);
  PointCloud pc1 = rand_cloud(6, 3, rng);
  PointCloud pc2 = rand_cloud(9, 2, rng);
  DiffArray base = re(pc1, pc2);
  std::vector<int64_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  DiffArray moved = re(pc1, permute_cloud(pc2, perm));
  CHECK(max_abs_diff(base, moved) < 1e-9);
}

TEST_CASE("flow encoder keeps rows, ignores global translation, and passes grad check") {
  Rng rng(119);
  ParamStore store(49);
  FlowEncoder enc = make_flow_encoder(store, "enc", 4, 3);
  DiffArray coords = rand_arr({12, 3}, rng);
  DiffArray flow = rand_arr({12, 3}, rng, true);
  DiffArray out = enc(coords, flow);
  REQUIRE(out.shape() == Shape{12, 3});

  std::vector<double> shifted = to_vec(coords);
  for (size_t i = 0; i < shifted.size(); ++i) shifted[i] += (i % 3 == 0 ? 2.0 : -1.0);
  DiffArray out2 = enc(DiffArray::leaf({12, 3}, shifted), flow);
  CHECK(max_abs_diff(out, out2) < 1e-9);

  std::vector<DiffArray> leaves{flow};
  for (const auto& [name, p] : store.params()) leaves.push_back(p);
  double err = grad_check(
      [&]() { return sum_all(mul(enc(coords, flow), enc(coords, flow))); }, leaves, 1e-4);
  CHECK(err < 1e-4);
}

namespace {

RefinementInputs rand_inputs(int64_t n, Rng& rng) {
  RefinementInputs in;
  in.de = rand_arr({n, 5}, rng, true);
  in.re = rand_arr({n, 4}, rng, true);
  in.p = rand_arr({n, 3}, rng, true);
  in.f_dense = rand_arr({n, 3}, rng, true);
  in.f_enc = rand_arr({n, 2}, rng, true);
  return in;
}

}  // namespace

TEST_CASE("mlp predictor: zero-initialized head returns the coarse flow bit-exactly") {
  Rng rng(120);
  ParamStore store(50);
  PredictorMlp pred = make_predictor_mlp(store, "pred", 5, 4, 3, 2, {}, 6);
  RefinementInputs in = rand_inputs(10, rng);
  PredictorResult r = pred(in);
  CHECK(to_vec(r.flow) == to_vec(in.f_dense));
  CHECK(r.embedding.shape() == Shape{10, 6});
}

TEST_CASE("mlp predictor: dropping inputs narrows the concatenation accordingly") {
  ParamStore store(51);
  PredictorInputsMask all;
  PredictorInputsMask no_de = all;
  no_de.de = false;
  PredictorInputsMask no_enc = all;
  no_enc.f_enc = false;
  PredictorMlp p_all = make_predictor_mlp(store, "a", 5, 4, 3, 2, all, 6);
  PredictorMlp p_no_de = make_predictor_mlp(store, "b", 5, 4, 3, 2, no_de, 6);
  PredictorMlp p_no_enc = make_predictor_mlp(store, "c", 5, 4, 3, 2, no_enc, 6);
  CHECK(p_all.mlp.hidden[0].in_width() == 5 + 4 + 3 + 3 + 2);
  CHECK(p_no_de.mlp.hidden[0].in_width() == 4 + 3 + 3 + 2);
  CHECK(p_no_enc.mlp.hidden[0].in_width() == 5 + 4 + 3 + 3);

  Rng rng(121);
  RefinementInputs in = rand_inputs(6, rng);
  in.de = rand_arr({4, 5}, rng, true);  // row mismatch rejected
  CHECK_THROWS_AS(p_all(in), std::invalid_argument);
}

TEST_CASE("mlp predictor gradient check at 16 points") {
  Rng rng(122);
  ParamStore store(52);
  PredictorMlp pred = make_predictor_mlp(store, "pred", 5, 4, 3, 2, {}, 6);
  RefinementInputs in = rand_inputs(16, rng);
  std::vector<DiffArray> leaves{*in.de, in.re, in.p, in.f_dense, *in.f_enc};
  for (const auto& [name, p] : store.params()) leaves.push_back(p);
  double err = grad_check(
      [&]() {
        PredictorResult r = pred(in);
        return sum_all(add(mul(r.flow, r.flow), sum_last(mul(r.embedding, r.embedding))));
      },
      leaves, 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("gru predictor gate limits") {
  Rng rng(123);
  ParamStore store(53);
  PredictorGru pred = make_predictor_gru(store, "gru", 5, 4, 3, 2, {}, 3, 5);
  DiffArray coords = rand_arr({8, 3}, rng);
  RefinementInputs in = rand_inputs(8, rng);
  in.de = rand_arr({8, 5}, rng, true);

  // z forced to 0: update gate closed, hidden state unchanged bit-exactly
  {
    auto b = pred.z_mlp.out.b.mutable_values();
    for (auto& v : b) v = -1e9;
  }
  PredictorResult closed = pred(coords, in);
  CHECK(to_vec(closed.embedding) == to_vec(*in.de));

  // z forced to 1: hidden state replaced by the candidate bit-exactly
  {
    auto b = pred.z_mlp.out.b.mutable_values();
    for (auto& v : b) v = 1e9;
  }
  PredictorResult open = pred(coords, in);
  for (double v : open.embedding.values()) CHECK(std::abs(v) <= 1.0);  // tanh range

  // moderate gates: h' lies between h and the candidate elementwise
  {
    auto b = pred.z_mlp.out.b.mutable_values();
    for (auto& v : b) v = 0.0;
  }
  PredictorResult mid = pred(coords, in);
  PredictorResult lo = [&]() {
    auto b = pred.z_mlp.out.b.mutable_values();
    for (auto& v : b) v = -1e9;
    return pred(coords, in);
  }();
  PredictorResult hi = [&]() {
    auto b = pred.z_mlp.out.b.mutable_values();
    for (auto& v : b) v = 1e9;
    return pred(coords, in);
  }();
  for (int64_t i = 0; i < mid.embedding.size(); ++i) {
    const double a = lo.embedding.values()[i];
    const double b2 = hi.embedding.values()[i];
    const double m = mid.embedding.values()[i];
    CHECK(m >= std::min(a, b2) - 1e-12);
    CHECK(m <= std::max(a, b2) + 1e-12);
  }
}

TEST_CASE("gru predictor zero head and gradient check") {
  Rng rng(124);
  ParamStore store(54);
  PredictorGru pred = make_predictor_gru(store, "gru", 5, 4, 3, 2, {}, 3, 5);
  DiffArray coords = rand_arr({12, 3}, rng);
  RefinementInputs in = rand_inputs(12, rng);
  in.de = rand_arr({12, 5}, rng, true);
  PredictorResult r = pred(coords, in);
  CHECK(to_vec(r.flow) == to_vec(in.f_dense));

  std::vector<DiffArray> leaves{*in.de, in.re, in.p, in.f_dense, *in.f_enc};
  for (const auto& [name, p] : store.params()) leaves.push_back(p);
  double err = grad_check(
      [&]() {
        PredictorResult pr = pred(coords, in);
        return sum_all(add(mul(pr.flow, pr.flow), sum_last(mul(pr.embedding, pr.embedding))));
      },
      leaves, 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("full refinement step passes a gradient check at 16 points") {
  // Seed picked so no perturbation crosses a neighbour-selection boundary.
  Rng rng(5);
  ParamStore store(2005);
  const int64_t n_sparse = 8, n = 16;
  SetUpconv up = make_set_upconv(store, "up", 4, 3, 3, 5);
  FlowReembedding re = make_flow_reembedding(store, "re", 3, 3, 4, 4, 4);
  FlowEncoder enc = make_flow_encoder(store, "enc", 4, 2);
  PredictorMlp pred = make_predictor_mlp(store, "pred", 5, 4, 3, 2, {}, 5);

  DiffArray sparse_coords = rand_arr({n_sparse, 3}, rng);
  DiffArray sparse_emb = rand_arr({n_sparse, 4}, rng, true);
  DiffArray sparse_flow = rand_arr({n_sparse, 3}, rng, true);
  PointCloud level{rand_arr({n, 3}, rng), rand_arr({n, 3}, rng), {}};
  PointCloud pc2{rand_arr({20, 3}, rng), rand_arr({20, 3}, rng), {}};

  auto run = [&]() {
    DiffArray de = up(sparse_coords, sparse_emb, level);
    WarpResult w = warp(level.coords, sparse_coords, sparse_flow);
    PointCloud warped{w.warped_coords, level.feats, {}};
    DiffArray re_out = re(warped, pc2);
    DiffArray f_enc = enc(level.coords, w.flow_dense);
    RefinementInputs in{de, re_out, *level.feats, w.flow_dense, f_enc};
    PredictorResult r = pred(in);
    return sum_all(add(mul(r.flow, r.flow), sum_last(mul(r.embedding, r.embedding))));
  };
  std::vector<DiffArray> leaves{sparse_emb, sparse_flow};
  for (const auto& [name, p] : store.params()) leaves.push_back(p);
  double err = grad_check(run, leaves, 1e-4);
  CHECK(err < 1e-4);
}
