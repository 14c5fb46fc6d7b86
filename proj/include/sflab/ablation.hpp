#pragma once

#include <chrono>
#include <iostream>

#include "sflab/metrics.hpp"
#include "sflab/training.hpp"

namespace sflab {

struct AblationVariant {
  std::string name;
  NetworkConfig config;
};

// The thirteen studied configurations: the full design, embedding ablations,
// similarity alternatives, the GRU predictor swap, the four predictor input
// drops, and the two interpolation-based refinement designs.
inline std::vector<AblationVariant> ablation_variants(const NetworkConfig& base) {
  std::vector<AblationVariant> v;
  v.push_back({"full", base});

  NetworkConfig c = base;
  c.embedding.backward_validation = false;
  v.push_back({"no_backward_validation", c});

  c = base;
  c.embedding.backward_validation = false;
  c.embedding.candidate_mode = CandidateMode::knn;
  v.push_back({"no_backward_no_all_to_all", c});

  for (auto [name, mode] :
       {std::pair{"product_similarity", SimilarityMode::product},
        {"cosine_product_similarity", SimilarityMode::cosine},
        {"normalized_product_similarity", SimilarityMode::normalized_product}}) {
    c = base;
    c.embedding.similarity_mode = mode;
    v.push_back({name, c});
  }

  c = base;
  c.predictor_kind = PredictorKind::gru;
  v.push_back({"gru_predictor", c});

  c = base;
  c.predictor_inputs.p = false;
  v.push_back({"no_pc1_feature_input", c});
  c = base;
  c.predictor_inputs.de = false;
  v.push_back({"no_upsampled_embedding_input", c});
  c = base;
  c.predictor_inputs.f_dense = false;
  v.push_back({"no_coarse_flow_input", c});
  c = base;
  c.predictor_inputs.f_enc = false;
  v.push_back({"no_flow_feature_input", c});

  c = base;
  c.refinement_design = RefinementDesign::interp_n1;
  v.push_back({"interp_finest", c});
  c = base;
  c.refinement_design = RefinementDesign::interp_4n;
  v.push_back({"interp_full_input", c});
  return v;
}

struct AblationRow {
  std::string name;
  bool failed = false;
  std::string error;
  MetricReport report;
  double train_seconds = 0;
};

// Pools prediction/target points across every pair for dataset-level metrics.
inline MetricReport evaluate_model(const Model& model, const std::vector<ScenePair>& pairs) {
  std::vector<double> pred, gt;
  std::vector<uint8_t> mask;
  for (const ScenePair& pair : pairs) {
    InferResult r = infer(model, pair, /*with_errors=*/false);
    for (size_t i = 0; i < r.input_indices.size(); ++i) {
      const int64_t src = r.input_indices[i];
      for (int c = 0; c < 3; ++c) {
        pred.push_back(r.flow[i * 3 + c]);
        gt.push_back(pair.gt_flow[src * 3 + c]);
      }
      mask.push_back(r.mask[i]);
    }
  }
  return evaluate(pred, gt, mask.data());
}

// Trains every variant with the same seed and data, evaluates on the held-out
// pairs, and keeps going when a variant fails (the row records the reason).
inline std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants,
                                             const std::vector<ScenePair>& train_pairs,
                                             const std::vector<ScenePair>& eval_pairs,
                                             const TrainConfig& tcfg, const LossConfig& lcfg,
                                             std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  for (const AblationVariant& variant : variants) {
    AblationRow row;
    row.name = variant.name;
    const auto start = std::chrono::steady_clock::now();
    try {
      Model model = build(variant.config);
      train(model, train_pairs, tcfg, lcfg, "");
      row.report = evaluate_model(model, eval_pairs);
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    row.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (progress) {
      *progress << variant.name << (row.failed ? " failed: " + row.error : " done") << "\n";
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "variant,epe3d,acc3d_strict,acc3d_relax,outliers3d,epe2d,acc2d,train_seconds\n";
  char buf[256];
  for (const AblationRow& r : rows) {
    if (r.failed) {
      out << r.name << ",failed,,,,,,\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,,,%.3f\n", r.name.c_str(),
                  r.report.epe3d, r.report.acc3d_strict, r.report.acc3d_relax,
                  r.report.outliers3d, r.train_seconds);
    out << buf;
  }
}

}  // namespace sflab
