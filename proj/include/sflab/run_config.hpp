#pragma once

#include <charconv>
#include <fstream>
#include <map>

#include "sflab/ablation.hpp"
#include "sflab/scene_gen.hpp"

namespace sflab {

// Flat `key = value` configuration with dotted keys and `#` comments, shared
// by every command.  Unknown keys are rejected.
struct RunConfig {
  NetworkConfig network;  // defaults to the desk-scale preset
  TrainConfig train;
  LossConfig loss;
  SceneGenConfig gen;
  uint64_t seed = 1;

  void apply_seed() {
    network.seed = seed;
    train.seed = seed;
    gen.seed = seed;
  }
};

namespace detail {

inline int64_t parse_int(const std::string& key, const std::string& value) {
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size()) {
    throw std::invalid_argument("config: '" + key + "' expects an integer, got '" + value + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double out = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: '" + key + "' expects a number, got '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config: '" + key + "' expects true/false, got '" + value + "'");
}

inline std::vector<std::string> split_csv(const std::string& value) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : value) {
    if (ch == ',') {
      parts.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  return parts;
}

template <size_t N>
inline std::array<int64_t, N> parse_int_list(const std::string& key, const std::string& value) {
  auto parts = split_csv(value);
  if (parts.size() != N) {
    throw std::invalid_argument("config: '" + key + "' expects " + std::to_string(N) +
                                " comma-separated values");
  }
  std::array<int64_t, N> out{};
  for (size_t i = 0; i < N; ++i) out[i] = parse_int(key, parts[i]);
  return out;
}

}  // namespace detail

inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;

  if (key == "seed") {
    cfg.seed = static_cast<uint64_t>(parse_int(key, value));
  } else if (key == "network.n_input") {
    cfg.network.n_input = parse_int(key, value);
  } else if (key == "network.levels") {
    cfg.network.level_sizes = detail::parse_int_list<4>(key, value);
  } else if (key == "network.widths") {
    cfg.network.level_widths = detail::parse_int_list<4>(key, value);
  } else if (key == "network.embed_width") {
    cfg.network.embed_width = parse_int(key, value);
  } else if (key == "network.flow_feat_width") {
    cfg.network.flow_feat_width = parse_int(key, value);
  } else if (key == "network.k_setconv") {
    cfg.network.k_setconv = parse_int(key, value);
  } else if (key == "network.k_upconv") {
    cfg.network.k_upconv = parse_int(key, value);
  } else if (key == "network.k_reembed") {
    cfg.network.k_reembed = parse_int(key, value);
  } else if (key == "network.k_gru") {
    cfg.network.k_gru = parse_int(key, value);
  } else if (key == "network.scale_factor") {
    cfg.network.scale_factor = parse_int(key, value);
  } else if (key == "network.predictor") {
    if (value == "mlp") {
      cfg.network.predictor_kind = PredictorKind::mlp;
    } else if (value == "gru") {
      cfg.network.predictor_kind = PredictorKind::gru;
    } else {
      throw std::invalid_argument("config: network.predictor must be mlp or gru");
    }
  } else if (key == "network.predictor_inputs") {
    PredictorInputsMask mask;
    if (value != "all") {
      mask = PredictorInputsMask{false, false, false, false};
      for (const std::string& part : detail::split_csv(value)) {
        if (part == "de") mask.de = true;
        else if (part == "p") mask.p = true;
        else if (part == "f_dense") mask.f_dense = true;
        else if (part == "f_enc") mask.f_enc = true;
        else throw std::invalid_argument("config: unknown predictor input '" + part + "'");
      }
    }
    cfg.network.predictor_inputs = mask;
  } else if (key == "network.refinement") {
    if (value == "four_layer_full") {
      cfg.network.refinement_design = RefinementDesign::four_layer_full;
    } else if (value == "interp_2048") {
      cfg.network.refinement_design = RefinementDesign::interp_n1;
    } else if (value == "interp_8192") {
      cfg.network.refinement_design = RefinementDesign::interp_4n;
    } else {
      throw std::invalid_argument(
          "config: network.refinement must be four_layer_full, interp_2048, or interp_8192");
    }
  } else if (key == "embedding.similarity") {
    if (value == "concat") cfg.network.embedding.similarity_mode = SimilarityMode::concat;
    else if (value == "product") cfg.network.embedding.similarity_mode = SimilarityMode::product;
    else if (value == "cosine") cfg.network.embedding.similarity_mode = SimilarityMode::cosine;
    else if (value == "normalized_product")
      cfg.network.embedding.similarity_mode = SimilarityMode::normalized_product;
    else throw std::invalid_argument("config: unknown similarity mode '" + value + "'");
  } else if (key == "embedding.backward_validation") {
    cfg.network.embedding.backward_validation = parse_bool(key, value);
  } else if (key == "embedding.candidates") {
    if (value == "all_to_all") cfg.network.embedding.candidate_mode = CandidateMode::all_to_all;
    else if (value == "knn") cfg.network.embedding.candidate_mode = CandidateMode::knn;
    else throw std::invalid_argument("config: embedding.candidates must be all_to_all or knn");
  } else if (key == "embedding.knn_k") {
    cfg.network.embedding.knn_k = parse_int(key, value);
  } else if (key == "loss.psi") {
    auto psi = detail::split_csv(value);
    if (psi.size() != 4) throw std::invalid_argument("config: loss.psi expects 4 values");
    for (int i = 0; i < 4; ++i) cfg.loss.psi[i] = parse_double(key, psi[i]);
  } else if (key == "loss.mask_mode") {
    if (value == "none") cfg.loss.mask_mode = MaskMode::none;
    else if (value == "exclude_invalid") cfg.loss.mask_mode = MaskMode::exclude_invalid;
    else throw std::invalid_argument("config: loss.mask_mode must be none or exclude_invalid");
  } else if (key == "train.lr0") {
    cfg.train.lr0 = parse_double(key, value);
  } else if (key == "train.gamma") {
    cfg.train.gamma = parse_double(key, value);
  } else if (key == "train.decay_every") {
    cfg.train.decay_every = static_cast<int>(parse_int(key, value));
  } else if (key == "train.beta1") {
    cfg.train.beta1 = parse_double(key, value);
  } else if (key == "train.beta2") {
    cfg.train.beta2 = parse_double(key, value);
  } else if (key == "train.batch_size") {
    cfg.train.batch_size = static_cast<int>(parse_int(key, value));
  } else if (key == "train.epochs") {
    cfg.train.epochs = static_cast<int>(parse_int(key, value));
  } else if (key == "train.save_every") {
    cfg.train.save_every = static_cast<int>(parse_int(key, value));
  } else if (key == "gen.n_points") {
    cfg.gen.n_points = parse_int(key, value);
  } else if (key == "gen.n_objects") {
    cfg.gen.n_objects = static_cast<int>(parse_int(key, value));
  } else if (key == "gen.translation") {
    cfg.gen.translation_range = parse_double(key, value);
  } else if (key == "gen.rotation") {
    cfg.gen.rotation_range = parse_double(key, value);
  } else if (key == "gen.noise_sigma") {
    cfg.gen.noise_sigma = parse_double(key, value);
  } else if (key == "gen.occlusion") {
    cfg.gen.occlusion_fraction = parse_double(key, value);
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const size_t eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    if (eq == std::string::npos) {
      if (!trim(line).empty()) {
        throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                    " is not 'key = value'");
      }
      continue;
    }
    set_config_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

}  // namespace sflab
