#pragma once

#include <filesystem>
#include <fstream>
#include <functional>

#include "sflab/network.hpp"
#include "sflab/pair_io.hpp"

namespace sflab {

enum class MaskMode { none, exclude_invalid };

struct LossConfig {
  std::array<double, 4> psi{0.02, 0.04, 0.08, 0.16};  // finest..coarsest weights
  MaskMode mask_mode = MaskMode::exclude_invalid;

  void validate() const {
    for (double p : psi) {
      if (!(p > 0)) throw std::invalid_argument("LossConfig: level weights must be positive");
    }
  }
};

struct TrainConfig {
  double lr0 = 0.001;
  double gamma = 0.5;     // decay factor
  int decay_every = 80;   // epochs per decay step
  double beta1 = 0.9;
  double beta2 = 0.99;
  int batch_size = 2;
  int epochs = 300;
  int save_every = 0;  // 0 = final checkpoint only
  uint64_t seed = 1;

  void validate() const {
    if (!(lr0 > 0)) throw std::invalid_argument("TrainConfig: lr0 must be positive");
    if (!(gamma > 0) || gamma > 1) throw std::invalid_argument("TrainConfig: gamma in (0,1]");
    if (decay_every < 1 || batch_size < 1 || epochs < 0) {
      throw std::invalid_argument("TrainConfig: bad schedule");
    }
  }
};

inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  return cfg.lr0 * std::pow(cfg.gamma, static_cast<double>(epoch / cfg.decay_every));
}

// Ground truth and masks for each pyramid level, inherited by index: a sampled
// point keeps the ground-truth vector and validity of its source row.
struct LevelTargets {
  std::array<std::vector<double>, 4> gt;      // finest..coarsest, n_l x 3
  std::array<std::vector<uint8_t>, 4> mask;
};

inline LevelTargets inherit_targets(const FlowPyramid& pyramid, const ScenePair& pair) {
  LevelTargets t;
  for (int l = 0; l < 4; ++l) {
    const auto& idx = pyramid.levels[l].input_indices;
    t.gt[l].resize(idx.size() * 3);
    t.mask[l].resize(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
      for (int c = 0; c < 3; ++c) t.gt[l][i * 3 + c] = pair.gt_flow[idx[i] * 3 + c];
      t.mask[l][i] = pair.mask.empty() ? 1 : pair.mask[idx[i]];
    }
  }
  return t;
}

// Sum over levels of psi_l * mean over supervised points of |pred - gt|_2.
// With exclude_invalid, masked-out points leave both the sum and the count;
// a level with no valid points contributes zero.
inline DiffArray multiscale_loss(const FlowPyramid& pyramid, const LevelTargets& targets,
                                 const LossConfig& cfg) {
  cfg.validate();
  DiffArray total = DiffArray::scalar(0.0);
  for (int l = 0; l < 4; ++l) {
    const DiffArray& pred = pyramid.levels[l].flow;
    const int64_t n = pred.extent(0);
    if (static_cast<int64_t>(targets.gt[l].size()) != n * 3) {
      throw std::invalid_argument("multiscale_loss: level " + std::to_string(l + 1) + " has " +
                                  std::to_string(n) + " points but " +
                                  std::to_string(targets.gt[l].size() / 3) + " targets");
    }
    DiffArray gt = DiffArray::leaf({n, 3}, targets.gt[l]);
    DiffArray errors = norm_last(sub(pred, gt));  // n x 1

    int64_t n_valid = n;
    if (cfg.mask_mode == MaskMode::exclude_invalid) {
      std::vector<double> m(n, 1.0);
      n_valid = 0;
      for (int64_t i = 0; i < n; ++i) {
        m[i] = targets.mask[l][i] ? 1.0 : 0.0;
        n_valid += targets.mask[l][i] ? 1 : 0;
      }
      if (n_valid == 0) {
        // Empty-sum convention: the level contributes zero, including a zero
        // gradient into its predictions.
        total = add(total, scale(sum_all(errors), 0.0));
        continue;
      }
      if (n_valid < n) errors = mul(errors, DiffArray::leaf({n, 1}, std::move(m)));
    }
    total = add(total, scale(sum_all(errors), cfg.psi[l] / static_cast<double>(n_valid)));
  }
  return total;
}

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  std::array<double, 4> level_epe{};  // valid-masked mean error per level
};

struct TrainResult {
  std::vector<EpochStats> log;
  std::string final_checkpoint;
};

inline void write_loss_log(const std::string& path, const std::vector<EpochStats>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "epoch,lr,mean_loss,epe_l1,epe_l2,epe_l3,epe_l4\n";
  char line[256];
  for (const EpochStats& s : log) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", s.epoch, s.lr,
                  s.mean_loss, s.level_epe[0], s.level_epe[1], s.level_epe[2], s.level_epe[3]);
    out << line;
  }
}

// Deterministic training: seeded shuffling, sequential batches, one Adam step
// per batch on the mean of the per-sample losses.  Aborts on a non-finite
// loss naming the epoch and batch.
inline TrainResult train(Model& model, const std::vector<ScenePair>& pairs,
                         const TrainConfig& tcfg, const LossConfig& lcfg,
                         const std::string& out_dir,
                         const std::function<void(const EpochStats&)>& on_epoch = {}) {
  tcfg.validate();
  lcfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train: empty dataset");
  for (const ScenePair& p : pairs) {
    if (p.n1() != model.cfg.n_input || p.n2() != model.cfg.n_input) {
      throw std::invalid_argument("train: pair size does not match the network input");
    }
  }
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  TrainResult result;
  Rng shuffle_rng(tcfg.seed);
  std::vector<size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, tcfg);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::array<double, 4> epe_sum{};
    std::array<int64_t, 4> epe_count{};
    int64_t batches = 0;

    for (size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const size_t stop = std::min(order.size(), start + tcfg.batch_size);
      model.store.zero_grad();
      DiffArray batch_loss = DiffArray::scalar(0.0);
      for (size_t s = start; s < stop; ++s) {
        const ScenePair& pair = pairs[order[s]];
        PointCloud pc1 = cloud_from_coords(pair.pc1);
        PointCloud pc2 = cloud_from_coords(pair.pc2);
        FlowPyramid pyramid = forward(model, pc1, pc2);
        LevelTargets targets = inherit_targets(pyramid, pair);
        batch_loss = add(batch_loss, multiscale_loss(pyramid, targets, lcfg));

        for (int l = 0; l < 4; ++l) {
          auto flow = pyramid.levels[l].flow.values();
          for (size_t i = 0; i < targets.mask[l].size(); ++i) {
            if (!targets.mask[l][i]) continue;
            double acc = 0.0;
            for (int c = 0; c < 3; ++c) {
              const double d = flow[i * 3 + c] - targets.gt[l][i * 3 + c];
              acc += d * d;
            }
            epe_sum[l] += std::sqrt(acc);
            epe_count[l] += 1;
          }
        }
      }
      batch_loss = scale(batch_loss, 1.0 / static_cast<double>(stop - start));
      const double loss_value = batch_loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batches));
      }
      backprop(batch_loss);
      model.store.adam_step(lr, tcfg.beta1, tcfg.beta2);
      loss_sum += loss_value;
      ++batches;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.mean_loss = loss_sum / static_cast<double>(batches);
    for (int l = 0; l < 4; ++l) {
      stats.level_epe[l] = epe_count[l] ? epe_sum[l] / static_cast<double>(epe_count[l]) : 0.0;
    }
    result.log.push_back(stats);
    if (on_epoch) on_epoch(stats);

    if (!out_dir.empty() && tcfg.save_every > 0 && (epoch + 1) % tcfg.save_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch%04d.ckpt", epoch + 1);
      model.store.save((fs::path(out_dir) / name).string());
    }
  }

  if (!out_dir.empty()) {
    result.final_checkpoint = (fs::path(out_dir) / "checkpoint_final.ckpt").string();
    model.store.save(result.final_checkpoint);
    write_loss_log((fs::path(out_dir) / "loss_log.csv").string(), result.log);
  }
  return result;
}

}  // namespace sflab
