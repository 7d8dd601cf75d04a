#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kd/data.hpp"
#include "kd/losses.hpp"
#include "kd/model.hpp"

namespace kd {

enum class WeightingMode { kAsWritten, kInverse };

struct TrainConfig {
  double lr_max = 0.01;
  double lr_min = 1e-6;
  int cyclic_step_size = 2000;
  int epochs = 100;
  int batch_size = 8;
  int seed = 0;
  LossWeights loss_weights;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  WeightingMode weighting_mode = WeightingMode::kAsWritten;
  std::pair<int, int> input_hw = {384, 384};
  Normalization normalization = Normalization::kMinMax;
  // Explicit (student tap, teacher tap) pairs; empty selects nearest-depth pairing.
  std::vector<std::pair<std::string, std::string>> pairing;

  void validate() const;
};

struct StepRecord {
  int step = 0;
  double seg = 0, mid = 0, kl = 0, total = 0, lr = 0;
  std::vector<double> teacher_dice;     // per-teacher soft dice loss vs target
  std::vector<double> teacher_weights;  // adaptive weights, sum to 1
};

struct EpochRecord {
  int epoch = 0;
  double seg = 0, mid = 0, kl = 0, total = 0;
  double val_dice = 0;
  double lr = 0;  // lr at the last step of the epoch
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  int best_epoch = 0;  // maximal validation dice
  double wall_time_s = 0;
};

struct TrainResult {
  std::string checkpoint_path;
  RunHistory history;
};

// Triangular cycle: lr(0)=lr_min, lr(step_size)=lr_max, lr(2*step_size)=lr_min.
double cyclic_lr(int step, const TrainConfig& cfg);

// Plain Adam with bias correction.
class Adam {
 public:
  Adam(std::vector<Var> params, double beta1, double beta2, double eps);
  void zero_grad();
  void step(double lr);

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// Plain supervised training on the segmentation loss only.
TrainResult train_teacher(const ModelPtr& model, const Manifest& train, const Manifest& val,
                          const TrainConfig& cfg, const std::string& run_dir);

// Mono-teacher distillation: seg + alpha*mid + beta*kl per step.
TrainResult distill_mono(const ModelPtr& student, const std::string& teacher_ckpt,
                         const Manifest& train, const Manifest& val, const TrainConfig& cfg,
                         const std::string& run_dir);

// Multi-teacher adaptive distillation: per-batch weights from teacher dice
// losses, KL against the weighted soft target, weighted mid loss.
TrainResult distill_multi(const ModelPtr& student, const std::vector<std::string>& teacher_ckpts,
                          const Manifest& train, const Manifest& val, const TrainConfig& cfg,
                          const std::string& run_dir);

void write_history_csv(const RunHistory& h, const std::string& path);
void write_steps_csv(const RunHistory& h, const std::string& path);

}  // namespace kd
