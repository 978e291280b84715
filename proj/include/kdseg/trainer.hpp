#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "kdseg/data.hpp"
#include "kdseg/losses.hpp"
#include "kdseg/metrics.hpp"
#include "kdseg/models.hpp"

namespace kdseg {

struct TrainConfig {
  double mu0 = 1e-2;
  double gamma = 5e-4;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::size_t eta = 1000;
  Temperature temperature{1.0};
  LossWeights loss_weights;
  std::uint64_t seed = 0;
  InitPolicy init;
  /// Evaluate every eval_interval steps; 0 evaluates only after the last step.
  std::size_t eval_interval = 0;
  /// Square training crop; 0 uses the dataset's crop_size.
  std::size_t crop_size = 0;
  double scale_min = 0.5;
  double scale_max = 2.0;
  double flip_prob = 0.5;
  /// Pooling factor of the pairwise term.
  std::size_t pool_factor = 2;
  /// Critic steps per student step, and the critic's learning rate.
  std::size_t update_ratio = 1;
  double critic_lr = 1e-4;
  /// Feature taps for the pairwise and IFV terms; empty uses the model default.
  std::string student_tap;
  std::string teacher_tap;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// mu0 * (1 - i/eta)^0.9 for 0 <= i <= eta; RangeError otherwise.
double poly_lr(double mu0, std::size_t i, std::size_t eta);

struct StepRecord {
  std::size_t step = 0;
  double learning_rate = 0.0;
  CompositeLossReport losses;
  std::optional<double> critic_loss;
};

struct EvalRecord {
  std::size_t step = 0;
  double miou = 0.0;
};

struct RunRecord {
  nlohmann::json config;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  double final_miou = 0.0;
  double best_miou = 0.0;
  std::size_t best_step = 0;
  double seconds = 0.0;
};

struct EvalResult {
  double miou = 0.0;
  ConfusionMatrix confusion;
};

/// Where and how train() reports progress. All fields optional.
struct TrainOutputs {
  /// Receives steps.jsonl, summary.json, final.ckpt and best.ckpt.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

/// Trains `student` on the "train" split and evaluates on "val". A teacher,
/// when given, is only read; it may be attached with all distillation weights
/// zero, in which case it has no effect on the student. Throws
/// DivergenceError naming the first non-finite loss term.
RunRecord train(SegmentationModel& student, SegmentationModel* teacher, const TrainConfig& cfg,
                const DatasetSpec& data, const TrainOutputs& outputs = {});

/// Whole-image inference over a split; one global confusion matrix.
EvalResult evaluate(SegmentationModel& model, const DatasetSpec& data, const std::string& split = "val");
EvalResult evaluate(SegmentationModel& model, const CachedSplit& split);

/// Normalizes a raw (1,3,H,W) image, zero-pads it to the model's input
/// multiple, runs the model and crops the logits back to (H,W).
LogitMap predict(SegmentationModel& model, const DatasetSpec& data, const Tensorf& raw_images);

}  // namespace kdseg
