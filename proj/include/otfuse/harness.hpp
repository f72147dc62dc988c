#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "otfuse/fusion.hpp"
#include "otfuse/model.hpp"

namespace otfuse::harness {

using model::ArchConfig;
using model::TransformerParams;

enum class Pattern : std::size_t {
  Horizontal = 0,
  Vertical = 1,
  Checkerboard = 2,
  Diagonal = 3,
  Noise = 4,
};

inline constexpr std::size_t kNumPatterns = 5;
const char *pattern_name(Pattern p);

// Procedural image classification. Example i of a split has label
// (first_index + i) mod 5 and is a pure function of (seed, index).
struct SyntheticTask {
  std::size_t image_side = 12;
  std::size_t patch_side = 4;
  std::size_t num_classes = kNumPatterns;
  float noise_std = 0.5f;
  std::uint64_t seed = 0;

  std::size_t grid_side() const { return image_side / patch_side; }
  std::size_t patch_dim() const { return patch_side * patch_side; }
  void validate() const;
};

// Shape-only parameters drawn per example; exposed so tests can render
// noise-free images from the definition.
struct PatternParams {
  std::size_t stripe_width = 1;
  std::size_t phase_r = 0, phase_c = 0;
  bool anti_diagonal = false;
  float amplitude = 1.0f;
  float polarity = 1.0f;
};

// image_side x image_side image without additive noise.
Tensor render_pattern(const SyntheticTask &task, Pattern pattern,
                      const PatternParams &params, Rng *noise_pixels = nullptr);

// Splits an image into row-major patches: grid^2 x patch_side^2.
Tensor patchify(const Tensor &image, std::size_t patch_side);

struct Dataset {
  Tensor patches; // count x grid^2 x patch_dim
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  // Rows [begin, begin + count) as a batch tensor.
  Tensor batch(std::size_t begin, std::size_t count) const;
};

Dataset gen_dataset(const SyntheticTask &task, std::size_t count,
                    std::size_t first_index = 0);

// Arch matching the task's patch layout with the toy defaults.
ArchConfig toy_arch(const SyntheticTask &task, std::size_t hidden_dim = 32,
                    std::size_t num_layers = 2, std::size_t num_heads = 4);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct MetricsRow {
  std::string label;
  std::optional<double> lambda;
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t epoch = 0;
};

struct TrainResult {
  TransformerParams params;
  std::vector<MetricsRow> curve; // one row per epoch (epoch 0 = start)
};

// Initializes from train_cfg.seed and trains with Adam + decoupled weight
// decay. When `eval_set` is given the curve reports its accuracy/loss,
// otherwise the training-set ones.
TrainResult train_model(const ArchConfig &arch, const Dataset &train_set,
                        const TrainConfig &cfg,
                        const Dataset *eval_set = nullptr);

TrainResult finetune(const TransformerParams &params, const ArchConfig &arch,
                     const Dataset &train_set, const TrainConfig &cfg,
                     const Dataset *eval_set = nullptr);

MetricsRow evaluate(const TransformerParams &params, const ArchConfig &arch,
                    const Dataset &data, const std::string &label = "eval");

// Accuracy/mean cross-entropy of precomputed logits (B x C).
MetricsRow score_logits(const Tensor &logits,
                        const std::vector<std::size_t> &labels,
                        const std::string &label);

// Mean cross-entropy of a flat double parameter vector on a dataset.
double dataset_loss(const ArchConfig &arch, const std::vector<double> &flat,
                    const Dataset &data);
// Analytic gradient of dataset_loss.
std::vector<double> dataset_grad(const ArchConfig &arch,
                                 const std::vector<double> &flat,
                                 const Dataset &data);

struct GradCheckReport {
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
};

// Central differences with step h on `coords` random coordinates.
GradCheckReport gradient_check(const ArchConfig &arch,
                               const std::vector<double> &flat,
                               const Dataset &data, std::size_t coords,
                               double h, Rng &rng);

// One-shot accuracy per lambda (Sinkhorn) plus "emd" and "vf" reference
// rows, in that order.
std::vector<MetricsRow> sweep_regularizer(const std::vector<fusion::Model> &models,
                                          const fusion::FusionConfig &config,
                                          const std::vector<double> &lambda_grid,
                                          const Dataset &test_set);

// CSV with header label,lambda,accuracy,loss.
std::string metrics_csv(const std::vector<MetricsRow> &rows);
// One JSON object per line.
std::string curve_jsonl(const std::vector<MetricsRow> &rows);

} // namespace otfuse::harness
