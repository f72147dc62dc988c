#include "otfuse/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "otfuse/encoder_core.hpp"

namespace otfuse::harness {

const char *pattern_name(Pattern p) {
  switch (p) {
  case Pattern::Horizontal: return "horizontal";
  case Pattern::Vertical: return "vertical";
  case Pattern::Checkerboard: return "checkerboard";
  case Pattern::Diagonal: return "diagonal";
  case Pattern::Noise: return "noise";
  }
  return "?";
}

void SyntheticTask::validate() const {
  if (patch_side == 0 || image_side == 0 || image_side % patch_side != 0)
    throw Error(ErrorKind::InvalidArg,
                "image side must be a positive multiple of the patch side");
  if (num_classes != kNumPatterns)
    throw Error(ErrorKind::InvalidArg, "the synthetic task has 5 classes");
  if (!(noise_std >= 0.0f))
    throw Error(ErrorKind::InvalidArg, "noise_std must be >= 0");
}

Tensor render_pattern(const SyntheticTask &task, Pattern pattern,
                      const PatternParams &p, Rng *noise_pixels) {
  const std::size_t n = task.image_side;
  const std::size_t w = std::max<std::size_t>(p.stripe_width, 1);
  Tensor img({n, n});
  auto square = [&](std::size_t v) { return (v / w) % 2 == 0 ? 1.0f : -1.0f; };
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      float v = 0.0f;
      switch (pattern) {
      case Pattern::Horizontal:
        v = square(r + p.phase_r);
        break;
      case Pattern::Vertical:
        v = square(c + p.phase_c);
        break;
      case Pattern::Checkerboard:
        v = square(r + p.phase_r) * square(c + p.phase_c);
        break;
      case Pattern::Diagonal:
        v = p.anti_diagonal ? square(r + (n - 1 - c) + p.phase_r)
                            : square(r + c + p.phase_r);
        break;
      case Pattern::Noise:
        v = noise_pixels ? (noise_pixels->uniform() < 0.5 ? -1.0f : 1.0f) : 0.0f;
        break;
      }
      img(r, c) = v * p.amplitude * p.polarity;
    }
  return img;
}

Tensor patchify(const Tensor &image, std::size_t ps) {
  const std::size_t n = image.rows(), g = n / ps;
  Tensor out({g * g, ps * ps});
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc)
      for (std::size_t i = 0; i < ps; ++i)
        for (std::size_t j = 0; j < ps; ++j)
          out(pr * g + pc, i * ps + j) = image(pr * ps + i, pc * ps + j);
  return out;
}

Tensor Dataset::batch(std::size_t begin, std::size_t count) const {
  const std::size_t per = patches.dim(1) * patches.dim(2);
  std::vector<float> data(patches.values().begin() +
                              static_cast<std::ptrdiff_t>(begin * per),
                          patches.values().begin() +
                              static_cast<std::ptrdiff_t>((begin + count) * per));
  return Tensor({count, patches.dim(1), patches.dim(2)}, std::move(data));
}

Dataset gen_dataset(const SyntheticTask &task, std::size_t count,
                    std::size_t first_index) {
  task.validate();
  if (count % task.num_classes != 0)
    throw Error(ErrorKind::InvalidArg,
                "dataset size " + std::to_string(count) +
                    " is not divisible by the class count");
  const std::size_t g = task.grid_side(), pd = task.patch_dim();
  Dataset ds;
  ds.patches = Tensor({count, g * g, pd});
  ds.labels.resize(count);
  const Rng base(task.seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t index = first_index + i;
    const auto pattern = static_cast<Pattern>(index % task.num_classes);
    Rng rng = base.fork(index);
    PatternParams p;
    p.stripe_width = 1 + static_cast<std::size_t>(rng.below(3));
    p.phase_r = static_cast<std::size_t>(rng.below(6));
    p.phase_c = static_cast<std::size_t>(rng.below(6));
    p.anti_diagonal = rng.below(2) == 1;
    p.amplitude = static_cast<float>(0.6 + 0.4 * rng.uniform());
    p.polarity = rng.below(2) == 1 ? 1.0f : -1.0f;
    Tensor img = render_pattern(task, pattern, p, &rng);
    for (auto &v : img.data())
      v += static_cast<float>(task.noise_std * rng.normal());
    Tensor patches = patchify(img, task.patch_side);
    std::copy(patches.data().begin(), patches.data().end(),
              ds.patches.data().begin() +
                  static_cast<std::ptrdiff_t>(i * g * g * pd));
    ds.labels[i] = static_cast<std::size_t>(pattern);
  }
  return ds;
}

ArchConfig toy_arch(const SyntheticTask &task, std::size_t hidden_dim,
                    std::size_t num_layers, std::size_t num_heads) {
  ArchConfig a;
  a.hidden_dim = hidden_dim;
  a.intermediate_dim = 2 * hidden_dim;
  a.num_layers = num_layers;
  a.num_heads = num_heads;
  a.grid_side = task.grid_side();
  a.patch_dim = task.patch_dim();
  a.num_classes = task.num_classes;
  a.validate();
  return a;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0))
    throw Error(ErrorKind::InvalidArg, "learning rate must be > 0");
  if (batch_size == 0)
    throw Error(ErrorKind::InvalidArg, "batch size must be >= 1");
  if (weight_decay < 0.0)
    throw Error(ErrorKind::InvalidArg, "weight decay must be >= 0");
}

namespace {

TrainResult run_training(TransformerParams init, const ArchConfig &arch,
                         const Dataset &train_set, const TrainConfig &cfg,
                         const Dataset *eval_set) {
  cfg.validate();
  arch.validate();
  model::check_params(init, arch);
  const Dataset &report = eval_set ? *eval_set : train_set;

  TrainResult result;
  auto start = evaluate(init, arch, report, "epoch");
  start.epoch = 0;
  result.curve.push_back(start);
  if (cfg.epochs == 0 || train_set.size() == 0) {
    result.params = std::move(init);
    return result;
  }

  std::vector<float> P = model::flatten(init);
  std::vector<float> G(P.size()), m(P.size(), 0.0f), v(P.size(), 0.0f);
  model::EncoderCore<float> core(arch);
  model::ExampleCache<float> cache;
  std::vector<float> dlogits(arch.num_classes);
  const std::size_t per = arch.num_patches() * arch.patch_dim;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng = Rng(cfg.seed).fork(2);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(shuffle_rng, order);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const float weight = 1.0f / static_cast<float>(end - begin);
      std::fill(G.begin(), G.end(), 0.0f);
      double batch_loss = 0.0;
      for (std::size_t k = begin; k < end; ++k) {
        const std::size_t ex = order[k];
        core.forward(P.data(), train_set.patches.data().data() + ex * per, cache);
        batch_loss += model::cross_entropy(cache.logits.data(), arch.num_classes,
                                           train_set.labels[ex], weight,
                                           dlogits.data());
        core.backward(P.data(), cache, dlogits.data(), G.data());
      }
      if (!std::isfinite(batch_loss))
        throw Error(ErrorKind::Numeric,
                    "training diverged (loss is not finite) at epoch " +
                        std::to_string(epoch));
      ++step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      const float lr = static_cast<float>(cfg.learning_rate);
      const float b1 = static_cast<float>(cfg.beta1),
                  b2 = static_cast<float>(cfg.beta2);
      const float wd = static_cast<float>(cfg.weight_decay);
      const float eps = static_cast<float>(cfg.adam_eps);
      for (std::size_t i = 0; i < P.size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * G[i];
        v[i] = b2 * v[i] + (1.0f - b2) * G[i] * G[i];
        const float mhat = m[i] / static_cast<float>(bc1);
        const float vhat = v[i] / static_cast<float>(bc2);
        P[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * P[i]);
      }
    }
    auto params = model::unflatten(arch, P);
    auto row = evaluate(params, arch, report, "epoch");
    row.epoch = epoch;
    if (!std::isfinite(row.loss))
      throw Error(ErrorKind::Numeric, "training diverged (non-finite loss)");
    result.curve.push_back(row);
  }
  result.params = model::unflatten(arch, P);
  return result;
}

} // namespace

TrainResult train_model(const ArchConfig &arch, const Dataset &train_set,
                        const TrainConfig &cfg, const Dataset *eval_set) {
  Rng init_rng = Rng(cfg.seed).fork(1);
  return run_training(model::init_params(arch, init_rng), arch, train_set, cfg,
                      eval_set);
}

TrainResult finetune(const TransformerParams &params, const ArchConfig &arch,
                     const Dataset &train_set, const TrainConfig &cfg,
                     const Dataset *eval_set) {
  return run_training(params, arch, train_set, cfg, eval_set);
}

MetricsRow score_logits(const Tensor &logits,
                        const std::vector<std::size_t> &labels,
                        const std::string &label) {
  MetricsRow row;
  row.label = label;
  const std::size_t B = labels.size(), C = logits.cols();
  if (B == 0)
    return row;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    auto r = logits.row(b);
    const std::size_t pred =
        static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    if (pred == labels[b])
      ++correct;
    double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      s += std::exp(r[c] - mx);
    loss += mx + std::log(s) - r[labels[b]];
  }
  row.accuracy = static_cast<double>(correct) / static_cast<double>(B);
  row.loss = loss / static_cast<double>(B);
  return row;
}

MetricsRow evaluate(const TransformerParams &params, const ArchConfig &arch,
                    const Dataset &data, const std::string &label) {
  if (data.size() == 0)
    return MetricsRow{label, std::nullopt, 0.0, 0.0, 0};
  auto logits = model::forward(params, arch, data.patches).logits;
  return score_logits(logits, data.labels, label);
}

double dataset_loss(const ArchConfig &arch, const std::vector<double> &flat,
                    const Dataset &data) {
  model::EncoderCore<double> core(arch);
  model::ExampleCache<double> cache;
  std::vector<double> patches(arch.num_patches() * arch.patch_dim),
      dlogits(arch.num_classes);
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t k = 0; k < patches.size(); ++k)
      patches[k] = data.patches[i * patches.size() + k];
    core.forward(flat.data(), patches.data(), cache);
    loss += model::cross_entropy(cache.logits.data(), arch.num_classes,
                                 data.labels[i], 1.0, dlogits.data());
  }
  return loss / static_cast<double>(data.size());
}

std::vector<double> dataset_grad(const ArchConfig &arch,
                                 const std::vector<double> &flat,
                                 const Dataset &data) {
  model::EncoderCore<double> core(arch);
  model::ExampleCache<double> cache;
  std::vector<double> patches(arch.num_patches() * arch.patch_dim),
      dlogits(arch.num_classes), grad(flat.size(), 0.0);
  const double weight = 1.0 / static_cast<double>(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t k = 0; k < patches.size(); ++k)
      patches[k] = data.patches[i * patches.size() + k];
    core.forward(flat.data(), patches.data(), cache);
    model::cross_entropy(cache.logits.data(), arch.num_classes, data.labels[i],
                         weight, dlogits.data());
    core.backward(flat.data(), cache, dlogits.data(), grad.data());
  }
  return grad;
}

GradCheckReport gradient_check(const ArchConfig &arch,
                               const std::vector<double> &flat,
                               const Dataset &data, std::size_t coords,
                               double h, Rng &rng) {
  const auto grad = dataset_grad(arch, flat, data);
  GradCheckReport rep;
  std::vector<double> probe = flat;
  for (std::size_t n = 0; n < coords; ++n) {
    const std::size_t i = static_cast<std::size_t>(rng.below(flat.size()));
    probe[i] = flat[i] + h;
    const double up = dataset_loss(arch, probe, data);
    probe[i] = flat[i] - h;
    const double down = dataset_loss(arch, probe, data);
    probe[i] = flat[i];
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
    const double rel = std::abs(numeric - grad[i]) / denom;
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    rep.mean_rel_error += rel;
    ++rep.coords;
  }
  if (rep.coords)
    rep.mean_rel_error /= static_cast<double>(rep.coords);
  return rep;
}

std::vector<MetricsRow> sweep_regularizer(const std::vector<fusion::Model> &models,
                                          const fusion::FusionConfig &config,
                                          const std::vector<double> &lambda_grid,
                                          const Dataset &test_set) {
  if (lambda_grid.empty())
    throw Error(ErrorKind::InvalidArg, "lambda grid is empty");
  if (models.empty())
    throw Error(ErrorKind::InvalidArg, "sweep needs models");
  const auto &anchor_arch = models.at(config.anchor_index).arch;
  const std::string mode = fusion::mode_name(config.mode);
  std::vector<MetricsRow> rows;
  for (double lambda : lambda_grid) {
    auto cfg = config;
    cfg.solver = fusion::SolverKind::Sinkhorn;
    cfg.lambda = lambda;
    auto fused = fusion::fuse_models(models, cfg);
    auto row = evaluate(fused, anchor_arch, test_set, "ot-" + mode);
    row.lambda = lambda;
    rows.push_back(row);
  }
  {
    auto cfg = config;
    cfg.solver = fusion::SolverKind::Emd;
    cfg.tie_qk = true;
    auto fused = fusion::fuse_models(models, cfg);
    auto row = evaluate(fused, anchor_arch, test_set, "emd-" + mode);
    row.lambda = 0.0;
    rows.push_back(row);
  }
  rows.push_back(evaluate(fusion::vanilla_fuse(models), anchor_arch, test_set, "vf"));
  return rows;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

} // namespace

std::string metrics_csv(const std::vector<MetricsRow> &rows) {
  std::string out = "label,lambda,accuracy,loss\n";
  for (const auto &r : rows) {
    out += r.label + ',';
    if (r.lambda)
      out += fmt_double(*r.lambda);
    out += ',' + fmt_double(r.accuracy) + ',' + fmt_double(r.loss) + '\n';
  }
  return out;
}

std::string curve_jsonl(const std::vector<MetricsRow> &rows) {
  std::string out;
  for (const auto &r : rows) {
    nlohmann::json j{{"label", r.label},
                     {"epoch", r.epoch},
                     {"accuracy", r.accuracy},
                     {"loss", r.loss}};
    out += j.dump() + '\n';
  }
  return out;
}

} // namespace otfuse::harness
