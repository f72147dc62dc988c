// otfuse: train, fuse, evaluate and inspect toy encoder transformers.
//
// Every command is a pure function of its flags, config file and input
// files, so reruns produce byte-identical outputs.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "otfuse/checkpoint.hpp"
#include "otfuse/error.hpp"
#include "otfuse/flowgraph.hpp"
#include "otfuse/fusion.hpp"
#include "otfuse/harness.hpp"
#include "otfuse/model.hpp"

using namespace otfuse;
using nlohmann::json;

namespace {

struct RunConfig {
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  float noise_std = 0.5f;
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::size_t sample_size = 200;
  std::size_t width = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  harness::TrainConfig train;
  fusion::FusionConfig fusion = fusion::FusionConfig::defaults(fusion::AlignMode::Weights);
  bool vanilla = false;
  std::vector<double> lambdas{0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.15, 0.2};
  std::vector<std::string> checkpoints;
  std::string out;
  std::string metrics;
};

// Raw flag values; empty optionals leave the config untouched.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed, data_seed;
  std::optional<std::size_t> anchor, epochs, width, layers, heads, train_size,
      test_size, sample_size, batch_size;
  std::optional<double> lambda, lr, noise;
  std::optional<std::string> mode, solver, residual, filter, tie_qk;
  std::optional<std::vector<double>> lambdas;
};

std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error(ErrorKind::Io, "cannot write '" + path + "'");
  out << text;
  if (!out)
    throw Error(ErrorKind::Io, "write failed for '" + path + "'");
}

template <typename T> void take(const json &j, const char *key, T &dst) {
  if (j.contains(key))
    dst = j.at(key).get<T>();
}

void apply_json(RunConfig &rc, const json &j) {
  try {
    take(j, "seed", rc.seed);
    take(j, "sample_size", rc.sample_size);
    if (j.contains("task")) {
      const auto &t = j["task"];
      take(t, "seed", rc.data_seed);
      take(t, "noise_std", rc.noise_std);
      take(t, "train_size", rc.train_size);
      take(t, "test_size", rc.test_size);
    }
    if (j.contains("arch")) {
      const auto &a = j["arch"];
      take(a, "hidden_dim", rc.width);
      take(a, "num_layers", rc.layers);
      take(a, "num_heads", rc.heads);
    }
    if (j.contains("train")) {
      const auto &t = j["train"];
      take(t, "epochs", rc.train.epochs);
      take(t, "batch_size", rc.train.batch_size);
      take(t, "learning_rate", rc.train.learning_rate);
      take(t, "weight_decay", rc.train.weight_decay);
    }
    if (j.contains("fusion")) {
      const auto &f = j["fusion"];
      if (f.contains("mode") && f["mode"].get<std::string>() == "vanilla") {
        rc.vanilla = true;
        json rest = f;
        rest.erase("mode");
        rc.fusion = fusion::config_from_json(rest, rc.fusion);
      } else {
        if (f.contains("mode"))
          rc.fusion = fusion::FusionConfig::defaults(
              fusion::parse_mode(f["mode"].get<std::string>()));
        rc.fusion = fusion::config_from_json(f, rc.fusion);
      }
    }
    take(j, "lambdas", rc.lambdas);
  } catch (const json::exception &e) {
    throw Error(ErrorKind::Config, std::string("config: ") + e.what());
  }
}

RunConfig resolve(const Flags &f) {
  RunConfig rc;
  if (!f.config.empty()) {
    json j;
    try {
      j = json::parse(read_file(f.config));
    } catch (const json::parse_error &e) {
      throw Error(ErrorKind::Config,
                  "config '" + f.config + "' is not valid JSON: " + e.what());
    }
    apply_json(rc, j);
  }
  if (f.seed)
    rc.seed = *f.seed;
  if (f.data_seed)
    rc.data_seed = *f.data_seed;
  if (f.noise)
    rc.noise_std = static_cast<float>(*f.noise);
  if (f.train_size)
    rc.train_size = *f.train_size;
  if (f.test_size)
    rc.test_size = *f.test_size;
  if (f.sample_size)
    rc.sample_size = *f.sample_size;
  if (f.width)
    rc.width = *f.width;
  if (f.layers)
    rc.layers = *f.layers;
  if (f.heads)
    rc.heads = *f.heads;
  if (f.epochs)
    rc.train.epochs = *f.epochs;
  if (f.batch_size)
    rc.train.batch_size = *f.batch_size;
  if (f.lr)
    rc.train.learning_rate = *f.lr;
  if (f.mode) {
    rc.vanilla = *f.mode == "vanilla";
    if (!rc.vanilla) {
      const auto m = fusion::parse_mode(*f.mode);
      if (m != rc.fusion.mode) {
        auto keep = rc.fusion;
        rc.fusion = fusion::FusionConfig::defaults(m);
        rc.fusion.anchor_index = keep.anchor_index;
      }
    }
  }
  if (f.solver)
    rc.fusion.solver = fusion::parse_solver(*f.solver);
  if (f.lambda)
    rc.fusion.lambda = *f.lambda;
  if (f.residual)
    rc.fusion.residual_policy = flow::parse_policy(*f.residual);
  if (f.filter)
    rc.fusion.filter = fusion::SequenceFilter::parse(*f.filter);
  if (f.tie_qk)
    rc.fusion.tie_qk = *f.tie_qk == "on";
  if (f.anchor)
    rc.fusion.anchor_index = *f.anchor;
  if (f.lambdas)
    rc.lambdas = *f.lambdas;
  rc.train.seed = rc.seed;
  return rc;
}

harness::SyntheticTask task_of(const RunConfig &rc) {
  harness::SyntheticTask t;
  t.seed = rc.data_seed;
  t.noise_std = rc.noise_std;
  t.validate();
  return t;
}

// Test examples start far beyond any training index.
constexpr std::size_t kTestOffset = 1u << 30;

harness::Dataset train_set(const RunConfig &rc) {
  return harness::gen_dataset(task_of(rc), rc.train_size, 0);
}

harness::Dataset test_set(const RunConfig &rc) {
  return harness::gen_dataset(task_of(rc), rc.test_size, kTestOffset);
}

// Prints to stdout and mirrors into the metrics file when one is given.
void emit(const RunConfig &rc, const std::string &text) {
  std::cout << text;
  std::cout.flush();
  if (!rc.metrics.empty())
    write_file(rc.metrics, text);
}

std::vector<fusion::Model> load_models(const RunConfig &rc) {
  if (rc.checkpoints.size() < 2)
    throw Error(ErrorKind::InvalidArg, "need at least two checkpoints");
  std::vector<fusion::Model> models;
  for (const auto &path : rc.checkpoints) {
    auto [params, arch] = model::load_checkpoint(path);
    models.push_back({std::move(params), arch});
  }
  return models;
}

void prepare_fusion(RunConfig &rc, const fusion::FusionConfig &base) {
  rc.fusion = base;
  if (rc.sample_size > 0) {
    auto train = train_set(rc);
    const std::size_t n = std::min(rc.sample_size, train.size());
    rc.fusion.sample_batch = train.batch(0, n);
  }
  rc.fusion.validate();
}

int cmd_train(RunConfig rc) {
  if (rc.out.empty())
    throw Error(ErrorKind::InvalidArg, "train needs --out");
  auto task = task_of(rc);
  auto arch = harness::toy_arch(task, rc.width, rc.layers, rc.heads);
  auto train = train_set(rc), test = test_set(rc);
  auto result = harness::train_model(arch, train, rc.train, &test);
  model::save_checkpoint(result.params, arch, rc.out);
  for (auto &row : result.curve)
    row.label = "train";
  emit(rc, harness::curve_jsonl(result.curve));
  return 0;
}

int cmd_eval(RunConfig rc) {
  if (rc.checkpoints.size() != 1)
    throw Error(ErrorKind::InvalidArg, "eval takes exactly one checkpoint");
  auto [params, arch] = model::load_checkpoint(rc.checkpoints[0]);
  auto row = harness::evaluate(params, arch, test_set(rc), "eval");
  emit(rc, harness::metrics_csv({row}));
  return 0;
}

int cmd_fuse(RunConfig rc) {
  auto models = load_models(rc);
  const auto test = test_set(rc);
  std::vector<harness::MetricsRow> rows;
  for (std::size_t i = 0; i < models.size(); ++i)
    rows.push_back(harness::evaluate(models[i].params, models[i].arch, test,
                                     "parent" + std::to_string(i)));
  model::TransformerParams fused;
  model::ArchConfig fused_arch;
  if (rc.vanilla) {
    fused = fusion::vanilla_fuse(models);
    fused_arch = models[0].arch;
    rows.push_back(harness::evaluate(fused, fused_arch, test, "vf"));
  } else {
    prepare_fusion(rc, rc.fusion);
    if (rc.fusion.anchor_index >= models.size())
      throw Error(ErrorKind::InvalidArg, "anchor index out of range");
    fused_arch = models[rc.fusion.anchor_index].arch;
    bool homogeneous = true;
    for (const auto &m : models)
      homogeneous = homogeneous && m.arch == fused_arch;
    if (homogeneous)
      rows.push_back(harness::evaluate(fusion::vanilla_fuse(models), fused_arch,
                                       test, "vf"));
    std::size_t unconverged = 0;
    fused = fusion::fuse_models(models, rc.fusion, &unconverged);
    if (unconverged)
      std::cerr << "warning: " << unconverged
                << " Sinkhorn solve(s) stopped at max_iter before reaching tol\n";
    auto row = harness::evaluate(fused, fused_arch, test,
                                 std::string("ot-") +
                                     fusion::mode_name(rc.fusion.mode));
    row.lambda = rc.fusion.solver == fusion::SolverKind::Sinkhorn
                     ? rc.fusion.lambda
                     : 0.0;
    rows.push_back(row);
  }
  if (!rc.out.empty())
    model::save_checkpoint(fused, fused_arch, rc.out);
  emit(rc, harness::metrics_csv(rows));
  return 0;
}

int cmd_sweep(RunConfig rc) {
  auto models = load_models(rc);
  prepare_fusion(rc, rc.fusion);
  auto rows = harness::sweep_regularizer(models, rc.fusion, rc.lambdas, test_set(rc));
  emit(rc, harness::metrics_csv(rows));
  return 0;
}

int cmd_perm_test(RunConfig rc) {
  model::TransformerParams params;
  model::ArchConfig arch;
  if (rc.checkpoints.size() == 1) {
    std::tie(params, arch) = model::load_checkpoint(rc.checkpoints[0]);
  } else if (rc.checkpoints.empty()) {
    arch = harness::toy_arch(task_of(rc), rc.width, rc.layers, rc.heads);
    Rng init = Rng(rc.seed).fork(1);
    params = model::init_params(arch, init);
  } else {
    throw Error(ErrorKind::InvalidArg, "perm-test takes at most one checkpoint");
  }
  Rng perm_rng = Rng(rc.seed).fork(3);
  auto perms = model::random_site_permutations(arch, perm_rng);
  auto permuted = model::permute_model(params, arch, perms);

  auto cfg = fusion::FusionConfig::defaults(fusion::AlignMode::Weights);
  cfg.solver = fusion::SolverKind::Emd;
  cfg.tie_qk = true;
  auto fused = fusion::fuse_models({{params, arch}, {permuted, arch}}, cfg);

  double param_dev = 0.0;
  auto a = model::flatten(params), b = model::flatten(fused);
  for (std::size_t i = 0; i < a.size(); ++i)
    param_dev = std::max(param_dev, static_cast<double>(std::abs(a[i] - b[i])));
  Rng input_rng = Rng(rc.seed).fork(4);
  auto inputs = rand_normal(input_rng, {100, arch.num_patches(), arch.patch_dim});
  auto la = model::forward(params, arch, inputs).logits;
  auto lb = model::forward(fused, arch, inputs).logits;
  const double logit_dev = max_abs_diff(la, lb);

  char buf[256];
  std::snprintf(buf, sizeof buf,
                "metric,value\nmax_param_deviation,%.9g\nmax_logit_deviation,%.9g\n",
                param_dev, logit_dev);
  emit(rc, buf);
  return 0;
}

int cmd_dump_graph(RunConfig rc) {
  std::string dot;
  if (rc.checkpoints.empty()) {
    auto arch = harness::toy_arch(task_of(rc), rc.width, rc.layers, rc.heads);
    dot = flow::to_dot(flow::build_encoder_flow_graph(arch));
  } else if (rc.checkpoints.size() == 2) {
    auto models = load_models(rc);
    prepare_fusion(rc, rc.fusion);
    const auto &anchor = models[rc.fusion.anchor_index % 2];
    const auto &other = models[1 - rc.fusion.anchor_index % 2];
    auto res = fusion::align_model(anchor.params, anchor.arch, other.params,
                                   other.arch, rc.fusion);
    dot = flow::to_dot(flow::build_encoder_flow_graph(anchor.arch),
                       &res.edge_maps);
  } else {
    throw Error(ErrorKind::InvalidArg,
                "dump-graph takes no checkpoints or exactly two");
  }
  if (rc.out.empty())
    std::cout << dot;
  else
    write_file(rc.out, dot);
  return 0;
}

void add_common(CLI::App *cmd, Flags &f, RunConfig &rc) {
  cmd->add_option("--config", f.config, "JSON run config (flags override it)");
  cmd->add_option("--seed", f.seed, "global seed (init, data order, permutations)");
  cmd->add_option("--data-seed", f.data_seed, "synthetic dataset seed");
  cmd->add_option("--noise", f.noise, "pixel noise std of the synthetic task");
  cmd->add_option("--train-size", f.train_size, "training examples");
  cmd->add_option("--test-size", f.test_size, "test examples");
  cmd->add_option("--out", rc.out, "output path");
  cmd->add_option("--metrics", rc.metrics, "metrics file (mirrors stdout)");
}

void add_arch(CLI::App *cmd, Flags &f) {
  cmd->add_option("--width", f.width, "hidden width d (intermediate is 2d)");
  cmd->add_option("--layers", f.layers, "encoder layers");
  cmd->add_option("--heads", f.heads, "attention heads");
}

void add_fusion(CLI::App *cmd, Flags &f, bool with_vanilla) {
  std::vector<std::string> modes{"weights", "acts"};
  if (with_vanilla)
    modes.push_back("vanilla");
  cmd->add_option("--anchor", f.anchor, "index of the anchor checkpoint");
  cmd->add_option("--mode", f.mode, "alignment features")
      ->check(CLI::IsMember(modes));
  cmd->add_option("--solver", f.solver, "transport solver")
      ->check(CLI::IsMember({"emd", "sinkhorn"}));
  cmd->add_option("--lambda", f.lambda, "Sinkhorn regularizer");
  cmd->add_option("--residual", f.residual, "residual policy")
      ->check(CLI::IsMember({"avg", "scalar", "matrix", "identity", "residual"}));
  cmd->add_option("--filter", f.filter, "token filter: all, cls or window:<n>");
  cmd->add_option("--tie-qk", f.tie_qk, "share one map between Q and K")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--sample-size", f.sample_size,
                  "training examples used for activations");
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"OT fusion of encoder-only transformers"};
  app.require_subcommand(1);
  Flags f;
  RunConfig rc;

  auto *train = app.add_subcommand("train", "train a model on the synthetic task");
  add_common(train, f, rc);
  add_arch(train, f);
  train->add_option("--epochs", f.epochs, "training epochs");
  train->add_option("--batch-size", f.batch_size, "minibatch size");
  train->add_option("--lr", f.lr, "Adam learning rate");

  auto *fuse = app.add_subcommand("fuse", "fuse checkpoints into the anchor");
  add_common(fuse, f, rc);
  add_fusion(fuse, f, true);
  fuse->add_option("checkpoints", rc.checkpoints, "input checkpoints")->required();

  auto *eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval, f, rc);
  eval->add_option("checkpoint", rc.checkpoints, "checkpoint")->required();

  auto *sweep = app.add_subcommand("sweep", "one-shot accuracy across lambda");
  add_common(sweep, f, rc);
  add_fusion(sweep, f, false);
  sweep->add_option("--lambdas", f.lambdas, "lambda grid")->delimiter(',');
  sweep->add_option("checkpoints", rc.checkpoints, "input checkpoints")->required();

  auto *perm = app.add_subcommand(
      "perm-test", "fuse a model with a permuted copy and report deviations");
  add_common(perm, f, rc);
  add_arch(perm, f);
  perm->add_option("checkpoint", rc.checkpoints, "checkpoint (default: fresh init)");

  auto *graph = app.add_subcommand("dump-graph", "write the flow graph as DOT");
  add_common(graph, f, rc);
  add_arch(graph, f);
  add_fusion(graph, f, false);
  graph->add_option("checkpoints", rc.checkpoints,
                    "two checkpoints to annotate edges with maps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig resolved = resolve(f);
    resolved.checkpoints = rc.checkpoints;
    resolved.out = rc.out;
    resolved.metrics = rc.metrics;
    if (*train)
      return cmd_train(resolved);
    if (*fuse)
      return cmd_fuse(resolved);
    if (*eval)
      return cmd_eval(resolved);
    if (*sweep)
      return cmd_sweep(resolved);
    if (*perm)
      return cmd_perm_test(resolved);
    if (*graph)
      return cmd_dump_graph(resolved);
  } catch (const Error &e) {
    std::cerr << "error: " << error_kind_name(e.kind()) << ": " << e.what()
              << "\n";
    return 1;
  } catch (const std::exception &e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
