// dualconv: train, compare and inspect primal / dual convolutional denoisers.
//
//   dualconv gap --format synthetic --shape 1x4x4 --kernel 2 --enumerate --out run1
//   dualconv train-dual --data data/mnist/train-256-images-idx3-ubyte --config mnist.cfg
//
// Every flag is also a config key (--config file.cfg, key=value lines); flags win.

#include <dualconv/dualconv.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace {

struct Option {
  const char* key;
  const char* help;
  bool flag = false;
};

const std::vector<Option> kOptions = {
    {"data", "training images (IDX file or PGM directory)"},
    {"test-data", "held-out images; default: images after the training subset"},
    {"format", "idx | pgm-dir | synthetic"},
    {"shape", "synthetic images, NxHxW"},
    {"subset", "training images to use (0 = all)"},
    {"test-subset", "held-out images to use (0 = all)"},
    {"normalization", "scalar | per-pixel"},
    {"noise", "gaussian | exponential"},
    {"sigma", "gaussian noise std"},
    {"lambda", "exponential noise rate"},
    {"center", "subtract the exponential noise mean", true},
    {"kernel", "kernel size k"},
    {"filters", "primal filters (0 = patterns + 8)"},
    {"patterns", "sampled sign patterns"},
    {"enumerate", "enumerate patterns exactly (at most 64 pixels)", true},
    {"beta", "weight decay"},
    {"residual", "identity skip connection", true},
    {"loss", "training loss (squared)"},
    {"lr-primal", "primal Adam learning rate"},
    {"epochs", "primal epochs (full-batch steps when batch = 0)"},
    {"batch", "primal minibatch in images (0 = full batch)"},
    {"schedule", "primal learning-rate schedule: constant | cosine"},
    {"restarts", "primal restarts; the best is kept"},
    {"dual-init", "rays | zeros"},
    {"ray-iters", "generator-ray warm-start iterations"},
    {"dual-backend", "prox | adam"},
    {"dual-iters", "dual backend iterations per penalty round (0 skips)"},
    {"lr-dual", "dual Adam learning rate"},
    {"rho", "initial hinge penalty"},
    {"hinge", "squared | linear"},
    {"seed", "random seed"},
    {"out", "output directory"},
    {"weights", "directory holding saved weights"},
    {"log-every", "metrics row interval"},
    {"ablation-sizes", "comma-separated nested pattern counts"},
    {"codes-on", "clean | noisy"},
    {"clusters", "k-means clusters"},
    {"stack", "also train and cluster a second greedy block", true},
    {"triptychs", "images to export"},
};

void print_gap(const dualconv::GapResult& g) {
  std::printf("primal %.10g  dual %.10g  mapped primal %.10g  relative gap %.3e  (patterns %lld, active %lld)\n",
              g.primal_avg, g.dual_avg, g.mapped_primal_avg, g.relative_gap, static_cast<long long>(g.patterns),
              static_cast<long long>(g.active_groups));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Primal and convex-dual training of two-layer convolutional ReLU denoisers"};
  app.require_subcommand(1);

  const std::vector<std::pair<const char*, const char*>> modes = {
      {"train-primal", "train the primal network"},
      {"train-dual", "train the convex dual"},
      {"gap", "train both and report the duality gap"},
      {"ablate-patterns", "dual objective over nested pattern sets"},
      {"robustness", "gaussian against exponential noise"},
      {"interpret", "cluster codes, k-means label maps, frequency responses"},
      {"denoise", "apply saved weights"},
  };

  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::string> config_file;
  for (const auto& [name, help] : modes) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_file[name], "key=value config file")->check(CLI::ExistingFile);
    for (const auto& o : kOptions) {
      std::string& slot = values[name][o.key];
      const std::string flag = std::string("--") + o.key;
      if (o.flag) {
        sub->add_option(flag, slot, o.help)->expected(0, 1)->default_str("true");
      } else {
        sub->add_option(flag, slot, o.help);
      }
    }
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string mode = app.get_subcommands().front()->get_name();
    CLI::App* sub = app.get_subcommand(mode);
    dualconv::ExperimentConfig cfg;
    if (!config_file[mode].empty()) cfg.merge_file(config_file[mode]);
    for (const auto& o : kOptions) {
      const std::string flag = std::string("--") + o.key;
      if (sub->count(flag) == 0) continue;
      const std::string& v = values[mode][o.key];
      cfg.set(o.key, o.flag && v.empty() ? "true" : v);
    }
    cfg.validate();

    if (mode == "train-primal") {
      const auto r = dualconv::mode_train_primal(cfg);
      std::printf("primal objective (raw) %.10g  filters %lld\n", r.objective_raw,
                  static_cast<long long>(r.filters));
    } else if (mode == "train-dual") {
      const auto r = dualconv::mode_train_dual(cfg);
      std::printf("dual objective (raw) %.10g  violation %.3e  active groups %lld\n", r.objective_raw, r.violation,
                  static_cast<long long>(r.active_groups));
    } else if (mode == "gap") {
      print_gap(dualconv::mode_gap(cfg));
    } else if (mode == "ablate-patterns") {
      for (const auto& r : dualconv::mode_ablate_patterns(cfg)) {
        std::printf("patterns %6lld  objective %.10g  active %lld\n", static_cast<long long>(r.patterns),
                    r.objective_avg, static_cast<long long>(r.active_groups));
      }
    } else if (mode == "robustness") {
      for (const auto& r : dualconv::mode_robustness(cfg)) {
        std::printf("%-11s primal %.10g  dual %.10g\n", r.noise.c_str(), r.primal_avg, r.dual_avg);
      }
    } else if (mode == "interpret") {
      const auto r = dualconv::mode_interpret(cfg);
      std::printf("active groups %lld  distinct codes %lld  inertia %.6g  responses %zu\n",
                  static_cast<long long>(r.active_groups), static_cast<long long>(r.distinct_codes), r.inertia,
                  r.responses);
    } else if (mode == "denoise") {
      double total = 0.0;
      const auto rows = dualconv::mode_denoise(cfg);
      for (const auto& r : rows) total += r.mse;
      std::printf("images %zu  mean mse %.6g\n", rows.size(), rows.empty() ? 0.0 : total / rows.size());
    }
    std::printf("outputs in %s\n", cfg.out.c_str());
  } catch (const std::exception& e) {
    std::cerr << "dualconv: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
