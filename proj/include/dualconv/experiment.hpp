#pragma once

// Experiment orchestration: configuration, data preparation, primal and dual
// training runs, and the files they leave in the output directory.
//
//   metrics.csv  one row per logged iteration and phase (byte-reproducible)
//   timing.csv   wall time per run (kept apart so metrics.csv is stable)
//   gap.json / ablation.csv / robustness.csv / interpret index, per mode
//   *.bin        weights and pattern generators, normalization.json
//   *.pgm        input | target | output triptychs, label maps, responses

#include "data.hpp"
#include "dual.hpp"
#include "error.hpp"
#include "interpret.hpp"
#include "primal.hpp"
#include "rng.hpp"
#include "sign_patterns.hpp"
#include "tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualconv {

// ---------------------------------------------------------------------------
// Configuration.

struct ExperimentConfig {
  // data
  std::string data;
  std::string test_data;         // empty: images right after the training subset
  std::string format = "idx";    // idx | pgm-dir | synthetic
  std::string shape = "8x8x8";   // synthetic N x h x w
  std::size_t subset = 64;       // 0 = all
  std::size_t test_subset = 64;  // 0 = all remaining
  std::string normalization = "scalar";  // scalar | per-pixel

  // noise
  std::string noise = "gaussian";  // gaussian | exponential
  double sigma = 0.5;
  double lambda = 1.15;
  bool center = false;

  // model
  int kernel = 3;
  Eigen::Index filters = 0;     // 0 = pattern count + 8 (25 in robustness mode)
  Eigen::Index patterns = 800;
  bool enumerate = false;       // exact pattern enumeration (tiny inputs only)
  double beta = 1e-5;
  bool residual = false;
  std::string loss = "squared";

  // primal training
  double lr_primal = 1e-2;
  int epochs = 1000;
  std::size_t batch = 25;       // images per minibatch, 0 = full batch
  std::string schedule = "constant";  // constant | cosine
  int restarts = 1;

  // dual training
  std::string dual_init = "rays";     // rays | zeros
  int ray_iters = 300;
  std::string dual_backend = "prox";  // prox | adam
  int dual_iters = 0;                 // backend iterations per penalty round; 0 skips
  double lr_dual = 1e-5;
  double rho = 1e2;
  std::string hinge = "squared";

  // bookkeeping
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string weights;  // directory with saved weights (interpret, denoise)
  int log_every = 10;
  std::vector<Eigen::Index> ablation_sizes{50, 200, 800, 3200};
  std::string codes_on = "clean";  // clean | noisy
  int clusters = 12;
  bool stack = false;
  std::size_t triptychs = 4;

  void set(std::string key, const std::string& value);
  std::string to_text() const;
  void validate() const;

  /// Flat key=value lines; '#' starts a comment.
  static ExperimentConfig from_file(const std::string& path) {
    ExperimentConfig cfg;
    cfg.merge_file(path);
    return cfg;
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected key=value");
      }
      try {
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const std::exception& e) {
        throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  std::size_t batch_rows(std::size_t pixels_per_image) const { return batch * pixels_per_image; }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument(key + ": expected a boolean, got '" + v + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw std::invalid_argument(key + ": cannot parse '" + v + "'");
  return out;
}

inline std::string pick(const std::string& key, const std::string& v, std::initializer_list<const char*> allowed) {
  for (const char* a : allowed) {
    if (v == a) return v;
  }
  std::string list;
  for (const char* a : allowed) list += std::string(list.empty() ? "" : ", ") + a;
  throw std::invalid_argument(key + ": '" + v + "' is not one of {" + list + "}");
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void ExperimentConfig::set(std::string key, const std::string& v) {
  std::replace(key.begin(), key.end(), '_', '-');
  using detail::parse_bool;
  using detail::parse_number;
  using detail::pick;
  if (key == "data") data = v;
  else if (key == "test-data") test_data = v;
  else if (key == "format") format = pick(key, v, {"idx", "pgm-dir", "synthetic"});
  else if (key == "shape") shape = v;
  else if (key == "subset") subset = parse_number<std::size_t>(key, v);
  else if (key == "test-subset") test_subset = parse_number<std::size_t>(key, v);
  else if (key == "normalization") normalization = pick(key, v, {"scalar", "per-pixel"});
  else if (key == "noise") noise = pick(key, v, {"gaussian", "exponential"});
  else if (key == "sigma") sigma = parse_number<double>(key, v);
  else if (key == "lambda") lambda = parse_number<double>(key, v);
  else if (key == "center") center = parse_bool(key, v);
  else if (key == "kernel") kernel = parse_number<int>(key, v);
  else if (key == "filters") filters = parse_number<Eigen::Index>(key, v);
  else if (key == "patterns") patterns = parse_number<Eigen::Index>(key, v);
  else if (key == "enumerate") enumerate = parse_bool(key, v);
  else if (key == "beta") beta = parse_number<double>(key, v);
  else if (key == "residual") residual = parse_bool(key, v);
  else if (key == "loss") loss = v;
  else if (key == "lr-primal") lr_primal = parse_number<double>(key, v);
  else if (key == "epochs") epochs = parse_number<int>(key, v);
  else if (key == "batch") batch = parse_number<std::size_t>(key, v);
  else if (key == "schedule") schedule = pick(key, v, {"constant", "cosine"});
  else if (key == "restarts") restarts = parse_number<int>(key, v);
  else if (key == "dual-init") dual_init = pick(key, v, {"rays", "zeros"});
  else if (key == "ray-iters") ray_iters = parse_number<int>(key, v);
  else if (key == "dual-backend") dual_backend = pick(key, v, {"prox", "adam"});
  else if (key == "dual-iters") dual_iters = parse_number<int>(key, v);
  else if (key == "lr-dual") lr_dual = parse_number<double>(key, v);
  else if (key == "rho") rho = parse_number<double>(key, v);
  else if (key == "hinge") hinge = pick(key, v, {"squared", "linear"});
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "out") out = v;
  else if (key == "weights") weights = v;
  else if (key == "log-every") log_every = parse_number<int>(key, v);
  else if (key == "ablation-sizes") {
    std::vector<Eigen::Index> sizes;
    std::istringstream is(v);
    std::string tok;
    while (std::getline(is, tok, ',')) sizes.push_back(parse_number<Eigen::Index>(key, tok));
    if (sizes.empty()) throw std::invalid_argument("ablation-sizes: empty list");
    ablation_sizes = std::move(sizes);
  }
  else if (key == "codes-on") codes_on = pick(key, v, {"clean", "noisy"});
  else if (key == "clusters") clusters = parse_number<int>(key, v);
  else if (key == "stack") stack = parse_bool(key, v);
  else if (key == "triptychs") triptychs = parse_number<std::size_t>(key, v);
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

inline std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  auto b = [](bool x) { return x ? "true" : "false"; };
  std::string sizes;
  for (auto s : ablation_sizes) sizes += (sizes.empty() ? "" : ",") + std::to_string(s);
  using detail::fmt;
  os << "data=" << data << "\ntest-data=" << test_data << "\nformat=" << format << "\nshape=" << shape
     << "\nsubset=" << subset << "\ntest-subset=" << test_subset << "\nnormalization=" << normalization
     << "\nnoise=" << noise << "\nsigma=" << fmt(sigma) << "\nlambda=" << fmt(lambda) << "\ncenter=" << b(center)
     << "\nkernel=" << kernel << "\nfilters=" << filters << "\npatterns=" << patterns
     << "\nenumerate=" << b(enumerate) << "\nbeta=" << fmt(beta) << "\nresidual=" << b(residual)
     << "\nloss=" << loss << "\nlr-primal=" << fmt(lr_primal) << "\nepochs=" << epochs << "\nbatch=" << batch
     << "\nschedule=" << schedule << "\nrestarts=" << restarts << "\ndual-init=" << dual_init
     << "\nray-iters=" << ray_iters << "\ndual-backend=" << dual_backend << "\ndual-iters=" << dual_iters
     << "\nlr-dual=" << fmt(lr_dual) << "\nrho=" << fmt(rho) << "\nhinge=" << hinge << "\nseed=" << seed
     << "\nout=" << out << "\nweights=" << weights << "\nlog-every=" << log_every << "\nablation-sizes=" << sizes
     << "\ncodes-on=" << codes_on << "\nclusters=" << clusters << "\nstack=" << b(stack)
     << "\ntriptychs=" << triptychs << "\n";
  return os.str();
}

inline void ExperimentConfig::validate() const {
  if (loss != "squared") throw NotImplementedError("loss '" + loss + "' is not implemented (only squared)");
  if (noise == "gaussian" && !(sigma >= 0.0)) throw std::invalid_argument("sigma must be >= 0");
  if (noise == "exponential" && !(lambda > 0.0)) throw std::invalid_argument("lambda must be > 0");
  if (kernel < 1) throw std::invalid_argument("kernel must be >= 1");
  if (filters < 0) throw std::invalid_argument("filters must be >= 0");
  if (patterns < 1) throw std::invalid_argument("patterns must be >= 1");
  if (beta < 0.0) throw std::invalid_argument("beta must be >= 0");
  if (!(lr_primal > 0.0) || !(lr_dual > 0.0)) throw std::invalid_argument("learning rates must be > 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (restarts < 1) throw std::invalid_argument("restarts must be >= 1");
  if (ray_iters < 0 || dual_iters < 0) throw std::invalid_argument("iteration counts must be >= 0");
  if (dual_init == "zeros" && dual_iters == 0) {
    throw std::invalid_argument("dual-init=zeros needs dual-iters > 0");
  }
  if (dual_backend == "prox" && hinge != "squared" && dual_iters > 0) {
    throw std::invalid_argument("the prox backend needs hinge=squared");
  }
  if (!(rho > 0.0)) throw std::invalid_argument("rho must be > 0");
  if (log_every < 1) throw std::invalid_argument("log-every must be >= 1");
  if (clusters < 1) throw std::invalid_argument("clusters must be >= 1");
  for (auto s : ablation_sizes) {
    if (s < 1) throw std::invalid_argument("ablation sizes must be >= 1");
  }
}

// ---------------------------------------------------------------------------
// Data.

struct Dataset {
  ImageTensor train;  // clean, raw scale
  ImageTensor test;
};

namespace detail {

inline std::vector<std::size_t> parse_shape(const std::string& s) {
  std::vector<std::size_t> dims;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, 'x')) dims.push_back(parse_number<std::size_t>("shape", tok));
  if (dims.size() != 3) throw std::invalid_argument("shape: expected NxHxW, got '" + s + "'");
  return dims;
}

/// Smooth-ish random images in [0, 1]: a few random Gaussian blobs each.
inline ImageTensor synthetic_images(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  ImageTensor out(n, h, w);
  Engine eng = make_engine(seed, 0x73796e);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (int blob = 0; blob < 3; ++blob) {
      const double cr = unit(eng) * static_cast<double>(h);
      const double cc = unit(eng) * static_cast<double>(w);
      const double width = 0.5 + unit(eng) * 0.25 * static_cast<double>(std::max(h, w));
      const double amp = 0.3 + 0.7 * unit(eng);
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const double d2 = (r - cr) * (r - cr) + (c - cc) * (c - cc);
          out(i, r, c) += amp * std::exp(-d2 / (2.0 * width * width));
        }
      }
    }
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) out(i, r, c) = std::min(1.0, out(i, r, c) + 0.05 * unit(eng));
    }
  }
  return out;
}

inline ImageTensor load_images(const std::string& path, const std::string& format) {
  if (path.empty()) throw std::invalid_argument("no data path given");
  return format == "pgm-dir" ? load_pgm_dir(path) : load_idx(path);
}

}  // namespace detail

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  Dataset ds;
  if (cfg.format == "synthetic") {
    const auto d = detail::parse_shape(cfg.shape);
    ds.train = detail::synthetic_images(d[0], d[1], d[2], mix_seed(cfg.seed, 10));
    const std::size_t nt = cfg.test_subset ? cfg.test_subset : d[0];
    ds.test = detail::synthetic_images(nt, d[1], d[2], mix_seed(cfg.seed, 11));
    return ds;
  }
  const ImageTensor all = detail::load_images(cfg.data, cfg.format);
  const std::size_t n = cfg.subset ? std::min(cfg.subset, all.count()) : all.count();
  ds.train = all.slice(0, n);
  if (!cfg.test_data.empty()) {
    const ImageTensor t = detail::load_images(cfg.test_data, cfg.format);
    ds.test = t.slice(0, cfg.test_subset ? std::min(cfg.test_subset, t.count()) : t.count());
  } else {
    const std::size_t left = all.count() - n;
    if (left == 0) throw std::invalid_argument("no held-out images: pass test-data or a smaller subset");
    ds.test = all.slice(n, cfg.test_subset ? std::min(cfg.test_subset, left) : left);
  }
  return ds;
}

inline ConvSpec experiment_spec(int k) { return k % 2 ? ConvSpec::odd(k) : ConvSpec::same(k); }

/// Everything a training run needs, in normalized units.
struct Prepared {
  Normalization stats;
  ImageTensor clean_train, noisy_train, clean_test, noisy_test;
  PatchMatrix train, test;
  Vector x_train, x_test;      // clean targets
  Vector skip_train, skip_test;  // noisy center pixel (residual mode), else zero

  double train_scale() const { return static_cast<double>(x_train.size()); }
  double test_scale() const { return static_cast<double>(x_test.size()); }
  /// Targets the dual sees: the residual labels in residual mode.
  Vector dual_targets() const { return x_train - skip_train; }
};

inline Prepared prepare(const ExperimentConfig& cfg, const Dataset& ds,
                        const std::optional<Normalization>& stats = std::nullopt) {
  Prepared p;
  const auto mode = cfg.normalization == "per-pixel" ? NormalizationMode::per_pixel : NormalizationMode::scalar;
  p.stats = stats ? *stats : fit_normalization(ds.train, mode);
  p.clean_train = apply_normalization(ds.train, p.stats);
  p.clean_test = apply_normalization(ds.test, p.stats);
  auto noisy = [&](const ImageTensor& x, std::uint64_t stream) {
    const std::uint64_t s = mix_seed(cfg.seed, stream);
    return cfg.noise == "exponential" ? add_exponential_noise(x, cfg.lambda, s, cfg.center)
                                      : add_gaussian_noise(x, cfg.sigma, s);
  };
  p.noisy_train = noisy(p.clean_train, 1);
  p.noisy_test = noisy(p.clean_test, 2);
  const ConvSpec spec = experiment_spec(cfg.kernel);
  p.train = extract_patches(p.noisy_train, spec);
  p.test = extract_patches(p.noisy_test, spec);
  p.x_train = flatten_targets(p.clean_train);
  p.x_test = flatten_targets(p.clean_test);
  p.skip_train = cfg.residual ? p.train.center() : Vector::Zero(p.x_train.size());
  p.skip_test = cfg.residual ? p.test.center() : Vector::Zero(p.x_test.size());
  return p;
}

// ---------------------------------------------------------------------------
// Metrics.

struct MetricsRecord {
  std::string run;
  std::string phase;  // train | test
  int iteration = 0;
  double objective_avg = 0.0;  // objective_raw / (N h w)
  double objective_raw = 0.0;
  double violation = 0.0;
  Eigen::Index active_groups = 0;
  double mse = 0.0;   // raw pixel scale
  double psnr = 0.0;  // +inf for a perfect prediction
};

inline constexpr const char* kMetricsHeader = "run,phase,iteration,objective_avg,objective_raw,violation,active_groups,mse,psnr";

inline std::string format_record(const MetricsRecord& r) {
  using detail::fmt;
  const std::string p = std::isinf(r.psnr) ? (r.psnr > 0 ? "inf" : "-inf") : fmt(r.psnr);
  return r.run + ',' + r.phase + ',' + std::to_string(r.iteration) + ',' + fmt(r.objective_avg) + ',' +
         fmt(r.objective_raw) + ',' + fmt(r.violation) + ',' + std::to_string(r.active_groups) + ',' + fmt(r.mse) +
         ',' + p;
}

/// Append-only CSV, flushed per row.
class CsvWriter {
 public:
  CsvWriter() = default;
  CsvWriter(const std::string& path, const std::string& header) : os_(path, std::ios::trunc) {
    if (!os_) throw std::runtime_error("cannot open " + path);
    os_ << header << '\n' << std::flush;
  }
  void row(const std::string& line) {
    if (os_.is_open()) os_ << line << '\n' << std::flush;
  }

 private:
  std::ofstream os_;
};

struct Scores {
  double objective_raw = 0.0;
  double mse = 0.0;
  double psnr = 0.0;
};

/// Data term + `reg` against `targets`, and MSE / PSNR after undoing the
/// normalization. `pred` is the full network output (skip included).
inline Scores score(const Vector& pred, const Vector& targets, double reg, const ImageTensor& clean,
                    const Normalization& stats) {
  Scores s;
  s.objective_raw = 0.5 * (pred - targets).squaredNorm() + reg;
  const ImageTensor out = unnormalize(reshape(pred, clean.count(), clean.rows(), clean.cols()), stats);
  const ImageTensor ref = unnormalize(clean, stats);
  s.mse = mse(out, ref);
  const auto [mn, mx] = std::minmax_element(ref.values().begin(), ref.values().end());
  s.psnr = *mx > *mn ? psnr(out, ref) : (s.mse == 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
  return s;
}

/// Dual prediction using only the live groups; masks are recomputed from the
/// generators so this works on any patch matrix.
inline Vector predict_live(const DualWeights& W, const SignPatternSet& set, const PatchMatrix& patches) {
  std::vector<Eigen::Index> live;
  for (Eigen::Index i = 0; i < W.count(); ++i) {
    if (!W.w.col(i).isZero(0.0) || !W.z.col(i).isZero(0.0)) live.push_back(i);
  }
  const auto n = static_cast<Eigen::Index>(live.size());
  SignPatternSet sub;
  sub.generators.resize(set.dim(), n);
  DualWeights sw = DualWeights::zeros(n, W.dim());
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index i = live[static_cast<std::size_t>(j)];
    sub.generators.col(j) = set.generators.col(i);
    sw.w.col(j) = W.w.col(i);
    sw.z.col(j) = W.z.col(i);
  }
  return dual_predict(sw, sub, patches);
}

inline Eigen::Index live_units(const PrimalWeights& w, double tol = 1e-8) {
  Eigen::Index n = 0;
  for (Eigen::Index j = 0; j < w.units(); ++j) {
    if (w.u.col(j).norm() * std::abs(w.v[j]) > tol) ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Runs.

struct PrimalRun {
  PrimalWeights weights;
  double objective_raw = 0.0;
  Scores test;
  std::uint64_t seed = 0;
  Eigen::Index filters = 0;
};

struct DualRun {
  SignPatternSet set;
  DualWeights weights;
  Vector coeff;  // ray coefficients, when the ray fit ran
  double objective_raw = 0.0;  // unpenalized
  double violation = 0.0;
  Eigen::Index active_groups = 0;
  Scores test;
};

inline double unpenalized(const DualProblem& prob, const DualWeights& W, double beta) {
  return prob.evaluate(W, 1.0, Hinge::linear, false).data + beta * prob.group_norms(W);
}

class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::filesystem::create_directories(cfg_.out);
    metrics_ = CsvWriter(path("metrics.csv"), kMetricsHeader);
    timing_ = CsvWriter(path("timing.csv"), "run,seconds");
    std::ofstream(path("config.txt"), std::ios::trunc) << cfg_.to_text();
  }

  const ExperimentConfig& config() const { return cfg_; }
  std::string path(const std::string& name) const { return (std::filesystem::path(cfg_.out) / name).string(); }

  SignPatternSet patterns_for(const Prepared& p, Eigen::Index count) const {
    if (cfg_.enumerate) return enumerate_patterns_exact(p.train, 1'000'000, cfg_.seed);
    return sample_patterns(p.train, count, cfg_.seed);
  }

  Eigen::Index filters_for(Eigen::Index patterns) const {
    return cfg_.filters > 0 ? cfg_.filters : patterns + 8;
  }

  /// Best of `restarts` seeds; every restart is logged.
  PrimalRun run_primal(const std::string& run, const Prepared& p, Eigen::Index filters) {
    PrimalRun best;
    best.objective_raw = std::numeric_limits<double>::infinity();
    for (int r = 0; r < cfg_.restarts; ++r) {
      const std::string label = cfg_.restarts > 1 ? run + "#" + std::to_string(r) : run;
      PrimalConfig pc;
      pc.filters = filters;
      pc.beta = cfg_.beta;
      pc.learning_rate = cfg_.lr_primal;
      pc.max_iters = cfg_.epochs;
      pc.batch_size = static_cast<Eigen::Index>(cfg_.batch_rows(p.clean_train.pixels_per_image()));
      pc.residual = cfg_.residual;
      pc.seed = mix_seed(cfg_.seed, 100 + static_cast<std::uint64_t>(r));
      pc.schedule = cfg_.schedule == "cosine" ? LrSchedule::cosine : LrSchedule::constant;
      pc.log_every = cfg_.log_every;
      const auto t0 = std::chrono::steady_clock::now();
      Scores last_test;
      PrimalResult res = train_primal(p.train, p.x_train, pc, [&](int it, const PrimalWeights& w, double obj) {
        last_test = log_primal(label, it, w, obj, p);
      });
      timing(label, t0);
      const double obj = res.history.back().objective;
      if (obj < best.objective_raw) {
        best.objective_raw = obj;
        best.weights = std::move(res.weights);
        best.test = last_test;
        best.seed = pc.seed;
        best.filters = filters;
      }
    }
    return best;
  }

  /// Ray fit (optional) followed by backend iterations (optional). A warm
  /// start from a smaller nested set is padded with zero groups and is never
  /// beaten by a worse result.
  DualRun run_dual(const std::string& run, const Prepared& p, const SignPatternSet& set,
                   const DualRun* warm = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    const DualProblem prob(p.train, p.dual_targets(), set);
    const Eigen::Index n = prob.patterns();
    DualRun out;
    out.set = set;
    DualWeights W = warm ? warm->weights.extended(n) : DualWeights::zeros(n, prob.dim());
    const DualWeights start = W;
    int offset = 0;
    int last_logged = -1;

    if (cfg_.dual_init == "rays" && cfg_.ray_iters > 0) {
      Vector c0 = Vector::Zero(n);
      if (warm && warm->coeff.size() > 0) c0.head(warm->coeff.size()) = warm->coeff;
      RayFit fit = fit_generator_rays(prob, cfg_.beta, cfg_.ray_iters, 1e-9, &c0,
                                      [&](int k, const Vector& c, double fx) {
                                        if (k % cfg_.log_every) return;
                                        const DualWeights Wk = ray_weights(set.generators, c);
                                        log_dual(run, k, Wk, fx, prob.violation(Wk), prob, p);
                                        last_logged = k;
                                      });
      out.coeff = fit.coeff;
      W = std::move(fit.weights);
      offset = static_cast<int>(fit.history.size()) - 1;
      if (offset != last_logged) {
        log_dual(run, offset, W, unpenalized(prob, W, cfg_.beta), prob.violation(W), prob, p);
        last_logged = offset;
      }
    }
    if (cfg_.dual_iters > 0) {
      DualConfig dc;
      dc.beta = cfg_.beta;
      dc.rho = cfg_.rho;
      dc.hinge = cfg_.hinge == "linear" ? Hinge::linear : Hinge::squared;
      dc.learning_rate = cfg_.lr_dual;
      dc.max_iters = cfg_.dual_iters;
      dc.seed = cfg_.seed;
      dc.log_every = cfg_.log_every;
      const bool skip_first = last_logged >= 0;
      auto observer = [&](const DualRecord& r, const DualWeights& Wk) {
        if (skip_first && r.iteration == 0) return;
        log_dual(run, offset + r.iteration, Wk, r.objective, r.violation, prob, p);
      };
      DualSolution sol = cfg_.dual_backend == "adam" ? train_dual_adam(prob, dc, &W, observer)
                                                     : train_dual_prox(prob, dc, &W, observer);
      W = std::move(sol.weights);
    }
    if (warm && prob.violation(start) <= prob.violation(W) &&
        unpenalized(prob, start, cfg_.beta) < unpenalized(prob, W, cfg_.beta)) {
      W = start;
      if (warm->coeff.size() > 0) {
        out.coeff = Vector::Zero(n);
        out.coeff.head(warm->coeff.size()) = warm->coeff;
      }
    }
    out.weights = std::move(W);
    out.objective_raw = unpenalized(prob, out.weights, cfg_.beta);
    out.violation = prob.violation(out.weights);
    out.active_groups = prob.active_groups(out.weights, 1e-8);
    out.test = test_scores(out.weights, set, p, cfg_.beta * prob.group_norms(out.weights));
    timing(run, t0);
    return out;
  }

  void save_triptychs(const std::string& run, const Prepared& p, const Vector& test_pred) const {
    const ImageTensor out = unnormalize(reshape_like(test_pred, p.test), p.stats);
    const ImageTensor in = unnormalize(p.noisy_test, p.stats);
    const ImageTensor ref = unnormalize(p.clean_test, p.stats);
    const std::size_t h = ref.rows(), w = ref.cols();
    for (std::size_t i = 0; i < std::min(cfg_.triptychs, ref.count()); ++i) {
      ImageTensor t(1, h, 3 * w);
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          t(0, r, c) = in(i, r, c);
          t(0, r, w + c) = ref(i, r, c);
          t(0, r, 2 * w + c) = out(i, r, c);
        }
      }
      save_pgm(path(run + "_triptych_" + std::to_string(i) + ".pgm"), t, 0.0, 1.0, 0);
    }
  }

  void save_normalization(const Normalization& stats) const {
    nlohmann::json j;
    j["mode"] = stats.mode == NormalizationMode::scalar ? "scalar" : "per-pixel";
    j["mean"] = stats.mean;
    j["std"] = stats.std;
    std::ofstream(path("normalization.json"), std::ios::trunc) << j.dump(2) << '\n';
  }

  static Normalization load_normalization(const std::string& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open " + file);
    const auto j = nlohmann::json::parse(in);
    Normalization n;
    n.mode = j.at("mode") == "scalar" ? NormalizationMode::scalar : NormalizationMode::per_pixel;
    n.mean = j.at("mean").get<std::vector<double>>();
    n.std = j.at("std").get<std::vector<double>>();
    return n;
  }

  void write_json(const std::string& name, const nlohmann::json& j) const {
    std::ofstream(path(name), std::ios::trunc) << j.dump(2) << '\n';
  }

  Vector primal_test_prediction(const PrimalWeights& w, const Prepared& p) const {
    return primal_forward(w, p.test, cfg_.residual);
  }

  Vector dual_test_prediction(const DualWeights& W, const SignPatternSet& set, const Prepared& p) const {
    return predict_live(W, set, p.test) + p.skip_test;
  }

 private:
  void timing(const std::string& run, std::chrono::steady_clock::time_point t0) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timing_.row(run + ',' + detail::fmt(s));
  }

  void emit(const std::string& run, const std::string& phase, int it, const Scores& s, double scale,
            double violation, Eigen::Index active) {
    MetricsRecord r{run, phase, it, s.objective_raw / scale, s.objective_raw, violation, active, s.mse, s.psnr};
    metrics_.row(format_record(r));
  }

  Scores log_primal(const std::string& run, int it, const PrimalWeights& w, double obj, const Prepared& p) {
    const Eigen::Index active = live_units(w);
    Scores tr = score(primal_forward(w, p.train, cfg_.residual), p.x_train, 0.0, p.clean_train, p.stats);
    tr.objective_raw = obj;
    emit(run, "train", it, tr, p.train_scale(), 0.0, active);
    const Scores te = score(primal_test_prediction(w, p), p.x_test, primal_regularizer(w, cfg_.beta),
                            p.clean_test, p.stats);
    emit(run, "test", it, te, p.test_scale(), 0.0, active);
    return te;
  }

  Scores test_scores(const DualWeights& W, const SignPatternSet& set, const Prepared& p, double reg) const {
    return score(dual_test_prediction(W, set, p), p.x_test, reg, p.clean_test, p.stats);
  }

  void log_dual(const std::string& run, int it, const DualWeights& W, double objective, double violation,
                const DualProblem& prob, const Prepared& p) {
    const Eigen::Index active = prob.active_groups(W, 1e-8);
    Scores tr = score(prob.predict(W) + p.skip_train, p.x_train, 0.0, p.clean_train, p.stats);
    tr.objective_raw = objective;
    emit(run, "train", it, tr, p.train_scale(), violation, active);
    // Constraints live on the training patches; test rows carry no violation.
    const Scores te = test_scores(W, prob_set(prob), p, cfg_.beta * prob.group_norms(W));
    emit(run, "test", it, te, p.test_scale(), 0.0, active);
  }

  static SignPatternSet prob_set(const DualProblem& prob) { return SignPatternSet{prob.generators(), std::nullopt}; }

  ExperimentConfig cfg_;
  CsvWriter metrics_;
  CsvWriter timing_;
};

// ---------------------------------------------------------------------------
// Modes.

inline nlohmann::json primal_summary(const PrimalRun& r, const Prepared& p) {
  return {{"objective_raw", r.objective_raw},
          {"objective_avg", r.objective_raw / p.train_scale()},
          {"filters", r.filters},
          {"seed", r.seed},
          {"test_mse", r.test.mse}};
}

inline nlohmann::json dual_summary(const DualRun& r, const Prepared& p) {
  return {{"objective_raw", r.objective_raw},
          {"objective_avg", r.objective_raw / p.train_scale()},
          {"patterns", r.set.count()},
          {"active_groups", r.active_groups},
          {"violation", r.violation},
          {"test_mse", r.test.mse}};
}

inline PrimalRun mode_train_primal(const ExperimentConfig& cfg) {
  Experiment ex(cfg);
  const Prepared p = prepare(cfg, load_dataset(cfg));
  ex.save_normalization(p.stats);
  Eigen::Index filters = cfg.filters;
  if (filters == 0) filters = ex.filters_for(ex.patterns_for(p, cfg.patterns).count());
  PrimalRun r = ex.run_primal("primal", p, filters);
  save_primal(ex.path("primal.bin"), r.weights);
  ex.save_triptychs("primal", p, ex.primal_test_prediction(r.weights, p));
  ex.write_json("summary.json", {{"primal", primal_summary(r, p)}});
  return r;
}

inline DualRun mode_train_dual(const ExperimentConfig& cfg) {
  Experiment ex(cfg);
  const Prepared p = prepare(cfg, load_dataset(cfg));
  ex.save_normalization(p.stats);
  DualRun r = ex.run_dual("dual", p, ex.patterns_for(p, cfg.patterns));
  save_dual(ex.path("dual.bin"), r.weights);
  save_patterns(ex.path("patterns.bin"), r.set);
  ex.save_triptychs("dual", p, ex.dual_test_prediction(r.weights, r.set, p));
  ex.write_json("summary.json", {{"dual", dual_summary(r, p)}});
  return r;
}

struct GapResult {
  double primal_avg = 0.0;
  double dual_avg = 0.0;
  double mapped_primal_avg = 0.0;  // primal objective at the dual's mapped weights
  double relative_gap = 0.0;
  Eigen::Index patterns = 0;
  Eigen::Index active_groups = 0;
};

inline GapResult mode_gap(const ExperimentConfig& cfg) {
  Experiment ex(cfg);
  const Prepared p = prepare(cfg, load_dataset(cfg));
  ex.save_normalization(p.stats);
  const SignPatternSet set = ex.patterns_for(p, cfg.patterns);
  DualRun d = ex.run_dual("dual", p, set);
  PrimalRun pr = ex.run_primal("primal", p, ex.filters_for(set.count()));
  save_dual(ex.path("dual.bin"), d.weights);
  save_patterns(ex.path("patterns.bin"), d.set);
  save_primal(ex.path("primal.bin"), pr.weights);
  ex.save_triptychs("primal", p, ex.primal_test_prediction(pr.weights, p));
  ex.save_triptychs("dual", p, ex.dual_test_prediction(d.weights, d.set, p));

  GapResult g;
  g.primal_avg = pr.objective_raw / p.train_scale();
  g.dual_avg = d.objective_raw / p.train_scale();
  g.mapped_primal_avg =
      primal_objective(dual_to_primal(d.weights), p.train, p.x_train, cfg.beta, cfg.residual) / p.train_scale();
  g.relative_gap = std::abs(g.primal_avg - g.dual_avg) / std::max(std::abs(g.dual_avg), 1e-300);
  g.patterns = set.count();
  g.active_groups = d.active_groups;
  ex.write_json("gap.json", {{"primal", primal_summary(pr, p)},
                             {"dual", dual_summary(d, p)},
                             {"mapped_primal_objective_avg", g.mapped_primal_avg},
                             {"absolute_gap_avg", std::abs(g.primal_avg - g.dual_avg)},
                             {"relative_gap", g.relative_gap}});
  return g;
}

struct AblationRow {
  Eigen::Index patterns;
  double objective_avg;
  double objective_raw;
  double violation;
  Eigen::Index active_groups;
  double test_mse;
};

/// Nested prefixes of one large sample; each size warm-starts from the last.
inline std::vector<AblationRow> mode_ablate_patterns(const ExperimentConfig& cfg) {
  Experiment ex(cfg);
  const Prepared p = prepare(cfg, load_dataset(cfg));
  std::vector<Eigen::Index> sizes = cfg.ablation_sizes;
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  const SignPatternSet all = sample_patterns(p.train, sizes.back(), cfg.seed);

  CsvWriter csv(ex.path("ablation.csv"), "patterns,objective_avg,objective_raw,violation,active_groups,test_mse");
  std::vector<AblationRow> rows;
  std::optional<DualRun> prev;
  for (Eigen::Index s : sizes) {
    const Eigen::Index n = std::min(s, all.count());
    if (prev && n == prev->set.count()) continue;
    DualRun r = ex.run_dual("dual-" + std::to_string(n), p, all.prefix(n), prev ? &*prev : nullptr);
    AblationRow row{n, r.objective_raw / p.train_scale(), r.objective_raw, r.violation, r.active_groups,
                    r.test.mse};
    using detail::fmt;
    csv.row(std::to_string(n) + ',' + fmt(row.objective_avg) + ',' + fmt(row.objective_raw) + ',' +
            fmt(row.violation) + ',' + std::to_string(row.active_groups) + ',' + fmt(row.test_mse));
    rows.push_back(row);
    prev = std::move(r);
  }
  return rows;
}

struct RobustnessRow {
  std::string noise;
  double parameter;
  double primal_avg;
  double dual_avg;
  double primal_test_mse;
  double dual_test_mse;
};

/// Gaussian (sigma) against exponential (lambda) noise on the same images.
inline std::vector<RobustnessRow> mode_robustness(const ExperimentConfig& cfg) {
  Experiment ex(cfg);
  const Dataset ds = load_dataset(cfg);
  CsvWriter csv(ex.path("robustness.csv"),
                "noise,parameter,primal_objective_avg,dual_objective_avg,difference_avg,relative_difference,"
                "primal_test_mse,dual_test_mse");
  std::vector<RobustnessRow> rows;
  for (const std::string noise : {"gaussian", "exponential"}) {
    ExperimentConfig c = cfg;
    c.noise = noise;
    const Prepared p = prepare(c, ds);
    const Eigen::Index filters = cfg.filters > 0 ? cfg.filters : 25;
    PrimalRun pr = ex.run_primal("primal-" + noise, p, filters);
    DualRun d = ex.run_dual("dual-" + noise, p, sample_patterns(p.train, cfg.patterns, cfg.seed));
    RobustnessRow row{noise, noise == "gaussian" ? cfg.sigma : cfg.lambda, pr.objective_raw / p.train_scale(),
                      d.objective_raw / p.train_scale(), pr.test.mse, d.test.mse};
    using detail::fmt;
    csv.row(noise + ',' + fmt(row.parameter) + ',' + fmt(row.primal_avg) + ',' + fmt(row.dual_avg) + ',' +
            fmt(row.dual_avg - row.primal_avg) + ',' + fmt((row.dual_avg - row.primal_avg) / row.primal_avg) + ',' +
            fmt(row.primal_test_mse) + ',' + fmt(row.dual_test_mse));
    ex.save_triptychs("primal-" + noise, p, ex.primal_test_prediction(pr.weights, p));
    ex.save_triptychs("dual-" + noise, p, ex.dual_test_prediction(d.weights, d.set, p));
    rows.push_back(row);
  }
  return rows;
}

struct InterpretResult {
  Eigen::Index active_groups = 0;
  Eigen::Index distinct_codes = 0;
  double inertia = 0.0;
  std::size_t responses = 0;
};

/// Cluster codes, k-means label maps and filter frequency responses of a dual
/// network (loaded from `weights`, else trained here).
inline InterpretResult mode_interpret(const ExperimentConfig& cfg) {
  Experiment ex(cfg);
  const Dataset ds = load_dataset(cfg);
  DualWeights W;
  SignPatternSet set;
  Prepared p;
  if (!cfg.weights.empty()) {
    const auto dir = std::filesystem::path(cfg.weights);
    p = prepare(cfg, ds, Experiment::load_normalization((dir / "normalization.json").string()));
    W = load_dual((dir / "dual.bin").string());
    set = load_patterns((dir / "patterns.bin").string());
  } else {
    p = prepare(cfg, ds);
    DualRun r = ex.run_dual("dual", p, ex.patterns_for(p, cfg.patterns));
    W = std::move(r.weights);
    set = std::move(r.set);
    save_dual(ex.path("dual.bin"), W);
    save_patterns(ex.path("patterns.bin"), set);
  }
  ex.save_normalization(p.stats);
  const ConvSpec spec = experiment_spec(cfg.kernel);
  const ImageTensor& images = cfg.codes_on == "noisy" ? p.noisy_test : p.clean_test;
  CsvWriter index(ex.path("interpret_index.csv"), "kind,id,file,detail");

  auto label_maps = [&](const std::string& prefix, const ClusterCodes& codes, const ImageTensor& shape) {
    const ClusterAssignment a = kmeans(codes, cfg.clusters, cfg.seed);
    const double top = std::max(1, cfg.clusters - 1);
    const std::size_t hw = shape.pixels_per_image();
    for (std::size_t i = 0; i < std::min(cfg.triptychs, shape.count()); ++i) {
      ImageTensor img(1, shape.rows(), shape.cols());
      for (std::size_t q = 0; q < hw; ++q) {
        img.values()[q] = static_cast<double>(a.labels[i * hw + q]) / top;
      }
      const std::string file = prefix + "_labels_" + std::to_string(i) + ".pgm";
      save_pgm(ex.path(file), img, 0.0, 1.0, 0);
      index.row(prefix + "_labels," + std::to_string(i) + ',' + file + ",image " + std::to_string(i));
    }
    return a;
  };

  const Block block1{spec, cfg.residual, std::nullopt, DualBlock{set, W}};
  const ClusterCodes codes = block1.codes(images);
  const ClusterAssignment a = label_maps("block1", codes, images);

  InterpretResult out;
  out.active_groups = codes.length();
  out.distinct_codes = static_cast<Eigen::Index>(detail::unique_codes(codes).representative.size());
  out.inertia = a.inertia;
  for (const auto& fr : filter_frequency_response(W, spec.k, images.rows(), images.cols())) {
    const std::string file = "frequency_" + std::to_string(fr.group) + ".pgm";
    save_pgm(ex.path(file), fr.magnitude, 0.0, 1.0, 0);
    index.row("frequency," + std::to_string(fr.group) + ',' + file + ",zero-padded dft magnitude of w-z");
    ++out.responses;
  }
  nlohmann::json j{{"active_groups", out.active_groups},
                   {"distinct_codes", out.distinct_codes},
                   {"clusters", cfg.clusters},
                   {"inertia", out.inertia},
                   {"codes_on", cfg.codes_on}};

  if (cfg.stack) {
    StackConfig sc;
    sc.residual = cfg.residual;
    sc.spec = spec;
    sc.patterns = cfg.patterns;
    sc.seed = mix_seed(cfg.seed, 2);
    sc.dual_cfg.beta = cfg.beta;
    sc.dual_cfg.max_iters = std::max(1, cfg.dual_iters);
    const StackResult st = greedy_stack(block1, p.noisy_train, p.clean_train, sc);
    const ImageTensor mid = block1.apply(images);
    const ClusterAssignment a2 = label_maps("block2", st.block2.codes(mid), mid);
    j["block2"] = {{"objective_raw", st.objective},
                   {"active_groups", st.codes2.length()},
                   {"inertia", a2.inertia}};
  }
  ex.write_json("interpret.json", j);
  return out;
}

struct DenoiseRow {
  std::size_t image;
  double mse;
  double psnr;
};

/// Applies saved weights (primal.bin, else dual.bin + patterns.bin) to noisy
/// copies of the test images.
inline std::vector<DenoiseRow> mode_denoise(const ExperimentConfig& cfg) {
  if (cfg.weights.empty()) throw std::invalid_argument("denoise: pass the weights directory");
  Experiment ex(cfg);
  const auto dir = std::filesystem::path(cfg.weights);
  const Prepared p =
      prepare(cfg, load_dataset(cfg), Experiment::load_normalization((dir / "normalization.json").string()));
  Vector pred;
  if (std::filesystem::exists(dir / "primal.bin")) {
    pred = ex.primal_test_prediction(load_primal((dir / "primal.bin").string()), p);
  } else {
    pred = ex.dual_test_prediction(load_dual((dir / "dual.bin").string()),
                                   load_patterns((dir / "patterns.bin").string()), p);
  }
  ex.save_triptychs("denoise", p, pred);
  const ImageTensor out = unnormalize(reshape_like(pred, p.test), p.stats);
  const ImageTensor ref = unnormalize(p.clean_test, p.stats);
  CsvWriter csv(ex.path("denoise.csv"), "image,mse,psnr");
  std::vector<DenoiseRow> rows;
  for (std::size_t i = 0; i < ref.count(); ++i) {
    const ImageTensor o = out.slice(i, 1), r = ref.slice(i, 1);
    const auto [mn, mx] = std::minmax_element(r.values().begin(), r.values().end());
    const double e = mse(o, r);
    const double q = *mx > *mn ? psnr(o, r) : (e == 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    rows.push_back({i, e, q});
    csv.row(std::to_string(i) + ',' + detail::fmt(e) + ',' + (std::isinf(q) ? std::string("inf") : detail::fmt(q)));
  }
  return rows;
}

}  // namespace dualconv
