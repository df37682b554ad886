#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blocr/common.hpp"
#include "blocr/covreg.hpp"
#include "blocr/gibbs.hpp"
#include "blocr/inference.hpp"
#include "blocr/io.hpp"
#include "blocr/parallel.hpp"
#include "blocr/partition.hpp"
#include "blocr/rng.hpp"
#include "blocr/sumstats.hpp"

namespace blocr {

struct SimConfig {
  int n = 100;
  int T = 100;
  int M = 500;
  int J = 10;
  int p = 3;
  double sparsity = 0.80;      // target fraction of blocks with zero last-covariate effect
  bool null_effect = false;    // force beta for the last covariate to zero
  bool shared_partition = false;
  bool emit_raw = false;       // keep raw series; oracle scale only
  int replicates = 20;
  int iters = 3000;
  int burnin = 500;
  int stride = 1;
  std::uint64_t seed = 1;
  int min_block = 2;

  void validate() const {
    if (J < 2) throw validation_error("sim config: J must be >= 2");
    if (M < J * std::max(min_block, 1))
      throw validation_error("sim config: M too small for J blocks of size >= " +
                             std::to_string(min_block));
    if (n < 1 || T < 1 || p < 1) throw validation_error("sim config: n, T, p must be >= 1");
    if (!(sparsity > 0.0 && sparsity <= 1.0))
      throw validation_error("sim config: sparsity must lie in (0, 1]");
    if (replicates < 1) throw validation_error("sim config: replicates must be >= 1");
    Schedule s;
    s.iters = iters;
    s.burnin = burnin;
    s.stride = stride;
    s.validate();
    if (emit_raw && M > kOracleThreshold)
      throw validation_error("sim config: emit_raw is limited to M <= " +
                             std::to_string(kOracleThreshold));
  }
};

// Flat key=value text, one pair per line, '#' comments.
inline SimConfig parse_sim_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) kv[key] = value;
  }
  SimConfig cfg;
  auto take_int = [&](const char* key, int& out, bool required = true) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      if (required) throw validation_error("sim config: missing key \"" + std::string(key) + "\"");
      return;
    }
    out = std::stoi(it->second);
    kv.erase(it);
  };
  auto take_double = [&](const char* key, double& out, bool required = true) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      if (required) throw validation_error("sim config: missing key \"" + std::string(key) + "\"");
      return;
    }
    out = std::stod(it->second);
    kv.erase(it);
  };
  auto take_bool = [&](const char* key, bool& out) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    out = (it->second == "1" || it->second == "true" || it->second == "yes");
    kv.erase(it);
  };
  take_int("n", cfg.n);
  take_int("T", cfg.T);
  take_int("M", cfg.M);
  take_int("J", cfg.J);
  take_int("p", cfg.p, false);
  take_double("sparsity", cfg.sparsity, false);
  take_bool("null_effect", cfg.null_effect);
  take_bool("shared_partition", cfg.shared_partition);
  take_bool("emit_raw", cfg.emit_raw);
  take_int("replicates", cfg.replicates, false);
  take_int("iters", cfg.iters, false);
  take_int("burnin", cfg.burnin, false);
  take_int("stride", cfg.stride, false);
  take_int("min_block", cfg.min_block, false);
  if (auto it = kv.find("seed"); it != kv.end()) {
    cfg.seed = std::stoull(it->second);
    kv.erase(it);
  }
  if (!kv.empty()) throw validation_error("sim config: unknown key \"" + kv.begin()->first + "\"");
  cfg.validate();
  return cfg;
}

inline SimConfig read_sim_config(const std::filesystem::path& path) {
  return parse_sim_config(io::read_text_file(path));
}

inline std::string sim_config_to_string(const SimConfig& c) {
  std::ostringstream out;
  out << "n = " << c.n << "\nT = " << c.T << "\nM = " << c.M << "\nJ = " << c.J
      << "\np = " << c.p << "\nsparsity = " << io::format_double(c.sparsity)
      << "\nnull_effect = " << (c.null_effect ? 1 : 0)
      << "\nshared_partition = " << (c.shared_partition ? 1 : 0)
      << "\nemit_raw = " << (c.emit_raw ? 1 : 0) << "\nreplicates = " << c.replicates
      << "\niters = " << c.iters << "\nburnin = " << c.burnin << "\nstride = " << c.stride
      << "\nseed = " << c.seed << "\nmin_block = " << c.min_block << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Sparsity calibration. Block (j, l), l <= j, has an identically-zero
// last-covariate sensitivity exactly when every inclusion indicator feeding
// its derivative is off: pi_{j,0..l} and pi_{l,0..l-1} for l < j, or
// pi_{j,0..j-1} on the diagonal. With i.i.d. Bernoulli(rho) indicators the
// expected zero fraction is a polynomial in z = 1 - rho.

inline double expected_zero_fraction(int J, double rho) {
  const double z = 1.0 - rho;
  double zero_blocks = 0.0;
  for (int j = 0; j < J; ++j) {
    zero_blocks += std::pow(z, j);  // diagonal block j
    for (int l = 0; l < j; ++l) zero_blocks += std::pow(z, 2 * l + 1);
  }
  return zero_blocks / tri_count(J);
}

// Inclusion probability such that the expected fraction of blocks with zero
// effect meets the target; bisection on the monotone enumerated curve.
inline double sparsity_calibrate(int J, double target) {
  if (J < 2) throw validation_error("sparsity_calibrate: J must be >= 2");
  if (!(target > 0.0 && target <= 1.0))
    throw validation_error("sparsity_calibrate: target must lie in (0, 1]");
  const double floor_frac = expected_zero_fraction(J, 1.0);
  if (target < floor_frac)
    throw validation_error("sparsity_calibrate: target " + io::format_double(target) +
                           " is unreachable; minimum expected sparsity for J = " +
                           std::to_string(J) + " is " + io::format_double(floor_frac));
  double lo = 0.0, hi = 1.0;  // f(lo) = 1 >= target >= f(hi)
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (expected_zero_fraction(J, mid) >= target)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Data generation.

struct SimTruth {
  std::vector<BlockPartition> partitions;  // one per participant
  Eigen::MatrixXd eta;                     // n x J
  Eigen::MatrixXd lambda;                  // n x J
  CoefficientSet beta;
  std::vector<std::uint8_t> pi;            // pair_count(J)
  double pi_prob = 0.0;
  Eigen::MatrixXd x;                       // n x p

  SimTruth(int n, int J, int p) : eta(n, J), lambda(n, J), beta(p, J), x(n, p) {}

  double sensitivity(int i, int j, int l) const {
    return sensitivity_continuous(static_cast<int>(x.cols()) - 1, j, l, x.row(i).transpose(),
                                  beta, lambda.row(i).transpose(), partitions[i]);
  }
};

struct SimulatedData {
  std::vector<std::string> ids;
  std::vector<ParticipantSummary> summaries;
  SimTruth truth;
  std::vector<Eigen::MatrixXd> raw;  // populated only when emit_raw
};

// Draws one y_t row from N(0, Sigma) without materializing Sigma: the
// canonical factor gives y = nu_tilde (L sqrt(Lambda) z1) per block plus
// sqrt(eta_j) (g - mean(g)) within each block.
class ObservationSampler {
public:
  ObservationSampler(const BlockPartition& part, const Eigen::MatrixXd& chol_l,
                     const Eigen::VectorXd& lambda, const Eigen::VectorXd& eta)
      : part_(part),
        w_factor_(chol_l * lambda.array().sqrt().matrix().asDiagonal()),
        sqrt_eta_(eta.array().sqrt()),
        z_(part.J) {}

  void sample_row(Rng& rng, std::span<double> out) {
    const int J = part_.J;
    for (int j = 0; j < J; ++j) z_(j) = rng.normal();
    const Eigen::VectorXd w = w_factor_ * z_;
    for (int j = 0; j < J; ++j) {
      const int dj = part_.d[j];
      const int off = part_.offsets[j];
      const double mean_part = w(j) / std::sqrt(static_cast<double>(dj));
      std::span<double> block = out.subspan(off, dj);
      rng.fill_normal(block);
      double g_mean = 0.0;
      for (double v : block) g_mean += v;
      g_mean /= dj;
      for (double& v : block) v = mean_part + sqrt_eta_(j) * (v - g_mean);
    }
  }

private:
  BlockPartition part_;
  Eigen::MatrixXd w_factor_;
  Eigen::ArrayXd sqrt_eta_;
  Eigen::VectorXd z_;
};

namespace detail {

// Multinomial(M; 1/J) partition, rejected until every block has at least
// min_block entries.
inline BlockPartition sample_partition(Rng& rng, int M, int J, int min_block) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::vector<int> d(J, 0);
    for (int v = 0; v < M; ++v) ++d[rng.uniform_index(static_cast<std::uint64_t>(J))];
    bool ok = true;
    for (int dj : d)
      if (dj < min_block) ok = false;
    if (ok) return validate_partition(d);
  }
  throw validation_error("sample_partition: rejection failed; M too small for J blocks");
}

}  // namespace detail

inline SimulatedData generate_dataset(const SimConfig& cfg, ThreadPool& pool) {
  cfg.validate();
  const int n = cfg.n, J = cfg.J, p = cfg.p;

  SimulatedData data{{}, {}, SimTruth(n, J, p), {}};
  SimTruth& truth = data.truth;

  // Partitions.
  truth.partitions.resize(n);
  if (cfg.shared_partition) {
    Rng rng = Rng::substream(cfg.seed, StreamKind::sim_partition, 0);
    const BlockPartition shared = detail::sample_partition(rng, cfg.M, J, cfg.min_block);
    for (int i = 0; i < n; ++i) truth.partitions[i] = shared;
  } else {
    for (int i = 0; i < n; ++i) {
      Rng rng = Rng::substream(cfg.seed, StreamKind::sim_partition, static_cast<std::uint64_t>(i));
      truth.partitions[i] = detail::sample_partition(rng, cfg.M, J, cfg.min_block);
    }
  }

  // Block-wise error terms from the 0.05-spaced grid on [0.05, 1.5];
  // scaling factors fixed at 1/j.
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::substream(cfg.seed, StreamKind::sim_eta, static_cast<std::uint64_t>(i));
    for (int j = 0; j < J; ++j) {
      truth.eta(i, j) = 0.05 * static_cast<double>(1 + rng.uniform_index(30));
      truth.lambda(i, j) = 1.0 / static_cast<double>(j + 1);
    }
  }

  // Inclusion indicators and regression coefficients.
  truth.pi_prob = sparsity_calibrate(J, cfg.sparsity);
  truth.pi.assign(pair_count(J), 0);
  {
    Rng rng = Rng::substream(cfg.seed, StreamKind::sim_pi, 0);
    for (int j = 1; j < J; ++j)
      for (int l = 0; l < j; ++l)
        truth.pi[pair_index(j, l)] = rng.bernoulli(truth.pi_prob) ? 1 : 0;
  }
  {
    Rng rng = Rng::substream(cfg.seed, StreamKind::sim_beta, 0);
    for (int j = 1; j < J; ++j)
      for (int l = 0; l < j; ++l) {
        for (int q = 0; q + 1 < p; ++q) truth.beta.at(q, j, l) = rng.normal();
        truth.beta.at(p - 1, j, l) =
            cfg.null_effect ? 0.0 : 2.0 * static_cast<double>(truth.pi[pair_index(j, l)]);
      }
  }

  // Covariates: intercept, then alternating Bernoulli(0.5) and U(-0.5, 0.5).
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::substream(cfg.seed, StreamKind::sim_covariates, static_cast<std::uint64_t>(i));
    truth.x(i, 0) = 1.0;
    for (int q = 1; q < p; ++q)
      truth.x(i, q) = (q % 2 == 1) ? (rng.bernoulli(0.5) ? 1.0 : 0.0) : rng.uniform(-0.5, 0.5);
  }

  // Observations, streamed row-by-row into the summary accumulator.
  data.ids.resize(n);
  data.summaries.resize(n);
  if (cfg.emit_raw) data.raw.resize(n);
  pool.parallel_for(n, [&](int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%04d", i);
    data.ids[i] = buf;
    const BlockPartition& part = truth.partitions[i];
    const Eigen::MatrixXd chol_l = build_L(truth.x.row(i).transpose(), truth.beta);
    ObservationSampler sampler(part, chol_l, truth.lambda.row(i).transpose(),
                               truth.eta.row(i).transpose());
    SummaryAccumulator acc(part);
    Rng rng = Rng::substream(cfg.seed, StreamKind::sim_observations, static_cast<std::uint64_t>(i));
    std::vector<double> row(part.M);
    Eigen::MatrixXd raw;
    if (cfg.emit_raw) raw.resize(cfg.T, part.M);
    for (int t = 0; t < cfg.T; ++t) {
      sampler.sample_row(rng, row);
      acc.add_row(row);
      if (cfg.emit_raw) raw.row(t) = Eigen::Map<Eigen::RowVectorXd>(row.data(), part.M);
    }
    data.summaries[i] = acc.finish();
    if (cfg.emit_raw) data.raw[i] = std::move(raw);
  });
  return data;
}

inline void write_truth_json(const std::filesystem::path& path, const SimConfig& cfg,
                             const SimulatedData& data) {
  const SimTruth& truth = data.truth;
  nlohmann::json partitions = nlohmann::json::array();
  for (const auto& part : truth.partitions) partitions.push_back(part.d);
  std::vector<std::vector<double>> eta(cfg.n), lambda(cfg.n), x(cfg.n);
  for (int i = 0; i < cfg.n; ++i) {
    eta[i].assign(truth.eta.row(i).begin(), truth.eta.row(i).end());
    lambda[i].assign(truth.lambda.row(i).begin(), truth.lambda.row(i).end());
    x[i].assign(truth.x.row(i).begin(), truth.x.row(i).end());
  }
  std::vector<double> beta(truth.beta.flat().begin(), truth.beta.flat().end());
  nlohmann::json out{{"seed", cfg.seed},
                     {"n", cfg.n},
                     {"J", cfg.J},
                     {"p", cfg.p},
                     {"T", cfg.T},
                     {"sparsity", cfg.sparsity},
                     {"pi_prob", truth.pi_prob},
                     {"eta_rule", "grid-0.05-to-1.5-with-replacement"},
                     {"partitions", partitions},
                     {"eta", eta},
                     {"lambda", lambda},
                     {"beta", beta},
                     {"pi", truth.pi},
                     {"x", x}};
  io::write_text_file(path, out.dump() + "\n");
}

// ---------------------------------------------------------------------------
// Coverage scoring.

struct CoverageRates {
  double eta = 0.0;          // equal-tailed interval covers the true eta_{ij}
  double beta = 0.0;         // same, for covariates 0..p-2
  double pi = 0.0;           // rounded posterior median matches the true indicator
  double sensitivity = 0.0;  // interval covers the true last-covariate sensitivity
};

inline CoverageRates score_replicate(const PosteriorDraws& draws, const SimTruth& truth,
                                     double level) {
  const int n = draws.n, J = draws.J, p = draws.p;
  const std::size_t nd = draws.draws.size();
  if (nd < 2) throw validation_error("score_replicate: need at least two retained draws");
  CoverageRates rates;
  std::vector<double> values(nd);

  long long hits = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < J; ++j) {
      for (std::size_t k = 0; k < nd; ++k) values[k] = draws.draws[k].eta(i * J + j);
      const CredibleInterval ci = credible_interval(values, level);
      if (ci.lower <= truth.eta(i, j) && truth.eta(i, j) <= ci.upper) ++hits;
    }
  rates.eta = static_cast<double>(hits) / (static_cast<double>(n) * J);

  hits = 0;
  long long beta_total = 0;
  for (int q = 0; q + 1 < p; ++q)
    for (int j = 1; j < J; ++j)
      for (int l = 0; l < j; ++l) {
        const std::size_t idx = CoefficientSet::flat_index(p, J, q, j, l);
        for (std::size_t k = 0; k < nd; ++k) values[k] = draws.draws[k].beta(idx);
        const CredibleInterval ci = credible_interval(values, level);
        const double tv = truth.beta.at(q, j, l);
        if (ci.lower <= tv && tv <= ci.upper) ++hits;
        ++beta_total;
      }
  rates.beta = beta_total ? static_cast<double>(hits) / beta_total : 1.0;

  hits = 0;
  for (int idx = 0; idx < pair_count(J); ++idx) {
    long long ones = 0;
    for (std::size_t k = 0; k < nd; ++k) ones += draws.draws[k].pi[idx];
    const double median = (2 * ones >= static_cast<long long>(nd)) ? 1.0 : 0.0;
    if (static_cast<std::uint8_t>(median) == truth.pi[idx]) ++hits;
  }
  rates.pi = static_cast<double>(hits) / pair_count(J);

  hits = 0;
  long long sens_total = 0;
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd values_mat = sensitivity_draw_matrix(draws, i, p - 1, false);
    for (int j = 0; j < J; ++j)
      for (int l = 0; l <= j; ++l) {
        const Eigen::VectorXd col = values_mat.col(tri_index(j, l));
        const CredibleInterval ci =
            credible_interval({col.data(), static_cast<std::size_t>(col.size())}, level);
        const double tv = truth.sensitivity(i, j, l);
        if (ci.lower <= tv && tv <= ci.upper) ++hits;
        ++sens_total;
      }
  }
  rates.sensitivity = static_cast<double>(hits) / sens_total;
  return rates;
}

struct CoverageTable {
  struct Row {
    std::string quantity;
    double rate = 0.0;
    double se = 0.0;  // standard error of the mean across replicates
  };
  std::vector<Row> rows;
  int replicates = 0;

  const Row& row(const std::string& quantity) const {
    for (const auto& r : rows)
      if (r.quantity == quantity) return r;
    throw validation_error("coverage table: unknown quantity " + quantity);
  }
};

inline CoverageTable coverage_report(const std::vector<CoverageRates>& reps) {
  if (reps.size() < 2) throw validation_error("coverage_report: need >= 2 replicates");
  const double r = static_cast<double>(reps.size());
  auto summarize = [&](const std::string& name, auto getter) {
    double mean = 0.0;
    for (const auto& rep : reps) mean += getter(rep);
    mean /= r;
    double var = 0.0;
    for (const auto& rep : reps) var += (getter(rep) - mean) * (getter(rep) - mean);
    var /= (r - 1.0);
    return CoverageTable::Row{name, mean, std::sqrt(var / r)};
  };
  CoverageTable table;
  table.replicates = static_cast<int>(reps.size());
  table.rows.push_back(summarize("eta", [](const CoverageRates& c) { return c.eta; }));
  table.rows.push_back(summarize("beta", [](const CoverageRates& c) { return c.beta; }));
  table.rows.push_back(summarize("pi", [](const CoverageRates& c) { return c.pi; }));
  table.rows.push_back(
      summarize("sensitivity", [](const CoverageRates& c) { return c.sensitivity; }));
  return table;
}

// Generates, fits, and scores `replicates` independent datasets. Replicates
// run in parallel; each replicate's sampler is single-threaded so the outer
// parallelism carries the load.
inline CoverageTable run_coverage_study(const SimConfig& cfg, ThreadPool& pool,
                                        const std::function<void(int)>& on_replicate = {},
                                        double level = 0.95) {
  cfg.validate();
  std::vector<CoverageRates> rates(cfg.replicates);
  pool.parallel_for(cfg.replicates, [&](int r) {
    SimConfig rep_cfg = cfg;
    rep_cfg.seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(StreamKind::sim_replicate),
                                          static_cast<std::uint64_t>(r)});
    ThreadPool inner(1);
    const SimulatedData data = generate_dataset(rep_cfg, inner);
    FitData fit;
    fit.summaries = data.summaries;
    fit.x = data.truth.x;
    fit.ids = data.ids;
    PriorConfig priors;
    Schedule schedule;
    schedule.iters = cfg.iters;
    schedule.burnin = cfg.burnin;
    schedule.stride = cfg.stride;
    schedule.seed = derive_seed(rep_cfg.seed, {static_cast<std::uint64_t>(StreamKind::test), 7});
    const PosteriorDraws draws = run_chain(fit, priors, schedule, inner);
    rates[r] = score_replicate(draws, data.truth, level);
    if (on_replicate) on_replicate(r);
  });
  return coverage_report(rates);
}

inline void write_coverage_csv(const std::filesystem::path& path,
                               const std::vector<std::pair<std::string, CoverageTable>>& tables) {
  std::ostringstream out;
  out << "label,replicates,eta,eta_se,beta,beta_se,pi,pi_se,sensitivity,sensitivity_se\n";
  for (const auto& [label, table] : tables) {
    out << label << ',' << table.replicates;
    for (const char* q : {"eta", "beta", "pi", "sensitivity"}) {
      const auto& row = table.row(q);
      out << ',' << io::format_double(row.rate) << ',' << io::format_double(row.se);
    }
    out << "\n";
  }
  io::write_text_file(path, out.str());
}

}  // namespace blocr
