#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "blocr/common.hpp"
#include "blocr/covreg.hpp"
#include "blocr/io.hpp"
#include "blocr/parallel.hpp"
#include "blocr/rng.hpp"
#include "blocr/sumstats.hpp"

namespace blocr {

struct PriorConfig {
  double a0 = 2.01, b0 = 1.01;      // Inv-Gamma on eta
  double a1 = 2.01, b1 = 1.01;      // Inv-Gamma on lambda
  double q1 = 0.5;                  // Bernoulli inclusion probability
  double tau0sq = 0.01;             // narrow component (excluded)
  double tau1sq = 1.0;              // wide component (included)
  double tau2sq = 1.0;              // plain Gaussian for non-selected covariates

  void validate() const {
    if (a0 <= 0 || b0 <= 0 || a1 <= 0 || b1 <= 0)
      throw validation_error("priors: Inv-Gamma parameters must be positive");
    if (q1 < 0 || q1 > 1) throw validation_error("priors: q1 must lie in [0, 1]");
    if (tau0sq <= 0 || tau1sq <= 0 || tau2sq <= 0)
      throw validation_error("priors: variances must be positive");
    if (tau1sq <= tau0sq) throw validation_error("priors: require tau1sq > tau0sq");
  }

  std::uint64_t hash() const {
    std::ostringstream ss;
    ss << io::format_double(a0) << ',' << io::format_double(b0) << ','
       << io::format_double(a1) << ',' << io::format_double(b1) << ','
       << io::format_double(q1) << ',' << io::format_double(tau0sq) << ','
       << io::format_double(tau1sq) << ',' << io::format_double(tau2sq);
    return io::fnv1a(ss.str());
  }
};

struct Schedule {
  int iters = 6000;
  int burnin = 1000;
  int stride = 1;
  std::uint64_t seed = 1;
  int threads = 1;
  bool debug_full_u_recompute = false;

  void validate() const {
    if (iters < 1 || burnin < 0 || burnin >= iters)
      throw validation_error("schedule: need 0 <= burnin < iters");
    if (stride < 1) throw validation_error("schedule: stride must be >= 1");
    if (threads < 1) throw validation_error("schedule: threads must be >= 1");
  }

  int retained() const { return (iters - burnin) / stride; }
};

// Everything the sampler reads: summaries plus the covariate matrix.
struct FitData {
  std::vector<ParticipantSummary> summaries;
  Eigen::MatrixXd x;  // n x p
  std::vector<std::string> ids;

  int n() const { return static_cast<int>(summaries.size()); }
  int J() const { return summaries.empty() ? 0 : summaries.front().partition.J; }
  int p() const { return static_cast<int>(x.cols()); }

  void validate() const {
    if (summaries.empty()) throw validation_error("fit data: no participants");
    if (x.rows() != n())
      throw validation_error("fit data: covariate rows (" + std::to_string(x.rows()) +
                             ") != participant count (" + std::to_string(n()) + ")");
    if (x.cols() < 1) throw validation_error("fit data: need at least one covariate");
    const int J = summaries.front().partition.J;
    for (const auto& s : summaries)
      if (s.partition.J != J)
        throw validation_error("fit data: summaries disagree on block count J");
    if (!ids.empty() && static_cast<int>(ids.size()) != n())
      throw validation_error("fit data: id count != participant count");
  }
};

// Number of strictly-lower-triangular (j, l) pairs and their linear index.
inline int pair_count(int J) { return J * (J - 1) / 2; }
inline int pair_index(int j, int l) { return j * (j - 1) / 2 + l; }

struct ChainState {
  Eigen::MatrixXd eta;             // n x J
  Eigen::MatrixXd lambda;          // n x J
  CoefficientSet coeffs;
  std::vector<std::uint8_t> pi;    // pair_count(J)
  std::vector<Eigen::MatrixXd> chol_l;  // per participant, J x J unit lower
  std::vector<Eigen::MatrixXd> u;       // per participant, (L^{-1})^T cache
  long iteration = 0;
  std::uint64_t seed = 0;

  static ChainState init(const FitData& data, std::uint64_t seed) {
    ChainState st{Eigen::MatrixXd::Ones(data.n(), data.J()),
                  Eigen::MatrixXd::Ones(data.n(), data.J()),
                  CoefficientSet(data.p(), data.J()),
                  std::vector<std::uint8_t>(pair_count(data.J()), 1),
                  {},
                  {},
                  0,
                  seed};
    st.rebuild_factors(data);
    return st;
  }

  // Recomputes every participant's L and U from the current coefficients.
  void rebuild_factors(const FitData& data) {
    const int n = data.n();
    chol_l.resize(n);
    u.resize(n);
    for (int i = 0; i < n; ++i) {
      chol_l[i] = build_L(data.x.row(i).transpose(), coeffs);
      u[i] = forward_substitute_U(chol_l[i]);
    }
  }
};

namespace detail {

inline double log_invgamma_pdf(double x, double shape, double rate) {
  return shape * std::log(rate) - std::lgamma(shape) - (shape + 1.0) * std::log(x) - rate / x;
}

inline double log_normal_pdf(double x, double variance) {
  return -0.5 * std::log(2.0 * M_PI * variance) - 0.5 * x * x / variance;
}

// Quadratic form U_{1:j,j}' A_{1:j,1:j} U_{1:j,j} for 0-based column j.
inline double u_quadratic_form(const Eigen::MatrixXd& u, const Eigen::MatrixXd& a, int j) {
  const auto uj = u.col(j).head(j + 1);
  return uj.dot(a.topLeftCorner(j + 1, j + 1) * uj);
}

}  // namespace detail

// Posterior inclusion probability of the wide component given the current
// spike-and-slab coefficient value; computed in log space.
inline double inclusion_probability(double beta_value, const PriorConfig& priors) {
  if (priors.q1 <= 0.0) return 0.0;
  if (priors.q1 >= 1.0) return 1.0;
  const double log_in = std::log(priors.q1) + detail::log_normal_pdf(beta_value, priors.tau1sq);
  const double log_out =
      std::log1p(-priors.q1) + detail::log_normal_pdf(beta_value, priors.tau0sq);
  return 1.0 / (1.0 + std::exp(log_out - log_in));
}

// eta_{ij} | . ~ Inv-Gamma(a0 + T_i (d_ij - 1)/2, b0 + (T_i/2){tr S_jj - 1'S_jj 1 / d_ij}).
inline void sample_eta(ChainState& state, const FitData& data, const PriorConfig& priors,
                       ThreadPool& pool) {
  const int J = data.J();
  pool.parallel_for(data.n(), [&](int i) {
    const ParticipantSummary& s = data.summaries[i];
    const double t = static_cast<double>(s.T);
    for (int j = 0; j < J; ++j) {
      const int dj = s.partition.d[j];
      double resid = s.tr_s(j) - s.one_s_one(j) / dj;
      if (resid < 0.0) {
        if (resid < -1e-10 * std::max(1.0, s.tr_s(j)))
          throw numeric_error("sample_eta: negative within-block residual, corrupted summary");
        resid = 0.0;
      }
      const double shape = priors.a0 + 0.5 * t * (dj - 1);
      const double rate = priors.b0 + 0.5 * t * resid;
      Rng rng = Rng::substream(state.seed, StreamKind::eta,
                               static_cast<std::uint64_t>(state.iteration), i, j);
      state.eta(i, j) = rng.inv_gamma(shape, rate);
    }
  });
}

// lambda_{ij} | . ~ Inv-Gamma(a1 + T_i/2, b1 + (T_i/2) U'AU form).
inline void sample_lambda(ChainState& state, const FitData& data, const PriorConfig& priors,
                          ThreadPool& pool) {
  const int J = data.J();
  pool.parallel_for(data.n(), [&](int i) {
    const ParticipantSummary& s = data.summaries[i];
    const double t = static_cast<double>(s.T);
    for (int j = 0; j < J; ++j) {
      double form = detail::u_quadratic_form(state.u[i], s.a, j);
      if (form < 0.0) {
        if (form < -1e-10 * std::max(1.0, s.a(j, j)))
          throw numeric_error("sample_lambda: negative quadratic form, corrupted A");
        form = 0.0;
      }
      Rng rng = Rng::substream(state.seed, StreamKind::lambda,
                               static_cast<std::uint64_t>(state.iteration), i, j);
      state.lambda(i, j) = rng.inv_gamma(priors.a1 + 0.5 * t, priors.b1 + 0.5 * t * form);
    }
  });
}

// One block draw: beta_j ~ N(C_j^{-1} mu_j, C_j^{-1}) computed as
// C^{-1/2}(C^{-1/2} mu + Z) via eigendecomposition, then the U caches are
// brought current for columns >= j.
inline void sample_beta_block(int j, ChainState& state, const FitData& data,
                              const PriorConfig& priors, ThreadPool& pool) {
  const int J = data.J();
  const int p = data.p();
  if (j < 1 || j >= J) throw validation_error("sample_beta_block: need 1 <= j < J");
  const int m = j;          // number of lower positions in row j
  const int dim = p * m;

  struct Acc {
    Eigen::MatrixXd c;
    Eigen::VectorXd mu;
  };
  Acc zero{Eigen::MatrixXd::Zero(dim, dim), Eigen::VectorXd::Zero(dim)};
  Acc total = chunked_reduce(
      pool, data.n(), 16, zero,
      [&](int begin, int end) {
        Acc acc{Eigen::MatrixXd::Zero(dim, dim), Eigen::VectorXd::Zero(dim)};
        Eigen::MatrixXd b(m, m);
        Eigen::VectorXd w(m);
        for (int i = begin; i < end; ++i) {
          const ParticipantSummary& s = data.summaries[i];
          const auto g = state.u[i].topLeftCorner(m, m);
          const double scale = static_cast<double>(s.T) / state.lambda(i, j);
          w.noalias() = g.transpose() * s.a.col(j).head(m);
          b.noalias() = g.transpose() * s.a.topLeftCorner(m, m) * g;
          for (int q = 0; q < p; ++q) {
            const double xq = data.x(i, q);
            acc.mu.segment(q * m, m) += (scale * xq) * w;
            for (int r = 0; r < p; ++r)
              acc.c.block(q * m, r * m, m, m) += (scale * xq * data.x(i, r)) * b;
          }
        }
        return acc;
      },
      [](Acc& into, Acc&& part) {
        into.c += part.c;
        into.mu += part.mu;
      });

  // Prior precision: tau2^{-2} for covariates 0..p-2, then the spike/slab
  // entry per pair indicator.
  for (int q = 0; q + 1 < p; ++q)
    total.c.diagonal().segment(q * m, m).array() += 1.0 / priors.tau2sq;
  for (int l = 0; l < m; ++l) {
    const bool in = state.pi[pair_index(j, l)] != 0;
    total.c((p - 1) * m + l, (p - 1) * m + l) += in ? 1.0 / priors.tau1sq : 1.0 / priors.tau0sq;
  }

  Eigen::MatrixXd c_sym = 0.5 * (total.c + total.c.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c_sym);
  if (eig.info() != Eigen::Success)
    throw numeric_error("sample_beta_block: eigendecomposition failed");
  Eigen::VectorXd evals = eig.eigenvalues();
  const double max_eval = evals.maxCoeff();
  if (!(max_eval > 0.0))
    throw numeric_error("sample_beta_block: conditional precision is not positive definite");
  const double floor = 1e-12 * max_eval;
  for (int k = 0; k < dim; ++k) evals(k) = std::max(evals(k), floor);

  const Eigen::MatrixXd& v = eig.eigenvectors();
  const Eigen::MatrixXd c_inv_sqrt =
      v * evals.array().rsqrt().matrix().asDiagonal() * v.transpose();

  Rng rng = Rng::substream(state.seed, StreamKind::beta,
                           static_cast<std::uint64_t>(state.iteration), j);
  Eigen::VectorXd z(dim);
  rng.fill_normal({z.data(), static_cast<std::size_t>(dim)});
  state.coeffs.beta_block(j) = c_inv_sqrt * (c_inv_sqrt * total.mu + z);

  // Row j of every participant's L changed; columns >= j of U are stale.
  pool.parallel_for(data.n(), [&](int i) {
    for (int l = 0; l < j; ++l)
      state.chol_l[i](j, l) = data.x.row(i).dot(state.coeffs.beta_pair(j, l).transpose());
    refresh_U_columns(state.chol_l[i], state.u[i], j);
  });
}

// pi_{jl} | beta ~ Bernoulli(inclusion probability of the wide component).
inline void sample_pi(ChainState& state, const PriorConfig& priors) {
  const int J = state.coeffs.block_count();
  const int p = state.coeffs.covariate_count();
  for (int j = 1; j < J; ++j) {
    for (int l = 0; l < j; ++l) {
      const double prob = inclusion_probability(state.coeffs.at(p - 1, j, l), priors);
      Rng rng = Rng::substream(state.seed, StreamKind::pi,
                               static_cast<std::uint64_t>(state.iteration), j, l);
      state.pi[pair_index(j, l)] = rng.bernoulli(prob) ? 1 : 0;
    }
  }
}

inline double log_posterior(const ChainState& state, const FitData& data,
                            const PriorConfig& priors, ThreadPool& pool) {
  const int J = data.J();
  const int p = data.p();
  double ll = chunked_reduce(
      pool, data.n(), 16, 0.0,
      [&](int begin, int end) {
        double acc = 0.0;
        for (int i = begin; i < end; ++i) {
          acc += log_likelihood(data.summaries[i], state.eta.row(i).transpose(),
                                state.lambda.row(i).transpose(), state.u[i]);
          for (int j = 0; j < J; ++j) {
            acc += detail::log_invgamma_pdf(state.eta(i, j), priors.a0, priors.b0);
            acc += detail::log_invgamma_pdf(state.lambda(i, j), priors.a1, priors.b1);
          }
        }
        return acc;
      },
      [](double& into, double&& part) { into += part; });
  for (int j = 1; j < J; ++j) {
    for (int l = 0; l < j; ++l) {
      const bool in = state.pi[pair_index(j, l)] != 0;
      ll += detail::log_normal_pdf(state.coeffs.at(p - 1, j, l),
                                   in ? priors.tau1sq : priors.tau0sq);
      ll += in ? std::log(priors.q1) : std::log1p(-priors.q1);
      for (int q = 0; q + 1 < p; ++q)
        ll += detail::log_normal_pdf(state.coeffs.at(q, j, l), priors.tau2sq);
    }
  }
  return ll;
}

// One retained sample of the full parameter vector.
struct Draw {
  Eigen::VectorXd eta;            // n*J, participant-major
  Eigen::VectorXd lambda;         // n*J
  Eigen::VectorXd beta;           // CoefficientSet flat layout
  std::vector<std::uint8_t> pi;   // pair_count(J)
  double log_post = 0.0;
};

struct ParticipantMeta {
  std::string id;
  int T = 0;
  std::vector<int> d;
  Eigen::VectorXd x;
};

struct PosteriorDraws {
  int n = 0, J = 0, p = 0;
  std::vector<ParticipantMeta> participants;
  PriorConfig priors;
  Schedule schedule;
  std::vector<Draw> draws;

  double eta_at(int draw, int i, int j) const { return draws[draw].eta(i * J + j); }
  double lambda_at(int draw, int i, int j) const { return draws[draw].lambda(i * J + j); }
  CoefficientSet coeffs_at(int draw) const {
    CoefficientSet c(p, J);
    c.flat() = draws[draw].beta;
    return c;
  }
};

using ProgressFn = std::function<void(int iteration, double log_post)>;

// Full sweep scheduler. Sweep order per iteration: eta, lambda, then for
// j = 1..J-1 the block draw beta_j with its U refresh, then pi. Draws are
// recorded after burn-in every `stride` sweeps.
inline PosteriorDraws run_chain(const FitData& data, const PriorConfig& priors,
                                const Schedule& schedule, ThreadPool& pool,
                                const ProgressFn& progress = {}) {
  data.validate();
  priors.validate();
  schedule.validate();
  for (const auto& s : data.summaries)
    if (s.T < 1) throw validation_error("run_chain: summary with T < 1");

  const int n = data.n();
  const int J = data.J();
  const int p = data.p();

  PosteriorDraws out;
  out.n = n;
  out.J = J;
  out.p = p;
  out.priors = priors;
  out.schedule = schedule;
  out.participants.reserve(n);
  for (int i = 0; i < n; ++i) {
    ParticipantMeta meta;
    meta.id = data.ids.empty() ? "participant" + std::to_string(i) : data.ids[i];
    meta.T = data.summaries[i].T;
    meta.d = data.summaries[i].partition.d;
    meta.x = data.x.row(i).transpose();
    out.participants.push_back(std::move(meta));
  }
  out.draws.reserve(schedule.retained());

  ChainState state = ChainState::init(data, schedule.seed);
  for (int iter = 0; iter < schedule.iters; ++iter) {
    state.iteration = iter;
    sample_eta(state, data, priors, pool);
    sample_lambda(state, data, priors, pool);
    for (int j = 1; j < J; ++j) sample_beta_block(j, state, data, priors, pool);
    if (schedule.debug_full_u_recompute) {
      for (int i = 0; i < n; ++i) {
        Eigen::MatrixXd fresh = forward_substitute_U(state.chol_l[i]);
        if ((fresh - state.u[i]).cwiseAbs().maxCoeff() > 1e-8)
          throw numeric_error("run_chain: incremental U cache drifted from full recompute");
        state.u[i] = std::move(fresh);
      }
    }
    sample_pi(state, priors);

    const double lp = log_posterior(state, data, priors, pool);
    if (!std::isfinite(lp))
      throw numeric_error("run_chain: non-finite log posterior at iteration " +
                          std::to_string(iter));
    if (progress) progress(iter, lp);

    if (iter >= schedule.burnin && (iter - schedule.burnin + 1) % schedule.stride == 0) {
      Draw d;
      d.eta.resize(n * J);
      d.lambda.resize(n * J);
      for (int i = 0; i < n; ++i) {
        d.eta.segment(i * J, J) = state.eta.row(i).transpose();
        d.lambda.segment(i * J, J) = state.lambda.row(i).transpose();
      }
      d.beta = state.coeffs.flat();
      d.pi = state.pi;
      d.log_post = lp;
      out.draws.push_back(std::move(d));
    }
  }
  return out;
}

// Retained draw with the highest joint log posterior (earliest on ties).
inline const Draw& map_estimate(const PosteriorDraws& draws) {
  if (draws.draws.empty()) throw validation_error("map_estimate: no retained draws");
  std::size_t best = 0;
  for (std::size_t k = 1; k < draws.draws.size(); ++k)
    if (draws.draws[k].log_post > draws.draws[best].log_post) best = k;
  return draws.draws[best];
}

// ---------------------------------------------------------------------------
// BDRW v1: magic "BDRW", u32 version, u32 n, u32 J, u32 p, u32 n_draws,
// u32 iters, u32 burnin, u32 stride, u64 seed, u64 prior hash, 8*f64 priors,
// per participant {u32 id_len, id, u32 T, J*u32 d, p*f64 x}, then per draw
// {n*J f64 eta, n*J f64 lambda, pJ(J-1)/2 f64 beta, J(J-1)/2 u8 pi, f64 lp}.

inline void write_draws_file(const std::filesystem::path& path, const PosteriorDraws& draws) {
  io::BinaryWriter w(path);
  w.magic("BDRW");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(draws.n));
  w.u32(static_cast<std::uint32_t>(draws.J));
  w.u32(static_cast<std::uint32_t>(draws.p));
  w.u32(static_cast<std::uint32_t>(draws.draws.size()));
  w.u32(static_cast<std::uint32_t>(draws.schedule.iters));
  w.u32(static_cast<std::uint32_t>(draws.schedule.burnin));
  w.u32(static_cast<std::uint32_t>(draws.schedule.stride));
  w.u64(draws.schedule.seed);
  w.u64(draws.priors.hash());
  const double prior_vals[8] = {draws.priors.a0,     draws.priors.b0,     draws.priors.a1,
                                draws.priors.b1,     draws.priors.q1,     draws.priors.tau0sq,
                                draws.priors.tau1sq, draws.priors.tau2sq};
  w.f64_array(prior_vals, 8);
  for (const auto& meta : draws.participants) {
    w.u32(static_cast<std::uint32_t>(meta.id.size()));
    for (char c : meta.id) w.u8(static_cast<std::uint8_t>(c));
    w.u32(static_cast<std::uint32_t>(meta.T));
    for (int dj : meta.d) w.u32(static_cast<std::uint32_t>(dj));
    w.f64_array(meta.x.data(), draws.p);
  }
  for (const auto& d : draws.draws) {
    w.f64_array(d.eta.data(), d.eta.size());
    w.f64_array(d.lambda.data(), d.lambda.size());
    w.f64_array(d.beta.data(), d.beta.size());
    for (std::uint8_t b : d.pi) w.u8(b);
    w.f64(d.log_post);
  }
  w.close();
}

inline PosteriorDraws read_draws_file(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("BDRW", "draws file");
  const std::uint32_t version = r.u32();
  if (version != 1) throw validation_error("draws file: unsupported version");
  PosteriorDraws out;
  out.n = static_cast<int>(r.u32());
  out.J = static_cast<int>(r.u32());
  out.p = static_cast<int>(r.u32());
  const std::uint32_t n_draws = r.u32();
  out.schedule.iters = static_cast<int>(r.u32());
  out.schedule.burnin = static_cast<int>(r.u32());
  out.schedule.stride = static_cast<int>(r.u32());
  out.schedule.seed = r.u64();
  const std::uint64_t stored_hash = r.u64();
  double pv[8];
  r.f64_array(pv, 8);
  out.priors = PriorConfig{pv[0], pv[1], pv[2], pv[3], pv[4], pv[5], pv[6], pv[7]};
  if (out.priors.hash() != stored_hash)
    throw validation_error("draws file: prior hash mismatch");
  if (out.n < 1 || out.J < 1 || out.p < 1)
    throw validation_error("draws file: bad header dimensions");
  out.participants.resize(out.n);
  for (auto& meta : out.participants) {
    const std::uint32_t len = r.u32();
    meta.id.resize(len);
    for (std::uint32_t k = 0; k < len; ++k) meta.id[k] = static_cast<char>(r.u8());
    meta.T = static_cast<int>(r.u32());
    meta.d.resize(out.J);
    for (int& dj : meta.d) dj = static_cast<int>(r.u32());
    meta.x.resize(out.p);
    r.f64_array(meta.x.data(), out.p);
  }
  const int nj = out.n * out.J;
  const int nb = out.p * pair_count(out.J);
  const int np = pair_count(out.J);
  out.draws.resize(n_draws);
  for (auto& d : out.draws) {
    d.eta.resize(nj);
    r.f64_array(d.eta.data(), nj);
    d.lambda.resize(nj);
    r.f64_array(d.lambda.data(), nj);
    d.beta.resize(nb);
    r.f64_array(d.beta.data(), nb);
    d.pi.resize(np);
    for (auto& b : d.pi) b = r.u8();
    d.log_post = r.f64();
  }
  return out;
}

// CSV export of the regression and inclusion draws; indices are 1-based to
// match the reporting convention.
inline void export_draws_csv(const PosteriorDraws& draws, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "draw";
  for (int q = 0; q < draws.p; ++q)
    for (int j = 1; j < draws.J; ++j)
      for (int l = 0; l < j; ++l)
        out << ",beta[" << q + 1 << "][" << j + 1 << "][" << l + 1 << "]";
  for (int j = 1; j < draws.J; ++j)
    for (int l = 0; l < j; ++l) out << ",pi[" << j + 1 << "][" << l + 1 << "]";
  out << "\n";
  for (std::size_t k = 0; k < draws.draws.size(); ++k) {
    out << k;
    const CoefficientSet coeffs = draws.coeffs_at(static_cast<int>(k));
    for (int q = 0; q < draws.p; ++q)
      for (int j = 1; j < draws.J; ++j)
        for (int l = 0; l < j; ++l) out << ',' << io::format_double(coeffs.at(q, j, l));
    for (int j = 1; j < draws.J; ++j)
      for (int l = 0; l < j; ++l)
        out << ',' << static_cast<int>(draws.draws[k].pi[pair_index(j, l)]);
    out << "\n";
  }
  io::write_text_file(path, out.str());
}

}  // namespace blocr
