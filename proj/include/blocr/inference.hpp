#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "blocr/common.hpp"
#include "blocr/covreg.hpp"
#include "blocr/gibbs.hpp"
#include "blocr/io.hpp"

namespace blocr {

// Linear-interpolation (type 7) sample quantile; values must be sorted.
inline double quantile_type7(std::span<const double> sorted, double prob) {
  if (sorted.empty()) throw validation_error("quantile: empty sample");
  if (prob <= 0.0) return sorted.front();
  if (prob >= 1.0) return sorted.back();
  const double h = prob * (static_cast<double>(sorted.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double w = h - static_cast<double>(lo);
  return (1.0 - w) * sorted[lo] + w * sorted[hi];
}

struct CredibleInterval {
  double lower = 0.0;
  double mean = 0.0;
  double upper = 0.0;
  bool significant = false;  // interval excludes zero
};

// Equal-tailed interval at the given level plus the posterior mean.
inline CredibleInterval credible_interval(std::span<const double> values, double level) {
  if (values.empty()) throw validation_error("credible_interval: no draws");
  if (level <= 0.0 || level >= 1.0)
    throw validation_error("credible_interval: level must lie in (0, 1)");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  CredibleInterval ci;
  const double tail = 0.5 * (1.0 - level);
  ci.lower = quantile_type7(sorted, tail);
  ci.upper = quantile_type7(sorted, 1.0 - tail);
  double sum = 0.0;
  for (double v : sorted) sum += v;
  ci.mean = sum / static_cast<double>(sorted.size());
  ci.significant = ci.lower > 0.0 || ci.upper < 0.0;
  return ci;
}

inline bool test_block_significance(const CredibleInterval& ci) { return ci.significant; }

// Lower-triangle (diagonal included) linear index for (j, l), l <= j.
inline int tri_index(int j, int l) { return j * (j + 1) / 2 + l; }
inline int tri_count(int J) { return J * (J + 1) / 2; }

// Per-draw values of the covariate-sensitivity functional for one
// participant, all blocks: n_draws x tri_count(J). The functional is
// evaluated per retained draw, never at averaged parameters.
inline Eigen::MatrixXd sensitivity_draw_matrix(const PosteriorDraws& draws, int participant,
                                               int q, bool binary) {
  if (participant < 0 || participant >= draws.n)
    throw validation_error("sensitivity: participant index out of range");
  if (q < 0 || q >= draws.p) throw validation_error("sensitivity: covariate index out of range");
  if (binary && q != draws.p - 1)
    throw validation_error("sensitivity: the designated binary covariate is the last one");
  if (draws.draws.empty()) throw validation_error("sensitivity: no retained draws");
  const ParticipantMeta& meta = draws.participants[participant];
  const BlockPartition part = validate_partition(meta.d);
  const int J = draws.J;
  Eigen::MatrixXd values(static_cast<Eigen::Index>(draws.draws.size()), tri_count(J));
  Eigen::VectorXd lambda(J);
  for (std::size_t k = 0; k < draws.draws.size(); ++k) {
    const CoefficientSet coeffs = draws.coeffs_at(static_cast<int>(k));
    for (int j = 0; j < J; ++j) lambda(j) = draws.draws[k].lambda(participant * J + j);
    for (int j = 0; j < J; ++j) {
      for (int l = 0; l <= j; ++l) {
        values(static_cast<Eigen::Index>(k), tri_index(j, l)) =
            binary ? sensitivity_binary(j, l, meta.x, coeffs, lambda, part)
                   : sensitivity_continuous(q, j, l, meta.x, coeffs, lambda, part);
      }
    }
  }
  return values;
}

inline CredibleInterval credible_interval_sensitivity(const PosteriorDraws& draws,
                                                      int participant, int j, int l, int q,
                                                      double level, bool binary = false) {
  if (j < l) std::swap(j, l);
  const Eigen::MatrixXd values = sensitivity_draw_matrix(draws, participant, q, binary);
  const Eigen::VectorXd col = values.col(tri_index(j, l));
  return credible_interval({col.data(), static_cast<std::size_t>(col.size())}, level);
}

struct SensitivityReport {
  int J = 0;
  int q = 0;  // 0-based covariate index
  bool binary = false;
  double level = 0.95;
  double threshold = 0.95;
  std::string coding;

  struct Entry {
    int participant;
    int j, l;
    CredibleInterval interval;
  };
  std::vector<Entry> entries;              // participant-major, block order
  Eigen::MatrixXd fraction_significant;    // J x J, symmetric
  std::vector<std::pair<int, int>> selected;  // blocks with fraction > threshold (strict)
};

// Blocks whose significant fraction strictly exceeds the threshold.
inline std::vector<std::pair<int, int>> significance_across_participants(
    const Eigen::MatrixXd& fraction, double threshold) {
  std::vector<std::pair<int, int>> selected;
  for (int j = 0; j < fraction.rows(); ++j)
    for (int l = 0; l <= j; ++l)
      if (fraction(j, l) > threshold) selected.emplace_back(j, l);
  return selected;
}

inline SensitivityReport build_sensitivity_report(const PosteriorDraws& draws, int q, bool binary,
                                                  double level, double threshold,
                                                  std::string coding = {}) {
  if (draws.draws.empty()) throw validation_error("sensitivity report: no retained draws");
  SensitivityReport report;
  report.J = draws.J;
  report.q = q;
  report.binary = binary;
  report.level = level;
  report.threshold = threshold;
  report.coding = std::move(coding);
  report.fraction_significant = Eigen::MatrixXd::Zero(draws.J, draws.J);

  for (int i = 0; i < draws.n; ++i) {
    const Eigen::MatrixXd values = sensitivity_draw_matrix(draws, i, q, binary);
    for (int j = 0; j < draws.J; ++j) {
      for (int l = 0; l <= j; ++l) {
        const Eigen::VectorXd col = values.col(tri_index(j, l));
        CredibleInterval ci =
            credible_interval({col.data(), static_cast<std::size_t>(col.size())}, level);
        if (ci.significant) report.fraction_significant(j, l) += 1.0;
        report.entries.push_back({i, j, l, ci});
      }
    }
  }
  report.fraction_significant /= static_cast<double>(draws.n);
  report.fraction_significant =
      report.fraction_significant.selfadjointView<Eigen::Lower>();
  report.selected = significance_across_participants(report.fraction_significant, threshold);
  return report;
}

// ---------------------------------------------------------------------------
// Fit quality: scaled MAP core matrix against the scaled observed summary A.

struct FitReport {
  struct Entry {
    std::string id;
    Eigen::MatrixXd scaled_a;       // unit-diagonal A
    Eigen::MatrixXd scaled_delta;   // unit-diagonal Delta from the MAP draw
    double correlation = 0.0;       // Pearson over the lower triangle
    double max_abs_deviation = 0.0;
  };
  std::vector<Entry> entries;
};

// m_{jl} / sqrt(m_jj m_ll); fails on nonpositive diagonal.
inline Eigen::MatrixXd scale_to_unit_diagonal(const Eigen::MatrixXd& m) {
  const int J = static_cast<int>(m.rows());
  Eigen::VectorXd d(J);
  for (int j = 0; j < J; ++j) {
    if (m(j, j) <= 0.0)
      throw validation_error("scaling: nonpositive diagonal entry at block " + std::to_string(j));
    d(j) = 1.0 / std::sqrt(m(j, j));
  }
  return d.asDiagonal() * m * d.asDiagonal();
}

inline double pearson_lower_triangle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const int J = static_cast<int>(a.rows());
  const int count = tri_count(J);
  double ma = 0.0, mb = 0.0;
  for (int j = 0; j < J; ++j)
    for (int l = 0; l <= j; ++l) {
      ma += a(j, l);
      mb += b(j, l);
    }
  ma /= count;
  mb /= count;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (int j = 0; j < J; ++j)
    for (int l = 0; l <= j; ++l) {
      const double da = a(j, l) - ma;
      const double db = b(j, l) - mb;
      saa += da * da;
      sbb += db * db;
      sab += da * db;
    }
  if (saa <= 0.0 || sbb <= 0.0) throw numeric_error("pearson: degenerate triangle");
  return sab / std::sqrt(saa * sbb);
}

inline FitReport delta_vs_A_report(const PosteriorDraws& draws,
                                   const std::vector<ParticipantSummary>& summaries) {
  if (static_cast<int>(summaries.size()) != draws.n)
    throw validation_error("fit report: summary count != participant count");
  const Draw& map = map_estimate(draws);
  CoefficientSet coeffs(draws.p, draws.J);
  coeffs.flat() = map.beta;
  FitReport report;
  for (int i = 0; i < draws.n; ++i) {
    const ParticipantMeta& meta = draws.participants[i];
    Eigen::VectorXd lambda = map.lambda.segment(i * draws.J, draws.J);
    const Eigen::MatrixXd L = build_L(meta.x, coeffs);
    const Eigen::MatrixXd delta = build_delta(L, lambda);
    FitReport::Entry entry;
    entry.id = meta.id;
    entry.scaled_a = scale_to_unit_diagonal(summaries[i].a);
    entry.scaled_delta = scale_to_unit_diagonal(delta);
    entry.correlation = pearson_lower_triangle(entry.scaled_delta, entry.scaled_a);
    entry.max_abs_deviation = 0.0;
    for (int j = 0; j < draws.J; ++j)
      for (int l = 0; l <= j; ++l)
        entry.max_abs_deviation = std::max(
            entry.max_abs_deviation, std::abs(entry.scaled_delta(j, l) - entry.scaled_a(j, l)));
    report.entries.push_back(std::move(entry));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Emission. Block and covariate indices are written 1-based.

inline void write_sensitivity_report(const SensitivityReport& report,
                                     const std::vector<std::string>& participant_ids,
                                     const std::filesystem::path& dir) {
  {
    std::ostringstream out;
    out << "participant,j,l,q,lower,mean,upper,significant\n";
    for (const auto& e : report.entries) {
      out << participant_ids[e.participant] << ',' << e.j + 1 << ',' << e.l + 1 << ','
          << report.q + 1 << ',' << io::format_double(e.interval.lower) << ','
          << io::format_double(e.interval.mean) << ',' << io::format_double(e.interval.upper)
          << ',' << (e.interval.significant ? 1 : 0) << "\n";
    }
    io::write_text_file(dir / "sensitivity_participants.csv", out.str());
  }
  {
    std::ostringstream out;
    out << "j,l,fraction_significant,selected\n";
    std::vector<std::vector<bool>> sel(report.J, std::vector<bool>(report.J, false));
    for (auto [j, l] : report.selected) sel[j][l] = true;
    for (int j = 0; j < report.J; ++j)
      for (int l = 0; l <= j; ++l)
        out << j + 1 << ',' << l + 1 << ','
            << io::format_double(report.fraction_significant(j, l)) << ','
            << (sel[j][l] ? 1 : 0) << "\n";
    io::write_text_file(dir / "sensitivity_aggregate.csv", out.str());
  }
  {
    nlohmann::json blocks = nlohmann::json::array();
    for (auto [j, l] : report.selected) blocks.push_back({j + 1, l + 1});
    nlohmann::json meta{{"q", report.q + 1},          {"binary", report.binary},
                        {"level", report.level},      {"threshold", report.threshold},
                        {"coding", report.coding},    {"blocks", blocks}};
    io::write_text_file(dir / "significant_blocks.json", meta.dump(2) + "\n");
  }
  {
    // Heat-map matrix of significant fractions, symmetric, plot-ready.
    std::ostringstream out;
    for (int j = 0; j < report.J; ++j) {
      for (int l = 0; l < report.J; ++l) {
        if (l) out << ',';
        out << io::format_double(report.fraction_significant(j, l));
      }
      out << "\n";
    }
    io::write_text_file(dir / "sensitivity_heatmap.csv", out.str());
  }
}

inline void write_fit_report_csv(const FitReport& report, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "participant,correlation,max_abs_deviation\n";
  for (const auto& e : report.entries)
    out << e.id << ',' << io::format_double(e.correlation) << ','
        << io::format_double(e.max_abs_deviation) << "\n";
  io::write_text_file(path, out.str());
}

}  // namespace blocr
