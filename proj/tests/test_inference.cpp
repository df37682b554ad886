#include <gtest/gtest.h>

#include <filesystem>

#include "blocr/inference.hpp"
#include "blocr/rng.hpp"
#include "support/stats.hpp"

using namespace blocr;
namespace fs = std::filesystem;

namespace {

// Hand-built draws with known constant parameters: n participants, shared
// partition, every draw identical unless perturbed by the caller.
PosteriorDraws constant_draws(int n, int J, int p, int n_draws,
                              const std::vector<int>& d) {
  PosteriorDraws draws;
  draws.n = n;
  draws.J = J;
  draws.p = p;
  for (int i = 0; i < n; ++i) {
    ParticipantMeta meta;
    meta.id = "c" + std::to_string(i);
    meta.T = 10;
    meta.d = d;
    meta.x = Eigen::VectorXd::Ones(p);
    draws.participants.push_back(meta);
  }
  Draw base;
  base.eta = Eigen::VectorXd::Ones(n * J);
  base.lambda = Eigen::VectorXd::Ones(n * J);
  base.beta = Eigen::VectorXd::Zero(p * pair_count(J));
  base.pi.assign(pair_count(J), 0);
  base.log_post = -1.0;
  draws.draws.assign(n_draws, base);
  return draws;
}

}  // namespace

TEST(Quantile, LinearInterpolationConvention) {
  std::vector<double> values(100);
  for (int k = 0; k < 100; ++k) values[k] = k + 1.0;
  const CredibleInterval ci = credible_interval(values, 0.95);
  EXPECT_NEAR(ci.lower, 3.475, 1e-12);
  EXPECT_NEAR(ci.upper, 97.525, 1e-12);
  EXPECT_NEAR(ci.mean, 50.5, 1e-12);
  EXPECT_TRUE(ci.significant);  // all positive
}

TEST(Quantile, DegenerateAndErrors) {
  std::vector<double> zeros(50, 0.0);
  const CredibleInterval ci = credible_interval(zeros, 0.95);
  EXPECT_EQ(ci.lower, 0.0);
  EXPECT_EQ(ci.upper, 0.0);
  EXPECT_EQ(ci.mean, 0.0);
  EXPECT_FALSE(ci.significant);
  EXPECT_THROW(credible_interval({}, 0.95), validation_error);
  EXPECT_THROW(credible_interval(zeros, 1.0), validation_error);
}

TEST(Significance, FlagMatchesZeroExclusion) {
  CredibleInterval a{-0.1, 0.05, 0.2, false};
  CredibleInterval b{0.05, 0.2, 0.3, true};
  CredibleInterval c{-0.3, -0.2, -0.01, true};
  EXPECT_FALSE(test_block_significance(a));
  EXPECT_TRUE(test_block_significance(b));
  EXPECT_TRUE(test_block_significance(c));
}

TEST(Significance, AcrossParticipantsStrictThreshold) {
  Eigen::MatrixXd fraction = Eigen::MatrixXd::Zero(2, 2);
  fraction(1, 0) = 0.96;
  fraction(0, 0) = 0.95;  // exactly at the threshold: excluded
  const auto selected = significance_across_participants(fraction, 0.95);
  ASSERT_EQ(selected.size(), 1u);
  EXPECT_EQ(selected[0], (std::pair<int, int>{1, 0}));
  EXPECT_TRUE(significance_across_participants(Eigen::MatrixXd::Zero(3, 3), 0.95).empty());
}

TEST(Sensitivity, IntervalNestingAcrossLevels) {
  Rng rng(64);
  std::vector<double> values(501);
  for (double& v : values) v = rng.normal() * 2.0 + 0.3;
  const CredibleInterval wide = credible_interval(values, 0.95);
  const CredibleInterval narrow = credible_interval(values, 0.5);
  EXPECT_LE(wide.lower, narrow.lower);
  EXPECT_GE(wide.upper, narrow.upper);
}

TEST(Sensitivity, FunctionalMatchesDirectEvaluation) {
  PosteriorDraws draws = constant_draws(2, 3, 2, 4, {2, 3, 2});
  // Give each draw a known beta so the functional is reproducible directly.
  for (std::size_t k = 0; k < draws.draws.size(); ++k) {
    CoefficientSet coeffs(2, 3);
    coeffs.at(0, 1, 0) = 0.5 + 0.1 * static_cast<double>(k);
    coeffs.at(1, 1, 0) = -0.25;
    coeffs.at(1, 2, 1) = 0.75;
    draws.draws[k].beta = coeffs.flat();
  }
  const Eigen::MatrixXd values = sensitivity_draw_matrix(draws, 0, 1, false);
  ASSERT_EQ(values.rows(), 4);
  ASSERT_EQ(values.cols(), tri_count(3));
  const BlockPartition part = validate_partition(std::vector<int>{2, 3, 2});
  for (std::size_t k = 0; k < draws.draws.size(); ++k) {
    const CoefficientSet coeffs = draws.coeffs_at(static_cast<int>(k));
    for (int j = 0; j < 3; ++j)
      for (int l = 0; l <= j; ++l) {
        const double direct = sensitivity_continuous(
            1, j, l, draws.participants[0].x, coeffs, Eigen::VectorXd::Ones(3), part);
        EXPECT_NEAR(values(k, tri_index(j, l)), direct, 1e-14);
      }
  }
  const CredibleInterval ci = credible_interval_sensitivity(draws, 0, 1, 0, 1, 0.95, false);
  EXPECT_LE(ci.lower, ci.mean);
  EXPECT_GE(ci.upper, ci.mean);
  EXPECT_THROW(sensitivity_draw_matrix(draws, 0, 0, true), validation_error);
  EXPECT_THROW(sensitivity_draw_matrix(draws, 5, 0, false), validation_error);
}

TEST(Sensitivity, NullDrawsGiveEmptySelection) {
  const PosteriorDraws draws = constant_draws(3, 3, 2, 10, {2, 2, 2});
  const SensitivityReport report = build_sensitivity_report(draws, 1, false, 0.95, 0.95);
  EXPECT_TRUE(report.selected.empty());
  for (const auto& e : report.entries) {
    EXPECT_EQ(e.interval.lower, 0.0);
    EXPECT_EQ(e.interval.upper, 0.0);
    EXPECT_FALSE(e.interval.significant);
  }
  EXPECT_EQ(report.fraction_significant.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Sensitivity, ReportEmission) {
  PosteriorDraws draws = constant_draws(2, 3, 2, 50, {2, 3, 2});
  Rng rng(17);
  for (auto& d : draws.draws) {
    CoefficientSet coeffs(2, 3);
    coeffs.at(1, 1, 0) = 1.0 + 0.05 * rng.normal();  // clearly significant
    coeffs.at(1, 2, 0) = 0.02 * rng.normal();        // straddles zero
    d.beta = coeffs.flat();
  }
  const SensitivityReport report =
      build_sensitivity_report(draws, 1, false, 0.95, 0.95, "x_p=1:groupB");
  const fs::path dir = fs::temp_directory_path() / "blocr_inference_test";
  fs::create_directories(dir);
  write_sensitivity_report(report, {"c0", "c1"}, dir);

  const std::string agg = io::read_text_file(dir / "sensitivity_aggregate.csv");
  EXPECT_NE(agg.find("j,l,fraction_significant,selected"), std::string::npos);
  const std::string per = io::read_text_file(dir / "sensitivity_participants.csv");
  // 2 participants x 6 blocks + header.
  EXPECT_EQ(std::count(per.begin(), per.end(), '\n'), 13);
  const auto parsed = nlohmann::json::parse(io::read_text_file(dir / "significant_blocks.json"));
  EXPECT_EQ(parsed.at("coding"), "x_p=1:groupB");
  ASSERT_GE(parsed.at("blocks").size(), 1u);
  // Block (2,1) 1-based must be selected: its functional is bounded away from 0.
  bool found = false;
  for (const auto& b : parsed.at("blocks"))
    if (b[0] == 2 && b[1] == 1) found = true;
  EXPECT_TRUE(found);
  // Heat map: symmetric J x J grid.
  std::istringstream heat(io::read_text_file(dir / "sensitivity_heatmap.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(heat, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 3);
}

TEST(FitReport, ScaleInvarianceAndPerfectFit) {
  const int J = 4;
  // Synthesize an A and a MAP state that reproduces it exactly:
  // lambda = squared Cholesky diagonal of A, beta encoding L's entries, x = 1.
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(J, 2 * J);
  Eigen::MatrixXd a = m * m.transpose() / (2.0 * J);
  a.diagonal().array() += 0.2;
  const Eigen::LLT<Eigen::MatrixXd> llt(a);
  ASSERT_EQ(llt.info(), Eigen::Success);
  Eigen::MatrixXd lfac = llt.matrixL();
  Eigen::VectorXd lambda(J);
  Eigen::MatrixXd unit_l = Eigen::MatrixXd::Identity(J, J);
  for (int j = 0; j < J; ++j) {
    lambda(j) = lfac(j, j) * lfac(j, j);
    for (int l = 0; l < j; ++l) unit_l(j, l) = lfac(j, l) / lfac(l, l);
  }

  PosteriorDraws draws = constant_draws(1, J, 1, 1, {2, 2, 2, 2});
  CoefficientSet coeffs(1, J);
  for (int j = 1; j < J; ++j)
    for (int l = 0; l < j; ++l) coeffs.at(0, j, l) = unit_l(j, l);
  draws.draws[0].beta = coeffs.flat();
  draws.draws[0].lambda = lambda;
  draws.draws[0].eta = Eigen::VectorXd::Ones(J);

  ParticipantSummary summary;
  summary.partition = validate_partition(std::vector<int>{2, 2, 2, 2});
  summary.T = 10;
  summary.tr_s = Eigen::VectorXd::Ones(J);
  summary.one_s_one = Eigen::VectorXd::Ones(J);
  summary.a = a;
  const FitReport exact = delta_vs_A_report(draws, {summary});
  EXPECT_NEAR(exact.entries[0].correlation, 1.0, 1e-10);
  EXPECT_NEAR(exact.entries[0].max_abs_deviation, 0.0, 1e-10);

  // Pure scale difference: the scaled matrices coincide.
  ParticipantSummary doubled = summary;
  doubled.a = 2.0 * a;
  const FitReport scaled = delta_vs_A_report(draws, {doubled});
  EXPECT_NEAR(scaled.entries[0].correlation, 1.0, 1e-10);
  EXPECT_NEAR(scaled.entries[0].max_abs_deviation, 0.0, 1e-10);

  // Positive rescaling of the MAP lambda leaves the report unchanged.
  PosteriorDraws rescaled = draws;
  rescaled.draws[0].lambda *= 7.3;
  const FitReport invariant = delta_vs_A_report(rescaled, {summary});
  EXPECT_NEAR(invariant.entries[0].correlation, 1.0, 1e-10);

  const fs::path dir = fs::temp_directory_path() / "blocr_inference_test";
  fs::create_directories(dir);
  write_fit_report_csv(exact, dir / "fit_report.csv");
  const std::string text = io::read_text_file(dir / "fit_report.csv");
  EXPECT_NE(text.find("participant,correlation,max_abs_deviation"), std::string::npos);

  // Zero diagonal entries cannot be scaled.
  ParticipantSummary degenerate = summary;
  degenerate.a(0, 0) = 0.0;
  EXPECT_THROW(delta_vs_A_report(draws, {degenerate}), validation_error);
}

TEST(FitReport, PermutedEstimateScoresLow) {
  // Banded core matrix: permuting rows/columns destroys the band, so the
  // reported correlation drops far below the matched case.
  const int J = 12;
  Eigen::MatrixXd a(J, J);
  for (int r = 0; r < J; ++r)
    for (int c = 0; c < J; ++c) a(r, c) = std::pow(0.9, std::abs(r - c));

  const Eigen::MatrixXd scaled = scale_to_unit_diagonal(a);
  const std::vector<int> perm{8, 11, 4, 7, 5, 0, 1, 9, 2, 10, 6, 3};
  Eigen::MatrixXd shuffled(J, J);
  for (int r = 0; r < J; ++r)
    for (int c = 0; c < J; ++c) shuffled(r, c) = scaled(perm[r], perm[c]);
  const double self = pearson_lower_triangle(scaled, scaled);
  const double cross = pearson_lower_triangle(shuffled, scaled);
  EXPECT_NEAR(self, 1.0, 1e-12);
  EXPECT_LT(cross, 0.5);
}
