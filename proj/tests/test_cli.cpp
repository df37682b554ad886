#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>

#include "blocr/gibbs.hpp"
#include "blocr/io.hpp"
#include "blocr/sumstats.hpp"

namespace fs = std::filesystem;
using blocr::io::read_text_file;
using blocr::io::write_text_file;

namespace {

struct CmdResult {
  int exit_code;
  std::string output;
};

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "blocr_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CmdResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "__cmd_output.txt";
  const std::string cmd =
      std::string(BLOCR_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CmdResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.output = fs::exists(log) ? read_text_file(log) : std::string{};
  return result;
}

std::string tiny_sim_config(int n = 4, int seed = 11, const std::string& extra = {}) {
  return "n = " + std::to_string(n) +
         "\nT = 12\nM = 14\nJ = 3\np = 3\nsparsity = 0.8\nreplicates = 2\n"
         "iters = 20\nburnin = 5\nseed = " +
         std::to_string(seed) + "\n" + extra;
}

// Data files only; manifests carry timestamps and are compared separately.
std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
  std::map<std::string, std::string> bytes;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = fs::relative(entry.path(), dir).string();
    if (name == "manifest.json" || name == "__cmd_output.txt") continue;
    bytes[name] = read_text_file(entry.path());
  }
  return bytes;
}

}  // namespace

TEST(Cli, VersionAndUsageErrors) {
  const fs::path dir = scratch("usage");
  EXPECT_EQ(run_cli("--version", dir).exit_code, 0);
  const CmdResult bad = run_cli("fit --summaries nowhere", dir);
  EXPECT_EQ(bad.exit_code, 2);
  EXPECT_NE(bad.output.find("error"), std::string::npos);
}

TEST(Cli, SimulateWritesDatasetAndIsIdempotent) {
  const fs::path dir = scratch("simulate");
  write_text_file(dir / "sim.cfg", tiny_sim_config());
  const CmdResult first =
      run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " +
                  (dir / "out").string() + " --threads 2",
              dir);
  ASSERT_EQ(first.exit_code, 0) << first.output;
  for (const char* f : {"p0000.bsum", "p0003.bsum", "covariates.csv", "truth.json",
                        "partitions.json", "summaries_manifest.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;

  const auto bytes_a = dir_bytes(dir / "out");
  const CmdResult second =
      run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " +
                  (dir / "out2").string() + " --threads 1",
              dir);
  ASSERT_EQ(second.exit_code, 0);
  EXPECT_EQ(bytes_a, dir_bytes(dir / "out2"));
}

TEST(Cli, SimulateRejectsBadConfig) {
  const fs::path dir = scratch("simbad");
  write_text_file(dir / "missing.cfg", "T = 5\nM = 14\nJ = 3\n");
  const CmdResult missing = run_cli(
      "simulate --config " + (dir / "missing.cfg").string() + " --out " + (dir / "o").string(),
      dir);
  EXPECT_EQ(missing.exit_code, 2);
  EXPECT_NE(missing.output.find("\"n\""), std::string::npos);
  const CmdResult absent = run_cli(
      "simulate --config " + (dir / "nope.cfg").string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(absent.exit_code, 2);
}

TEST(Cli, SummarizeToyCsv) {
  const fs::path dir = scratch("summarize");
  write_text_file(dir / "toy.csv", "1,-1\n1,1\n");
  write_text_file(dir / "part.json", R"({"participant_id":"","J":1,"d":[2],"T":2})");
  const CmdResult r = run_cli("summarize --timeseries " + (dir / "toy.csv").string() +
                                  " --partition " + (dir / "part.json").string() +
                                  " --center false --out " + (dir / "out").string(),
                              dir);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const blocr::ParticipantSummary s = blocr::read_summary_file(dir / "out" / "toy.bsum");
  EXPECT_EQ(s.T, 2);
  EXPECT_NEAR(s.a(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(s.tr_s(0), 2.0, 1e-15);
}

TEST(Cli, SummarizeThinAndErrors) {
  const fs::path dir = scratch("thin");
  std::string csv;
  for (int t = 0; t < 10; ++t) csv += std::to_string(t) + "," + std::to_string(t % 3 - 1) + "\n";
  write_text_file(dir / "series.csv", csv);
  write_text_file(dir / "part.json", R"({"participant_id":"","J":1,"d":[2],"T":0})");
  const CmdResult thinned = run_cli("summarize --timeseries " + (dir / "series.csv").string() +
                                        " --partition " + (dir / "part.json").string() +
                                        " --thin 2 --center false --out " + (dir / "o1").string(),
                                    dir);
  ASSERT_EQ(thinned.exit_code, 0) << thinned.output;
  EXPECT_EQ(blocr::read_summary_file(dir / "o1" / "series.bsum").T, 5);

  write_text_file(dir / "nan.csv", "1,2\nnan,4\n");
  const CmdResult bad_value = run_cli("summarize --timeseries " + (dir / "nan.csv").string() +
                                          " --partition " + (dir / "part.json").string() +
                                          " --out " + (dir / "o2").string(),
                                      dir);
  EXPECT_EQ(bad_value.exit_code, 2);
  EXPECT_NE(bad_value.output.find("row 2"), std::string::npos);
  EXPECT_NE(bad_value.output.find("column 1"), std::string::npos);

  write_text_file(dir / "wide.csv", "1,2,3\n4,5,6\n");
  const CmdResult mismatch = run_cli("summarize --timeseries " + (dir / "wide.csv").string() +
                                         " --partition " + (dir / "part.json").string() +
                                         " --out " + (dir / "o3").string(),
                                     dir);
  EXPECT_EQ(mismatch.exit_code, 2);
  EXPECT_NE(mismatch.output.find("columns"), std::string::npos);
}

TEST(Cli, FitRetainsRequestedDraws) {
  const fs::path dir = scratch("fit");
  write_text_file(dir / "sim.cfg", tiny_sim_config(4, 21));
  ASSERT_EQ(run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " +
                        (dir / "data").string(),
                    dir)
                .exit_code,
            0);
  const CmdResult fit = run_cli(
      "fit --summaries " + (dir / "data").string() + " --covariates " +
          (dir / "data" / "covariates.csv").string() + " --iters 10 --burnin 5 --seed 3 --out " +
          (dir / "fit").string(),
      dir);
  ASSERT_EQ(fit.exit_code, 0) << fit.output;
  const blocr::PosteriorDraws draws = blocr::read_draws_file(dir / "fit" / "draws.bdrw");
  EXPECT_EQ(draws.draws.size(), 5u);
  EXPECT_EQ(draws.n, 4);
  EXPECT_TRUE(fs::exists(dir / "fit" / "fit.log"));
  EXPECT_TRUE(fs::exists(dir / "fit" / "draws_beta_pi.csv"));
}

TEST(Cli, FitRejectsInconsistentSummaries) {
  const fs::path dir = scratch("fitbad");
  // Two summaries that disagree on J, plus a covariates file.
  blocr::ParticipantSummary a;
  a.partition = blocr::validate_partition(std::vector<int>{2, 2});
  a.T = 3;
  a.tr_s = Eigen::VectorXd::Ones(2);
  a.one_s_one = Eigen::VectorXd::Ones(2);
  a.a = Eigen::MatrixXd::Identity(2, 2);
  blocr::ParticipantSummary b;
  b.partition = blocr::validate_partition(std::vector<int>{2, 2, 2});
  b.T = 3;
  b.tr_s = Eigen::VectorXd::Ones(3);
  b.one_s_one = Eigen::VectorXd::Ones(3);
  b.a = Eigen::MatrixXd::Identity(3, 3);
  fs::create_directories(dir / "sums");
  blocr::write_summary_file(dir / "sums" / "a.bsum", a);
  blocr::write_summary_file(dir / "sums" / "b.bsum", b);
  blocr::write_summaries_manifest(dir / "sums", {{"a", "a.bsum", 0}, {"b", "b.bsum", 1}});
  write_text_file(dir / "cov.csv", "participant_id,x1\na,1\nb,1\n");
  const CmdResult r = run_cli("fit --summaries " + (dir / "sums").string() + " --covariates " +
                                  (dir / "cov.csv").string() + " --iters 4 --burnin 1 --out " +
                                  (dir / "fit").string(),
                              dir);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("J"), std::string::npos);
}

TEST(Cli, InferNullEffectSelectsNothingAndLevelsNest) {
  const fs::path dir = scratch("infer");
  write_text_file(dir / "sim.cfg", tiny_sim_config(5, 31, "null_effect = 1\n"));
  ASSERT_EQ(run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " +
                        (dir / "data").string(),
                    dir)
                .exit_code,
            0);
  ASSERT_EQ(run_cli("fit --summaries " + (dir / "data").string() + " --covariates " +
                        (dir / "data" / "covariates.csv").string() +
                        " --iters 60 --burnin 20 --seed 5 --out " + (dir / "fit").string(),
                    dir)
                .exit_code,
            0);
  const CmdResult infer = run_cli(
      "infer --draws " + (dir / "fit" / "draws.bdrw").string() +
          " --covariate-index 3 --level 0.95 --threshold 0.95 --out " + (dir / "inf95").string(),
      dir);
  ASSERT_EQ(infer.exit_code, 0) << infer.output;
  const auto blocks =
      nlohmann::json::parse(read_text_file(dir / "inf95" / "significant_blocks.json"));
  EXPECT_EQ(blocks.at("blocks").size(), 0u);

  ASSERT_EQ(run_cli("infer --draws " + (dir / "fit" / "draws.bdrw").string() +
                        " --covariate-index 3 --level 0.5 --out " + (dir / "inf50").string(),
                    dir)
                .exit_code,
            0);
  // Every 50% interval sits inside the matching 95% interval.
  auto parse_intervals = [](const std::string& text) {
    std::map<std::string, std::pair<double, double>> out;
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream cells(line);
      std::string participant, j, l, q, lower, mean, upper;
      std::getline(cells, participant, ',');
      std::getline(cells, j, ',');
      std::getline(cells, l, ',');
      std::getline(cells, q, ',');
      std::getline(cells, lower, ',');
      std::getline(cells, mean, ',');
      std::getline(cells, upper, ',');
      out[participant + "/" + j + "/" + l] = {std::stod(lower), std::stod(upper)};
    }
    return out;
  };
  const auto wide = parse_intervals(read_text_file(dir / "inf95" / "sensitivity_participants.csv"));
  const auto narrow =
      parse_intervals(read_text_file(dir / "inf50" / "sensitivity_participants.csv"));
  ASSERT_EQ(wide.size(), narrow.size());
  for (const auto& [key, w] : wide) {
    const auto& n = narrow.at(key);
    EXPECT_LE(w.first, n.first) << key;
    EXPECT_GE(w.second, n.second) << key;
  }

  const CmdResult bad_q = run_cli("infer --draws " + (dir / "fit" / "draws.bdrw").string() +
                                      " --covariate-index 9 --out " + (dir / "bad").string(),
                                  dir);
  EXPECT_EQ(bad_q.exit_code, 2);
  const CmdResult bad_binary =
      run_cli("infer --draws " + (dir / "fit" / "draws.bdrw").string() +
                  " --covariate-index 1 --binary true --out " + (dir / "bad2").string(),
              dir);
  EXPECT_EQ(bad_binary.exit_code, 2);
}

TEST(Cli, ReportEmitsFitQuality) {
  const fs::path dir = scratch("report");
  write_text_file(dir / "sim.cfg", tiny_sim_config(4, 41));
  ASSERT_EQ(run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " +
                        (dir / "data").string(),
                    dir)
                .exit_code,
            0);
  ASSERT_EQ(run_cli("fit --summaries " + (dir / "data").string() + " --covariates " +
                        (dir / "data" / "covariates.csv").string() +
                        " --iters 40 --burnin 10 --seed 7 --out " + (dir / "fit").string(),
                    dir)
                .exit_code,
            0);
  const CmdResult report =
      run_cli("report --fit " + (dir / "fit").string() + " --summaries " + (dir / "data").string() +
                  " --out " + (dir / "rep").string(),
              dir);
  ASSERT_EQ(report.exit_code, 0) << report.output;
  std::istringstream in(read_text_file(dir / "rep" / "fit_report.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "participant,correlation,max_abs_deviation");
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.rfind(',');
    const double corr = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    EXPECT_GE(corr, -1.0);
    EXPECT_LE(corr, 1.0);
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}

TEST(Cli, PipelineDeterministicAcrossThreadCounts) {
  // simulate (raw emission) -> summarize -> fit -> infer, twice, with
  // different worker counts: all data and report files byte-identical.
  const fs::path dir = scratch("pipeline");
  write_text_file(dir / "sim.cfg",
                  tiny_sim_config(3, 77, "emit_raw = 1\nshared_partition = 1\n"));

  auto run_pipeline = [&](const std::string& tag, int threads) {
    const fs::path root = dir / tag;
    const std::string t = std::to_string(threads);
    CmdResult r = run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " +
                              (root / "data").string() + " --threads " + t,
                          dir);
    EXPECT_EQ(r.exit_code, 0) << r.output;
    r = run_cli("summarize --timeseries '" + (root / "data" / "*.btsr").string() +
                    "' --partition " + (root / "data" / "partitions.json").string() +
                    " --center false --out " + (root / "sums").string() + " --threads " + t,
                dir);
    EXPECT_EQ(r.exit_code, 0) << r.output;
    r = run_cli("fit --summaries " + (root / "sums").string() + " --covariates " +
                    (root / "data" / "covariates.csv").string() +
                    " --iters 30 --burnin 10 --seed 9 --out " + (root / "fit").string() +
                    " --threads " + t,
                dir);
    EXPECT_EQ(r.exit_code, 0) << r.output;
    r = run_cli("infer --draws " + (root / "fit" / "draws.bdrw").string() +
                    " --covariate-index 3 --out " + (root / "inf").string(),
                dir);
    EXPECT_EQ(r.exit_code, 0) << r.output;
    return root;
  };

  const fs::path a = run_pipeline("a", 1);
  const fs::path b = run_pipeline("b", 3);
  EXPECT_EQ(dir_bytes(a / "data"), dir_bytes(b / "data"));
  EXPECT_EQ(dir_bytes(a / "sums"), dir_bytes(b / "sums"));
  EXPECT_EQ(dir_bytes(a / "fit"), dir_bytes(b / "fit"));
  EXPECT_EQ(dir_bytes(a / "inf"), dir_bytes(b / "inf"));

  // The summaries produced by summarize match the ones simulate wrote.
  const blocr::ParticipantSummary from_sim = blocr::read_summary_file(a / "data" / "p0001.bsum");
  const blocr::ParticipantSummary from_raw = blocr::read_summary_file(a / "sums" / "p0001.bsum");
  EXPECT_TRUE((from_sim.a.array() == from_raw.a.array()).all());
}
