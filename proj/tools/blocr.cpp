// Command-line driver for the block covariance regression pipeline:
// simulate -> summarize -> fit -> infer -> report.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blocr/common.hpp"
#include "blocr/gibbs.hpp"
#include "blocr/inference.hpp"
#include "blocr/io.hpp"
#include "blocr/parallel.hpp"
#include "blocr/partition.hpp"
#include "blocr/simharness.hpp"
#include "blocr/sumstats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Hash over the canonical argument list plus the contents of small inputs.
std::uint64_t config_hash(const std::vector<std::string>& args,
                          const std::vector<fs::path>& hashed_inputs) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& a : args) {
    h = blocr::io::fnv1a(h, a.data(), a.size());
    h = blocr::io::fnv1a(h, "\x1f", 1);
  }
  for (const auto& p : hashed_inputs) {
    const std::string text = blocr::io::read_text_file(p);
    h = blocr::io::fnv1a(h, text.data(), text.size());
  }
  return h;
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const std::vector<std::string>& args,
                    const std::vector<fs::path>& hashed_inputs,
                    const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                    std::uint64_t seed) {
  json manifest{{"command", command},
                {"config_hash", hex64(config_hash(args, hashed_inputs))},
                {"seed", seed},
                {"inputs", inputs},
                {"outputs", outputs},
                {"version", blocr::kVersion},
                {"timestamp", iso_timestamp()}};
  blocr::io::write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<fs::path> expand_glob(const std::string& pattern) {
  const fs::path as_path(pattern);
  const std::string name = as_path.filename().string();
  if (name.find('*') == std::string::npos && name.find('?') == std::string::npos) {
    if (!fs::exists(as_path)) throw blocr::validation_error("no such file: " + pattern);
    return {as_path};
  }
  fs::path dir = as_path.parent_path();
  if (dir.empty()) dir = ".";
  if (!fs::is_directory(dir))
    throw blocr::validation_error("glob directory does not exist: " + dir.string());
  std::string rx;
  for (char c : name) {
    if (c == '*')
      rx += ".*";
    else if (c == '?')
      rx += '.';
    else if (std::string("\\^$.|+()[]{}").find(c) != std::string::npos)
      rx += std::string("\\") + c;
    else
      rx += c;
  }
  const std::regex re(rx);
  std::vector<fs::path> matches;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && std::regex_match(entry.path().filename().string(), re))
      matches.push_back(entry.path());
  std::sort(matches.begin(), matches.end());
  if (matches.empty()) throw blocr::validation_error("glob matched no files: " + pattern);
  return matches;
}

Eigen::MatrixXd read_covariates_csv(const fs::path& path, std::vector<std::string>& ids_out) {
  const std::string text = blocr::io::read_text_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line))
    throw blocr::validation_error("covariates file " + path.string() + " is empty");
  std::vector<std::vector<double>> rows;
  ids_out.clear();
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream cells(line);
    std::string cell;
    if (!std::getline(cells, cell, ','))
      throw blocr::validation_error("covariates: bad row " + std::to_string(line_no));
    ids_out.push_back(cell);
    std::vector<double> vals;
    while (std::getline(cells, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw blocr::validation_error("covariates: unparseable value at row " +
                                      std::to_string(line_no));
      }
      if (!std::isfinite(vals.back()))
        throw blocr::validation_error("covariates: non-finite value at row " +
                                      std::to_string(line_no));
    }
    if (!rows.empty() && vals.size() != rows.front().size())
      throw blocr::validation_error("covariates: ragged row " + std::to_string(line_no));
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw blocr::validation_error("covariates: no data rows");
  Eigen::MatrixXd x(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t q = 0; q < rows[i].size(); ++q) x(i, q) = rows[i][q];
  return x;
}

void write_covariates_csv(const fs::path& path, const std::vector<std::string>& ids,
                          const Eigen::MatrixXd& x) {
  std::ostringstream out;
  out << "participant_id";
  for (int q = 0; q < x.cols(); ++q) out << ",x" << q + 1;
  out << "\n";
  for (int i = 0; i < x.rows(); ++i) {
    out << ids[i];
    for (int q = 0; q < x.cols(); ++q) out << ',' << blocr::io::format_double(x(i, q));
    out << "\n";
  }
  blocr::io::write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------

int cmd_simulate(const std::string& config_path, const std::string& out_dir, int threads) {
  const blocr::SimConfig cfg = blocr::read_sim_config(config_path);
  fs::create_directories(out_dir);
  blocr::ThreadPool pool(threads);
  const blocr::SimulatedData data = blocr::generate_dataset(cfg, pool);

  std::vector<std::string> outputs;
  std::vector<blocr::SummaryManifestEntry> entries;
  for (int i = 0; i < cfg.n; ++i) {
    const std::string file = data.ids[i] + ".bsum";
    blocr::write_summary_file(fs::path(out_dir) / file, data.summaries[i]);
    entries.push_back({data.ids[i], file, i});
    outputs.push_back(file);
  }
  blocr::write_summaries_manifest(out_dir, entries);
  write_covariates_csv(fs::path(out_dir) / "covariates.csv", data.ids, data.truth.x);
  blocr::write_truth_json(fs::path(out_dir) / "truth.json", cfg, data);
  {
    std::vector<blocr::PartitionRecord> records;
    if (cfg.shared_partition) {
      records.push_back({"", data.truth.partitions.front(), cfg.T});
    } else {
      for (int i = 0; i < cfg.n; ++i)
        records.push_back({data.ids[i], data.truth.partitions[i], cfg.T});
    }
    blocr::write_partition_file(fs::path(out_dir) / "partitions.json", records);
  }
  if (cfg.emit_raw)
    for (int i = 0; i < cfg.n; ++i)
      blocr::write_timeseries_file(fs::path(out_dir) / (data.ids[i] + ".btsr"), data.raw[i]);
  outputs.insert(outputs.end(),
                 {"summaries_manifest.json", "covariates.csv", "truth.json", "partitions.json"});
  write_manifest(out_dir, "simulate", {config_path, std::to_string(threads)}, {config_path},
                 {config_path}, outputs, cfg.seed);
  std::cout << "simulated " << cfg.n << " participants (J = " << cfg.J << ", M = " << cfg.M
            << ", T = " << cfg.T << ") -> " << out_dir << "\n";
  return 0;
}

int cmd_summarize(const std::string& glob, const std::string& partition_path, int thin,
                  std::optional<bool> center, const std::string& out_dir, int threads) {
  const std::vector<fs::path> files = expand_glob(glob);
  const std::vector<blocr::PartitionRecord> records = blocr::read_partition_file(partition_path);
  fs::create_directories(out_dir);

  auto find_partition = [&](const std::string& id) -> const blocr::PartitionRecord& {
    if (records.size() == 1 && records.front().participant_id.empty()) return records.front();
    for (const auto& rec : records)
      if (rec.participant_id == id) return rec;
    throw blocr::validation_error("partition file has no entry for participant \"" + id + "\"");
  };

  std::vector<blocr::SummaryManifestEntry> entries(files.size());
  std::vector<std::string> outputs(files.size());
  blocr::ThreadPool pool(threads);
  pool.parallel_for(static_cast<int>(files.size()), [&](int k) {
    const fs::path& file = files[k];
    const std::string id = file.stem().string();
    const blocr::PartitionRecord& rec = find_partition(id);
    const bool is_csv = file.extension() == ".csv";
    Eigen::MatrixXd y =
        is_csv ? blocr::read_timeseries_csv(file) : blocr::read_timeseries_file(file);
    if (y.cols() != rec.partition.M)
      throw blocr::validation_error(file.string() + ": " + std::to_string(y.cols()) +
                                    " columns but partition expects M = " +
                                    std::to_string(rec.partition.M));
    y = blocr::thin_rows(y, thin);
    if (center.value_or(is_csv)) blocr::center_scale_columns(y);
    const blocr::ParticipantSummary summary = blocr::compute_summary(y, rec.partition);
    const std::string out_name = id + ".bsum";
    blocr::write_summary_file(fs::path(out_dir) / out_name, summary);
    entries[k] = {id, out_name, k};
    outputs[k] = out_name;
  });
  blocr::write_summaries_manifest(out_dir, entries);
  std::vector<std::string> inputs{partition_path};
  for (const auto& f : files) inputs.push_back(f.string());
  outputs.push_back("summaries_manifest.json");
  write_manifest(out_dir, "summarize",
                 {glob, partition_path, std::to_string(thin),
                  center ? (*center ? "center=1" : "center=0") : "center=auto"},
                 {partition_path}, inputs, outputs, 0);
  std::cout << "summarized " << files.size() << " series -> " << out_dir << "\n";
  return 0;
}

blocr::FitData load_fit_data(const std::string& summaries_dir, const std::string& covariates_csv) {
  blocr::FitData data;
  const auto entries = blocr::read_summaries_manifest(summaries_dir);
  std::vector<std::string> cov_ids;
  const Eigen::MatrixXd x_all = read_covariates_csv(covariates_csv, cov_ids);
  data.x.resize(entries.size(), x_all.cols());
  for (std::size_t k = 0; k < entries.size(); ++k) {
    data.summaries.push_back(blocr::read_summary_file(fs::path(summaries_dir) / entries[k].file));
    data.ids.push_back(entries[k].id);
    const auto it = std::find(cov_ids.begin(), cov_ids.end(), entries[k].id);
    if (it == cov_ids.end())
      throw blocr::validation_error("covariates file has no row for participant \"" +
                                    entries[k].id + "\"");
    data.x.row(k) = x_all.row(it - cov_ids.begin());
  }
  data.validate();
  return data;
}

blocr::PriorConfig load_priors(const std::string& path) {
  blocr::PriorConfig priors;
  if (path.empty()) return priors;
  std::map<std::string, double*> slots{
      {"a0", &priors.a0},         {"b0", &priors.b0},         {"a1", &priors.a1},
      {"b1", &priors.b1},         {"q1", &priors.q1},         {"tau0sq", &priors.tau0sq},
      {"tau1sq", &priors.tau1sq}, {"tau2sq", &priors.tau2sq}};
  std::istringstream in(blocr::io::read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    key.erase(std::remove_if(key.begin(), key.end(), ::isspace), key.end());
    if (key.empty()) continue;
    const auto slot = slots.find(key);
    if (slot == slots.end())
      throw blocr::validation_error("priors file: unknown key \"" + key + "\"");
    *slot->second = std::stod(line.substr(eq + 1));
  }
  priors.validate();
  return priors;
}

int cmd_fit(const std::string& summaries_dir, const std::string& covariates_csv, int iters,
            int burnin, int stride, std::uint64_t seed, const std::string& priors_path,
            const std::string& out_dir, int threads) {
  const blocr::FitData data = load_fit_data(summaries_dir, covariates_csv);
  const blocr::PriorConfig priors = load_priors(priors_path);
  blocr::Schedule schedule;
  schedule.iters = iters;
  schedule.burnin = burnin;
  schedule.stride = stride;
  schedule.seed = seed;
  schedule.threads = threads;
  fs::create_directories(out_dir);

  std::ostringstream log;
  blocr::ThreadPool pool(threads);
  const blocr::PosteriorDraws draws =
      blocr::run_chain(data, priors, schedule, pool, [&](int iter, double lp) {
        log << "iter " << iter << " logpost " << blocr::io::format_double(lp) << "\n";
        if ((iter + 1) % 500 == 0)
          std::cout << "iter " << iter + 1 << "/" << iters << " logpost " << lp << std::endl;
      });
  blocr::io::write_text_file(fs::path(out_dir) / "fit.log", log.str());
  blocr::write_draws_file(fs::path(out_dir) / "draws.bdrw", draws);
  blocr::export_draws_csv(draws, fs::path(out_dir) / "draws_beta_pi.csv");
  std::vector<fs::path> hashed{fs::path(summaries_dir) / "summaries_manifest.json",
                               covariates_csv};
  if (!priors_path.empty()) hashed.push_back(priors_path);
  write_manifest(out_dir, "fit",
                 {summaries_dir, covariates_csv, std::to_string(iters), std::to_string(burnin),
                  std::to_string(stride), std::to_string(seed), priors_path},
                 hashed, {summaries_dir, covariates_csv},
                 {"draws.bdrw", "draws_beta_pi.csv", "fit.log"}, seed);
  std::cout << "retained " << draws.draws.size() << " draws -> " << out_dir << "\n";
  return 0;
}

int cmd_infer(const std::string& draws_path, int covariate_index, bool binary, double level,
              double threshold, const std::string& coding, const std::string& out_dir) {
  const blocr::PosteriorDraws draws = blocr::read_draws_file(draws_path);
  if (covariate_index < 1 || covariate_index > draws.p)
    throw blocr::validation_error("covariate index " + std::to_string(covariate_index) +
                                  " out of range (p = " + std::to_string(draws.p) + ")");
  if (level <= 0.0 || level >= 1.0)
    throw blocr::validation_error("level must lie in (0, 1)");
  if (binary && covariate_index != draws.p)
    throw blocr::validation_error(
        "the binary finite-difference functional applies to the last covariate only");
  fs::create_directories(out_dir);
  const blocr::SensitivityReport report = blocr::build_sensitivity_report(
      draws, covariate_index - 1, binary, level, threshold, coding);
  std::vector<std::string> ids;
  for (const auto& meta : draws.participants) ids.push_back(meta.id);
  blocr::write_sensitivity_report(report, ids, out_dir);
  write_manifest(out_dir, "infer",
                 {draws_path, std::to_string(covariate_index), binary ? "binary" : "continuous",
                  blocr::io::format_double(level), blocr::io::format_double(threshold), coding},
                 {}, {draws_path},
                 {"sensitivity_participants.csv", "sensitivity_aggregate.csv",
                  "significant_blocks.json", "sensitivity_heatmap.csv"},
                 draws.schedule.seed);
  std::cout << "significant blocks: " << report.selected.size() << " of "
            << blocr::tri_count(draws.J) << " -> " << out_dir << "\n";
  return 0;
}

int cmd_report(const std::string& fit_dir, const std::string& summaries_dir,
               const std::string& out_dir) {
  const blocr::PosteriorDraws draws = blocr::read_draws_file(fs::path(fit_dir) / "draws.bdrw");
  const auto entries = blocr::read_summaries_manifest(summaries_dir);
  std::vector<blocr::ParticipantSummary> summaries;
  for (int i = 0; i < draws.n; ++i) {
    const auto it = std::find_if(entries.begin(), entries.end(),
                                 [&](const auto& e) { return e.id == draws.participants[i].id; });
    if (it == entries.end())
      throw blocr::validation_error("summaries dir has no entry for participant \"" +
                                    draws.participants[i].id + "\"");
    summaries.push_back(blocr::read_summary_file(fs::path(summaries_dir) / it->file));
  }
  const blocr::FitReport report = blocr::delta_vs_A_report(draws, summaries);
  fs::create_directories(out_dir);
  blocr::write_fit_report_csv(report, fs::path(out_dir) / "fit_report.csv");
  write_manifest(out_dir, "report", {fit_dir, summaries_dir}, {},
                 {fit_dir, summaries_dir}, {"fit_report.csv"}, draws.schedule.seed);
  double mean_corr = 0.0;
  for (const auto& e : report.entries) mean_corr += e.correlation;
  mean_corr /= static_cast<double>(report.entries.size());
  std::cout << "fit report for " << report.entries.size()
            << " participants, mean correlation " << mean_corr << " -> " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"block covariance regression pipeline"};
  app.set_version_flag("--version", blocr::kVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir, glob, partition_path, summaries_dir, covariates_csv,
      priors_path, draws_path, fit_dir, coding;
  int threads = 1, thin = 1, iters = 6000, burnin = 1000, stride = 1, covariate_index = 1;
  std::uint64_t seed = 1;
  double level = 0.95, threshold = 0.95;
  std::optional<bool> center;
  bool binary = false;

  auto* simulate = app.add_subcommand("simulate", "generate a synthetic dataset");
  simulate->add_option("--config", config_path, "flat key=value sim config")->required();
  simulate->add_option("--out", out_dir, "output directory")->required();
  simulate->add_option("--threads", threads, "worker threads");

  auto* summarize = app.add_subcommand("summarize", "compress time series to summary files");
  summarize->add_option("--timeseries", glob, "input glob (*.csv or *.btsr)")->required();
  summarize->add_option("--partition", partition_path, "partition JSON")->required();
  summarize->add_option("--thin", thin, "keep every k-th row");
  summarize->add_option("--center", center, "center/scale columns (default: on for csv)");
  summarize->add_option("--out", out_dir, "output directory")->required();
  summarize->add_option("--threads", threads, "worker threads");

  auto* fit = app.add_subcommand("fit", "run the Gibbs sampler");
  fit->add_option("--summaries", summaries_dir, "directory of .bsum files + manifest")->required();
  fit->add_option("--covariates", covariates_csv, "covariates CSV")->required();
  fit->add_option("--iters", iters, "total sweeps");
  fit->add_option("--burnin", burnin, "burn-in sweeps");
  fit->add_option("--stride", stride, "retention stride");
  fit->add_option("--seed", seed, "root RNG seed");
  fit->add_option("--priors", priors_path, "priors key=value file");
  fit->add_option("--out", out_dir, "output directory")->required();
  fit->add_option("--threads", threads, "worker threads");

  auto* infer = app.add_subcommand("infer", "credible intervals for covariate sensitivities");
  infer->add_option("--draws", draws_path, "draws.bdrw path")->required();
  infer->add_option("--covariate-index", covariate_index, "1-based covariate index")->required();
  infer->add_option("--binary", binary, "use the two-point finite difference");
  infer->add_option("--level", level, "credible level");
  infer->add_option("--threshold", threshold, "across-participant selection threshold");
  infer->add_option("--coding", coding, "note describing the binary coding");
  infer->add_option("--out", out_dir, "output directory")->required();

  auto* report = app.add_subcommand("report", "compare MAP core matrix against observed A");
  report->add_option("--fit", fit_dir, "fit output directory")->required();
  report->add_option("--summaries", summaries_dir, "summaries directory")->required();
  report->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (simulate->parsed()) return cmd_simulate(config_path, out_dir, threads);
    if (summarize->parsed())
      return cmd_summarize(glob, partition_path, thin, center, out_dir, threads);
    if (fit->parsed())
      return cmd_fit(summaries_dir, covariates_csv, iters, burnin, stride, seed, priors_path,
                     out_dir, threads);
    if (infer->parsed())
      return cmd_infer(draws_path, covariate_index, binary, level, threshold, coding, out_dir);
    if (report->parsed()) return cmd_report(fit_dir, summaries_dir, out_dir);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::cerr << "blocr: error: [usage] " << e.what() << "\n";
    return kExitValidation;
  } catch (const blocr::validation_error& e) {
    std::cerr << "blocr: error: [validation] " << e.what() << "\n";
    return kExitValidation;
  } catch (const blocr::numeric_error& e) {
    std::cerr << "blocr: error: [numeric] " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "blocr: error: [internal] " << e.what() << "\n";
    return kExitNumeric;
  }
  return 0;
}
