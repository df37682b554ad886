#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blocr/common.hpp"
#include "blocr/io.hpp"
#include "blocr/partition.hpp"

namespace blocr {

// Everything the collapsed likelihood needs from one participant's series:
// per-block tr(S_jj), 1'S_jj 1, and the J x J core A = nu_tilde' S nu_tilde.
// S itself (M x M) is never formed.
struct ParticipantSummary {
  BlockPartition partition;
  int T = 0;
  Eigen::VectorXd tr_s;       // J
  Eigen::VectorXd one_s_one;  // J
  Eigen::MatrixXd a;          // J x J, symmetric PSD
};

// Row-at-a-time accumulation; memory O(J^2 + J), independent of T and M.
class SummaryAccumulator {
public:
  explicit SummaryAccumulator(BlockPartition part)
      : part_(std::move(part)),
        rows_(0),
        sum_sq_(Eigen::VectorXd::Zero(part_.J)),
        sum_outer_(Eigen::MatrixXd::Zero(part_.J, part_.J)),
        sum_block_sq_(Eigen::VectorXd::Zero(part_.J)),
        z_(part_.J) {}

  void add_row(std::span<const double> row) {
    if (static_cast<int>(row.size()) != part_.M)
      throw validation_error("summary: row length " + std::to_string(row.size()) +
                             " does not match partition M = " + std::to_string(part_.M));
    for (int j = 0; j < part_.J; ++j) {
      const int off = part_.offsets[j];
      const int dj = part_.d[j];
      double sum = 0.0, sq = 0.0;
      for (int v = 0; v < dj; ++v) {
        const double y = row[off + v];
        if (!std::isfinite(y))
          throw validation_error("summary: non-finite value in block " + std::to_string(j));
        sum += y;
        sq += y * y;
      }
      sum_sq_(j) += sq;
      sum_block_sq_(j) += sum * sum;
      z_(j) = sum / std::sqrt(static_cast<double>(dj));
    }
    sum_outer_.selfadjointView<Eigen::Lower>().rankUpdate(z_);
    ++rows_;
  }

  long long rows() const { return rows_; }

  ParticipantSummary finish() const {
    if (rows_ < 1) throw validation_error("summary: no rows accumulated");
    ParticipantSummary s;
    s.partition = part_;
    s.T = static_cast<int>(rows_);
    const double inv_t = 1.0 / static_cast<double>(rows_);
    s.tr_s = sum_sq_ * inv_t;
    s.one_s_one = sum_block_sq_ * inv_t;
    s.a = sum_outer_.selfadjointView<Eigen::Lower>();
    s.a *= inv_t;
    return s;
  }

private:
  BlockPartition part_;
  long long rows_;
  Eigen::VectorXd sum_sq_;
  Eigen::MatrixXd sum_outer_;
  Eigen::VectorXd sum_block_sq_;
  Eigen::VectorXd z_;
};

// Y is T x M, rows are time points, already centered/scaled upstream.
inline ParticipantSummary compute_summary(const Eigen::MatrixXd& y, const BlockPartition& part) {
  if (y.cols() != part.M) throw validation_error("compute_summary: column count != partition M");
  if (y.rows() < 1) throw validation_error("compute_summary: need at least one row");
  SummaryAccumulator acc(part);
  std::vector<double> row(part.M);
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    Eigen::Map<Eigen::RowVectorXd>(row.data(), part.M) = y.row(t);
    acc.add_row(row);
  }
  return acc.finish();
}

// Fully normalized log density of all T rows under the collapsed form:
// the only data dependence is through the summary.
inline double log_likelihood(const ParticipantSummary& s, const Eigen::VectorXd& eta,
                             const Eigen::VectorXd& lambda, const Eigen::MatrixXd& u) {
  const int J = s.partition.J;
  if (eta.size() != J || lambda.size() != J || u.rows() != J || u.cols() != J)
    throw validation_error("log_likelihood: dimension mismatch");
  if ((eta.array() <= 0.0).any() || (lambda.array() <= 0.0).any())
    throw validation_error("log_likelihood: eta and lambda must be positive");
  const double t = static_cast<double>(s.T);
  double log_det = 0.0;
  double quad = 0.0;
  for (int j = 0; j < J; ++j) {
    const int dj = s.partition.d[j];
    log_det += std::log(lambda(j)) + (dj - 1) * std::log(eta(j));
    const double resid = s.tr_s(j) - s.one_s_one(j) / dj;
    quad += resid / eta(j);
    const auto uj = u.col(j).head(j + 1);
    quad += uj.dot(s.a.topLeftCorner(j + 1, j + 1) * uj) / lambda(j);
  }
  return -0.5 * t * s.partition.M * std::log(2.0 * M_PI) - 0.5 * t * log_det - 0.5 * t * quad;
}

// ---------------------------------------------------------------------------
// BSUM v1: magic "BSUM", u32 version, u32 J, u32 T, u64 M, J*u32 d,
// J*f64 trS, J*f64 oneSone, J*J*f64 A row-major. Little-endian.

inline void write_summary_file(const std::filesystem::path& path, const ParticipantSummary& s) {
  io::BinaryWriter w(path);
  w.magic("BSUM");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(s.partition.J));
  w.u32(static_cast<std::uint32_t>(s.T));
  w.u64(static_cast<std::uint64_t>(s.partition.M));
  for (int dj : s.partition.d) w.u32(static_cast<std::uint32_t>(dj));
  w.f64_array(s.tr_s.data(), s.partition.J);
  w.f64_array(s.one_s_one.data(), s.partition.J);
  for (int j = 0; j < s.partition.J; ++j)
    for (int l = 0; l < s.partition.J; ++l) w.f64(s.a(j, l));
  w.close();
}

inline ParticipantSummary read_summary_file(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("BSUM", "summary file");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw validation_error("summary file " + path.string() + ": unsupported version " +
                           std::to_string(version));
  const std::uint32_t J = r.u32();
  const std::uint32_t T = r.u32();
  const std::uint64_t M = r.u64();
  if (J < 1 || T < 1) throw validation_error("summary file " + path.string() + ": bad header");
  std::vector<int> d(J);
  std::uint64_t total = 0;
  for (auto& dj : d) {
    dj = static_cast<int>(r.u32());
    total += static_cast<std::uint64_t>(dj);
  }
  ParticipantSummary s;
  s.partition = validate_partition(d);
  if (total != M)
    throw validation_error("summary file " + path.string() + ": block sizes do not sum to M");
  s.T = static_cast<int>(T);
  s.tr_s.resize(J);
  s.one_s_one.resize(J);
  s.a.resize(J, J);
  r.f64_array(s.tr_s.data(), J);
  r.f64_array(s.one_s_one.data(), J);
  for (std::uint32_t j = 0; j < J; ++j)
    for (std::uint32_t l = 0; l < J; ++l) s.a(j, l) = r.f64();
  if (!s.tr_s.allFinite() || !s.one_s_one.allFinite() || !s.a.allFinite())
    throw validation_error("summary file " + path.string() + ": non-finite values");
  if (!s.a.isApprox(s.a.transpose(), 1e-12))
    throw validation_error("summary file " + path.string() + ": A is not symmetric");
  return s;
}

// ---------------------------------------------------------------------------
// BTSR: 16-byte header (magic "BTSR", u32 version, u32 T, u32 M), then
// row-major T x M f64.

inline void write_timeseries_file(const std::filesystem::path& path, const Eigen::MatrixXd& y) {
  io::BinaryWriter w(path);
  w.magic("BTSR");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(y.rows()));
  w.u32(static_cast<std::uint32_t>(y.cols()));
  for (Eigen::Index t = 0; t < y.rows(); ++t)
    for (Eigen::Index v = 0; v < y.cols(); ++v) w.f64(y(t, v));
  w.close();
}

inline Eigen::MatrixXd read_timeseries_file(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("BTSR", "time-series file");
  const std::uint32_t version = r.u32();
  if (version != 1) throw validation_error("time-series file: unsupported version");
  const std::uint32_t T = r.u32();
  const std::uint32_t M = r.u32();
  if (T < 1 || M < 1) throw validation_error("time-series file: empty dimensions");
  Eigen::MatrixXd y(T, M);
  for (std::uint32_t t = 0; t < T; ++t)
    for (std::uint32_t v = 0; v < M; ++v) y(t, v) = r.f64();
  return y;
}

// CSV: T rows x M columns, no header.
inline Eigen::MatrixXd read_timeseries_csv(const std::filesystem::path& path) {
  const std::string text = io::read_text_file(path);
  std::vector<std::vector<double>> rows;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    if (!line.empty()) {
      std::vector<double> vals;
      std::size_t col_start = 0;
      int col_no = 0;
      while (col_start <= line.size()) {
        std::size_t comma = line.find(',', col_start);
        if (comma == std::string_view::npos) comma = line.size();
        ++col_no;
        const std::string cell(line.substr(col_start, comma - col_start));
        char* parse_end = nullptr;
        const double v = std::strtod(cell.c_str(), &parse_end);
        if (cell.empty() || parse_end == cell.c_str())
          throw validation_error(path.string() + ": unparseable value at row " +
                                 std::to_string(line_no) + ", column " + std::to_string(col_no));
        if (!std::isfinite(v))
          throw validation_error(path.string() + ": non-finite value at row " +
                                 std::to_string(line_no) + ", column " + std::to_string(col_no));
        vals.push_back(v);
        col_start = comma + 1;
        if (comma == line.size()) break;
      }
      if (!rows.empty() && vals.size() != rows.front().size())
        throw validation_error(path.string() + ": ragged row " + std::to_string(line_no));
      rows.push_back(std::move(vals));
    }
    pos = end + 1;
  }
  if (rows.empty()) throw validation_error(path.string() + ": no data rows");
  Eigen::MatrixXd y(rows.size(), rows.front().size());
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t v = 0; v < rows[t].size(); ++v) y(t, v) = rows[t][v];
  return y;
}

// Keeps rows 0, k, 2k, ... (lag thinning is pure preprocessing here).
inline Eigen::MatrixXd thin_rows(const Eigen::MatrixXd& y, int stride) {
  if (stride < 1) throw validation_error("thin: stride must be >= 1");
  if (stride == 1) return y;
  const Eigen::Index kept = (y.rows() + stride - 1) / stride;
  Eigen::MatrixXd out(kept, y.cols());
  for (Eigen::Index t = 0; t < kept; ++t) out.row(t) = y.row(t * stride);
  return out;
}

// Per-column centering and unit (population) variance scaling.
inline void center_scale_columns(Eigen::MatrixXd& y) {
  const double t = static_cast<double>(y.rows());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double mean = y.col(c).mean();
    y.col(c).array() -= mean;
    const double var = y.col(c).squaredNorm() / t;
    if (var <= 0.0)
      throw validation_error("center/scale: column " + std::to_string(c + 1) +
                             " has zero variance");
    y.col(c) /= std::sqrt(var);
  }
}

// ---------------------------------------------------------------------------
// Summaries manifest: which BSUM belongs to which participant and which
// covariate row it maps to.

struct SummaryManifestEntry {
  std::string id;
  std::string file;  // relative to the manifest's directory
  int covariate_row = -1;
};

inline void write_summaries_manifest(const std::filesystem::path& dir,
                                     const std::vector<SummaryManifestEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries)
    arr.push_back({{"id", e.id}, {"file", e.file}, {"covariate_row", e.covariate_row}});
  io::write_text_file(dir / "summaries_manifest.json",
                      nlohmann::json{{"participants", arr}}.dump(2) + "\n");
}

inline std::vector<SummaryManifestEntry> read_summaries_manifest(
    const std::filesystem::path& dir) {
  const auto path = dir / "summaries_manifest.json";
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(io::read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw validation_error("summaries manifest " + path.string() + ": " + e.what());
  }
  std::vector<SummaryManifestEntry> entries;
  for (const auto& obj : parsed.at("participants")) {
    SummaryManifestEntry e;
    e.id = obj.at("id").get<std::string>();
    e.file = obj.at("file").get<std::string>();
    e.covariate_row = obj.value("covariate_row", -1);
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw validation_error("summaries manifest: no participants");
  return entries;
}

}  // namespace blocr
