#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blocr/common.hpp"
#include "blocr/io.hpp"

namespace blocr {

// Block layout of an M-dimensional outcome vector: J contiguous blocks of
// sizes d[0..J-1]. Immutable after construction.
struct BlockPartition {
  int J = 0;
  std::vector<int> d;
  std::vector<int> offsets;  // offsets[j] = start index of block j, offsets[0] == 0
  int M = 0;
};

inline BlockPartition validate_partition(std::span<const int> sizes) {
  if (sizes.empty()) throw validation_error("partition: empty block-size sequence");
  BlockPartition part;
  part.J = static_cast<int>(sizes.size());
  part.d.assign(sizes.begin(), sizes.end());
  part.offsets.resize(part.J);
  int acc = 0;
  for (int j = 0; j < part.J; ++j) {
    if (sizes[j] < 1)
      throw validation_error("partition: block " + std::to_string(j) +
                             " has nonpositive size " + std::to_string(sizes[j]));
    part.offsets[j] = acc;
    acc += sizes[j];
  }
  part.M = acc;
  return part;
}

inline BlockPartition validate_partition(const std::vector<int>& sizes) {
  return validate_partition(std::span<const int>(sizes));
}

// Orthonormal complement of the all-ones direction in R^d, taken from the
// classical Helmert matrix of order d without its first row, transposed to
// column form. Column k (0-based) has k+1 leading entries 1/sqrt((k+2)(k+1))
// followed by -(k+1)/sqrt((k+2)(k+1)) and zeros.
inline Eigen::MatrixXd helmert_complement(int d) {
  if (d < 1) throw validation_error("helmert_complement: block size must be >= 1");
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(d, d - 1);
  for (int k = 2; k <= d; ++k) {
    const double s = 1.0 / std::sqrt(static_cast<double>(k) * (k - 1));
    for (int r = 0; r < k - 1; ++r) v(r, k - 2) = s;
    v(k - 1, k - 2) = -s * (k - 1);
  }
  return v;
}

// Rotation basis for the canonical form: nu_tilde spans the per-block mean
// directions, nu_perp the within-block contrasts.
struct CanonicalBasis {
  BlockPartition partition;
  Eigen::MatrixXd nu_tilde;  // M x J
  Eigen::MatrixXd nu_perp;   // M x (M - J)

  // Q = (nu_tilde nu_perp); dense M x M, oracle scale only.
  Eigen::MatrixXd materialize_q(int threshold = kOracleThreshold) const {
    if (partition.M > threshold)
      throw validation_error("materialize_q: M = " + std::to_string(partition.M) +
                             " exceeds oracle threshold " + std::to_string(threshold));
    Eigen::MatrixXd q(partition.M, partition.M);
    q.leftCols(partition.J) = nu_tilde;
    q.rightCols(partition.M - partition.J) = nu_perp;
    return q;
  }
};

inline CanonicalBasis build_basis(const BlockPartition& part) {
  CanonicalBasis basis;
  basis.partition = part;
  basis.nu_tilde = Eigen::MatrixXd::Zero(part.M, part.J);
  basis.nu_perp = Eigen::MatrixXd::Zero(part.M, part.M - part.J);
  int perp_col = 0;
  for (int j = 0; j < part.J; ++j) {
    const int dj = part.d[j];
    const int off = part.offsets[j];
    basis.nu_tilde.block(off, j, dj, 1).setConstant(1.0 / std::sqrt(static_cast<double>(dj)));
    if (dj > 1) {
      basis.nu_perp.block(off, perp_col, dj, dj - 1) = helmert_complement(dj);
      perp_col += dj - 1;
    }
  }
  return basis;
}

// Partition file: {"participant_id": string, "J": int, "d": [int], "T": int}.
// T is carried through as metadata, not enforced against inputs.
struct PartitionRecord {
  std::string participant_id;
  BlockPartition partition;
  int T = 0;
};

inline PartitionRecord partition_record_from_json(const nlohmann::json& obj) {
  if (!obj.is_object()) throw validation_error("partition file: expected a JSON object");
  PartitionRecord rec;
  rec.participant_id = obj.value("participant_id", std::string{});
  if (!obj.contains("d") || !obj["d"].is_array())
    throw validation_error("partition file: missing \"d\" array");
  std::vector<int> sizes = obj["d"].get<std::vector<int>>();
  rec.partition = validate_partition(sizes);
  if (obj.contains("J") && obj["J"].get<int>() != rec.partition.J)
    throw validation_error("partition file: J does not match length of d");
  rec.T = obj.value("T", 0);
  return rec;
}

inline nlohmann::json partition_record_to_json(const PartitionRecord& rec) {
  return nlohmann::json{{"participant_id", rec.participant_id},
                        {"J", rec.partition.J},
                        {"d", rec.partition.d},
                        {"T", rec.T}};
}

// A partition file holds either one record or an array of them.
inline std::vector<PartitionRecord> read_partition_file(const std::filesystem::path& path) {
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(io::read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw validation_error("partition file " + path.string() + ": " + e.what());
  }
  std::vector<PartitionRecord> records;
  if (parsed.is_array()) {
    for (const auto& obj : parsed) records.push_back(partition_record_from_json(obj));
  } else {
    records.push_back(partition_record_from_json(parsed));
  }
  if (records.empty()) throw validation_error("partition file " + path.string() + ": empty");
  return records;
}

inline void write_partition_file(const std::filesystem::path& path,
                                 const std::vector<PartitionRecord>& records) {
  nlohmann::json out;
  if (records.size() == 1) {
    out = partition_record_to_json(records.front());
  } else {
    out = nlohmann::json::array();
    for (const auto& rec : records) out.push_back(partition_record_to_json(rec));
  }
  io::write_text_file(path, out.dump(2) + "\n");
}

}  // namespace blocr
