#include "embalance/embedding_store.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "binary_io.hpp"

namespace embal {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 4;

}  // namespace

EmbeddingSet::EmbeddingSet(RowMatrix<float> data, std::vector<std::uint64_t> ids, std::string source)
    : data_(std::move(data)), ids_(std::move(ids)), source_(std::move(source)) {
  if (data_.cols() <= 0) throw Error(ErrorCode::validation, "embedding dimension must be positive");
  if (ids_.empty()) {
    ids_.resize(static_cast<std::size_t>(data_.rows()));
    std::iota(ids_.begin(), ids_.end(), std::uint64_t{0});
  }
  if (static_cast<Index>(ids_.size()) != data_.rows())
    throw Error(ErrorCode::validation, "id count " + std::to_string(ids_.size()) + " does not match row count " +
                                           std::to_string(data_.rows()));
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!seen.insert(ids_[i]).second)
      throw Error(ErrorCode::validation, "duplicate id " + std::to_string(ids_[i]), static_cast<Index>(i));
  }
}

bool EmbeddingSet::has_default_ids() const {
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (ids_[i] != i) return false;
  return true;
}

EmbeddingSet EmbeddingSet::subset(std::span<const Index> indices) const {
  RowMatrix<float> rows(static_cast<Index>(indices.size()), dim());
  std::vector<std::uint64_t> ids;
  ids.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Index i = indices[r];
    if (i < 0 || i >= count()) throw Error(ErrorCode::invalid_argument, "subset index out of range", i);
    rows.row(static_cast<Index>(r)) = data_.row(i);
    ids.push_back(ids_[static_cast<std::size_t>(i)]);
  }
  return EmbeddingSet(std::move(rows), std::move(ids), source_);
}

bool operator==(const EmbeddingSet& a, const EmbeddingSet& b) {
  if (a.count() != b.count() || a.dim() != b.dim() || a.ids_ != b.ids_ || a.source_ != b.source_) return false;
  const auto bytes = static_cast<std::size_t>(a.data_.size()) * sizeof(float);
  return bytes == 0 || std::memcmp(a.data_.data(), b.data_.data(), bytes) == 0;
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".meta.json";
  return p;
}

void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.put_raw(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kEmbeddingFormatVersion);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(set.count()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(set.dim()));
  w.put_raw(set.data().data(), static_cast<std::size_t>(set.data().size()) * sizeof(float));
  detail::write_file(path, w.bytes());

  const auto meta = sidecar_path(path);
  if (set.has_default_ids() && set.source().empty()) {
    std::error_code ec;
    std::filesystem::remove(meta, ec);
    return;
  }
  nlohmann::json j;
  j["ids"] = set.ids();
  j["source"] = set.source();
  detail::write_text(meta, j.dump() + "\n");
}

EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes);

  char magic[4];
  if (!r.get_raw(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::bad_magic, path.string() + ": not an EMB1 file");
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
  if (!r.get(version)) throw Error(ErrorCode::truncated, path.string() + ": truncated header");
  if (version != kEmbeddingFormatVersion)
    throw Error(ErrorCode::version_mismatch, path.string() + ": unsupported version " + std::to_string(version));
  if (!r.get(count) || !r.get(dim)) throw Error(ErrorCode::truncated, path.string() + ": truncated header");
  if (dim == 0) throw Error(ErrorCode::validation, path.string() + ": dimension is zero");

  const std::uint64_t row_bytes = std::uint64_t{dim} * sizeof(float);
  if (count > r.remaining() / row_bytes || count * row_bytes != r.remaining())
    throw Error(ErrorCode::truncated, path.string() + ": payload is " + std::to_string(r.remaining()) +
                                          " bytes, header implies N*d*4 = " + std::to_string(count) + "*" +
                                          std::to_string(dim) + "*4");

  RowMatrix<float> data(static_cast<Index>(count), static_cast<Index>(dim));
  r.get_raw(data.data(), static_cast<std::size_t>(count * row_bytes));

  std::vector<std::uint64_t> ids;
  std::string source;
  const auto meta = sidecar_path(path);
  if (std::filesystem::exists(meta)) {
    const auto text = detail::read_file(meta);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text.begin(), text.end());
      if (j.contains("ids")) ids = j.at("ids").get<std::vector<std::uint64_t>>();
      if (j.contains("source")) source = j.at("source").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::validation, meta.string() + ": " + e.what());
    }
  }
  return EmbeddingSet(std::move(data), std::move(ids), std::move(source));
}

EmbeddingSet normalize(const EmbeddingSet& set) {
  RowMatrix<float> out(set.count(), set.dim());
  for (Index i = 0; i < set.count(); ++i) {
    const double norm = set.data().row(i).cast<double>().norm();
    if (norm == 0.0) throw Error(ErrorCode::zero_row, "row " + std::to_string(i) + " is all zero", i);
    if (!std::isfinite(norm)) throw Error(ErrorCode::non_finite, "row " + std::to_string(i) + " is not finite", i);
    out.row(i) = (set.data().row(i).cast<double>() / norm).cast<float>();
  }
  return EmbeddingSet(std::move(out), set.ids(), set.source());
}

ValidationReport validate(const EmbeddingSet& set) {
  ValidationReport report;
  for (Index i = 0; i < set.count(); ++i) {
    bool finite = true;
    bool zero = true;
    for (const float v : set.row(i)) {
      if (std::isnan(v)) {
        ++report.nan_count;
        finite = false;
      } else if (std::isinf(v)) {
        ++report.inf_count;
        finite = false;
      }
      if (v != 0.0f) zero = false;
    }
    if (zero) report.zero_rows.push_back(i);
    if (finite) {
      const double deviation = std::abs(set.data().row(i).cast<double>().norm() - 1.0);
      report.norm_deviation_max = std::max(report.norm_deviation_max, deviation);
    }
  }
  return report;
}

EmbeddingSet parse_text_embeddings(const std::filesystem::path& path) {
  errno = 0;
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string() + ": " + detail::io_cause());

  std::vector<float> values;
  Index dim = -1;
  Index rows = 0;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    for (char& c : line)
      if (c == ',' || c == ';') c = ' ';
    std::istringstream fields(line);
    Index width = 0;
    std::string token;
    while (fields >> token) {
      std::size_t used = 0;
      float v = 0.0f;
      try {
        v = std::stof(token, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != token.size())
        throw Error(ErrorCode::validation, path.string() + ":" + std::to_string(line_no) + ": bad number '" + token + "'");
      values.push_back(v);
      ++width;
    }
    if (dim < 0) dim = width;
    if (width != dim)
      throw Error(ErrorCode::validation, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                             std::to_string(dim) + " values, got " + std::to_string(width));
    ++rows;
  }
  if (dim <= 0) throw Error(ErrorCode::validation, path.string() + ": no data rows");
  RowMatrix<float> data = Eigen::Map<const RowMatrix<float>>(values.data(), rows, dim);
  return EmbeddingSet(std::move(data), {}, path.filename().string());
}

}  // namespace embal
