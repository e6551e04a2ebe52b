#include "embalance/model_io.hpp"

#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "embalance/embedding_store.hpp"

namespace embal {

namespace {

constexpr char kMagic[4] = {'K', 'M', 'C', '1'};

}  // namespace

void write_model(const ClusterModel& model, const std::filesystem::path& path, const std::string& provenance) {
  detail::ByteWriter w;
  w.put_raw(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kModelFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.k()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.dim()));
  // Column-major d x k is already centroid by centroid.
  w.put_raw(model.centroids.data(), static_cast<std::size_t>(model.centroids.size()) * sizeof(float));
  w.put<std::uint64_t>(model.labels.size());
  for (const Index l : model.labels) w.put<std::uint32_t>(static_cast<std::uint32_t>(l));
  detail::write_file(path, w.bytes());

  nlohmann::json meta;
  meta["provenance"] = provenance;
  meta["objective"] = model.objective;
  meta["iterations_run"] = model.iterations_run;
  meta["converged"] = model.converged;
  detail::write_text(sidecar_path(path), meta.dump() + "\n");
}

StoredModel read_model(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  char magic[4];
  if (!r.get_raw(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::bad_magic, path.string() + ": not a KMC1 model file");
  std::uint32_t version = 0, k = 0, d = 0;
  if (!r.get(version)) throw Error(ErrorCode::truncated, path.string() + ": truncated header");
  if (version != kModelFormatVersion)
    throw Error(ErrorCode::version_mismatch, path.string() + ": unsupported version " + std::to_string(version));
  if (!r.get(k) || !r.get(d)) throw Error(ErrorCode::truncated, path.string() + ": truncated header");
  if (k == 0 || d == 0) throw Error(ErrorCode::validation, path.string() + ": empty centroid matrix");

  StoredModel model;
  model.centroids.resize(d, k);
  if (!r.get_raw(model.centroids.data(), std::size_t{k} * d * sizeof(float)))
    throw Error(ErrorCode::truncated, path.string() + ": truncated centroids");
  std::uint64_t n = 0;
  if (!r.get(n) || n > r.remaining() / sizeof(std::uint32_t) || n * sizeof(std::uint32_t) != r.remaining())
    throw Error(ErrorCode::truncated, path.string() + ": label block does not match its count");
  model.labels.resize(n);
  for (auto& l : model.labels) {
    std::uint32_t v = 0;
    r.get(v);
    if (v >= k) throw Error(ErrorCode::validation, path.string() + ": label " + std::to_string(v) + " >= k");
    l = v;
  }

  const auto meta = sidecar_path(path);
  if (std::filesystem::exists(meta)) {
    const auto text = detail::read_file(meta);
    try {
      const auto j = nlohmann::json::parse(text.begin(), text.end());
      model.provenance = j.value("provenance", "");
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::validation, meta.string() + ": " + e.what());
    }
  }
  return model;
}

std::vector<Index> read_index_list(const std::filesystem::path& path) {
  errno = 0;
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string() + ": " + detail::io_cause());
  std::vector<Index> values;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    std::istringstream fields(line);
    Index v = -1;
    std::string rest;
    if (!(fields >> v) || v < 0 || (fields >> rest))
      throw Error(ErrorCode::validation, path.string() + ":" + std::to_string(line_no) + ": expected one non-negative integer");
    values.push_back(v);
  }
  return values;
}

void write_index_list(const std::vector<Index>& values, const std::filesystem::path& path) {
  std::string text;
  text.reserve(values.size() * 8);
  for (const Index v : values) {
    text += std::to_string(v);
    text += '\n';
  }
  detail::write_text(path, text);
}

}  // namespace embal
