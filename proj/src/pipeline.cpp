#include "embalance/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "embalance/clustering.hpp"
#include "embalance/model_io.hpp"
#include "embalance/parallel.hpp"
#include "embalance/semantic_balance.hpp"

namespace embal {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_double(std::string_view key, std::string_view text) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size())
    throw Error(ErrorCode::invalid_argument, "bad value for " + std::string(key) + ": '" + std::string(text) + "'");
  return v;
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view text) {
  Int v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size())
    throw Error(ErrorCode::invalid_argument, "bad value for " + std::string(key) + ": '" + std::string(text) + "'");
  return v;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto item = trim(text.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

Index resolve_chunks(Index chunks) { return chunks > 0 ? chunks : static_cast<Index>(worker_count()); }

void write_json(const fs::path& path, const nlohmann::json& j) { detail::write_text(path, j.dump(2) + "\n"); }

// Exclusive lockfile inside the output directory.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".embalance.lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw Error(ErrorCode::io, "cannot lock " + dir.string() + " (" + detail::io_cause() +
                                     "); another run may be using it, remove " + path_.string() + " if not");
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

}  // namespace

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : stage) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ h);
}

EmbeddingSet load_normalized(const fs::path& path) {
  const auto set = read_embeddings(path);
  const auto report = validate(set);
  if (report.nan_count > 0 || report.inf_count > 0)
    throw Error(ErrorCode::non_finite, path.string() + ": " + std::to_string(report.nan_count) + " NaN and " +
                                           std::to_string(report.inf_count) + " Inf entries");
  return normalize(set);
}

nlohmann::json histogram_json(const std::map<Index, Index>& histogram) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [size, count] : histogram) j[std::to_string(size)] = count;
  return j;
}

nlohmann::json strip_timings(nlohmann::json report) {
  if (report.is_object()) {
    report.erase("timings");
    for (auto& [key, value] : report.items()) value = strip_timings(value);
  } else if (report.is_array()) {
    for (auto& value : report) value = strip_timings(value);
  }
  return report;
}

// --- subcommands -----------------------------------------------------------

nlohmann::json run_ingest(const IngestArgs& args) {
  const auto start = Clock::now();
  auto set = parse_text_embeddings(args.input);
  if (args.normalize) set = normalize(set);
  write_embeddings(set, args.output);
  const auto report = validate(set);
  return {
      {"n", set.count()},
      {"d", set.dim()},
      {"output", args.output.string()},
      {"normalized", args.normalize},
      {"nan_count", report.nan_count},
      {"inf_count", report.inf_count},
      {"zero_rows", report.zero_rows},
      {"norm_deviation_max", report.norm_deviation_max},
      {"timings", {{"ingest_seconds", seconds_since(start)}}},
  };
}

nlohmann::json run_dedup(const DedupArgs& args) {
  auto start = Clock::now();
  const auto set = load_normalized(args.input);
  const double load_seconds = seconds_since(start);

  start = Clock::now();
  const auto table = neighbor_table(set, args.topk, resolve_chunks(args.chunks));
  const double topk_seconds = seconds_since(start);
  start = Clock::now();
  const auto partition = build_sets(table, args.beta);
  auto result = select_representatives(partition, set);
  result.beta = args.beta;
  result.k = args.topk;
  const double group_seconds = seconds_since(start);

  if (!args.out_keep.empty()) write_index_list(result.kept, args.out_keep);
  if (!args.out_emb.empty()) write_embeddings(set.subset(result.kept), args.out_emb);
  if (!args.out_sets.empty()) write_index_list(partition.labels(), args.out_sets);

  return {
      {"n", result.count},
      {"kept", static_cast<Index>(result.kept.size())},
      {"removed_fraction", result.removed_fraction},
      {"beta", result.beta},
      {"k", result.k},
      {"set_size_histogram", histogram_json(result.set_sizes)},
      {"timings", {{"load_seconds", load_seconds}, {"topk_seconds", topk_seconds}, {"group_seconds", group_seconds}}},
  };
}

nlohmann::json run_cluster(const ClusterArgs& args) {
  auto start = Clock::now();
  const auto set = load_normalized(args.input);
  const double load_seconds = seconds_since(start);

  start = Clock::now();
  const auto model = kmeans(set, {args.k, args.iters, args.tol, stage_seed(args.seed, "cluster")});
  const double kmeans_seconds = seconds_since(start);
  if (!args.out_model.empty()) write_model(model, args.out_model);

  std::map<Index, Index> histogram;
  for (const Index size : model.cluster_sizes()) ++histogram[size];
  return {
      {"n", set.count()},
      {"k", model.k()},
      {"objective", model.objective},
      {"iterations_run", model.iterations_run},
      {"converged", model.converged},
      {"cluster_size_histogram", histogram_json(histogram)},
      {"timings", {{"load_seconds", load_seconds}, {"kmeans_seconds", kmeans_seconds}}},
  };
}

nlohmann::json run_loss(const LossArgs& args) {
  const auto start = Clock::now();
  args.params.validate();
  if (!(args.neg_rate > 0.0 && args.neg_rate <= 1.0))
    throw Error(ErrorCode::invalid_argument, "neg-rate must lie in (0, 1]");

  const auto stored = read_model(args.prototypes);
  if (stored.provenance != "kmeans" && !args.allow_foreign_prototypes)
    throw Error(ErrorCode::validation, args.prototypes.string() +
                                           ": prototypes must come from k-means (provenance \"kmeans\"); pass "
                                           "--allow-foreign-prototypes to override");
  for (Index j = 0; j < stored.centroids.cols(); ++j) {
    const double norm = stored.centroids.col(j).cast<double>().norm();
    if (std::abs(norm - 1.0) > 1e-4)
      throw Error(ErrorCode::validation, args.prototypes.string() + ": prototype " + std::to_string(j) + " is not unit norm", j);
  }

  DistillBatch<double> batch;
  RowMatrix<double>* blocks[4] = {&batch.student_image, &batch.student_text, &batch.teacher_image, &batch.teacher_text};
  for (std::size_t b = 0; b < 4; ++b) *blocks[b] = load_normalized(args.batch[b]).data().cast<double>();
  batch.labels = read_index_list(args.labels);

  Prototypes<double> prototypes;
  prototypes.matrix = stored.centroids.cast<double>();
  if (batch.dim() != prototypes.dim())
    throw Error(ErrorCode::dimension_mismatch, "batch dimension " + std::to_string(batch.dim()) +
                                                   " does not match prototype dimension " + std::to_string(prototypes.dim()));
  batch.validate(prototypes.k());
  if (args.neg_rate < 1.0) {
    prototypes.active = sample_negatives(prototypes.k(), args.neg_rate, batch.labels, stage_seed(args.seed, "loss"));
  }

  const auto report = overall_loss(batch, prototypes, args.params, true);
  const auto values = [](const LossValues<double>& v) {
    return nlohmann::json{{"l_logit", v.l_logit},     {"l_kl", v.l_kl},
                          {"l_cluster", v.l_cluster}, {"l_contrast_base", v.l_contrast_base},
                          {"l_instance", v.l_instance}, {"l_overall", v.l_overall}};
  };
  nlohmann::json j = {
      {"n", report.n},
      {"d", batch.dim()},
      {"k", prototypes.k()},
      {"active_classes", prototypes.active.empty() ? prototypes.k() : static_cast<Index>(prototypes.active.size())},
      {"params", {{"tau", args.params.tau}, {"alpha", args.params.alpha}, {"gamma", args.params.gamma}, {"neg_rate", args.neg_rate}}},
      {"sum", values(report.sum)},
      {"mean", values(report.mean)},
      {"grad_norm_student_image", report.grad_student_image->norm()},
      {"grad_norm_student_text", report.grad_student_text->norm()},
  };
  if (args.grad_check) {
    const auto check = check_overall_gradient(batch, prototypes, args.params);
    j["grad_check"] = {{"eps", 1e-4},
                       {"relative_error_student_image", check.relative_error_image},
                       {"relative_error_student_text", check.relative_error_text},
                       {"max_relative_error", check.max_relative_error},
                       {"passed", check.max_relative_error <= 1e-5}};
  }
  j["timings"] = {{"loss_seconds", seconds_since(start)}};
  return j;
}

nlohmann::json run_stats(const StatsArgs& args) {
  const auto start = Clock::now();
  const auto set = read_embeddings(args.input);
  const auto validation = validate(set);
  nlohmann::json j = {
      {"n", set.count()},
      {"d", set.dim()},
      {"nan_count", validation.nan_count},
      {"inf_count", validation.inf_count},
      {"zero_rows", validation.zero_rows},
      {"norm_deviation_max", validation.norm_deviation_max},
  };

  std::map<Index, Index> histogram;
  std::string key;
  const auto histogram_of = [&](const std::vector<Index>& labels) {
    if (static_cast<Index>(labels.size()) != set.count())
      throw Error(ErrorCode::dimension_mismatch, std::to_string(labels.size()) + " labels for " +
                                                     std::to_string(set.count()) + " embeddings");
    std::map<Index, Index> sizes;
    for (const Index l : labels) ++sizes[l];
    std::map<Index, Index> out;
    for (const auto& [label, size] : sizes) ++out[size];
    return out;
  };
  if (!args.model.empty() && !args.sets.empty())
    throw Error(ErrorCode::invalid_argument, "pass either a model or a sets file, not both");
  if (!args.model.empty()) {
    const auto model = read_model(args.model);
    histogram = histogram_of(model.labels);
    // Empty clusters count as size 0.
    std::set<Index> used(model.labels.begin(), model.labels.end());
    const Index empty = model.centroids.cols() - static_cast<Index>(used.size());
    if (empty > 0) histogram[0] = empty;
    key = "cluster_size_histogram";
  } else if (!args.sets.empty()) {
    histogram = histogram_of(read_index_list(args.sets));
    key = "set_size_histogram";
  }
  if (!key.empty()) {
    j[key] = histogram_json(histogram);
    if (!args.csv.empty()) {
      std::string csv = "size,count\n";
      for (const auto& [size, count] : histogram) csv += std::to_string(size) + "," + std::to_string(count) + "\n";
      detail::write_text(args.csv, csv);
    }
  }
  j["timings"] = {{"stats_seconds", seconds_since(start)}};
  return j;
}

// --- configuration ---------------------------------------------------------

void PipelineConfig::set(std::string_view key, std::string_view value) {
  value = trim(value);
  if (key == "input") input = std::string(value);
  else if (key == "out-dir") out_dir = std::string(value);
  else if (key == "stages") stages = split_list(value);
  else if (key == "beta") beta = parse_double(key, value);
  else if (key == "topk") topk = parse_int<Index>(key, value);
  else if (key == "chunks") chunks = parse_int<Index>(key, value);
  else if (key == "k") k = parse_int<Index>(key, value);
  else if (key == "iters") iters = parse_int<Index>(key, value);
  else if (key == "tol") tol = parse_double(key, value);
  else if (key == "tau") tau = parse_double(key, value);
  else if (key == "alpha") alpha = parse_double(key, value);
  else if (key == "gamma") gamma = parse_double(key, value);
  else if (key == "neg-rate") neg_rate = parse_double(key, value);
  else if (key == "seed") seed = parse_int<std::uint64_t>(key, value);
  else if (key == "batch") {
    batch.clear();
    for (auto& p : split_list(value)) batch.emplace_back(p);
  } else if (key == "labels") labels = std::string(value);
  else throw Error(ErrorCode::invalid_argument, "unknown config key '" + std::string(key) + "'");
}

bool PipelineConfig::has_stage(std::string_view stage) const {
  return std::find(stages.begin(), stages.end(), stage) != stages.end();
}

void PipelineConfig::validate() const {
  static const std::set<std::string> known = {"dedup", "cluster", "loss"};
  for (const auto& s : stages)
    if (!known.count(s)) throw Error(ErrorCode::invalid_argument, "unknown stage '" + s + "'");
  if (input.empty()) throw Error(ErrorCode::invalid_argument, "input is required");
  if (!(beta > 0.0)) throw Error(ErrorCode::invalid_argument, "beta must be > 0");
  if (topk < 1) throw Error(ErrorCode::invalid_argument, "topk must be >= 1");
  if (chunks < 0) throw Error(ErrorCode::invalid_argument, "chunks must be >= 0 (0 = one per thread)");
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  if (iters < 1) throw Error(ErrorCode::invalid_argument, "iters must be >= 1");
  if (!(tol >= 0.0)) throw Error(ErrorCode::invalid_argument, "tol must be >= 0");
  LossParams{tau, alpha, gamma}.validate();
  if (!(neg_rate > 0.0 && neg_rate <= 1.0)) throw Error(ErrorCode::invalid_argument, "neg-rate must lie in (0, 1]");
  if (!batch.empty() && batch.size() != 4)
    throw Error(ErrorCode::invalid_argument, "batch needs four files: student image, student text, teacher image, teacher text");
  if (!batch.empty() && labels.empty()) throw Error(ErrorCode::invalid_argument, "batch given without labels");
}

std::string PipelineConfig::to_text() const {
  std::ostringstream out;
  const auto join = [](const auto& items) {
    std::string s;
    for (const auto& item : items) {
      if (!s.empty()) s += ",";
      if constexpr (std::is_same_v<std::decay_t<decltype(item)>, fs::path>)
        s += item.string();
      else
        s += item;
    }
    return s;
  };
  out << "input = " << input.string() << "\n"
      << "out-dir = " << out_dir.string() << "\n"
      << "stages = " << join(stages) << "\n"
      << "beta = " << format_double(beta) << "\n"
      << "topk = " << topk << "\n"
      << "chunks = " << chunks << "\n"
      << "k = " << k << "\n"
      << "iters = " << iters << "\n"
      << "tol = " << format_double(tol) << "\n"
      << "tau = " << format_double(tau) << "\n"
      << "alpha = " << format_double(alpha) << "\n"
      << "gamma = " << format_double(gamma) << "\n"
      << "neg-rate = " << format_double(neg_rate) << "\n"
      << "seed = " << seed << "\n"
      << "batch = " << join(batch) << "\n"
      << "labels = " << labels.string() << "\n";
  return out.str();
}

PipelineConfig PipelineConfig::parse(std::string_view text) {
  PipelineConfig config;
  Index line_no = 0;
  while (!text.empty()) {
    const auto newline = text.find('\n');
    const auto line = trim(text.substr(0, newline));
    text.remove_prefix(newline == std::string_view::npos ? text.size() : newline + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw Error(ErrorCode::invalid_argument, "config line " + std::to_string(line_no) + ": expected key = value");
    config.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return config;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  return parse(std::string_view(bytes.data(), bytes.size()));
}

void PipelineConfig::save(const fs::path& path) const { detail::write_text(path, to_text()); }

nlohmann::json PipelineConfig::to_json() const {
  std::vector<std::string> batch_paths;
  for (const auto& p : batch) batch_paths.push_back(p.string());
  return {
      {"input", input.string()}, {"out-dir", out_dir.string()}, {"stages", stages},
      {"beta", beta},            {"topk", topk},                {"chunks", chunks},
      {"k", k},                  {"iters", iters},              {"tol", tol},
      {"tau", tau},              {"alpha", alpha},              {"gamma", gamma},
      {"neg-rate", neg_rate},    {"seed", seed},                {"batch", batch_paths},
      {"labels", labels.string()},
  };
}

// --- pipeline --------------------------------------------------------------

nlohmann::json run_pipeline(const PipelineConfig& config) {
  config.validate();
  std::error_code ec;
  fs::create_directories(config.out_dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create " + config.out_dir.string() + ": " + ec.message());
  DirectoryLock lock(config.out_dir);

  const auto& dir = config.out_dir;
  config.save(dir / "config.txt");

  nlohmann::json report = {
      {"tool", "embalance"},
      {"version", EMBALANCE_VERSION},
      {"status", "incomplete"},
      {"config", config.to_json()},
      {"stages", nlohmann::json::object()},
      {"timings", nlohmann::json::object()},
  };
  std::string stage = "load";
  const auto run_stage = [&](const std::string& name, auto&& body) {
    stage = name;
    const auto start = Clock::now();
    auto stage_report = body();
    report["timings"][name + "_seconds"] = seconds_since(start);
    report["stages"][name] = stage_report;
    write_json(dir / (name + ".json"), stage_report);
    return stage_report;
  };

  try {
    auto input_set = read_embeddings(config.input);
    report["input_count"] = input_set.count();
    fs::path cluster_input = config.input;

    if (config.has_stage("dedup")) {
      DedupArgs args{config.input, config.beta, config.topk, config.chunks, dir / "kept.txt", dir / "kept.emb", dir / "sets.txt"};
      const auto r = run_stage("dedup", [&] { return run_dedup(args); });
      report["kept_count"] = r["kept"];
      report["removed_fraction"] = r["removed_fraction"];
      cluster_input = args.out_emb;
    }
    if (config.has_stage("cluster")) {
      ClusterArgs args{cluster_input, config.k, config.iters, config.tol, config.seed, dir / "model.kmc"};
      const auto r = run_stage("cluster", [&] { return run_cluster(args); });
      report["cluster_objective"] = r["objective"];
    }
    if (config.has_stage("loss") && !config.batch.empty()) {
      if (!config.has_stage("cluster")) throw Error(ErrorCode::invalid_argument, "the loss stage needs the cluster stage");
      LossArgs args;
      std::copy(config.batch.begin(), config.batch.end(), args.batch.begin());
      args.labels = config.labels;
      args.prototypes = dir / "model.kmc";
      args.params = {config.tau, config.alpha, config.gamma};
      args.neg_rate = config.neg_rate;
      args.seed = config.seed;
      const auto r = run_stage("loss", [&] { return run_loss(args); });
      report["loss"] = r["sum"];
    }
    report["status"] = "complete";
  } catch (const Error& e) {
    report["failed_stage"] = stage;
    report["error"] = e.what();
    write_json(dir / "run_report.json", report);
    throw Error(e.code(), "stage '" + stage + "': " + e.what(), e.index());
  } catch (const std::exception& e) {
    report["failed_stage"] = stage;
    report["error"] = e.what();
    write_json(dir / "run_report.json", report);
    throw;
  }
  write_json(dir / "run_report.json", report);
  return report;
}

}  // namespace embal
