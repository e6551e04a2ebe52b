#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "embalance/distill_losses.hpp"
#include "embalance/embedding_store.hpp"
#include "embalance/types.hpp"

namespace embal {

namespace fs = std::filesystem;

/// Per-stage seed: splitmix64(seed ^ fnv1a64(stage)). Every stage derives its
/// own stream from the top-level seed, so a stage run on its own with the
/// same --seed reproduces the pipeline's result.
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

/// Loads an EMB1 file, rejects NaN/Inf/zero rows and L2-normalizes.
EmbeddingSet load_normalized(const fs::path& path);

nlohmann::json histogram_json(const std::map<Index, Index>& histogram);

struct IngestArgs {
  fs::path input;
  fs::path output;
  bool normalize = false;
};

struct DedupArgs {
  fs::path input;
  double beta = 0.07;
  Index topk = 64;
  Index chunks = 0;  // 0: one per worker thread
  fs::path out_keep;
  fs::path out_emb;   // optional: kept rows as EMB1
  fs::path out_sets;  // optional: set label per item
};

struct ClusterArgs {
  fs::path input;
  Index k = 1024;
  Index iters = 100;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  fs::path out_model;
};

struct LossArgs {
  std::array<fs::path, 4> batch;  // student image, student text, teacher image, teacher text
  fs::path labels;
  fs::path prototypes;
  LossParams params;
  double neg_rate = 1.0;
  std::uint64_t seed = 0;
  bool grad_check = false;
  bool allow_foreign_prototypes = false;
};

struct StatsArgs {
  fs::path input;
  fs::path model;  // optional KMC1 file
  fs::path sets;   // optional per-item set labels
  fs::path csv;    // optional histogram CSV
};

/// Each returns its JSON report. Wall-clock times live under "timings" and
/// are the only non-deterministic fields.
nlohmann::json run_ingest(const IngestArgs& args);
nlohmann::json run_dedup(const DedupArgs& args);
nlohmann::json run_cluster(const ClusterArgs& args);
nlohmann::json run_loss(const LossArgs& args);
nlohmann::json run_stats(const StatsArgs& args);

/// Flat `key = value` configuration; keys are the CLI flag names.
struct PipelineConfig {
  fs::path input;
  fs::path out_dir = "embalance-out";
  std::vector<std::string> stages = {"dedup", "cluster", "loss"};
  double beta = 0.07;
  Index topk = 64;
  Index chunks = 0;
  Index k = 1024;
  Index iters = 100;
  double tol = 1e-6;
  double tau = 0.07;
  double alpha = 0.999;
  double gamma = 0.5;
  double neg_rate = 1.0;
  std::uint64_t seed = 0;
  std::vector<fs::path> batch;
  fs::path labels;

  /// Throws ErrorCode::invalid_argument for unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  void validate() const;
  bool has_stage(std::string_view stage) const;

  std::string to_text() const;
  static PipelineConfig parse(std::string_view text);
  static PipelineConfig load(const fs::path& path);
  void save(const fs::path& path) const;
  nlohmann::json to_json() const;

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

/// dedup -> cluster (on the kept subset) -> loss (if a batch is configured).
/// Artifacts go to config.out_dir, guarded by a lockfile. On failure the run
/// report is written with "status": "incomplete" and the error is rethrown
/// prefixed with the stage name.
nlohmann::json run_pipeline(const PipelineConfig& config);

/// Deep copy of a report without any "timings" members.
nlohmann::json strip_timings(nlohmann::json report);

}  // namespace embal
