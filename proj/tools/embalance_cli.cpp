// embalance: semantic dedup, k-means prototypes and distillation losses over
// embedding files.
//
// Exit codes: 0 success, 1 internal error, 2 usage error, 3 I/O failure,
// 4 invalid input data, 5 violated precondition.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "embalance/pipeline.hpp"

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kUsage = 2, kIo = 3, kValidation = 4, kPrecondition = 5 };

int exit_code_for(embal::ErrorCode code) {
  switch (embal::error_class(code)) {
    case embal::ErrorClass::io: return kIo;
    case embal::ErrorClass::validation: return kValidation;
    case embal::ErrorClass::precondition: return kPrecondition;
  }
  return kInternal;
}

void emit(const nlohmann::json& report, const std::string& out) {
  if (out.empty()) {
    std::cout << report.dump(2) << "\n";
    return;
  }
  std::ofstream file(out);
  file << report.dump(2) << "\n";
  if (!file) throw embal::Error(embal::ErrorCode::io, "cannot write report to " + out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding semantic balance, clustering and distillation-loss toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(EMBALANCE_VERSION));
  std::string out;

  // ingest
  embal::IngestArgs ingest;
  std::string ingest_input, ingest_output;
  auto* ingest_cmd = app.add_subcommand("ingest", "Convert text/CSV rows of floats to an EMB1 file");
  ingest_cmd->add_option("--input", ingest_input, "Text file, one embedding per line")->required();
  ingest_cmd->add_option("--output", ingest_output, "EMB1 file to write")->required();
  ingest_cmd->add_flag("--normalize", ingest.normalize, "L2-normalize rows before writing");
  ingest_cmd->add_option("--out", out, "Write the JSON report here instead of stdout");

  // dedup
  embal::DedupArgs dedup;
  std::string dedup_input, dedup_keep, dedup_emb, dedup_sets;
  auto* dedup_cmd = app.add_subcommand("dedup", "Semantic balance: keep one item per near-duplicate set");
  dedup_cmd->add_option("--input", dedup_input, "EMB1 embeddings")->required();
  dedup_cmd->add_option("--beta", dedup.beta, "Distance threshold (merge when distance < beta)")->capture_default_str();
  dedup_cmd->add_option("--topk", dedup.topk, "Neighbors retained per item")->capture_default_str();
  dedup_cmd->add_option("--chunks", dedup.chunks, "Chunk count (0 = one per thread)")->capture_default_str();
  dedup_cmd->add_option("--out-keep", dedup_keep, "Kept indices, one per line")->required();
  dedup_cmd->add_option("--out-emb", dedup_emb, "Optional EMB1 file with the kept rows");
  dedup_cmd->add_option("--out-sets", dedup_sets, "Optional set label per item");
  dedup_cmd->add_option("--out", out, "Write the JSON report here instead of stdout");

  // cluster
  embal::ClusterArgs cluster;
  std::string cluster_input, cluster_model;
  auto* cluster_cmd = app.add_subcommand("cluster", "Spherical k-means; writes a KMC1 model");
  cluster_cmd->add_option("--input", cluster_input, "EMB1 embeddings")->required();
  cluster_cmd->add_option("--k", cluster.k, "Number of clusters")->capture_default_str();
  cluster_cmd->add_option("--iters", cluster.iters, "Maximum assignment steps")->capture_default_str();
  cluster_cmd->add_option("--tol", cluster.tol, "Stop when the objective improves by at most this")->capture_default_str();
  cluster_cmd->add_option("--seed", cluster.seed, "Top-level seed")->capture_default_str();
  cluster_cmd->add_option("--out-model", cluster_model, "KMC1 model file")->required();
  cluster_cmd->add_option("--out", out, "Write the JSON report here instead of stdout");

  // loss
  embal::LossArgs loss;
  std::vector<std::string> loss_batch;
  std::string loss_labels, loss_prototypes;
  auto* loss_cmd = app.add_subcommand("loss", "Evaluate every distillation loss on one batch");
  loss_cmd->add_option("--batch", loss_batch, "Student image, student text, teacher image, teacher text (EMB1)")
      ->expected(4)
      ->required();
  loss_cmd->add_option("--labels", loss_labels, "Cluster label per batch row")->required();
  loss_cmd->add_option("--prototypes", loss_prototypes, "KMC1 model from `cluster`")->required();
  loss_cmd->add_option("--tau", loss.params.tau, "Softmax temperature")->capture_default_str();
  loss_cmd->add_option("--alpha", loss.params.alpha, "Weight of the logit loss in the cluster loss")->capture_default_str();
  loss_cmd->add_option("--gamma", loss.params.gamma, "Weight of image->teacher-text in the instance loss")->capture_default_str();
  loss_cmd->add_option("--neg-rate", loss.neg_rate, "Fraction of negative prototypes sampled")->capture_default_str();
  loss_cmd->add_option("--seed", loss.seed, "Top-level seed")->capture_default_str();
  loss_cmd->add_flag("--grad-check", loss.grad_check, "Compare gradients with central finite differences");
  loss_cmd->add_flag("--allow-foreign-prototypes", loss.allow_foreign_prototypes,
                     "Accept prototypes whose provenance is not k-means");
  loss_cmd->add_option("--out", out, "Write the JSON report here instead of stdout");

  // stats
  embal::StatsArgs stats;
  std::string stats_input, stats_model, stats_sets, stats_csv;
  auto* stats_cmd = app.add_subcommand("stats", "Validation summary and set/cluster size histograms");
  stats_cmd->add_option("--input", stats_input, "EMB1 embeddings")->required();
  auto* model_opt = stats_cmd->add_option("--model", stats_model, "KMC1 model: cluster size histogram");
  stats_cmd->add_option("--sets", stats_sets, "Set label per item: set size histogram")->excludes(model_opt);
  stats_cmd->add_option("--csv", stats_csv, "Also write the histogram as CSV");
  stats_cmd->add_option("--out", out, "Write the JSON report here instead of stdout");

  // run
  std::string config_path;
  bool print_config = false;
  std::map<std::string, std::string> overrides;
  auto* run_cmd = app.add_subcommand("run", "Full pipeline: dedup -> cluster -> loss");
  run_cmd->add_option("--config", config_path, "key = value config file; flags override it");
  run_cmd->add_flag("--print-config", print_config, "Print the resolved configuration and exit");
  for (const char* key : {"input", "out-dir", "stages", "beta", "topk", "chunks", "k", "iters", "tol", "tau", "alpha",
                          "gamma", "neg-rate", "seed", "batch", "labels"})
    run_cmd->add_option(std::string("--") + key, overrides[key]);
  run_cmd->add_option("--out", out, "Also write the run report here (it always goes to <out-dir>/run_report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*ingest_cmd) {
      ingest.input = ingest_input;
      ingest.output = ingest_output;
      emit(embal::run_ingest(ingest), out);
    } else if (*dedup_cmd) {
      dedup.input = dedup_input;
      dedup.out_keep = dedup_keep;
      dedup.out_emb = dedup_emb;
      dedup.out_sets = dedup_sets;
      emit(embal::run_dedup(dedup), out);
    } else if (*cluster_cmd) {
      cluster.input = cluster_input;
      cluster.out_model = cluster_model;
      emit(embal::run_cluster(cluster), out);
    } else if (*loss_cmd) {
      for (std::size_t i = 0; i < 4; ++i) loss.batch[i] = loss_batch[i];
      loss.labels = loss_labels;
      loss.prototypes = loss_prototypes;
      emit(embal::run_loss(loss), out);
    } else if (*stats_cmd) {
      stats.input = stats_input;
      stats.model = stats_model;
      stats.sets = stats_sets;
      stats.csv = stats_csv;
      emit(embal::run_stats(stats), out);
    } else if (*run_cmd) {
      auto config = config_path.empty() ? embal::PipelineConfig{} : embal::PipelineConfig::load(config_path);
      for (const auto& [key, value] : overrides)
        if (run_cmd->count(std::string("--") + key) > 0) config.set(key, value);
      if (print_config) {
        emit(nlohmann::json{{"config", config.to_json()}}, out);
        return kOk;
      }
      emit(embal::run_pipeline(config), out);
    }
  } catch (const embal::Error& e) {
    std::cerr << "embalance: " << e.what() << " [" << embal::to_string(e.code()) << "]\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "embalance: internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
