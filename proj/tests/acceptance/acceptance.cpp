// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "embalance/clustering.hpp"
#include "embalance/distill_losses.hpp"
#include "embalance/model_io.hpp"
#include "embalance/parallel.hpp"
#include "embalance/pipeline.hpp"
#include "embalance/semantic_balance.hpp"
#include "../oracles.hpp"
#include "../temp_dir.hpp"

using namespace embal;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args, const fs::path& stdout_file) {
  const std::string cmd = std::string(EMBALANCE_CLI) + " " + args + " > " + stdout_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Index cores() { return static_cast<Index>(std::max(1u, std::thread::hardware_concurrency())); }

// 1 ------------------------------------------------------------------------
Outcome dedup_oracle_equivalence() {
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<Index> pick_n(2, 2000), pick_d(2, 64);
  std::uniform_real_distribution<double> pick_beta(0.01, 1.5), pick_noise(0.01, 0.3);
  const Index chunk_choices[4] = {1, 2, 4, 8};
  const auto start = Clock::now();
  int mismatches = 0;
  Index largest = 0, total_removed = 0;
  for (int t = 0; t < 50; ++t) {
    const Index n = pick_n(rng), d = pick_d(rng);
    const double beta = pick_beta(rng);
    const auto set = oracle::clustered_set(n, d, pick_noise(rng), rng());
    const Index chunks = chunk_choices[t % 4];
    const auto fast = balance(set, {.beta = beta, .k = n - 1, .chunks = chunks});
    const auto slow = brute_force_balance(set, beta);
    if (fast.kept != slow.kept) ++mismatches;
    largest = std::max(largest, n);
    total_removed += n - static_cast<Index>(fast.kept.size());
  }
  const double secs = seconds_since(start);
  return {mismatches == 0 && secs < 60.0,
          fmt("50 instances (max N=%lld), %d mismatches, %lld items removed in total, %.1f s (limit 60 s)",
              static_cast<long long>(largest), mismatches, static_cast<long long>(total_removed), secs)};
}

// 2 ------------------------------------------------------------------------
Outcome refinement_and_chunk_invariance() {
  std::mt19937_64 rng(2002);
  std::uniform_int_distribution<Index> pick_n(50, 600), pick_d(2, 32);
  std::uniform_real_distribution<double> pick_beta(0.01, 1.0);
  int violations = 0, checks = 0;
  for (int t = 0; t < 20; ++t) {
    const Index n = pick_n(rng), d = pick_d(rng);
    const auto set = oracle::clustered_set(n, d, 0.15, rng());
    double b1 = pick_beta(rng), b2 = pick_beta(rng);
    if (b1 > b2) std::swap(b1, b2);
    const Index k1 = 1 + static_cast<Index>(rng() % 8), k2 = k1 + 1 + static_cast<Index>(rng() % 32);

    const auto reference = build_sets(neighbor_table(set, k2, 1), b1).labels();
    for (const Index c : {2, 4, 8}) {
      ++checks;
      if (build_sets(neighbor_table(set, k2, c), b1).labels() != reference) ++violations;
    }
    const auto table_k1 = neighbor_table(set, k1, 3);
    const auto table_k2 = neighbor_table(set, k2, 5);
    checks += 4;
    if (!build_sets(table_k1, b1).refines(build_sets(table_k2, b1))) ++violations;
    if (!build_sets(table_k1, b2).refines(build_sets(table_k2, b2))) ++violations;
    if (!build_sets(table_k1, b1).refines(build_sets(table_k1, b2))) ++violations;
    if (!build_sets(table_k2, b1).refines(build_sets(table_k2, b2))) ++violations;
  }
  return {violations == 0, fmt("20 instances, %d checks, %d violations", checks, violations)};
}

// 3 ------------------------------------------------------------------------
Outcome duplicate_collapse() {
  std::mt19937_64 rng(3003);
  int failures = 0;
  std::string sample;
  for (int t = 0; t < 20; ++t) {
    const Index m = 2 + static_cast<Index>(rng() % 50), distinct = static_cast<Index>(rng() % 200), d = 64;
    const Index n = m + distinct;
    RowMatrix<float> data = oracle::unit_set(n, d, rng()).data();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    const RowMatrix<float> dup = data.row(order[0]);
    for (Index i = 1; i < m; ++i) data.row(order[static_cast<std::size_t>(i)]) = dup;
    const auto result = balance(EmbeddingSet(data), {.beta = 0.07, .k = 64, .chunks = 1 + t % 4});

    Index kept_duplicates = 0;
    for (const Index i : result.kept)
      if (data.row(i) == dup) ++kept_duplicates;
    const double expected = static_cast<double>(m - 1) / static_cast<double>(n);
    const bool ok = kept_duplicates == 1 && static_cast<Index>(result.kept.size()) == distinct + 1 &&
                    result.removed_fraction == expected;
    if (!ok) ++failures;
    if (t == 0) sample = fmt("m=%lld N=%lld removed_fraction=%.17g", static_cast<long long>(m), static_cast<long long>(n),
                             result.removed_fraction);
  }
  return {failures == 0, fmt("20 instances, %d failures; e.g. %s", failures, sample.c_str())};
}

// 4 ------------------------------------------------------------------------
Outcome kmeans_descent() {
  std::mt19937_64 rng(4004);
  std::uniform_int_distribution<Index> pick_n(100, 5000), pick_k(2, 64), pick_d(2, 64);
  const auto start = Clock::now();
  int increases = 0, non_argmin = 0, not_converged = 0, reseed_steps = 0;
  for (int t = 0; t < 20; ++t) {
    const Index n = pick_n(rng), k = std::min(pick_k(rng), n), d = pick_d(rng);
    const auto set = oracle::clustered_set(n, d, 0.3, rng());
    const auto model = kmeans(set, {.k = k, .max_iters = 1000, .tol = 0.0, .seed = rng()});
    if (!model.converged) ++not_converged;
    for (std::size_t s = 0; s + 1 < model.objective_history.size(); ++s) {
      if (model.reseeded[s]) {
        ++reseed_steps;
        continue;
      }
      if (model.objective_history[s + 1] > model.objective_history[s]) ++increases;
    }
    for (Index i = 0; i < n; ++i)
      if (model.labels[static_cast<std::size_t>(i)] != oracle::nearest_centroid(set, i, model.centroids).first) ++non_argmin;
  }
  const double secs = seconds_since(start);
  return {increases == 0 && non_argmin == 0 && not_converged == 0 && secs < 120.0,
          fmt("20 instances: %d objective increases, %d re-seed steps excluded, %d non-argmin labels, %d not converged, "
              "%.1f s (limit 120 s)",
              increases, reseed_steps, non_argmin, not_converged, secs)};
}

// 5 ------------------------------------------------------------------------
Outcome blob_recovery() {
  double worst = 1.0;
  double ratio_min = 1e300;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(5005 + seed);
    const Index d = 16, per_blob = 500;
    const auto centers = oracle::unit_rows(2, d, rng);
    const double separation = (centers.row(0) - centers.row(1)).norm();
    // RMS distance of a point from its center is sigma * sqrt(d).
    const double spread = separation / 10.0;
    const double sigma = spread / std::sqrt(static_cast<double>(d));
    std::normal_distribution<double> normal(0.0, sigma);
    RowMatrix<float> data(2 * per_blob, d);
    std::vector<Index> truth;
    for (Index i = 0; i < 2 * per_blob; ++i) {
      const Index blob = i % 2;
      Eigen::RowVectorXd v = centers.row(blob);
      for (Index c = 0; c < d; ++c) v(c) += normal(rng);
      data.row(i) = v.normalized().cast<float>();
      truth.push_back(blob);
    }
    ratio_min = std::min(ratio_min, separation / spread);
    const auto model = kmeans(EmbeddingSet(data), {.k = 2, .max_iters = 100, .tol = 1e-9, .seed = seed});
    worst = std::min(worst, oracle::permutation_agreement(model.labels, truth, 2));
  }
  return {worst == 1.0, fmt("10 seeds, separation/spread = %.1f, worst agreement %.6f", ratio_min, worst)};
}

// 6 ------------------------------------------------------------------------
Outcome gradient_checks() {
  std::mt19937_64 rng(6006);
  std::uniform_int_distribution<Index> pick_n(2, 32), pick_d(2, 16), pick_k(2, 64);
  const LossParams params{};
  const auto start = Clock::now();
  double worst[4] = {0, 0, 0, 0};
  for (int t = 0; t < 20; ++t) {
    const Index n = pick_n(rng), d = pick_d(rng), k = pick_k(rng);
    Prototypes<double> p{oracle::unit_rows(k, d, rng).transpose(), {}};
    DistillBatch<double> b{oracle::unit_rows(n, d, rng), oracle::unit_rows(n, d, rng), oracle::unit_rows(n, d, rng),
                           oracle::unit_rows(n, d, rng), {}};
    std::uniform_int_distribution<Index> label(0, k - 1);
    for (Index i = 0; i < n; ++i) b.labels.push_back(label(rng));

    const auto fd = [](auto f, const RowMatrix<double>& x) { return oracle::central_difference(f, x, 1e-4); };
    const auto logit = logit_loss(b.student_image, b.labels, p);
    worst[0] = std::max(worst[0], oracle::relative_error(logit.grad, fd([&](const RowMatrix<double>& x) {
      return logit_loss(x, b.labels, p).value;
    }, b.student_image)));

    const auto kl = kl_distill_loss(b.student_image, b.teacher_image, p, params.tau);
    worst[1] = std::max(worst[1], oracle::relative_error(kl.grad, fd([&](const RowMatrix<double>& x) {
      return kl_distill_loss(x, b.teacher_image, p, params.tau).value;
    }, b.student_image)));

    const auto con = contrastive_loss(b.student_image, b.student_text, params.tau);
    worst[2] = std::max(worst[2], oracle::relative_error(con.grad_left, fd([&](const RowMatrix<double>& x) {
      return contrastive_loss(x, b.student_text, params.tau).value;
    }, b.student_image)));
    worst[2] = std::max(worst[2], oracle::relative_error(con.grad_right, fd([&](const RowMatrix<double>& x) {
      return contrastive_loss(b.student_image, x, params.tau).value;
    }, b.student_text)));

    const auto all = overall_loss(b, p, params, true);
    worst[3] = std::max(worst[3], oracle::relative_error(*all.grad_student_image, fd([&](const RowMatrix<double>& x) {
      auto probe = b;
      probe.student_image = x;
      return overall_loss(probe, p, params).sum.l_overall;
    }, b.student_image)));
    worst[3] = std::max(worst[3], oracle::relative_error(*all.grad_student_text, fd([&](const RowMatrix<double>& x) {
      auto probe = b;
      probe.student_text = x;
      return overall_loss(probe, p, params).sum.l_overall;
    }, b.student_text)));
  }
  const double secs = seconds_since(start);
  const double max_err = *std::max_element(worst, worst + 4);
  return {max_err < 1e-5 && secs < 60.0,
          fmt("20 batches each; worst relative error logit %.2e, kl %.2e, contrastive %.2e, overall %.2e (limit 1e-5); "
              "%.1f s (limit 60 s)",
              worst[0], worst[1], worst[2], worst[3], secs)};
}

// 7 ------------------------------------------------------------------------
Outcome closed_forms() {
  std::vector<std::string> failed;
  const auto expect = [&](bool ok, const char* what) {
    if (!ok) failed.emplace_back(what);
  };

  for (const Index k : {2, 10, 1000}) {
    const Index n = 7;
    Prototypes<double> p{Matrix<double>::Zero(3, k), {}};
    p.matrix.row(1).setOnes();
    RowMatrix<double> e = RowMatrix<double>::Zero(n, 3);
    e.col(1).setConstant(0.5);
    std::vector<Index> labels;
    for (Index i = 0; i < n; ++i) labels.push_back(i % k);
    expect(std::abs(logit_loss(e, labels, p).value - static_cast<double>(n) * std::log(static_cast<double>(k))) < 1e-9,
           "uniform logits");
  }

  std::mt19937_64 rng(7007);
  Prototypes<double> p{oracle::unit_rows(12, 8, rng).transpose(), {}};
  const RowMatrix<double> s = oracle::unit_rows(9, 8, rng);
  expect(kl_distill_loss(s, s, p, 0.07).value == 0.0, "KL(p||p)");

  const RowMatrix<double> single = oracle::unit_rows(1, 8, rng);
  expect(contrastive_loss(single, single, 0.07).value == 0.0, "n=1 contrastive");

  DistillBatch<double> b{oracle::unit_rows(9, 8, rng), oracle::unit_rows(9, 8, rng), oracle::unit_rows(9, 8, rng),
                         oracle::unit_rows(9, 8, rng), {}};
  for (Index i = 0; i < 9; ++i) b.labels.push_back(i % 12);
  const auto logit = logit_loss(b.student_image, b.labels, p).value;
  const auto kl = kl_distill_loss(b.student_image, b.teacher_image, p, 0.07).value;
  expect(cluster_loss(b.student_image, b.teacher_image, b.labels, p, {.tau = 0.07, .alpha = 1.0}).value == logit, "alpha=1");
  expect(cluster_loss(b.student_image, b.teacher_image, b.labels, p, {.tau = 0.07, .alpha = 0.0}).value == kl, "alpha=0");
  const auto it = contrastive_loss(b.student_image, b.teacher_text, 0.07).value;
  const auto ti = contrastive_loss(b.student_text, b.teacher_image, 0.07).value;
  expect(instance_loss(b, {.tau = 0.07, .gamma = 1.0}).value == it, "gamma=1");
  expect(instance_loss(b, {.tau = 0.07, .gamma = 0.0}).value == ti, "gamma=0");

  Vector<double> l(2);
  l << 0.0, std::log(3.0);
  const auto q = softmax_with_temperature<double>(l, 1.0);
  expect(std::abs(q(0) - 0.25) < 1e-12 && std::abs(q(1) - 0.75) < 1e-12, "softmax (0, ln 3)");

  std::string detail = "uniform logits, KL(p||p), n=1 contrastive, alpha/gamma boundaries, softmax (0, ln 3)";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " " + f + ";";
  }
  return {failed.empty(), detail};
}

// 8 ------------------------------------------------------------------------
Outcome default_configuration() {
  TempDir dir;
  const int code = run_cli("run --print-config", dir / "config.json");
  if (code != 0) return {false, fmt("CLI exited with %d", code)};
  const auto config = nlohmann::json::parse(slurp(dir / "config.json"))["config"];
  const double tau = config["tau"], alpha = config["alpha"], gamma = config["gamma"], beta = config["beta"];
  return {tau == 0.07 && alpha == 0.999 && gamma == 0.5 && beta == 0.07,
          fmt("config echo tau=%g alpha=%g gamma=%g beta=%g", tau, alpha, gamma, beta)};
}

// 9 ------------------------------------------------------------------------
Outcome performance_floor() {
  const Index n = 100000, d = 64;
  const auto set = oracle::unit_set(n, d, 9009);

  auto start = Clock::now();
  const auto result = balance(set, {.beta = 0.07, .k = 64, .chunks = cores()});
  const double dedup_secs = seconds_since(start);

  start = Clock::now();
  const auto model = kmeans(set, {.k = 1024, .max_iters = 25, .tol = 0.0, .seed = 9});
  const double kmeans_secs = seconds_since(start);

  return {dedup_secs < 300.0 && kmeans_secs < 600.0 && model.iterations_run == 25,
          fmt("%lld cores, %u worker threads: dedup N=100000 d=64 k=64 %.1f s (limit 300 s, kept %zu); "
              "k-means k=1024 %lld iterations %.1f s (limit 600 s)",
              static_cast<long long>(cores()), worker_count(), dedup_secs, result.kept.size(),
              static_cast<long long>(model.iterations_run), kmeans_secs)};
}

// 10 -----------------------------------------------------------------------
Outcome determinism() {
  TempDir dir;
  const auto base = oracle::clustered_set(800, 16, 0.02, 10010);
  write_embeddings(base, dir / "in.emb");
  {
    std::ofstream text(dir / "in.txt");
    text.precision(9);
    for (Index i = 0; i < 50; ++i) {
      for (Index c = 0; c < 16; ++c) text << (c ? " " : "") << base.data()(i, c);
      text << "\n";
    }
  }
  std::mt19937_64 rng(10);
  const char* blocks[4] = {"si.emb", "st.emb", "ti.emb", "tt.emb"};
  for (const char* name : blocks) write_embeddings(EmbeddingSet(oracle::unit_rows(16, 16, rng).cast<float>()), dir / name);
  {
    std::ofstream labels(dir / "labels.txt");
    for (Index i = 0; i < 16; ++i) labels << i % 8 << "\n";
  }
  std::string batch, batch_list;
  for (const char* name : blocks) {
    batch += " " + (dir / name).string();
    batch_list += (batch_list.empty() ? "" : ",") + (dir / name).string();
  }

  std::vector<std::string> differing;
  int runs = 0;
  // Both rounds run in the same working directory so the argument lists are
  // identical; outputs are moved aside after each round.
  const auto work = dir / "work";
  const auto o = [&](const std::string& f) { return (work / f).string(); };
  const std::vector<std::string> commands = {
      "ingest --input " + (dir / "in.txt").string() + " --output " + o("ingest.emb") + " --normalize --out " + o("ingest.json"),
      "dedup --input " + (dir / "in.emb").string() + " --beta 0.1 --out-keep " + o("keep.txt") + " --out-emb " +
          o("kept.emb") + " --out-sets " + o("sets.txt") + " --out " + o("dedup.json"),
      "cluster --input " + (dir / "in.emb").string() + " --k 8 --seed 11 --out-model " + o("model.kmc") + " --out " +
          o("cluster.json"),
      "loss --batch" + batch + " --labels " + (dir / "labels.txt").string() + " --prototypes " + o("model.kmc") +
          " --neg-rate 0.5 --seed 11 --grad-check --out " + o("loss.json"),
      "stats --input " + (dir / "in.emb").string() + " --model " + o("model.kmc") + " --csv " + o("stats.csv") +
          " --out " + o("stats.json"),
      "run --input " + (dir / "in.emb").string() + " --out-dir " + o("pipeline") + " --beta 0.1 --k 8 --seed 11 --batch " +
          batch_list + " --labels " + (dir / "labels.txt").string() + " --out " + o("run.json"),
  };
  for (int round = 0; round < 2; ++round) {
    fs::create_directories(work);
    for (const auto& cmd : commands) {
      ++runs;
      if (run_cli(cmd, dir / "log.txt") != 0) return {false, "command failed: " + cmd + "\n" + slurp(dir / "log.txt")};
    }
    fs::rename(work, dir / ("r" + std::to_string(round)));
  }
  const auto pipeline_report = nlohmann::json::parse(slurp(dir / "r0" / "run.json"));
  if (!pipeline_report.contains("loss")) return {false, "pipeline run skipped the loss stage"};

  const auto json_equal = [&](const std::string& f) {
    const auto a = strip_timings(nlohmann::json::parse(slurp(dir / "r0" / f)));
    const auto b = strip_timings(nlohmann::json::parse(slurp(dir / "r1" / f)));
    return a.dump() == b.dump();
  };
  for (const char* f : {"ingest.emb", "keep.txt", "kept.emb", "sets.txt", "model.kmc", "model.kmc.meta.json", "stats.csv",
                        "pipeline/kept.txt", "pipeline/sets.txt", "pipeline/kept.emb", "pipeline/model.kmc"})
    if (slurp(dir / "r0" / f) != slurp(dir / "r1" / f)) differing.emplace_back(f);
  for (const char* f : {"ingest.json", "dedup.json", "cluster.json", "loss.json", "stats.json", "run.json",
                        "pipeline/run_report.json", "pipeline/dedup.json", "pipeline/cluster.json", "pipeline/loss.json"})
    if (!json_equal(f)) differing.emplace_back(f);
  std::string detail = fmt("%d CLI invocations over 6 subcommands, 21 outputs compared", runs);
  if (!differing.empty()) {
    detail += "; differing:";
    for (const auto& f : differing) detail += " " + f;
  }
  return {differing.empty(), detail};
}

}  // namespace

// Optional arguments select criteria by number; default is all of them.
int main(int argc, char** argv) {
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"dedup equals brute-force reference", dedup_oracle_equivalence},
      {"chunk invariance and beta/k refinement", refinement_and_chunk_invariance},
      {"duplicate collapse", duplicate_collapse},
      {"k-means descent and exact argmin labels", kmeans_descent},
      {"blob recovery", blob_recovery},
      {"gradient checks", gradient_checks},
      {"closed-form loss values", closed_forms},
      {"default configuration", default_configuration},
      {"performance floor", performance_floor},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome outcome;
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    if (!outcome.pass) ++failures;
    std::cout << (outcome.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << ": " << criteria[i].first << " -- "
              << outcome.detail << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
