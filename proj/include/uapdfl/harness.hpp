#pragma once

// Config-driven experiment runner. The config format and every output file
// are documented in docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "uapdfl/convergence_lab.hpp"
#include "uapdfl/protocol.hpp"

namespace uapdfl::harness {

inline constexpr std::string_view kMetricsHeader =
    "round,client,arm,seed,test_accuracy,train_loss,dropout,h_peers,cum_scalars";
inline constexpr std::string_view kMetricsVersionLine = "# uapdfl-metrics v1";
inline constexpr std::string_view kDivergenceVersionLine = "# uapdfl-divergence v1";
inline constexpr std::string_view kSummaryFormat = "uapdfl-summary/1";

struct LabSpec {
  std::size_t clients = 10;
  std::size_t dim = 5;
  double mu = 0.1;
  double L = 1.0;
  double heterogeneity = 1.0;
  double sigma = 0.5;
  std::size_t rounds = 200;
  std::size_t trials = 100;

  bool operator==(const LabSpec&) const = default;
};

struct ExperimentSpec {
  protocol::ExperimentConfig experiment;  // experiment.round.algorithm is set per arm
  std::vector<protocol::Algorithm> arms = {protocol::Algorithm::ua_pdfl};
  std::vector<std::uint64_t> seeds = {1};
  std::string output_dir = "runs";
  bool write_divergence = false;
  LabSpec lab;

  bool operator==(const ExperimentSpec&) const = default;
};

// `key = value` lines; '#' starts a comment. Unknown or repeated keys, bad
// values and violated constraints throw ConfigError naming the key.
ExperimentSpec parse_config(std::string_view text);
ExperimentSpec load_config(const std::filesystem::path& path);

// Canonical text; parse_config(render_config(s)) == s.
std::string render_config(const ExperimentSpec& spec);

void validate(const ExperimentSpec& spec);

struct RunFailure {
  std::string arm;
  std::uint64_t seed = 0;
  std::string message;
};

struct MatrixResult {
  std::vector<std::filesystem::path> metric_files;
  std::vector<std::filesystem::path> divergence_files;
  std::filesystem::path summary_file;
  std::vector<RunFailure> failures;

  bool ok() const noexcept { return failures.empty(); }
};

// Runs every (arm, seed) pair. Each run gets <out>/<arm>/seed_<seed>/ with
// metrics.csv, config.txt (a spec that reproduces just this run) and, when
// requested, divergence.csv. <out>/summary.json aggregates final accuracy.
// A failing run is recorded and the matrix continues.
MatrixResult run_matrix(const ExperimentSpec& spec);

// Pairwise divergence trajectory for every seed of the first arm.
MatrixResult divergence_probe(const ExperimentSpec& spec);

// Writes <out>/dataset_seed_<s>.txt and <out>/partition_seed_<s>.txt.
std::vector<std::filesystem::path> gen_data(const ExperimentSpec& spec);

struct BoundCheckReport {
  lab::MonteCarloSummary summary;
  bool bound_holds = false;  // mean gap <= 1.05 * bound at every round
  std::filesystem::path file;
};

// Monte-Carlo bound check for spec.lab, written to <out>/bound_check.csv.
BoundCheckReport bound_check(const ExperimentSpec& spec, std::uint64_t seed);

// Row formatters shared by the writers and tests.
std::string metrics_csv(const protocol::ExperimentResult& result, std::string_view arm, std::uint64_t seed);
std::string divergence_csv(const protocol::ExperimentResult& result);

}  // namespace uapdfl::harness
