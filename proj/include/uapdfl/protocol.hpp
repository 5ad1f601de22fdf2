#pragma once

// Round engine for decentralized personalized federated learning with
// unit-representation gating, client-wise dropout and layer-wise
// personalization, plus the decentralized baselines run under the same
// engine.
//
// A round, for every client i (in an order drawn from the master rng):
//   1. draw a queue of n_com distinct peers;
//   2. receive the peers' unit and auxiliary representations and compute the
//      divergence to each;
//   3. if every divergence is <= th_i, replace the local model with one
//      random peer's model (client-wise dropout); otherwise average the
//      feature extractor over all peers and the classifier over the peers
//      with divergence < th_i, weighting by local sample count;
//   4. train locally on  CE + mu * ||g(X_unit) - mean aux||^2;
//   5. refresh the representations.
// Peers always serve the state they held at the start of the round, so the
// result does not depend on the order clients are visited in.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uapdfl/datagen.hpp"
#include "uapdfl/nn.hpp"
#include "uapdfl/representation.hpp"

namespace uapdfl::protocol {

enum class Algorithm { ua_pdfl, ua_pdfl_no_cd, ua_pdfl_no_lp, d_fedavg, d_fedper, local };

inline constexpr Algorithm kAllAlgorithms[] = {Algorithm::ua_pdfl,  Algorithm::ua_pdfl_no_cd,
                                               Algorithm::ua_pdfl_no_lp, Algorithm::d_fedavg,
                                               Algorithm::d_fedper, Algorithm::local};

std::string_view to_string(Algorithm a) noexcept;
// Throws ConfigError for unknown names.
Algorithm parse_algorithm(std::string_view name);

// True for the arms that exchange unit representations.
bool uses_representations(Algorithm a) noexcept;

struct RoundConfig {
  std::size_t n_com = 5;
  double th_i = 0.1;
  double mu = 0.1;
  std::size_t local_epochs = 2;
  std::size_t rounds = 150;
  std::size_t batch_size = 50;
  double lr = 0.05;
  double momentum = 0.5;
  double lr_decay = 0.95;
  Algorithm algorithm = Algorithm::ua_pdfl;

  // Throws ConfigError naming the offending key.
  void validate(std::size_t num_clients) const;

  bool operator==(const RoundConfig&) const = default;
};

struct ClientState {
  std::size_t id = 0;
  nn::LayeredModel model;
  nn::OptimizerState opt;
  datagen::ClientData data;
  repr::UnitRep rep;
  repr::AuxRep aux;

  std::size_t n_samples() const noexcept { return data.train.size(); }
  // Recomputes rep and aux from the current model.
  void refresh(const repr::UnitTensor& unit);
};

ClientState make_client(std::size_t id, nn::LayeredModel model, datagen::ClientData data,
                        const repr::UnitTensor& unit, const RoundConfig& cfg);

struct PeerPayload {
  std::size_t sender = 0;
  repr::UnitRep rep;
  repr::AuxRep aux;
  std::size_t n_samples = 0;
  std::optional<nn::ModelPart> g;
  std::optional<nn::ModelPart> h;
};

// Scalars moved over the wire, by kind. Sample counts are metadata and are
// not counted.
struct CommCounts {
  std::size_t representations = 0;
  std::size_t g_params = 0;
  std::size_t h_params = 0;
  std::size_t full_model = 0;

  std::size_t total() const noexcept { return representations + g_params + h_params + full_model; }
  CommCounts& operator+=(const CommCounts& o) noexcept;
  bool operator==(const CommCounts&) const = default;
};

class CommLedger {
 public:
  struct Entry {
    std::size_t round;
    std::size_t client;
    CommCounts counts;
  };

  void record(std::size_t round, std::size_t client, const CommCounts& counts);
  void append(const CommLedger& delta);

  std::span<const Entry> entries() const noexcept { return entries_; }
  CommCounts cumulative(std::size_t client) const;
  CommCounts total() const;

 private:
  std::vector<Entry> entries_;
};

// n_com distinct peers other than client_id, uniform without replacement.
std::vector<std::size_t> build_queue(std::size_t client_id, std::size_t num_clients,
                                     std::size_t n_com, std::mt19937_64& rng);

std::map<std::size_t, double> compute_divergences(const repr::UnitRep& own,
                                                  std::span<const PeerPayload> peers);

// True iff every divergence is <= th_i. Throws std::invalid_argument if empty.
bool should_dropout(const std::map<std::size_t, double>& divs, double th_i);

struct DropoutResult {
  nn::LayeredModel model;
  std::size_t donor;
};

// Copies the full model of one uniformly chosen peer. Each payload must carry
// both parameter blocks.
DropoutResult dropout_replace(std::span<const PeerPayload> peers, std::mt19937_64& rng);

struct AggregateResult {
  nn::LayeredModel model;
  std::size_t h_peers = 0;  // peers whose classifier was averaged in
};

// g: sample-weighted average of own g and every peer's g.
// h: sample-weighted average of own h and the h of peers with div < th_i.
// A peer that passes the gate must carry its h block.
AggregateResult layerwise_aggregate(const nn::LayeredModel& own, std::size_t own_samples,
                                    std::span<const PeerPayload> peers,
                                    const std::map<std::size_t, double>& divs, double th_i);

// Sample-weighted average of the whole model over own and every peer.
nn::LayeredModel full_aggregate(const nn::LayeredModel& own, std::size_t own_samples,
                                std::span<const PeerPayload> peers);

// Unweighted mean of own and every peer's auxiliary representation.
repr::AuxRep aux_average(const repr::AuxRep& own, std::span<const repr::AuxRep> peers);

struct LocalTrainReport {
  std::vector<double> epoch_losses;  // mean data loss over each epoch's batches
};

// E epochs of momentum SGD at lr * decay^round_index with fresh momentum
// buffers. With `aux_avg` set, the proximal term pulls g(X_unit) towards it.
// Representations are refreshed from the final weights.
LocalTrainReport local_train(ClientState& client, const std::optional<repr::AuxRep>& aux_avg,
                             const RoundConfig& cfg, const datagen::SyntheticDataset& ds,
                             const repr::UnitTensor& unit, std::size_t round_index,
                             std::uint64_t epoch_seed);

struct Evaluation {
  double test_accuracy = 0.0;
  double train_loss = 0.0;
};

Evaluation evaluate(const ClientState& client, const datagen::SyntheticDataset& ds);

struct ClientRoundMetrics {
  std::size_t client = 0;
  double test_accuracy = 0.0;
  double train_loss = 0.0;
  bool dropout = false;
  std::size_t h_peers = 0;
  std::optional<std::size_t> donor;
  std::vector<std::size_t> queue;
  std::map<std::size_t, double> divergences;
};

struct RoundResult {
  std::vector<ClientRoundMetrics> metrics;  // indexed by client id
  CommLedger ledger_delta;
};

// One round over all clients. round_index counts completed rounds (0 for the
// first), and feeds the learning-rate schedule. Configuration problems are
// reported before any state changes.
RoundResult run_round(std::vector<ClientState>& states, const RoundConfig& cfg,
                      const datagen::SyntheticDataset& ds, const repr::UnitTensor& unit,
                      std::size_t round_index, std::mt19937_64& master_rng);

// Pairwise divergence matrix of the clients' current unit representations.
std::vector<std::vector<double>> divergence_matrix(std::span<const ClientState> states);

// ---------------------------------------------------------------------------
// Whole experiments.

struct DatasetSpec {
  std::size_t num_classes = 4;
  std::size_t input_dim = 16;
  std::size_t samples_per_class = 300;
  double spread = 6.0;

  bool operator==(const DatasetSpec&) const = default;
};

enum class PartitionKind { dirichlet, shards, class_groups };

struct PartitionSpec {
  PartitionKind kind = PartitionKind::dirichlet;
  double beta = 0.5;
  std::size_t classes_per_client = 2;
  std::vector<std::vector<std::size_t>> client_classes;
  std::size_t min_samples = datagen::kDefaultMinSamples;

  bool operator==(const PartitionSpec&) const = default;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  PartitionSpec partition;
  std::size_t num_clients = 30;
  RoundConfig round;
  std::vector<std::size_t> hidden = {64, 32};
  std::size_t split_index = 2;
  double unit_fill = repr::kDefaultUnitFill;
  bool shared_init = true;
  bool track_divergence = false;

  // Effective client count (class-group partitions fix it).
  std::size_t clients() const noexcept;
  std::vector<std::size_t> widths() const;
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

struct RunRecord {
  std::size_t round = 0;
  std::size_t client = 0;
  double test_accuracy = 0.0;
  double train_loss = 0.0;
  bool dropout = false;
  std::size_t h_peers = 0;
  std::size_t cumulative_scalars = 0;
};

struct ExperimentResult {
  std::vector<RunRecord> records;  // round 0 holds the initial models
  CommLedger ledger;
  std::vector<double> final_accuracy;  // per client
  double mean_final_accuracy = 0.0;
  // divergence[r] is the pairwise matrix after round r (r = 0: initial).
  std::vector<std::vector<std::vector<double>>> divergence;
};

struct ExperimentSetup {
  datagen::SyntheticDataset dataset;
  datagen::Partition partition;
  repr::UnitTensor unit;
  std::vector<ClientState> clients;
};

// Dataset, partition and initial clients for (cfg, seed).
ExperimentSetup setup_experiment(const ExperimentConfig& cfg, std::uint64_t seed);

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace uapdfl::protocol
