#include "uapdfl/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "uapdfl/errors.hpp"
#include "uapdfl/rng.hpp"

namespace uapdfl::protocol {

namespace {

// Stream tags, so that the derived generators never collide.
enum : std::uint64_t {
  kTagDataset = 1,
  kTagPartition = 2,
  kTagInit = 3,
  kTagMaster = 4,
  kTagQueue = 5,
  kTagEpoch = 6,
};

// out = sum_k w_k * parts_k, layer by layer, accumulated in the given order.
nn::ModelPart weighted_sum(std::span<const nn::ModelPart* const> parts,
                           std::span<const double> weights) {
  nn::ModelPart out = *parts.front();
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    auto& dst = out.layers[l];
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto& src = parts[k]->layers.at(l);
      if (src.weights.rows() != dst.weights.rows() || src.weights.cols() != dst.weights.cols() ||
          src.bias.size() != dst.bias.size()) {
        throw ProtocolError("aggregating model blocks of different shape");
      }
    }
    auto w = dst.weights.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        acc += weights[k] * parts[k]->layers[l].weights.values()[i];
      }
      w[i] = acc;
    }
    for (std::size_t i = 0; i < dst.bias.size(); ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < parts.size(); ++k) acc += weights[k] * parts[k]->layers[l].bias[i];
      dst.bias[i] = acc;
    }
  }
  return out;
}

std::vector<double> normalized(std::span<const std::size_t> counts) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  std::vector<double> w(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    w[k] = total > 0.0 ? static_cast<double>(counts[k]) / total
                       : 1.0 / static_cast<double>(counts.size());
  }
  return w;
}

const nn::ModelPart& require_block(const std::optional<nn::ModelPart>& block, std::size_t sender,
                                   const char* name) {
  if (!block) {
    throw ProtocolError("payload from client " + std::to_string(sender) + " lacks its " + name +
                        " block");
  }
  return *block;
}

// Averages g over own + all peers and h over own + peers accepted by `take_h`.
template <class TakeH>
AggregateResult aggregate(const nn::LayeredModel& own, std::size_t own_samples,
                          std::span<const PeerPayload> peers, TakeH take_h) {
  auto [own_g, own_h] = nn::split(own);
  std::vector<const nn::ModelPart*> gs{&own_g};
  std::vector<const nn::ModelPart*> hs{&own_h};
  std::vector<std::size_t> g_counts{own_samples};
  std::vector<std::size_t> h_counts{own_samples};
  for (const auto& p : peers) {
    if (take_h(p)) {
      hs.push_back(&require_block(p.h, p.sender, "classifier"));
      h_counts.push_back(p.n_samples);
    }
    gs.push_back(&require_block(p.g, p.sender, "feature extractor"));
    g_counts.push_back(p.n_samples);
  }
  const auto g_w = normalized(g_counts);
  const auto h_w = normalized(h_counts);
  auto g = weighted_sum(gs, g_w);
  auto h = weighted_sum(hs, h_w);
  auto model = nn::combine(std::move(g), std::move(h));
  if (!model.same_architecture(own)) throw ProtocolError("aggregated model changed architecture");
  return {std::move(model), hs.size() - 1};
}

PeerPayload payload_from(const ClientState& s, bool with_g, bool with_h) {
  PeerPayload p{s.id, s.rep, s.aux, s.n_samples(), std::nullopt, std::nullopt};
  if (with_g || with_h) {
    auto [g, h] = nn::split(s.model);
    if (with_g) p.g = std::move(g);
    if (with_h) p.h = std::move(h);
  }
  return p;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::string_view to_string(Algorithm a) noexcept {
  switch (a) {
    case Algorithm::ua_pdfl: return "ua_pdfl";
    case Algorithm::ua_pdfl_no_cd: return "ua_pdfl_no_cd";
    case Algorithm::ua_pdfl_no_lp: return "ua_pdfl_no_lp";
    case Algorithm::d_fedavg: return "d_fedavg";
    case Algorithm::d_fedper: return "d_fedper";
    case Algorithm::local: return "local";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view name) {
  for (auto a : kAllAlgorithms) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown algorithm '" + std::string(name) + "'", "arms");
}

bool uses_representations(Algorithm a) noexcept {
  return a == Algorithm::ua_pdfl || a == Algorithm::ua_pdfl_no_cd || a == Algorithm::ua_pdfl_no_lp;
}

void RoundConfig::validate(std::size_t num_clients) const {
  if (num_clients == 0) throw ConfigError("need at least one client", "protocol.clients");
  if (algorithm != Algorithm::local) {
    if (num_clients < 2) throw ConfigError("communicating arms need >= 2 clients", "protocol.clients");
    if (n_com < 1 || n_com > num_clients - 1) {
      throw ConfigError("n_com must be in [1, " + std::to_string(num_clients - 1) + "]",
                        "protocol.n_com");
    }
  }
  if (!(th_i >= 0.0)) throw ConfigError("th_i must be >= 0", "protocol.th_i");
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw ConfigError("mu must be finite and >= 0", "protocol.mu");
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1", "protocol.local_epochs");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1", "protocol.batch_size");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0", "protocol.lr");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("momentum must be in [0,1)", "protocol.momentum");
  }
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) {
    throw ConfigError("lr_decay must be in (0,1]", "protocol.lr_decay");
  }
}

void ClientState::refresh(const repr::UnitTensor& unit) {
  rep = repr::unit_representation(model, unit);
  aux = repr::aux_representation(model, unit);
}

ClientState make_client(std::size_t id, nn::LayeredModel model, datagen::ClientData data,
                        const repr::UnitTensor& unit, const RoundConfig& cfg) {
  auto opt = nn::OptimizerState::for_model(model, cfg.lr, cfg.momentum, cfg.lr_decay);
  ClientState s{id, std::move(model), std::move(opt), std::move(data), {}, {}};
  s.refresh(unit);
  return s;
}

CommCounts& CommCounts::operator+=(const CommCounts& o) noexcept {
  representations += o.representations;
  g_params += o.g_params;
  h_params += o.h_params;
  full_model += o.full_model;
  return *this;
}

void CommLedger::record(std::size_t round, std::size_t client, const CommCounts& counts) {
  entries_.push_back({round, client, counts});
}

void CommLedger::append(const CommLedger& delta) {
  entries_.insert(entries_.end(), delta.entries_.begin(), delta.entries_.end());
}

CommCounts CommLedger::cumulative(std::size_t client) const {
  CommCounts out;
  for (const auto& e : entries_) {
    if (e.client == client) out += e.counts;
  }
  return out;
}

CommCounts CommLedger::total() const {
  CommCounts out;
  for (const auto& e : entries_) out += e.counts;
  return out;
}

std::vector<std::size_t> build_queue(std::size_t client_id, std::size_t num_clients,
                                     std::size_t n_com, std::mt19937_64& rng) {
  if (client_id >= num_clients) throw LookupError("client " + std::to_string(client_id) + " out of range");
  if (num_clients < 1 || n_com > num_clients - 1) {
    throw ConfigError("n_com " + std::to_string(n_com) + " exceeds " +
                          std::to_string(num_clients - 1) + " available peers",
                      "protocol.n_com");
  }
  std::vector<std::size_t> others;
  others.reserve(num_clients - 1);
  for (std::size_t j = 0; j < num_clients; ++j) {
    if (j != client_id) others.push_back(j);
  }
  // Partial Fisher-Yates: the first n_com slots are a uniform sample.
  for (std::size_t k = 0; k < n_com; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, others.size() - 1);
    std::swap(others[k], others[pick(rng)]);
  }
  others.resize(n_com);
  return others;
}

std::map<std::size_t, double> compute_divergences(const repr::UnitRep& own,
                                                  std::span<const PeerPayload> peers) {
  std::map<std::size_t, double> divs;
  for (const auto& p : peers) divs[p.sender] = repr::js_div(own, p.rep);
  return divs;
}

bool should_dropout(const std::map<std::size_t, double>& divs, double th_i) {
  if (divs.empty()) throw std::invalid_argument("should_dropout needs at least one divergence");
  return std::all_of(divs.begin(), divs.end(), [&](const auto& kv) { return kv.second <= th_i; });
}

DropoutResult dropout_replace(std::span<const PeerPayload> peers, std::mt19937_64& rng) {
  if (peers.empty()) throw ProtocolError("dropout needs a non-empty queue");
  std::uniform_int_distribution<std::size_t> pick(0, peers.size() - 1);
  const auto& donor = peers[pick(rng)];
  auto model = nn::combine(require_block(donor.g, donor.sender, "feature extractor"),
                           require_block(donor.h, donor.sender, "classifier"));
  return {std::move(model), donor.sender};
}

AggregateResult layerwise_aggregate(const nn::LayeredModel& own, std::size_t own_samples,
                                    std::span<const PeerPayload> peers,
                                    const std::map<std::size_t, double>& divs, double th_i) {
  return aggregate(own, own_samples, peers, [&](const PeerPayload& p) {
    const auto it = divs.find(p.sender);
    if (it == divs.end()) {
      throw ProtocolError("no divergence for peer " + std::to_string(p.sender));
    }
    return it->second < th_i;
  });
}

nn::LayeredModel full_aggregate(const nn::LayeredModel& own, std::size_t own_samples,
                                std::span<const PeerPayload> peers) {
  return aggregate(own, own_samples, peers, [](const PeerPayload&) { return true; }).model;
}

repr::AuxRep aux_average(const repr::AuxRep& own, std::span<const repr::AuxRep> peers) {
  repr::AuxRep out = own;
  for (const auto& p : peers) {
    if (p.features.size() != own.features.size()) {
      throw ShapeError("aux representations of different length");
    }
    for (std::size_t i = 0; i < out.features.size(); ++i) out.features[i] += p.features[i];
  }
  const double n = static_cast<double>(peers.size() + 1);
  for (double& v : out.features) v /= n;
  return out;
}

LocalTrainReport local_train(ClientState& client, const std::optional<repr::AuxRep>& aux_avg,
                             const RoundConfig& cfg, const datagen::SyntheticDataset& ds,
                             const repr::UnitTensor& unit, std::size_t round_index,
                             std::uint64_t epoch_seed) {
  auto& opt = client.opt;
  opt.learning_rate = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(round_index));
  opt.momentum = cfg.momentum;
  opt.decay = cfg.lr_decay;
  opt.reset_buffers();

  std::optional<std::span<const double>> target;
  if (aux_avg) target = std::span<const double>(aux_avg->features);
  const double mu = aux_avg ? cfg.mu : 0.0;

  LocalTrainReport report;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    const auto stream = datagen::batches(client.data, client.id, ds, cfg.batch_size,
                                         make_stream({epoch_seed, e})());
    double total = 0.0;
    for (std::size_t b = 0; b < stream.num_batches(); ++b) {
      const auto batch = stream.batch(b);
      const auto grads = nn::backward(client.model, batch.features, batch.labels, unit.values, target, mu);
      total += grads.data_loss;
      nn::sgd_step(client.model, grads, opt);
    }
    report.epoch_losses.push_back(stream.num_batches() ? total / static_cast<double>(stream.num_batches())
                                                       : 0.0);
  }
  client.refresh(unit);
  return report;
}

Evaluation evaluate(const ClientState& client, const datagen::SyntheticDataset& ds) {
  Evaluation ev;
  if (!client.data.test.empty()) {
    const auto test = datagen::gather(ds, client.data.test);
    const auto logits = nn::forward(client.model, test.features);
    std::size_t correct = 0;
    for (std::size_t n = 0; n < test.labels.size(); ++n) {
      if (argmax(logits.row(n)) == test.labels[n]) ++correct;
    }
    ev.test_accuracy = static_cast<double>(correct) / static_cast<double>(test.labels.size());
  }
  if (!client.data.train.empty()) {
    const auto train = datagen::gather(ds, client.data.train);
    const auto logits = nn::forward(client.model, train.features);
    double total = 0.0;
    for (std::size_t n = 0; n < train.labels.size(); ++n) {
      const auto z = logits.row(n);
      const double peak = *std::max_element(z.begin(), z.end());
      double s = 0.0;
      for (double v : z) s += std::exp(v - peak);
      total += peak + std::log(s) - z[train.labels[n]];
    }
    ev.train_loss = total / static_cast<double>(train.labels.size());
  }
  return ev;
}

RoundResult run_round(std::vector<ClientState>& states, const RoundConfig& cfg,
                      const datagen::SyntheticDataset& ds, const repr::UnitTensor& unit,
                      std::size_t round_index, std::mt19937_64& master_rng) {
  const std::size_t M = states.size();
  cfg.validate(M);
  for (std::size_t i = 0; i < M; ++i) {
    if (states[i].id != i) throw ProtocolError("client states must be ordered by id");
    if (!states[i].model.same_architecture(states.front().model)) {
      throw ProtocolError("clients do not share one architecture");
    }
  }

  const std::vector<ClientState> snapshot = states;
  const std::uint64_t round_seed = master_rng();
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), master_rng);

  const auto& proto = snapshot.front().model;
  const std::size_t rep_scalars = snapshot.front().rep.probs.size() + snapshot.front().aux.features.size();
  const std::size_t g_scalars = proto.feature_parameter_count();
  const std::size_t h_scalars = proto.classifier_parameter_count();
  const std::size_t full_scalars = proto.parameter_count();

  RoundResult result;
  result.metrics.resize(M);
  std::vector<CommCounts> comm(M);

  for (const std::size_t i : order) {
    auto& client = states[i];
    auto& m = result.metrics[i];
    m.client = i;
    auto rng = make_stream({round_seed, kTagQueue, i});
    std::optional<repr::AuxRep> aux_avg;
    const Algorithm arm = cfg.algorithm;

    if (arm != Algorithm::local) {
      m.queue = build_queue(i, M, cfg.n_com, rng);
    }

    if (uses_representations(arm)) {
      std::vector<PeerPayload> reps;
      for (auto j : m.queue) reps.push_back(payload_from(snapshot[j], false, false));
      comm[i].representations += m.queue.size() * rep_scalars;
      m.divergences = compute_divergences(snapshot[i].rep, reps);
      m.dropout = arm != Algorithm::ua_pdfl_no_cd && should_dropout(m.divergences, cfg.th_i);

      if (m.dropout) {
        // Only the chosen donor ships its model, so only one model is counted.
        std::vector<PeerPayload> full;
        for (auto j : m.queue) full.push_back(payload_from(snapshot[j], true, true));
        auto replaced = dropout_replace(full, rng);
        client.model = std::move(replaced.model);
        m.donor = replaced.donor;
        comm[i].full_model += full_scalars;
      } else {
        const bool gate = arm != Algorithm::ua_pdfl_no_lp;
        std::vector<PeerPayload> peers;
        for (auto j : m.queue) {
          const bool send_h = !gate || m.divergences.at(j) < cfg.th_i;
          peers.push_back(payload_from(snapshot[j], true, send_h));
        }
        auto agg = gate ? layerwise_aggregate(client.model, client.n_samples(), peers, m.divergences, cfg.th_i)
                        : aggregate(client.model, client.n_samples(), std::span<const PeerPayload>(peers),
                                    [](const PeerPayload&) { return true; });
        client.model = std::move(agg.model);
        m.h_peers = agg.h_peers;
        comm[i].g_params += m.queue.size() * g_scalars;
        comm[i].h_params += agg.h_peers * h_scalars;
      }

      if (arm != Algorithm::ua_pdfl_no_lp) {
        std::vector<repr::AuxRep> peer_aux;
        for (auto j : m.queue) peer_aux.push_back(snapshot[j].aux);
        aux_avg = aux_average(snapshot[i].aux, peer_aux);
      }
    } else if (arm == Algorithm::d_fedavg) {
      std::vector<PeerPayload> peers;
      for (auto j : m.queue) peers.push_back(payload_from(snapshot[j], true, true));
      client.model = full_aggregate(client.model, client.n_samples(), peers);
      m.h_peers = peers.size();
      comm[i].full_model += m.queue.size() * full_scalars;
    } else if (arm == Algorithm::d_fedper) {
      std::vector<PeerPayload> peers;
      for (auto j : m.queue) peers.push_back(payload_from(snapshot[j], true, false));
      auto agg = aggregate(client.model, client.n_samples(), std::span<const PeerPayload>(peers),
                           [](const PeerPayload&) { return false; });
      client.model = std::move(agg.model);
      comm[i].g_params += m.queue.size() * g_scalars;
    }

    const auto epoch_seed = make_stream({round_seed, kTagEpoch, i})();
    local_train(client, aux_avg, cfg, ds, unit, round_index, epoch_seed);
    const auto ev = evaluate(client, ds);
    m.test_accuracy = ev.test_accuracy;
    m.train_loss = ev.train_loss;
  }

  for (std::size_t i = 0; i < M; ++i) result.ledger_delta.record(round_index + 1, i, comm[i]);
  return result;
}

std::vector<std::vector<double>> divergence_matrix(std::span<const ClientState> states) {
  const std::size_t M = states.size();
  std::vector<std::vector<double>> out(M, std::vector<double>(M, 0.0));
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = i + 1; j < M; ++j) {
      out[i][j] = out[j][i] = repr::js_div(states[i].rep, states[j].rep);
    }
  }
  return out;
}

std::size_t ExperimentConfig::clients() const noexcept {
  return partition.kind == PartitionKind::class_groups ? partition.client_classes.size() : num_clients;
}

std::vector<std::size_t> ExperimentConfig::widths() const {
  std::vector<std::size_t> w{dataset.input_dim};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(dataset.num_classes);
  return w;
}

void ExperimentConfig::validate() const {
  if (dataset.num_classes < 1) throw ConfigError("must be >= 1", "dataset.num_classes");
  if (dataset.input_dim < 1) throw ConfigError("must be >= 1", "dataset.input_dim");
  if (dataset.samples_per_class < 1) throw ConfigError("must be >= 1", "dataset.samples_per_class");
  if (!(dataset.spread >= 0.0) || !std::isfinite(dataset.spread)) {
    throw ConfigError("must be finite and >= 0", "dataset.spread");
  }
  if (partition.kind == PartitionKind::dirichlet && !(partition.beta > 0.0)) {
    throw ConfigError("must be > 0", "partition.beta");
  }
  if (partition.kind == PartitionKind::shards &&
      (partition.classes_per_client < 1 || partition.classes_per_client > dataset.num_classes)) {
    throw ConfigError("must be in [1, num_classes]", "partition.shards");
  }
  if (partition.kind == PartitionKind::class_groups) {
    if (partition.client_classes.empty()) throw ConfigError("no clients listed", "partition.client_classes");
    for (const auto& g : partition.client_classes) {
      if (g.empty()) throw ConfigError("a client lists no classes", "partition.client_classes");
      for (auto c : g) {
        if (c >= dataset.num_classes) throw ConfigError("class out of range", "partition.client_classes");
      }
    }
  }
  if (hidden.empty()) throw ConfigError("need at least one hidden layer", "model.hidden");
  for (auto h : hidden) {
    if (h == 0) throw ConfigError("hidden widths must be positive", "model.hidden");
  }
  if (split_index < 1 || split_index > hidden.size()) {
    throw ConfigError("must be in [1, " + std::to_string(hidden.size()) + "]", "model.split_index");
  }
  if (!std::isfinite(unit_fill)) throw ConfigError("must be finite", "protocol.unit_fill");
  round.validate(clients());
}

ExperimentSetup setup_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto& d = cfg.dataset;
  auto dataset = datagen::gen_gaussian_mixture(d.num_classes, d.input_dim, d.samples_per_class,
                                               d.spread, make_stream({seed, kTagDataset})());
  const auto part_seed = make_stream({seed, kTagPartition})();
  datagen::Partition partition;
  switch (cfg.partition.kind) {
    case PartitionKind::dirichlet:
      partition = datagen::dirichlet_partition(dataset, cfg.num_clients, cfg.partition.beta, part_seed,
                                               cfg.partition.min_samples);
      break;
    case PartitionKind::shards:
      partition = datagen::shard_partition(dataset, cfg.num_clients, cfg.partition.classes_per_client,
                                           part_seed, cfg.partition.min_samples);
      break;
    case PartitionKind::class_groups:
      partition = datagen::class_group_partition(dataset, cfg.partition.client_classes, part_seed,
                                                 cfg.partition.min_samples);
      break;
  }
  auto unit = repr::make_unit_tensor(d.input_dim, cfg.unit_fill);
  const auto widths = cfg.widths();
  const auto init_seed = make_stream({seed, kTagInit})();

  std::vector<ClientState> clients;
  clients.reserve(partition.num_clients());
  for (std::size_t m = 0; m < partition.num_clients(); ++m) {
    const auto model_seed = cfg.shared_init ? init_seed : make_stream({init_seed, m})();
    clients.push_back(make_client(m, nn::LayeredModel::mlp(widths, cfg.split_index, model_seed),
                                  partition.clients[m], unit, cfg.round));
  }
  return {std::move(dataset), std::move(partition), std::move(unit), std::move(clients)};
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto setup = setup_experiment(cfg, seed);
  auto& states = setup.clients;
  auto master = make_stream({seed, kTagMaster});

  ExperimentResult out;
  const std::size_t M = states.size();
  std::vector<std::size_t> cumulative(M, 0);

  for (std::size_t i = 0; i < M; ++i) {
    const auto ev = evaluate(states[i], setup.dataset);
    out.records.push_back({0, i, ev.test_accuracy, ev.train_loss, false, 0, 0});
  }
  if (cfg.track_divergence) out.divergence.push_back(divergence_matrix(states));

  for (std::size_t r = 0; r < cfg.round.rounds; ++r) {
    auto res = run_round(states, cfg.round, setup.dataset, setup.unit, r, master);
    for (const auto& e : res.ledger_delta.entries()) cumulative[e.client] += e.counts.total();
    for (const auto& m : res.metrics) {
      out.records.push_back({r + 1, m.client, m.test_accuracy, m.train_loss, m.dropout, m.h_peers,
                             cumulative[m.client]});
    }
    out.ledger.append(res.ledger_delta);
    if (cfg.track_divergence) out.divergence.push_back(divergence_matrix(states));
  }

  out.final_accuracy.resize(M);
  for (std::size_t i = 0; i < M; ++i) {
    out.final_accuracy[i] = out.records[out.records.size() - M + i].test_accuracy;
  }
  double acc = 0.0;
  for (double a : out.final_accuracy) acc += a;
  out.mean_final_accuracy = M ? acc / static_cast<double>(M) : 0.0;
  return out;
}

}  // namespace uapdfl::protocol
