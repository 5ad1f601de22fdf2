#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "uapdfl/errors.hpp"
#include "uapdfl/protocol.hpp"
#include "uapdfl/rng.hpp"

using namespace uapdfl;
using namespace uapdfl::protocol;

namespace {

const std::vector<std::size_t> kWidths{16, 64, 32, 4};

PeerPayload payload(std::size_t sender, const nn::LayeredModel& m, std::size_t n, bool with_h = true) {
  const auto unit = repr::make_unit_tensor(m.input_dim());
  auto [g, h] = nn::split(m);
  PeerPayload p{sender, repr::unit_representation(m, unit), repr::aux_representation(m, unit), n, g, {}};
  if (with_h) p.h = h;
  return p;
}

// Flattened parameters of the first `split` layers or of the rest.
oracle::Vec block(const nn::LayeredModel& m, bool feature) {
  oracle::Vec out;
  for (std::size_t k = 0; k < m.layers().size(); ++k) {
    if ((k < m.split_index()) != feature) continue;
    const auto& l = m.layers()[k];
    out.insert(out.end(), l.weights.values().begin(), l.weights.values().end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

std::vector<ClientState> identical_clients(std::size_t M, const datagen::SyntheticDataset& ds,
                                           const RoundConfig& cfg) {
  const auto unit = repr::make_unit_tensor(ds.input_dim());
  const auto model = nn::LayeredModel::mlp(kWidths, 2, 5);
  datagen::ClientData data{ds.train_indices(), ds.test_indices()};
  std::vector<ClientState> out;
  for (std::size_t i = 0; i < M; ++i) out.push_back(make_client(i, model, data, unit, cfg));
  return out;
}

}  // namespace

TEST_CASE("build_queue") {
  std::mt19937_64 rng(1);
  CHECK(build_queue(0, 2, 1, rng) == std::vector<std::size_t>{1});
  CHECK(build_queue(1, 2, 1, rng) == std::vector<std::size_t>{0});

  std::mt19937_64 a(9), b(9);
  CHECK(build_queue(3, 30, 5, a) == build_queue(3, 30, 5, b));

  std::mt19937_64 c(3);
  const auto q = build_queue(4, 30, 29, c);
  CHECK(std::set<std::size_t>(q.begin(), q.end()).size() == 29);
  CHECK(std::find(q.begin(), q.end(), 4) == q.end());

  CHECK_THROWS_AS(build_queue(0, 30, 30, c), ConfigError);
  CHECK_THROWS_AS(build_queue(30, 30, 5, c), LookupError);
}

TEST_CASE("build_queue: each peer picked with frequency n_com / (M - 1)") {
  std::vector<double> hits(30, 0.0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    auto rng = make_stream({77, static_cast<std::uint64_t>(t)});
    for (auto j : build_queue(0, 30, 5, rng)) hits[j] += 1.0;
  }
  CHECK(hits[0] == 0.0);
  for (std::size_t j = 1; j < 30; ++j) CHECK(std::abs(hits[j] / trials - 5.0 / 29.0) <= 0.02);
}

TEST_CASE("compute_divergences") {
  const auto a = nn::LayeredModel::mlp(kWidths, 2, 1), b = nn::LayeredModel::mlp(kWidths, 2, 2);
  const std::vector<PeerPayload> peers{payload(1, a, 10), payload(2, b, 10)};
  const auto own = payload(0, a, 10);
  const auto d = compute_divergences(own.rep, peers);
  CHECK(d.at(1) == 0.0);
  CHECK(d.at(2) > 0.0);
  const std::vector<PeerPayload> back{own};
  CHECK(std::abs(compute_divergences(peers[1].rep, back).at(0) - d.at(2)) <= 1e-12);

  PeerPayload bad = own;
  bad.rep.probs.pop_back();
  const std::vector<PeerPayload> bads{bad};
  CHECK_THROWS_AS(compute_divergences(own.rep, bads), ShapeError);
}

TEST_CASE("should_dropout") {
  CHECK(should_dropout({{1, 0.0}, {2, 0.0}}, 0.1));
  CHECK(should_dropout({{1, 0.1}}, 0.1));
  CHECK_FALSE(should_dropout({{1, 0.0}, {2, 0.1 + 1e-12}}, 0.1));
  CHECK(should_dropout({{1, 0.02}}, 0.1));
  CHECK_FALSE(should_dropout({{1, 0.02}, {2, 0.61}}, 0.1));
  CHECK_THROWS_AS(should_dropout({}, 0.1), std::invalid_argument);
}

TEST_CASE("dropout_replace: single peer and representation match") {
  const auto donor = nn::LayeredModel::mlp(kWidths, 2, 3);
  const std::vector<PeerPayload> q{payload(7, donor, 10)};
  std::mt19937_64 rng(1);
  const auto r = dropout_replace(q, rng);
  CHECK(r.donor == 7);
  CHECK(r.model == donor);
  const auto unit = repr::make_unit_tensor(16);
  CHECK(repr::unit_representation(r.model, unit) == q[0].rep);

  const std::vector<PeerPayload> no_h{payload(7, donor, 10, false)};
  CHECK_THROWS_AS(dropout_replace(no_h, rng), ProtocolError);
}

TEST_CASE("dropout_replace: donor is uniform over the queue") {
  std::vector<PeerPayload> q;
  for (std::size_t j = 0; j < 5; ++j) q.push_back(payload(j, nn::LayeredModel::mlp(kWidths, 2, j), 10));
  std::vector<double> hits(5, 0.0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    auto rng = make_stream({5, static_cast<std::uint64_t>(t)});
    hits[dropout_replace(q, rng).donor] += 1.0;
  }
  for (double h : hits) CHECK(std::abs(h / trials - 0.2) <= 0.02);
}

TEST_CASE("layerwise_aggregate: fixed point") {
  const auto m = nn::LayeredModel::mlp(kWidths, 2, 4);
  const std::vector<PeerPayload> peers{payload(1, m, 20), payload(2, m, 50), payload(3, m, 7)};
  const auto r = layerwise_aggregate(m, 13, peers, {{1, 0.0}, {2, 0.0}, {3, 0.0}}, 0.1);
  CHECK(r.h_peers == 3);
  const auto got = oracle::flatten(r.model), want = oracle::flatten(m);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-12);
}

TEST_CASE("layerwise_aggregate: two models weighted 10:30") {
  const auto a = nn::LayeredModel::mlp(kWidths, 2, 1), b = nn::LayeredModel::mlp(kWidths, 2, 2);
  const std::vector<PeerPayload> peers{payload(1, b, 30)};
  const auto r = layerwise_aggregate(a, 10, peers, {{1, 0.0}}, 0.1);
  const auto ga = block(a, true), gb = block(b, true), got = block(r.model, true);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - (0.25 * ga[i] + 0.75 * gb[i])) <= 1e-15);
  const auto ha = block(a, false), hb = block(b, false), goth = block(r.model, false);
  for (std::size_t i = 0; i < goth.size(); ++i) CHECK(std::abs(goth[i] - (0.25 * ha[i] + 0.75 * hb[i])) <= 1e-15);
}

TEST_CASE("layerwise_aggregate: nobody passes the h gate") {
  const auto a = nn::LayeredModel::mlp(kWidths, 2, 1), b = nn::LayeredModel::mlp(kWidths, 2, 2);
  const std::vector<PeerPayload> peers{payload(1, b, 30, false)};
  const auto r = layerwise_aggregate(a, 10, peers, {{1, 0.5}}, 0.1);
  CHECK(r.h_peers == 0);
  CHECK(block(r.model, false) == block(a, false));
  CHECK_FALSE(block(r.model, true) == block(a, true));
}

TEST_CASE("layerwise_aggregate: brute-force weighted sums on random cases") {
  for (std::uint64_t c = 0; c < 10; ++c) {
    std::mt19937_64 rng(500 + c);
    const auto own = nn::LayeredModel::mlp(kWidths, 2, 600 + c);
    const std::size_t own_n = 5 + rng() % 100;
    const std::size_t n_peers = 1 + rng() % 6;
    std::vector<PeerPayload> peers;
    std::map<std::size_t, double> divs;
    std::vector<nn::LayeredModel> models;
    std::uniform_real_distribution<double> u(0.0, 0.2);
    for (std::size_t j = 0; j < n_peers; ++j) {
      models.push_back(nn::LayeredModel::mlp(kWidths, 2, 700 + 10 * c + j));
      divs[j + 1] = u(rng);
      peers.push_back(payload(j + 1, models.back(), 5 + rng() % 100, divs[j + 1] < 0.1));
    }
    const auto r = layerwise_aggregate(own, own_n, peers, divs, 0.1);

    for (bool feature : {true, false}) {
      // Weighted sum written out per entry: own plus every contributing peer.
      auto num = block(own, feature);
      for (double& v : num) v *= static_cast<double>(own_n);
      double den = static_cast<double>(own_n);
      std::size_t contributing = 0;
      for (std::size_t j = 0; j < n_peers; ++j) {
        if (!feature && !(divs[j + 1] < 0.1)) continue;
        ++contributing;
        const auto pb = block(models[j], feature);
        const double w = static_cast<double>(peers[j].n_samples);
        for (std::size_t i = 0; i < num.size(); ++i) num[i] += w * pb[i];
        den += w;
      }
      if (!feature) CHECK(r.h_peers == contributing);
      const auto got = block(r.model, feature);
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - num[i] / den) <= 1e-12);

      // Convexity: every entry stays within the contributors' range.
      auto lo = block(own, feature), hi = lo;
      for (std::size_t j = 0; j < n_peers; ++j) {
        if (!feature && !(divs[j + 1] < 0.1)) continue;
        const auto pb = block(models[j], feature);
        for (std::size_t i = 0; i < pb.size(); ++i) lo[i] = std::min(lo[i], pb[i]), hi[i] = std::max(hi[i], pb[i]);
      }
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i] >= lo[i] - 1e-12);
        CHECK(got[i] <= hi[i] + 1e-12);
      }
    }
  }
}

TEST_CASE("layerwise_aggregate: raising th_i never shrinks the h set") {
  std::mt19937_64 rng(31);
  std::vector<PeerPayload> peers;
  std::map<std::size_t, double> divs;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto own = nn::LayeredModel::mlp(kWidths, 2, 1);
  for (std::size_t j = 1; j <= 8; ++j) {
    peers.push_back(payload(j, nn::LayeredModel::mlp(kWidths, 2, j + 1), 10));
    divs[j] = u(rng);
  }
  std::size_t prev = 0;
  for (double th : {0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0}) {
    const auto n = layerwise_aggregate(own, 10, peers, divs, th).h_peers;
    CHECK(n >= prev);
    prev = n;
  }
  CHECK(prev == 8);
}

TEST_CASE("layerwise_aggregate: architecture mismatch is a protocol error") {
  const std::vector<std::size_t> other{16, 64, 31, 4};
  const auto own = nn::LayeredModel::mlp(kWidths, 2, 1);
  const std::vector<PeerPayload> peers{payload(1, nn::LayeredModel::mlp(other, 2, 1), 10)};
  CHECK_THROWS_AS(layerwise_aggregate(own, 10, peers, {{1, 0.0}}, 0.1), ProtocolError);
}

TEST_CASE("aux_average") {
  const repr::AuxRep v{{1.5, -2.0, 3.0}};
  const std::vector<repr::AuxRep> same{v, v, v};
  CHECK(aux_average(v, same) == v);

  const std::vector<repr::AuxRep> one{{{2.0, 4.0}}};
  CHECK(aux_average({{0.0, 0.0}}, one).features == std::vector<double>{1.0, 2.0});

  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  auto draw = [&] {
    repr::AuxRep r{std::vector<double>(32)};
    for (double& x : r.features) x = n(rng);
    return r;
  };
  const auto own = draw();
  std::vector<repr::AuxRep> peers;
  for (int j = 0; j < 5; ++j) peers.push_back(draw());
  const auto got = aux_average(own, peers);
  for (std::size_t i = 0; i < 32; ++i) {
    double s = own.features[i];
    for (const auto& p : peers) s += p.features[i];
    CHECK(std::abs(got.features[i] - s / 6.0) <= 1e-15);
  }

  const std::vector<repr::AuxRep> bad{{{1.0}}};
  CHECK_THROWS_AS(aux_average({{0.0, 0.0}}, bad), ShapeError);
}

TEST_CASE("local_train") {
  const auto ds = datagen::gen_gaussian_mixture(2, 16, 100, 6.0, 3);
  const auto unit = repr::make_unit_tensor(16);
  const std::vector<std::size_t> widths{16, 64, 32, 2};
  datagen::ClientData data{ds.train_indices(), ds.test_indices()};
  RoundConfig cfg;
  const auto model = nn::LayeredModel::mlp(widths, 2, 1);
  const repr::AuxRep target{std::vector<double>(32, 0.5)};

  SUBCASE("lr = 0 leaves model and representations unchanged") {
    cfg.lr = 0.0;
    auto c = make_client(0, model, data, unit, cfg);
    const auto before = c;
    local_train(c, target, cfg, ds, unit, 0, 1);
    CHECK(c.model == before.model);
    CHECK(c.rep == before.rep);
    CHECK(c.aux == before.aux);
  }

  SUBCASE("mu = 0 matches plain training") {
    cfg.mu = 0.0;
    auto a = make_client(0, model, data, unit, cfg), b = a;
    local_train(a, target, cfg, ds, unit, 3, 42);
    local_train(b, std::nullopt, cfg, ds, unit, 3, 42);
    CHECK(a.model == b.model);
  }

  SUBCASE("loss decreases across epochs on separable data") {
    cfg.local_epochs = 5;
    cfg.lr = 0.01;
    auto c = make_client(0, model, data, unit, cfg);
    const auto rep = local_train(c, std::nullopt, cfg, ds, unit, 0, 8);
    REQUIRE(rep.epoch_losses.size() == 5);
    for (std::size_t e = 1; e < 5; ++e) CHECK(rep.epoch_losses[e] < rep.epoch_losses[e - 1]);
  }
}

TEST_CASE("run_round: local arm exchanges nothing") {
  const auto ds = datagen::gen_gaussian_mixture(4, 16, 50, 6.0, 1);
  RoundConfig cfg;
  cfg.algorithm = Algorithm::local;
  auto states = identical_clients(4, ds, cfg);
  std::mt19937_64 rng(1);
  const auto r = run_round(states, cfg, ds, repr::make_unit_tensor(16), 0, rng);
  CHECK(r.ledger_delta.total().total() == 0);
  for (const auto& m : r.metrics) CHECK(m.queue.empty());
}

TEST_CASE("run_round: d_fedavg averages full models without gating") {
  const auto ds = datagen::gen_gaussian_mixture(4, 16, 50, 6.0, 1);
  RoundConfig cfg;
  cfg.algorithm = Algorithm::d_fedavg;
  cfg.n_com = 3;
  auto states = identical_clients(5, ds, cfg);
  std::mt19937_64 rng(1);
  const auto r = run_round(states, cfg, ds, repr::make_unit_tensor(16), 0, rng);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(r.metrics[i].h_peers == 3);
    CHECK_FALSE(r.metrics[i].dropout);
    CHECK(r.ledger_delta.cumulative(i) == CommCounts{0, 0, 0, 3 * 3300});
  }
}

TEST_CASE("run_round: identical clients all drop out and copy their donor") {
  const auto ds = datagen::gen_gaussian_mixture(4, 16, 50, 6.0, 1);
  RoundConfig cfg;
  cfg.n_com = 3;
  cfg.lr = 0.0;  // keeps the post-dropout model visible after local training
  auto states = identical_clients(6, ds, cfg);
  const auto before = states;
  std::mt19937_64 rng(2);
  const auto r = run_round(states, cfg, ds, repr::make_unit_tensor(16), 0, rng);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(r.metrics[i].dropout);
    REQUIRE(r.metrics[i].donor.has_value());
    CHECK(states[i].model == before[*r.metrics[i].donor].model);
    CHECK(r.ledger_delta.cumulative(i) == CommCounts{3 * 36, 0, 0, 3300});
  }
}

TEST_CASE("run_round: aggregation ledger counts g for every peer and h for gated peers") {
  const auto ds = datagen::gen_gaussian_mixture(4, 16, 50, 6.0, 1);
  RoundConfig cfg;
  cfg.n_com = 3;
  auto states = identical_clients(5, ds, cfg);
  const auto unit = repr::make_unit_tensor(16);
  for (std::size_t i = 0; i < 5; ++i) {
    states[i].model = nn::LayeredModel::mlp(kWidths, 2, 100 + i);
    states[i].refresh(unit);
  }
  std::mt19937_64 rng(3);
  const auto r = run_round(states, cfg, ds, unit, 0, rng);
  bool saw_aggregation = false;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& m = r.metrics[i];
    const auto got = r.ledger_delta.cumulative(i);
    if (m.dropout) {
      CHECK(got == CommCounts{108, 0, 0, 3300});
    } else {
      saw_aggregation = true;
      std::size_t gated = 0;
      for (const auto& [j, d] : m.divergences) gated += d < cfg.th_i;
      CHECK(m.h_peers == gated);
      CHECK(got == CommCounts{108, 3 * 3168, gated * 132, 0});
      CHECK(got.total() > 108 + 3300);
    }
  }
  CHECK(saw_aggregation);
}

TEST_CASE("run_round: configuration errors leave state untouched") {
  const auto ds = datagen::gen_gaussian_mixture(4, 16, 50, 6.0, 1);
  RoundConfig cfg;
  cfg.n_com = 4;
  auto states = identical_clients(4, ds, cfg);
  const auto before = states;
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(run_round(states, cfg, ds, repr::make_unit_tensor(16), 0, rng), ConfigError);
  for (std::size_t i = 0; i < 4; ++i) CHECK(states[i].model == before[i].model);

  cfg.n_com = 1;
  auto solo = identical_clients(1, ds, cfg);
  CHECK_THROWS_AS(run_round(solo, cfg, ds, repr::make_unit_tensor(16), 0, rng), ConfigError);
}

TEST_CASE("divergence_matrix: identical clients are all zero, matrix symmetric") {
  const auto ds = datagen::gen_gaussian_mixture(4, 16, 50, 6.0, 1);
  RoundConfig cfg;
  auto states = identical_clients(4, ds, cfg);
  for (const auto& row : divergence_matrix(states)) {
    for (double d : row) CHECK(d == 0.0);
  }
  const auto unit = repr::make_unit_tensor(16);
  for (std::size_t i = 0; i < 4; ++i) {
    states[i].model = nn::LayeredModel::mlp(kWidths, 2, i);
    states[i].refresh(unit);
  }
  const auto d = divergence_matrix(states);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(d[i][i] == 0.0);
    for (std::size_t j = 0; j < 4; ++j) CHECK(d[i][j] == d[j][i]);
  }
}

TEST_CASE("run_experiment: zero rounds and determinism") {
  ExperimentConfig cfg;
  cfg.num_clients = 4;
  cfg.round.n_com = 2;
  cfg.round.rounds = 0;
  cfg.dataset.samples_per_class = 60;
  const auto r0 = run_experiment(cfg, 1);
  CHECK(r0.records.size() == 4);
  for (const auto& rec : r0.records) CHECK(rec.round == 0);

  cfg.round.rounds = 3;
  const auto a = run_experiment(cfg, 5), b = run_experiment(cfg, 5);
  REQUIRE(a.records.size() == 16);
  for (std::size_t k = 0; k < a.records.size(); ++k) {
    CHECK(a.records[k].test_accuracy == b.records[k].test_accuracy);
    CHECK(a.records[k].train_loss == b.records[k].train_loss);
    CHECK(a.records[k].cumulative_scalars == b.records[k].cumulative_scalars);
    CHECK(a.records[k].test_accuracy >= 0.0);
    CHECK(a.records[k].test_accuracy <= 1.0);
  }
}

TEST_CASE("divergence trajectory: same-distribution pair settles below the cross pairs") {
  ExperimentConfig cfg;
  cfg.partition.kind = PartitionKind::class_groups;
  cfg.partition.client_classes = {{0, 1}, {0, 1}, {2, 3}, {2, 3}};
  cfg.round.n_com = 1;
  cfg.round.rounds = 40;
  cfg.track_divergence = true;
  const auto r = run_experiment(cfg, 2);
  REQUIRE(r.divergence.size() == 41);

  auto window = [&](std::size_t i, std::size_t j, std::size_t from, std::size_t to) {
    std::vector<double> v;
    for (std::size_t t = from; t < to; ++t) v.push_back(r.divergence[t][i][j]);
    return v;
  };
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto var = [&](const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
  };
  const double same = mean(window(0, 1, 31, 41));
  for (auto [i, j] : {std::pair{0, 2}, {0, 3}, {1, 2}, {1, 3}}) CHECK(same < mean(window(i, j, 31, 41)));
  CHECK(var(window(0, 1, 31, 41)) < var(window(0, 1, 1, 11)));
}
