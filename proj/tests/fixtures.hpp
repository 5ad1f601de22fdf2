#pragma once

// Small end-to-end setups shared by the unit tests and the acceptance binary.

#include <cstdint>
#include <vector>

#include "uapdfl/protocol.hpp"
#include "uapdfl/rng.hpp"

namespace fixture {

struct TrainedClients {
  uapdfl::protocol::ExperimentSetup setup;
  std::vector<double> accuracy;  // local validation accuracy per client
  std::size_t rounds = 0;
  bool reached = false;
};

// Clients with the given class lists, trained without communication until
// every client's local validation accuracy exceeds `target` (or max_rounds).
inline TrainedClients train_class_groups(std::vector<std::vector<std::size_t>> groups, std::uint64_t seed,
                                         double target = 0.9, std::size_t max_rounds = 40,
                                         bool shared_init = true) {
  using namespace uapdfl::protocol;
  ExperimentConfig cfg;
  cfg.partition.kind = PartitionKind::class_groups;
  cfg.partition.client_classes = std::move(groups);
  cfg.round.algorithm = Algorithm::local;
  cfg.shared_init = shared_init;
  TrainedClients out{setup_experiment(cfg, seed), {}, 0, false};
  auto master = uapdfl::make_stream({seed, 99});
  auto all_above = [&] {
    out.accuracy.clear();
    bool ok = true;
    for (const auto& c : out.setup.clients) {
      out.accuracy.push_back(evaluate(c, out.setup.dataset).test_accuracy);
      ok = ok && out.accuracy.back() > target;
    }
    return ok;
  };
  while (!(out.reached = all_above()) && out.rounds < max_rounds) {
    run_round(out.setup.clients, cfg.round, out.setup.dataset, out.setup.unit, out.rounds, master);
    ++out.rounds;
  }
  return out;
}

}  // namespace fixture
