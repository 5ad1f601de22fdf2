#include "uapdfl/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

#include "uapdfl/errors.hpp"
#include "uapdfl/format.hpp"
#include "uapdfl/rng.hpp"

namespace uapdfl::datagen {

namespace {

constexpr double kTrainFraction = 0.8;

std::vector<std::vector<std::size_t>> indices_by_class(const SyntheticDataset& ds, bool train) {
  std::vector<std::vector<std::size_t>> out(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.is_train[i] == train) out[ds.labels[i]].push_back(i);
  }
  return out;
}

// Per-client test sets that mirror each client's training label mix: for
// class c a client receives round(n_train_c * |test_c| / |train_c|) samples of
// class c, drawn from a client-specific shuffle of the class's test pool.
void assign_test_sets(const SyntheticDataset& ds, std::vector<ClientData>& clients,
                      std::uint64_t seed) {
  const auto train_pool = indices_by_class(ds, true);
  const auto test_pool = indices_by_class(ds, false);
  for (std::size_t m = 0; m < clients.size(); ++m) {
    auto rng = make_stream({seed, 0x7e57ULL, m});
    auto& client = clients[m];
    client.test.clear();
    const auto counts = class_counts(ds, client.train);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
      if (counts[c] == 0 || test_pool[c].empty()) continue;
      const double ratio =
          static_cast<double>(test_pool[c].size()) / static_cast<double>(train_pool[c].size());
      const auto want = static_cast<std::size_t>(std::llround(static_cast<double>(counts[c]) * ratio));
      auto pool = test_pool[c];
      std::shuffle(pool.begin(), pool.end(), rng);
      const std::size_t take = std::min(want, pool.size());
      client.test.insert(client.test.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    }
    if (client.test.empty() && !client.train.empty()) {
      const auto c = static_cast<std::size_t>(
          std::max_element(counts.begin(), counts.end()) - counts.begin());
      if (!test_pool[c].empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, test_pool[c].size() - 1);
        client.test.push_back(test_pool[c][pick(rng)]);
      }
    }
    std::sort(client.test.begin(), client.test.end());
  }
}

void check_min_samples(const std::vector<ClientData>& clients, std::size_t min_samples,
                       const char* scheme) {
  for (std::size_t m = 0; m < clients.size(); ++m) {
    if (clients[m].train.size() < min_samples) {
      throw ConfigError(std::string(scheme) + " partition leaves client " + std::to_string(m) +
                            " with " + std::to_string(clients[m].train.size()) + " < " +
                            std::to_string(min_samples) + " samples",
                        "partition.min_samples");
    }
  }
}

// Deals each class's training samples evenly over the clients listed for it.
std::vector<ClientData> deal_classes(const SyntheticDataset& ds,
                                     const std::vector<std::vector<std::size_t>>& holders,
                                     std::size_t num_clients, std::uint64_t seed) {
  auto pools = indices_by_class(ds, true);
  std::vector<ClientData> clients(num_clients);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    if (holders[c].empty()) continue;
    auto rng = make_stream({seed, 0x5a4dULL, c});
    auto& pool = pools[c];
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t k = holders[c].size();
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t lo = pool.size() * j / k;
      const std::size_t hi = pool.size() * (j + 1) / k;
      auto& train = clients[holders[c][j]].train;
      train.insert(train.end(), pool.begin() + static_cast<std::ptrdiff_t>(lo),
                   pool.begin() + static_cast<std::ptrdiff_t>(hi));
    }
  }
  for (auto& cl : clients) std::sort(cl.train.begin(), cl.train.end());
  return clients;
}

std::string next_token(std::istream& in, const char* what) {
  std::string tok;
  if (!(in >> tok)) throw std::runtime_error(std::string("truncated snapshot: expected ") + what);
  return tok;
}

template <class T>
T next_number(std::istream& in, const char* what) {
  const auto tok = next_token(in, what);
  T value{};
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc{} || ptr != tok.data() + tok.size()) {
    throw std::runtime_error(std::string("malformed ") + what + ": '" + tok + "'");
  }
  return value;
}

void expect(std::istream& in, const std::string& word) {
  const auto tok = next_token(in, word.c_str());
  if (tok != word) throw std::runtime_error("expected '" + word + "', found '" + tok + "'");
}

}  // namespace

std::vector<std::size_t> SyntheticDataset::train_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (is_train[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> SyntheticDataset::test_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (!is_train[i]) out.push_back(i);
  }
  return out;
}

const ClientData& Partition::client(std::size_t id) const {
  if (id >= clients.size()) {
    throw LookupError("unknown client " + std::to_string(id) + " (partition has " +
                      std::to_string(clients.size()) + ")");
  }
  return clients[id];
}

SyntheticDataset gen_gaussian_mixture(std::size_t num_classes, std::size_t input_dim,
                                      std::size_t n_per_class, double spread, std::uint64_t seed) {
  if (num_classes == 0 || input_dim == 0 || n_per_class == 0) {
    throw ConfigError("dataset counts must be positive", "dataset");
  }
  if (!(spread >= 0.0) || !std::isfinite(spread)) {
    throw ConfigError("spread must be finite and >= 0", "dataset.spread");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::vector<double>> means(num_classes, std::vector<double>(input_dim));
  for (auto& mean : means) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : mean) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
    } while (norm == 0.0);
    for (double& v : mean) v *= spread / norm;
  }

  SyntheticDataset ds;
  ds.num_classes = num_classes;
  ds.features = nn::Matrix(num_classes * n_per_class, input_dim);
  ds.labels.resize(num_classes * n_per_class);
  ds.is_train.assign(num_classes * n_per_class, false);
  const auto n_train = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(kTrainFraction * static_cast<double>(n_per_class))));

  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t base = c * n_per_class;
    for (std::size_t s = 0; s < n_per_class; ++s) {
      auto row = ds.features.row(base + s);
      for (std::size_t d = 0; d < input_dim; ++d) row[d] = means[c][d] + normal(rng);
      ds.labels[base + s] = c;
    }
    std::vector<std::size_t> order(n_per_class);
    std::iota(order.begin(), order.end(), base);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < std::min(n_train, n_per_class); ++s) ds.is_train[order[s]] = true;
  }
  return ds;
}

Partition dirichlet_partition(const SyntheticDataset& ds, std::size_t num_clients, double beta,
                              std::uint64_t seed, std::size_t min_samples) {
  if (num_clients == 0) throw ConfigError("need at least one client", "protocol.clients");
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw ConfigError("beta must be positive and finite", "partition.beta");
  }
  const auto pools = indices_by_class(ds, true);
  std::size_t n_train = 0;
  for (const auto& p : pools) n_train += p.size();
  const double fair_size = static_cast<double>(n_train) / static_cast<double>(num_clients);
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(beta, 1.0);

  for (int attempt = 0; attempt < kDirichletRetries; ++attempt) {
    std::vector<ClientData> clients(num_clients);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
      auto pool = pools[c];
      std::shuffle(pool.begin(), pool.end(), rng);
      std::vector<double> share(num_clients);
      double total = 0.0;
      for (std::size_t m = 0; m < num_clients; ++m) {
        share[m] = gamma(rng);
        // Clients already at the fair size N/M take no more of later classes.
        if (static_cast<double>(clients[m].train.size()) >= fair_size) share[m] = 0.0;
        total += share[m];
      }
      if (!(total > 0.0)) {
        // Every open client's draw underflowed: all mass to one random client.
        std::fill(share.begin(), share.end(), 0.0);
        share[std::uniform_int_distribution<std::size_t>(0, num_clients - 1)(rng)] = 1.0;
        total = 1.0;
      }
      double cumulative = 0.0;
      std::size_t lo = 0;
      for (std::size_t m = 0; m < num_clients; ++m) {
        cumulative += share[m] / total;
        const std::size_t hi =
            m + 1 == num_clients
                ? pool.size()
                : std::min(pool.size(),
                           static_cast<std::size_t>(cumulative * static_cast<double>(pool.size())));
        if (hi > lo) {
          clients[m].train.insert(clients[m].train.end(), pool.begin() + static_cast<std::ptrdiff_t>(lo),
                                  pool.begin() + static_cast<std::ptrdiff_t>(hi));
          lo = hi;
        }
      }
    }
    const bool ok = std::all_of(clients.begin(), clients.end(),
                                [&](const ClientData& d) { return d.train.size() >= min_samples; });
    if (!ok) continue;
    for (auto& cl : clients) std::sort(cl.train.begin(), cl.train.end());
    assign_test_sets(ds, clients, seed);
    return Partition{std::move(clients)};
  }
  throw ConfigError("Dirichlet partition could not give every client " +
                        std::to_string(min_samples) + " samples in " +
                        std::to_string(kDirichletRetries) + " draws",
                    "partition.min_samples");
}

Partition shard_partition(const SyntheticDataset& ds, std::size_t num_clients,
                          std::size_t classes_per_client, std::uint64_t seed,
                          std::size_t min_samples) {
  if (num_clients == 0) throw ConfigError("need at least one client", "protocol.clients");
  if (classes_per_client == 0 || classes_per_client > ds.num_classes) {
    throw ConfigError("classes per client must be in [1, " + std::to_string(ds.num_classes) + "]",
                      "partition.shards");
  }
  if (num_clients * classes_per_client < ds.num_classes) {
    throw ConfigError(std::to_string(num_clients) + " clients x " +
                          std::to_string(classes_per_client) + " classes cannot cover " +
                          std::to_string(ds.num_classes) + " classes",
                      "partition.shards");
  }
  std::vector<std::size_t> perm(ds.num_classes);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_stream({seed, 0x54a2dULL});
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<std::vector<std::size_t>> holders(ds.num_classes);
  for (std::size_t m = 0; m < num_clients; ++m) {
    for (std::size_t j = 0; j < classes_per_client; ++j) {
      holders[perm[(m * classes_per_client + j) % ds.num_classes]].push_back(m);
    }
  }
  auto clients = deal_classes(ds, holders, num_clients, seed);
  check_min_samples(clients, min_samples, "shard");
  assign_test_sets(ds, clients, seed);
  return Partition{std::move(clients)};
}

Partition class_group_partition(const SyntheticDataset& ds,
                                const std::vector<std::vector<std::size_t>>& client_classes,
                                std::uint64_t seed, std::size_t min_samples) {
  if (client_classes.empty()) {
    throw ConfigError("need at least one client", "partition.client_classes");
  }
  std::vector<std::vector<std::size_t>> holders(ds.num_classes);
  for (std::size_t m = 0; m < client_classes.size(); ++m) {
    if (client_classes[m].empty()) {
      throw ConfigError("client " + std::to_string(m) + " lists no classes",
                        "partition.client_classes");
    }
    for (auto c : client_classes[m]) {
      if (c >= ds.num_classes) {
        throw ConfigError("class " + std::to_string(c) + " out of range",
                          "partition.client_classes");
      }
      if (std::find(holders[c].begin(), holders[c].end(), m) == holders[c].end()) {
        holders[c].push_back(m);
      }
    }
  }
  auto clients = deal_classes(ds, holders, client_classes.size(), seed);
  check_min_samples(clients, min_samples, "class-group");
  assign_test_sets(ds, clients, seed);
  return Partition{std::move(clients)};
}

BatchStream::BatchStream(const SyntheticDataset& ds, std::vector<std::size_t> order,
                         std::size_t batch_size)
    : ds_(&ds), order_(std::move(order)), batch_size_(batch_size) {
  if (batch_size_ == 0) throw ConfigError("batch size must be positive", "protocol.batch_size");
}

std::size_t BatchStream::num_batches() const noexcept {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

Batch BatchStream::batch(std::size_t b) const {
  const std::size_t lo = b * batch_size_;
  if (lo >= order_.size()) throw LookupError("batch " + std::to_string(b) + " out of range");
  const std::size_t hi = std::min(order_.size(), lo + batch_size_);
  return gather(*ds_, std::span(order_).subspan(lo, hi - lo));
}

BatchStream batches(const ClientData& data, std::size_t client_id, const SyntheticDataset& ds,
                    std::size_t batch_size, std::uint64_t epoch_seed) {
  auto order = data.train;
  auto rng = make_stream({epoch_seed, client_id});
  std::shuffle(order.begin(), order.end(), rng);
  return BatchStream(ds, std::move(order), batch_size);
}

BatchStream batches(const Partition& partition, std::size_t client_id, const SyntheticDataset& ds,
                    std::size_t batch_size, std::uint64_t epoch_seed) {
  return batches(partition.client(client_id), client_id, ds, batch_size, epoch_seed);
}

Batch gather(const SyntheticDataset& ds, std::span<const std::size_t> indices) {
  Batch out{nn::Matrix(indices.size(), ds.input_dim()), {}};
  out.labels.reserve(indices.size());
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto src = ds.features.row(indices[n]);
    std::copy(src.begin(), src.end(), out.features.row(n).begin());
    out.labels.push_back(ds.labels[indices[n]]);
  }
  return out;
}

std::vector<std::size_t> class_counts(const SyntheticDataset& ds,
                                      std::span<const std::size_t> indices) {
  std::vector<std::size_t> counts(ds.num_classes, 0);
  for (auto i : indices) ++counts[ds.labels[i]];
  return counts;
}

void write_dataset(std::ostream& out, const SyntheticDataset& ds) {
  out << "uapdfl-dataset 1\n"
      << "num_classes " << ds.num_classes << '\n'
      << "input_dim " << ds.input_dim() << '\n'
      << "samples " << ds.size() << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << (ds.is_train[i] ? "train" : "test") << ' ' << ds.labels[i];
    for (double v : ds.features.row(i)) out << ' ' << fmt_double(v);
    out << '\n';
  }
}

SyntheticDataset read_dataset(std::istream& in) {
  expect(in, "uapdfl-dataset");
  if (next_number<int>(in, "version") != 1) throw std::runtime_error("unsupported dataset version");
  expect(in, "num_classes");
  SyntheticDataset ds;
  ds.num_classes = next_number<std::size_t>(in, "num_classes");
  expect(in, "input_dim");
  const auto dim = next_number<std::size_t>(in, "input_dim");
  expect(in, "samples");
  const auto n = next_number<std::size_t>(in, "samples");
  ds.features = nn::Matrix(n, dim);
  ds.labels.resize(n);
  ds.is_train.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto split = next_token(in, "split");
    if (split != "train" && split != "test") throw std::runtime_error("bad split tag '" + split + "'");
    ds.is_train[i] = split == "train";
    ds.labels[i] = next_number<std::size_t>(in, "label");
    if (ds.labels[i] >= ds.num_classes) throw std::runtime_error("label out of range");
    for (double& v : ds.features.row(i)) v = next_number<double>(in, "feature");
  }
  return ds;
}

void write_partition(std::ostream& out, const Partition& partition) {
  out << "uapdfl-partition 1\n"
      << "clients " << partition.num_clients() << '\n';
  for (std::size_t m = 0; m < partition.num_clients(); ++m) {
    for (const auto* kind : {"train", "test"}) {
      const auto& idx = std::string(kind) == "train" ? partition.clients[m].train
                                                     : partition.clients[m].test;
      out << kind << ' ' << m << ' ' << idx.size();
      for (auto i : idx) out << ' ' << i;
      out << '\n';
    }
  }
}

Partition read_partition(std::istream& in) {
  expect(in, "uapdfl-partition");
  if (next_number<int>(in, "version") != 1) throw std::runtime_error("unsupported partition version");
  expect(in, "clients");
  Partition p;
  p.clients.resize(next_number<std::size_t>(in, "clients"));
  for (std::size_t m = 0; m < p.clients.size(); ++m) {
    for (const std::string kind : {"train", "test"}) {
      expect(in, kind);
      if (next_number<std::size_t>(in, "client id") != m) {
        throw std::runtime_error("partition clients out of order");
      }
      auto& idx = kind == "train" ? p.clients[m].train : p.clients[m].test;
      idx.resize(next_number<std::size_t>(in, "index count"));
      for (auto& i : idx) i = next_number<std::size_t>(in, "index");
    }
  }
  return p;
}

}  // namespace uapdfl::datagen
