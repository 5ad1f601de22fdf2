#pragma once

// Synthetic Gaussian-mixture classification data, the non-IID partitioners
// and seeded mini-batch streams.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "uapdfl/nn.hpp"

namespace uapdfl::datagen {

inline constexpr std::size_t kDefaultMinSamples = 10;
inline constexpr int kDirichletRetries = 100;

struct SyntheticDataset {
  nn::Matrix features;  // N x input_dim
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::vector<bool> is_train;  // false => test sample

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t input_dim() const noexcept { return features.cols(); }
  std::vector<std::size_t> train_indices() const;
  std::vector<std::size_t> test_indices() const;

  bool operator==(const SyntheticDataset&) const = default;
};

struct ClientData {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  bool operator==(const ClientData&) const = default;
};

struct Partition {
  std::vector<ClientData> clients;  // indexed by client id

  std::size_t num_clients() const noexcept { return clients.size(); }
  const ClientData& client(std::size_t id) const;  // throws LookupError

  bool operator==(const Partition&) const = default;
};

// Class c draws from N(mean_c, I) where mean_c is a seeded random direction
// scaled to norm `spread`. 80/20 train/test split, stratified by class.
SyntheticDataset gen_gaussian_mixture(std::size_t num_classes, std::size_t input_dim,
                                      std::size_t n_per_class, double spread, std::uint64_t seed);

// Per class, Dirichlet(beta) proportions over the clients decide how that
// class's training samples are dealt out; a client that already holds N/M
// training samples gets no share of the remaining classes. Redraws (up to kDirichletRetries)
// until every client holds at least `min_samples`; throws ConfigError if it
// never does.
Partition dirichlet_partition(const SyntheticDataset& ds, std::size_t num_clients, double beta,
                              std::uint64_t seed, std::size_t min_samples = kDefaultMinSamples);

// Each client holds exactly `classes_per_client` classes, taken as a cyclic
// window over a seeded class permutation; a class's samples are split evenly
// across the clients holding it.
Partition shard_partition(const SyntheticDataset& ds, std::size_t num_clients,
                          std::size_t classes_per_client, std::uint64_t seed,
                          std::size_t min_samples = kDefaultMinSamples);

// Explicit class lists per client; a class's samples are split evenly across
// the clients that list it.
Partition class_group_partition(const SyntheticDataset& ds,
                                const std::vector<std::vector<std::size_t>>& client_classes,
                                std::uint64_t seed, std::size_t min_samples = kDefaultMinSamples);

struct Batch {
  nn::Matrix features;
  std::vector<std::size_t> labels;
};

// One epoch of mini-batches over a client's training indices, in an order
// fixed by (epoch_seed, client_id). The last batch may be short.
class BatchStream {
 public:
  BatchStream(const SyntheticDataset& ds, std::vector<std::size_t> order, std::size_t batch_size);

  std::size_t num_batches() const noexcept;
  Batch batch(std::size_t b) const;
  std::span<const std::size_t> order() const noexcept { return order_; }

 private:
  const SyntheticDataset* ds_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
};

BatchStream batches(const Partition& partition, std::size_t client_id, const SyntheticDataset& ds,
                    std::size_t batch_size, std::uint64_t epoch_seed);
BatchStream batches(const ClientData& data, std::size_t client_id, const SyntheticDataset& ds,
                    std::size_t batch_size, std::uint64_t epoch_seed);

// Gathers the given rows into a dense batch.
Batch gather(const SyntheticDataset& ds, std::span<const std::size_t> indices);

// Per-class sample counts within `indices`.
std::vector<std::size_t> class_counts(const SyntheticDataset& ds, std::span<const std::size_t> indices);

// Text snapshot formats, documented in docs/formats.md.
void write_dataset(std::ostream& out, const SyntheticDataset& ds);
SyntheticDataset read_dataset(std::istream& in);
void write_partition(std::ostream& out, const Partition& partition);
Partition read_partition(std::istream& in);

}  // namespace uapdfl::datagen
