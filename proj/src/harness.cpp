#include "uapdfl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "uapdfl/errors.hpp"
#include "uapdfl/format.hpp"

namespace uapdfl::harness {

namespace fs = std::filesystem;
using protocol::Algorithm;
using protocol::PartitionKind;

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_list(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto item = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!item.empty()) out.push_back(item);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view value, const std::string& key) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (value.empty() || ec != std::errc{} || ptr != value.data() + value.size()) {
    throw ConfigError("expected a number, got '" + std::string(value) + "'", key);
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) throw ConfigError("value must be finite", key);
  }
  return out;
}

bool parse_bool(std::string_view value, const std::string& key) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError("expected true or false, got '" + std::string(value) + "'", key);
}

template <class T>
std::vector<T> parse_number_list(std::string_view value, const std::string& key) {
  std::vector<T> out;
  for (auto item : split_list(value, ',')) out.push_back(parse_number<T>(item, key));
  return out;
}

std::vector<std::vector<std::size_t>> parse_groups(std::string_view value, const std::string& key) {
  std::vector<std::vector<std::size_t>> out;
  for (auto group : split_list(value, ';')) {
    std::vector<std::size_t> classes;
    for (auto item : split_list(group, ' ')) {
      for (auto c : split_list(item, ',')) classes.push_back(parse_number<std::size_t>(c, key));
    }
    out.push_back(std::move(classes));
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt_double(items[i]);
    } else {
      out += std::to_string(items[i]);
    }
  }
  return out;
}

using Setter = std::function<void(ExperimentSpec&, std::string_view, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
#define UAPDFL_SIZE(KEY, EXPR) \
  t[KEY] = [](ExperimentSpec& s, std::string_view v, const std::string& k) { EXPR = parse_number<std::size_t>(v, k); }
#define UAPDFL_REAL(KEY, EXPR) \
  t[KEY] = [](ExperimentSpec& s, std::string_view v, const std::string& k) { EXPR = parse_number<double>(v, k); }
#define UAPDFL_BOOL(KEY, EXPR) \
  t[KEY] = [](ExperimentSpec& s, std::string_view v, const std::string& k) { EXPR = parse_bool(v, k); }
    UAPDFL_SIZE("dataset.num_classes", s.experiment.dataset.num_classes);
    UAPDFL_SIZE("dataset.input_dim", s.experiment.dataset.input_dim);
    UAPDFL_SIZE("dataset.samples_per_class", s.experiment.dataset.samples_per_class);
    UAPDFL_REAL("dataset.spread", s.experiment.dataset.spread);
    UAPDFL_SIZE("partition.min_samples", s.experiment.partition.min_samples);
    UAPDFL_SIZE("protocol.clients", s.experiment.num_clients);
    UAPDFL_SIZE("protocol.rounds", s.experiment.round.rounds);
    UAPDFL_SIZE("protocol.n_com", s.experiment.round.n_com);
    UAPDFL_REAL("protocol.th_i", s.experiment.round.th_i);
    UAPDFL_REAL("protocol.mu", s.experiment.round.mu);
    UAPDFL_SIZE("protocol.local_epochs", s.experiment.round.local_epochs);
    UAPDFL_SIZE("protocol.batch_size", s.experiment.round.batch_size);
    UAPDFL_REAL("protocol.lr", s.experiment.round.lr);
    UAPDFL_REAL("protocol.momentum", s.experiment.round.momentum);
    UAPDFL_REAL("protocol.lr_decay", s.experiment.round.lr_decay);
    UAPDFL_REAL("protocol.unit_fill", s.experiment.unit_fill);
    UAPDFL_BOOL("protocol.shared_init", s.experiment.shared_init);
    UAPDFL_SIZE("model.split_index", s.experiment.split_index);
    UAPDFL_BOOL("output.divergence", s.write_divergence);
    UAPDFL_SIZE("lab.clients", s.lab.clients);
    UAPDFL_SIZE("lab.dim", s.lab.dim);
    UAPDFL_REAL("lab.mu", s.lab.mu);
    UAPDFL_REAL("lab.L", s.lab.L);
    UAPDFL_REAL("lab.heterogeneity", s.lab.heterogeneity);
    UAPDFL_REAL("lab.sigma", s.lab.sigma);
    UAPDFL_SIZE("lab.rounds", s.lab.rounds);
    UAPDFL_SIZE("lab.trials", s.lab.trials);
#undef UAPDFL_SIZE
#undef UAPDFL_REAL
#undef UAPDFL_BOOL
    t["partition.beta"] = [](ExperimentSpec& s, std::string_view v, const std::string& k) {
      s.experiment.partition.kind = PartitionKind::dirichlet;
      s.experiment.partition.beta = parse_number<double>(v, k);
    };
    t["partition.shards"] = [](ExperimentSpec& s, std::string_view v, const std::string& k) {
      s.experiment.partition.kind = PartitionKind::shards;
      s.experiment.partition.classes_per_client = parse_number<std::size_t>(v, k);
    };
    t["partition.client_classes"] = [](ExperimentSpec& s, std::string_view v, const std::string& k) {
      s.experiment.partition.kind = PartitionKind::class_groups;
      s.experiment.partition.client_classes = parse_groups(v, k);
    };
    t["model.hidden"] = [](ExperimentSpec& s, std::string_view v, const std::string& k) {
      s.experiment.hidden = parse_number_list<std::size_t>(v, k);
    };
    t["arms"] = [](ExperimentSpec& s, std::string_view v, const std::string&) {
      s.arms.clear();
      for (auto item : split_list(v, ',')) s.arms.push_back(protocol::parse_algorithm(item));
    };
    t["seeds"] = [](ExperimentSpec& s, std::string_view v, const std::string& k) {
      s.seeds = parse_number_list<std::uint64_t>(v, k);
    };
    t["output.dir"] = [](ExperimentSpec& s, std::string_view v, const std::string&) {
      s.output_dir = std::string(v);
    };
    return t;
  }();
  return table;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << content;
  out.flush();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ExperimentSpec single_run_spec(const ExperimentSpec& spec, Algorithm arm, std::uint64_t seed) {
  ExperimentSpec one = spec;
  one.arms = {arm};
  one.seeds = {seed};
  return one;
}

fs::path run_dir(const ExperimentSpec& spec, Algorithm arm, std::uint64_t seed) {
  return fs::path(spec.output_dir) / std::string(protocol::to_string(arm)) /
         ("seed_" + std::to_string(seed));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); 0 for a single run.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

void validate(const ExperimentSpec& spec) {
  if (spec.arms.empty()) throw ConfigError("at least one arm is required", "arms");
  if (spec.seeds.empty()) throw ConfigError("at least one seed is required", "seeds");
  if (spec.output_dir.empty()) throw ConfigError("must not be empty", "output.dir");
  for (auto arm : spec.arms) {
    auto cfg = spec.experiment;
    cfg.round.algorithm = arm;
    cfg.validate();
  }
  if (spec.lab.clients < 1) throw ConfigError("must be >= 1", "lab.clients");
  if (spec.lab.dim < 1) throw ConfigError("must be >= 1", "lab.dim");
  if (!(spec.lab.mu > 0.0) || !(spec.lab.mu <= spec.lab.L)) throw ConfigError("need 0 < mu <= L", "lab.mu");
  if (!(spec.lab.sigma >= 0.0)) throw ConfigError("must be >= 0", "lab.sigma");
  if (!(spec.lab.heterogeneity >= 0.0)) throw ConfigError("must be >= 0", "lab.heterogeneity");
  if (spec.lab.rounds < 1) throw ConfigError("must be >= 1", "lab.rounds");
  if (spec.lab.trials < 1) throw ConfigError("must be >= 1", "lab.trials");
}

ExperimentSpec parse_config(std::string_view text) {
  ExperimentSpec spec;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    auto line = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    ++line_no;
    start = end == std::string_view::npos ? text.size() + 1 : end + 1;

    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown key", key);
    if (!seen.insert(key).second) throw ConfigError("key given twice", key);
    it->second(spec, value, key);
  }

  const int partition_keys = static_cast<int>(seen.count("partition.beta")) +
                             static_cast<int>(seen.count("partition.shards")) +
                             static_cast<int>(seen.count("partition.client_classes"));
  if (partition_keys > 1) {
    throw ConfigError("partition.beta, partition.shards and partition.client_classes are mutually exclusive",
                      "partition");
  }
  if (seen.count("partition.client_classes") && seen.count("protocol.clients") &&
      spec.experiment.num_clients != spec.experiment.partition.client_classes.size()) {
    throw ConfigError("disagrees with the number of partition.client_classes groups", "protocol.clients");
  }
  if (spec.experiment.partition.kind == PartitionKind::class_groups) {
    spec.experiment.num_clients = spec.experiment.partition.client_classes.size();
  }
  validate(spec);
  return spec;
}

ExperimentSpec load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string render_config(const ExperimentSpec& spec) {
  const auto& e = spec.experiment;
  std::ostringstream o;
  o << "dataset.num_classes = " << e.dataset.num_classes << '\n'
    << "dataset.input_dim = " << e.dataset.input_dim << '\n'
    << "dataset.samples_per_class = " << e.dataset.samples_per_class << '\n'
    << "dataset.spread = " << fmt_double(e.dataset.spread) << '\n';
  switch (e.partition.kind) {
    case PartitionKind::dirichlet:
      o << "partition.beta = " << fmt_double(e.partition.beta) << '\n';
      break;
    case PartitionKind::shards:
      o << "partition.shards = " << e.partition.classes_per_client << '\n';
      break;
    case PartitionKind::class_groups: {
      std::vector<std::string> groups;
      for (const auto& g : e.partition.client_classes) groups.push_back(join(g, " "));
      o << "partition.client_classes = ";
      for (std::size_t i = 0; i < groups.size(); ++i) o << (i ? "; " : "") << groups[i];
      o << '\n';
      break;
    }
  }
  o << "partition.min_samples = " << e.partition.min_samples << '\n'
    << "protocol.clients = " << e.num_clients << '\n'
    << "protocol.rounds = " << e.round.rounds << '\n'
    << "protocol.n_com = " << e.round.n_com << '\n'
    << "protocol.th_i = " << fmt_double(e.round.th_i) << '\n'
    << "protocol.mu = " << fmt_double(e.round.mu) << '\n'
    << "protocol.local_epochs = " << e.round.local_epochs << '\n'
    << "protocol.batch_size = " << e.round.batch_size << '\n'
    << "protocol.lr = " << fmt_double(e.round.lr) << '\n'
    << "protocol.momentum = " << fmt_double(e.round.momentum) << '\n'
    << "protocol.lr_decay = " << fmt_double(e.round.lr_decay) << '\n'
    << "protocol.unit_fill = " << fmt_double(e.unit_fill) << '\n'
    << "protocol.shared_init = " << (e.shared_init ? "true" : "false") << '\n'
    << "model.hidden = " << join(e.hidden, ", ") << '\n'
    << "model.split_index = " << e.split_index << '\n';
  o << "arms = ";
  for (std::size_t i = 0; i < spec.arms.size(); ++i) o << (i ? ", " : "") << protocol::to_string(spec.arms[i]);
  o << '\n'
    << "seeds = " << join(spec.seeds, ", ") << '\n'
    << "output.dir = " << spec.output_dir << '\n'
    << "output.divergence = " << (spec.write_divergence ? "true" : "false") << '\n'
    << "lab.clients = " << spec.lab.clients << '\n'
    << "lab.dim = " << spec.lab.dim << '\n'
    << "lab.mu = " << fmt_double(spec.lab.mu) << '\n'
    << "lab.L = " << fmt_double(spec.lab.L) << '\n'
    << "lab.heterogeneity = " << fmt_double(spec.lab.heterogeneity) << '\n'
    << "lab.sigma = " << fmt_double(spec.lab.sigma) << '\n'
    << "lab.rounds = " << spec.lab.rounds << '\n'
    << "lab.trials = " << spec.lab.trials << '\n';
  return o.str();
}

std::string metrics_csv(const protocol::ExperimentResult& result, std::string_view arm, std::uint64_t seed) {
  std::ostringstream o;
  o << kMetricsVersionLine << '\n' << kMetricsHeader << '\n';
  for (const auto& r : result.records) {
    o << r.round << ',' << r.client << ',' << arm << ',' << seed << ',' << fmt_double(r.test_accuracy)
      << ',' << fmt_double(r.train_loss) << ',' << (r.dropout ? 1 : 0) << ',' << r.h_peers << ','
      << r.cumulative_scalars << '\n';
  }
  return o.str();
}

std::string divergence_csv(const protocol::ExperimentResult& result) {
  std::ostringstream o;
  o << kDivergenceVersionLine << '\n' << "round,client";
  const std::size_t M = result.divergence.empty() ? 0 : result.divergence.front().size();
  for (std::size_t j = 0; j < M; ++j) o << ",d_" << j;
  o << '\n';
  for (std::size_t r = 0; r < result.divergence.size(); ++r) {
    for (std::size_t i = 0; i < M; ++i) {
      o << r << ',' << i;
      for (double d : result.divergence[r][i]) o << ',' << fmt_double(d);
      o << '\n';
    }
  }
  return o.str();
}

namespace {

MatrixResult run_grid(const ExperimentSpec& spec, const std::vector<Algorithm>& arms, bool divergence,
                      bool metrics) {
  validate(spec);
  MatrixResult out;
  nlohmann::ordered_json summary;
  summary["format"] = kSummaryFormat;
  summary["arms"] = nlohmann::ordered_json::object();

  for (auto arm : arms) {
    const std::string name(protocol::to_string(arm));
    nlohmann::ordered_json runs = nlohmann::ordered_json::array();
    std::vector<double> accuracies;
    for (auto seed : spec.seeds) {
      try {
        auto cfg = spec.experiment;
        cfg.round.algorithm = arm;
        cfg.track_divergence = divergence;
        const auto result = protocol::run_experiment(cfg, seed);
        const auto dir = run_dir(spec, arm, seed);
        fs::create_directories(dir);
        write_file(dir / "config.txt", render_config(single_run_spec(spec, arm, seed)));
        if (metrics) {
          write_file(dir / "metrics.csv", metrics_csv(result, name, seed));
          out.metric_files.push_back(dir / "metrics.csv");
        }
        if (divergence) {
          write_file(dir / "divergence.csv", divergence_csv(result));
          out.divergence_files.push_back(dir / "divergence.csv");
        }
        accuracies.push_back(result.mean_final_accuracy);
        runs.push_back({{"seed", seed},
                        {"mean_final_accuracy", result.mean_final_accuracy},
                        {"total_scalars", result.ledger.total().total()}});
      } catch (const std::exception& ex) {
        out.failures.push_back({name, seed, ex.what()});
      }
    }
    summary["arms"][name] = {{"runs", runs},
                             {"mean_accuracy", mean_of(accuracies)},
                             {"std_accuracy", std_of(accuracies)}};
  }
  nlohmann::ordered_json failures = nlohmann::ordered_json::array();
  for (const auto& f : out.failures) failures.push_back({{"arm", f.arm}, {"seed", f.seed}, {"error", f.message}});
  summary["failures"] = failures;

  if (metrics) {
    try {
      fs::create_directories(spec.output_dir);
      out.summary_file = fs::path(spec.output_dir) / "summary.json";
      write_file(out.summary_file, summary.dump(2) + "\n");
    } catch (const std::exception& ex) {
      out.failures.push_back({"summary", 0, ex.what()});
    }
  }
  return out;
}

}  // namespace

MatrixResult run_matrix(const ExperimentSpec& spec) {
  return run_grid(spec, spec.arms, spec.write_divergence, true);
}

MatrixResult divergence_probe(const ExperimentSpec& spec) {
  validate(spec);
  return run_grid(spec, {spec.arms.front()}, true, false);
}

std::vector<fs::path> gen_data(const ExperimentSpec& spec) {
  validate(spec);
  std::vector<fs::path> files;
  fs::create_directories(spec.output_dir);
  for (auto seed : spec.seeds) {
    const auto setup = protocol::setup_experiment(spec.experiment, seed);
    const auto ds_path = fs::path(spec.output_dir) / ("dataset_seed_" + std::to_string(seed) + ".txt");
    const auto part_path = fs::path(spec.output_dir) / ("partition_seed_" + std::to_string(seed) + ".txt");
    std::ostringstream ds, part;
    datagen::write_dataset(ds, setup.dataset);
    datagen::write_partition(part, setup.partition);
    write_file(ds_path, ds.str());
    write_file(part_path, part.str());
    files.push_back(ds_path);
    files.push_back(part_path);
  }
  return files;
}

BoundCheckReport bound_check(const ExperimentSpec& spec, std::uint64_t seed) {
  const auto& l = spec.lab;
  const auto problem = lab::gen_quadratic_clients(l.clients, l.dim, l.mu, l.L, l.heterogeneity, seed, l.sigma);
  BoundCheckReport rep;
  rep.summary = lab::run_bound_monte_carlo(problem, l.rounds, l.trials, seed);
  rep.bound_holds = true;
  std::ostringstream o;
  o << "round,mean_gap,bound,noise_floor\n";
  for (std::size_t r = 0; r < rep.summary.mean_gap.size(); ++r) {
    if (rep.summary.mean_gap[r] > 1.05 * rep.summary.bound[r]) rep.bound_holds = false;
    o << r << ',' << fmt_double(rep.summary.mean_gap[r]) << ',' << fmt_double(rep.summary.bound[r]) << ','
      << fmt_double(rep.summary.noise_floor) << '\n';
  }
  fs::create_directories(spec.output_dir);
  rep.file = fs::path(spec.output_dir) / "bound_check.csv";
  write_file(rep.file, o.str());
  return rep;
}

}  // namespace uapdfl::harness
