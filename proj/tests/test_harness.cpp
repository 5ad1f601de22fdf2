#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "uapdfl/errors.hpp"
#include "uapdfl/harness.hpp"

using namespace uapdfl;
using namespace uapdfl::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("uapdfl_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string small_config(const fs::path& out) {
  return "dataset.samples_per_class = 40\n"
         "protocol.clients = 4\n"
         "protocol.n_com = 2\n"
         "protocol.rounds = 2\n"
         "arms = ua_pdfl, d_fedavg\n"
         "seeds = 1, 2\n"
         "output.dir = " +
         out.string() + "\n";
}

std::string key_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<none>";
}

}  // namespace

TEST_CASE("parse_config: empty document gives the defaults") {
  const auto s = parse_config("");
  CHECK(s.experiment.num_clients == 30);
  CHECK(s.experiment.round.rounds == 150);
  CHECK(s.experiment.round.n_com == 5);
  CHECK(s.experiment.round.lr == 0.05);
  CHECK(s.experiment.round.batch_size == 50);
  CHECK(s.experiment.round.local_epochs == 2);
  CHECK(s.experiment.round.momentum == 0.5);
  CHECK(s.experiment.round.lr_decay == 0.95);
  CHECK(s.experiment.round.th_i == 0.1);
  CHECK(s.experiment.unit_fill == 1.0);
  CHECK(s == ExperimentSpec{});
}

TEST_CASE("parse_config: comments, whitespace and values") {
  const auto s = parse_config(
      "# header\n"
      "  protocol.clients = 10   # trailing\n"
      "\n"
      "protocol.n_com=3\n"
      "partition.beta = 5\n"
      "model.hidden = 8, 4\n"
      "arms = local, d_fedper\n"
      "seeds = 3, 4, 5\n");
  CHECK(s.experiment.num_clients == 10);
  CHECK(s.experiment.round.n_com == 3);
  CHECK(s.experiment.partition.beta == 5.0);
  CHECK(s.experiment.hidden == std::vector<std::size_t>{8, 4});
  CHECK(s.arms == std::vector<protocol::Algorithm>{protocol::Algorithm::local, protocol::Algorithm::d_fedper});
  CHECK(s.seeds == std::vector<std::uint64_t>{3, 4, 5});
}

TEST_CASE("parse_config: rejections name the key") {
  CHECK(key_of("protocol.n_com = 30\n") == "protocol.n_com");
  CHECK(key_of("partition.beta = 0.5\npartition.shards = 2\n") == "partition");
  CHECK(key_of("protocol.colour = 3\n") == "protocol.colour");
  CHECK(key_of("protocol.rounds = 3\nprotocol.rounds = 4\n") == "protocol.rounds");
  CHECK(key_of("protocol.rounds = three\n") == "protocol.rounds");
  CHECK(key_of("protocol.lr = -1\n") == "protocol.lr");
  CHECK(key_of("protocol.shared_init = yes\n") == "protocol.shared_init");
  CHECK(key_of("arms = fedprox\n") == "arms");
  CHECK(key_of("seeds = \n") == "seeds");
  CHECK(key_of("lab.mu = 2\n") == "lab.mu");
  CHECK(key_of("model.split_index = 3\n") == "model.split_index");
  CHECK_THROWS_AS(parse_config("just words\n"), ConfigError);
}

TEST_CASE("parse_config: class groups fix the client count") {
  const auto s = parse_config("partition.client_classes = 0 1; 0 1; 2 3\nprotocol.n_com = 1\n");
  CHECK(s.experiment.num_clients == 3);
  CHECK(s.experiment.partition.client_classes ==
        std::vector<std::vector<std::size_t>>{{0, 1}, {0, 1}, {2, 3}});
  CHECK(key_of("partition.client_classes = 0 1; 2 3\nprotocol.clients = 5\n") == "protocol.clients");
}

TEST_CASE("render_config round-trips") {
  for (const char* text : {"", "partition.shards = 2\nprotocol.clients = 8\n",
                           "partition.client_classes = 0 1; 0 1; 2 3\nprotocol.n_com = 1\n",
                           "dataset.spread = 0.1\nprotocol.mu = 0.3333333333333333\nlab.sigma = 1e-7\n"}) {
    const auto s = parse_config(text);
    CHECK(parse_config(render_config(s)) == s);
  }
}

TEST_CASE("run_matrix: files, determinism and summary") {
  const auto out = scratch("matrix");
  const auto spec = parse_config(small_config(out));
  const auto a = run_matrix(spec);
  REQUIRE(a.ok());
  CHECK(a.metric_files.size() == 4);
  CHECK(fs::exists(a.summary_file));

  std::vector<std::string> first;
  for (const auto& f : a.metric_files) first.push_back(slurp(f));
  const auto summary = slurp(a.summary_file);
  const auto b = run_matrix(spec);
  for (std::size_t k = 0; k < b.metric_files.size(); ++k) CHECK(slurp(b.metric_files[k]) == first[k]);
  CHECK(slurp(b.summary_file) == summary);

  const std::string csv = first.front();
  CHECK(csv.rfind(std::string(kMetricsVersionLine) + "\n" + std::string(kMetricsHeader) + "\n", 0) == 0);
  // 4 clients x (rounds 0..2)
  std::size_t lines = 0;
  for (char c : csv) lines += c == '\n';
  CHECK(lines == 2 + 12);

  const auto j = nlohmann::json::parse(summary);
  CHECK(j["format"] == std::string(kSummaryFormat));
  CHECK(j["arms"]["ua_pdfl"]["runs"].size() == 2);

  // The stored per-run config reproduces that run on its own.
  const auto dir = out / "d_fedavg" / "seed_2";
  auto one = load_config(dir / "config.txt");
  CHECK(one.seeds == std::vector<std::uint64_t>{2});
  one.output_dir = (out / "replay").string();
  const auto replay = run_matrix(one);
  REQUIRE(replay.ok());
  CHECK(slurp(replay.metric_files.front()) == slurp(dir / "metrics.csv"));
  fs::remove_all(out);
}

TEST_CASE("run_matrix: an unwritable run is reported and the rest continue") {
  const auto out = scratch("blocked");
  auto spec = parse_config(small_config(out));
  fs::create_directories(out / "ua_pdfl");
  std::ofstream(out / "ua_pdfl" / "seed_1") << "a file where a directory should be";
  const auto r = run_matrix(spec);
  CHECK_FALSE(r.ok());
  REQUIRE(r.failures.size() == 1);
  CHECK(r.failures[0].arm == "ua_pdfl");
  CHECK(r.failures[0].seed == 1);
  CHECK(r.metric_files.size() == 3);
  fs::remove_all(out);
}

TEST_CASE("divergence_probe: one row per client per round, symmetric") {
  const auto out = scratch("probe");
  auto spec = parse_config("partition.client_classes = 0 1; 0 1; 2 3\nprotocol.n_com = 1\n"
                           "protocol.rounds = 3\ndataset.samples_per_class = 60\narms = local\n"
                           "output.dir = " + out.string() + "\n");
  const auto r = divergence_probe(spec);
  REQUIRE(r.ok());
  REQUIRE(r.divergence_files.size() == 1);
  std::istringstream in(slurp(r.divergence_files.front()));
  std::string line;
  std::getline(in, line);
  CHECK(line == std::string(kDivergenceVersionLine));
  std::getline(in, line);
  CHECK(line == "round,client,d_0,d_1,d_2");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::vector<double> v;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) v.push_back(std::stod(cell));
    rows.push_back(v);
  }
  CHECK(rows.size() == 4 * 3);
  for (std::size_t r0 = 0; r0 < rows.size(); r0 += 3) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) CHECK(rows[r0 + i][2 + j] == rows[r0 + j][2 + i]);
    }
  }
  CHECK_FALSE(fs::exists(out / "summary.json"));
  fs::remove_all(out);
}

TEST_CASE("gen_data writes loadable snapshots") {
  const auto out = scratch("gen");
  auto spec = parse_config("dataset.samples_per_class = 30\nprotocol.clients = 3\nprotocol.n_com = 1\n"
                           "partition.min_samples = 5\nseeds = 4\noutput.dir = " + out.string() + "\n");
  const auto files = gen_data(spec);
  REQUIRE(files.size() == 2);
  std::ifstream ds(files[0]), part(files[1]);
  const auto setup = protocol::setup_experiment(spec.experiment, 4);
  CHECK(datagen::read_dataset(ds) == setup.dataset);
  CHECK(datagen::read_partition(part) == setup.partition);
  fs::remove_all(out);
}

TEST_CASE("bound_check writes a trajectory and holds on the default lab") {
  const auto out = scratch("bound");
  auto spec = parse_config("output.dir = " + out.string() + "\n");
  const auto rep = bound_check(spec, 1);
  CHECK(rep.bound_holds);
  CHECK(fs::exists(rep.file));
  fs::remove_all(out);
}
