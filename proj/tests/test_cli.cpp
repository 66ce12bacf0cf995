#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "usrf/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run usrfnet(std::vector<std::string> args) {
  args.insert(args.begin(), "usrfnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = usrf::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("usrfnet_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

json scenario(const std::string& preset, double duration, double rate) {
  return {{"preset", preset},
          {"seed", 5},
          {"duration", duration},
          {"profile", {{{"kind", "plateau"}, {"duration", duration}, {"start_rate", rate}}}}};
}

// Simulates and ingests a scenario into `dir`, returning the dataset path.
std::string make_dataset(const fs::path& dir, const json& sc) {
  write_text(dir / "scenario.json", sc.dump());
  const Run sim = usrfnet({"simulate", "--scenario", (dir / "scenario.json").string(), "--out", (dir / "tele").string()});
  REQUIRE_MESSAGE(sim.code == 0, sim.err);
  const std::string ds = (dir / "dataset.jsonl").string();
  const Run ing = usrfnet({"ingest", "--telemetry", (dir / "tele").string(), "--out", ds});
  REQUIRE_MESSAGE(ing.code == 0, ing.err);
  return ds;
}

}  // namespace

TEST_CASE("help and argument errors") {
  CHECK(usrfnet({"--help"}).code == 0);
  CHECK(usrfnet({}).code == 2);
  CHECK(usrfnet({"train"}).code == 2);
  CHECK(usrfnet({"train", "--dataset", "x.jsonl", "--checkpoint", "m.ckpt", "--bogus"}).code == 2);
  CHECK(usrfnet({"simulate", "--scenario", "/nonexistent/s.json", "--out", "/tmp/x"}).code == 2);
}

TEST_CASE("shipped scenario loads") {
  const fs::path d = fresh_dir("shipped");
  const fs::path sc = fs::path(USRFNET_SOURCE_DIR) / "scenarios" / "online_boutique_small.json";
  json j = json::parse(slurp(sc));
  // Shorten the run; the rest of the file is used as is.
  j["duration"] = 60;
  j["profile"] = {{{"kind", "plateau"}, {"duration", 60}, {"start_rate", 10}}};
  write_text(d / "s.json", j.dump());
  const Run r = usrfnet({"simulate", "--scenario", (d / "s.json").string(), "--out", (d / "tele").string()});
  CHECK_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(d / "tele" / "telemetry.prom"));
  CHECK(fs::exists(d / "tele" / "latency.csv"));
  CHECK(fs::exists(d / "tele" / "topology.json"));
}

TEST_CASE("zero-duration scenario is an input error") {
  const fs::path d = fresh_dir("zero");
  json sc = scenario("online_boutique_like", 100, 5);
  sc["duration"] = 0;
  write_text(d / "s.json", sc.dump());
  const Run r = usrfnet({"simulate", "--scenario", (d / "s.json").string(), "--out", (d / "tele").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("error") != std::string::npos);
}

TEST_CASE("ingest reports the window arithmetic") {
  const fs::path d = fresh_dir("windows");
  write_text(d / "s.json", scenario("online_boutique_like", 200, 10).dump());
  REQUIRE(usrfnet({"simulate", "--scenario", (d / "s.json").string(), "--out", (d / "tele").string()}).code == 0);
  const Run r = usrfnet({"ingest", "--telemetry", (d / "tele").string(), "--out", (d / "ds.jsonl").string(),
                         "--report", (d / "ingest.json").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json rep = json::parse(slurp(d / "ingest.json"));
  // Scrapes at 0, 5, ..., 200: (200 - 30) / 5 + 1 windows.
  CHECK(rep.at("windows_total").get<int>() == 35);
  CHECK(rep.at("snapshots").get<int>() + rep.at("dropped_missing_metrics").get<int>() +
            rep.at("dropped_no_latency").get<int>() ==
        35);
  CHECK(r.out.find("Median (Q2)") != std::string::npos);

  const Run wide = usrfnet({"ingest", "--telemetry", (d / "tele").string(), "--out", (d / "ds60.jsonl").string(),
                            "--report", (d / "ingest60.json").string(), "--window-length", "60", "--window-stride",
                            "10"});
  REQUIRE(wide.code == 0);
  CHECK(json::parse(slurp(d / "ingest60.json")).at("windows_total").get<int>() == 15);

  CHECK(usrfnet({"ingest", "--telemetry", (d / "tele").string(), "--window-stride", "0"}).code == 2);
}

TEST_CASE("telemetry shorter than one window is an empty result") {
  const fs::path d = fresh_dir("short");
  write_text(d / "s.json", scenario("online_boutique_like", 20, 5).dump());
  REQUIRE(usrfnet({"simulate", "--scenario", (d / "s.json").string(), "--out", (d / "tele").string()}).code == 0);
  const Run r = usrfnet({"ingest", "--telemetry", (d / "tele").string(), "--out", (d / "ds.jsonl").string()});
  CHECK(r.code == 3);
}

TEST_CASE("end to end: train, eval, predict, export, baseline") {
  const fs::path d = fresh_dir("e2e");
  const std::string ds = make_dataset(d, scenario("online_boutique_like", 300, 10));
  const std::string ckpt = (d / "model.ckpt").string();

  const Run tr = usrfnet({"train", "--dataset", ds, "--checkpoint", ckpt, "--epochs", "2", "--d-emb", "8",
                          "--checkpoint-every", "1"});
  REQUIRE_MESSAGE(tr.code == 0, tr.err);
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(ckpt + ".epoch1"));
  CHECK(fs::exists(ckpt + ".epoch2"));
  CHECK(fs::exists(ckpt + ".report.json"));
  CHECK(fs::exists(d / "model.ckpt.report.history.csv"));
  const json rep = json::parse(slurp(ckpt + ".report.json"));
  CHECK(rep.at("variant").get<std::string>() == "full");
  CHECK_FALSE(rep.contains("wall_clock_seconds"));

  const Run ev = usrfnet({"eval", "--dataset", ds, "--checkpoint", ckpt, "--split", "test", "--predictions",
                          (d / "pred.csv").string(), "--report", (d / "eval.json").string()});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(ev.out.rfind("test", 0) == 0);
  const json evj = json::parse(slurp(d / "eval.json"));
  CHECK(evj.at("count").get<int>() == rep.at("num_test").get<int>());
  CHECK(usrfnet({"eval", "--dataset", ds, "--checkpoint", ckpt, "--split", "nope"}).code == 2);

  const Run pr = usrfnet({"predict", "--dataset", ds, "--checkpoint", ckpt});
  REQUIRE_MESSAGE(pr.code == 0, pr.err);
  std::istringstream lines(pr.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    CHECK(std::stod(line) > 0.0);
    ++n;
  }
  CHECK(n == rep.at("num_train").get<std::size_t>() + rep.at("num_val").get<std::size_t>() +
                 rep.at("num_test").get<std::size_t>());
  CHECK(usrfnet({"predict", "--checkpoint", ckpt}).code == 2);

  const Run ex = usrfnet({"export-embedding", "--dataset", ds, "--checkpoint", ckpt, "--out", (d / "emb.csv").string()});
  REQUIRE_MESSAGE(ex.code == 0, ex.err);
  CHECK(fs::file_size(d / "emb.csv") > 0);

  CHECK(usrfnet({"baseline", "--dataset", ds, "--kind", "linear"}).code == 0);
  CHECK(usrfnet({"baseline", "--dataset", ds, "--kind", "mlp", "--epochs", "2"}).code == 0);
  CHECK(usrfnet({"baseline", "--dataset", ds, "--kind", "forest"}).code == 2);

  SUBCASE("corrupt dataset: strict fails, lenient skips") {
    std::istringstream in(slurp(ds));
    std::string text, l;
    int k = 0;
    while (std::getline(in, l)) text += (++k == 3 ? std::string("{not json") : l) + "\n";
    write_text(d / "corrupt.jsonl", text);
    const Run strict = usrfnet({"eval", "--dataset", (d / "corrupt.jsonl").string(), "--checkpoint", ckpt, "--strict"});
    CHECK(strict.code == 2);
    CHECK(strict.err.find("3") != std::string::npos);
    const Run lenient = usrfnet({"eval", "--dataset", (d / "corrupt.jsonl").string(), "--checkpoint", ckpt});
    CHECK(lenient.code == 0);
  }

  SUBCASE("checkpoint from another topology is rejected") {
    const fs::path d2 = fresh_dir("e2e_sock");
    const std::string other = make_dataset(d2, scenario("sockshop_like", 120, 5));
    CHECK(usrfnet({"eval", "--dataset", other, "--checkpoint", ckpt}).code == 5);
    CHECK(usrfnet({"predict", "--dataset", other, "--checkpoint", ckpt}).code == 5);
  }

  SUBCASE("a truncated checkpoint is rejected") {
    const std::string text = slurp(ckpt);
    write_text(d / "trunc.ckpt", text.substr(0, text.size() / 2));
    const int code = usrfnet({"eval", "--dataset", ds, "--checkpoint", (d / "trunc.ckpt").string()}).code;
    CHECK((code == 2 || code == 5));
  }
}

TEST_CASE("reruns are byte-identical") {
  std::vector<std::string> outputs;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path d = fresh_dir("rerun" + std::to_string(rep));
    const std::string ds = make_dataset(d, scenario("online_boutique_like", 200, 8));
    const std::string ckpt = (d / "m.ckpt").string();
    REQUIRE(usrfnet({"train", "--dataset", ds, "--checkpoint", ckpt, "--epochs", "2", "--d-emb", "8", "--seed", "3"})
                .code == 0);
    REQUIRE(usrfnet({"eval", "--dataset", ds, "--checkpoint", ckpt, "--predictions", (d / "p.csv").string()}).code ==
            0);
    outputs.push_back(slurp(d / "tele" / "telemetry.prom") + slurp(d / "tele" / "latency.csv") + slurp(ds) +
                      slurp(ckpt) + slurp(ckpt + ".report.json") + slurp(d / "p.csv"));
  }
  CHECK(outputs[0] == outputs[1]);
}

TEST_CASE("config file supplies defaults, flags win") {
  const fs::path d = fresh_dir("config");
  const std::string ds = make_dataset(d, scenario("online_boutique_like", 200, 8));
  write_text(d / "cfg.json", json{{"variant", "traffic_only"}, {"epochs", 1}, {"d_emb", 8}}.dump());
  const std::string ckpt = (d / "m.ckpt").string();
  REQUIRE(usrfnet({"train", "--dataset", ds, "--checkpoint", ckpt, "--config", (d / "cfg.json").string()}).code == 0);
  CHECK(json::parse(slurp(ckpt + ".report.json")).at("variant").get<std::string>() == "traffic_only");
  REQUIRE(usrfnet({"train", "--dataset", ds, "--checkpoint", ckpt, "--config", (d / "cfg.json").string(), "--variant",
                   "resource_only"})
              .code == 0);
  CHECK(json::parse(slurp(ckpt + ".report.json")).at("variant").get<std::string>() == "resource_only");
  write_text(d / "bad.json", "[1,2]");
  CHECK(usrfnet({"train", "--dataset", ds, "--checkpoint", ckpt, "--config", (d / "bad.json").string()}).code == 2);
}
