#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

class Workspace {
 public:
  Workspace() : dir_(fs::temp_directory_path() / ("zap_cli_test_" + std::to_string(::getpid()))) {
    fs::create_directories(dir_);
  }
  ~Workspace() { fs::remove_all(dir_); }

  Run run(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && '" ZAP_CLI_PATH "' " + args + " 2>&1";
    Run r;
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    while (std::fgets(buf, sizeof buf, p)) r.out += buf;
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }
  std::string read(const std::string& name) const {
    std::ifstream in(dir_ / name);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  bool exists(const std::string& name) const { return fs::exists(dir_ / name); }

 private:
  fs::path dir_;
};

double field(const std::string& out, const std::string& key) {
  const std::regex re(key + R"(\s+(-?[0-9.]+))");
  std::smatch m;
  REQUIRE_MESSAGE(std::regex_search(out, m, re), "missing '" << key << "' in:\n" << out);
  return std::stod(m[1]);
}

const Workspace& pipeline() {
  static const Workspace ws = [] {
    Workspace w;
    REQUIRE(w.run("gen-data --n 60 --out d.tis --seed 3").code == 0);
    REQUIRE(w.run("train-base --data d.tis --out b.zapw --epochs 1 --bn-refresh-batches 2").code == 0);
    REQUIRE(w.run("train-zap --weights b.zapw --data d.tis --pattern B --epochs 1 --out z.zapw").code == 0);
    return w;
  }();
  return ws;
}

}  // namespace

TEST_CASE("gen-data is deterministic under the seed") {
  Workspace w;
  CHECK(w.run("gen-data --n 30 --out a.tis --seed 4").code == 0);
  CHECK(w.run("--seed 4 gen-data --n 30 --out b.tis").code == 0);
  CHECK(w.run("gen-data --n 30 --out c.tis --seed 5").code == 0);
  CHECK(w.read("a.tis") == w.read("b.tis"));
  CHECK(w.read("a.tis") != w.read("c.tis"));
  CHECK(w.run("gen-data --n 0 --out x.tis").code == 2);
  CHECK(w.run("gen-data --out x.tis").code == 2);
  CHECK(w.run("no-such-command").code == 2);
}

TEST_CASE("eval with the compute-all sentinel matches the baseline") {
  const Workspace& w = pipeline();
  const Run plain = w.run("eval --weights z.zapw --data d.tis --no-zap");
  REQUIRE(plain.code == 0);
  const Run all = w.run("eval --weights z.zapw --data d.tis --sigma-all -inf");
  REQUIRE(all.code == 0);
  CHECK(field(all.out, "MAC reduction") == 0.0);
  CHECK(field(all.out, "top-1 accuracy") == field(plain.out, "top-1 accuracy"));
  CHECK(field(all.out, "total") == field(plain.out, "total"));

  // Per-tag counts add up to the total.
  const Run on = w.run("eval --weights z.zapw --data d.tis --sigma 0.2");
  REQUIRE(on.code == 0);
  double sum = 0.0;
  for (const char* tag : {"L0.conv", "L3.conv", "L3.zap", "L7.conv", "L7.zap", "L10.conv", "L10.zap", "L14.linear"}) {
    sum += field(on.out, tag);
  }
  CHECK(sum == field(on.out, "total"));
  CHECK(field(on.out, "MAC reduction") > 0.0);
}

TEST_CASE("config file with flag overrides") {
  const Workspace& w = pipeline();
  w.write("c.toml", "[eval]\nweights = \"z.zapw\"\ndata = \"d.tis\"\nsigma = 0.3\n");
  const Run cfg = w.run("--config c.toml eval");
  const Run flags = w.run("eval --weights z.zapw --data d.tis --sigma 0.3");
  REQUIRE(cfg.code == 0);
  CHECK(field(cfg.out, "total") == field(flags.out, "total"));
  const Run over = w.run("--config c.toml eval --sigma-all -inf");
  CHECK(field(over.out, "MAC reduction") == 0.0);

  w.write("layers.toml", "[eval]\nweights = \"z.zapw\"\ndata = \"d.tis\"\nsigma = 0.3\nlayer-sigma = [\"3=-inf\"]\n");
  const Run layered = w.run("--config layers.toml eval");
  REQUIRE(layered.code == 0);
  CHECK(layered.out.find("L3.zap") == std::string::npos);
  CHECK(field(layered.out, "L7.zap") > 0.0);

  w.write("bad.toml", "[eval\nsigma = = 3\n");
  CHECK(w.run("--config bad.toml eval --weights z.zapw --data d.tis").code == 2);
  w.write("typo.toml", "[eval]\nsigmaa = 0.3\n");
  CHECK(w.run("--config typo.toml eval --weights z.zapw --data d.tis").code == 2);
  CHECK(w.run("--config missing.toml eval").code == 2);
}

TEST_CASE("missing artifacts and malformed inputs are validation errors") {
  const Workspace& w = pipeline();
  CHECK(w.run("eval --weights nope.zapw --data d.tis").code == 2);
  CHECK(w.run("eval --weights z.zapw --data nope.tis").code == 2);
  CHECK(w.run("fit --sweep nope.json --out f.json").code == 2);
  w.write("junk.zapw", "not a container");
  CHECK(w.run("eval --weights junk.zapw --data d.tis").code == 2);
  CHECK(w.run("eval --weights z.zapw --data d.tis --layer-sigma 3").code == 2);
  CHECK(w.run("eval --weights b.zapw --data d.tis --layer-sigma 3=0.1").code == 2);  // no predictors
  CHECK(w.run("sweep --weights b.zapw --data d.tis --out s.json").code == 2);
  CHECK(w.run("train-zap --weights b.zapw --data d.tis --pattern Q --out q.zapw").code == 2);
}

TEST_CASE("sweep, fit, optimize and report") {
  const Workspace& w = pipeline();
  REQUIRE(w.run("sweep --weights z.zapw --data d.tis --sigma-step 0.1 --out s.json --csv s.csv").code == 0);
  CHECK(w.read("s.csv").rfind("layer,sigma,eps,macs\n", 0) == 0);
  REQUIRE(w.run("fit --sweep s.json --out f.json").code == 0);

  const Run inf = w.run("optimize --tradeoff f.json --error-budget 0");
  CHECK(inf.code == 3);
  CHECK(inf.out.find("infeasible") != std::string::npos);
  CHECK(w.run("optimize --tradeoff f.json").code == 2);
  CHECK(w.run("optimize --tradeoff f.json --error-budget 0.1 --mac-budget 5").code == 2);
  const Run ok = w.run("optimize --tradeoff f.json --error-budget 3 --out t.json");
  CHECK(ok.code == 0);
  CHECK(w.read("t.json").find("\"sigma\"") != std::string::npos);
  // The optimizer output feeds back into eval.
  CHECK(w.run("eval --weights z.zapw --data d.tis --sigma-file t.json").code == 0);

  const Run rep = w.run("report --weights z.zapw --data d.tis --sweep s.json --tradeoff f.json --out-dir rep "
                        "--mask-weights z.zapw --op-sigma 0 --op-sigma 0.3 --hist-sigma 0 --hist-sigma 0.3");
  REQUIRE(rep.code == 0);
  for (const char* f : {"curves.csv", "accuracy_vs_scale.csv", "tradeoff.csv", "operating_points.csv",
                        "mispredictions.csv", "report.json"}) {
    CHECK_MESSAGE(w.exists(std::string("rep/") + f), f);
  }
}
