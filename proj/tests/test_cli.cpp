#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "cg_test_cli";

// Runs the CLI with output discarded; returns its exit code.
int cli(const std::string& args) {
  const char* bin = std::getenv("CELLGRAPH_CLI");
  REQUIRE(bin != nullptr);
  const std::string cmd = std::string(bin) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string at(const std::string& rel) { return (kRoot / rel).string(); }

struct Fixture {
  Fixture() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
  ~Fixture() { fs::remove_all(kRoot); }
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "exit codes") {
  CHECK(cli("--help") == 0);
  CHECK(cli("") == 1);
  CHECK(cli("match --no-such-flag") == 1);
  CHECK(cli("synth --cells abc") == 1);
  CHECK(cli("synth --set synth.types=1") == 1);
  CHECK(cli("synth --set nokey") == 1);
  CHECK(cli("match --data " + at("missing")) == 2);
  CHECK(cli("eval --embedding " + at("none.mtx") + " --labels x --batches y") == 2);
}

TEST_CASE_FIXTURE(Fixture, "synth, match, eval end to end") {
  REQUIRE(cli("synth --cells 40 --seed 1 --out " + at("d")) == 0);
  REQUIRE(cli("match --data " + at("d") + " --seed 1 --set train.max_epochs=5 --set conv.hidden_dim=12 --out " +
              at("m")) == 0);
  const std::string report = slurp(kRoot / "m" / "report.kv");
  CHECK(report.find("competition_score=") != std::string::npos);
  CHECK(report.find("accuracy=") != std::string::npos);
  CHECK(fs::exists(kRoot / "m" / "assignment.txt"));
  CHECK(fs::exists(kRoot / "m" / "train.log"));

  REQUIRE(cli("eval --embedding " + at("d/mod1.mtx") + " --labels " + at("d/types.txt") + " --batches " +
              at("d/batches.txt") + " --out " + at("e")) == 0);
  std::istringstream lines(slurp(kRoot / "e" / "report.kv"));
  int n = 0;
  for (std::string line; std::getline(lines, line);) ++n;
  CHECK(n == 9);
}

TEST_CASE_FIXTURE(Fixture, "flags override --set, which overrides the config file") {
  std::ofstream(kRoot / "run.cfg") << "synth.cells = 10\nseed = 2\n";
  REQUIRE(cli("synth --config " + at("run.cfg") + " --out " + at("a")) == 0);
  REQUIRE(cli("synth --config " + at("run.cfg") + " --set synth.cells=12 --out " + at("b")) == 0);
  REQUIRE(cli("synth --config " + at("run.cfg") + " --set synth.cells=12 --cells 14 --out " + at("c")) == 0);
  auto test_cells = [](const fs::path& dir) {
    std::istringstream in(slurp(dir / "split.txt"));
    int n = 0;
    for (std::string line; std::getline(in, line);) n += line == "test";
    return n;
  };
  CHECK(test_cells(kRoot / "a") == 10);
  CHECK(test_cells(kRoot / "b") == 12);
  CHECK(test_cells(kRoot / "c") == 14);
}

TEST_CASE_FIXTURE(Fixture, "gradcheck") {
  CHECK(cli("gradcheck --out " + at("g")) == 0);
  CHECK(slurp(kRoot / "g" / "gradcheck.kv").find("network") != std::string::npos);
}
