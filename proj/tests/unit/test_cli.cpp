#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

#ifdef HSNN_CLI_PATH

namespace {

struct CliRun {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CliRun run_cli(const std::string& args, const std::filesystem::path& dir) {
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + HSNN_CLI_PATH + "\" " + args + " 2>\"" + err.string() + "\"";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  r.err = slurp(err);
  return r;
}

std::filesystem::path write_config(const std::filesystem::path& dir) {
  const auto p = dir / "run.json";
  std::ofstream(p) << hsnn::test::tiny_run_config().to_json();
  return p;
}

}  // namespace

TEST(Cli, UnknownFlagPrintsUsage) {
  const auto dir = hsnn::test::temp_dir("cli");
  const CliRun r = run_cli("gen-data --seed 1 --out x --frobnicate", dir);
  EXPECT_EQ(r.status, 64);
  EXPECT_NE(r.err.find("error: usage:"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("--out"), std::string::npos) << r.err;
  EXPECT_EQ(run_cli("", dir).status, 64);
  EXPECT_EQ(run_cli("gen-data --out x", dir).status, 64);
}

TEST(Cli, ErrorsCarryCode) {
  const auto dir = hsnn::test::temp_dir("cli");
  const auto bad = dir / "bad.json";
  std::ofstream(bad) << "{\"unknown_section\": {}}";
  const CliRun r = run_cli("gen-data --seed 1 --out " + (dir / "d").string() + " --config " + bad.string(), dir);
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(r.err.rfind("error: config: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(Cli, PipelineIsDeterministic) {
  const auto dir = hsnn::test::temp_dir("cli");
  const std::string cfg = " --config " + write_config(dir).string();
  std::string reports[2];
  for (int rep = 0; rep < 2; ++rep) {
    const auto w = dir / ("rep" + std::to_string(rep));
    const std::string d = (w / "data").string(), m = (w / "model").string(), s = (w / "serving").string();
    ASSERT_EQ(run_cli("gen-data --seed 3 --out " + d + cfg, dir).status, 0);
    ASSERT_EQ(run_cli("train --seed 3 --data " + d + " --out " + m + cfg, dir).status, 0);
    ASSERT_EQ(run_cli("build-index --seed 3 --data " + d + " --model " + m + " --out " + s + cfg, dir).status, 0);
    const CliRun e = run_cli("evaluate --seed 3 --data " + d + " --serving " + s + cfg, dir);
    ASSERT_EQ(e.status, 0) << e.err;
    reports[rep] = e.out;
    std::ofstream(w / "users.txt") << "0\n1\n2\n";
    const CliRun r = run_cli("retrieve --seed 3 --data " + d + " --serving " + s + " --users " +
                              (w / "users.txt").string() + " --top-k 4" + cfg,
                          dir);
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 12);
  }
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_NE(reports[0].find("\"ne\""), std::string::npos);
}

#endif
