#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "coredi/coredi.hpp"

using namespace coredi;
namespace fs = std::filesystem;

namespace {

std::string cli() {
  if (const char* p = std::getenv("COREDI_CLI")) return p;
  return (fs::read_symlink("/proc/self/exe").parent_path() / "coredi").string();
}

struct Result {
  int code;
  std::string out;
};

Result run_cli(const std::string& args) {
  const std::string cmd = cli() + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return {-1, ""};
  std::string out;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("coredi_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_text(dir_ / "cfg.txt",
               "# tiny run\n"
               "tokens = 16\nimage_channels = 2\nfeature_dim = 8\nproj_channels = 3\nhidden = 8\nblocks = 1\n"
               "classes = 2\ndataset_size = 16\nbatch_size = 4\nsteps = 4\nmilestones = 3\neval_samples = 4\n"
               "sample_steps = 3\n");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(Cli, TrainWritesRunAndIsDeterministic) {
  ASSERT_EQ(run_cli("train --config " + path("cfg.txt") + " --out " + path("a")).code, 0);
  ASSERT_EQ(run_cli("train --config " + path("cfg.txt") + " --out " + path("b")).code, 0);
  for (const char* f : {"losses.csv", "curves.json", "config.txt", "milestone_2/checkpoint.bin",
                        "milestone_2/metrics.json"}) {
    EXPECT_EQ(read_text(dir_ / "a" / f), read_text(dir_ / "b" / f)) << f;
  }
  EXPECT_EQ(run_cli("verify --run " + path("a")).code, 0);
  write_text(dir_ / "a" / "losses.csv", "x");
  EXPECT_EQ(run_cli("verify --run " + path("a")).code, 4);
}

TEST_F(Cli, TrainFlagsOverrideConfig) {
  ASSERT_EQ(run_cli("train --config " + path("cfg.txt") + " --out " + path("r") +
                    " --reg cov --gamma 1.2 --lambda-reg 0.5 --ablate no_sg --seed 3").code,
            0);
  const TrainConfig c = parse_config_text(read_text(dir_ / "r" / "config.txt"));
  EXPECT_EQ(c.reg, RegKind::kCovariance);
  EXPECT_EQ(c.gamma, 1.2);
  EXPECT_EQ(c.lambda_reg, 0.5);
  EXPECT_TRUE(c.ablations.no_sg);
  EXPECT_EQ(c.seed, 3u);
}

TEST_F(Cli, SampleAndMetricsAreByteIdentical) {
  ASSERT_EQ(run_cli("train --config " + path("cfg.txt") + " --out " + path("run")).code, 0);
  for (const char* name : {"g1.crds-gen", "g2.crds-gen"}) {
    ASSERT_EQ(run_cli("sample --run " + path("run") + " --method heun --steps 3 --cfg 1.8 --seed 5 --n 6 --out " +
                      path(name))
                  .code,
              0);
  }
  EXPECT_EQ(read_text(dir_ / "g1.crds-gen"), read_text(dir_ / "g2.crds-gen"));
  const Dataset gen = read_dataset(path("g1.crds-gen"));
  EXPECT_EQ(gen.samples.size(), 6u);
  EXPECT_EQ(gen.feature_dim, 3u);
  EXPECT_EQ(gen.samples[3].label, 1u);

  ASSERT_EQ(run_cli("sample --run " + path("run") + " --label 1 --seed 6 --n 2 --out " + path("g3.crds-gen")).code, 0);
  EXPECT_EQ(read_dataset(path("g3.crds-gen")).samples[0].label, 1u);

  ASSERT_EQ(run_cli("metrics --in " + path("g1.crds-gen") + " --report " + path("m1.json")).code, 0);
  ASSERT_EQ(run_cli("metrics --in " + path("g1.crds-gen") + " --report " + path("m2.json")).code, 0);
  EXPECT_EQ(read_text(dir_ / "m1.json"), read_text(dir_ / "m2.json"));
  const auto j = nlohmann::json::parse(read_text(dir_ / "m1.json"));
  for (const char* k : {"lds", "cds", "rmsc", "offdiag_cov_mass", "effective_rank", "samples"})
    EXPECT_TRUE(j.contains(k)) << k;
}

TEST_F(Cli, DatasetIsByteIdenticalAcrossRegenerations) {
  ASSERT_EQ(run_cli("dataset --config " + path("cfg.txt") + " --out " + path("d1.crds")).code, 0);
  ASSERT_EQ(run_cli("dataset --config " + path("cfg.txt") + " --out " + path("d2.crds")).code, 0);
  EXPECT_EQ(read_text(dir_ / "d1.crds"), read_text(dir_ / "d2.crds"));
  ASSERT_EQ(run_cli("dataset --config " + path("cfg.txt") + " --seed 9 --out " + path("d3.crds")).code, 0);
  EXPECT_NE(read_text(dir_ / "d1.crds"), read_text(dir_ / "d3.crds"));
  EXPECT_EQ(run_cli("metrics --in " + path("d1.crds")).code, 0);
}

TEST_F(Cli, Gradcheck) {
  const Result r = run_cli("gradcheck --module regularizers --seeds 2");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("L_var"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run_cli("gradcheck --module nothing").code, 2);
}

TEST_F(Cli, ExitCodes) {
  // Config errors.
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("train").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  write_text(dir_ / "bad.txt", "lambda_z = -1\n");
  EXPECT_EQ(run_cli("train --config " + path("bad.txt") + " --out " + path("x")).code, 2);
  write_text(dir_ / "unknown.txt", "colour = blue\n");
  const Result unknown = run_cli("train --config " + path("unknown.txt") + " --out " + path("x"));
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.out.find("colour"), std::string::npos);
  EXPECT_EQ(run_cli("train --config " + path("cfg.txt") + " --ablate everything --out " + path("x")).code, 2);
  EXPECT_EQ(run_cli("train --config " + path("cfg.txt") + " --reg l1 --out " + path("x")).code, 2);
  // I/O errors.
  EXPECT_EQ(run_cli("train --config " + path("missing.txt")).code, 4);
  EXPECT_EQ(run_cli("metrics --in " + path("missing.crds")).code, 4);
  write_text(dir_ / "junk.crds", "garbage");
  EXPECT_EQ(run_cli("metrics --in " + path("junk.crds")).code, 4);
  EXPECT_EQ(run_cli("curves --run " + path("nowhere")).code, 4);
  // Numeric failure: a diverging run halts.
  std::string cfg = read_text(dir_ / "cfg.txt") + "lr = 1e300\n";
  write_text(dir_ / "diverge.txt", cfg);
  const Result halted = run_cli("train --config " + path("diverge.txt") + " --out " + path("h"));
  EXPECT_EQ(halted.code, 3) << halted.out;
  EXPECT_TRUE(fs::exists(dir_ / "h" / "halt.json"));
  // Sampling guard rails.
  ASSERT_EQ(run_cli("train --config " + path("cfg.txt") + " --out " + path("ok")).code, 0);
  EXPECT_EQ(run_cli("sample --run " + path("ok") + " --cfg 0.5 --out " + path("s.crds-gen")).code, 2);
  EXPECT_EQ(run_cli("sample --run " + path("ok") + " --label 7 --out " + path("s.crds-gen")).code, 2);
  EXPECT_EQ(run_cli("sample --run " + path("ok") + " --method rk4 --out " + path("s.crds-gen")).code, 2);
  EXPECT_EQ(run_cli("sample --out " + path("s.crds-gen")).code, 2);
}

TEST_F(Cli, ResumeContinuesRun) {
  ASSERT_EQ(run_cli("train --config " + path("cfg.txt") + " --out " + path("full")).code, 0);
  fs::create_directories(dir_ / "half");
  std::istringstream log(read_text(dir_ / "full" / "losses.csv"));
  std::string line, prefix;
  for (int i = 0; i < 3 && std::getline(log, line); ++i) prefix += line + "\n";
  write_text(dir_ / "half" / "losses.csv", prefix);
  for (int k : {0, 1}) {
    fs::create_directories(dir_ / "half" / milestone_dir(k));
    for (const char* f : {"checkpoint.bin", "metrics.json"})
      fs::copy(dir_ / "full" / milestone_dir(k) / f, dir_ / "half" / milestone_dir(k) / f);
  }
  ASSERT_EQ(run_cli("train --config " + path("cfg.txt") + " --out " + path("half") + " --resume " +
                    (dir_ / "half" / milestone_dir(1) / "checkpoint.bin").string())
                .code,
            0);
  EXPECT_EQ(read_text(dir_ / "full" / "losses.csv"), read_text(dir_ / "half" / "losses.csv"));
  EXPECT_EQ(read_text(dir_ / "full" / "curves.json"), read_text(dir_ / "half" / "curves.json"));
}

}  // namespace
