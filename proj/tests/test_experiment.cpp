#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "msbtm/experiment.hpp"

using namespace msbtm;
namespace fs = std::filesystem;

namespace {

RunConfig small_harmonic(long steps = 20) {
  RunConfig c = parse_config(read_text(fs::path(MSBTM_CONFIG_DIR) / "harmonic.ini"));
  c.n_particles = 60;
  c.n_steps = steps;
  c.snapshot_every = 10;
  c.train.metrics_probes = 200;
  return c;
}

RunConfig small_swimmer(long steps = 20) {
  RunConfig c = parse_config(read_text(fs::path(MSBTM_CONFIG_DIR) / "swimmer.ini"));
  c.n_particles = 80;
  c.n_steps = steps;
  c.snapshot_every = 10;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("msbtm_test_experiment_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Experiment, CompareWritesOneRowPerStep) {
  const auto out = scratch("compare");
  const RunConfig c = small_harmonic();
  const auto r = run_experiment(c, Mode::compare, out);
  ASSERT_TRUE(r.ok) << r.error;
  ASSERT_EQ(r.rows.size(), static_cast<std::size_t>(c.n_steps + 1));
  EXPECT_EQ(r.rows.front().tv, 0.0);
  EXPECT_EQ(r.rows.front().trace_msbtm, r.rows.front().trace_sde);
  EXPECT_NEAR(r.rows.back().t, c.dt * c.n_steps, 1e-15);
  for (const auto& row : r.rows) {
    EXPECT_TRUE(row.fisher_train && row.fisher_sde && row.ent_rate_num && row.kl_rate_diag && row.tv);
  }
  EXPECT_EQ(r.training.size(), r.rows.size());

  const std::string csv = read_text(out / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), c.n_steps + 2);
  for (const char* f : {"snapshots/msbtm_step_000000.csv", "snapshots/sde_step_000010.csv",
                        "snapshots/nf_step_000020.csv", "store/populations.bin", "store/index.json",
                        "config.ini", "training.csv", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_FALSE(fs::exists(out / "snapshots/msbtm_step_000005.csv"));
  EXPECT_TRUE(verify_manifest(out).empty());
}

TEST(Experiment, SdeOnlySwimmerLeavesLearnedColumnsEmpty) {
  const auto out = scratch("sde");
  const auto r = run_experiment(small_swimmer(), Mode::sde, out);
  ASSERT_TRUE(r.ok);
  for (const auto& row : r.rows) {
    EXPECT_TRUE(row.trace_sde);
    EXPECT_FALSE(row.trace_msbtm || row.trace_analytic || row.fisher_train || row.ent_rate_num || row.tv);
  }
  const std::string csv = read_text(out / "metrics.csv");
  EXPECT_NE(csv.find("\n0,0,,"), std::string::npos);
  EXPECT_FALSE(fs::exists(out / "store"));
  EXPECT_FALSE(fs::exists(out / "training.csv"));
}

TEST(Experiment, RerunIsByteIdentical) {
  const RunConfig c = small_harmonic(10);
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  run_experiment(c, Mode::compare, a);
  run_experiment(c, Mode::compare, b);
  EXPECT_EQ(read_text(a / "metrics.csv"), read_text(b / "metrics.csv"));
  EXPECT_EQ(sha256_hex(a / "store/populations.bin"), sha256_hex(b / "store/populations.bin"));
  // Running again in place replaces the earlier artifacts.
  run_experiment(c, Mode::compare, a);
  EXPECT_EQ(read_text(a / "metrics.csv"), read_text(b / "metrics.csv"));
  EXPECT_TRUE(verify_manifest(a).empty());
}

TEST(Experiment, SeedChangesTheRun) {
  RunConfig c = small_harmonic(3);
  const auto a = run_experiment(c, Mode::sde, {});
  c.seed = 2;
  const auto b = run_experiment(c, Mode::sde, {});
  EXPECT_NE(a.rows.back().trace_sde, b.rows.back().trace_sde);
}

TEST(Experiment, ManifestDetectsTampering) {
  const auto out = scratch("tamper");
  run_experiment(small_harmonic(5), Mode::sde, out);
  ASSERT_TRUE(verify_manifest(out).empty());
  write_text(out / "metrics.csv", read_text(out / "metrics.csv") + "\n");
  write_text(out / "extra.txt", "x");
  fs::remove(out / "config.ini");
  const auto problems = verify_manifest(out);
  ASSERT_EQ(problems.size(), 3u);
  EXPECT_NE(std::find(problems.begin(), problems.end(), "modified: metrics.csv"), problems.end());
  EXPECT_NE(std::find(problems.begin(), problems.end(), "missing: config.ini"), problems.end());
  EXPECT_NE(std::find(problems.begin(), problems.end(), "unlisted: extra.txt"), problems.end());
}

TEST(Experiment, RefusesUnrelatedDirectory) {
  const auto out = scratch("unrelated");
  fs::create_directories(out);
  write_text(out / "notes.txt", "keep me");
  EXPECT_THROW(run_experiment(small_harmonic(2), Mode::sde, out), Error);
  EXPECT_EQ(read_text(out / "notes.txt"), "keep me");
}

TEST(Experiment, TrainingFailureIsRecorded) {
  RunConfig c = small_harmonic(5);
  c.train.max_grad_steps = 0;
  c.train.gtol = {{kOpenEnded, 1e-12}};
  c.train.max_iters = 3;
  const auto out = scratch("failure");
  const auto r = run_experiment(c, Mode::compare, out);
  EXPECT_FALSE(r.ok);
  ASSERT_TRUE(r.failed_step);
  EXPECT_FALSE(r.error.empty());
  const auto j = nlohmann::json::parse(read_text(out / "manifest.json"));
  EXPECT_EQ(j.at("status"), "failed");
  EXPECT_EQ(j.at("failed_step").get<long>(), *r.failed_step);
  EXPECT_EQ(j.at("rows").get<std::size_t>(), r.rows.size());
  EXPECT_TRUE(verify_manifest(out).empty());
}

class StoredRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(scratch("density"));
    config_ = new RunConfig(small_harmonic(10));
    ASSERT_TRUE(run_experiment(*config_, Mode::msbtm, *dir_).ok);
  }
  static void TearDownTestSuite() {
    delete dir_;
    delete config_;
  }
  static fs::path* dir_;
  static RunConfig* config_;
};

fs::path* StoredRun::dir_ = nullptr;
RunConfig* StoredRun::config_ = nullptr;

TEST_F(StoredRun, DensityAtInitialTimeIsTheInitialGaussian) {
  Mat pts(2, 3);
  pts << 2, 2.5, 12, 0, 0, 0;
  const Vec rho = density_query(*dir_, pts, 0.0);
  // Peak of N(β₀, 0.25 I) is 1/(2π · 0.25).
  EXPECT_NEAR(rho(0), 2.0 / std::numbers::pi, 1e-12);
  EXPECT_NEAR(rho(1), 2.0 / std::numbers::pi * std::exp(-0.5), 1e-12);
  EXPECT_GT(rho(2), 0.0);
  EXPECT_LT(rho(2), 1e-8);
}

TEST_F(StoredRun, DensityLaterIsPositiveAndDeterministic) {
  Mat pts(2, 2);
  pts << 2, 1, 0, 1;
  const double t = 10 * config_->dt;
  const Vec a = density_query(*dir_, pts, t), b = density_query(*dir_, pts, t);
  EXPECT_EQ(a, b);
  EXPECT_GT(a.minCoeff(), 0.0);
  // Ten short steps barely move the peak.
  EXPECT_NEAR(a(0), 2.0 / std::numbers::pi, 0.05);
}

TEST_F(StoredRun, EmptyPointSet) { EXPECT_EQ(density_query(*dir_, Mat(2, 0), 0.0).size(), 0); }

TEST_F(StoredRun, OffGridTimeListsAvailableRange) {
  try {
    density_query(*dir_, Mat::Zero(2, 1), 0.00025);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("k = 0..10"), std::string::npos) << e.what();
  }
  EXPECT_THROW(density_query(*dir_, Mat::Zero(2, 1), 1.0), Error);
  EXPECT_THROW(density_query(*dir_, Mat::Zero(3, 1), 0.0), DimensionError);
}

TEST(Points, Parse) {
  const Mat p = parse_points("c0,c1\n# comment\n1, 2\n\n3,4\n", 2);
  ASSERT_EQ(p.cols(), 2);
  EXPECT_EQ(p(1, 1), 4.0);
  EXPECT_EQ(parse_points("", 2).cols(), 0);
  EXPECT_THROW(parse_points("1,2\n1,x\n", 2), Error);
  EXPECT_THROW(parse_points("1,2,3\n", 2), DimensionError);
}
