// Command-line front end: run, compare, density, validate-config, verify.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "msbtm/config.hpp"
#include "msbtm/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRunFailed = 3;
constexpr int kExitError = 4;

msbtm::RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed,
                             const std::string& out) {
  msbtm::RunConfig c = msbtm::parse_config(msbtm::read_text(path));
  if (seed) c.seed = *seed;
  if (!out.empty()) c.output_dir = out;
  return c;
}

int run(const msbtm::RunConfig& c, msbtm::Mode mode) {
  std::fprintf(stderr, "%s run on %s: N=%ld dt=%g steps=%ld seed=%llu -> %s\n", msbtm::to_string(mode),
               msbtm::to_string(c.kind), c.n_particles, c.dt, c.n_steps,
               static_cast<unsigned long long>(c.seed), c.output_dir.c_str());
  auto progress = [&](const msbtm::StepView& v) {
    if (v.step % c.snapshot_every != 0 && v.step != c.n_steps) return;
    std::fprintf(stderr, "  step %6ld  t=%.4f", v.step, v.t);
    const auto& r = *v.row;
    if (r.trace_msbtm) std::fprintf(stderr, "  trace_msbtm=%.5f", *r.trace_msbtm);
    if (r.trace_sde) std::fprintf(stderr, "  trace_sde=%.5f", *r.trace_sde);
    if (r.trace_nf) std::fprintf(stderr, "  trace_nf=%.5f", *r.trace_nf);
    if (r.trace_analytic) std::fprintf(stderr, "  trace_analytic=%.5f", *r.trace_analytic);
    if (r.fisher_train) std::fprintf(stderr, "  fisher=%.4g", *r.fisher_train);
    if (r.tv) std::fprintf(stderr, "  tv=%.4f", *r.tv);
    std::fprintf(stderr, "\n");
  };
  const auto result = msbtm::run_experiment(c, mode, c.output_dir, progress);
  if (!result.ok) {
    std::fprintf(stderr, "run failed at step %ld: %s\n", result.failed_step.value_or(-1), result.error.c_str());
    return kExitRunFailed;
  }
  std::fprintf(stderr, "done: %zu rows in %.1f s\n", result.rows.size(), result.wall_seconds);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Score-based transport modeling for mean-field Fokker-Planck equations"};
  app.require_subcommand(1);

  std::string config_path;
  std::string mode_name = "msbtm";
  std::optional<std::uint64_t> seed;
  std::string out_dir;

  auto* run_cmd = app.add_subcommand("run", "Run one integrator (or all, with --mode compare)");
  run_cmd->add_option("--config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--mode", mode_name, "msbtm | sde | noise_free | compare")->capture_default_str();
  run_cmd->add_option("--seed", seed, "Override the configured seed");
  run_cmd->add_option("--out", out_dir, "Override the configured output directory");

  auto* compare_cmd = app.add_subcommand("compare", "Run the learned flow, SDE and noise-free ODE side by side");
  compare_cmd->add_option("--config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);
  compare_cmd->add_option("--seed", seed, "Override the configured seed");
  compare_cmd->add_option("--out", out_dir, "Override the configured output directory");

  std::string run_dir;
  std::string points_path;
  double t = 0.0;
  std::string density_out;
  auto* density_cmd = app.add_subcommand("density", "Evaluate the learned density at query points");
  density_cmd->add_option("--run", run_dir, "Directory of a completed msbtm or compare run")
      ->required()
      ->check(CLI::ExistingDirectory);
  density_cmd->add_option("--points", points_path, "CSV file, one point per line")->required()->check(CLI::ExistingFile);
  density_cmd->add_option("--t", t, "Query time (must be a stored step time)")->required();
  density_cmd->add_option("--out", density_out, "Output CSV (default: stdout)");

  auto* validate_cmd = app.add_subcommand("validate-config", "Check a configuration and print it in canonical form");
  validate_cmd->add_option("--config", config_path, "Run configuration file")->required()->check(CLI::ExistingFile);

  auto* verify_cmd = app.add_subcommand("verify", "Re-hash the artifacts of a run against its manifest");
  verify_cmd->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) {
      const auto mode = msbtm::parse_mode(mode_name);
      if (!mode) {
        std::fprintf(stderr, "unknown --mode '%s' (expected msbtm, sde, noise_free or compare)\n", mode_name.c_str());
        return kExitConfig;
      }
      return run(load_config(config_path, seed, out_dir), *mode);
    }
    if (*compare_cmd) return run(load_config(config_path, seed, out_dir), msbtm::Mode::compare);

    if (*density_cmd) {
      const auto c = msbtm::parse_config(msbtm::read_text(std::filesystem::path(run_dir) / "config.ini"));
      const int dim = msbtm::make_problem(c).dim;
      const msbtm::Mat points = msbtm::parse_points(msbtm::read_text(points_path), dim);
      const msbtm::Vec rho = msbtm::density_query(run_dir, points, t);
      std::ofstream file;
      if (!density_out.empty()) {
        file.open(density_out, std::ios::binary);
        if (!file) throw msbtm::Error("cannot write " + density_out);
      }
      std::ostream& os = density_out.empty() ? std::cout : file;
      os << "point_id";
      for (int a = 0; a < dim; ++a) os << ",c" << a;
      os << ",t,density\n";
      for (Eigen::Index i = 0; i < points.cols(); ++i) {
        os << i;
        for (int a = 0; a < dim; ++a) os << "," << msbtm::format_real(points(a, i));
        os << "," << msbtm::format_real(t) << "," << msbtm::format_real(rho(i)) << "\n";
      }
      return 0;
    }

    if (*validate_cmd) {
      std::cout << msbtm::to_ini(msbtm::parse_config(msbtm::read_text(config_path)));
      return 0;
    }

    if (*verify_cmd) {
      const auto problems = msbtm::verify_manifest(run_dir);
      for (const auto& p : problems) std::printf("%s\n", p.c_str());
      if (problems.empty()) std::printf("ok\n");
      return problems.empty() ? 0 : kExitRunFailed;
    }
  } catch (const msbtm::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return 0;
}
