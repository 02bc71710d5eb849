#pragma once

// Experiment orchestration: runs the learned flow, the SDE and the
// noise-free ODE in lockstep from one shared initial draw, and writes
//
//   <out>/metrics.csv          one row per step k = 0..N_T
//   <out>/training.csv         iterations and gradient norm per step
//   <out>/config.ini           effective configuration
//   <out>/snapshots/*.csv      ensemble snapshots
//   <out>/store/               per-step networks and populations
//   <out>/manifest.json        seeds, wall time, status, file hashes

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msbtm/analytic_oracle.hpp"
#include "msbtm/config.hpp"
#include "msbtm/ensemble.hpp"
#include "msbtm/error.hpp"
#include "msbtm/integrators.hpp"
#include "msbtm/metrics.hpp"
#include "msbtm/mlp.hpp"
#include "msbtm/problems.hpp"
#include "msbtm/score_training.hpp"

namespace msbtm {

enum class Mode { msbtm, sde, noise_free, compare };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::msbtm: return "msbtm";
    case Mode::sde: return "sde";
    case Mode::noise_free: return "noise_free";
    case Mode::compare: return "compare";
  }
  return "?";
}

inline std::optional<Mode> parse_mode(const std::string& s) {
  if (s == "msbtm") return Mode::msbtm;
  if (s == "sde") return Mode::sde;
  if (s == "noise_free" || s == "noise-free" || s == "nf") return Mode::noise_free;
  if (s == "compare") return Mode::compare;
  return std::nullopt;
}

/// The configured initial density, a Gaussian over the full state.
inline GaussianState initial_state(const RunConfig& c) {
  if (c.kind == ProblemKind::harmonic) return harmonic_initial_state(c.harmonic, c.t0);
  const double var = c.swimmer.initial_std * c.swimmer.initial_std;
  return {Vec::Zero(2), var * Mat::Identity(2, 2), c.t0};
}

/// What an observer sees at step k; absent tracks are null.
struct StepView {
  long step = 0;
  double t = 0.0;
  const Ensemble* msbtm = nullptr;
  const ScoreNet* net = nullptr;
  const Ensemble* sde = nullptr;
  const Ensemble* noise_free = nullptr;
  const GaussianState* analytic = nullptr;
  const MetricsRecord* row = nullptr;
};

using StepObserver = std::function<void(const StepView&)>;

struct ExperimentResult {
  Mode mode = Mode::compare;
  bool ok = true;
  std::optional<long> failed_step;
  std::string error;
  std::vector<MetricsRecord> rows;
  std::vector<TrainRecord> training;
  double wall_seconds = 0.0;
};

// ---------------------------------------------------------------------------
// File helpers

inline std::string sha256_hex(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Ensemble snapshot: particle_id,c0..c{d-1}[,s0..s{k-1}].
inline void write_snapshot(const std::filesystem::path& path, const Ensemble& e, const Mat* scores = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "particle_id";
  for (Eigen::Index a = 0; a < e.dim(); ++a) os << ",c" << a;
  if (scores) {
    for (Eigen::Index a = 0; a < scores->rows(); ++a) os << ",s" << a;
  }
  os << "\n";
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    os << i;
    for (Eigen::Index a = 0; a < e.dim(); ++a) os << "," << format_real(e.states(a, i));
    if (scores) {
      for (Eigen::Index a = 0; a < scores->rows(); ++a) os << "," << format_real((*scores)(a, i));
    }
    os << "\n";
  }
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) text += to_csv_row(r) + "\n";
  write_text(path, text);
}

inline void write_training_csv(const std::filesystem::path& path, const std::vector<TrainRecord>& rows) {
  std::string text = "step,t,iterations,grad_norm,loss\n";
  for (const auto& r : rows) {
    text += std::to_string(r.step) + "," + format_real(r.t) + "," + std::to_string(r.iterations) + "," +
            format_real(r.grad_norm) + "," + format_real(r.loss) + "\n";
  }
  write_text(path, text);
}

// ---------------------------------------------------------------------------
// Checkpoint store on disk
//
// store/index.json      t0, dt, shapes, number of stored steps
// store/net_%06d.bin    network of step k (mlp checkpoint format)
// store/populations.bin "MSBTMPOP" | u32 version | u32 dim | u64 N | f64 data,
//                       one d x N column-major block per step

inline constexpr char kPopMagic[8] = {'M', 'S', 'B', 'T', 'M', 'P', 'O', 'P'};
inline constexpr std::uint32_t kPopFormatVersion = 1;

inline std::string net_file_name(long k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "net_%06ld.bin", k);
  return buf;
}

class StoreWriter {
 public:
  StoreWriter(const std::filesystem::path& dir, Eigen::Index dim, Eigen::Index n) : dir_(dir), dim_(dim), n_(n) {
    std::filesystem::create_directories(dir_);
    pop_.open(dir_ / "populations.bin", std::ios::binary | std::ios::trunc);
    if (!pop_) throw Error("cannot write " + (dir_ / "populations.bin").string());
    const auto d32 = static_cast<std::uint32_t>(dim);
    const auto n64 = static_cast<std::uint64_t>(n);
    pop_.write(kPopMagic, sizeof(kPopMagic));
    pop_.write(reinterpret_cast<const char*>(&kPopFormatVersion), sizeof(kPopFormatVersion));
    pop_.write(reinterpret_cast<const char*>(&d32), sizeof(d32));
    pop_.write(reinterpret_cast<const char*>(&n64), sizeof(n64));
  }

  void append(long k, const Mat& population, const ScoreNet& net) {
    if (population.rows() != dim_ || population.cols() != n_) throw DimensionError("StoreWriter: population shape");
    pop_.write(reinterpret_cast<const char*>(population.data()),
               static_cast<std::streamsize>(sizeof(double) * population.size()));
    save_net(dir_ / net_file_name(k), net);
    ++count_;
  }

  void finish(const RunConfig& c, int score_dim) {
    pop_.close();
    nlohmann::json j;
    j["format"] = 1;
    j["t0"] = c.t0;
    j["dt"] = c.dt;
    j["dim"] = dim_;
    j["score_dim"] = score_dim;
    j["n_particles"] = n_;
    j["steps_stored"] = count_;
    j["kappa"] = c.train.kappa;
    j["metrics_probes"] = c.train.metrics_probes;
    write_text(dir_ / "index.json", j.dump(2) + "\n");
  }

 private:
  std::filesystem::path dir_;
  Eigen::Index dim_;
  Eigen::Index n_;
  std::ofstream pop_;
  long count_ = 0;
};

/// Stored populations 0..count-1 (all of them when count < 0).
inline std::vector<Mat> read_populations(const std::filesystem::path& path, long count = -1) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  char magic[8];
  std::uint32_t version = 0, dim = 0;
  std::uint64_t n = 0;
  is.read(magic, sizeof(magic));
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  is.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  is.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!is || !std::equal(magic, magic + 8, kPopMagic)) throw Error(path.string() + ": not a population file");
  if (version != kPopFormatVersion) throw Error(path.string() + ": unsupported version " + std::to_string(version));
  std::vector<Mat> out;
  for (long k = 0; count < 0 || k < count; ++k) {
    Mat m(dim, static_cast<Eigen::Index>(n));
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (is.gcount() == 0 && is.eof()) break;
    if (!is) throw Error(path.string() + ": truncated population block " + std::to_string(k));
    out.push_back(std::move(m));
  }
  if (count >= 0 && static_cast<long>(out.size()) != count) {
    throw Error(path.string() + ": holds fewer than " + std::to_string(count) + " populations");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

inline std::vector<std::filesystem::path> artifact_files(const std::filesystem::path& out) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(out)) {
    if (!entry.is_regular_file()) continue;
    auto rel = std::filesystem::relative(entry.path(), out);
    if (rel == "manifest.json") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline void write_manifest(const std::filesystem::path& out, const RunConfig& c, const ExperimentResult& r) {
  nlohmann::json j;
  j["format"] = 1;
  j["mode"] = to_string(r.mode);
  j["problem"] = to_string(c.kind);
  j["status"] = r.ok ? "ok" : "failed";
  j["failed_step"] = r.failed_step ? nlohmann::json(*r.failed_step) : nlohmann::json(nullptr);
  j["error"] = r.error;
  j["wall_time_seconds"] = r.wall_seconds;
  j["seed"] = c.seed;
  j["rng"] = {{"generator", "philox4x32-10"},
              {"stream_tags",
               {{"initial_samples", streams::kInitialSamples},
                {"sde_noise", streams::kSdeNoise},
                {"training_probes", streams::kTrainingProbes},
                {"net_init", streams::kNetInit},
                {"density_probes", streams::kDensityProbes}}}};
  j["rows"] = r.rows.size();
  j["config"] = to_ini(c);
  auto files = nlohmann::json::array();
  for (const auto& rel : artifact_files(out)) {
    files.push_back({{"path", rel.generic_string()},
                     {"bytes", std::filesystem::file_size(out / rel)},
                     {"sha256", sha256_hex(out / rel)}});
  }
  j["files"] = files;
  write_text(out / "manifest.json", j.dump(2) + "\n");
}

/// Problems found when re-hashing the artifacts listed in a manifest; empty
/// when everything matches.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& out) {
  std::vector<std::string> problems;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(out / "manifest.json"));
  } catch (const std::exception& e) {
    return {std::string("unreadable manifest: ") + e.what()};
  }
  std::vector<std::string> listed;
  for (const auto& f : j.at("files")) {
    const std::string rel = f.at("path").get<std::string>();
    listed.push_back(rel);
    const auto path = out / rel;
    if (!std::filesystem::exists(path)) {
      problems.push_back("missing: " + rel);
    } else if (sha256_hex(path) != f.at("sha256").get<std::string>()) {
      problems.push_back("modified: " + rel);
    }
  }
  for (const auto& rel : artifact_files(out)) {
    if (std::find(listed.begin(), listed.end(), rel.generic_string()) == listed.end()) {
      problems.push_back("unlisted: " + rel.generic_string());
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------

namespace detail {

inline bool is_snapshot_step(const RunConfig& c, long k) {
  return k == 0 || k == c.n_steps || k % c.snapshot_every == 0;
}

inline std::string snapshot_name(const char* track, long k) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_step_%06ld.csv", track, k);
  return buf;
}

/// Removes the artifacts of an earlier run; refuses unrelated non-empty
/// directories.
inline void prepare_output(const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw Error(out.string() + " exists and is not a directory");
    const bool previous_run = fs::exists(out / "manifest.json") || fs::exists(out / "metrics.csv");
    if (!fs::is_empty(out) && !previous_run) {
      throw Error(out.string() + " is not empty and holds no earlier run; choose another --out");
    }
    for (const char* f : {"manifest.json", "metrics.csv", "training.csv", "config.ini"}) fs::remove(out / f);
    fs::remove_all(out / "snapshots");
    fs::remove_all(out / "store");
  }
  fs::create_directories(out / "snapshots");
}

}  // namespace detail

/// Runs one experiment and writes its artifacts under `out` (nothing is
/// written when `out` is empty). Training failures are reported in the
/// result and the manifest rather than thrown.
inline ExperimentResult run_experiment(const RunConfig& c, Mode mode, const std::filesystem::path& out,
                                       const StepObserver& observer = {}) {
  const auto started = std::chrono::steady_clock::now();
  const bool write = !out.empty();
  const bool harmonic = c.kind == ProblemKind::harmonic;
  const bool with_msbtm = mode == Mode::msbtm || mode == Mode::compare;
  const bool with_sde = mode == Mode::sde || mode == Mode::compare;
  const bool with_nf = mode == Mode::noise_free || mode == Mode::compare;

  const MeanFieldProblem p = make_problem(c);
  validate(p);
  const GaussianState g0 = initial_state(c);
  const Ensemble initial{c.t0, gaussian_samples(g0.mean, g0.cov, c.n_particles, c.seed, streams::kInitialSamples)};

  if (write) detail::prepare_output(out);
  std::optional<StoreWriter> store;
  if (write && with_msbtm) store.emplace(out / "store", p.dim, c.n_particles);

  ExperimentResult result;
  result.mode = mode;

  std::optional<Ensemble> sde;
  std::optional<Ensemble> nf;
  std::optional<GaussianState> analytic;
  std::vector<RngStream> sde_rngs;
  if (with_sde) {
    sde = initial;
    sde_rngs = sde_streams(c.seed, c.n_particles);
  }
  if (with_nf) nf = initial;
  if (harmonic) analytic = g0;

  auto time_of = [&](long k) { return c.t0 + static_cast<double>(k) * c.dt; };

  // Records metrics for step k, then advances the reference tracks to k + 1.
  auto visit = [&](long k, const Ensemble* learned, const ScoreNet* net) {
    MetricsRecord row;
    row.step = k;
    row.t = time_of(k);
    Mat scores;
    if (learned) {
      scores = net->forward_batch(learned->states);
      row.trace_msbtm = empirical_moments(*learned).cov.trace();
      row.ent_rate_num = numerical_entropy_rate(scores, p, *learned);
    }
    if (sde) row.trace_sde = empirical_moments(*sde).cov.trace();
    if (nf) row.trace_nf = empirical_moments(*nf).cov.trace();
    if (analytic) {
      row.trace_analytic = analytic->cov.trace();
      if (learned) {
        row.ent_rate_analytic = analytic_entropy_rate(*analytic, c.harmonic, c.n_particles);
        row.fisher_train = relative_fisher(scores, learned->states, *analytic);
        row.kl_rate_diag = kl_rate_diagnostic(
            scores, gaussian_score_targets(*analytic, learned->states, p.noisy_coords), c.kl_constant);
        if (sde) row.fisher_sde = relative_fisher(net->forward_batch(sde->states), sde->states, *analytic);
      }
    }
    if (learned && sde) row.tv = total_variation(learned->states, sde->states, c.grid);

    if (write) {
      if (store) store->append(k, learned->states, *net);
      if (detail::is_snapshot_step(c, k)) {
        const auto dir = out / "snapshots";
        if (learned) write_snapshot(dir / detail::snapshot_name("msbtm", k), *learned, &scores);
        if (sde) write_snapshot(dir / detail::snapshot_name("sde", k), *sde);
        if (nf) write_snapshot(dir / detail::snapshot_name("nf", k), *nf);
      }
    }
    result.rows.push_back(row);
    if (observer) {
      observer({k, row.t, learned, net, sde ? &*sde : nullptr, nf ? &*nf : nullptr,
                analytic ? &*analytic : nullptr, &result.rows.back()});
    }

    if (k < c.n_steps) {
      if (sde) {
        sde = em_step(p, *sde, c.dt, sde_rngs);
        sde->t = time_of(k + 1);
      }
      if (nf) {
        nf = noise_free_step(p, *nf, c.dt);
        nf->t = time_of(k + 1);
      }
      if (analytic) {
        analytic = moments_step(*analytic, c.harmonic, c.n_particles, c.dt);
        analytic->t = time_of(k + 1);
      }
    }
  };

  try {
    if (with_msbtm) {
      MsbtmRun run = run_msbtm(
          p, initial, g0, c.train, {c.dt, c.n_steps}, c.seed,
          [&](long k, const Ensemble& e, const ScoreNet& net, const TrainRecord& rec) {
            result.training.push_back(rec);
            visit(k, &e, &net);
          });
    } else {
      for (long k = 0; k <= c.n_steps; ++k) visit(k, nullptr, nullptr);
    }
  } catch (const TrainingError& e) {
    result.ok = false;
    result.failed_step = e.step();
    result.error = e.what();
  } catch (const NonFiniteError& e) {
    result.ok = false;
    result.failed_step = static_cast<long>(result.rows.size());
    result.error = e.what();
  }

  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (write) {
    if (store) store->finish(c, p.score_dim());
    write_metrics_csv(out / "metrics.csv", result.rows);
    if (with_msbtm) write_training_csv(out / "training.csv", result.training);
    write_text(out / "config.ini", to_ini(c));
    write_manifest(out, c, result);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Density queries against a stored run

/// Reads query points from CSV text: one point per line, comma-separated
/// coordinates; blank lines, '#' comments and a non-numeric header are
/// skipped.
inline Mat parse_points(const std::string& text, int dim) {
  std::vector<Vec> pts;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto values = detail::parse_list<double>(line);
    if (!values) {
      if (pts.empty() && line_no == 1) continue;  // header
      throw Error("points line " + std::to_string(line_no) + ": expected numbers, got '" + line + "'");
    }
    if (static_cast<int>(values->size()) != dim) {
      throw DimensionError("points line " + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                           " coordinates, got " + std::to_string(values->size()));
    }
    pts.push_back(Eigen::Map<const Vec>(values->data(), dim));
  }
  Mat out(dim, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = pts[i];
  return out;
}

/// ρ_t at each point column, using the networks and populations stored
/// under `run_dir`. Throws when t is not a stored time, listing the range.
inline Vec density_query(const std::filesystem::path& run_dir, const Mat& points, double t) {
  const RunConfig c = parse_config(read_text(run_dir / "config.ini"));
  const auto index = nlohmann::json::parse(read_text(run_dir / "store" / "index.json"));
  const long stored = index.at("steps_stored").get<long>();
  if (stored < 1) throw Error("store holds no steps");
  const MeanFieldProblem p = make_problem(c);
  if (points.rows() != p.dim) throw DimensionError("density_query: points must have " + std::to_string(p.dim) + " coordinates");

  const double k_real = std::round((t - c.t0) / c.dt);
  const auto k = static_cast<long>(k_real);
  if (k < 0 || k >= stored || std::abs(c.t0 + k_real * c.dt - t) > 1e-6 * c.dt) {
    std::ostringstream msg;
    msg << "t = " << format_real(t) << " is not a stored time; available times are t0 + k*dt for k = 0.."
        << stored - 1 << " with t0 = " << format_real(c.t0) << ", dt = " << format_real(c.dt) << " (last "
        << format_real(c.t0 + static_cast<double>(stored - 1) * c.dt) << ")";
    throw Error(msg.str());
  }

  FlowCheckpointStore store(c.t0, c.dt);
  auto pops = read_populations(run_dir / "store" / "populations.bin", k + 1);
  for (long j = 0; j <= k; ++j) {
    store.append(std::move(pops[static_cast<std::size_t>(j)]),
                 std::make_shared<NetScore>(load_net(run_dir / "store" / net_file_name(j)), c.train.kappa,
                                            c.train.metrics_probes));
  }
  const GaussianState g0 = initial_state(c);
  auto log_rho0 = [&](const Vec& y) { return gaussian_log_density(g0, y); };

  Vec out(points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    RngStream rng(c.seed, stream_id(streams::kDensityProbes, static_cast<std::uint64_t>(i)));
    out(i) = evaluate_density(store, p, points.col(i), c.t0 + k_real * c.dt, log_rho0, rng);
  }
  return out;
}

}  // namespace msbtm
