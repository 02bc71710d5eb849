#pragma once

// Run configuration: an INI-style file with sections.
//
//   [problem]     kind = harmonic | swimmer, plus that problem's parameters
//   [simulation]  N, dt, steps, seed (required); t0, snapshot_every
//   [train]       optional overrides of the training defaults
//   [grid]        optional histogram grid for total variation
//   [metrics]     kl_constant
//   [output]      dir
//
// Unknown sections or keys are rejected. See configs/*.ini for annotated
// examples.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msbtm/error.hpp"
#include "msbtm/metrics.hpp"
#include "msbtm/problems.hpp"
#include "msbtm/score_training.hpp"

namespace msbtm {

enum class ProblemKind { harmonic, swimmer };

inline const char* to_string(ProblemKind k) { return k == ProblemKind::harmonic ? "harmonic" : "swimmer"; }

struct RunConfig {
  ProblemKind kind = ProblemKind::harmonic;
  HarmonicParams harmonic;
  SwimmerParams swimmer;

  long n_particles = 300;
  double dt = 5e-4;
  long n_steps = 2000;
  std::uint64_t seed = 0;
  double t0 = 0.0;
  long snapshot_every = 200;

  TrainConfig train;
  GridSpec grid = GridSpec::square();
  double kl_constant = 1.0;
  std::string output_dir = "out";
};

/// Training defaults for each problem.
inline TrainConfig default_train_config(ProblemKind kind) {
  TrainConfig t;
  if (kind == ProblemKind::harmonic) {
    t.hidden = {32, 32};
    t.gtol = {{2000, 0.3}, {9000, 0.35}, {kOpenEnded, 0.4}};
    t.max_grad_steps = 5;
  } else {
    t.hidden = {32, 32, 32};
    t.gtol = {{kOpenEnded, 1.0}};
    t.max_grad_steps = 3;
  }
  return t;
}

inline MeanFieldProblem make_problem(const RunConfig& c) {
  return c.kind == ProblemKind::harmonic ? harmonic_problem(c.harmonic) : swimmer_problem(c.swimmer);
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <class T>
std::optional<T> parse_number(const std::string& text) {
  const std::string s = trim(text);
  if (s.empty()) return std::nullopt;
  T value{};
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return value;
}

/// Collects violations while reading typed values out of a property tree.
class Reader {
 public:
  explicit Reader(const boost::property_tree::ptree& root) : root_(root) {}

  std::vector<std::string>& errors() { return errors_; }

  void check_known(const std::map<std::string, std::set<std::string>>& schema) {
    for (const auto& [section, tree] : root_) {
      auto it = schema.find(section);
      if (it == schema.end()) {
        errors_.push_back("unknown section [" + section + "]");
        continue;
      }
      if (tree.empty() && !tree.data().empty()) {
        errors_.push_back("key '" + section + "' must appear inside a section");
        continue;
      }
      for (const auto& [key, value] : tree) {
        if (!it->second.count(key)) errors_.push_back("unknown key " + section + "." + key);
      }
    }
  }

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    auto sec = root_.get_child_optional(section);
    if (!sec) return std::nullopt;
    auto v = sec->get_optional<std::string>(key);
    if (!v) return std::nullopt;
    return trim(*v);
  }

  template <class T>
  void required(const std::string& section, const std::string& key, T& out) {
    auto v = raw(section, key);
    if (!v) {
      errors_.push_back("missing key " + section + "." + key);
      return;
    }
    assign(section, key, *v, out);
  }

  template <class T>
  void optional(const std::string& section, const std::string& key, T& out) {
    if (auto v = raw(section, key)) assign(section, key, *v, out);
  }

 private:
  template <class T>
  void assign(const std::string& section, const std::string& key, const std::string& v, T& out) {
    if (auto parsed = parse_number<T>(v)) {
      out = *parsed;
    } else {
      errors_.push_back("invalid value for " + section + "." + key + ": '" + v + "'");
    }
  }

  const boost::property_tree::ptree& root_;
  std::vector<std::string> errors_;
};

inline std::optional<std::vector<GtolStage>> parse_gtol(const std::string& text) {
  std::vector<GtolStage> out;
  for (const auto& item : split_list(text)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) return std::nullopt;
    const std::string bound = trim(item.substr(0, colon));
    auto threshold = parse_number<double>(item.substr(colon + 1));
    if (!threshold) return std::nullopt;
    long last = kOpenEnded;
    if (bound != "inf") {
      auto b = parse_number<long>(bound);
      if (!b) return std::nullopt;
      last = *b;
    }
    out.push_back({last, *threshold});
  }
  return out;
}

template <class T>
std::optional<std::vector<T>> parse_list(const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) {
    auto v = parse_number<T>(item);
    if (!v) return std::nullopt;
    out.push_back(*v);
  }
  if (out.empty()) return std::nullopt;
  return out;
}

inline std::string format_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::string format_vec(const Vec& v) {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_real(v(i));
  return out;
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  // Inline comments are allowed after values.
  std::string stripped;
  {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      stripped += line.substr(0, line.find_first_of(";#")) + "\n";
    }
  }
  pt::ptree root;
  try {
    std::istringstream is(stripped);
    pt::read_ini(is, root);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError({"line " + std::to_string(e.line()) + ": " + e.message()});
  }

  detail::Reader r(root);
  RunConfig c;

  std::string kind_text;
  if (auto k = r.raw("problem", "kind")) kind_text = *k;
  std::set<std::string> problem_keys = {"kind"};
  if (kind_text == "harmonic") {
    c.kind = ProblemKind::harmonic;
    problem_keys.insert({"a", "omega", "alpha", "D", "sigma0_sq"});
  } else if (kind_text == "swimmer") {
    c.kind = ProblemKind::swimmer;
    problem_keys.insert({"gamma", "alpha", "D", "sigma0"});
  } else if (kind_text.empty()) {
    r.errors().push_back("missing key problem.kind");
  } else {
    r.errors().push_back("problem.kind must be 'harmonic' or 'swimmer', got '" + kind_text + "'");
  }

  r.check_known({{"problem", problem_keys},
                 {"simulation", {"N", "dt", "steps", "seed", "t0", "snapshot_every"}},
                 {"train",
                  {"kappa", "probes", "gtol", "max_iters", "max_grad_steps", "learning_rate", "tol_init",
                   "init_learning_rate", "init_max_iters", "hidden", "metrics_probes"}},
                 {"grid", {"lower", "upper", "cells"}},
                 {"metrics", {"kl_constant"}},
                 {"output", {"dir"}}});

  if (kind_text == "harmonic") {
    r.required("problem", "a", c.harmonic.trap_radius);
    r.required("problem", "omega", c.harmonic.trap_frequency);
    r.required("problem", "alpha", c.harmonic.repulsion);
    r.required("problem", "D", c.harmonic.diffusion);
    r.required("problem", "sigma0_sq", c.harmonic.initial_variance);
  } else if (kind_text == "swimmer") {
    r.required("problem", "gamma", c.swimmer.damping);
    r.required("problem", "alpha", c.swimmer.interaction);
    r.required("problem", "D", c.swimmer.diffusion);
    r.required("problem", "sigma0", c.swimmer.initial_std);
  }

  r.required("simulation", "N", c.n_particles);
  r.required("simulation", "dt", c.dt);
  r.required("simulation", "steps", c.n_steps);
  r.required("simulation", "seed", c.seed);
  r.optional("simulation", "t0", c.t0);
  r.optional("simulation", "snapshot_every", c.snapshot_every);

  c.train = default_train_config(c.kind);
  r.optional("train", "kappa", c.train.kappa);
  r.optional("train", "probes", c.train.probes);
  r.optional("train", "max_iters", c.train.max_iters);
  r.optional("train", "max_grad_steps", c.train.max_grad_steps);
  r.optional("train", "learning_rate", c.train.learning_rate);
  r.optional("train", "tol_init", c.train.tol_init);
  r.optional("train", "init_learning_rate", c.train.init_learning_rate);
  r.optional("train", "init_max_iters", c.train.init_max_iters);
  r.optional("train", "metrics_probes", c.train.metrics_probes);
  if (auto g = r.raw("train", "gtol")) {
    if (auto stages = detail::parse_gtol(*g)) {
      c.train.gtol = *stages;
    } else {
      r.errors().push_back("invalid value for train.gtol: '" + *g +
                           "' (expected e.g. 2000:0.3, 9000:0.35, inf:0.4)");
    }
  }
  if (auto h = r.raw("train", "hidden")) {
    if (auto widths = detail::parse_list<int>(*h)) {
      c.train.hidden = *widths;
    } else {
      r.errors().push_back("invalid value for train.hidden: '" + *h + "'");
    }
  }

  auto read_vec = [&](const char* key, Vec& out) {
    if (auto v = r.raw("grid", key)) {
      if (auto xs = detail::parse_list<double>(*v)) {
        out = Eigen::Map<const Vec>(xs->data(), static_cast<Eigen::Index>(xs->size()));
      } else {
        r.errors().push_back(std::string("invalid value for grid.") + key + ": '" + *v + "'");
      }
    }
  };
  read_vec("lower", c.grid.lower);
  read_vec("upper", c.grid.upper);
  if (auto v = r.raw("grid", "cells")) {
    if (auto cells = detail::parse_list<int>(*v)) {
      c.grid.cells = *cells;
    } else {
      r.errors().push_back("invalid value for grid.cells: '" + *v + "'");
    }
  }
  r.optional("metrics", "kl_constant", c.kl_constant);
  if (auto d = r.raw("output", "dir")) c.output_dir = *d;

  // Invariants.
  auto& errs = r.errors();
  if (c.n_particles < 2) errs.push_back("simulation.N must be >= 2");
  if (!(c.dt > 0.0)) errs.push_back("simulation.dt must be > 0");
  if (c.n_steps < 0) errs.push_back("simulation.steps must be >= 0");
  if (c.snapshot_every < 1) errs.push_back("simulation.snapshot_every must be >= 1");
  if (!std::isfinite(c.t0)) errs.push_back("simulation.t0 must be finite");
  if (!std::isfinite(c.kl_constant) || c.kl_constant < 0.0) errs.push_back("metrics.kl_constant must be >= 0");
  if (c.output_dir.empty()) errs.push_back("output.dir must not be empty");
  for (auto& v : violations(c.train)) errs.push_back(std::move(v));
  for (auto& v : violations(c.grid)) errs.push_back(std::move(v));
  if (c.grid.lower.size() != 2) errs.push_back("grid must be two-dimensional");
  if (kind_text == "harmonic") {
    const auto& h = c.harmonic;
    if (!(h.repulsion > 0.0 && h.repulsion < 1.0)) errs.push_back("problem.alpha must lie in (0, 1)");
    if (!(h.diffusion > 0.0)) errs.push_back("problem.D must be > 0");
    if (!(h.initial_variance > 0.0)) errs.push_back("problem.sigma0_sq must be > 0");
  } else if (kind_text == "swimmer") {
    const auto& s = c.swimmer;
    if (!(s.damping > 0.0)) errs.push_back("problem.gamma must be > 0");
    if (!(s.diffusion > 0.0)) errs.push_back("problem.D must be > 0");
    if (!(s.initial_std > 0.0)) errs.push_back("problem.sigma0 must be > 0");
  }

  if (!errs.empty()) throw ConfigError(std::move(errs));
  return c;
}

/// Canonical INI text; parse_config(to_ini(c)) reproduces c.
inline std::string to_ini(const RunConfig& c) {
  using detail::format_list;
  using detail::format_vec;
  std::ostringstream os;
  os << "[problem]\nkind = " << to_string(c.kind) << "\n";
  if (c.kind == ProblemKind::harmonic) {
    os << "a = " << format_real(c.harmonic.trap_radius) << "\n"
       << "omega = " << format_real(c.harmonic.trap_frequency) << "\n"
       << "alpha = " << format_real(c.harmonic.repulsion) << "\n"
       << "D = " << format_real(c.harmonic.diffusion) << "\n"
       << "sigma0_sq = " << format_real(c.harmonic.initial_variance) << "\n";
  } else {
    os << "gamma = " << format_real(c.swimmer.damping) << "\n"
       << "alpha = " << format_real(c.swimmer.interaction) << "\n"
       << "D = " << format_real(c.swimmer.diffusion) << "\n"
       << "sigma0 = " << format_real(c.swimmer.initial_std) << "\n";
  }
  os << "\n[simulation]\n"
     << "N = " << c.n_particles << "\n"
     << "dt = " << format_real(c.dt) << "\n"
     << "steps = " << c.n_steps << "\n"
     << "seed = " << c.seed << "\n"
     << "t0 = " << format_real(c.t0) << "\n"
     << "snapshot_every = " << c.snapshot_every << "\n";
  os << "\n[train]\n"
     << "kappa = " << format_real(c.train.kappa) << "\n"
     << "probes = " << c.train.probes << "\n"
     << "gtol = ";
  for (std::size_t i = 0; i < c.train.gtol.size(); ++i) {
    const auto& s = c.train.gtol[i];
    os << (i ? ", " : "") << (s.last_step == kOpenEnded ? std::string("inf") : std::to_string(s.last_step))
       << ":" << format_real(s.threshold);
  }
  os << "\n"
     << "max_iters = " << c.train.max_iters << "\n"
     << "max_grad_steps = " << c.train.max_grad_steps << "\n"
     << "learning_rate = " << format_real(c.train.learning_rate) << "\n"
     << "tol_init = " << format_real(c.train.tol_init) << "\n"
     << "init_learning_rate = " << format_real(c.train.init_learning_rate) << "\n"
     << "init_max_iters = " << c.train.init_max_iters << "\n"
     << "hidden = " << format_list(c.train.hidden) << "\n"
     << "metrics_probes = " << c.train.metrics_probes << "\n";
  os << "\n[grid]\n"
     << "lower = " << format_vec(c.grid.lower) << "\n"
     << "upper = " << format_vec(c.grid.upper) << "\n"
     << "cells = " << format_list(c.grid.cells) << "\n";
  os << "\n[metrics]\nkl_constant = " << format_real(c.kl_constant) << "\n";
  os << "\n[output]\ndir = " << c.output_dir << "\n";
  return os.str();
}

}  // namespace msbtm
