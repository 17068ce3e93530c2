#pragma once

// Command-line front end: options, an optional key=value config file, the
// rank harness, image output and a key=value statistics report.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "octray/forest.hpp"
#include "octray/pipeline.hpp"
#include "octray/runtime.hpp"
#include "octray/scenes.hpp"

namespace octray::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kConfig = 3, kRender = 4 };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Camera settings given as text; empty fields keep the scene default.
struct CameraOptions {
  std::string eye, target, up;
  std::optional<double> fov, near, far;
};

/// Everything the command line and config file can set, as parsed.
struct RunConfig {
  std::string scene = "mandelbrot";
  std::string levels;  ///< "max", "min,max" or "min,max,cycles"
  std::string size = "256x256";
  int ranks = 1;
  int writers = 1;
  std::optional<std::uint64_t> seed;
  std::string scheme = "gauss2";
  double c_rk = 0.5;
  int coarsen = 0;
  std::uint64_t min_leaves = 1;
  bool skip_prepartition = false;
  std::string backend = "threads";
  std::string prefix = "octray";
  bool stats = false;
  int max_iter = 30;
  double s0 = 1e-4, s1 = 1e-2, epsilon = 0.2, density = 0.025, opacity = 1.5;
  std::array<CameraOptions, 2> cameras;
};

// ---------------------------------------------------------------------------
// value parsing

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline long long parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(what + ": not an integer: '" + s + "'");
}

inline double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(what + ": not a finite number: '" + s + "'");
}

inline std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find_first_of("xX");
  if (x == std::string::npos) throw ConfigError("size must look like WxH, got '" + s + "'");
  const auto w = parse_int(s.substr(0, x), "size"), h = parse_int(s.substr(x + 1), "size");
  if (w < 1 || h < 1 || w > 16384 || h > 16384) throw ConfigError("image size must be between 1 and 16384 per side");
  return {int(w), int(h)};
}

inline Vec3 parse_vec3(const std::string& s, const std::string& what) {
  const auto p = split(s, ',');
  if (p.size() != 3) throw ConfigError(what + ": expected x,y,z, got '" + s + "'");
  return {parse_double(p[0], what), parse_double(p[1], what), parse_double(p[2], what)};
}

/// Sets min, max and cycle count from "max", "min,max" or "min,max,cycles".
template <class Params>
void apply_levels(const std::string& s, Params& p, int* cycles) {
  if (s.empty()) return;
  const auto parts = split(s, ',');
  if (parts.empty() || parts.size() > 3) throw ConfigError("levels must be max, min,max or min,max,cycles");
  std::vector<int> v;
  for (const auto& x : parts) v.push_back(int(parse_int(x, "levels")));
  if (v.size() == 1) {
    p.max_level = v[0];
    p.min_level = std::min(p.min_level, v[0]);
  } else {
    p.min_level = v[0];
    p.max_level = v[1];
  }
  if (v.size() == 3) {
    if (!cycles) throw ConfigError("this scene takes no refinement cycle count");
    if (v[2] < 0) throw ConfigError("refinement cycles must be >= 0");
    *cycles = v[2];
  }
}

inline std::vector<ViewSpec> apply_cameras(std::vector<ViewSpec> views, const std::array<CameraOptions, 2>& opts) {
  for (std::size_t k = 0; k < opts.size(); ++k) {
    const auto& o = opts[k];
    const bool any = !o.eye.empty() || !o.target.empty() || !o.up.empty() || o.fov || o.near || o.far;
    if (!any) continue;
    const std::string name = "camera" + std::to_string(k);
    if (k >= views.size()) throw ConfigError(name + ": the scene has only " + std::to_string(views.size()) + " view(s)");
    auto& v = views[k];
    if (!o.eye.empty()) v.eye = parse_vec3(o.eye, name + "-eye");
    if (!o.target.empty()) v.target = parse_vec3(o.target, name + "-target");
    if (!o.up.empty()) v.up = parse_vec3(o.up, name + "-up");
    if (o.fov) v.fov_y = *o.fov;
    if (o.near) v.near = *o.near;
    if (o.far) v.far = *o.far;
    if (!(v.fov_y > 0 && v.fov_y < 3.1)) throw ConfigError(name + ": field of view must lie in (0, 3.1) radians");
    if (!(v.near > 0) || !(v.far > v.near)) throw ConfigError(name + ": need 0 < near < far");
    const Vec3 d = v.target - v.eye;
    if (!(norm(d) > 0) || !(norm(cross(d, v.up)) > 1e-12 * norm(d) * norm(v.up)))
      throw ConfigError(name + ": eye, target and up must not be degenerate");
  }
  return views;
}

// ---------------------------------------------------------------------------
// resolved run

struct Run {
  std::string scene;
  int ranks = 1;
  Backend backend = Backend::threads;
  std::uint64_t seed = 1;
  MandelbrotParams mandelbrot;
  SphereParams spheres;
  RenderConfig render;
  std::vector<ImageInstance> instances;
  bool stats = false;
};

/// Checks every setting; `env_seed` is the OCTRAY_SEED value, if set.
inline Run resolve(const RunConfig& rc, const char* env_seed) {
  Run r;
  r.scene = rc.scene;
  if (r.scene != "mandelbrot" && r.scene != "spheres")
    throw ConfigError("scene must be mandelbrot or spheres, got '" + rc.scene + "'");
  if (rc.ranks < 1 || rc.ranks > 1024) throw ConfigError("ranks must be between 1 and 1024");
  r.ranks = rc.ranks;
  if (rc.backend == "threads") {
    r.backend = Backend::threads;
  } else if (rc.backend == "roundrobin") {
    r.backend = Backend::roundrobin;
  } else {
    throw ConfigError("backend must be threads or roundrobin, got '" + rc.backend + "'");
  }
  if (rc.seed) {
    r.seed = *rc.seed;
  } else if (env_seed && *env_seed) {
    const auto v = parse_int(env_seed, "OCTRAY_SEED");
    if (v < 0) throw ConfigError("OCTRAY_SEED must be non-negative");
    r.seed = static_cast<std::uint64_t>(v);
  }
  const auto [w, h] = parse_size(rc.size);

  auto& cfg = r.render;
  const auto scheme = parse_scheme(rc.scheme);
  if (!scheme) throw ConfigError("unknown integrator scheme '" + rc.scheme + "'");
  cfg.integrator.scheme = *scheme;
  cfg.integrator.c_rk = rc.c_rk;
  cfg.coarsen_cycles = rc.coarsen;
  cfg.min_leaves_per_rank = rc.min_leaves;
  cfg.writers = rc.writers;
  cfg.skip_prepartition = rc.skip_prepartition;
  cfg.output_prefix = rc.prefix;
  if (rc.prefix.empty()) throw ConfigError("output prefix must not be empty");

  try {
    cfg.validate(r.ranks);
    if (r.scene == "mandelbrot") {
      auto& p = r.mandelbrot;
      p.max_iter = rc.max_iter;
      apply_levels(rc.levels, p, &p.cycles);
      p.validate();
      r.instances = mandelbrot_instances(w, h, apply_cameras(mandelbrot_views(), rc.cameras));
    } else {
      auto& p = r.spheres;
      p.s0 = rc.s0;
      p.s1 = rc.s1;
      p.epsilon = rc.epsilon;
      p.density = rc.density;
      p.opacity = rc.opacity;
      p.seed = r.seed;
      apply_levels(rc.levels, p, nullptr);
      p.validate();
      r.instances = sphere_instances(w, h, apply_cameras(sphere_views(), rc.cameras));
    }
    for (const auto& i : r.instances) i.camera.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  r.stats = rc.stats;
  return r;
}

// ---------------------------------------------------------------------------
// execution and report

inline const char* tag_name(Tag t) {
  switch (t) {
    case kTagTransfer: return "transfer";
    case kTagPrepartition: return "prepartition";
    case kTagCoarsen: return "coarsen";
    case kTagComposite: return "composite";
    case kTagSpheres: return "spheres";
  }
  return nullptr;
}

struct RunResult {
  std::vector<RenderStats> stats;       ///< per rank
  std::vector<double> build_seconds;    ///< per rank
  std::map<Tag, TagStats> messages;
  std::uint64_t spheres_generated = 0;
  int refinement_cycles = 0;
  std::vector<std::string> files;
};

inline RunResult execute(const Run& run) {
  RunResult res;
  const int P = run.ranks;
  res.stats.resize(static_cast<std::size_t>(P));
  res.build_seconds.resize(static_cast<std::size_t>(P));
  Harness harness(P, run.backend);
  harness.run([&](Comm& c) {
    const auto me = static_cast<std::size_t>(c.rank());
    const auto t0 = std::chrono::steady_clock::now();
    auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    if (run.scene == "mandelbrot") {
      const auto f = build_mandelbrot_forest(run.mandelbrot, c.rank(), P);
      res.build_seconds[me] = seconds();
      res.stats[me] = render(f, MandelbrotScene{run.mandelbrot}, run.instances, run.render, c).stats;
    } else {
      auto b = build_sphere_forest(run.spheres, c);
      res.build_seconds[me] = seconds();
      if (me == 0) {
        res.spheres_generated = b.generated;
        res.refinement_cycles = b.cycles;
      }
      res.stats[me] = render(b.forest, SphereScene{run.spheres}, run.instances, run.render, c).stats;
    }
  });
  res.messages = harness.tag_stats();
  for (const auto& i : run.instances) res.files.push_back(image_path(run.render.output_prefix, i.id));
  return res;
}

inline void report(const Run& run, const RunResult& res, std::ostream& out) {
  auto sum = [&](auto field) {
    std::uint64_t n = 0;
    for (const auto& s : res.stats) n += field(s);
    return n;
  };
  out << "scene=" << run.scene << '\n';
  out << "ranks=" << run.ranks << '\n';
  out << "writers=" << run.render.writers << '\n';
  out << "backend=" << (run.backend == Backend::threads ? "threads" : "roundrobin") << '\n';
  out << "images=" << run.instances.size() << '\n';
  for (std::size_t k = 0; k < res.files.size(); ++k) out << "file." << k << '=' << res.files[k] << '\n';
  if (run.scene == "spheres") {
    out << "seed=" << run.seed << '\n';
    out << "spheres.generated=" << res.spheres_generated << '\n';
    out << "refinement.cycles=" << res.refinement_cycles << '\n';
  }
  out << "leaves.total=" << sum([](const RenderStats& s) { return s.input_leaves; }) << '\n';
  out << "leaves.vforest=" << sum([](const RenderStats& s) { return s.vforest_leaves; }) << '\n';
  out << "leaves.visible=" << sum([](const RenderStats& s) { return s.visible_leaves; }) << '\n';
  const std::size_t stages = res.stats.empty() ? 0 : res.stats[0].segments.size();
  for (std::size_t k = 0; k < stages; ++k) {
    std::uint64_t n = 0;
    for (const auto& s : res.stats) n += s.segments[k];
    if (k == 0) {
      out << "segments.render=" << n << '\n';
    } else {
      out << "segments.coarsen." << k << '=' << n << '\n';
    }
  }
  out << "coarsen.cycles=" << (res.stats.empty() ? 0 : res.stats[0].coarsen_cycles_done) << '\n';
  out << "composite.sends=" << sum([](const RenderStats& s) { return s.sends; }) << '\n';
  out << "composite.receives=" << sum([](const RenderStats& s) { return s.receives; }) << '\n';
  out << "composite.bytes=" << sum([](const RenderStats& s) { return s.composite_bytes; }) << '\n';
  for (const auto& [tag, st] : res.messages) {
    const char* name = tag_name(tag);
    const std::string key = name ? name : "tag" + std::to_string(tag);
    out << "messages." << key << '=' << st.messages << '\n';
    out << "bytes." << key << '=' << st.bytes << '\n';
  }
  // slowest rank per phase
  out << std::setprecision(6);
  out << "time.build=" << *std::max_element(res.build_seconds.begin(), res.build_seconds.end()) << '\n';
  std::vector<std::pair<std::string, double>> phases;
  for (const auto& s : res.stats)
    for (std::size_t k = 0; k < s.phase_seconds.size(); ++k) {
      if (phases.size() <= k) phases.push_back({s.phase_seconds[k].first, 0.0});
      phases[k].second = std::max(phases[k].second, s.phase_seconds[k].second);
    }
  for (const auto& [name, t] : phases) out << "time." << name << '=' << t << '\n';
}

// ---------------------------------------------------------------------------
// entry point

inline void add_options(CLI::App& app, RunConfig& rc) {
  app.set_config("--config", "", "key=value file; command-line flags override it");
  app.add_option("--scene", rc.scene, "mandelbrot or spheres")->capture_default_str();
  app.add_option("--levels", rc.levels, "refinement levels: max, min,max or min,max,cycles");
  app.add_option("--size", rc.size, "image size WxH")->capture_default_str();
  app.add_option("--ranks", rc.ranks, "number of simulated ranks")->capture_default_str();
  app.add_option("--writers", rc.writers, "ranks that own image tiles")->capture_default_str();
  app.add_option("--seed", rc.seed, "random seed (falls back to OCTRAY_SEED, then 1)");
  app.add_option("--scheme", rc.scheme, "explicit_euler, heun2, heun3, rk4, gauss2 or simpson")->capture_default_str();
  app.add_option("--c-rk", rc.c_rk, "integrator step threshold")->capture_default_str();
  app.add_option("--coarsen", rc.coarsen, "coarsening cycles after rendering")->capture_default_str();
  app.add_option("--min-leaves", rc.min_leaves, "coarsening stops below this many leaves per rank")->capture_default_str();
  app.add_flag("--skip-prepartition", rc.skip_prepartition, "render on the input partition");
  app.add_option("--backend", rc.backend, "threads or roundrobin")->capture_default_str();
  app.add_option("--prefix", rc.prefix, "output files are PREFIX_<id>.ppm")->capture_default_str();
  app.add_flag("--stats", rc.stats, "print a key=value report");
  app.add_option("--max-iter", rc.max_iter, "mandelbrot iteration limit")->capture_default_str();
  app.add_option("--s0", rc.s0, "smallest sphere cross section")->capture_default_str();
  app.add_option("--s1", rc.s1, "largest sphere cross section")->capture_default_str();
  app.add_option("--epsilon", rc.epsilon, "sphere shell half width relative to the radius")->capture_default_str();
  app.add_option("--density", rc.density, "sphere cross section per unit face area")->capture_default_str();
  app.add_option("--opacity", rc.opacity, "optical depth of one shell crossing")->capture_default_str();
  for (std::size_t k = 0; k < rc.cameras.size(); ++k) {
    const std::string c = "--camera" + std::to_string(k);
    auto& o = rc.cameras[k];
    app.add_option(c + "-eye", o.eye, "x,y,z")->group("Cameras");
    app.add_option(c + "-target", o.target, "x,y,z")->group("Cameras");
    app.add_option(c + "-up", o.up, "x,y,z")->group("Cameras");
    app.add_option(c + "-fov", o.fov, "vertical field of view in radians")->group("Cameras");
    app.add_option(c + "-near", o.near, "image plane distance")->group("Cameras");
    app.add_option(c + "-far", o.far, "far clipping distance")->group("Cameras");
  }
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  CLI::App app{"Renders the mandelbrot or sphere scene with simulated distributed ranks.", "octray"};
  add_options(app, rc);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ConversionError& e) {
    err << "octray: invalid configuration: " << e.what() << '\n';
    return kConfig;
  } catch (const CLI::ValidationError& e) {
    err << "octray: invalid configuration: " << e.what() << '\n';
    return kConfig;
  } catch (const CLI::FileError& e) {
    err << "octray: invalid configuration: " << e.what() << '\n';
    return kConfig;
  } catch (const CLI::ParseError& e) {
    err << "octray: " << e.what() << "\nRun with --help for usage.\n";
    return kUsage;
  }

  Run run;
  try {
    run = resolve(rc, std::getenv("OCTRAY_SEED"));
  } catch (const ConfigError& e) {
    err << "octray: invalid configuration: " << e.what() << '\n';
    return kConfig;
  }

  try {
    const auto res = execute(run);
    if (run.stats) {
      report(run, res, out);
    } else {
      for (const auto& f : res.files) out << "wrote " << f << '\n';
    }
  } catch (const std::exception& e) {
    err << "octray: render failed: " << e.what() << '\n';
    return kRender;
  }
  return kOk;
}

}  // namespace octray::cli
