// s2attn: grids, maps, attention runs and verification reports.
//
// Exit codes: 0 pass, 2 usage or malformed input, 3 equivariance check
// failed, 4 gradient check failed, 5 data mismatch.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "s2attn/attention.hpp"
#include "s2attn/diagnostics.hpp"
#include "s2attn/grid.hpp"
#include "s2attn/harmonics.hpp"
#include "s2attn/io.hpp"
#include "s2attn/neighborhood.hpp"
#include "s2attn/oracles.hpp"
#include "s2attn/parallel.hpp"
#include "s2attn/rotation.hpp"

namespace {

using namespace s2attn;
using json = nlohmann::json;

enum Exit { kPass = 0, kUsage = 2, kEquivariance = 3, kGradcheck = 4, kMismatch = 5 };

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::string g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::vector<int> parse_sweep(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != tok.size() || v < 1) throw UsageError("bad sweep entry '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("empty sweep");
  return out;
}

double parse_cutoff(const std::string& s, int nlat) {
  if (s == "auto") return default_theta_cutoff(nlat);
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !(v > 0)) throw UsageError("cutoff must be 'auto' or a positive angle in radians");
  return v;
}

AttentionMode parse_mode(const std::string& s) {
  if (s == "global") return AttentionMode::Global;
  if (s == "local") return AttentionMode::Neighborhood;
  throw UsageError("mode must be 'global' or 'local'");
}

GridFamily parse_family(const std::string& s) {
  try {
    return parse_grid_family(s);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

SphericalGrid<double> make_grid(GridFamily family, int nlat, int nlon) {
  try {
    return build_grid<double>(family, nlat, nlon);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

/// "family:NLATxNLON"
GridShape parse_shape(const std::string& s) {
  const auto colon = s.find(':'), x = s.find('x', colon == std::string::npos ? 0 : colon);
  if (colon == std::string::npos || x == std::string::npos) throw UsageError("grid must look like gaussian:4x8");
  GridShape g;
  g.family = parse_family(s.substr(0, colon));
  try {
    g.nlat = std::stoi(s.substr(colon + 1, x - colon - 1));
    g.nlon = std::stoi(s.substr(x + 1));
  } catch (const std::exception&) {
    throw UsageError("grid must look like gaussian:4x8");
  }
  return g;
}

void emit(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
}

template <typename Rng>
Field<double> gaussian_field(const GridShape& g, int channels, Rng& rng) {
  std::normal_distribution<double> n01(0, 1);
  Field<double> f(g, 1, channels);
  for (Index j = 0; j < f.values.cols(); ++j)
    for (Index i = 0; i < f.values.rows(); ++i) f.values(i, j) = n01(rng);
  return f;
}

// ---------------------------------------------------------------- grid

struct GridOpts {
  std::string family = "equiangular", out;
  int nlat = 0, nlon = 0;
};

int cmd_grid(const GridOpts& o) {
  const auto g = make_grid(parse_family(o.family), o.nlat, o.nlon > 0 ? o.nlon : 2 * o.nlat);
  const double sum = g.total_weight(), four_pi = 4 * std::numbers::pi;
  json j;
  j["family"] = to_string(g.shape.family);
  j["nlat"] = g.nlat();
  j["nlon"] = g.nlon();
  j["colatitudes"] = std::vector<double>(g.colatitudes.data(), g.colatitudes.data() + g.colatitudes.size());
  j["longitudes"] = std::vector<double>(g.longitudes.data(), g.longitudes.data() + g.longitudes.size());
  j["weights"] = std::vector<double>(g.weights.data(), g.weights.data() + g.weights.size());
  j["weight_sum"] = sum;
  j["abs_deviation"] = std::abs(sum - four_pi);
  j["rel_deviation"] = std::abs(sum - four_pi) / four_pi;
  if (o.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    emit(j.dump(2) + "\n", o.out);
    std::cout << "weight_sum=" << g17(sum) << " abs_deviation=" << g17(std::abs(sum - four_pi))
              << " rel_deviation=" << g17(std::abs(sum - four_pi) / four_pi) << "\n";
  }
  return kPass;
}

// ---------------------------------------------------------------- equivariance

struct EquivarianceOpts {
  std::string sweep = "32,64,128", mode = "global", cutoff = "auto", family = "equiangular", kind = "random", out;
  int rotations = 8, channels = 4, heads = 1, lmax = -1;
  std::uint64_t seed = 0;
};

int cmd_equivariance(const EquivarianceOpts& o) {
  const auto sweep = parse_sweep(o.sweep);
  const auto mode = parse_mode(o.mode);
  const auto family = parse_family(o.family);
  if (o.rotations < 1 || o.channels < 1 || o.heads < 1 || o.channels % o.heads != 0)
    throw UsageError("rotations, channels and heads must be positive with heads dividing channels");
  if (o.kind != "random" && o.kind != "azimuthal" && o.kind != "identity")
    throw UsageError("kind must be random, azimuthal or identity");
  const int nlat_min = *std::min_element(sweep.begin(), sweep.end());
  const int lmax = o.lmax >= 0 ? o.lmax : std::max(1, nlat_min / 4);

  std::mt19937_64 rng(o.seed);
  const auto coeffs = SignalCoefficients<double>::random(o.channels, lmax, rng);
  std::vector<Rotation<double>> rots;
  std::uniform_int_distribution<int> step(1, std::max(1, 2 * nlat_min - 1));
  for (int r = 0; r < o.rotations; ++r) {
    if (o.kind == "random") rots.push_back(Rotation<double>::random(rng));
    else if (o.kind == "azimuthal") rots.push_back(Rotation<double>::about_z(2 * std::numbers::pi * step(rng) / (2 * nlat_min)));
    else rots.push_back(Rotation<double>::identity());
  }

  std::ostringstream csv;
  csv << "row,nlat,nlon,rotation,alpha,beta,gamma,rel_error\n";
  std::vector<double> means;
  double worst = 0;
  for (int nlat : sweep) {
    const auto g = make_grid(family, nlat, 2 * nlat);
    const double cutoff = parse_cutoff(o.cutoff, nlat);
    const auto err = equivariance_errors(g, mode, cutoff, coeffs, rots, o.heads);
    double mean = 0;
    for (std::size_t r = 0; r < err.size(); ++r) {
      const Eigen::Vector3d zyz = rots[r].matrix().eulerAngles(2, 1, 2);
      csv << "rotation," << nlat << "," << 2 * nlat << "," << r << "," << g17(zyz(0)) << "," << g17(zyz(1)) << ","
          << g17(zyz(2)) << "," << g17(err[r]) << "\n";
      mean += err[r];
      worst = std::max(worst, err[r]);
    }
    mean /= double(err.size());
    means.push_back(mean);
    csv << "mean," << nlat << "," << 2 * nlat << ",,,,," << g17(mean) << "\n";
  }
  bool ok;
  if (o.kind == "random") {
    ok = strictly_decreasing(means);
    csv << "monotone_decrease,,,,,,," << (ok ? 1 : 0) << "\n";
  } else {
    ok = worst <= 1e-12;
    csv << "exact_within_1e-12,,,,,,," << (ok ? 1 : 0) << "\n";
  }
  emit(csv.str(), o.out);
  return ok ? kPass : kEquivariance;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckOpts {
  std::string cutoff = "auto", family = "equiangular", out;
  int nlat = 6, nlon = 12, d = 3, e = 2, heads = 1, trials = 20;
  double step = 1e-5, tolerance = 1e-6;
  std::uint64_t seed = 0;
  bool zero_dy = false;
};

int cmd_gradcheck(const GradcheckOpts& o) {
  if (o.d < 1 || o.e < 1 || o.heads < 1 || o.trials < 1 || !(o.step > 0)) throw UsageError("bad gradcheck sizes");
  const auto g = make_grid(parse_family(o.family), o.nlat, o.nlon);
  const double cutoff = parse_cutoff(o.cutoff, o.nlat);
  const auto map = build_neighborhood(g, cutoff);
  const AttentionConfig cfg(o.heads, o.d);
  std::mt19937_64 rng(o.seed);

  json trials = json::array();
  double worst = 0, global_diff = 0;
  bool all_zero = true;
  for (int t = 0; t < o.trials; ++t) {
    const Field<double> q = gaussian_field(g.shape, o.heads * o.d, rng), k = gaussian_field(g.shape, o.heads * o.d, rng),
                        v = gaussian_field(g.shape, o.heads * o.e, rng);
    Field<double> dy = gaussian_field(g.shape, o.heads * o.e, rng);
    if (o.zero_dy) dy.values.setZero();
    const auto grads = neighborhood_attention_backward(q, k, v, dy, map, g, cfg);

    const auto loss = [&](const Field<double>& qq, const Field<double>& kk, const Field<double>& vv) {
      return dy.values.cwiseProduct(neighborhood_attention_forward(qq, kk, vv, map, g, cfg).values).sum();
    };
    const auto wrt = [&](const Field<double>& x, int which) {
      return oracles::finite_difference_grad(
          [&](const Eigen::MatrixXd& m) {
            Field<double> xx = x;
            xx.values = m;
            return which == 0 ? loss(xx, k, v) : which == 1 ? loss(q, xx, v) : loss(q, k, xx);
          },
          x.values, o.step);
    };
    const double eq = oracles::relative_error(grads.dq.values, wrt(q, 0));
    const double ek = oracles::relative_error(grads.dk.values, wrt(k, 1));
    const double ev = oracles::relative_error(grads.dv.values, wrt(v, 2));
    worst = std::max({worst, eq, ek, ev});
    all_zero = all_zero && grads.dq.values.isZero(0) && grads.dk.values.isZero(0) && grads.dv.values.isZero(0);
    trials.push_back({{"trial", t}, {"dq", eq}, {"dk", ek}, {"dv", ev}});
    if (cutoff >= std::numbers::pi) {
      const auto a = neighborhood_attention_forward(q, k, v, map, g, cfg);
      const auto b = s2_attention_forward(q, k, v, g, cfg);
      global_diff = std::max(global_diff, (a.values - b.values).cwiseAbs().maxCoeff());
    }
  }
  bool pass = worst <= o.tolerance;
  json j;
  j["command"] = "gradcheck";
  j["grid"] = describe(g.shape);
  j["d"] = o.d;
  j["e"] = o.e;
  j["heads"] = o.heads;
  j["cutoff"] = cutoff;
  j["step"] = o.step;
  j["tolerance"] = o.tolerance;
  j["trials"] = trials;
  j["max_rel_error"] = worst;
  j["gradients_all_zero"] = all_zero;
  if (cutoff >= std::numbers::pi) {
    j["global_max_abs_diff"] = global_diff;
    pass = pass && global_diff <= 1e-12;
  }
  j["pass"] = pass;
  emit(j.dump(2) + "\n", o.out);
  return pass ? kPass : kGradcheck;
}

// ---------------------------------------------------------------- bench

struct BenchOpts {
  std::string sweep = "32,48,64,96,128", cutoff = "auto", mode = "both", family = "equiangular", out;
  int repeat = 3, channels = 4;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchOpts& o) {
  const auto sweep = parse_sweep(o.sweep);
  const auto family = parse_family(o.family);
  if (o.repeat < 1 || o.channels < 1) throw UsageError("repeat and channels must be positive");
  if (o.mode != "both" && o.mode != "global" && o.mode != "local") throw UsageError("mode must be global, local or both");
  const bool local = o.mode != "global", global = o.mode != "local";
  const AttentionConfig cfg(1, o.channels);
  std::mt19937_64 rng(o.seed);

  std::ostringstream csv;
  csv << "row,mode,nlat,nlon,points,pairs,seconds\n";
  std::vector<double> n, t_local, t_global;
  for (int nlat : sweep) {
    const auto g = make_grid(family, nlat, 2 * nlat);
    const auto q = gaussian_field(g.shape, o.channels, rng), k = gaussian_field(g.shape, o.channels, rng),
               v = gaussian_field(g.shape, o.channels, rng);
    n.push_back(double(g.points()));
    if (local) {
      const auto map = build_neighborhood(g, parse_cutoff(o.cutoff, nlat));
      const double t = median_seconds([&] { neighborhood_attention_forward(q, k, v, map, g, cfg); }, o.repeat);
      t_local.push_back(t);
      csv << "time,local," << nlat << "," << 2 * nlat << "," << g.points() << "," << map.total_pairs() << "," << g17(t)
          << "\n";
    }
    if (global) {
      const double t = median_seconds([&] { s2_attention_forward(q, k, v, g, cfg); }, o.repeat);
      t_global.push_back(t);
      csv << "time,global," << nlat << "," << 2 * nlat << "," << g.points() << "," << g.points() * g.points() << ","
          << g17(t) << "\n";
    }
  }
  if (n.size() >= 2) {
    if (local) csv << "slope,local,,,,," << g17(loglog_slope(n, t_local)) << "\n";
    if (global) csv << "slope,global,,,,," << g17(loglog_slope(n, t_global)) << "\n";
  }
  emit(csv.str(), o.out);
  return kPass;
}

// ---------------------------------------------------------------- attn

struct AttnOpts {
  std::string q, k, v, grid, mode = "global", cutoff = "auto", map, out;
  int heads = 1;
};

int cmd_attn(const AttnOpts& o) {
  const auto mode = parse_mode(o.mode);
  const Field<double> q = io::load_field(o.q), k = io::load_field(o.k), v = io::load_field(o.v);
  const GridShape shape = o.grid.empty() ? q.grid : parse_shape(o.grid);
  require_same_grid(q, shape, "attn: q");
  require_same_grid(k, shape, "attn: k");
  require_same_grid(v, shape, "attn: v");
  const auto g = build_grid<double>(shape);
  if (o.heads < 1 || q.channels % o.heads != 0) throw UsageError("heads must divide the q channels");
  const AttentionConfig cfg(o.heads, q.channels / o.heads);
  Field<double> y;
  if (mode == AttentionMode::Global) {
    y = s2_attention_forward(q, k, v, g, cfg);
  } else {
    const NeighborhoodMap map = o.map.empty() ? build_neighborhood(g, parse_cutoff(o.cutoff, shape.nlat))
                                              : io::load_neighborhood(o.map);
    y = neighborhood_attention_forward(q, k, v, map, g, cfg);
  }
  io::save_field(o.out, y);
  return kPass;
}

// ---------------------------------------------------------------- embed, map

struct EmbedOpts {
  std::string family = "equiangular", out;
  int nlat = 0, nlon = 0, channels = 16;
  bool zonal = false;
};

int cmd_embed(const EmbedOpts& o) {
  const auto g = make_grid(parse_family(o.family), o.nlat, o.nlon > 0 ? o.nlon : 2 * o.nlat);
  if (o.channels < 1) throw UsageError("channels must be positive");
  io::save_field(o.out, spectral_position_embedding(g, o.channels, o.zonal));
  return kPass;
}

struct MapOpts {
  std::string family = "equiangular", cutoff = "auto", out;
  int nlat = 0, nlon = 0;
};

int cmd_map(const MapOpts& o) {
  const auto g = make_grid(parse_family(o.family), o.nlat, o.nlon > 0 ? o.nlon : 2 * o.nlat);
  const auto map = build_neighborhood(g, parse_cutoff(o.cutoff, o.nlat));
  io::save_neighborhood(o.out, map);
  std::cout << "theta_cutoff=" << g17(map.theta_cutoff) << " pairs=" << map.total_pairs()
            << " pairs_per_point=" << g17(double(map.total_pairs()) / double(g.points())) << "\n";
  return kPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention on the sphere: grids, maps, attention runs and verification reports"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);

  std::function<int()> action;

  GridOpts grid;
  auto* c = app.add_subcommand("grid", "describe a quadrature grid as JSON");
  c->add_option("--family", grid.family, "equiangular | gaussian");
  c->add_option("--nlat", grid.nlat)->required();
  c->add_option("--nlon", grid.nlon, "default 2*nlat");
  c->add_option("--out", grid.out);
  c->callback([&] { action = [&] { return cmd_grid(grid); }; });

  EquivarianceOpts eq;
  c = app.add_subcommand("equivariance", "rotation equivariance error over a resolution sweep (CSV)");
  c->add_option("--nlat-sweep", eq.sweep);
  c->add_option("--rotations", eq.rotations);
  c->add_option("--seed", eq.seed);
  c->add_option("--mode", eq.mode, "global | local");
  c->add_option("--cutoff", eq.cutoff, "auto | radians");
  c->add_option("--family", eq.family);
  c->add_option("--channels", eq.channels);
  c->add_option("--heads", eq.heads);
  c->add_option("--lmax", eq.lmax, "bandlimit of the inputs (default: smallest nlat / 4)");
  c->add_option("--kind", eq.kind, "random | azimuthal | identity");
  c->add_option("--out", eq.out);
  c->callback([&] { action = [&] { return cmd_equivariance(eq); }; });

  GradcheckOpts gc;
  c = app.add_subcommand("gradcheck", "neighborhood attention gradients against finite differences (JSON)");
  c->add_option("--nlat", gc.nlat);
  c->add_option("--nlon", gc.nlon);
  c->add_option("--d", gc.d, "query/key channels per head");
  c->add_option("--e", gc.e, "value channels per head");
  c->add_option("--heads", gc.heads);
  c->add_option("--cutoff", gc.cutoff, "auto | radians");
  c->add_option("--family", gc.family);
  c->add_option("--seed", gc.seed);
  c->add_option("--trials", gc.trials);
  c->add_option("--step", gc.step);
  c->add_option("--tolerance", gc.tolerance);
  c->add_flag("--zero-dy", gc.zero_dy, "use a zero upstream gradient");
  c->add_option("--out", gc.out);
  c->callback([&] { action = [&] { return cmd_gradcheck(gc); }; });

  BenchOpts bench;
  c = app.add_subcommand("bench", "attention timings over a resolution sweep (CSV)");
  c->add_option("--nlat-sweep", bench.sweep);
  c->add_option("--cutoff", bench.cutoff, "auto | radians");
  c->add_option("--repeat", bench.repeat);
  c->add_option("--mode", bench.mode, "global | local | both");
  c->add_option("--family", bench.family);
  c->add_option("--channels", bench.channels);
  c->add_option("--seed", bench.seed);
  c->add_option("--out", bench.out);
  c->callback([&] { action = [&] { return cmd_bench(bench); }; });

  AttnOpts attn;
  c = app.add_subcommand("attn", "run attention on SFLD inputs");
  c->add_option("--q", attn.q)->required();
  c->add_option("--k", attn.k)->required();
  c->add_option("--v", attn.v)->required();
  c->add_option("--grid", attn.grid, "expected grid, e.g. gaussian:4x8");
  c->add_option("--mode", attn.mode, "global | local");
  c->add_option("--cutoff", attn.cutoff, "auto | radians");
  c->add_option("--map", attn.map, "SNBR neighborhood file");
  c->add_option("--heads", attn.heads);
  c->add_option("--out", attn.out)->required();
  c->callback([&] { action = [&] { return cmd_attn(attn); }; });

  EmbedOpts embed;
  c = app.add_subcommand("embed", "write the spherical-harmonic position embedding as SFLD");
  c->add_option("--family", embed.family);
  c->add_option("--nlat", embed.nlat)->required();
  c->add_option("--nlon", embed.nlon);
  c->add_option("--channels", embed.channels);
  c->add_flag("--zonal", embed.zonal, "keep only order-zero harmonics");
  c->add_option("--out", embed.out)->required();
  c->callback([&] { action = [&] { return cmd_embed(embed); }; });

  MapOpts map;
  c = app.add_subcommand("map", "write a neighborhood map as SNBR");
  c->add_option("--family", map.family);
  c->add_option("--nlat", map.nlat)->required();
  c->add_option("--nlon", map.nlon);
  c->add_option("--cutoff", map.cutoff, "auto | radians");
  c->add_option("--out", map.out)->required();
  c->callback([&] { action = [&] { return cmd_map(map); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  set_num_threads(threads);
  try {
    return action();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const GridMismatch& e) {
    std::cerr << "mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const ShapeMismatch& e) {
    std::cerr << "mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}
