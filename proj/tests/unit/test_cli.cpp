#include <doctest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "s2attn/harmonics.hpp"
#include "s2attn/io.hpp"
#include "s2attn/oracles.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / ("s2attn_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string fixture(const char* name) { return std::string(S2ATTN_FIXTURES) + "/" + name; }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args) {
  const auto out = workdir() / "stdout.txt";
  const std::string cmd = std::string(S2ATTN_CLI) + " " + args + " > " + out.string() + " 2> " +
                          (workdir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(cells);
  }
  return rows;
}

std::string tmp(const char* name) { return (workdir() / name).string(); }

}  // namespace

TEST_CASE("grid reports the weight sum") {
  auto r = cli("grid --family gaussian --nlat 16 --nlon 32");
  REQUIRE(r.code == 0);
  auto j = json::parse(r.out);
  CHECK(j["abs_deviation"].get<double>() <= 1e-12);
  CHECK(j["weights"].size() == 16);

  r = cli("grid --family equiangular --nlat 128 --nlon 256 --out " + tmp("g.json"));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("rel_deviation=") != std::string::npos);
  j = json::parse(slurp(tmp("g.json")));
  CHECK(j["rel_deviation"].get<double>() < 1e-3);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(cli("grid --family equiangular --nlat 1").code == 2);
  CHECK(cli("grid --family healpix --nlat 8").code == 2);
  CHECK(cli("grid").code == 2);
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("equivariance --nlat-sweep 8,x").code == 2);
  CHECK(cli("equivariance --mode sideways").code == 2);
  CHECK(cli("gradcheck --cutoff -1").code == 2);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("equivariance report for exact symmetries") {
  for (const char* mode : {"global", "local"}) {
    auto r = cli(std::string("equivariance --nlat-sweep 8,16 --rotations 3 --kind azimuthal --mode ") + mode);
    REQUIRE(r.code == 0);
    const auto rows = csv_rows(r.out);
    CHECK(rows[0][0] == "row");
    int seen = 0;
    for (const auto& row : rows)
      if (row[0] == "rotation") {
        CHECK(std::stod(row[7]) <= 1e-12);
        ++seen;
      }
    CHECK(seen == 6);

    r = cli(std::string("equivariance --nlat-sweep 8,16 --rotations 2 --kind identity --mode ") + mode);
    REQUIRE(r.code == 0);
    for (const auto& row : csv_rows(r.out))
      if (row[0] == "rotation") CHECK(std::stod(row[7]) == 0.0);
  }
}

TEST_CASE("equivariance monotonicity verdict and exit code") {
  auto r = cli("equivariance --nlat-sweep 8,16,32 --rotations 8 --seed 3 --out " + tmp("eq.csv"));
  REQUIRE(r.code == 0);
  auto rows = csv_rows(slurp(tmp("eq.csv")));
  CHECK(rows.back()[0] == "monotone_decrease");
  CHECK(rows.back()[7] == "1");
  std::vector<double> means;
  for (const auto& row : rows)
    if (row[0] == "mean") means.push_back(std::stod(row[7]));
  REQUIRE(means.size() == 3);
  CHECK(means[1] < means[0]);
  CHECK(means[2] < means[1]);

  // a coarsening sweep cannot decrease; the report is still written
  r = cli("equivariance --nlat-sweep 32,8 --rotations 2 --lmax 2 --out " + tmp("eq2.csv"));
  CHECK(r.code == 3);
  rows = csv_rows(slurp(tmp("eq2.csv")));
  CHECK(rows.back()[7] == "0");
}

TEST_CASE("gradcheck verdicts") {
  auto r = cli("gradcheck --nlat 6 --nlon 12 --d 3 --e 2 --trials 20 --seed 1");
  REQUIRE(r.code == 0);
  auto j = json::parse(r.out);
  CHECK(j["pass"].get<bool>());
  CHECK(j["max_rel_error"].get<double>() <= 1e-6);
  CHECK(j["trials"].size() == 20);

  r = cli("gradcheck --cutoff 3.2 --trials 2");
  REQUIRE(r.code == 0);
  j = json::parse(r.out);
  CHECK(j["global_max_abs_diff"].get<double>() <= 1e-12);

  r = cli("gradcheck --zero-dy --trials 2");
  REQUIRE(r.code == 0);
  j = json::parse(r.out);
  CHECK(j["gradients_all_zero"].get<bool>());
  CHECK(j["max_rel_error"].get<double>() == 0.0);

  CHECK(cli("gradcheck --trials 1 --tolerance 1e-300").code == 4);
}

TEST_CASE("reports are reproducible across thread counts") {
  const auto a = cli("--threads 1 gradcheck --trials 3 --seed 9");
  const auto b = cli("--threads 2 gradcheck --trials 3 --seed 9");
  CHECK(a.code == 0);
  CHECK(a.out == b.out);
  const auto c = cli("--threads 1 equivariance --nlat-sweep 8,16 --rotations 2 --mode local");
  const auto d = cli("--threads 3 equivariance --nlat-sweep 8,16 --rotations 2 --mode local");
  CHECK(c.out == d.out);
}

TEST_CASE("bench writes timings and slopes") {
  const auto r = cli("bench --nlat-sweep 8,12,16 --repeat 1");
  REQUIRE(r.code == 0);
  const auto rows = csv_rows(r.out);
  int times = 0, slopes = 0;
  for (const auto& row : rows) {
    if (row[0] == "time") {
      CHECK(std::stod(row[6]) > 0);
      ++times;
    }
    if (row[0] == "slope") ++slopes;
  }
  CHECK(times == 6);
  CHECK(slopes == 2);
}

TEST_CASE("attn matches the dense oracle on the shipped fixture") {
  const std::string in = "--q " + fixture("gauss4x8_q.sfld") + " --k " + fixture("gauss4x8_k.sfld");
  REQUIRE(cli("attn " + in + " --v " + fixture("gauss4x8_v.sfld") + " --out " + tmp("y.sfld")).code == 0);
  const auto q = s2attn::io::load_field(fixture("gauss4x8_q.sfld"));
  const auto k = s2attn::io::load_field(fixture("gauss4x8_k.sfld"));
  const auto v = s2attn::io::load_field(fixture("gauss4x8_v.sfld"));
  const auto y = s2attn::io::load_field(tmp("y.sfld"));
  const auto g = s2attn::build_gaussian_grid<double>(4, 8);
  const auto ref = s2attn::oracles::dense_reference_attention(q.values, k.values, v.values, g.point_weights(),
                                                              1 / std::sqrt(2.0));
  CHECK((y.values - ref).cwiseAbs().maxCoeff() <= 1e-13);

  // neighborhood path through a map file
  REQUIRE(cli("map --family gaussian --nlat 4 --nlon 8 --cutoff 1.1 --out " + tmp("m.snbr")).code == 0);
  REQUIRE(cli("attn " + in + " --v " + fixture("gauss4x8_v.sfld") + " --mode local --map " + tmp("m.snbr") +
              " --out " + tmp("yl.sfld"))
              .code == 0);
  REQUIRE(cli("attn " + in + " --v " + fixture("gauss4x8_v.sfld") + " --mode local --cutoff 1.1 --out " +
              tmp("yl2.sfld"))
              .code == 0);
  CHECK(slurp(tmp("yl.sfld")) == slurp(tmp("yl2.sfld")));
  const auto yl = s2attn::io::load_field(tmp("yl.sfld"));
  const auto refl = s2attn::oracles::dense_reference_attention(
      q.values, k.values, v.values, g.point_weights(), 1 / std::sqrt(2.0),
      s2attn::oracles::disk_mask(s2attn::grid_coordinates(g), 1.1));
  CHECK((yl.values - refl).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("attn trivial cases") {
  const std::string in = "--q " + fixture("gauss4x8_q.sfld") + " --k " + fixture("gauss4x8_k.sfld");
  REQUIRE(cli("attn " + in + " --v " + fixture("gauss4x8_vconst.sfld") + " --out " + tmp("c.sfld")).code == 0);
  const auto c = s2attn::io::load_field(tmp("c.sfld"));
  CHECK((c.values.row(0).array() - 1.25).abs().maxCoeff() <= 1e-14);
  CHECK((c.values.row(2).array() - 3.0).abs().maxCoeff() <= 1e-14);

  REQUIRE(cli("attn " + in + " --v " + fixture("gauss4x8_v.sfld") + " --mode local --cutoff 1e-9 --out " +
              tmp("self.sfld"))
              .code == 0);
  CHECK(slurp(tmp("self.sfld")) == slurp(fixture("gauss4x8_v.sfld")));
}

TEST_CASE("attn input errors") {
  const std::string v = " --v " + fixture("gauss4x8_v.sfld") + " --out " + tmp("e.sfld");
  CHECK(cli("attn --q " + fixture("gauss4x8_q.sfld") + " --k " + fixture("equi4x8_k.sfld") + v).code == 5);
  CHECK(cli("attn --q " + fixture("gauss4x8_q.sfld") + " --k " + fixture("gauss4x8_k.sfld") + v +
            " --grid gaussian:4x16")
            .code == 5);
  CHECK(cli("attn --q " + fixture("truncated.sfld") + " --k " + fixture("gauss4x8_k.sfld") + v).code == 2);
  CHECK(cli("attn --q " + fixture("missing.sfld") + " --k " + fixture("gauss4x8_k.sfld") + v).code == 2);
  CHECK(cli("attn --q " + fixture("gauss4x8_q.sfld") + " --k " + fixture("gauss4x8_v.sfld") + v).code == 5);
  REQUIRE(cli("map --family equiangular --nlat 4 --nlon 8 --out " + tmp("em.snbr")).code == 0);
  CHECK(cli("attn --q " + fixture("gauss4x8_q.sfld") + " --k " + fixture("gauss4x8_k.sfld") + v +
            " --mode local --map " + tmp("em.snbr"))
            .code == 5);
}

TEST_CASE("embedding export") {
  REQUIRE(cli("embed --family gaussian --nlat 6 --channels 9 --out " + tmp("pe.sfld")).code == 0);
  const auto e = s2attn::io::load_field(tmp("pe.sfld"));
  CHECK(e.channels == 9);
  CHECK(e.grid.nlon == 12);
}
