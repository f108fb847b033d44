#include "s2attn/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace s2attn::io {

using nlohmann::json;

namespace {

void write_header(std::ostream& out, const json& header) {
  out << header.dump() << '\n';
}

json read_header(std::istream& in, const char* magic) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(std::string(magic) + ": missing header line");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string(magic) + ": malformed header: " + e.what());
  }
  if (!header.is_object() || header.value("magic", std::string()) != magic)
    throw FormatError(std::string("not a ") + magic + " file");
  if (header.value("version", 0) != 1) throw FormatError(std::string(magic) + ": unsupported version");
  return header;
}

template <typename T>
void write_raw(std::ostream& out, const T* data, std::size_t count) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
}

template <typename T>
void read_raw(std::istream& in, T* data, std::size_t count, const char* magic) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(T)) throw FormatError(std::string(magic) + ": truncated payload");
}

void require_eof(std::istream& in, const char* magic) {
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(std::string(magic) + ": trailing bytes after payload");
}

template <typename T>
T field_of(const json& j, const char* key, const char* magic) {
  if (!j.contains(key)) throw FormatError(std::string(magic) + ": header lacks '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string(magic) + ": bad '" + key + "': " + e.what());
  }
}

GridFamily family_of(const std::string& name, const char* magic) {
  try {
    return parse_grid_family(name);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string(magic) + ": " + e.what());
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return f;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

}  // namespace

void write_field(std::ostream& out, const Field<double>& field) {
  const GridShape& g = field.grid;
  write_header(out, {{"magic", "SFLD"},
                     {"version", 1},
                     {"shape", {field.batch, field.channels, g.nlat, g.nlon}},
                     {"dtype", "f64"},
                     {"grid", {{"family", to_string(g.family)}, {"nlat", g.nlat}, {"nlon", g.nlon}}}});
  std::vector<double> row(static_cast<std::size_t>(field.points()));
  for (int b = 0; b < field.batch; ++b)
    for (int c = 0; c < field.channels; ++c) {
      const auto src = field.batch_block(b).row(c);
      for (Index p = 0; p < field.points(); ++p) row[p] = src(p);
      write_raw(out, row.data(), row.size());
    }
  if (!out) throw std::runtime_error("SFLD: write failed");
}

Field<double> read_field(std::istream& in) {
  const json h = read_header(in, "SFLD");
  if (field_of<std::string>(h, "dtype", "SFLD") != "f64") throw FormatError("SFLD: only dtype f64 is supported");
  const auto shape = field_of<std::vector<long long>>(h, "shape", "SFLD");
  if (shape.size() != 4) throw FormatError("SFLD: shape must have four entries");
  const json grid = field_of<json>(h, "grid", "SFLD");
  GridShape g{family_of(field_of<std::string>(grid, "family", "SFLD"), "SFLD"), field_of<int>(grid, "nlat", "SFLD"),
              field_of<int>(grid, "nlon", "SFLD")};
  if (shape[0] < 1 || shape[1] < 1 || shape[2] != g.nlat || shape[3] != g.nlon || g.nlat < 1 || g.nlon < 1)
    throw FormatError("SFLD: shape inconsistent with grid");
  Field<double> field(g, static_cast<int>(shape[0]), static_cast<int>(shape[1]));
  std::vector<double> row(static_cast<std::size_t>(field.points()));
  for (int b = 0; b < field.batch; ++b)
    for (int c = 0; c < field.channels; ++c) {
      read_raw(in, row.data(), row.size(), "SFLD");
      auto dst = field.batch_block(b).row(c);
      for (Index p = 0; p < field.points(); ++p) dst(p) = row[p];
    }
  require_eof(in, "SFLD");
  return field;
}

void save_field(const std::filesystem::path& path, const Field<double>& field) {
  auto f = open_out(path);
  write_field(f, field);
}

Field<double> load_field(const std::filesystem::path& path) {
  auto f = open_in(path);
  return read_field(f);
}

void write_neighborhood(std::ostream& out, const NeighborhoodMap& map) {
  std::vector<long long> counts(map.grid.nlat);
  for (int h = 0; h < map.grid.nlat; ++h) counts[h] = map.neighbor_count(h);
  write_header(out, {{"magic", "SNBR"},
                     {"version", 1},
                     {"nlat", map.grid.nlat},
                     {"nlon", map.grid.nlon},
                     {"theta_cutoff", map.theta_cutoff},
                     {"counts", counts},
                     {"family", to_string(map.grid.family)}});
  std::vector<std::int32_t> pairs;
  pairs.reserve(map.entries.size() * 2);
  for (const auto& e : map.entries) {
    pairs.push_back(e.lat);
    pairs.push_back(e.lon_offset);
  }
  write_raw(out, pairs.data(), pairs.size());
  if (!out) throw std::runtime_error("SNBR: write failed");
}

NeighborhoodMap read_neighborhood(std::istream& in) {
  const json h = read_header(in, "SNBR");
  GridShape g;
  g.nlat = field_of<int>(h, "nlat", "SNBR");
  g.nlon = field_of<int>(h, "nlon", "SNBR");
  g.family = h.contains("family") ? family_of(field_of<std::string>(h, "family", "SNBR"), "SNBR") : GridFamily::Equiangular;
  const double cutoff = field_of<double>(h, "theta_cutoff", "SNBR");
  const auto counts = field_of<std::vector<long long>>(h, "counts", "SNBR");
  if (g.nlat < 1 || g.nlon < 1 || static_cast<int>(counts.size()) != g.nlat)
    throw FormatError("SNBR: counts do not match nlat");
  std::vector<std::vector<NeighborEntry>> rows(g.nlat);
  std::vector<std::int32_t> pairs;
  for (int r = 0; r < g.nlat; ++r) {
    if (counts[r] < 0 || counts[r] > static_cast<long long>(g.points())) throw FormatError("SNBR: bad row count");
    pairs.resize(static_cast<std::size_t>(counts[r]) * 2);
    read_raw(in, pairs.data(), pairs.size(), "SNBR");
    rows[r].reserve(counts[r]);
    for (std::size_t n = 0; n < pairs.size(); n += 2) rows[r].push_back({pairs[n], pairs[n + 1]});
  }
  require_eof(in, "SNBR");
  try {
    return NeighborhoodMap::from_rows(g, cutoff, rows);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("SNBR: ") + e.what());
  }
}

void save_neighborhood(const std::filesystem::path& path, const NeighborhoodMap& map) {
  auto f = open_out(path);
  write_neighborhood(f, map);
}

NeighborhoodMap load_neighborhood(const std::filesystem::path& path) {
  auto f = open_in(path);
  return read_neighborhood(f);
}

namespace {

template <typename M, typename V>
struct TensorSlot {
  const char* name;
  M* matrix;
  V* vector;
};

// Serialization order of the block tensors.
template <typename Params>
auto tensor_slots(Params& p) {
  using Slot = TensorSlot<std::remove_reference_t<decltype((p.wq))>, std::remove_reference_t<decltype((p.b1))>>;
  return std::vector<Slot>{{"wq", &p.wq, nullptr}, {"wk", &p.wk, nullptr}, {"wv", &p.wv, nullptr}, {"wo", &p.wo, nullptr},
          {"w1", &p.w1, nullptr}, {"b1", nullptr, &p.b1}, {"w2", &p.w2, nullptr}, {"b2", nullptr, &p.b2}};
}

}  // namespace

void write_params(std::ostream& out, const BlockParams<double>& params) {
  params.validate();
  const auto slots = tensor_slots(params);
  json tensors = json::array();
  for (const auto& s : slots) {
    const json shape = s.matrix ? json::array({s.matrix->rows(), s.matrix->cols()}) : json::array({s.vector->size()});
    tensors.push_back(json{{"name", s.name}, {"shape", shape}});
  }
  write_header(out, {{"magic", "SPRM"},
                     {"version", 1},
                     {"embed", params.embed},
                     {"heads", params.heads},
                     {"hidden", params.hidden()},
                     {"epsilon", params.epsilon},
                     {"mode", params.mode == AttentionMode::Global ? "global" : "neighborhood"},
                     {"theta_cutoff", params.theta_cutoff},
                     {"tensors", tensors}});
  for (const auto& s : slots) {
    if (s.matrix) {
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = *s.matrix;
      write_raw(out, rm.data(), static_cast<std::size_t>(rm.size()));
    } else {
      write_raw(out, s.vector->data(), static_cast<std::size_t>(s.vector->size()));
    }
  }
  if (!out) throw std::runtime_error("SPRM: write failed");
}

BlockParams<double> read_params(std::istream& in) {
  const json h = read_header(in, "SPRM");
  const int embed = field_of<int>(h, "embed", "SPRM");
  const int heads = field_of<int>(h, "heads", "SPRM");
  const int hidden = field_of<int>(h, "hidden", "SPRM");
  if (embed < 1 || heads < 1 || hidden < 1 || embed % heads != 0) throw FormatError("SPRM: bad dimensions");
  BlockParams<double> p = BlockParams<double>::zeros(embed, heads, double(hidden) / embed);
  if (p.hidden() != hidden) throw FormatError("SPRM: hidden width does not round-trip");
  p.epsilon = field_of<double>(h, "epsilon", "SPRM");
  const auto mode = field_of<std::string>(h, "mode", "SPRM");
  if (mode == "global")
    p.mode = AttentionMode::Global;
  else if (mode == "neighborhood")
    p.mode = AttentionMode::Neighborhood;
  else
    throw FormatError("SPRM: unknown mode '" + mode + "'");
  p.theta_cutoff = field_of<double>(h, "theta_cutoff", "SPRM");

  const auto tensors = field_of<json>(h, "tensors", "SPRM");
  const auto slots = tensor_slots(p);
  if (!tensors.is_array() || tensors.size() != slots.size()) throw FormatError("SPRM: unexpected tensor list");
  for (std::size_t t = 0; t < slots.size(); ++t) {
    const auto& s = slots[t];
    if (field_of<std::string>(tensors[t], "name", "SPRM") != s.name) throw FormatError("SPRM: unexpected tensor order");
    const auto shape = field_of<std::vector<long long>>(tensors[t], "shape", "SPRM");
    if (s.matrix) {
      if (shape.size() != 2 || shape[0] != s.matrix->rows() || shape[1] != s.matrix->cols())
        throw FormatError(std::string("SPRM: bad shape for ") + s.name);
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(shape[0], shape[1]);
      read_raw(in, rm.data(), static_cast<std::size_t>(rm.size()), "SPRM");
      *s.matrix = rm;
    } else {
      if (shape.size() != 1 || shape[0] != s.vector->size()) throw FormatError(std::string("SPRM: bad shape for ") + s.name);
      read_raw(in, s.vector->data(), static_cast<std::size_t>(s.vector->size()), "SPRM");
    }
  }
  require_eof(in, "SPRM");
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("SPRM: ") + e.what());
  }
  return p;
}

void save_params(const std::filesystem::path& path, const BlockParams<double>& params) {
  auto f = open_out(path);
  write_params(f, params);
}

BlockParams<double> load_params(const std::filesystem::path& path) {
  auto f = open_in(path);
  return read_params(f);
}

}  // namespace s2attn::io
