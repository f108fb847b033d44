#pragma once

// Binary container formats. Each file starts with one UTF-8 JSON header line
// terminated by '\n', followed by little-endian payload:
//
//   SFLD/1  {magic:"SFLD", version:1, shape:[B,C,H,W], dtype:"f64", grid:{family,nlat,nlon}}
//           then B*C*H*W float64 values, row-major (batch, channel, lat, lon).
//   SNBR/1  {magic:"SNBR", version:1, nlat, nlon, theta_cutoff, counts:[...], family}
//           then int32 pairs (source lat, lon offset), row by row.
//   SPRM/1  {magic:"SPRM", version:1, embed, heads, hidden, epsilon, mode, theta_cutoff, tensors:[{name,shape}]}
//           then float64 tensors in header order, row-major.

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "s2attn/field.hpp"
#include "s2attn/neighborhood.hpp"
#include "s2attn/transformer.hpp"

namespace s2attn::io {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_field(std::ostream& out, const Field<double>& field);
Field<double> read_field(std::istream& in);
void save_field(const std::filesystem::path& path, const Field<double>& field);
Field<double> load_field(const std::filesystem::path& path);

void write_neighborhood(std::ostream& out, const NeighborhoodMap& map);
NeighborhoodMap read_neighborhood(std::istream& in);
void save_neighborhood(const std::filesystem::path& path, const NeighborhoodMap& map);
NeighborhoodMap load_neighborhood(const std::filesystem::path& path);

void write_params(std::ostream& out, const BlockParams<double>& params);
BlockParams<double> read_params(std::istream& in);
void save_params(const std::filesystem::path& path, const BlockParams<double>& params);
BlockParams<double> load_params(const std::filesystem::path& path);

}  // namespace s2attn::io
