#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "usrf/tensor.hpp"

namespace usrf {

// Text checkpoint, version 1:
//
//   usrfnet-checkpoint 1
//   meta <one-line JSON document>
//   params <count>
//   <name> <rows> <cols>        repeated <count> times, each followed by
//   <v> <v> ...                 <rows> lines of <cols> values (%.17g)
//
// Values round-trip exactly. Parameter order is the store's insertion order.

struct NamedMatrix {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  std::string meta;  // JSON text
  std::vector<NamedMatrix> params;
};

inline constexpr int kCheckpointVersion = 1;

Checkpoint make_checkpoint(std::string meta, const ParameterStore& store);
void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint(const std::string& path);

/// Copy checkpoint values into `store`; names, order and shapes must match
/// exactly, otherwise ArtifactMismatchError.
void load_parameters(const Checkpoint& ckpt, ParameterStore& store);

/// Decimal text with 17 significant digits; parses back to the identical double.
std::string format_double(double v);

}  // namespace usrf
