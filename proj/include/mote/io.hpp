// SPDX-License-Identifier: Apache-2.0
//
// MTE1 array container and plain key=value manifests.
//
// Container layout: magic "MTE1", u32 ndim, ndim little-endian u64 dims,
// then the float64 payload little-endian in storage order (row-major for
// matrices, first-index-slowest for tensors).
#pragma once

#include <map>
#include <string>
#include <vector>

#include "mote/types.hpp"

namespace mote {

struct ArrayData {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

void write_mte1(const std::string& path, const ArrayData& a);
ArrayData read_mte1(const std::string& path);

void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path);

void save_tensor3(const std::string& path, const Tensor3& t);
Tensor3 load_tensor3(const std::string& path);

void save_vector(const std::string& path, const EVector& v);
EVector load_vector(const std::string& path);

// Manifests are "key = value" lines; '#' starts a comment. Keys are unique.
using Manifest = std::map<std::string, std::string>;

void write_manifest(const std::string& path, const Manifest& kv);
Manifest read_manifest(const std::string& path);
Manifest parse_manifest_text(const std::string& text);

// Typed lookups with context-carrying parse errors.
std::string manifest_get(const Manifest& m, const std::string& key);
std::int64_t manifest_get_int(const Manifest& m, const std::string& key);
double manifest_get_double(const Manifest& m, const std::string& key);

}  // namespace mote
