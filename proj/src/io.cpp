// SPDX-License-Identifier: Apache-2.0
#include "mote/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mote {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'E', '1'};

static_assert(std::endian::native == std::endian::little,
              "MTE1 reader/writer assumes a little-endian host");

void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& is, void* p, std::size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  require(static_cast<std::size_t>(is.gcount()) == n, errc::io_failure,
          "truncated MTE1 file: " + path);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

void write_mte1(const std::string& path, const ArrayData& a) {
  require(!a.dims.empty() && a.dims.size() <= 3, errc::invalid_argument,
          "MTE1 supports 1 to 3 dimensions");
  std::uint64_t count = 1;
  for (auto d : a.dims) count *= d;
  require(count == a.data.size(), errc::invalid_argument,
          "MTE1 payload length does not match dims");

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), errc::io_failure, "cannot open for writing: " + path);
  write_bytes(os, kMagic, 4);
  const std::uint32_t ndim = static_cast<std::uint32_t>(a.dims.size());
  write_bytes(os, &ndim, 4);
  write_bytes(os, a.dims.data(), a.dims.size() * sizeof(std::uint64_t));
  write_bytes(os, a.data.data(), a.data.size() * sizeof(double));
  os.flush();
  require(os.good(), errc::io_failure, "write failed: " + path);
}

ArrayData read_mte1(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), errc::io_failure, "cannot open for reading: " + path);

  char magic[4];
  read_bytes(is, magic, 4, path);
  require(std::memcmp(magic, kMagic, 4) == 0, errc::parse_failure,
          "bad magic, not an MTE1 file: " + path);

  std::uint32_t ndim = 0;
  read_bytes(is, &ndim, 4, path);
  require(ndim >= 1 && ndim <= 3, errc::parse_failure, "unsupported ndim in: " + path);

  ArrayData a;
  a.dims.resize(ndim);
  read_bytes(is, a.dims.data(), ndim * sizeof(std::uint64_t), path);

  std::uint64_t count = 1;
  for (auto d : a.dims) count *= d;
  a.data.resize(count);
  if (count > 0) read_bytes(is, a.data.data(), count * sizeof(double), path);

  for (double x : a.data)
    require(std::isfinite(x), errc::parse_failure, "non-finite value in: " + path);
  return a;
}

void save_matrix(const std::string& path, const Matrix& m) {
  write_mte1(path, {{m.rows(), m.cols()}, m.data()});
}

Matrix load_matrix(const std::string& path) {
  ArrayData a = read_mte1(path);
  require(a.dims.size() == 2, errc::parse_failure, "expected 2-D array in: " + path);
  return Matrix(a.dims[0], a.dims[1], std::move(a.data));
}

void save_tensor3(const std::string& path, const Tensor3& t) {
  write_mte1(path, {{t.d1(), t.d2(), t.d3()}, t.data()});
}

Tensor3 load_tensor3(const std::string& path) {
  ArrayData a = read_mte1(path);
  require(a.dims.size() == 3, errc::parse_failure, "expected 3-D array in: " + path);
  return Tensor3({a.dims[0], a.dims[1], a.dims[2]}, std::move(a.data));
}

void save_vector(const std::string& path, const EVector& v) {
  std::vector<double> data(v.data(), v.data() + v.size());
  write_mte1(path, {{static_cast<std::uint64_t>(v.size())}, std::move(data)});
}

EVector load_vector(const std::string& path) {
  ArrayData a = read_mte1(path);
  require(a.dims.size() == 1, errc::parse_failure, "expected 1-D array in: " + path);
  EVector v(static_cast<Eigen::Index>(a.dims[0]));
  std::memcpy(v.data(), a.data.data(), a.data.size() * sizeof(double));
  return v;
}

void write_manifest(const std::string& path, const Manifest& kv) {
  std::ofstream os(path, std::ios::trunc);
  require(os.good(), errc::io_failure, "cannot open for writing: " + path);
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  os.flush();
  require(os.good(), errc::io_failure, "write failed: " + path);
}

Manifest parse_manifest_text(const std::string& text) {
  Manifest kv;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, errc::parse_failure,
            "manifest line " + std::to_string(lineno) + " has no '='");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    require(!key.empty(), errc::parse_failure,
            "manifest line " + std::to_string(lineno) + " has empty key");
    kv[key] = value;
  }
  return kv;
}

Manifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), errc::io_failure, "cannot open for reading: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_manifest_text(buf.str());
}

std::string manifest_get(const Manifest& m, const std::string& key) {
  const auto it = m.find(key);
  require(it != m.end(), errc::parse_failure, "manifest missing key: " + key);
  return it->second;
}

std::int64_t manifest_get_int(const Manifest& m, const std::string& key) {
  const std::string s = manifest_get(m, key);
  try {
    std::size_t pos = 0;
    const std::int64_t v = std::stoll(s, &pos);
    require(pos == s.size(), errc::parse_failure, "trailing characters in integer: " + key);
    return v;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail(errc::parse_failure, "manifest key is not an integer: " + key);
  }
}

double manifest_get_double(const Manifest& m, const std::string& key) {
  const std::string s = manifest_get(m, key);
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    require(pos == s.size(), errc::parse_failure, "trailing characters in number: " + key);
    return v;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail(errc::parse_failure, "manifest key is not a number: " + key);
  }
}

}  // namespace mote
