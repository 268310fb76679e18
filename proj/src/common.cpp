#include "xmd/common.hpp"

#include <cstdlib>
#include <cstring>
#include <fstream>

namespace xmd {

VectorXd to_double(const VectorXf& v) { return v.cast<double>(); }
VectorXf to_float(const VectorXd& v) { return v.cast<float>(); }

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a64(const void* data, size_t size, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

uint64_t digest_matrix(const MatrixXf& m, uint64_t seed) {
  uint64_t h = seed;
  int64_t dims[2] = {m.rows(), m.cols()};
  h = fnv1a64(dims, sizeof(dims), h);
  return fnv1a64(m.data(), sizeof(float) * static_cast<size_t>(m.size()), h);
}

std::string digest_hex(uint64_t d) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(d));
  return std::string(buf);
}

void write_f32_matrix(const std::filesystem::path& path, const MatrixXf& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  // row-major on disk: one record per row
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      float v = rows(r, c);
      out.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

MatrixXf read_f32_matrix(const std::filesystem::path& path, int cols) {
  if (cols <= 0) throw std::invalid_argument("read_f32_matrix: cols must be positive");
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  const auto bytes = static_cast<size_t>(in.tellg());
  const size_t row_bytes = sizeof(float) * static_cast<size_t>(cols);
  if (bytes % row_bytes != 0)
    throw std::runtime_error("file size of " + path.string() + " is not a multiple of " +
                             std::to_string(cols) + " float32 columns");
  const auto n_rows = static_cast<Eigen::Index>(bytes / row_bytes);
  in.seekg(0);
  MatrixXf m(n_rows, cols);
  std::vector<float> row(static_cast<size_t>(cols));
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row_bytes));
    if (!in) throw std::runtime_error("short read: " + path.string());
    for (int c = 0; c < cols; ++c) m(r, c) = row[static_cast<size_t>(c)];
  }
  return m;
}

void append_f32(std::string& buffer, const float* data, size_t count) {
  buffer.append(reinterpret_cast<const char*>(data), count * sizeof(float));
}

std::string expand_env(const std::string& s) {
  std::string out;
  size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '$' && i + 1 < s.size()) {
      size_t start = i + 1;
      size_t end = start;
      bool braced = s[start] == '{';
      if (braced) ++start, end = start;
      while (end < s.size() && (std::isalnum(static_cast<unsigned char>(s[end])) || s[end] == '_'))
        ++end;
      if (end > start && (!braced || (end < s.size() && s[end] == '}'))) {
        std::string name = s.substr(start, end - start);
        const char* val = std::getenv(name.c_str());
        if (val) out += val;
        i = braced ? end + 1 : end;
        continue;
      }
    }
    out += s[i++];
  }
  return out;
}

}  // namespace xmd
