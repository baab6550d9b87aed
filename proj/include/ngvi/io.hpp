#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "ngvi/models.hpp"

namespace ngvi {

enum class IdxErrc { io, bad_magic, truncated, count_mismatch };

inline const char* to_string(IdxErrc e) {
  switch (e) {
    case IdxErrc::io: return "io";
    case IdxErrc::bad_magic: return "bad magic";
    case IdxErrc::truncated: return "truncated";
    case IdxErrc::count_mismatch: return "count mismatch";
  }
  return "?";
}

class IdxError : public std::runtime_error {
 public:
  IdxError(IdxErrc code, const std::string& msg)
      : std::runtime_error(std::string("idx ") + to_string(code) + ": " + msg),
        code_(code) {}
  IdxErrc code() const noexcept { return code_; }

 private:
  IdxErrc code_;
};

/// An unsigned-byte IDX array (magic 0x000008NN, NN = number of dims).
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

inline IdxArray parse_idx(std::string_view bytes, const std::string& name = "idx") {
  auto be32 = [&](std::size_t off) {
    return (std::uint32_t(std::uint8_t(bytes[off])) << 24) |
           (std::uint32_t(std::uint8_t(bytes[off + 1])) << 16) |
           (std::uint32_t(std::uint8_t(bytes[off + 2])) << 8) |
           std::uint32_t(std::uint8_t(bytes[off + 3]));
  };
  if (bytes.size() < 4) throw IdxError(IdxErrc::truncated, name + ": no header");
  const std::uint32_t magic = be32(0);
  const std::uint32_t ndims = magic & 0xffu;
  if ((magic & 0xffffff00u) != 0x00000800u || ndims == 0 || ndims > 4) {
    throw IdxError(IdxErrc::bad_magic, name);
  }
  const std::size_t header = 4 + 4 * std::size_t{ndims};
  if (bytes.size() < header) throw IdxError(IdxErrc::truncated, name + ": header");
  IdxArray out;
  std::size_t count = 1;
  for (std::uint32_t k = 0; k < ndims; ++k) {
    out.dims.push_back(be32(4 + 4 * k));
    count *= out.dims.back();
  }
  if (bytes.size() < header + count) {
    throw IdxError(IdxErrc::truncated, name + ": expected " +
                                           std::to_string(count) + " payload bytes");
  }
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                  bytes.begin() + static_cast<std::ptrdiff_t>(header + count));
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline IdxArray read_idx(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw IdxError(IdxErrc::io, e.what());
  }
  return parse_idx(bytes, path.string());
}

struct IdxOptions {
  std::size_t subset = 0;        // 0 keeps everything
  std::uint64_t seed = 0;        // shuffle seed applied before taking the subset
  bool binary_zero_one = false;  // keep digits 0 and 1 only
};

/// Images scaled to [0, 1], one row of rows*cols features per image.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        const IdxOptions& opts = {}) {
  const IdxArray images = read_idx(images_path);
  const IdxArray labels = read_idx(labels_path);
  if (images.dims.size() != 3) {
    throw IdxError(IdxErrc::bad_magic, images_path.string() + ": expected 3-D images");
  }
  if (labels.dims.size() != 1) {
    throw IdxError(IdxErrc::bad_magic, labels_path.string() + ": expected 1-D labels");
  }
  if (images.dims[0] != labels.dims[0]) {
    throw IdxError(IdxErrc::count_mismatch,
                   std::to_string(images.dims[0]) + " images vs " +
                       std::to_string(labels.dims[0]) + " labels");
  }
  const std::size_t n = images.dims[0];
  const std::size_t pixels = std::size_t{images.dims[1]} * images.dims[2];

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    if (!opts.binary_zero_one || labels.data[i] <= 1) keep.push_back(i);
  }
  if (opts.subset > 0) {
    RngStream rng(opts.seed, 0x1d8ULL);
    for (std::size_t i = keep.size(); i > 1; --i) {
      std::swap(keep[i - 1], keep[rng.bits() % i]);
    }
    keep.resize(std::min(keep.size(), opts.subset));
  }

  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(keep.size()),
                      static_cast<Eigen::Index>(pixels));
  out.labels.resize(keep.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const std::size_t i = keep[r];
    for (std::size_t p = 0; p < pixels; ++p) {
      out.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(p)) =
          images.data[i * pixels + p] / 255.0;
    }
    out.labels[r] = labels.data[i];
  }
  return out;
}

// Shortest round-trip decimal; independent of the global locale.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) {
    s.remove_suffix(1);
  }
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

/// Writes to a sibling temp file and renames, so readers never see a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Header x0,...,x{d-1},label then one row per example.
inline std::string dataset_to_csv(const Dataset& data) {
  std::ostringstream out;
  for (Eigen::Index j = 0; j < data.num_features(); ++j) out << 'x' << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (Eigen::Index j = 0; j < data.num_features(); ++j) {
      out << format_double(data.features(static_cast<Eigen::Index>(i), j)) << ',';
    }
    out << data.labels[i] << '\n';
  }
  return out.str();
}

inline Dataset dataset_from_csv(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    start = nl + 1;
  }
  if (lines.empty()) throw std::invalid_argument("csv: missing header");
  const auto header = split_csv_line(lines.front());
  if (header.size() < 2 || header.back() != "label") {
    throw std::invalid_argument("csv: last header column must be 'label'");
  }
  const auto d = static_cast<Eigen::Index>(header.size() - 1);
  Dataset data;
  data.features.resize(static_cast<Eigen::Index>(lines.size() - 1), d);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto cells = split_csv_line(lines[r]);
    if (cells.size() != header.size()) {
      throw std::invalid_argument("csv: line " + std::to_string(r + 1) +
                                  " has wrong column count");
    }
    for (Eigen::Index j = 0; j < d; ++j) {
      data.features(static_cast<Eigen::Index>(r - 1), j) =
          parse_double(cells[static_cast<std::size_t>(j)]);
    }
    data.labels.push_back(static_cast<int>(parse_double(cells.back())));
  }
  data.validate();
  return data;
}

inline Dataset load_csv(const std::filesystem::path& path) {
  return dataset_from_csv(read_file(path));
}

}  // namespace ngvi
