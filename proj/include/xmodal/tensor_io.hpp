#pragma once

// Binary tensor files and dataset manifests.
//
// Layout of a tensor file (little-endian throughout):
//
//   offset 0   4 bytes   magic "NST1"
//   offset 4   u8        dtype code (0 = float32, 1 = float64)
//   offset 5   u8        ndim, 1..3
//   offset 6   ndim*u64  dims
//   then       payload   prod(dims) values, row-major
//
// A 2x3 float32 tensor is therefore 6 + 16 + 24 = 46 bytes.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "types.hpp"

namespace xmodal {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

class TensorFormatError : public DataError {
public:
  enum class Kind { bad_magic, truncated, unknown_dtype, bad_ndim, trailing_bytes, io };

  TensorFormatError(Kind kind, const std::string &path, std::uint64_t offset, const std::string &what)
      : DataError(path + " @ byte " + std::to_string(offset) + ": " + what), kind_(kind), offset_(offset) {}

  Kind kind() const { return kind_; }
  std::uint64_t offset() const { return offset_; }

private:
  Kind kind_;
  std::uint64_t offset_;
};

struct Tensor {
  DType dtype{DType::f64};
  std::vector<std::uint64_t> dims;
  std::vector<double> data;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  // Row-major [rows, cols] tensor from a matrix.
  static Tensor from_matrix(const Matrix &m, DType dtype = DType::f64) {
    Tensor t;
    t.dtype = dtype;
    t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    t.data.resize(static_cast<std::size_t>(m.size()));
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(), m.rows(),
                                                                                        m.cols()) = m;
    return t;
  }

  static Tensor from_vector(const std::vector<double> &v, DType dtype = DType::f64) {
    Tensor t;
    t.dtype = dtype;
    t.dims = {static_cast<std::uint64_t>(v.size())};
    t.data = v;
    return t;
  }

  // 1-D tensors come back as a column vector.
  Matrix to_matrix() const {
    if (dims.size() == 1) {
      return Eigen::Map<const Vector>(data.data(), static_cast<Index>(dims[0]));
    }
    if (dims.size() != 2) throw DataError("tensor with ndim=" + std::to_string(dims.size()) + " is not a matrix");
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        data.data(), static_cast<Index>(dims[0]), static_cast<Index>(dims[1]));
  }
};

namespace detail {

template <typename T>
void put_le(std::vector<char> &buf, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  buf.insert(buf.end(), bytes.begin(), bytes.end());
}

template <typename T>
T get_le(const char *p) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline constexpr std::array<char, 4> tensor_magic{'N', 'S', 'T', '1'};

} // namespace detail

inline std::vector<char> encode_tensor(const Tensor &t) {
  if (t.dims.empty() || t.dims.size() > 3)
    throw DataError("tensor ndim must be 1..3, got " + std::to_string(t.dims.size()));
  if (t.numel() != t.data.size()) throw DataError("tensor payload does not match its dims");
  std::vector<char> buf(detail::tensor_magic.begin(), detail::tensor_magic.end());
  buf.push_back(static_cast<char>(t.dtype));
  buf.push_back(static_cast<char>(t.dims.size()));
  for (auto d : t.dims) detail::put_le<std::uint64_t>(buf, d);
  buf.reserve(buf.size() + t.data.size() * dtype_size(t.dtype));
  for (double v : t.data) {
    if (!std::isfinite(v)) throw NumericalError("refusing to write non-finite tensor value");
    if (t.dtype == DType::f32)
      detail::put_le<float>(buf, static_cast<float>(v));
    else
      detail::put_le<double>(buf, v);
  }
  return buf;
}

inline Tensor decode_tensor(const std::vector<char> &buf, const std::string &path = "<memory>") {
  using Kind = TensorFormatError::Kind;
  if (buf.size() < 6) throw TensorFormatError(Kind::truncated, path, buf.size(), "header truncated");
  if (!std::equal(detail::tensor_magic.begin(), detail::tensor_magic.end(), buf.begin()))
    throw TensorFormatError(Kind::bad_magic, path, 0, "bad magic (expected NST1)");
  const auto code = static_cast<std::uint8_t>(buf[4]);
  if (code > 1) throw TensorFormatError(Kind::unknown_dtype, path, 4, "unknown dtype code " + std::to_string(code));
  const auto ndim = static_cast<std::uint8_t>(buf[5]);
  if (ndim < 1 || ndim > 3) throw TensorFormatError(Kind::bad_ndim, path, 5, "ndim " + std::to_string(ndim));

  Tensor t;
  t.dtype = static_cast<DType>(code);
  std::size_t off = 6;
  if (buf.size() < off + 8 * ndim) throw TensorFormatError(Kind::truncated, path, buf.size(), "dims truncated");
  std::uint64_t numel = 1;
  for (int i = 0; i < ndim; ++i, off += 8) {
    t.dims.push_back(detail::get_le<std::uint64_t>(buf.data() + off));
    numel *= t.dims.back();
  }
  const std::size_t width = dtype_size(t.dtype);
  const std::uint64_t expected = off + numel * width;
  if (buf.size() < expected)
    throw TensorFormatError(Kind::truncated, path, buf.size(),
                            "payload truncated (expected " + std::to_string(expected) + " bytes)");
  if (buf.size() > expected) throw TensorFormatError(Kind::trailing_bytes, path, expected, "trailing bytes");

  t.data.resize(numel);
  for (std::uint64_t i = 0; i < numel; ++i, off += width) {
    t.data[i] = t.dtype == DType::f32 ? static_cast<double>(detail::get_le<float>(buf.data() + off))
                                      : detail::get_le<double>(buf.data() + off);
  }
  return t;
}

inline void write_tensor(const std::filesystem::path &path, const Tensor &t) {
  const auto buf = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorFormatError(TensorFormatError::Kind::io, path.string(), 0, "cannot open for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw TensorFormatError(TensorFormatError::Kind::io, path.string(), 0, "write failed");
}

inline void write_tensor(const std::filesystem::path &path, const Matrix &m, DType dtype = DType::f64) {
  write_tensor(path, Tensor::from_matrix(m, dtype));
}

inline Tensor read_tensor(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFormatError(TensorFormatError::Kind::io, path.string(), 0, "cannot open for reading");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(buf, path.string());
}

// Time series are stored as [channels, samples].
inline void write_timeseries(const std::filesystem::path &path, const TimeSeries &ts, DType dtype = DType::f64) {
  write_tensor(path, Matrix(ts.values.transpose()), dtype);
}

inline TimeSeries read_timeseries(const std::filesystem::path &path, double rate_hz) {
  const Tensor t = read_tensor(path);
  if (t.dims.size() != 2) throw DataError(path.string() + ": time series tensor must be 2-D [channels, samples]");
  TimeSeries ts(t.to_matrix().transpose(), rate_hz);
  ts.channel_names = default_channel_names(ts.channels());
  return ts;
}

// ---------------------------------------------------------------------------
// Manifests

enum class DataRole { stimulus_waveform, features, responses };

NLOHMANN_JSON_SERIALIZE_ENUM(DataRole, {
                                           {DataRole::stimulus_waveform, "stimulus_waveform"},
                                           {DataRole::features, "features"},
                                           {DataRole::responses, "responses"},
                                       })

struct DatasetManifest {
  std::string name;
  double rate_hz{0.0};
  DataRole role{DataRole::responses};
  std::vector<std::string> channel_names;
  std::string tensor_path;
  std::optional<std::vector<std::string>> repeats;
};

inline void to_json(nlohmann::json &j, const DatasetManifest &m) {
  j = nlohmann::json{{"name", m.name},
                     {"rate_hz", m.rate_hz},
                     {"role", m.role},
                     {"channel_names", m.channel_names},
                     {"tensor_path", m.tensor_path}};
  if (m.repeats) j["repeats"] = *m.repeats;
}

inline void from_json(const nlohmann::json &j, DatasetManifest &m) {
  j.at("name").get_to(m.name);
  j.at("rate_hz").get_to(m.rate_hz);
  j.at("role").get_to(m.role);
  j.at("channel_names").get_to(m.channel_names);
  j.at("tensor_path").get_to(m.tensor_path);
  if (j.contains("repeats") && !j.at("repeats").is_null())
    m.repeats = j.at("repeats").get<std::vector<std::string>>();
  else
    m.repeats.reset();
}

inline void save_json(const std::filesystem::path &path, const nlohmann::json &j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json load_json(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// A manifest file plus the directory its relative paths resolve against.
struct ManifestRef {
  DatasetManifest manifest;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string &rel) const { return base_dir / rel; }
};

inline void save_manifest(const std::filesystem::path &path, const DatasetManifest &m) {
  save_json(path, nlohmann::json(m));
}

// Loads and validates a manifest against the tensors it references.
inline ManifestRef load_manifest(const std::filesystem::path &path) {
  ManifestRef ref;
  try {
    ref.manifest = load_json(path).get<DatasetManifest>();
  } catch (const nlohmann::json::exception &e) {
    throw DataError(path.string() + ": invalid manifest: " + e.what());
  }
  ref.base_dir = path.parent_path();
  const auto &m = ref.manifest;
  if (!(m.rate_hz > 0.0)) throw DataError(path.string() + ": rate_hz must be positive");

  const Tensor main = read_tensor(ref.resolve(m.tensor_path));
  if (main.dims.empty() || main.dims[0] != m.channel_names.size())
    throw DataError(path.string() + ": channel_names length does not match tensor channel dimension");
  if (m.repeats) {
    for (const auto &rp : *m.repeats) {
      const Tensor r = read_tensor(ref.resolve(rp));
      if (r.dims != main.dims) throw DataError(path.string() + ": repeat " + rp + " has mismatched dims");
    }
  }
  return ref;
}

inline TimeSeries load_timeseries(const ManifestRef &ref) {
  TimeSeries ts = read_timeseries(ref.resolve(ref.manifest.tensor_path), ref.manifest.rate_hz);
  ts.channel_names = ref.manifest.channel_names;
  return ts;
}

inline TimeSeries average_repeats(const std::vector<TimeSeries> &repeats) {
  if (repeats.empty()) throw DataError("average_repeats: no repeats");
  // Running mean: identical repeats reproduce the input bit for bit.
  TimeSeries out = repeats.front();
  for (std::size_t i = 1; i < repeats.size(); ++i) {
    if (repeats[i].values.rows() != out.values.rows() || repeats[i].values.cols() != out.values.cols())
      throw DataError("average_repeats: repeat " + std::to_string(i) + " has mismatched dims");
    out.values += (repeats[i].values - out.values) / static_cast<double>(i + 1);
  }
  return out;
}

inline TimeSeries average_repeats(const ManifestRef &ref) {
  const auto &m = ref.manifest;
  if (!m.repeats || m.repeats->empty()) throw DataError("average_repeats: manifest '" + m.name + "' has no repeats");
  std::vector<TimeSeries> reps;
  for (const auto &rp : *m.repeats) reps.push_back(read_timeseries(ref.resolve(rp), m.rate_hz));
  TimeSeries out = average_repeats(reps);
  out.channel_names = m.channel_names;
  return out;
}

} // namespace xmodal
