#pragma once

// Binary encodings shared by every artifact file.
//
// Checkpoint:  "PLAB" | u32 version | records...
// Record:      u32 name_len | name bytes | u32 rank | u32 extent x rank | f32 x numel
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "plab/errors.hpp"
#include "plab/nn.hpp"
#include "plab/tensor.hpp"

namespace plab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

static_assert(std::endian::native == std::endian::little, "artifact encoding assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

inline void put_bytes(std::ostream& os, const std::string& s) { os.write(s.data(), std::streamsize(s.size())); }

/// Bounds-checked cursor over an in-memory file.
class Reader {
 public:
  Reader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void expect_magic(const char (&magic)[5]) {
    if (bytes_.size() < 4 || bytes_.compare(0, 4, magic) != 0)
      throw FormatError(FormatError::Kind::bad_magic, what_ + ": bad magic, expected " + magic);
    pos_ = 4;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& what() const { return what_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(FormatError::Kind::truncated, what_ + ": file is truncated");
  }

  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes via a temporary file so readers never observe a partial artifact.
inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace io

inline void write_tensor_record(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  io::put<std::uint32_t>(os, std::uint32_t(name.size()));
  io::put_bytes(os, name);
  io::put<std::uint32_t>(os, std::uint32_t(t.rank()));
  for (std::size_t e : t.shape()) io::put<std::uint32_t>(os, std::uint32_t(e));
  os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
}

inline std::pair<std::string, Tensor<float>> read_tensor_record(io::Reader& in) {
  const auto name_len = in.get<std::uint32_t>();
  if (name_len > (1u << 16)) throw FormatError(FormatError::Kind::bad_value, in.what() + ": implausible name length");
  std::string name = in.get_bytes(name_len);
  const auto rank = in.get<std::uint32_t>();
  if (rank > 8) throw FormatError(FormatError::Kind::bad_value, in.what() + ": implausible tensor rank");
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& e : shape) {
    e = in.get<std::uint32_t>();
    if (e == 0) throw FormatError(FormatError::Kind::bad_value, in.what() + ": zero tensor extent");
    count *= e;
    if (count > in.remaining()) throw FormatError(FormatError::Kind::truncated, in.what() + ": file is truncated");
  }
  std::string raw = in.get_bytes(count * sizeof(float));
  std::vector<float> values(count);
  std::memcpy(values.data(), raw.data(), raw.size());
  return {std::move(name), Tensor<float>(std::move(shape), std::move(values))};
}

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

inline std::string encode_checkpoint(const NamedTensors& tensors) {
  std::ostringstream os;
  io::put_bytes(os, "PLAB");
  io::put<std::uint32_t>(os, kCheckpointVersion);
  for (const auto& [name, t] : tensors) write_tensor_record(os, name, t);
  return os.str();
}

inline NamedTensors decode_checkpoint(std::string bytes, const std::string& what = "checkpoint") {
  io::Reader in(std::move(bytes), what);
  in.expect_magic("PLAB");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError(FormatError::Kind::bad_version, what + ": unsupported version " + std::to_string(version));
  NamedTensors out;
  while (!in.at_end()) out.push_back(read_tensor_record(in));
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  io::write_file(path, encode_checkpoint(tensors));
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

/// Parameters plus the fixed normalization layer, as float32 records.
template <typename T>
NamedTensors model_tensors(const Model<T>& model) {
  NamedTensors out;
  const ModelSpec& s = model.spec();
  if (!s.mean.empty()) out.emplace_back("input.mean", Tensor<float>(Shape{s.mean.size()}, s.mean));
  if (!s.stddev.empty()) out.emplace_back("input.std", Tensor<float>(Shape{s.stddev.size()}, s.stddev));
  for (const auto& [name, v] : model.params()) out.emplace_back(name, v.value().template cast<float>());
  return out;
}

/// Loads parameters into a model built from a matching spec. All-or-nothing.
template <typename T>
void load_model_tensors(Model<T>& model, const NamedTensors& tensors) {
  Model<T> staged = model;
  std::size_t matched = 0;
  for (const auto& [name, t] : tensors) {
    if (name == "input.mean") {
      staged.mutable_spec().mean = t.storage();
      continue;
    }
    if (name == "input.std") {
      staged.mutable_spec().stddev = t.storage();
      continue;
    }
    Tensor<T>& dst = staged.param(name).mutable_value();
    if (dst.shape() != t.shape())
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                       shape_str(dst.shape()));
    dst = t.template cast<T>();
    ++matched;
  }
  if (matched != model.params().size())
    throw FormatError(FormatError::Kind::count_mismatch, "checkpoint holds " + std::to_string(matched) + " of " +
                                                             std::to_string(model.params().size()) + " parameters");
  staged.mutable_spec().validate();
  model = std::move(staged);
}

template <typename T>
void save_model(const std::filesystem::path& path, const Model<T>& model) {
  save_checkpoint(path, model_tensors(model));
}

template <typename T>
void load_model(const std::filesystem::path& path, Model<T>& model) {
  load_model_tensors(model, load_checkpoint(path));
}

}  // namespace plab
