#include "ferl/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ferl/errors.hpp"

namespace ferl {

namespace {

constexpr std::string_view kMagic = "FERL1";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw ValidationError("checkpoint: truncated record at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const TensorList& tensors) {
  std::string out(kMagic);
  for (const auto& t : tensors) {
    put_u64(out, t.name.size());
    out += t.name;
    put_u64(out, t.value.rank());
    for (std::size_t d : t.value.shape()) put_u64(out, d);
    for (double v : t.value.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

TensorList decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) {
    throw ValidationError("checkpoint: bad magic, expected \"FERL1\"");
  }
  Reader r(bytes.substr(kMagic.size()));
  TensorList out;
  while (!r.done()) {
    NamedTensor t;
    const std::uint64_t name_len = r.u64();
    t.name = std::string(r.take(name_len));
    const std::uint64_t rank = r.u64();
    if (rank > 8) throw ValidationError("checkpoint: tensor '" + t.name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = std::bit_cast<double>(r.u64());
    t.value = RealArray(std::move(shape), std::move(values));
    out.push_back(std::move(t));
  }
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const TensorList& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("checkpoint: cannot open '" + path.string() + "' for writing");
  const std::string bytes = encode_checkpoint(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ValidationError("checkpoint: write failed for '" + path.string() + "'");
}

TensorList read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("checkpoint: cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

const RealArray& find_tensor(const TensorList& tensors, std::string_view name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw ValidationError("checkpoint: missing tensor '" + std::string(name) + "'");
}

bool has_tensor(const TensorList& tensors, std::string_view name) {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

std::string digest_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = kHex[h & 0xF];
    h >>= 4;
  }
  return out;
}

}  // namespace ferl
