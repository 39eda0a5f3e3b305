#include "egmt/tensor.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace egmt {

namespace {

constexpr std::array<char, 4> kMagic{'E', 'G', 'T', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(bytes.data(), bytes.size());
}

std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw std::runtime_error("EGT1: truncated header");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void write_egt1(std::ostream& out, const Tensor<float>& t) {
  out.write(kMagic.data(), kMagic.size());
  put_u64(out, static_cast<std::uint64_t>(t.rank()));
  for (Index e : t.shape()) put_u64(out, static_cast<std::uint64_t>(e));
  std::vector<char> buf(static_cast<std::size_t>(t.size()) * 4);
  for (Index i = 0; i < t.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) buf[static_cast<std::size_t>(i) * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("EGT1: write failed");
}

Tensor<float> read_egt1(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error("EGT1: bad magic");
  }
  const std::uint64_t rank = get_u64(in);
  if (rank == 0 || rank > 8) throw std::runtime_error("EGT1: unsupported rank " + std::to_string(rank));
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) {
    const std::uint64_t e = get_u64(in);
    if (e == 0 || e > (1ull << 40)) throw std::runtime_error("EGT1: bad extent");
    shape.push_back(static_cast<Index>(e));
  }
  const Index n = shape_size(shape);
  std::vector<unsigned char> buf(static_cast<std::size_t>(n) * 4);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw std::runtime_error("EGT1: truncated data");
  }
  Tensor<float> t(shape);
  for (Index i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[static_cast<std::size_t>(i) * 4 + b]) << (8 * b);
    t[i] = std::bit_cast<float>(bits);
  }
  return t;
}

void save_egt1(const std::string& path, const Tensor<float>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_egt1(out, t);
}

Tensor<float> load_egt1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_egt1(in);
}

}  // namespace egmt
