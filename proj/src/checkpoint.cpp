#include "evonas/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace evonas {

namespace {

constexpr std::size_t kMagicSize = sizeof(kCheckpointMagic) - 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }

  std::uint64_t u64() {
    need(8, "integer");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("checkpoint truncated while reading ") + what, pos_);
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ParameterStore& params) {
  std::string out(kCheckpointMagic, kMagicSize);
  for (const auto& [name, tensor] : params.items()) {
    put_u64(out, name.size());
    out += name;
    put_u64(out, tensor.rank());
    for (std::size_t extent : tensor.shape()) put_u64(out, extent);
    for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ParameterStore deserialize_checkpoint(const std::string& bytes) {
  if (bytes.compare(0, kMagicSize, kCheckpointMagic, kMagicSize) != 0)
    throw ParseError("not an EVONAS1 checkpoint", 0);
  Reader in(bytes);
  in.bytes(kMagicSize, "magic");
  ParameterStore params;
  while (!in.done()) {
    const std::uint64_t name_len = in.u64();
    if (name_len > bytes.size()) throw ParseError("implausible parameter name length", in.position());
    std::string name = in.bytes(name_len, "parameter name");
    const std::uint64_t rank = in.u64();
    if (rank == 0 || rank > 8) throw ParseError("unsupported rank " + std::to_string(rank), in.position());
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      shape.push_back(in.u64());
      numel *= shape.back();
    }
    if (numel == 0 || numel > bytes.size() / 8) throw ParseError("bad extents for '" + name + "'", in.position());
    std::vector<double> data(numel);
    for (double& v : data) v = std::bit_cast<double>(in.u64());
    params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params) {
  write_file_atomic(path, serialize_checkpoint(params));
}

ParameterStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace evonas
