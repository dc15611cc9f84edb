#include "styleshift/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace styleshift {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'H', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  std::memcpy(&v, in.data() + pos, 8);
  return v;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    dir.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}, {"count", t.size()}});
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
  }
  nlohmann::json header = {{"format", "styleshift-checkpoint"}, {"version", 1}, {"meta", ckpt.meta}, {"tensors", dir}};
  const std::string head = header.dump();
  std::string out(kMagic, 8);
  put_u64(out, head.size());
  out += head;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : ckpt.tensors)
    out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw std::runtime_error("not a styleshift checkpoint");
  const std::uint64_t head_len = get_u64(bytes, 8);
  if (16 + head_len > bytes.size()) throw std::runtime_error("truncated checkpoint header");
  const auto header = nlohmann::json::parse(bytes.substr(16, head_len));
  if (header.at("format") != "styleshift-checkpoint") throw std::runtime_error("unknown checkpoint format");
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  const std::size_t base = 16 + head_len;
  for (const auto& rec : header.at("tensors")) {
    const auto shape = rec.at("shape").get<Shape>();
    const auto count = rec.at("count").get<std::uint64_t>();
    const auto offset = rec.at("offset").get<std::uint64_t>();
    if (rec.at("dtype") != "f32") throw std::runtime_error("unsupported dtype");
    if (static_cast<std::uint64_t>(shape_size(shape)) != count) throw std::runtime_error("corrupt tensor record");
    if (base + offset + count * sizeof(float) > bytes.size()) throw std::runtime_error("truncated checkpoint payload");
    Tensor<float> t(shape);
    std::memcpy(t.data(), bytes.data() + base + offset, count * sizeof(float));
    ckpt.tensors.emplace(rec.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  atomic_write(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string fnv1a_hex(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return buf;
}

}  // namespace styleshift
