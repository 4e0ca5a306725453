#include "vsla/checkpoint.hpp"

#include "vsla/errors.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vsla {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'V', 'S', 'L', 'A', 'C', 'K', 'P', 'T'};
constexpr std::size_t kPrefix = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t at) {
  T v;
  std::memcpy(&v, bytes.data() + at, sizeof(T));
  return v;
}

bool same(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (meta != o.meta || !(params == o.params) || optimizer.size() != o.optimizer.size()) return false;
  auto it = o.optimizer.begin();
  for (const auto& [k, m] : optimizer) {
    if (k != it->first || !same(m, it->second)) return false;
    ++it;
  }
  return true;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  auto describe = [&](const std::string& name, std::string_view group, const Matrix& m) {
    tensors.push_back({{"name", name}, {"group", group}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size());
  };
  for (const auto& p : ckpt.params.params()) describe(p.spec.name, group_name(p.spec.group), p.value);
  for (const auto& [name, m] : ckpt.optimizer) describe(name, "optimizer", m);

  nlohmann::json header = {{"meta", ckpt.meta}, {"tensors", tensors}};
  const std::string text = header.dump();

  std::string out;
  out.reserve(kPrefix + text.size() + offset * sizeof(double) + sizeof(std::uint64_t));
  out.append(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  auto payload = [&out](const Matrix& m) {
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  };
  for (const auto& p : ckpt.params.params()) payload(p.value);
  for (const auto& [name, m] : ckpt.optimizer) payload(m);
  put<std::uint64_t>(out, fnv1a(out.data(), out.size()));
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < kPrefix + sizeof(std::uint64_t) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("not a checkpoint file (bad magic or too short)");
  const auto version = get<std::uint32_t>(bytes, sizeof(kMagic));
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " cannot be read by this build (expects " +
                          std::to_string(kCheckpointVersion) + "); migrate it with a matching release first");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  if (get<std::uint64_t>(bytes, body) != fnv1a(bytes.data(), body))
    throw CheckpointError("checkpoint is truncated or corrupted (checksum mismatch)");
  const auto header_len = get<std::uint64_t>(bytes, sizeof(kMagic) + sizeof(std::uint32_t));
  if (header_len > body - kPrefix) throw CheckpointError("checkpoint header length exceeds file size");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kPrefix, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  const std::size_t data_start = kPrefix + header_len;
  const std::size_t n_values = (body - data_start) / sizeof(double);
  if ((body - data_start) % sizeof(double) != 0) throw CheckpointError("checkpoint payload is misaligned");

  Checkpoint ckpt;
  try {
    ckpt.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      const auto off = t.at("offset").get<std::uint64_t>();
      if (rows < 0 || cols < 0 || off + static_cast<std::uint64_t>(rows * cols) > n_values)
        throw CheckpointError("tensor '" + t.at("name").get<std::string>() + "' lies outside the payload");
      Matrix m(rows, cols);
      std::memcpy(m.data(), bytes.data() + data_start + off * sizeof(double),
                  static_cast<std::size_t>(m.size()) * sizeof(double));
      const auto name = t.at("name").get<std::string>();
      const auto group = t.at("group").get<std::string>();
      if (group == "optimizer") {
        ckpt.optimizer.emplace(name, std::move(m));
      } else {
        const auto g = parse_group(group);
        if (!g) throw CheckpointError("tensor '" + name + "' has unknown group '" + group + "'");
        ckpt.params.add(ParamSpec{name, *g, rows, cols}, std::move(m));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint tensors are inconsistent: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

std::string checkpoint_id(const Checkpoint& ckpt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& g : kAllGroups) h = (h ^ ckpt.params.group_hash(g)) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vsla
