#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "madf/config.hpp"
#include "madf/optim.hpp"
#include "madf/world.hpp"

namespace madf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores raw little-endian values");

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

// Write via a sibling temp file plus rename, so readers never see a torn file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream f(path, std::ios::binary | std::ios::app);
  if (!f) throw IoError("cannot open '" + path.string() + "' for appending");
  f << line << '\n';
  if (!f) throw IoError("short append to '" + path.string() + "'");
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IoError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

inline std::string take_string(const std::string& in, std::size_t& pos) {
  const auto n = take<std::uint32_t>(in, pos);
  if (pos + n > in.size()) throw IoError("checkpoint: truncated string");
  std::string s = in.substr(pos, n);
  pos += n;
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  static constexpr std::uint16_t kVersion = 1;
  std::string run_id;
  std::int32_t epoch = 0;
  std::string phase;  // "sl" | "rl"
  std::uint64_t config_hash = 0;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry& at(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return e;
    }
    throw IoError("checkpoint: missing entry '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return true;
    }
    return false;
  }

  std::string serialize() const {
    std::string out;
    out += "MADF";
    detail::put<std::uint16_t>(out, kVersion);
    detail::put_string(out, run_id);
    detail::put<std::int32_t>(out, epoch);
    detail::put_string(out, phase);
    detail::put<std::uint64_t>(out, config_hash);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
      detail::put_string(out, e.name);
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
      for (int d : e.shape) detail::put<std::int32_t>(out, d);
      for (double v : e.values) detail::put<double>(out, v);
    }
    return out;
  }

  static Checkpoint deserialize(const std::string& bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 4 || bytes.substr(0, 4) != "MADF") {
      throw IoError("checkpoint: bad magic (not a checkpoint file)");
    }
    pos = 4;
    const auto version = detail::take<std::uint16_t>(bytes, pos);
    if (version != kVersion) {
      throw IoError("checkpoint: unsupported format version " + std::to_string(version) +
                    " (expected " + std::to_string(kVersion) + ")");
    }
    Checkpoint ck;
    ck.run_id = detail::take_string(bytes, pos);
    ck.epoch = detail::take<std::int32_t>(bytes, pos);
    ck.phase = detail::take_string(bytes, pos);
    ck.config_hash = detail::take<std::uint64_t>(bytes, pos);
    const auto n = detail::take<std::uint32_t>(bytes, pos);
    for (std::uint32_t i = 0; i < n; ++i) {
      CheckpointEntry e;
      e.name = detail::take_string(bytes, pos);
      const auto rank = detail::take<std::uint32_t>(bytes, pos);
      std::int64_t count = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        const auto dim = detail::take<std::int32_t>(bytes, pos);
        if (dim <= 0) throw IoError("checkpoint: nonpositive dimension");
        e.shape.push_back(dim);
        count *= dim;
      }
      e.values.resize(static_cast<std::size_t>(count));
      for (auto& v : e.values) v = detail::take<double>(bytes, pos);
      ck.entries.push_back(std::move(e));
    }
    if (pos != bytes.size()) throw IoError("checkpoint: trailing bytes");
    return ck;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

  static Checkpoint load(const std::filesystem::path& path) {
    return deserialize(read_file(path));
  }
};

// Packs a ParamStore plus its optimizer state under "<prefix>." names. Adam
// moments become "#m1"/"#m2" companions and the step count "<prefix>#step".
inline void pack_agent(Checkpoint& ck, const std::string& prefix, const ParamStore& store,
                       const Optimizer& opt) {
  auto& moment1 = const_cast<Optimizer&>(opt).moment1();
  auto& moment2 = const_cast<Optimizer&>(opt).moment2();
  for (const auto& [name, t] : store) {
    ck.entries.push_back({prefix + "." + name, t.shape(), t.values()});
    if (opt.kind() == OptKind::Adam) {
      auto m1 = moment1.find(name);
      auto m2 = moment2.find(name);
      if (m1 != moment1.end() && !m1->second.empty()) {
        ck.entries.push_back({prefix + "." + name + "#m1", t.shape(), m1->second});
        ck.entries.push_back({prefix + "." + name + "#m2", t.shape(), m2->second});
      }
    }
  }
  ck.entries.push_back(
      {prefix + "#step", {1}, {static_cast<double>(opt.step_count())}});
}

inline void unpack_agent(const Checkpoint& ck, const std::string& prefix, ParamStore& store,
                         Optimizer& opt) {
  for (auto& [name, t] : store) {
    const auto& e = ck.at(prefix + "." + name);
    if (e.shape != t.shape()) {
      throw IoError("checkpoint: shape mismatch for '" + prefix + "." + name + "'");
    }
    t.mutable_values() = e.values;
    t.zero_grad();
    if (opt.kind() == OptKind::Adam && ck.has(prefix + "." + name + "#m1")) {
      opt.moment1()[name] = ck.at(prefix + "." + name + "#m1").values;
      opt.moment2()[name] = ck.at(prefix + "." + name + "#m2").values;
    }
  }
  opt.set_step_count(static_cast<std::int64_t>(ck.at(prefix + "#step").values[0]));
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

inline std::string scene_to_jsonl(const Scene& s) {
  nlohmann::json j;
  j["scene_id"] = s.scene_id;
  j["assignment"] = s.assignment;
  j["revealed"] = s.revealed;
  j["caption"] = s.caption_tokens;
  j["y"] = s.y_gt;
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& [q, a] : s.oracle) rounds.push_back({q, a});
  j["oracle"] = rounds;
  return j.dump();
}

inline void save_split_jsonl(const std::filesystem::path& path, const std::vector<Scene>& split) {
  std::string out;
  for (const auto& s : split) out += scene_to_jsonl(s) + "\n";
  write_file_atomic(path, out);
}

// Rebuilds each scene through the world and cross-checks the stored embedding,
// so a dataset generated under a different mixing matrix is rejected.
inline std::vector<Scene> load_split_jsonl(const std::filesystem::path& path, const World& world) {
  std::istringstream is(read_file(path));
  std::vector<Scene> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
    }
    Scene s = world.make_scene(j.at("scene_id").get<int>(),
                               j.at("assignment").get<std::vector<int>>(),
                               j.at("revealed").get<std::vector<int>>(),
                               static_cast<int>(j.at("oracle").size()));
    if (s.y_gt != j.at("y").get<std::vector<double>>() ||
        s.caption_tokens != j.at("caption").get<std::vector<int>>()) {
      throw IoError(path.string() + ":" + std::to_string(lineno) +
                    ": stored scene disagrees with the world (wrong seed or matrix?)");
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_mixing_matrix(const std::filesystem::path& path,
                               const std::vector<double>& matrix, int dim) {
  std::string out = "MADM";
  detail::put<std::int32_t>(out, dim);
  for (double v : matrix) detail::put<double>(out, v);
  write_file_atomic(path, out);
}

inline std::pair<std::vector<double>, int> load_mixing_matrix(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 4 || bytes.substr(0, 4) != "MADM") {
    throw IoError("mixing matrix: bad magic in '" + path.string() + "'");
  }
  std::size_t pos = 4;
  const auto dim = detail::take<std::int32_t>(bytes, pos);
  if (dim <= 0) throw IoError("mixing matrix: nonpositive dimension");
  std::vector<double> m(static_cast<std::size_t>(dim) * static_cast<std::size_t>(dim));
  for (auto& v : m) v = detail::take<double>(bytes, pos);
  if (pos != bytes.size()) throw IoError("mixing matrix: trailing bytes");
  return {std::move(m), dim};
}

}  // namespace madf
