#include "wsd/bag.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "wsd/error.hpp"

namespace wsd {

namespace {

constexpr char kMagic[4] = {'W', 'S', 'D', 'B'};
constexpr uint16_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& off, const std::string& path) {
  if (off + sizeof(T) > in.size()) {
    throw FormatError(path + ": truncated file");
  }
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(path + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(path + ": write failed");
}

std::string stem_of(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

Bag parse_wsdb(const std::string& bytes, const std::string& path) {
  size_t off = 0;
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(path + ": bad magic");
  }
  off = 4;
  const uint16_t version = take<uint16_t>(bytes, off, path);
  if (version != kVersion) {
    throw FormatError(path + ": unsupported version " + std::to_string(version));
  }
  Bag bag;
  bag.id = stem_of(path);
  bag.label = take<uint16_t>(bytes, off, path);
  bag.n = take<uint32_t>(bytes, off, path);
  bag.d = take<uint32_t>(bytes, off, path);
  if (bag.n < 1) throw DataError(path + ": bag has no instances");
  if (bag.d < 1) throw DataError(path + ": bag has no feature dimensions");
  bag.coords.resize(static_cast<size_t>(bag.n));
  for (auto& rc : bag.coords) {
    rc[0] = take<int32_t>(bytes, off, path);
    rc[1] = take<int32_t>(bytes, off, path);
  }
  bag.embeddings.resize(static_cast<size_t>(bag.n * bag.d));
  for (double& x : bag.embeddings) {
    x = static_cast<double>(take<float>(bytes, off, path));
  }
  if (off != bytes.size()) throw FormatError(path + ": trailing bytes");
  return bag;
}

Bag parse_csv(const std::string& text, const std::string& path) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("row,col", 0) != 0) {
    throw FormatError(path + ": expected CSV header starting with 'row,col'");
  }
  int64_t d = -1;
  {
    d = 0;
    for (char c : line) {
      if (c == ',') d++;
    }
    d -= 1;  // row,col take the first two fields
    if (d < 1) throw FormatError(path + ": header declares no feature columns");
  }
  Bag bag;
  bag.id = stem_of(path);
  bag.d = d;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::array<int32_t, 2> rc{};
    for (int k = 0; k < 2; ++k) {
      if (!std::getline(row, cell, ',')) throw FormatError(path + ": short row");
      rc[static_cast<size_t>(k)] = static_cast<int32_t>(std::stol(cell));
    }
    bag.coords.push_back(rc);
    for (int64_t k = 0; k < d; ++k) {
      if (!std::getline(row, cell, ',')) throw FormatError(path + ": short row");
      bag.embeddings.push_back(static_cast<double>(std::strtof(cell.c_str(), nullptr)));
    }
    if (std::getline(row, cell, ',')) throw FormatError(path + ": extra fields in row");
  }
  bag.n = static_cast<int64_t>(bag.coords.size());
  if (bag.n < 1) throw DataError(path + ": bag has no instances");
  return bag;
}

}  // namespace

void validate_bag(const Bag& bag) {
  if (bag.n < 1) throw ArgumentError("bag " + bag.id + ": needs at least one instance");
  if (bag.d < 1) throw ArgumentError("bag " + bag.id + ": needs at least one feature");
  if (static_cast<int64_t>(bag.embeddings.size()) != bag.n * bag.d) {
    throw ArgumentError("bag " + bag.id + ": embedding buffer does not match n*d");
  }
  if (static_cast<int64_t>(bag.coords.size()) != bag.n) {
    throw ArgumentError("bag " + bag.id + ": coord count does not match n");
  }
  for (double x : bag.embeddings) {
    if (!std::isfinite(x)) throw DataError("bag " + bag.id + ": non-finite embedding value");
  }
  std::set<std::pair<int32_t, int32_t>> seen;
  for (const auto& rc : bag.coords) {
    if (!seen.insert({rc[0], rc[1]}).second) {
      throw DataError("bag " + bag.id + ": duplicate coordinates (" + std::to_string(rc[0]) +
                      "," + std::to_string(rc[1]) + ")");
    }
  }
  if (bag.label < 0) throw ArgumentError("bag " + bag.id + ": negative label");
}

Bag read_bag(const std::string& path) {
  const std::string bytes = read_file(path);
  Bag bag;
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0) {
    bag = parse_wsdb(bytes, path);
  } else {
    bag = parse_csv(bytes, path);
  }
  validate_bag(bag);
  return bag;
}

void write_bag(const Bag& bag, const std::string& path, BagFormat format) {
  validate_bag(bag);
  if (format == BagFormat::Wsdb) {
    if (bag.label > 0xffff) throw ArgumentError("bag " + bag.id + ": label exceeds u16");
    if (bag.n > 0xffffffffLL || bag.d > 0xffffffffLL) {
      throw ArgumentError("bag " + bag.id + ": dimensions exceed u32");
    }
    std::string out;
    out.reserve(static_cast<size_t>(16 + bag.n * 8 + bag.n * bag.d * 4));
    out.append(kMagic, 4);
    put<uint16_t>(out, kVersion);
    put<uint16_t>(out, static_cast<uint16_t>(bag.label));
    put<uint32_t>(out, static_cast<uint32_t>(bag.n));
    put<uint32_t>(out, static_cast<uint32_t>(bag.d));
    for (const auto& rc : bag.coords) {
      put<int32_t>(out, rc[0]);
      put<int32_t>(out, rc[1]);
    }
    for (double x : bag.embeddings) put<float>(out, static_cast<float>(x));
    write_file(path, out);
    return;
  }
  std::string out = "row,col";
  for (int64_t k = 0; k < bag.d; ++k) out += ",f" + std::to_string(k);
  out += "\n";
  char buf[64];
  for (int64_t i = 0; i < bag.n; ++i) {
    out += std::to_string(bag.coords[static_cast<size_t>(i)][0]);
    out += ",";
    out += std::to_string(bag.coords[static_cast<size_t>(i)][1]);
    for (int64_t k = 0; k < bag.d; ++k) {
      // %.9g round-trips the on-disk f32 value exactly.
      std::snprintf(buf, sizeof(buf), ",%.9g",
                    static_cast<double>(static_cast<float>(bag.embeddings[static_cast<size_t>(i * bag.d + k)])));
      out += buf;
    }
    out += "\n";
  }
  write_file(path, out);
}

DatasetManifest read_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": invalid manifest JSON: " + e.what());
  }
  DatasetManifest m;
  try {
    m.num_classes = j.at("num_classes").get<int64_t>();
    m.feature_dim = j.at("feature_dim").get<int64_t>();
    for (const auto& e : j.at("bags")) {
      m.bags.push_back({e.at("path").get<std::string>(), e.at("label").get<int64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": manifest missing required keys: " + e.what());
  }
  if (m.num_classes < 2) throw FormatError(path + ": num_classes must be >= 2");
  if (m.feature_dim < 1) throw FormatError(path + ": feature_dim must be >= 1");
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  nlohmann::json j;
  j["num_classes"] = manifest.num_classes;
  j["feature_dim"] = manifest.feature_dim;
  j["bags"] = nlohmann::json::array();
  for (const auto& e : manifest.bags) {
    j["bags"].push_back({{"path", e.path}, {"label", e.label}});
  }
  write_file(path, j.dump(2) + "\n");
}

std::vector<Bag> load_dataset(const std::string& manifest_path, const DatasetManifest& manifest) {
  const auto base = std::filesystem::path(manifest_path).parent_path();
  std::vector<Bag> bags;
  bags.reserve(manifest.bags.size());
  for (const auto& entry : manifest.bags) {
    const auto full = (base / entry.path).string();
    if (!std::filesystem::exists(full)) {
      throw ArgumentError("manifest references missing file " + full);
    }
    Bag bag = read_bag(full);
    if (bag.d != manifest.feature_dim) {
      throw DataError(full + ": feature_dim " + std::to_string(bag.d) +
                      " does not match manifest " + std::to_string(manifest.feature_dim));
    }
    if (entry.label < 0 || entry.label >= manifest.num_classes) {
      throw DataError(full + ": label " + std::to_string(entry.label) + " out of range");
    }
    bag.label = entry.label;
    bags.push_back(std::move(bag));
  }
  return bags;
}

}  // namespace wsd
