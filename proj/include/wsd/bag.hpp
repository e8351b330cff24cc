#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace wsd {

// One slide's worth of instance embeddings with patch-grid coordinates.
// Embeddings are f32 on disk and promoted to f64 in memory.
struct Bag {
  std::string id;
  int64_t n = 0;
  int64_t d = 0;
  std::vector<double> embeddings;             // n x d row-major
  std::vector<std::array<int32_t, 2>> coords; // (row, col) per instance
  int64_t label = 0;
};

struct ManifestEntry {
  std::string path;  // relative to the manifest file
  int64_t label = 0;
};

struct DatasetManifest {
  int64_t num_classes = 0;
  int64_t feature_dim = 0;
  std::vector<ManifestEntry> bags;
};

enum class BagFormat { Wsdb, Csv };

// Throws DataError / ArgumentError when a Bag invariant fails.
void validate_bag(const Bag& bag);

// WSDB container (little-endian):
//   "WSDB" | u16 version=1 | u16 label | u32 n | u32 d        (16-byte header)
//   n x (i32 row, i32 col)
//   n x d f32, row-major
// CSV alternative: header "row,col,f0,...,f{d-1}"; the label travels in the
// manifest. read_bag sniffs the format from the magic bytes.
Bag read_bag(const std::string& path);
void write_bag(const Bag& bag, const std::string& path, BagFormat format = BagFormat::Wsdb);

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const DatasetManifest& manifest, const std::string& path);

// Loads every bag named by the manifest, applies manifest labels, and
// checks feature_dim and label ranges.
std::vector<Bag> load_dataset(const std::string& manifest_path, const DatasetManifest& manifest);

}  // namespace wsd
