#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "neuroretrieve/tensor.hpp"

namespace nr::dataio {

// One V x T multichannel recording. Values live in float64 in memory; the
// on-disk payload is float32, so anything read from disk round-trips exactly.
struct EEGClip {
  std::string pair_id;
  Tensor data;  // V x T, microvolts
  std::uint32_t fs = 0;
  std::optional<std::string> class_label;

  std::size_t channels() const { return data.rank() == 2 ? data.dim(0) : 0; }
  std::size_t samples() const { return data.rank() == 2 ? data.dim(1) : 0; }
};

void validate_clip(const EEGClip& clip);

// Clip file: magic "EEGB" | u32 version=1 | u32 V | u32 T | u32 fs |
// V*T float32 little-endian, channel-major. The payload is id-free;
// read_clip sets pair_id to the filename stem, the manifest is authoritative.
EEGClip read_clip(const std::string& path);
void write_clip(const EEGClip& clip, const std::string& path);

// image_ref is either a path into an image store or a row index into an
// embedding cache.
using ImageRef = std::variant<std::string, std::uint32_t>;

struct ManifestEntry {
  std::string pair_id;
  std::string eeg_path;
  ImageRef image_ref;
  std::string class_label;
  std::uint32_t set_id = 0;
};

struct PairManifest {
  std::uint32_t n_sets = 0;
  std::vector<ManifestEntry> entries;
  std::unordered_map<std::string, std::size_t> index;  // pair_id -> entry

  const ManifestEntry& entry(const std::string& pair_id) const;
  std::vector<std::string> class_labels() const;  // distinct, sorted
};

// Line-delimited JSON. First line is a header object
// {"format":"pair-manifest","version":1,"n_sets":K}; each following line is
// one entry object with exactly the fields of ManifestEntry.
PairManifest load_manifest(const std::string& path);
void save_manifest(const PairManifest& manifest, const std::string& path);

struct EmbeddingCache {
  std::uint32_t dim = 0;
  Tensor vectors;  // count x dim
  std::unordered_map<std::string, std::size_t> id_index;

  std::size_t count() const { return vectors.rank() == 2 ? vectors.dim(0) : 0; }
  std::size_t row_of(const std::string& pair_id) const;  // throws not_found
  std::vector<double> vector_of(const std::string& pair_id) const;
};

// Cache file: magic "EMBV" | u32 version=1 | u32 count | u32 dim |
// count*dim float32 rows. The binary payload is id-free; pair_id -> row
// lives in a JSONL sidecar at "<path>.ids" with lines {"pair_id":..,"row":..}.
EmbeddingCache read_embeddings(const std::string& path);
void write_embeddings(const EmbeddingCache& cache, const std::string& path);

// Named float64 tensors; serialized in lexicographic name order so equal
// contents produce equal bytes.
using NamedTensors = std::map<std::string, Tensor>;

// Checkpoint file: magic "CKPT" | u32 version=1 | u32 count | per tensor:
// u32 name_len | name bytes | u32 ndim | u32 dims[] | float64 data.
void save_checkpoint(const NamedTensors& tensors, const std::string& path);
NamedTensors load_checkpoint(const std::string& path);

enum class LoadMode {
  exact,   // loaded names must equal expected names
  subset,  // loaded names must be a subset (partial load, e.g. encoder-only)
};

using ShapeTable = std::map<std::string, std::vector<std::size_t>>;

// Shape-checks a loaded checkpoint against a model's expected shapes.
// Throws shape_mismatch naming the offending tensor.
void check_checkpoint_shapes(const NamedTensors& loaded, const ShapeTable& expected,
                             LoadMode mode);

// Synthetic single-channel image store: magic "IMGS" | u32 version=1 |
// u32 count | u32 side | count*side*side float32 rows, plus the same ids
// sidecar convention as embedding caches.
struct ImageStore {
  std::uint32_t side = 0;
  Tensor pixels;  // count x side x side, values in [0,1]
  std::unordered_map<std::string, std::size_t> id_index;

  std::size_t count() const { return pixels.rank() == 3 ? pixels.dim(0) : 0; }
  std::size_t row_of(const std::string& pair_id) const;
  Tensor image_of(const std::string& pair_id) const;  // 1 x side x side
};

ImageStore read_images(const std::string& path);
void write_images(const ImageStore& store, const std::string& path);

// Rounds every element to the nearest float32 so a later write/read cycle
// reproduces the tensor bit-exactly.
void quantize_to_f32(Tensor& t);

}  // namespace nr::dataio
