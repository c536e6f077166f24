#include "neuroretrieve/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "neuroretrieve/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace nr::dataio {

using nlohmann::json;

namespace {

constexpr std::uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t read_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) fail(Errc::truncated, "short read in " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void expect_magic(std::istream& is, const char* magic, const std::string& path) {
  char got[4];
  is.read(got, 4);
  if (!is) fail(Errc::truncated, path + ": file shorter than magic");
  if (std::memcmp(got, magic, 4) != 0)
    fail(Errc::bad_magic, path + ": expected magic \"" + magic + "\", got \"" +
                              std::string(got, 4) + "\"");
}

void expect_version(std::istream& is, const std::string& path) {
  std::uint32_t v = read_u32(is, path + " version");
  if (v != kFormatVersion)
    fail(Errc::bad_version,
         path + ": format version " + std::to_string(v) + ", expected " +
             std::to_string(kFormatVersion));
}

void write_f32_payload(std::ostream& os, const Tensor& t) {
  std::vector<float> buf(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void read_f32_payload(std::istream& is, Tensor& t, const std::string& path) {
  std::vector<float> buf(t.size());
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != buf.size() * sizeof(float))
    fail(Errc::truncated, path + ": payload shorter than header promises (" +
                              std::to_string(is.gcount()) + " of " +
                              std::to_string(buf.size() * sizeof(float)) + " bytes)");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(buf[i]))
      fail(Errc::non_finite, path + ": non-finite value at element " + std::to_string(i));
    t.vec()[i] = static_cast<double>(buf[i]);
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(Errc::io_failure, "cannot open for writing: " + path);
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::io_failure, "cannot open for reading: " + path);
  return is;
}

json parse_line(const std::string& line, const std::string& where) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    fail(Errc::invalid_argument, where + ": not a JSON object: " + line);
  return j;
}

void reject_unknown_fields(const json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      fail(Errc::unknown_field, where + ": unknown field \"" + it.key() + "\"");
}

std::unordered_map<std::string, std::size_t> read_ids_sidecar(const std::string& path,
                                                              std::size_t count) {
  std::ifstream is(path);
  if (!is) fail(Errc::io_failure, "cannot open ids sidecar: " + path);
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::string where = path + ":" + std::to_string(lineno);
    json j = parse_line(line, where);
    reject_unknown_fields(j, {"pair_id", "row"}, where);
    if (!j.contains("pair_id") || !j.contains("row"))
      fail(Errc::missing_field, where + ": need pair_id and row");
    std::string id = j["pair_id"].get<std::string>();
    std::size_t row = j["row"].get<std::size_t>();
    if (row >= count)
      fail(Errc::out_of_range, where + ": row " + std::to_string(row) + " >= count " +
                                   std::to_string(count));
    if (!index.emplace(id, row).second)
      fail(Errc::duplicate_id, where + ": duplicate pair_id \"" + id + "\"");
  }
  return index;
}

void write_ids_sidecar(const std::unordered_map<std::string, std::size_t>& index,
                       const std::string& path) {
  // Sorted by row so the sidecar is deterministic.
  std::vector<std::pair<std::size_t, std::string>> rows;
  rows.reserve(index.size());
  for (const auto& [id, row] : index) rows.emplace_back(row, id);
  std::sort(rows.begin(), rows.end());
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(Errc::io_failure, "cannot open ids sidecar for writing: " + path);
  for (const auto& [row, id] : rows) {
    json j;
    j["pair_id"] = id;
    j["row"] = row;
    os << j.dump() << "\n";
  }
}

}  // namespace

void quantize_to_f32(Tensor& t) {
  for (double& x : t.vec()) x = static_cast<double>(static_cast<float>(x));
}

void validate_clip(const EEGClip& clip) {
  if (clip.data.rank() != 2)
    fail(Errc::shape_mismatch, "clip data must be V x T, got " + clip.data.shape_str());
  if (clip.channels() < 1 || clip.samples() < 1)
    fail(Errc::invalid_argument, "clip needs V >= 1 and T >= 1, got " + clip.data.shape_str());
  if (clip.fs == 0) fail(Errc::invalid_argument, "clip sampling rate must be positive");
  if (!clip.data.all_finite()) fail(Errc::non_finite, "clip contains non-finite values");
}

EEGClip read_clip(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "EEGB", path);
  expect_version(is, path);
  std::uint32_t v = read_u32(is, path + " V");
  std::uint32_t t = read_u32(is, path + " T");
  std::uint32_t fs = read_u32(is, path + " fs");
  if (v == 0 || t == 0 || fs == 0)
    fail(Errc::invalid_argument, path + ": header has zero V, T, or fs");
  EEGClip clip;
  clip.pair_id = std::filesystem::path(path).stem().string();
  clip.fs = fs;
  clip.data = Tensor({v, t});
  read_f32_payload(is, clip.data, path);
  return clip;
}

void write_clip(const EEGClip& clip, const std::string& path) {
  validate_clip(clip);
  auto os = open_out(path);
  os.write("EEGB", 4);
  write_u32(os, kFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(clip.channels()));
  write_u32(os, static_cast<std::uint32_t>(clip.samples()));
  write_u32(os, clip.fs);
  write_f32_payload(os, clip.data);
  if (!os) fail(Errc::io_failure, "write failed: " + path);
}

const ManifestEntry& PairManifest::entry(const std::string& pair_id) const {
  auto it = index.find(pair_id);
  if (it == index.end()) fail(Errc::not_found, "pair_id \"" + pair_id + "\" not in manifest");
  return entries[it->second];
}

std::vector<std::string> PairManifest::class_labels() const {
  std::set<std::string> labels;
  for (const auto& e : entries) labels.insert(e.class_label);
  return {labels.begin(), labels.end()};
}

PairManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(Errc::io_failure, "cannot open manifest: " + path);
  PairManifest m;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::string where = path + ":" + std::to_string(lineno);
    json j = parse_line(line, where);
    if (!have_header) {
      reject_unknown_fields(j, {"format", "version", "n_sets"}, where);
      for (const char* f : {"format", "version", "n_sets"})
        if (!j.contains(f)) fail(Errc::missing_field, where + ": header missing \"" + f + "\"");
      if (j["format"].get<std::string>() != "pair-manifest")
        fail(Errc::bad_magic, where + ": not a pair-manifest header");
      if (j["version"].get<std::uint32_t>() != kFormatVersion)
        fail(Errc::bad_version, where + ": unsupported manifest version");
      m.n_sets = j["n_sets"].get<std::uint32_t>();
      if (m.n_sets == 0) fail(Errc::invalid_argument, where + ": n_sets must be >= 1");
      have_header = true;
      continue;
    }
    reject_unknown_fields(j, {"pair_id", "eeg_path", "image_ref", "class_label", "set_id"},
                          where);
    for (const char* f : {"pair_id", "eeg_path", "image_ref", "class_label", "set_id"})
      if (!j.contains(f)) fail(Errc::missing_field, where + ": missing field \"" + f + "\"");
    ManifestEntry e;
    e.pair_id = j["pair_id"].get<std::string>();
    e.eeg_path = j["eeg_path"].get<std::string>();
    if (j["image_ref"].is_string())
      e.image_ref = j["image_ref"].get<std::string>();
    else if (j["image_ref"].is_number_unsigned())
      e.image_ref = j["image_ref"].get<std::uint32_t>();
    else
      fail(Errc::invalid_argument, where + ": image_ref must be a path or a row index");
    e.class_label = j["class_label"].get<std::string>();
    if (!j["set_id"].is_number_unsigned())
      fail(Errc::out_of_range, where + ": set_id must be a non-negative integer");
    e.set_id = j["set_id"].get<std::uint32_t>();
    if (e.set_id >= m.n_sets)
      fail(Errc::out_of_range, where + ": set_id " + std::to_string(e.set_id) +
                                   " outside [0, " + std::to_string(m.n_sets) + ")");
    if (!m.index.emplace(e.pair_id, m.entries.size()).second)
      fail(Errc::duplicate_id, where + ": duplicate pair_id \"" + e.pair_id + "\"");
    m.entries.push_back(std::move(e));
  }
  if (!have_header) fail(Errc::missing_field, path + ": empty manifest (no header line)");
  return m;
}

void save_manifest(const PairManifest& manifest, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(Errc::io_failure, "cannot open manifest for writing: " + path);
  json header;
  header["format"] = "pair-manifest";
  header["version"] = kFormatVersion;
  header["n_sets"] = manifest.n_sets;
  os << header.dump() << "\n";
  for (const auto& e : manifest.entries) {
    json j;
    j["pair_id"] = e.pair_id;
    j["eeg_path"] = e.eeg_path;
    if (std::holds_alternative<std::string>(e.image_ref))
      j["image_ref"] = std::get<std::string>(e.image_ref);
    else
      j["image_ref"] = std::get<std::uint32_t>(e.image_ref);
    j["class_label"] = e.class_label;
    j["set_id"] = e.set_id;
    os << j.dump() << "\n";
  }
  if (!os) fail(Errc::io_failure, "write failed: " + path);
}

std::size_t EmbeddingCache::row_of(const std::string& pair_id) const {
  auto it = id_index.find(pair_id);
  if (it == id_index.end())
    fail(Errc::not_found, "pair_id \"" + pair_id + "\" not in embedding cache");
  return it->second;
}

std::vector<double> EmbeddingCache::vector_of(const std::string& pair_id) const {
  std::size_t row = row_of(pair_id);
  const double* p = vectors.data() + row * dim;
  return std::vector<double>(p, p + dim);
}

EmbeddingCache read_embeddings(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "EMBV", path);
  expect_version(is, path);
  std::uint32_t count = read_u32(is, path + " count");
  std::uint32_t dim = read_u32(is, path + " dim");
  if (dim == 0) fail(Errc::invalid_argument, path + ": dim must be >= 1");
  EmbeddingCache cache;
  cache.dim = dim;
  cache.vectors = Tensor({count, dim});
  read_f32_payload(is, cache.vectors, path);
  cache.id_index = read_ids_sidecar(path + ".ids", count);
  return cache;
}

void write_embeddings(const EmbeddingCache& cache, const std::string& path) {
  if (cache.vectors.rank() != 2 || cache.vectors.dim(1) != cache.dim)
    fail(Errc::shape_mismatch, "embedding cache vectors must be count x dim");
  if (!cache.vectors.all_finite())
    fail(Errc::non_finite, "embedding cache contains non-finite values");
  auto os = open_out(path);
  os.write("EMBV", 4);
  write_u32(os, kFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(cache.count()));
  write_u32(os, cache.dim);
  write_f32_payload(os, cache.vectors);
  if (!os) fail(Errc::io_failure, "write failed: " + path);
  write_ids_sidecar(cache.id_index, path + ".ids");
}

void save_checkpoint(const NamedTensors& tensors, const std::string& path) {
  auto os = open_out(path);
  os.write("CKPT", 4);
  write_u32(os, kFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  // std::map iterates in lexicographic key order, which pins the layout.
  for (const auto& [name, t] : tensors) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) fail(Errc::io_failure, "write failed: " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "CKPT", path);
  expect_version(is, path);
  std::uint32_t count = read_u32(is, path + " tensor count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = read_u32(is, path + " name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) fail(Errc::truncated, path + ": truncated tensor name");
    std::uint32_t ndim = read_u32(is, path + " ndim");
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = read_u32(is, path + " dim");
    Tensor t{shape};
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (static_cast<std::size_t>(is.gcount()) != t.size() * sizeof(double))
      fail(Errc::truncated, path + ": truncated payload for tensor \"" + name + "\"");
    if (!t.all_finite())
      fail(Errc::non_finite, path + ": non-finite values in tensor \"" + name + "\"");
    if (!out.emplace(name, std::move(t)).second)
      fail(Errc::duplicate_id, path + ": duplicate tensor name \"" + name + "\"");
  }
  return out;
}

void check_checkpoint_shapes(const NamedTensors& loaded, const ShapeTable& expected,
                             LoadMode mode) {
  for (const auto& [name, t] : loaded) {
    auto it = expected.find(name);
    if (it == expected.end())
      fail(Errc::not_found, "checkpoint tensor \"" + name + "\" unknown to this model");
    if (t.shape() != it->second) {
      Tensor want{it->second};
      fail(Errc::shape_mismatch, "checkpoint tensor \"" + name + "\" has shape " +
                                     t.shape_str() + ", model expects " + want.shape_str());
    }
  }
  if (mode == LoadMode::exact) {
    for (const auto& [name, shape] : expected)
      if (!loaded.count(name))
        fail(Errc::missing_field, "checkpoint is missing tensor \"" + name + "\"");
  }
}

std::size_t ImageStore::row_of(const std::string& pair_id) const {
  auto it = id_index.find(pair_id);
  if (it == id_index.end())
    fail(Errc::not_found, "pair_id \"" + pair_id + "\" not in image store");
  return it->second;
}

Tensor ImageStore::image_of(const std::string& pair_id) const {
  std::size_t row = row_of(pair_id);
  Tensor img({1, side, side});
  const double* p = pixels.data() + row * side * side;
  std::copy(p, p + side * side, img.data());
  return img;
}

ImageStore read_images(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "IMGS", path);
  expect_version(is, path);
  std::uint32_t count = read_u32(is, path + " count");
  std::uint32_t side = read_u32(is, path + " side");
  if (side == 0) fail(Errc::invalid_argument, path + ": side must be >= 1");
  ImageStore store;
  store.side = side;
  store.pixels = Tensor({count, side, side});
  read_f32_payload(is, store.pixels, path);
  store.id_index = read_ids_sidecar(path + ".ids", count);
  return store;
}

void write_images(const ImageStore& store, const std::string& path) {
  if (store.pixels.rank() != 3 || store.pixels.dim(1) != store.side ||
      store.pixels.dim(2) != store.side)
    fail(Errc::shape_mismatch, "image store pixels must be count x side x side");
  if (!store.pixels.all_finite())
    fail(Errc::non_finite, "image store contains non-finite values");
  auto os = open_out(path);
  os.write("IMGS", 4);
  write_u32(os, kFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(store.count()));
  write_u32(os, store.side);
  write_f32_payload(os, store.pixels);
  if (!os) fail(Errc::io_failure, "write failed: " + path);
  write_ids_sidecar(store.id_index, path + ".ids");
}

}  // namespace nr::dataio
