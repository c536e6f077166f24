#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <string>

#include "doctest.h"
#include "neuroretrieve/dataio.hpp"
#include "neuroretrieve/error.hpp"
#include "neuroretrieve/rng.hpp"

namespace fs = std::filesystem;
namespace io = nr::dataio;
using nr::Errc;
using nr::Error;
using nr::Tensor;

namespace {

// Fresh scratch directory per test run; removed on destruction.
struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("nr_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected nr::Error");
  return Errc::io_failure;
}

io::EEGClip small_clip() {
  io::EEGClip clip;
  clip.pair_id = "pair-000";
  clip.fs = 128;
  clip.class_label = "cat";
  clip.data = Tensor({2, 4}, {0.5, -1.25, 2.0, 0.75, -0.5, 1.5, -2.25, 0.125});
  return clip;
}

}  // namespace

TEST_CASE("clip round-trip is bit-exact") {
  TempDir tmp;
  io::EEGClip clip = small_clip();
  io::write_clip(clip, tmp.file("a.eeg"));
  io::EEGClip back = io::read_clip(tmp.file("a.eeg"));
  CHECK(back.pair_id == "a");  // pair identity comes from the filename stem
  CHECK(back.fs == clip.fs);
  CHECK(back.data == clip.data);

  // Arbitrary doubles survive once quantized to the float32 grid.
  nr::Rng rng(1);
  io::EEGClip noisy;
  noisy.pair_id = "pair-001";
  noisy.fs = 1024;
  noisy.data = Tensor({3, 7});
  for (std::size_t i = 0; i < noisy.data.size(); ++i) noisy.data[i] = rng.normal();
  io::quantize_to_f32(noisy.data);
  io::write_clip(noisy, tmp.file("b.eeg"));
  CHECK(io::read_clip(tmp.file("b.eeg")).data == noisy.data);
}

TEST_CASE("clip reader rejects bad magic, bad version, truncation, non-finite") {
  TempDir tmp;
  io::write_clip(small_clip(), tmp.file("ok.eeg"));

  SUBCASE("bad magic") {
    std::ofstream out(tmp.file("bad.eeg"), std::ios::binary);
    out << "XXXX";
    out.write("\0\0\0\0\0\0\0\0\0\0\0\0", 12);
    out.close();
    CHECK(code_of([&] { io::read_clip(tmp.file("bad.eeg")); }) == Errc::bad_magic);
  }
  SUBCASE("bad version") {
    std::ifstream in(tmp.file("ok.eeg"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    bytes[4] = 9;  // version field
    std::ofstream(tmp.file("v9.eeg"), std::ios::binary) << bytes;
    CHECK(code_of([&] { io::read_clip(tmp.file("v9.eeg")); }) == Errc::bad_version);
  }
  SUBCASE("truncated payload") {
    std::ifstream in(tmp.file("ok.eeg"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    bytes.resize(bytes.size() - 6);
    std::ofstream(tmp.file("cut.eeg"), std::ios::binary) << bytes;
    CHECK(code_of([&] { io::read_clip(tmp.file("cut.eeg")); }) == Errc::truncated);
  }
  SUBCASE("non-finite payload") {
    io::EEGClip clip = small_clip();
    clip.data[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK(code_of([&] { io::write_clip(clip, tmp.file("nan.eeg")); }) == Errc::non_finite);
  }
  SUBCASE("missing file") {
    CHECK(code_of([&] { io::read_clip(tmp.file("nope.eeg")); }) == Errc::io_failure);
  }
}

TEST_CASE("manifest load validates entries") {
  TempDir tmp;
  auto write_lines = [&](const std::string& name, const std::string& body) {
    std::ofstream(tmp.file(name)) << body;
    return tmp.file(name);
  };
  const std::string header = R"({"format":"pair-manifest","version":1,"n_sets":2})"
                             "\n";

  SUBCASE("three valid lines") {
    std::string p = write_lines(
        "ok.jsonl",
        header +
            R"({"pair_id":"a","eeg_path":"a.eeg","image_ref":"a.png","class_label":"cat","set_id":0})"
            "\n" +
            R"({"pair_id":"b","eeg_path":"b.eeg","image_ref":3,"class_label":"dog","set_id":1})"
            "\n" +
            R"({"pair_id":"c","eeg_path":"c.eeg","image_ref":"c.png","class_label":"cat","set_id":0})"
            "\n");
    io::PairManifest m = io::load_manifest(p);
    CHECK(m.n_sets == 2);
    REQUIRE(m.entries.size() == 3);
    CHECK(m.entry("b").eeg_path == "b.eeg");
    CHECK(std::get<std::uint32_t>(m.entry("b").image_ref) == 3);
    CHECK(m.class_labels() == std::vector<std::string>{"cat", "dog"});
    // set_ids partition the entries
    std::set<std::string> seen;
    for (const auto& e : m.entries) seen.insert(e.pair_id);
    CHECK(seen.size() == m.entries.size());
  }
  SUBCASE("duplicate pair_id names the offender") {
    std::string p = write_lines(
        "dup.jsonl",
        header +
            R"({"pair_id":"a","eeg_path":"a.eeg","image_ref":"a.png","class_label":"x","set_id":0})"
            "\n" +
            R"({"pair_id":"a","eeg_path":"b.eeg","image_ref":"b.png","class_label":"x","set_id":1})"
            "\n");
    try {
      io::load_manifest(p);
      FAIL("expected duplicate_id");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::duplicate_id);
      CHECK(std::string(e.what()).find("\"a\"") != std::string::npos);
    }
  }
  SUBCASE("set_id == n_sets is out of range") {
    std::string p = write_lines(
        "range.jsonl",
        header +
            R"({"pair_id":"a","eeg_path":"a.eeg","image_ref":"a.png","class_label":"x","set_id":2})"
            "\n");
    CHECK(code_of([&] { io::load_manifest(p); }) == Errc::out_of_range);
  }
  SUBCASE("unknown field rejected") {
    std::string p = write_lines(
        "unk.jsonl",
        header +
            R"({"pair_id":"a","eeg_path":"a.eeg","image_ref":"a.png","class_label":"x","set_id":0,"extra":1})"
            "\n");
    CHECK(code_of([&] { io::load_manifest(p); }) == Errc::unknown_field);
  }
  SUBCASE("missing field rejected") {
    std::string p = write_lines(
        "miss.jsonl",
        header + R"({"pair_id":"a","eeg_path":"a.eeg","class_label":"x","set_id":0})"
                 "\n");
    CHECK(code_of([&] { io::load_manifest(p); }) == Errc::missing_field);
  }
}

TEST_CASE("manifest round-trip preserves entries and order") {
  TempDir tmp;
  io::PairManifest m;
  m.n_sets = 3;
  for (int i = 0; i < 7; ++i) {
    io::ManifestEntry e;
    e.pair_id = "p" + std::to_string(i);
    e.eeg_path = "clips/p" + std::to_string(i) + ".eeg";
    if (i % 2 == 0)
      e.image_ref = static_cast<std::uint32_t>(i);
    else
      e.image_ref = "img/p" + std::to_string(i) + ".png";
    e.class_label = "c" + std::to_string(i % 3);
    e.set_id = static_cast<std::uint32_t>(i % 3);
    m.entries.push_back(e);
    m.index[e.pair_id] = m.entries.size() - 1;
  }
  io::save_manifest(m, tmp.file("m.jsonl"));
  io::PairManifest back = io::load_manifest(tmp.file("m.jsonl"));
  REQUIRE(back.entries.size() == m.entries.size());
  CHECK(back.n_sets == 3);
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    CHECK(back.entries[i].pair_id == m.entries[i].pair_id);
    CHECK(back.entries[i].image_ref == m.entries[i].image_ref);
    CHECK(back.entries[i].set_id == m.entries[i].set_id);
  }
}

TEST_CASE("embedding cache round-trip and lookups") {
  TempDir tmp;
  io::EmbeddingCache cache;
  cache.dim = 128;
  cache.vectors = Tensor({5, 128});
  nr::Rng rng(2);
  for (std::size_t i = 0; i < cache.vectors.size(); ++i) cache.vectors[i] = rng.normal();
  io::quantize_to_f32(cache.vectors);
  for (int i = 0; i < 5; ++i) cache.id_index["emb" + std::to_string(i)] = static_cast<std::size_t>(i);

  io::write_embeddings(cache, tmp.file("e.emb"));
  io::EmbeddingCache back = io::read_embeddings(tmp.file("e.emb"));
  CHECK(back.dim == 128);
  CHECK(back.vectors == cache.vectors);
  CHECK(back.row_of("emb3") == 3);
  CHECK(back.vector_of("emb4").size() == 128);
  CHECK(code_of([&] { back.row_of("missing"); }) == Errc::not_found);
}

TEST_CASE("checkpoint round-trip is bit-identical and order-independent") {
  TempDir tmp;
  io::NamedTensors params;
  nr::Rng rng(3);
  params["enc.w1"] = Tensor({3, 4});
  params["enc.b1"] = Tensor({4});
  params["proj.w"] = Tensor({4, 2});
  for (auto& [name, t] : params)
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();

  io::save_checkpoint(params, tmp.file("a.ckpt"));
  io::NamedTensors back = io::load_checkpoint(tmp.file("a.ckpt"));
  REQUIRE(back.size() == params.size());
  for (const auto& [name, t] : params) CHECK(back.at(name) == t);

  // Same contents -> identical bytes (serialization is name-sorted).
  io::save_checkpoint(back, tmp.file("b.ckpt"));
  std::ifstream fa(tmp.file("a.ckpt"), std::ios::binary);
  std::ifstream fb(tmp.file("b.ckpt"), std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(fa)), {});
  std::string bb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(ba == bb);
}

TEST_CASE("checkpoint shape checking") {
  io::NamedTensors loaded;
  loaded["enc.w"] = Tensor({16, 8});
  loaded["proj.w"] = Tensor({8, 4});

  io::ShapeTable expected;
  expected["enc.w"] = {16, 8};
  expected["proj.w"] = {8, 4};

  SUBCASE("exact match passes") {
    io::check_checkpoint_shapes(loaded, expected, io::LoadMode::exact);
  }
  SUBCASE("wrong shape names the tensor") {
    expected["enc.w"] = {32, 8};  // model built with different V
    try {
      io::check_checkpoint_shapes(loaded, expected, io::LoadMode::exact);
      FAIL("expected shape_mismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::shape_mismatch);
      CHECK(std::string(e.what()).find("enc.w") != std::string::npos);
    }
  }
  SUBCASE("encoder-only checkpoint loads in subset mode") {
    io::NamedTensors encoder_only;
    encoder_only["enc.w"] = Tensor({16, 8});
    CHECK_THROWS_AS(
        io::check_checkpoint_shapes(encoder_only, expected, io::LoadMode::exact), Error);
    io::check_checkpoint_shapes(encoder_only, expected, io::LoadMode::subset);
  }
  SUBCASE("tensor unknown to the model is rejected in both modes") {
    loaded["stray"] = Tensor({1});
    CHECK(code_of([&] {
            io::check_checkpoint_shapes(loaded, expected, io::LoadMode::subset);
          }) == Errc::not_found);
  }
}

TEST_CASE("image store round-trip") {
  TempDir tmp;
  io::ImageStore store;
  store.side = 8;
  store.pixels = Tensor({3, 8, 8});
  nr::Rng rng(4);
  for (std::size_t i = 0; i < store.pixels.size(); ++i) store.pixels[i] = rng.uniform();
  io::quantize_to_f32(store.pixels);
  for (int i = 0; i < 3; ++i) store.id_index["im" + std::to_string(i)] = static_cast<std::size_t>(i);

  io::write_images(store, tmp.file("i.img"));
  io::ImageStore back = io::read_images(tmp.file("i.img"));
  CHECK(back.side == 8);
  CHECK(back.pixels == store.pixels);
  Tensor one = back.image_of("im1");
  REQUIRE(one.rank() == 3);
  CHECK(one.dim(0) == 1);
  CHECK(one.dim(1) == 8);
  CHECK(one.at(0, 2, 3) == store.pixels.at(1, 2, 3));
}

TEST_CASE("quantize_to_f32 makes doubles float32-representable") {
  Tensor t({3}, {0.1, 1.0 / 3.0, -2.7182818284590452});
  io::quantize_to_f32(t);
  for (std::size_t i = 0; i < t.size(); ++i)
    CHECK(static_cast<double>(static_cast<float>(t[i])) == t[i]);
}
