#include "neuroretrieve/visual.hpp"

#include <algorithm>
#include <cmath>

#include "neuroretrieve/error.hpp"

namespace nr::visual {

using diff::ParamStore;
using diff::Tape;
using diff::Var;
using diff::VarMap;

void validate(const VisualConfig& cfg) {
  if (cfg.dim < 1) fail(Errc::invalid_argument, "visual dim must be >= 1");
  if (cfg.side < 8 || cfg.side % 8 != 0) {
    fail(Errc::invalid_argument,
         "visual side must be a positive multiple of 8, got " +
             std::to_string(cfg.side));
  }
}

namespace {

constexpr std::size_t kStageChannels[] = {1, 8, 16, 32};

std::size_t head_inputs(const VisualConfig& cfg) {
  const std::size_t pooled = cfg.side / 8;
  return kStageChannels[3] * pooled * pooled;
}

Var lookup(const VarMap& params, const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end()) {
    fail(Errc::missing_field, "parameter '" + name + "' not provided");
  }
  return it->second;
}

Tensor as_chw(const Tensor& pixels) {
  if (pixels.rank() == 2) {
    return Tensor({1, pixels.dim(0), pixels.dim(1)}, pixels.vec());
  }
  if (pixels.rank() == 3) return pixels;
  fail(Errc::shape_mismatch,
       "pixels must be HxW or CxHxW, got " + pixels.shape_str());
}

}  // namespace

void init_params(ParamStore& store, const VisualConfig& cfg,
                 std::uint64_t seed) {
  validate(cfg);
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const std::size_t c_in = kStageChannels[stage];
    const std::size_t c_out = kStageChannels[stage + 1];
    const std::string w = "img.conv" + std::to_string(stage + 1) + ".w";
    const std::string b = "img.conv" + std::to_string(stage + 1) + ".b";
    store.add(w, diff::glorot_init({c_out, c_in, 3, 3}, c_in * 9, c_out * 9,
                                   seed, w));
    store.add(b, Tensor::zeros({c_out}));
  }
  const std::size_t flat = head_inputs(cfg);
  store.add("img.head.w",
            diff::glorot_init({cfg.dim, flat}, flat, cfg.dim, seed, "img.head.w"));
  store.add("img.head.b", Tensor::zeros({cfg.dim}));
}

Var encode_image(Tape& tape, const Tensor& pixels, const VarMap& params,
                 const VisualConfig& cfg) {
  validate(cfg);
  const Tensor chw = as_chw(pixels);
  if (chw.dim(0) != 1 || chw.dim(1) != cfg.side || chw.dim(2) != cfg.side) {
    fail(Errc::shape_mismatch,
         "expected 1x" + std::to_string(cfg.side) + "x" +
             std::to_string(cfg.side) + " pixels, got " + chw.shape_str());
  }
  Var x = tape.constant(chw);
  for (std::size_t stage = 1; stage <= 3; ++stage) {
    const std::string prefix = "img.conv" + std::to_string(stage);
    x = tape.conv2d(x, lookup(params, prefix + ".w"), lookup(params, prefix + ".b"));
    x = tape.relu(x);
    x = tape.avgpool2(x);
  }
  return tape.affine_vec(tape.flatten(x), lookup(params, "img.head.w"),
                         lookup(params, "img.head.b"));
}

Tensor encode_image_value(const Tensor& pixels, const ParamStore& params,
                          const VisualConfig& cfg) {
  Tape tape;
  VarMap vars;
  for (const auto& [name, tensor] : params.values) {
    vars.emplace(name, tape.constant(tensor));
  }
  return tape.value(encode_image(tape, pixels, vars, cfg));
}

Tensor encode_from_cache(const std::string& pair_id,
                         const dataio::EmbeddingCache& cache,
                         std::size_t expected_dim) {
  if (cache.dim != expected_dim) {
    fail(Errc::dim_mismatch, "cache stores " + std::to_string(cache.dim) +
                                 "-wide vectors, model expects " +
                                 std::to_string(expected_dim));
  }
  return Tensor({cache.dim}, cache.vector_of(pair_id));
}

Tensor resize_to_model(const Tensor& pixels, std::size_t side) {
  if (side < 1) fail(Errc::invalid_argument, "target side must be >= 1");
  const Tensor chw = as_chw(pixels);
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (h < 1 || w < 1) fail(Errc::shape_mismatch, "empty image");
  if (h == side && w == side) {
    return pixels.rank() == 3 ? pixels : chw;
  }
  Tensor out({c, side, side});
  const double sy = static_cast<double>(h) / static_cast<double>(side);
  const double sx = static_cast<double>(w) / static_cast<double>(side);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < side; ++oy) {
      const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0,
                                   static_cast<double>(h - 1));
      const std::size_t y0 = static_cast<std::size_t>(fy);
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - static_cast<double>(y0);
      for (std::size_t ox = 0; ox < side; ++ox) {
        const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0,
                                     static_cast<double>(w - 1));
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - static_cast<double>(x0);
        const double top = chw.at(ch, y0, x0) * (1.0 - wx) + chw.at(ch, y0, x1) * wx;
        const double bot = chw.at(ch, y1, x0) * (1.0 - wx) + chw.at(ch, y1, x1) * wx;
        out.at(ch, oy, ox) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace nr::visual
