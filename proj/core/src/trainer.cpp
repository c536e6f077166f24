#include "neuroretrieve/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "neuroretrieve/error.hpp"
#include "neuroretrieve/montage.hpp"
#include "neuroretrieve/pretrain.hpp"
#include "neuroretrieve/rng.hpp"

namespace nr::trainer {

namespace fs = std::filesystem;
using diff::ParamStore;
using diff::Tape;
using diff::Var;
using diff::VarMap;
using nlohmann::json;

namespace {

std::uint64_t as_u64(const json& v, const std::string& key) {
  if (!v.is_number_unsigned() && !v.is_number_integer()) {
    fail(Errc::invalid_argument, "config key '" + key + "' must be an integer");
  }
  if (v.is_number_integer() && v.get<std::int64_t>() < 0) {
    fail(Errc::invalid_argument, "config key '" + key + "' must be non-negative");
  }
  return v.get<std::uint64_t>();
}

std::size_t as_size(const json& v, const std::string& key) {
  return static_cast<std::size_t>(as_u64(v, key));
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) {
    fail(Errc::invalid_argument, "config key '" + key + "' must be a number");
  }
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) {
    fail(Errc::invalid_argument, "config key '" + key + "' must be true/false");
  }
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) {
    fail(Errc::invalid_argument, "config key '" + key + "' must be a string");
  }
  return v.get<std::string>();
}

std::vector<std::size_t> as_size_array(const json& v, const std::string& key) {
  if (!v.is_array()) {
    fail(Errc::invalid_argument, "config key '" + key + "' must be an array");
  }
  std::vector<std::size_t> out;
  for (const json& item : v) out.push_back(as_size(item, key));
  return out;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json_text.empty() ? json::object() : json::parse(json_text);
  } catch (const json::exception& e) {
    fail(Errc::invalid_argument, std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) fail(Errc::invalid_argument, "config must be a JSON object");

  RunConfig cfg;
  for (const auto& [key, v] : doc.items()) {
    if (key == "seed") cfg.seed = as_u64(v, key);
    else if (key == "batch") cfg.batch = as_size(v, key);
    else if (key == "epochs") cfg.epochs = as_size(v, key);
    else if (key == "optim.lr") cfg.optim.lr = as_double(v, key);
    else if (key == "optim.beta1") cfg.optim.beta1 = as_double(v, key);
    else if (key == "optim.beta2") cfg.optim.beta2 = as_double(v, key);
    else if (key == "optim.eps") cfg.optim.eps = as_double(v, key);
    else if (key == "encoder.blocks") cfg.enc.blocks = as_size(v, key);
    else if (key == "encoder.diffusion_steps") cfg.enc.diffusion_steps = as_size(v, key);
    else if (key == "encoder.lift_dim") cfg.enc.lift_dim = as_size(v, key);
    else if (key == "encoder.hidden_dim") cfg.enc.hidden_dim = as_size(v, key);
    else if (key == "encoder.embed_dim") cfg.enc.embed_dim = as_size(v, key);
    else if (key == "encoder.kernel") cfg.enc.kernel = as_size(v, key);
    else if (key == "encoder.dilations") cfg.enc.dilations = as_size_array(v, key);
    else if (key == "encoder.out_dim") cfg.enc.out_dim = as_size(v, key);
    else if (key == "encoder.readout_last_block_only") {
      cfg.enc.readout_last_block_only = as_bool(v, key);
    }
    else if (key == "visual.side") cfg.vis.side = as_size(v, key);
    else if (key == "visual.dim") cfg.vis.dim = as_size(v, key);
    else if (key == "visual.trainable") cfg.vis.trainable = as_bool(v, key);
    else if (key == "proj.joint_dim") cfg.joint_dim = as_size(v, key);
    else if (key == "loss.tau") cfg.tau = as_double(v, key);
    else if (key == "loss.strategy") {
      cfg.neg.strategy = crossmodal::parse_strategy(as_string(v, key));
    }
    else if (key == "loss.neg_samples") {
      if (v.is_string()) {
        if (v.get<std::string>() != "all") {
          fail(Errc::invalid_argument,
               "config key 'loss.neg_samples' must be an integer or \"all\"");
        }
        cfg.neg.sample_size = 0;
      } else {
        cfg.neg.sample_size = as_size(v, key);
      }
    }
    else if (key == "split.n_sets") cfg.n_sets = as_size(v, key);
    else if (key == "split.seed") cfg.split_seed = as_u64(v, key);
    else if (key == "split.fold") cfg.fold = as_size(v, key);
    else if (key == "montage.k") cfg.montage_k = as_size(v, key);
    else if (key == "montage.positions") cfg.positions_path = as_string(v, key);
    else if (key == "data.manifest") cfg.manifest_path = as_string(v, key);
    else if (key == "data.eeg_dir") cfg.eeg_dir = as_string(v, key);
    else if (key == "data.images") cfg.images_path = as_string(v, key);
    else if (key == "data.embeddings") cfg.embeddings_path = as_string(v, key);
    else if (key == "train.init_encoder") cfg.init_encoder = as_string(v, key);
    else if (key == "train.hold_out_class") cfg.hold_out_class = as_string(v, key);
    else if (key == "train.resume") cfg.resume = as_string(v, key);
    else if (key == "out.dir") cfg.out_dir = as_string(v, key);
    else if (key == "pretrain.past") cfg.pre_past = as_size(v, key);
    else if (key == "pretrain.horizon") cfg.pre_horizon = as_size(v, key);
    else if (key == "pretrain.stride") cfg.pre_stride = as_size(v, key);
    else if (key == "pretrain.epochs") cfg.pre_epochs = as_size(v, key);
    else if (key == "pretrain.batch") cfg.pre_batch = as_size(v, key);
    else fail(Errc::unknown_field, "unknown config key '" + key + "'");
  }

  if (cfg.batch < 1) fail(Errc::invalid_argument, "batch must be >= 1");
  if (cfg.tau <= 0.0) fail(Errc::invalid_argument, "loss.tau must be positive");
  if (cfg.joint_dim < 1) fail(Errc::invalid_argument, "proj.joint_dim must be >= 1");
  if (cfg.n_sets < 2) fail(Errc::invalid_argument, "split.n_sets must be >= 2");
  if (cfg.montage_k < 1) fail(Errc::invalid_argument, "montage.k must be >= 1");
  encoder::validate(cfg.enc);
  visual::validate(cfg.vis);
  return cfg;
}

std::string effective_config(const RunConfig& cfg) {
  json doc;
  doc["seed"] = cfg.seed;
  doc["batch"] = cfg.batch;
  doc["epochs"] = cfg.epochs;
  doc["optim.lr"] = cfg.optim.lr;
  doc["optim.beta1"] = cfg.optim.beta1;
  doc["optim.beta2"] = cfg.optim.beta2;
  doc["optim.eps"] = cfg.optim.eps;
  doc["encoder.blocks"] = cfg.enc.blocks;
  doc["encoder.diffusion_steps"] = cfg.enc.diffusion_steps;
  doc["encoder.lift_dim"] = cfg.enc.lift_dim;
  doc["encoder.hidden_dim"] = cfg.enc.hidden_dim;
  doc["encoder.embed_dim"] = cfg.enc.embed_dim;
  doc["encoder.kernel"] = cfg.enc.kernel;
  doc["encoder.dilations"] = cfg.enc.dilations;
  doc["encoder.out_dim"] = cfg.enc.out_dim;
  doc["encoder.readout_last_block_only"] = cfg.enc.readout_last_block_only;
  doc["visual.side"] = cfg.vis.side;
  doc["visual.dim"] = cfg.vis.dim;
  doc["visual.trainable"] = cfg.vis.trainable;
  doc["proj.joint_dim"] = cfg.joint_dim;
  doc["loss.tau"] = cfg.tau;
  doc["loss.strategy"] = crossmodal::strategy_name(cfg.neg.strategy);
  doc["loss.neg_samples"] = cfg.neg.sample_size;
  doc["split.n_sets"] = cfg.n_sets;
  doc["split.seed"] = cfg.split_seed;
  doc["split.fold"] = cfg.fold;
  doc["montage.k"] = cfg.montage_k;
  doc["montage.positions"] = cfg.positions_path;
  doc["data.manifest"] = cfg.manifest_path;
  doc["data.eeg_dir"] = cfg.eeg_dir;
  doc["data.images"] = cfg.images_path;
  doc["data.embeddings"] = cfg.embeddings_path;
  doc["train.init_encoder"] = cfg.init_encoder;
  doc["train.hold_out_class"] = cfg.hold_out_class;
  doc["train.resume"] = cfg.resume;
  doc["out.dir"] = cfg.out_dir;
  doc["pretrain.past"] = cfg.pre_past;
  doc["pretrain.horizon"] = cfg.pre_horizon;
  doc["pretrain.stride"] = cfg.pre_stride;
  doc["pretrain.epochs"] = cfg.pre_epochs;
  doc["pretrain.batch"] = cfg.pre_batch;
  return doc.dump(2) + "\n";
}

void validate(const Dataset& data) {
  if (data.manifest.entries.empty()) fail(Errc::invalid_argument, "empty manifest");
  if (data.clips.size() != data.manifest.entries.size()) {
    fail(Errc::dim_mismatch, "manifest lists " +
                                 std::to_string(data.manifest.entries.size()) +
                                 " pairs but " + std::to_string(data.clips.size()) +
                                 " clips are loaded");
  }
  const std::size_t v = data.clips.front().channels();
  const std::uint32_t fs = data.clips.front().fs;
  for (std::size_t i = 0; i < data.clips.size(); ++i) {
    const auto& clip = data.clips[i];
    const auto& entry = data.manifest.entries[i];
    if (clip.pair_id != entry.pair_id) {
      fail(Errc::invalid_argument, "clip " + std::to_string(i) + " is '" +
                                       clip.pair_id + "' but the manifest says '" +
                                       entry.pair_id + "'");
    }
    if (clip.channels() != v || clip.fs != fs) {
      fail(Errc::dim_mismatch, "clip '" + clip.pair_id +
                                   "' disagrees with the first clip on V or fs");
    }
  }
  if (data.images.count() == 0 && data.cache.count() == 0) {
    fail(Errc::invalid_argument, "dataset has neither images nor embeddings");
  }
}

namespace {

// Gallery/visual row for a manifest entry in whichever store is active.
std::size_t visual_row(const Dataset& data, const dataio::ManifestEntry& entry) {
  const bool cache = data.use_cache();
  if (const auto* name = std::get_if<std::string>(&entry.image_ref)) {
    const auto& index = cache ? data.cache.id_index : data.images.id_index;
    const auto it = index.find(*name);
    if (it == index.end()) {
      fail(Errc::not_found, "pair '" + entry.pair_id +
                                "' references missing image '" + *name + "'");
    }
    return it->second;
  }
  const std::size_t row = std::get<std::uint32_t>(entry.image_ref);
  const std::size_t count = cache ? data.cache.count() : data.images.count();
  if (row >= count) {
    fail(Errc::out_of_range, "pair '" + entry.pair_id + "' references image row " +
                                 std::to_string(row) + " of " + std::to_string(count));
  }
  return row;
}

Tensor cache_row(const dataio::EmbeddingCache& cache, std::size_t row) {
  Tensor out({cache.dim});
  for (std::size_t d = 0; d < cache.dim; ++d) out[d] = cache.vectors.at(row, d);
  return out;
}

Tensor image_row(const dataio::ImageStore& store, std::size_t row) {
  const std::size_t side = store.side;
  Tensor out({1, side, side});
  const double* src = store.pixels.data() + row * side * side;
  std::copy(src, src + side * side, out.data());
  return out;
}

struct NormTensors {
  Tensor mean, std;
};

NormTensors norm_tensors(const preprocess::NormStats& norm) {
  NormTensors out{Tensor({norm.mean.size()}), Tensor({norm.std.size()})};
  std::copy(norm.mean.begin(), norm.mean.end(), out.mean.data());
  std::copy(norm.std.begin(), norm.std.end(), out.std.data());
  return out;
}

preprocess::NormStats norm_from_tensors(const Tensor& mean, const Tensor& std_t) {
  preprocess::NormStats norm;
  norm.mean.assign(mean.data(), mean.data() + mean.size());
  norm.std.assign(std_t.data(), std_t.data() + std_t.size());
  norm.guarded.assign(norm.mean.size(), false);
  return norm;
}

VarMap leaves_with_prefix(Tape& tape, const ParamStore& store,
                          const std::string& prefix) {
  VarMap out;
  for (const auto& [name, tensor] : store.values) {
    if (name.rfind(prefix, 0) == 0) out.emplace(name, tape.leaf(tensor));
  }
  return out;
}

}  // namespace

Tensor montage_transition(const RunConfig& cfg, std::size_t v) {
  const Tensor positions = cfg.positions_path.empty()
                               ? montage::default_positions(v)
                               : montage::load_positions(cfg.positions_path);
  if (positions.dim(0) != v) {
    fail(Errc::dim_mismatch, "positions file lists " +
                                 std::to_string(positions.dim(0)) +
                                 " nodes but clips have " + std::to_string(v));
  }
  // k caps at V-1 so small desk-scale montages accept the default k.
  const std::size_t k = std::min(cfg.montage_k, v - 1);
  return montage::make_montage(positions, k).transition;
}

Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.manifest_path.empty()) {
    fail(Errc::invalid_argument, "data.manifest is required");
  }
  Dataset data;
  data.manifest = dataio::load_manifest(cfg.manifest_path);
  const fs::path base = cfg.eeg_dir.empty()
                            ? fs::path(cfg.manifest_path).parent_path()
                            : fs::path(cfg.eeg_dir);
  data.clips.reserve(data.manifest.entries.size());
  for (const auto& entry : data.manifest.entries) {
    dataio::EEGClip clip = dataio::read_clip((base / entry.eeg_path).string());
    clip.pair_id = entry.pair_id;
    clip.class_label = entry.class_label;
    data.clips.push_back(std::move(clip));
  }
  if (!cfg.embeddings_path.empty()) {
    data.cache = dataio::read_embeddings(cfg.embeddings_path);
  } else if (!cfg.images_path.empty()) {
    data.images = dataio::read_images(cfg.images_path);
  }
  validate(data);
  return data;
}

dataio::NamedTensors snapshot(const ParamStore& params) {
  dataio::NamedTensors out;
  for (const auto& [name, tensor] : params.values) out.emplace(name, tensor);
  return out;
}

namespace {

// Everything fit() derives once from (data, cfg) before the epoch loop.
struct RunState {
  std::size_t v = 0;
  Tensor transition;
  eval::Fold fold;
  std::vector<std::string> train_ids, val_ids;
  preprocess::NormStats norm;
  std::map<std::string, Tensor> normalized;  // pair_id → V×T
  std::size_t vis_dim = 0;
  std::map<std::string, Tensor> visual_enc;  // frozen/cached encodings
};

RunState prepare(const Dataset& data, const RunConfig& cfg,
                 const ParamStore& model) {
  RunState st;
  st.v = data.clips.front().channels();
  st.transition = montage_transition(cfg, st.v);

  const eval::SplitPlan plan =
      eval::make_splits(data.manifest, cfg.n_sets, cfg.split_seed);
  st.fold = eval::make_fold(plan, Rng::mix(cfg.split_seed, cfg.fold + 1));

  // The held-out class is dropped from train and val but stays in test, so
  // open-set evaluation can probe a class the model never saw.
  auto keep = [&](const std::string& id) {
    return cfg.hold_out_class.empty() ||
           data.manifest.entry(id).class_label != cfg.hold_out_class;
  };
  std::erase_if(st.fold.train, [&](const std::string& id) { return !keep(id); });
  std::erase_if(st.fold.val, [&](const std::string& id) { return !keep(id); });
  st.train_ids = st.fold.train;
  st.val_ids = st.fold.val;
  if (st.train_ids.empty()) fail(Errc::invalid_argument, "training fold is empty");
  if (st.val_ids.empty()) fail(Errc::invalid_argument, "validation fold is empty");

  std::vector<dataio::EEGClip> train_clips;
  train_clips.reserve(st.train_ids.size());
  for (const auto& id : st.train_ids) {
    train_clips.push_back(data.clips[data.manifest.index.at(id)]);
  }
  st.norm = preprocess::fit_norm(train_clips);
  for (const auto& clip : data.clips) {
    st.normalized.emplace(clip.pair_id, preprocess::normalize(clip, st.norm).data);
  }

  st.vis_dim = data.use_cache() ? data.cache.dim : cfg.vis.dim;
  if (data.use_cache() || !cfg.vis.trainable) {
    for (const auto& entry : data.manifest.entries) {
      const std::size_t row = visual_row(data, entry);
      Tensor z = data.use_cache()
                     ? cache_row(data.cache, row)
                     : visual::encode_image_value(
                           visual::resize_to_model(image_row(data.images, row),
                                                   cfg.vis.side),
                           model, cfg.vis);
      st.visual_enc.emplace(entry.pair_id, std::move(z));
    }
  }
  return st;
}

ParamStore init_model(const Dataset& data, const RunConfig& cfg, std::size_t v) {
  ParamStore model;
  encoder::init_params(model, cfg.enc, v, cfg.seed);
  crossmodal::ProjectionConfig proj;
  proj.eeg_dim = cfg.enc.out_dim;
  proj.vis_dim = data.use_cache() ? data.cache.dim : cfg.vis.dim;
  proj.joint_dim = cfg.joint_dim;
  crossmodal::init_params(model, proj, cfg.seed);
  if (!data.use_cache()) visual::init_params(model, cfg.vis, cfg.seed);
  if (!cfg.init_encoder.empty()) {
    pretrain::transfer(dataio::load_checkpoint(cfg.init_encoder), model);
  }
  return model;
}

Tensor project_store(const Tensor& z, const ParamStore& model,
                     const std::string& which) {
  return crossmodal::project(z, model, which);
}

eval::EncodedSet encoded_eeg(const Dataset& data, const RunState& st,
                             const std::vector<std::string>& ids,
                             const ParamStore& model, const RunConfig& cfg) {
  eval::EncodedSet set;
  set.ids = ids;
  Tensor vectors({ids.size(), cfg.joint_dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& entry = data.manifest.entry(ids[i]);
    set.labels.push_back(entry.class_label);
    const Tensor z = encoder::encode_value(st.normalized.at(ids[i]), st.transition,
                                           model, cfg.enc);
    const Tensor p = project_store(z, model, "eeg");
    for (std::size_t d = 0; d < cfg.joint_dim; ++d) vectors.at(i, d) = p[d];
  }
  set.vectors = std::move(vectors);
  return set;
}

eval::EncodedSet encoded_visual(const Dataset& data, const RunState& st,
                                const std::vector<std::string>& ids,
                                const ParamStore& model, const RunConfig& cfg) {
  eval::EncodedSet set;
  set.ids = ids;
  Tensor vectors({ids.size(), cfg.joint_dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& entry = data.manifest.entry(ids[i]);
    set.labels.push_back(entry.class_label);
    Tensor z;
    const auto it = st.visual_enc.find(ids[i]);
    if (it != st.visual_enc.end()) {
      z = it->second;
    } else {
      const std::size_t row = visual_row(data, entry);
      z = visual::encode_image_value(
          visual::resize_to_model(image_row(data.images, row), cfg.vis.side),
          model, cfg.vis);
    }
    const Tensor p = project_store(z, model, "img");
    for (std::size_t d = 0; d < cfg.joint_dim; ++d) vectors.at(i, d) = p[d];
  }
  set.vectors = std::move(vectors);
  return set;
}

}  // namespace

TrainOutcome fit(const Dataset& data, const RunConfig& cfg) {
  validate(data);
  TrainOutcome out;
  out.model = init_model(data, cfg, data.clips.front().channels());
  RunState st = prepare(data, cfg, out.model);
  out.norm = st.norm;
  out.transition = st.transition;
  out.fold = st.fold;

  const NormTensors nt = norm_tensors(st.norm);
  const bool train_visual = cfg.vis.trainable && !data.use_cache();
  diff::Adam adam(cfg.optim);

  std::size_t start_epoch = 0;
  if (!cfg.resume.empty()) {
    const dataio::NamedTensors saved = dataio::load_checkpoint(cfg.resume);
    std::map<std::string, Tensor> opt_state;
    out.best.clear();
    for (const auto& [name, tensor] : saved) {
      if (name.rfind("model.", 0) == 0) {
        const std::string bare = name.substr(6);
        if (!out.model.has(bare)) {
          fail(Errc::not_found, "resume tensor '" + bare + "' is not in the model");
        }
        if (!out.model.value(bare).same_shape(tensor)) {
          fail(Errc::shape_mismatch, "resume tensor '" + bare + "' changed shape");
        }
        out.model.value(bare) = tensor;
      } else if (name.rfind("opt.", 0) == 0) {
        opt_state.emplace(name, tensor);
      } else if (name.rfind("best.", 0) == 0) {
        out.best.emplace(name.substr(5), tensor);
      } else if (name == "run.epoch") {
        start_epoch = static_cast<std::size_t>(tensor[0]);
      } else if (name == "run.best_epoch") {
        out.best_epoch = static_cast<std::size_t>(tensor[0]);
      } else if (name == "run.best_mrr") {
        out.best_val_mrr = tensor[0];
      } else {
        fail(Errc::unknown_field, "unexpected resume tensor '" + name + "'");
      }
    }
    adam.restore(opt_state);
  }

  auto snapshot_best = [&](std::size_t epoch, double val_mrr) {
    out.best = snapshot(out.model);
    out.best.emplace("norm.mean", nt.mean);
    out.best.emplace("norm.std", nt.std);
    out.best_epoch = epoch;
    out.best_val_mrr = val_mrr;
  };
  if (out.best.empty()) snapshot_best(0, 0.0);

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::string> order = st.train_ids;
    Rng shuffle_rng(Rng::mix(Rng::mix(cfg.seed, Rng::hash_str("train.epoch")), epoch + 1));
    shuffle_rng.shuffle(order);
    Rng mask_rng(Rng::mix(Rng::mix(cfg.seed, Rng::hash_str("train.negatives")), epoch + 1));

    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch);
      const std::size_t n = end - begin;

      // Phase 1: forward every clip without keeping its graph; the loss tape
      // only sees the stacked encodings, so peak memory is one clip's tape.
      std::vector<Tensor> z_e(n), z_v(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::string& id = order[begin + i];
        z_e[i] = encoder::encode_value(st.normalized.at(id), st.transition,
                                       out.model, cfg.enc);
        if (train_visual) {
          const std::size_t row = visual_row(data, data.manifest.entry(id));
          z_v[i] = visual::encode_image_value(
              visual::resize_to_model(image_row(data.images, row), cfg.vis.side),
              out.model, cfg.vis);
        } else {
          z_v[i] = st.visual_enc.at(id);
        }
      }

      const Tensor mask = crossmodal::sample_negative_mask(n, cfg.neg.sample_size, mask_rng);

      // Phase 2: projections + loss over leaf encodings; grads of the leaves
      // seed the per-clip recomputation below.
      out.model.zero_grads();
      Tape loss_tape;
      VarMap proj_leaves = leaves_with_prefix(loss_tape, out.model, "proj.");
      std::vector<Var> ze_rows, zv_rows;
      for (std::size_t i = 0; i < n; ++i) {
        ze_rows.push_back(loss_tape.leaf(z_e[i]));
        zv_rows.push_back(loss_tape.leaf(z_v[i]));
      }
      Var loss;
      try {
        const Var ze_mat = loss_tape.stack_rows(ze_rows);
        const Var zv_mat = loss_tape.stack_rows(zv_rows);
        const Var pe = crossmodal::project_rows(loss_tape, ze_mat, proj_leaves, "eeg");
        const Var pv = crossmodal::project_rows(loss_tape, zv_mat, proj_leaves, "img");
        loss = crossmodal::infonce_loss(loss_tape, pe, pv, cfg.tau,
                                        cfg.neg.strategy, mask);
        loss_tape.backward(loss);
      } catch (const Error& e) {
        if (e.code() == Errc::non_finite_loss) {
          fail(Errc::non_finite_loss,
               "epoch " + std::to_string(epoch + 1) + ", batch " +
                   std::to_string(n_batches + 1) + ": " + e.what());
        }
        throw;
      }
      diff::collect_grads(loss_tape, proj_leaves, out.model);
      epoch_loss += loss_tape.value(loss)[0];

      // Phase 3: rebuild each clip's graph and push its seed through it.
      for (std::size_t i = 0; i < n; ++i) {
        const std::string& id = order[begin + i];
        const Tensor* seed = loss_tape.grad_if(ze_rows[i]);
        if (seed != nullptr) {
          Tape tape;
          VarMap enc_leaves = leaves_with_prefix(tape, out.model, "enc.");
          const Var z = encoder::encode(tape, st.normalized.at(id), st.transition,
                                        enc_leaves, cfg.enc);
          tape.backward(z, *seed);
          diff::collect_grads(tape, enc_leaves, out.model);
        }
        if (train_visual) {
          const Tensor* vseed = loss_tape.grad_if(zv_rows[i]);
          if (vseed != nullptr) {
            Tape tape;
            VarMap img_leaves = leaves_with_prefix(tape, out.model, "img.");
            const std::size_t row = visual_row(data, data.manifest.entry(id));
            const Var z = visual::encode_image(
                tape,
                visual::resize_to_model(image_row(data.images, row), cfg.vis.side),
                img_leaves, cfg.vis);
            tape.backward(z, *vseed);
            diff::collect_grads(tape, img_leaves, out.model);
          }
        }
      }

      adam.step(out.model);
      ++n_batches;
    }

    const eval::EncodedSet queries =
        encoded_eeg(data, st, st.val_ids, out.model, cfg);
    const eval::EncodedSet gallery =
        encoded_visual(data, st, st.val_ids, out.model, cfg);
    const eval::RetrievalReport report = eval::evaluate(queries, gallery);

    MetricsRow row;
    row.epoch = epoch + 1;
    row.loss = n_batches == 0 ? 0.0 : epoch_loss / static_cast<double>(n_batches);
    row.val_mrr = report.mrr;
    row.val_map = report.map;
    out.metrics.push_back(row);
    if (report.mrr > out.best_val_mrr) snapshot_best(epoch + 1, report.mrr);
    out.epochs_done = epoch + 1;
  }

  if (out.epochs_done < start_epoch) out.epochs_done = start_epoch;
  out.opt_state = adam.state();
  return out;
}

void save_outcome(const TrainOutcome& outcome, const RunConfig& cfg) {
  if (cfg.out_dir.empty()) fail(Errc::invalid_argument, "out.dir is required");
  fs::create_directories(cfg.out_dir);
  const fs::path dir(cfg.out_dir);

  dataio::save_checkpoint(outcome.best, (dir / "best.ckpt").string());

  dataio::NamedTensors resume;
  for (const auto& [name, tensor] : outcome.model.values) {
    resume.emplace("model." + name, tensor);
  }
  for (const auto& [name, tensor] : outcome.opt_state) {
    resume.emplace(name, tensor);  // already "opt."-prefixed
  }
  for (const auto& [name, tensor] : outcome.best) {
    resume.emplace("best." + name, tensor);
  }
  resume.emplace("run.epoch", Tensor::scalar(static_cast<double>(outcome.epochs_done)));
  resume.emplace("run.best_epoch", Tensor::scalar(static_cast<double>(outcome.best_epoch)));
  resume.emplace("run.best_mrr", Tensor::scalar(outcome.best_val_mrr));
  dataio::save_checkpoint(resume, (dir / "resume.ckpt").string());

  std::ofstream metrics((dir / "metrics.jsonl").string(), std::ios::trunc);
  if (!metrics) fail(Errc::io_failure, "cannot write metrics.jsonl");
  for (const MetricsRow& row : outcome.metrics) {
    json line = {{"epoch", row.epoch},
                 {"loss", row.loss},
                 {"val_mrr", row.val_mrr},
                 {"val_map", row.val_map}};
    metrics << line.dump() << "\n";
  }

  std::ofstream echo((dir / "effective.json").string(), std::ios::trunc);
  if (!echo) fail(Errc::io_failure, "cannot write effective.json");
  echo << effective_config(cfg);
}

eval::EncodedSet encode_eeg_set(const Dataset& data,
                                const std::vector<std::string>& ids,
                                const dataio::NamedTensors& model,
                                const RunConfig& cfg) {
  ParamStore store;
  preprocess::NormStats norm;
  for (const auto& [name, tensor] : model) {
    if (name == "norm.mean" || name == "norm.std") continue;
    store.add(name, tensor);
  }
  norm = norm_from_tensors(model.at("norm.mean"), model.at("norm.std"));

  const std::size_t v = data.clips.front().channels();
  const Tensor transition = montage_transition(cfg, v);
  eval::EncodedSet set;
  set.ids = ids;
  Tensor vectors({ids.size(), cfg.joint_dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& entry = data.manifest.entry(ids[i]);
    set.labels.push_back(entry.class_label);
    const auto& clip = data.clips[data.manifest.index.at(ids[i])];
    const Tensor normalized = preprocess::normalize(clip, norm).data;
    const Tensor z = encoder::encode_value(normalized, transition, store, cfg.enc);
    const Tensor p = crossmodal::project(z, store, "eeg");
    for (std::size_t d = 0; d < cfg.joint_dim; ++d) vectors.at(i, d) = p[d];
  }
  set.vectors = std::move(vectors);
  return set;
}

eval::EncodedSet encode_image_set(const Dataset& data,
                                  const std::vector<std::string>& ids,
                                  const dataio::NamedTensors& model,
                                  const RunConfig& cfg) {
  ParamStore store;
  for (const auto& [name, tensor] : model) {
    if (name == "norm.mean" || name == "norm.std") continue;
    store.add(name, tensor);
  }
  eval::EncodedSet set;
  set.ids = ids;
  Tensor vectors({ids.size(), cfg.joint_dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& entry = data.manifest.entry(ids[i]);
    set.labels.push_back(entry.class_label);
    const std::size_t row = visual_row(data, entry);
    Tensor z;
    if (data.use_cache()) {
      z = cache_row(data.cache, row);
    } else {
      z = visual::encode_image_value(
          visual::resize_to_model(image_row(data.images, row), cfg.vis.side),
          store, cfg.vis);
    }
    const Tensor p = crossmodal::project(z, store, "img");
    for (std::size_t d = 0; d < cfg.joint_dim; ++d) vectors.at(i, d) = p[d];
  }
  set.vectors = std::move(vectors);
  return set;
}

}  // namespace nr::trainer
