// neuroretrieve: single entry point for the pipeline. Exit codes: 0 success,
// 1 validation error (bad flags, config, or input shape), 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "neuroretrieve/crossmodal.hpp"
#include "neuroretrieve/dataio.hpp"
#include "neuroretrieve/diff.hpp"
#include "neuroretrieve/encoder.hpp"
#include "neuroretrieve/error.hpp"
#include "neuroretrieve/evalmetrics.hpp"
#include "neuroretrieve/montage.hpp"
#include "neuroretrieve/preprocess.hpp"
#include "neuroretrieve/pretrain.hpp"
#include "neuroretrieve/rng.hpp"
#include "neuroretrieve/synthdata.hpp"
#include "neuroretrieve/trainer.hpp"

namespace fs = std::filesystem;
using namespace nr;

namespace {

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::invalid_argument:
    case Errc::unknown_field:
    case Errc::missing_field:
    case Errc::duplicate_id:
    case Errc::out_of_range:
    case Errc::shape_mismatch:
    case Errc::dim_mismatch:
    case Errc::not_found:
      return 1;
    default:
      return 2;
  }
}

trainer::RunConfig load_config(const std::string& path, std::int64_t seed) {
  std::string text = "{}";
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) fail(Errc::io_failure, "cannot open config: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    text = buf.str();
    if (text.empty()) text = "{}";
  }
  trainer::RunConfig cfg = trainer::parse_run_config(text);
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  return cfg;
}

// Fold membership exactly as fit() builds it, hold-out filtering included.
eval::Fold config_fold(const trainer::Dataset& data, const trainer::RunConfig& cfg) {
  const eval::SplitPlan plan =
      eval::make_splits(data.manifest, cfg.n_sets, cfg.split_seed);
  eval::Fold fold = eval::make_fold(plan, Rng::mix(cfg.split_seed, cfg.fold + 1));
  if (!cfg.hold_out_class.empty()) {
    auto held = [&](const std::string& id) {
      return data.manifest.entry(id).class_label == cfg.hold_out_class;
    };
    std::erase_if(fold.train, held);
    std::erase_if(fold.val, held);
  }
  return fold;
}

std::vector<std::string> gallery_ids(const dataio::EmbeddingCache& cache) {
  std::vector<std::string> ids(cache.id_index.size());
  for (const auto& [id, row] : cache.id_index) ids[row] = id;
  return ids;
}

// ---------------------------------------------------------------------------

int cmd_synth(const synth::SynthConfig& cfg, const std::string& out_dir) {
  const synth::SynthData data = synth::generate(cfg);
  fs::create_directories(fs::path(out_dir) / "eeg");
  for (const auto& clip : data.clips) {
    dataio::write_clip(clip, (fs::path(out_dir) / "eeg" / (clip.pair_id + ".eeg")).string());
  }
  dataio::write_images(data.images, (fs::path(out_dir) / "images.img").string());
  dataio::save_manifest(data.manifest, (fs::path(out_dir) / "manifest.jsonl").string());
  std::printf("synth: %zu pairs (%zu classes x %zu), V=%zu T=%zu fs=%u snr=%g -> %s\n",
              data.clips.size(), cfg.n_classes, cfg.per_class, cfg.v, cfg.t,
              static_cast<unsigned>(cfg.fs), cfg.snr, out_dir.c_str());
  return 0;
}

int cmd_preprocess(const std::string& in_dir, const std::string& out_dir,
                   double low, double high, std::uint32_t order,
                   std::uint32_t target_fs) {
  const dataio::PairManifest manifest =
      dataio::load_manifest((fs::path(in_dir) / "manifest.jsonl").string());

  preprocess::FilterSpec spec;
  spec.low_hz = low;
  spec.high_hz = high;
  spec.order = order;
  spec.fs = static_cast<double>(target_fs);
  preprocess::validate(spec);
  const preprocess::SosFilter filter = preprocess::design_bandpass(spec);

  std::size_t resampled = 0;
  for (const auto& entry : manifest.entries) {
    dataio::EEGClip clip =
        dataio::read_clip((fs::path(in_dir) / entry.eeg_path).string());
    if (clip.fs != target_fs) {
      clip = preprocess::resample(clip, target_fs);
      ++resampled;
    }
    clip = preprocess::apply_filter(clip, filter);
    const fs::path dest = fs::path(out_dir) / entry.eeg_path;
    fs::create_directories(dest.parent_path());
    dataio::write_clip(clip, dest.string());
  }
  dataio::save_manifest(manifest, (fs::path(out_dir) / "manifest.jsonl").string());
  if (fs::exists(fs::path(in_dir) / "images.img")) {
    fs::copy_file(fs::path(in_dir) / "images.img", fs::path(out_dir) / "images.img",
                  fs::copy_options::overwrite_existing);
  }
  std::printf("preprocess: %zu clips band-passed %g-%g Hz (order %u) at %u Hz"
              " (%zu resampled) -> %s\n",
              manifest.entries.size(), low, high, order, target_fs, resampled,
              out_dir.c_str());
  return 0;
}

int cmd_pretrain(const trainer::RunConfig& cfg, const std::string& out_path) {
  const trainer::Dataset data = trainer::load_dataset(cfg);
  const eval::Fold fold = config_fold(data, cfg);
  if (fold.train.empty()) fail(Errc::invalid_argument, "training fold is empty");

  std::vector<dataio::EEGClip> train_clips;
  for (const auto& id : fold.train) {
    train_clips.push_back(data.clips[data.manifest.index.at(id)]);
  }
  const preprocess::NormStats norm = preprocess::fit_norm(train_clips);
  std::vector<Tensor> normalized;
  for (const auto& clip : train_clips) {
    normalized.push_back(preprocess::normalize(clip, norm).data);
  }

  pretrain::PretrainConfig pre;
  pre.past = cfg.pre_past;
  pre.horizon = cfg.pre_horizon;
  pre.stride = cfg.pre_stride;
  pre.epochs = cfg.pre_epochs;
  pre.batch = cfg.pre_batch;
  pre.optim = cfg.optim;
  pre.seed = cfg.seed;

  const std::size_t v = data.clips.front().channels();
  const Tensor transition = trainer::montage_transition(cfg, v);
  const pretrain::PretrainResult result =
      pretrain::run_pretraining(normalized, transition, cfg.enc, pre);
  for (std::size_t e = 0; e < result.epoch_mae.size(); ++e) {
    std::printf("  epoch %zu  forecast mae %.6f\n", e + 1, result.epoch_mae[e]);
  }
  dataio::save_checkpoint(pretrain::encoder_tensors(result.params), out_path);
  std::printf("pretrain: %zu clips, %zu epochs -> %s\n", normalized.size(),
              pre.epochs, out_path.c_str());
  return 0;
}

int cmd_train(trainer::RunConfig cfg) {
  if (cfg.out_dir.empty()) cfg.out_dir = "run";
  const trainer::Dataset data = trainer::load_dataset(cfg);
  const trainer::TrainOutcome out = trainer::fit(data, cfg);
  trainer::save_outcome(out, cfg);
  for (const auto& row : out.metrics) {
    std::printf("  epoch %zu  loss %.4f  val_mrr %.4f  val_map %.4f\n",
                row.epoch, row.loss, row.val_mrr, row.val_map);
  }
  const auto queries = trainer::encode_eeg_set(data, out.fold.test, out.best, cfg);
  const auto gallery = trainer::encode_image_set(data, out.fold.test, out.best, cfg);
  const eval::RetrievalReport report = eval::evaluate(queries, gallery);
  std::printf("train: best epoch %zu (val mrr %.4f); test mrr %.4f map %.4f -> %s\n",
              out.best_epoch, out.best_val_mrr, report.mrr, report.map,
              cfg.out_dir.c_str());
  return 0;
}

int cmd_eval(trainer::RunConfig cfg, const std::string& ckpt,
             std::int64_t fold_index, const std::string& open_class,
             const std::string& report_path) {
  if (fold_index >= 0) cfg.fold = static_cast<std::size_t>(fold_index);
  const trainer::Dataset data = trainer::load_dataset(cfg);
  const dataio::NamedTensors model = dataio::load_checkpoint(ckpt);
  const eval::Fold fold = config_fold(data, cfg);

  const auto queries = trainer::encode_eeg_set(data, fold.test, model, cfg);
  const auto gallery = trainer::encode_image_set(data, fold.test, model, cfg);
  const eval::RetrievalReport report = eval::evaluate(queries, gallery);

  std::printf("eval: fold %zu (val set %zu, test set %zu), %zu queries\n",
              cfg.fold, fold.val_set, fold.test_set, fold.test.size());
  std::printf("  mrr %.4f  map %.4f\n", report.mrr, report.map);
  for (const auto& [label, acc] : report.class_accuracy) {
    std::printf("  top-1 %-12s %.4f\n", label.c_str(), acc);
  }
  if (!open_class.empty()) {
    std::size_t n = 0, hits = 0;
    for (const auto& q : report.queries) {
      if (q.label != open_class) continue;
      ++n;
      hits += q.top1 == open_class ? 1 : 0;
    }
    if (n == 0) fail(Errc::not_found, "no test queries with class " + open_class);
    const double acc = static_cast<double>(hits) / static_cast<double>(n);
    const double prevalence = eval::label_prevalence(gallery, open_class);
    std::printf("  open-set %-10s top-1 %.4f  gallery prevalence %.4f (2x = %.4f)\n",
                open_class.c_str(), acc, prevalence, 2.0 * prevalence);
  }
  if (!report_path.empty()) {
    eval::write_report(report_path, report);
    std::printf("  report -> %s\n", report_path.c_str());
  }
  return 0;
}

int cmd_retrieve(const trainer::RunConfig& cfg, const std::string& query_path,
                 const std::string& ckpt, const std::string& gallery_path,
                 std::size_t top_k, const std::string& report_path) {
  const dataio::EEGClip query = dataio::read_clip(query_path);
  const dataio::NamedTensors model = dataio::load_checkpoint(ckpt);
  const dataio::EmbeddingCache cache = dataio::read_embeddings(gallery_path);

  diff::ParamStore store;
  for (const auto& [name, tensor] : model) {
    if (name == "norm.mean" || name == "norm.std") continue;
    store.add(name, tensor);
  }
  preprocess::NormStats norm;
  const Tensor& mean = model.at("norm.mean");
  const Tensor& stddev = model.at("norm.std");
  norm.mean.assign(mean.vec().begin(), mean.vec().end());
  norm.std.assign(stddev.vec().begin(), stddev.vec().end());
  norm.guarded.assign(norm.mean.size(), false);

  const Tensor normalized = preprocess::normalize(query, norm).data;
  const Tensor transition = trainer::montage_transition(cfg, query.channels());
  const Tensor z = encoder::encode_value(normalized, transition, store, cfg.enc);
  const Tensor projected = crossmodal::project(z, store, "eeg");

  eval::EncodedSet gallery;
  gallery.ids = gallery_ids(cache);
  gallery.labels.assign(gallery.ids.size(), "");
  gallery.vectors = cache.vectors;
  const std::vector<std::size_t> order = eval::rank_gallery(projected, gallery);

  const auto cosine = [&](std::size_t row) {
    double dot = 0.0, qn = 0.0, gn = 0.0;
    for (std::size_t d = 0; d < cache.dim; ++d) {
      dot += projected[d] * cache.vectors.at(row, d);
      qn += projected[d] * projected[d];
      gn += cache.vectors.at(row, d) * cache.vectors.at(row, d);
    }
    return dot / (std::sqrt(qn) * std::sqrt(gn));
  };

  const std::size_t shown = std::min(top_k, order.size());
  std::ofstream report;
  if (!report_path.empty()) {
    report.open(report_path);
    if (!report) fail(Errc::io_failure, "cannot write report: " + report_path);
  }
  std::printf("retrieve: query %s vs %zu gallery items\n", query.pair_id.c_str(),
              gallery.ids.size());
  for (std::size_t r = 0; r < shown; ++r) {
    const std::size_t row = order[r];
    std::printf("  %2zu  %-12s %.6f\n", r + 1, gallery.ids[row].c_str(), cosine(row));
    if (report.is_open()) {
      report << "{\"rank\":" << r + 1 << ",\"pair_id\":\"" << gallery.ids[row]
             << "\",\"cosine\":" << cosine(row) << "}\n";
    }
  }
  return 0;
}

int cmd_dump(const trainer::RunConfig& cfg, const std::string& ckpt,
             const std::string& split, const std::string& side,
             const std::string& out_path) {
  const trainer::Dataset data = trainer::load_dataset(cfg);
  const dataio::NamedTensors model = dataio::load_checkpoint(ckpt);
  const eval::Fold fold = config_fold(data, cfg);

  std::vector<std::string> ids;
  if (split == "train") ids = fold.train;
  else if (split == "val") ids = fold.val;
  else if (split == "test") ids = fold.test;
  else if (split == "all") {
    for (const auto& entry : data.manifest.entries) ids.push_back(entry.pair_id);
  } else {
    fail(Errc::invalid_argument, "split must be train|val|test|all, got " + split);
  }

  eval::EncodedSet set;
  if (side == "eeg") set = trainer::encode_eeg_set(data, ids, model, cfg);
  else if (side == "image") set = trainer::encode_image_set(data, ids, model, cfg);
  else fail(Errc::invalid_argument, "side must be eeg|image, got " + side);

  dataio::EmbeddingCache cache;
  cache.dim = static_cast<std::uint32_t>(cfg.joint_dim);
  cache.vectors = set.vectors;
  dataio::quantize_to_f32(cache.vectors);
  for (std::size_t i = 0; i < set.ids.size(); ++i) cache.id_index[set.ids[i]] = i;
  dataio::write_embeddings(cache, out_path);
  std::printf("dump-embeddings: %zu %s vectors (%s split, dim %u) -> %s\n",
              set.ids.size(), side.c_str(), split.c_str(),
              static_cast<unsigned>(cache.dim), out_path.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t v = 4, t = 12, n = 3;
  encoder::EncoderConfig enc;
  enc.blocks = 2;
  enc.diffusion_steps = 2;
  enc.lift_dim = 3;
  enc.hidden_dim = 4;
  enc.embed_dim = 3;
  enc.kernel = 2;
  enc.dilations = {1, 2};
  enc.out_dim = 5;

  Tensor pos({v, 3});
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = rng.uniform(-1.0, 1.0);
  const Tensor transition =
      montage::transition_matrix(montage::build_knn_adjacency(pos, 2));
  std::vector<Tensor> clips;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor clip({v, t});
    for (std::size_t s = 0; s < clip.size(); ++s) clip[s] = rng.uniform(-1.0, 1.0);
    clips.push_back(std::move(clip));
  }

  bool ok = true;
  const auto report = [&](const char* name, const diff::GradCheckReport& r) {
    std::printf("  %-8s %s  max rel err %.3g (%s)\n", name,
                r.pass ? "ok" : "FAIL", r.max_rel_err, r.worst_tensor.c_str());
    ok = ok && r.pass;
  };

  if (module == "all" || module == "encoder") {
    diff::ParamStore p;
    encoder::init_params(p, enc, v, seed);
    const auto loss = [&](diff::Tape& tape, const diff::VarMap& lv) {
      return tape.sum_squares(encoder::encode(tape, clips[0], transition, lv, enc));
    };
    report("encoder", diff::grad_check(loss, p, 1e-5, 1e-4, 8, seed));
  }
  if (module == "all" || module == "loss") {
    diff::ParamStore p;
    encoder::init_params(p, enc, v, seed + 1);
    crossmodal::ProjectionConfig pc;
    pc.eeg_dim = enc.out_dim;
    pc.vis_dim = 4;
    pc.joint_dim = 4;
    crossmodal::init_params(p, pc, seed + 1);
    Tensor vis({n, 4});
    for (std::size_t i = 0; i < vis.size(); ++i) vis[i] = rng.uniform(0.1, 1.0);
    Tensor mask = Tensor::full({n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i) mask.at(i, i) = 0.0;
    const auto loss = [&](diff::Tape& tape, const diff::VarMap& lv) {
      std::vector<diff::Var> encoded;
      for (const Tensor& clip : clips)
        encoded.push_back(encoder::encode(tape, clip, transition, lv, enc));
      const diff::Var z_e =
          crossmodal::project_rows(tape, tape.stack_rows(encoded), lv, "eeg");
      const diff::Var z_i =
          crossmodal::project_rows(tape, tape.constant(vis), lv, "img");
      return crossmodal::infonce_loss(tape, z_e, z_i, 0.07,
                                      crossmodal::Strategy::both, mask);
    };
    report("loss", diff::grad_check(loss, p, 1e-5, 1e-4, 8, seed + 1));
  }
  if (module == "all" || module == "pretrain") {
    diff::ParamStore p;
    encoder::init_params(p, enc, v, seed + 2);
    encoder::init_forecast_params(p, enc, 4, seed + 2);
    Tensor future({v, 4});
    for (std::size_t i = 0; i < future.size(); ++i) future[i] = rng.uniform(-1.0, 1.0);
    const auto loss = [&](diff::Tape& tape, const diff::VarMap& lv) {
      const diff::Var pred = encoder::forecast(tape, clips[0], transition, lv, enc, 4);
      return pretrain::forecast_mae(tape, pred, future);
    };
    report("pretrain", diff::grad_check(loss, p, 1e-5, 1e-4, 8, seed + 2));
  }
  if (!ok) fail(Errc::invalid_argument, "gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EEG-to-image contrastive retrieval pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // --config/--seed are accepted after the subcommand too

  std::string config_path;
  std::int64_t seed_override = -1;
  app.add_option("--config", config_path, "run config file (flat JSON)")
      ->configurable(false);
  app.add_option("--seed", seed_override, "override the config seed");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a paired dataset");
  synth::SynthConfig synth_cfg;
  std::string synth_out = "data";
  synth_cmd->add_option("--classes", synth_cfg.n_classes);
  synth_cmd->add_option("--per-class", synth_cfg.per_class);
  synth_cmd->add_option("--v", synth_cfg.v);
  synth_cmd->add_option("--t", synth_cfg.t);
  synth_cmd->add_option("--fs", synth_cfg.fs);
  synth_cmd->add_option("--side", synth_cfg.side);
  synth_cmd->add_option("--snr", synth_cfg.snr);
  synth_cmd->add_option("--sets", synth_cfg.n_sets);
  synth_cmd->add_option("--out", synth_out);

  // preprocess
  auto* pre_cmd = app.add_subcommand("preprocess", "band-pass and resample clips");
  std::string pre_in, pre_out;
  double pre_low = 55.0, pre_high = 95.0;
  std::uint32_t pre_order = 4, pre_fs = 1024;
  pre_cmd->add_option("--in", pre_in)->required();
  pre_cmd->add_option("--out", pre_out)->required();
  pre_cmd->add_option("--low", pre_low);
  pre_cmd->add_option("--high", pre_high);
  pre_cmd->add_option("--order", pre_order);
  pre_cmd->add_option("--target-fs", pre_fs);

  // pretrain
  auto* pretrain_cmd = app.add_subcommand("pretrain", "forecasting pre-training");
  std::string pretrain_out = "enc.ckpt";
  pretrain_cmd->add_option("--out", pretrain_out);

  // train
  auto* train_cmd = app.add_subcommand("train", "contrastive training run");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "retrieval metrics on the test fold");
  std::string eval_ckpt, eval_open, eval_report;
  std::int64_t eval_fold = -1;
  eval_cmd->add_option("--ckpt", eval_ckpt)->required();
  eval_cmd->add_option("--fold", eval_fold);
  eval_cmd->add_option("--open-class", eval_open);
  eval_cmd->add_option("--report", eval_report);

  // retrieve
  auto* retrieve_cmd = app.add_subcommand("retrieve", "rank a gallery for one query");
  std::string ret_query, ret_ckpt, ret_gallery, ret_report;
  std::size_t ret_k = 5;
  retrieve_cmd->add_option("--query", ret_query)->required();
  retrieve_cmd->add_option("--ckpt", ret_ckpt)->required();
  retrieve_cmd->add_option("--gallery", ret_gallery)->required();
  retrieve_cmd->add_option("--top-k", ret_k);
  retrieve_cmd->add_option("--report", ret_report);

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  std::string grad_module = "all";
  grad_cmd->add_option("--module", grad_module)
      ->check(CLI::IsMember({"all", "encoder", "loss", "pretrain"}));

  // dump-embeddings
  auto* dump_cmd = app.add_subcommand("dump-embeddings", "export joint-space vectors");
  std::string dump_ckpt, dump_split = "all", dump_side = "image", dump_out;
  dump_cmd->add_option("--ckpt", dump_ckpt)->required();
  dump_cmd->add_option("--split", dump_split)
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  dump_cmd->add_option("--side", dump_side)->check(CLI::IsMember({"eeg", "image"}));
  dump_cmd->add_option("--out", dump_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth_cmd->parsed()) {
      if (seed_override >= 0) synth_cfg.seed = static_cast<std::uint64_t>(seed_override);
      return cmd_synth(synth_cfg, synth_out);
    }
    if (pre_cmd->parsed()) {
      return cmd_preprocess(pre_in, pre_out, pre_low, pre_high, pre_order, pre_fs);
    }
    if (pretrain_cmd->parsed()) {
      return cmd_pretrain(load_config(config_path, seed_override), pretrain_out);
    }
    if (train_cmd->parsed()) {
      return cmd_train(load_config(config_path, seed_override));
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(load_config(config_path, seed_override), eval_ckpt, eval_fold,
                      eval_open, eval_report);
    }
    if (retrieve_cmd->parsed()) {
      return cmd_retrieve(load_config(config_path, seed_override), ret_query,
                          ret_ckpt, ret_gallery, ret_k, ret_report);
    }
    if (grad_cmd->parsed()) {
      return cmd_gradcheck(grad_module,
                           seed_override >= 0 ? static_cast<std::uint64_t>(seed_override) : 11);
    }
    if (dump_cmd->parsed()) {
      return cmd_dump(load_config(config_path, seed_override), dump_ckpt, dump_split,
                      dump_side, dump_out);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "neuroretrieve: %s\n", e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "neuroretrieve: %s\n", e.what());
    return 2;
  }
  return 1;
}
