#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "vsla/checkpoint.hpp"
#include "vsla/config.hpp"
#include "vsla/datamodel.hpp"
#include "vsla/errors.hpp"
#include "vsla/evaluation.hpp"
#include "vsla/losses.hpp"
#include "vsla/model.hpp"
#include "vsla/rng.hpp"
#include "vsla/sampling.hpp"
#include "vsla/training.hpp"
#include "vsla/vision_encoder.hpp"

#include <cctype>
#include <optional>
#include <tuple>
#include <string>
#include <vector>

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace vsla;

namespace {

struct ModeChoice {
  EncoderMode mode;
  TuningMode tuning;
};

ModeChoice parse_mode(const std::string& s) {
  if (s == "ft") return {EncoderMode::kBaseline, TuningMode::kFullFinetune};
  if (s == "ifa") return {EncoderMode::kIfa, TuningMode::kAdapter};
  if (s == "vsla") return {EncoderMode::kIfaCfaa, TuningMode::kAdapter};
  if (s == "vsla-pbp") return {EncoderMode::kIfaCfaaPbp, TuningMode::kAdapter};
  throw ConfigError("unknown mode '" + s + "' (expected ft, ifa, vsla or vsla-pbp)");
}

PlatformTag platform_of(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  auto p = parse_platform(s);
  if (!p) throw ConfigError("unknown platform '" + s + "'");
  return *p;
}

RunConfig resolve(const std::string& config, const std::string& manifest, const std::string& mode,
                  std::optional<std::uint64_t> seed, std::vector<std::string> overrides) {
  if (seed) overrides.push_back("seed=" + std::to_string(*seed));
  if (!manifest.empty()) overrides.push_back("dataset.manifest=\"" + manifest + "\"");
  RunConfig cfg = load_run_config(config, overrides);
  if (!mode.empty()) {
    const ModeChoice mc = parse_mode(mode);
    cfg.mode = mc.mode;
    cfg.tuning = mc.tuning;
  }
  cfg.validate();
  return cfg;
}

py::dict stage_result(const StageResult& r) {
  py::list history;
  for (const auto& h : r.history) {
    py::dict e;
    e["epoch"] = h.epoch;
    e["loss"] = h.loss;
    e["val_map"] = h.val_map ? py::cast(*h.val_map) : py::none();
    history.append(e);
  }
  py::dict d;
  d["last"] = r.last.string();
  d["best"] = r.best ? py::cast(r.best->string()) : py::none();
  d["history"] = history;
  return d;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["protocol"] = std::string(to_string(m.protocol));
  d["mAP"] = m.mAP;
  d["cmc"] = m.cmc;
  d["n_query"] = m.n_query;
  d["n_gallery"] = m.n_gallery;
  d["excluded_queries"] = m.excluded_queries;
  return d;
}

/// Randomly initialised model kept in memory for encoding experiments.
class Encoder {
 public:
  Encoder(const std::string& preset, const std::string& mode, int n_train, std::uint64_t seed)
      : cfg_(default_run_config(preset).model), mode_(parse_mode(mode).mode), store_(init_model(cfg_, n_train, seed)) {}

  Matrix encode(py::array_t<float, py::array::c_style | py::array::forcecast> frames,
                const std::string& platform) const {
    if (frames.ndim() != 4 || frames.shape(3) != 3)
      throw ValidationError("frames must have shape (T, H, W, 3)");
    Clip clip;
    clip.frames = static_cast<int>(frames.shape(0));
    clip.height = static_cast<int>(frames.shape(1));
    clip.width = static_cast<int>(frames.shape(2));
    clip.pixels.assign(frames.data(), frames.data() + frames.size());
    clip.platform = platform_of(platform);
    return encode_clip(store_, cfg_.vision, mode_, clip);
  }

  py::dict param_counts() const {
    const ParamCounts pc = count_tunable_params(cfg_, n_train(), mode_);
    py::dict d;
    d["backbone"] = pc.backbone;
    d["ifa"] = pc.ifa;
    d["cfaa"] = pc.cfaa;
    d["pbp"] = pc.pbp;
    d["prompts"] = pc.prompts;
    d["head"] = pc.head;
    return d;
  }

  void load_pretrained(const fs::path& path) { vsla::load_pretrained(store_, path); }

  int input_height() const { return cfg_.vision.vit.image_height; }
  int input_width() const { return cfg_.vision.vit.image_width; }
  int embedding_dim() const { return cfg_.vision.vit.projection_dim; }

 private:
  int n_train() const { return static_cast<int>(store_.at("head.bias").value.cols()); }

  ModelConfig cfg_;
  EncoderMode mode_;
  ParamStore store_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Video-based cross-platform person re-identification core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<CheckpointError>(m, "CheckpointError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());

  m.def(
      "gen_toy",
      [](const fs::path& out, int n_ids, int frames, int height, int width, std::uint64_t seed) {
        ToyDatasetOptions o;
        o.n_ids = n_ids;
        o.frames_per_tracklet = frames;
        o.image_height = height;
        o.image_width = width;
        o.seed = seed;
        gen_toy_dataset(o, out);
        return (out / "manifest.json").string();
      },
      py::arg("out"), py::arg("n_ids") = 16, py::arg("frames") = 12, py::arg("height") = 64, py::arg("width") = 32,
      py::arg("seed") = 1, "Write a toy dataset and return the manifest path.");

  m.def(
      "manifest_json", [](const fs::path& path) { return manifest_to_json(load_manifest(path)); }, py::arg("path"),
      "Load and validate a manifest; returns its canonical JSON text.");

  m.def(
      "sparse_temporal_sample",
      [](int length, int clip_len, std::uint64_t seed) {
        auto rng = make_rng({seed});
        return sparse_temporal_sample(length, clip_len, rng);
      },
      py::arg("length"), py::arg("clip_len"), py::arg("seed") = 0);

  m.def("chunk_tracklet", &chunk_tracklet, py::arg("length"), py::arg("clip_len"));

  py::class_<Encoder>(m, "Encoder")
      .def(py::init<const std::string&, const std::string&, int, std::uint64_t>(), py::arg("preset") = "tiny",
           py::arg("mode") = "vsla-pbp", py::arg("n_train") = 8, py::arg("seed") = 0)
      .def("encode", &Encoder::encode, py::arg("frames"), py::arg("platform") = "GROUND",
           "Per-frame embeddings (T x D) of a normalised (T, H, W, 3) clip.")
      .def("param_counts", &Encoder::param_counts)
      .def("load_pretrained", &Encoder::load_pretrained, py::arg("path"),
           "Copy image and text backbone weights from a checkpoint.")
      .def_property_readonly("input_height", &Encoder::input_height)
      .def_property_readonly("input_width", &Encoder::input_width)
      .def_property_readonly("embedding_dim", &Encoder::embedding_dim);

  m.def(
      "checkpoint_tensors",
      [](const fs::path& path) {
        const Checkpoint ckpt = load_checkpoint(path);
        py::dict d;
        for (const auto& p : ckpt.params.params()) d[py::str(p.spec.name)] = p.value;
        return d;
      },
      py::arg("path"), "Parameter tensors of a checkpoint keyed by name.");

  m.def(
      "save_checkpoint_tensors",
      [](const fs::path& path, const std::vector<std::tuple<std::string, std::string, Matrix>>& tensors,
         const std::string& meta_json) {
        Checkpoint ckpt;
        ckpt.meta = nlohmann::json::parse(meta_json);
        for (const auto& [name, group, value] : tensors) {
          const auto g = parse_group(group);
          if (!g) throw ConfigError("unknown parameter group '" + group + "'");
          ckpt.params.add(ParamSpec{name, *g, value.rows(), value.cols()}, value);
        }
        save_checkpoint(ckpt, path);
      },
      py::arg("path"), py::arg("tensors"), py::arg("meta_json") = "{}",
      "Write (name, group, matrix) tensors as a parameter-only checkpoint.");

  m.def("normalize_rows", &normalize_rows, py::arg("x"));

  m.def(
      "triplet_loss",
      [](const Matrix& emb, const std::vector<int>& labels, double margin, bool soft) {
        const TripletLoss t = loss_triplet(emb, labels, margin, soft);
        return py::make_tuple(t.value, t.d_embeddings);
      },
      py::arg("embeddings"), py::arg("labels"), py::arg("margin") = 0.3, py::arg("soft_margin") = false,
      "Batch-hard triplet loss; returns (value, gradient).");

  m.def(
      "id_loss",
      [](const Matrix& logits, const std::vector<int>& labels, double ls) {
        const CrossEntropyLoss c = loss_id(logits, labels, ls);
        return py::make_tuple(c.value, c.d_input);
      },
      py::arg("logits"), py::arg("labels"), py::arg("label_smoothing") = 0.1);

  m.def(
      "contrastive_loss",
      [](const Matrix& visual, const std::vector<int>& labels, const Matrix& text, const std::vector<int>& text_labels,
         double logit_scale) {
        const ContrastiveLoss c = loss_stage1(visual, labels, text, text_labels, SimilarityConfig{logit_scale});
        return py::make_tuple(c.value, c.d_visual, c.d_text);
      },
      py::arg("visual"), py::arg("labels"), py::arg("text"), py::arg("text_labels"), py::arg("logit_scale") = 1.0,
      "Image-to-text plus text-to-image loss; returns (value, d_visual, d_text).");

  m.def(
      "evaluate_rankings",
      [](const Matrix& distance, const std::vector<int>& qids, const std::vector<int>& gids,
         const std::vector<int>& qcams, const std::vector<int>& gcams, bool exclude_same_camera, int max_rank) {
        return metrics_dict(evaluate_rankings(distance, qids, gids, qcams, gcams, exclude_same_camera, max_rank));
      },
      py::arg("distance"), py::arg("query_ids"), py::arg("gallery_ids"), py::arg("query_cams"),
      py::arg("gallery_cams"), py::arg("exclude_same_camera") = false, py::arg("max_rank") = 20);

  m.def(
      "train",
      [](int stage, const std::string& manifest, const fs::path& out, const std::string& config,
         const std::string& mode, std::optional<std::uint64_t> seed, const std::vector<std::string>& overrides,
         const std::string& stage1_ckpt) {
        if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
        if (stage == 2 && stage1_ckpt.empty()) throw ConfigError("stage 2 needs stage1_ckpt");
        const RunConfig cfg = resolve(config, manifest, mode, seed, overrides);
        const DatasetManifest man = load_manifest(cfg.manifest);
        const RunDir dir{out};
        dir.create(cfg, "train --stage " + std::to_string(stage));
        StageResult r;
        {
          py::gil_scoped_release release;
          r = stage == 1 ? run_stage1(cfg, man, dir) : run_stage2(cfg, man, stage1_ckpt, dir);
        }
        return stage_result(r);
      },
      py::arg("stage"), py::arg("manifest"), py::arg("out"), py::arg("config") = "", py::arg("mode") = "",
      py::arg("seed") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      py::arg("stage1_ckpt") = "");

  m.def(
      "evaluate",
      [](const fs::path& checkpoint, const std::string& manifest, const std::string& protocol,
         std::optional<fs::path> out) {
        const Checkpoint ckpt = load_checkpoint(checkpoint);
        nlohmann::json j = ckpt.meta.contains("config") ? ckpt.meta["config"] : nlohmann::json::object();
        if (!manifest.empty()) apply_override(j, "dataset.manifest=\"" + manifest + "\"");
        if (!protocol.empty()) apply_override(j, "eval.protocol=" + protocol);
        const RunConfig cfg = run_config_from_json(j);
        const DatasetManifest man = load_manifest(cfg.manifest);
        const ProtocolLists lists = build_protocol(man, cfg.eval.protocol, cfg.eval.direction);
        const FeatureBank bank =
            extract_features(man, ckpt.params, cfg.model.vision, cfg.mode, cfg.augmentation, cfg.eval.clip_len);
        const Metrics met = compute_metrics(bank, lists, cfg.eval.max_rank);
        if (out) emit_report(met, checkpoint_id(ckpt), *out);
        return metrics_dict(met);
      },
      py::arg("checkpoint"), py::arg("manifest") = "", py::arg("protocol") = "", py::arg("out") = py::none());
}
