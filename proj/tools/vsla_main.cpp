#include "vsla/checkpoint.hpp"
#include "vsla/config.hpp"
#include "vsla/datamodel.hpp"
#include "vsla/errors.hpp"
#include "vsla/evaluation.hpp"
#include "vsla/model.hpp"
#include "vsla/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace vsla;

namespace {

std::string millions(std::int64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", to_millions(n));
  return buf;
}

constexpr int kUsage = 1;
constexpr int kValidation = 2;
constexpr int kRuntime = 3;

class UsageError : public Error {
 public:
  using Error::Error;
};

fs::path output_root() {
  const char* env = std::getenv("VSLA_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", c.config, "JSON run configuration");
    cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set stage2.epochs=40");
  }
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--out", c.out, "Output directory");
}

// --mode presets: encoder adapters plus tuning regime.
void apply_mode(RunConfig& cfg, const std::string& mode) {
  if (mode.empty()) return;
  if (mode == "ft") {
    cfg.mode = EncoderMode::kBaseline;
    cfg.tuning = TuningMode::kFullFinetune;
  } else if (mode == "ifa") {
    cfg.mode = EncoderMode::kIfa;
    cfg.tuning = TuningMode::kAdapter;
  } else if (mode == "vsla") {
    cfg.mode = EncoderMode::kIfaCfaa;
    cfg.tuning = TuningMode::kAdapter;
  } else if (mode == "vsla-pbp") {
    cfg.mode = EncoderMode::kIfaCfaaPbp;
    cfg.tuning = TuningMode::kAdapter;
  } else {
    throw UsageError("unknown --mode '" + mode + "' (expected ft, ifa, vsla or vsla-pbp)");
  }
}

RunConfig resolve_config(const Common& c, const std::string& mode, const std::string& manifest) {
  std::vector<std::string> overrides = c.overrides;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  if (!manifest.empty()) overrides.push_back("dataset.manifest=\"" + manifest + "\"");
  RunConfig cfg = load_run_config(c.config, overrides);
  apply_mode(cfg, mode);
  cfg.validate();
  return cfg;
}

int cmd_gen_toy(const ToyDatasetOptions& opts, const std::string& out) {
  const fs::path dir = out.empty() ? output_root() / "toy" : fs::path(out);
  const DatasetManifest m = gen_toy_dataset(opts, dir);
  std::cout << "wrote " << m.tracklets.size() << " tracklets of " << m.identities << " identities to "
            << (dir / "manifest.json").string() << "\n";
  return 0;
}

void print_history(const StageResult& r) {
  for (const auto& h : r.history) {
    std::printf("epoch %3d  loss %.6f", h.epoch, h.loss);
    if (h.val_map) std::printf("  val mAP %.4f", *h.val_map);
    std::printf("\n");
  }
}

int cmd_train(const Common& c, int stage, const std::string& mode, const std::string& manifest_path,
              const std::string& stage1_ckpt, const std::string& resume) {
  if (stage == 2 && stage1_ckpt.empty() && resume.empty())
    throw UsageError("train --stage 2 needs --stage1-ckpt (the checkpoint written by stage 1)");
  RunConfig cfg;
  if (!resume.empty() && c.config.empty()) {
    const Checkpoint ckpt = load_checkpoint(resume);
    nlohmann::json j = ckpt.meta.at("config");
    for (const auto& o : c.overrides) apply_override(j, o);
    cfg = run_config_from_json(j);
  } else {
    cfg = resolve_config(c, mode, manifest_path);
  }
  if (cfg.manifest.empty()) throw ConfigError("no dataset manifest given (use --manifest or dataset.manifest)");
  const DatasetManifest manifest = load_manifest(cfg.manifest);
  const RunDir dir{c.out.empty() ? output_root() / "train" : fs::path(c.out)};
  dir.create(cfg, "train --stage " + std::to_string(stage));
  StageResult r;
  if (!resume.empty()) {
    r = resume_stage(cfg, manifest, resume, dir);
  } else if (stage == 1) {
    r = run_stage1(cfg, manifest, dir);
  } else {
    r = run_stage2(cfg, manifest, stage1_ckpt, dir);
  }
  print_history(r);
  std::cout << "last checkpoint: " << r.last.string() << "\n";
  if (r.best) std::cout << "best checkpoint: " << r.best->string() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& protocol,
             const std::string& direction, const std::string& manifest_path) {
  if (checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  nlohmann::json j = ckpt.meta.contains("config") ? ckpt.meta["config"] : nlohmann::json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw ConfigError("cannot read config file " + c.config);
    j.merge_patch(nlohmann::json::parse(in));
  }
  std::vector<std::string> overrides = c.overrides;
  if (!protocol.empty()) overrides.push_back("eval.protocol=" + protocol);
  if (!direction.empty()) overrides.push_back("eval.direction=" + direction);
  if (!manifest_path.empty()) overrides.push_back("dataset.manifest=\"" + manifest_path + "\"");
  for (const auto& o : overrides) apply_override(j, o);
  const RunConfig cfg = run_config_from_json(j);
  if (cfg.manifest.empty()) throw ConfigError("no dataset manifest given (use --manifest)");
  const DatasetManifest manifest = load_manifest(cfg.manifest);

  const ProtocolLists lists = build_protocol(manifest, cfg.eval.protocol, cfg.eval.direction);
  const FeatureBank bank =
      extract_features(manifest, ckpt.params, cfg.model.vision, cfg.mode, cfg.augmentation, cfg.eval.clip_len);
  const Metrics m = compute_metrics(bank, lists, cfg.eval.max_rank);
  fs::path out = c.out;
  if (out.empty()) {
    const fs::path parent = fs::absolute(checkpoint).parent_path();
    out = parent.filename() == "checkpoints" ? parent.parent_path() / "reports" : output_root() / "eval";
  }
  emit_report(m, checkpoint_id(ckpt), out);
  if (m.excluded_queries > 0)
    std::cerr << "warning: " << m.excluded_queries << " queries had no valid gallery match and were excluded\n";
  std::printf("%s  mAP %.4f  rank-1 %.4f  (%d queries, %d gallery)\n", std::string(to_string(m.protocol)).c_str(),
              m.mAP, m.cmc.empty() ? 0.0 : m.cmc[0], m.n_query, m.n_gallery);
  std::cout << "report: " << out.string() << "\n";
  return 0;
}

int cmd_audit(const Common& c, const std::vector<int>& alphas, const std::string& preset, int n_train) {
  RunConfig base = default_run_config(preset);
  std::ostringstream t4;
  t4 << "alpha,ifa_params,ifa_m,cfaa_params,cfaa_m,vsla_params,vsla_m\n";
  std::printf("%6s %12s %8s %12s %8s %12s %8s\n", "alpha", "IFA", "(M)", "CFAA", "(M)", "IFA+CFAA", "(M)");
  for (int a : alphas) {
    if (a < 1) throw ConfigError("alpha must be positive");
    ModelConfig m = base.model;
    m.vision.ifa.bottleneck = a;
    m.vision.cfaa.bottleneck = a;
    const ParamCounts pc = count_tunable_params(m, n_train, EncoderMode::kIfaCfaa);
    std::printf("%6d %12lld %8.1f %12lld %8.1f %12lld %8.1f\n", a, static_cast<long long>(pc.ifa),
                to_millions(pc.ifa), static_cast<long long>(pc.cfaa), to_millions(pc.cfaa),
                static_cast<long long>(pc.vsla()), to_millions(pc.vsla()));
    t4 << a << "," << pc.ifa << "," << millions(pc.ifa) << "," << pc.cfaa << "," << millions(pc.cfaa) << ","
       << pc.vsla() << "," << millions(pc.vsla()) << "\n";
  }

  const ParamCounts full = count_tunable_params(base.model, n_train, EncoderMode::kIfaCfaaPbp);
  struct Row {
    const char* method;
    std::int64_t count;
  };
  const Row rows[] = {{"baseline", full.backbone},
                      {"baseline+VSA", full.backbone + full.prompts},
                      {"IFA", full.ifa},
                      {"IFA+VSA", full.ifa + full.prompts},
                      {"IFA+VSA+CFAA", full.ifa + full.cfaa + full.prompts},
                      {"IFA+VSA+CFAA+PBP", full.ifa + full.cfaa + full.pbp + full.prompts}};
  std::ostringstream t3;
  t3 << "method,tunable_params,tunable_m\n";
  std::printf("\n%-18s %12s %8s   (N_train=%d, text-side learnables %lld)\n", "method", "tunable", "(M)", n_train,
              static_cast<long long>(full.prompts));
  for (const auto& r : rows) {
    std::printf("%-18s %12lld %8.1f\n", r.method, static_cast<long long>(r.count), to_millions(r.count));
    t3 << r.method << "," << r.count << "," << millions(r.count) << "\n";
  }

  const fs::path out = c.out.empty() ? output_root() / "audit" : fs::path(c.out);
  fs::create_directories(out);
  std::ofstream(out / "table4_alpha.csv") << t4.str();
  std::ofstream(out / "table3_methods.csv") << t3.str();
  std::cout << "wrote " << (out / "table4_alpha.csv").string() << " and " << (out / "table3_methods.csv").string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video person re-identification with visual-semantic alignment adapters"};
  app.require_subcommand(1);

  ToyDatasetOptions toy;
  Common gen_common;
  auto* gen = app.add_subcommand("gen-toy", "Write a procedurally generated cross-platform dataset");
  gen->add_option("--ids", toy.n_ids, "Number of identities")->check(CLI::PositiveNumber);
  gen->add_option("--frames", toy.frames_per_tracklet, "Frames per tracklet")->check(CLI::PositiveNumber);
  gen->add_option("--height", toy.image_height, "Frame height")->check(CLI::PositiveNumber);
  gen->add_option("--width", toy.image_width, "Frame width")->check(CLI::PositiveNumber);
  gen->add_option("--train-fraction", toy.train_fraction, "Fraction of identities in the train split")
      ->check(CLI::Range(0.0, 1.0));
  add_common(gen, gen_common, false);

  Common train_common;
  int stage = 1;
  std::string train_mode, train_manifest, stage1_ckpt, resume;
  auto* train = app.add_subcommand("train", "Run stage 1 (prompt learning) or stage 2 (encoder tuning)");
  train->add_option("--stage", stage, "1 or 2")->check(CLI::IsMember({1, 2}));
  train->add_option("--mode", train_mode, "ft, ifa, vsla or vsla-pbp");
  train->add_option("--manifest", train_manifest, "Dataset manifest");
  train->add_option("--stage1-ckpt", stage1_ckpt, "Stage-1 checkpoint (stage 2)");
  train->add_option("--resume", resume, "Continue an interrupted stage from this checkpoint");
  add_common(train, train_common);

  Common eval_common;
  std::string checkpoint, protocol, direction, eval_manifest;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write a report");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate");
  eval->add_option("--protocol", protocol, "cross_platform or cross_camera");
  eval->add_option("--direction", direction, "ground_to_aerial or aerial_to_ground");
  eval->add_option("--manifest", eval_manifest, "Dataset manifest (defaults to the training manifest)");
  add_common(eval, eval_common);

  Common audit_common;
  std::vector<int> alphas = {64, 128, 256, 384};
  std::string preset = "clip_vit_b16";
  int n_train = 930;
  auto* audit = app.add_subcommand("audit-params", "Count tunable parameters per adapter width");
  audit->add_option("--alpha", alphas, "Bottleneck widths")->delimiter(',');
  audit->add_option("--preset", preset, "Model geometry (clip_vit_b16 or tiny)");
  audit->add_option("--n-train", n_train, "Number of training identities")->check(CLI::PositiveNumber);
  add_common(audit, audit_common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (gen->parsed()) {
      if (gen_common.seed) toy.seed = *gen_common.seed;
      return cmd_gen_toy(toy, gen_common.out);
    }
    if (train->parsed()) return cmd_train(train_common, stage, train_mode, train_manifest, stage1_ckpt, resume);
    if (eval->parsed()) return cmd_eval(eval_common, checkpoint, protocol, direction, eval_manifest);
    if (audit->parsed()) return cmd_audit(audit_common, alphas, preset, n_train);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kValidation;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
