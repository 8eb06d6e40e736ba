#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fd2/config.hpp"
#include "fd2/core.hpp"
#include "fd2/data.hpp"
#include "fd2/distill.hpp"
#include "fd2/pretrain.hpp"
#include "fd2/serialize.hpp"
#include "fd2/softlabel.hpp"
#include "fd2/theory.hpp"

namespace fd2::pipeline {

namespace fs = std::filesystem;

inline const std::vector<std::string>& known_stages() {
  static const std::vector<std::string> stages = {
      "pretrain", "distill", "softlabel", "eval", "metrics", "verify-theory"};
  return stages;
}

struct StageRecord {
  std::string stage;
  double seconds = 0;
  // (path relative to out dir, content fingerprint hex)
  std::vector<std::pair<std::string, std::string>> artifacts;
};

struct RunResult {
  std::vector<StageRecord> records;
  bool theory_passed = true;
  double student_top1 = -1.0;
  std::string manifest_path;
};

// FNV over a file, or over a directory's sorted relative paths and contents.
inline std::string fingerprint_path(const fs::path& p) {
  if (fs::is_regular_file(p)) return to_hex(serialize::file_fingerprint(p.string()));
  if (!fs::is_directory(p)) throw IoError("cannot fingerprint " + p.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, p).generic_string();
    h = fnv1a64(rel.data(), rel.size(), h);
    const std::uint64_t fh = serialize::file_fingerprint(f.string());
    h = fnv1a64(&fh, sizeof(fh), h);
  }
  return to_hex(h);
}

// Recomputed teacher signals of a distilled set: the factual representation
// per image (flat class-major order) and the attention sets grouped by class.
struct DistilledAnalysis {
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
  std::vector<std::vector<Tensor<float>>> attention_by_class;
};

inline DistilledAnalysis analyze_distilled(model::TeacherModel<float>& teacher,
                                           const distill::DistilledSet& set) {
  DistilledAnalysis out;
  optim::NoGradGuard<float> guard(optim::param_vars(teacher));
  for (int k = 0; k < set.num_classes(); ++k) {
    std::vector<Tensor<float>> attns;
    for (const auto& img : set.images[static_cast<std::size_t>(k)]) {
      model::ForwardOpts<float> opts;
      opts.want_effect = false;
      auto tr = teacher.forward(
          ad::constant(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)})),
          opts);
      std::vector<double> z(tr.z->value.v.begin(), tr.z->value.v.end());
      out.features.push_back(std::move(z));
      out.labels.push_back(k);
      attns.push_back(tr.attn->value.reshaped({tr.attn->value.dim(1),
                                               tr.attn->value.dim(2),
                                               tr.attn->value.dim(3)}));
    }
    out.attention_by_class.push_back(std::move(attns));
  }
  return out;
}

namespace detail {

inline std::string toy_data_dir(const config::PipelineConfig& cfg) {
  if (!cfg.dataset_path.empty()) return cfg.dataset_path;
  return (fs::path(cfg.out_dir) / "toy").string();
}

inline std::string dataset_root(const config::PipelineConfig& cfg) {
  return cfg.dataset_kind == "toy" ? toy_data_dir(cfg) : cfg.dataset_path;
}

inline data::Dataset load_split(const config::PipelineConfig& cfg,
                                const std::string& split,
                                const std::string& needed_by) {
  const fs::path root = fs::path(dataset_root(cfg)) / split;
  if (!fs::is_directory(root))
    throw StateError("stage '" + needed_by + "' needs the dataset split '" +
                     split + "' at " + root.string() +
                     "; generate it with gen-toy-data or point dataset.path at "
                     "an image-folder tree");
  return data::load_image_folder(root.string(), cfg.image_size);
}

inline void require_artifact(const fs::path& p, const std::string& stage,
                             const std::string& produced_by) {
  if (!fs::exists(p))
    throw StateError("stage '" + stage + "' is missing its input " +
                     p.string() + "; run the '" + produced_by +
                     "' stage first");
}

}  // namespace detail

inline RunResult run_pipeline(const config::PipelineConfig& cfg,
                              std::vector<std::string> stages) {
  cfg.validate();
  if (stages.empty()) stages = known_stages();
  for (const auto& s : stages) {
    bool ok = false;
    for (const auto& k : known_stages()) ok = ok || (k == s);
    if (!ok) throw ConfigError("unknown stage '" + s + "'");
  }
  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  const fs::path teacher_path = out / "teacher.fd2c";
  const fs::path distilled_dir = out / "distilled";
  const fs::path softlabel_path = out / "softlabels.fd2l";

  RunResult result;
  for (const auto& stage : stages) {
    StageRecord rec;
    rec.stage = stage;
    const auto t0 = std::chrono::steady_clock::now();

    if (stage == "pretrain") {
      const data::Dataset train = detail::load_split(cfg, "train", stage);
      const data::Dataset val = detail::load_split(cfg, "val", stage);
      auto ckpt = pretrain::pretrain<float>(train, val, cfg.weights_f(),
                                            cfg.pretrain_config());
      serialize::save_checkpoint(ckpt, teacher_path.string());
      rec.artifacts.emplace_back("teacher.fd2c",
                                 fingerprint_path(teacher_path));
    } else if (stage == "distill") {
      detail::require_artifact(teacher_path, stage, "pretrain");
      auto ckpt = serialize::load_checkpoint(teacher_path.string());
      auto teacher = pretrain::build_model(ckpt);
      const std::string teacher_fp =
          to_hex(serialize::file_fingerprint(teacher_path.string()));
      const data::Dataset pool = detail::load_split(cfg, "train", stage);
      auto set = distill::distill_dataset(teacher, ckpt.bank, ckpt.snapshot,
                                          pool, cfg.distill_config(teacher_fp));
      distill::save_distilled(set, distilled_dir.string());
      rec.artifacts.emplace_back("distilled", fingerprint_path(distilled_dir));
    } else if (stage == "softlabel") {
      detail::require_artifact(teacher_path, stage, "pretrain");
      detail::require_artifact(distilled_dir / "manifest.json", stage,
                               "distill");
      auto ckpt = serialize::load_checkpoint(teacher_path.string());
      auto teacher = pretrain::build_model(ckpt);
      const std::string teacher_fp =
          to_hex(serialize::file_fingerprint(teacher_path.string()));
      auto set = distill::load_distilled(distilled_dir.string());
      auto store = softlabel::generate_soft_labels(
          teacher, teacher_fp, set,
          softlabel::parse_softlabel_mode(cfg.softlabel_mode),
          static_cast<float>(cfg.weights.tau), cfg.softlabel_aug, cfg.seed);
      serialize::save_softlabels(store, softlabel_path.string());
      rec.artifacts.emplace_back("softlabels.fd2l",
                                 fingerprint_path(softlabel_path));
    } else if (stage == "eval") {
      detail::require_artifact(teacher_path, stage, "pretrain");
      detail::require_artifact(distilled_dir / "manifest.json", stage,
                               "distill");
      detail::require_artifact(softlabel_path, stage, "softlabel");
      auto ckpt = serialize::load_checkpoint(teacher_path.string());
      auto teacher = pretrain::build_model(ckpt);
      auto set = distill::load_distilled(distilled_dir.string());
      auto store = serialize::load_softlabels(softlabel_path.string());
      auto student =
          softlabel::train_student(set, store, &teacher, cfg.student_config());
      const data::Dataset test = detail::load_split(cfg, "test", stage);
      result.student_top1 = softlabel::evaluate(student, test);
      {
        std::ofstream f(out / "eval.txt");
        f << "student_top1 " << result.student_top1 << "\n";
      }
      rec.artifacts.emplace_back("eval.txt",
                                 fingerprint_path(out / "eval.txt"));
    } else if (stage == "metrics") {
      detail::require_artifact(teacher_path, stage, "pretrain");
      detail::require_artifact(distilled_dir / "manifest.json", stage,
                               "distill");
      auto ckpt = serialize::load_checkpoint(teacher_path.string());
      auto teacher = pretrain::build_model(ckpt);
      auto set = distill::load_distilled(distilled_dir.string());
      const auto analysis = analyze_distilled(teacher, set);
      const auto disp =
          softlabel::intra_class_dispersion(analysis.features, analysis.labels);
      const auto nn = softlabel::inter_class_nn_center_distance(
          analysis.features, analysis.labels);
      {
        std::ofstream f(out / "metrics.txt");
        f << "# class_id dispersion nn_distance attention_trace\n";
        for (int k = 0; k < set.num_classes(); ++k)
          f << k << " " << disp[static_cast<std::size_t>(k)] << " "
            << nn[static_cast<std::size_t>(k)] << " "
            << softlabel::attention_diversity(
                   analysis.attention_by_class[static_cast<std::size_t>(k)])
            << "\n";
      }
      {
        const auto proj = softlabel::export_projection(analysis.features);
        std::ofstream f(out / "projection.txt");
        f << "# index class x y" << (proj.degenerate ? " (degenerate)" : "")
          << "\n";
        for (std::size_t i = 0; i < proj.coords.size(); ++i)
          f << i << " " << analysis.labels[i] << " " << proj.coords[i][0] << " "
            << proj.coords[i][1] << "\n";
      }
      rec.artifacts.emplace_back("metrics.txt",
                                 fingerprint_path(out / "metrics.txt"));
      rec.artifacts.emplace_back("projection.txt",
                                 fingerprint_path(out / "projection.txt"));
    } else if (stage == "verify-theory") {
      const auto results = theory::run_theory_suite(cfg.seed, 1000);
      for (const auto& r : results)
        result.theory_passed =
            result.theory_passed && r.passed && r.tightness_witness;
      {
        std::ofstream f(out / "theory.txt");
        f << theory::format_theory_table(results);
      }
      rec.artifacts.emplace_back("theory.txt",
                                 fingerprint_path(out / "theory.txt"));
    }

    rec.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    result.records.push_back(std::move(rec));
  }

  // run manifest: config echo fingerprint, per-stage wall clock, artifact
  // fingerprints
  const fs::path manifest = out / "run_manifest.txt";
  {
    std::ofstream f(manifest);
    f << "# fd2 run manifest\n";
    f << "config_fingerprint " << cfg.fingerprint() << "\n";
    f << "seed " << cfg.seed << "\n";
    f << "deterministic " << (cfg.deterministic ? "true" : "false") << "\n";
    for (const auto& rec : result.records) {
      f << "stage " << rec.stage << " seconds " << rec.seconds << "\n";
      for (const auto& [path, fp] : rec.artifacts)
        f << "artifact " << path << " " << fp << "\n";
    }
  }
  result.manifest_path = manifest.string();
  return result;
}

// The artifact fingerprint lines of a manifest (the determinism contract
// compares these; wall-clock lines are excluded).
inline std::vector<std::string> manifest_artifact_lines(
    const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot read manifest: " + manifest_path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("artifact ", 0) == 0 ||
        line.rfind("config_fingerprint ", 0) == 0)
      lines.push_back(line);
  return lines;
}

}  // namespace fd2::pipeline
