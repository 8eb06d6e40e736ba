// Serialization containers and the stage orchestrator.

#include <gtest/gtest.h>

#include <filesystem>

#include "fd2/pipeline.hpp"
#include "fd2/serialize.hpp"
#include "test_util.hpp"

using namespace fd2;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "fd2_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

pretrain::TeacherCheckpoint<float> make_checkpoint() {
  data::ToySpec spec;
  spec.num_classes = 2;
  spec.train_per_class = 6;
  spec.val_per_class = 2;
  spec.test_per_class = 2;
  spec.image_size = 16;
  spec.mark_size = 3;
  spec.mark_jitter = 1;
  spec.seed = 17;
  const auto train = data::make_toy_split(spec, "train");
  const auto val = data::make_toy_split(spec, "val");
  pretrain::PretrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 6;
  cfg.num_maps = 2;
  cfg.channels = {4, 8};
  cfg.seed = 18;
  cfg.config_fingerprint = "cafef00dcafef00d";
  constraints::LossWeights<float> w;
  return pretrain::pretrain<float>(train, val, w, cfg);
}

}  // namespace

TEST(Serialize, CheckpointRoundTripIsExact) {
  const auto ckpt = make_checkpoint();
  const auto dir = fresh_dir("ckpt_rt");
  const std::string path = (dir / "t.fd2c").string();
  serialize::save_checkpoint(ckpt, path);
  const auto loaded = serialize::load_checkpoint(path);

  EXPECT_EQ(loaded.num_classes, ckpt.num_classes);
  EXPECT_EQ(loaded.num_maps, ckpt.num_maps);
  EXPECT_EQ(loaded.channels, ckpt.channels);
  EXPECT_EQ(loaded.image_size, ckpt.image_size);
  EXPECT_EQ(loaded.config_fingerprint, "cafef00dcafef00d");
  ASSERT_EQ(loaded.params.size(), ckpt.params.size());
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    EXPECT_EQ(loaded.params[i].first, ckpt.params[i].first);
    EXPECT_EQ(loaded.params[i].second.v, ckpt.params[i].second.v);
  }
  ASSERT_EQ(loaded.buffers.size(), ckpt.buffers.size());
  for (std::size_t i = 0; i < ckpt.buffers.size(); ++i)
    EXPECT_EQ(loaded.buffers[i].second.v, ckpt.buffers[i].second.v);
  EXPECT_EQ(loaded.bank.prototypes.v, ckpt.bank.prototypes.v);
  EXPECT_EQ(loaded.bank.initialized, ckpt.bank.initialized);
  EXPECT_EQ(loaded.snapshot.means, ckpt.snapshot.means);
  EXPECT_EQ(loaded.snapshot.vars, ckpt.snapshot.vars);
  EXPECT_EQ(loaded.history, ckpt.history);

  // reload reproduces forward outputs bit-for-bit
  auto m1 = pretrain::build_model(ckpt);
  auto m2 = pretrain::build_model(loaded);
  Rng rng(19);
  const auto img = test::random_tensor_f({3, 16, 16}, rng, 0.3f);
  const auto o1 =
      model::teacher_forward(img, m1, cal::CounterfactualMode::kUniform, 0);
  const auto o2 =
      model::teacher_forward(img, m2, cal::CounterfactualMode::kUniform, 0);
  EXPECT_EQ(o1.p_bb, o2.p_bb);
  EXPECT_EQ(o1.p_eff, o2.p_eff);
}

TEST(Serialize, CheckpointRejectsWrongMagic) {
  const auto dir = fresh_dir("ckpt_magic");
  const std::string path = (dir / "bad.fd2c").string();
  std::ofstream(path, std::ios::binary) << "NOPE garbage";
  EXPECT_THROW(serialize::load_checkpoint(path), IoError);
}

TEST(Serialize, SoftLabelRoundTrip) {
  softlabel::SoftLabelStore store;
  store.num_classes = 3;
  store.mode = softlabel::SoftLabelMode::kOnline;
  store.tau = 2.5f;
  store.aug_policy = "crop_flip";
  store.seed = 77;
  store.teacher_fingerprint = "0123456789abcdef";
  Rng rng(20);
  for (int i = 0; i < 4; ++i) {
    std::vector<std::vector<float>> per_image;
    for (int e = 0; e < 2; ++e) {
      std::vector<float> v(3);
      float s = 0;
      for (auto& p : v) {
        p = float(rng.uniform()) + 0.05f;
        s += p;
      }
      for (auto& p : v) p /= s;
      per_image.push_back(std::move(v));
    }
    store.vectors.push_back(std::move(per_image));
  }
  const auto dir = fresh_dir("sl_rt");
  const std::string path = (dir / "s.fd2l").string();
  serialize::save_softlabels(store, path);
  const auto loaded = serialize::load_softlabels(path);
  EXPECT_EQ(loaded.num_classes, 3);
  EXPECT_EQ(loaded.mode, softlabel::SoftLabelMode::kOnline);
  EXPECT_FLOAT_EQ(loaded.tau, 2.5f);
  EXPECT_EQ(loaded.aug_policy, "crop_flip");
  EXPECT_EQ(loaded.seed, 77u);
  EXPECT_EQ(loaded.teacher_fingerprint, "0123456789abcdef");
  EXPECT_EQ(loaded.vectors, store.vectors);
}

TEST(Serialize, FileFingerprintIsStable) {
  const auto dir = fresh_dir("fp");
  const std::string path = (dir / "x.bin").string();
  std::ofstream(path, std::ios::binary) << "hello";
  EXPECT_EQ(serialize::file_fingerprint(path), fnv1a64("hello"));
  EXPECT_THROW(serialize::file_fingerprint((dir / "missing").string()), IoError);
}

TEST(Pipeline, VerifyTheoryRunsWithoutAnyDataset) {
  config::PipelineConfig cfg;
  cfg.out_dir = fresh_dir("pipe_theory").string();
  cfg.seed = 5;
  const auto result = pipeline::run_pipeline(cfg, {"verify-theory"});
  EXPECT_TRUE(result.theory_passed);
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "theory.txt"));
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "run_manifest.txt"));
  const auto lines = pipeline::manifest_artifact_lines(result.manifest_path);
  EXPECT_GE(lines.size(), 2u);  // config fingerprint + theory artifact
}

TEST(Pipeline, MissingUpstreamArtifactNamesTheStage) {
  config::PipelineConfig cfg;
  cfg.out_dir = fresh_dir("pipe_missing").string();
  cfg.dataset_path = (fs::path(cfg.out_dir) / "toy").string();
  data::ToySpec spec = cfg.to_toy_spec();
  spec.num_classes = 2;
  spec.train_per_class = 2;
  spec.val_per_class = 1;
  spec.test_per_class = 1;
  cfg.toy_classes = 2;
  cfg.toy_train_per_class = 2;
  cfg.toy_val_per_class = 1;
  cfg.toy_test_per_class = 1;
  data::gen_toy_dataset(spec, cfg.dataset_path);
  try {
    pipeline::run_pipeline(cfg, {"distill"});
    FAIL() << "expected StateError";
  } catch (const StateError& e) {
    EXPECT_NE(std::string(e.what()).find("pretrain"), std::string::npos);
  }
}

TEST(Pipeline, MissingDatasetIsActionable) {
  config::PipelineConfig cfg;
  cfg.out_dir = fresh_dir("pipe_nodata").string();
  try {
    pipeline::run_pipeline(cfg, {"pretrain"});
    FAIL() << "expected StateError";
  } catch (const StateError& e) {
    EXPECT_NE(std::string(e.what()).find("gen-toy-data"), std::string::npos);
  }
}

TEST(Pipeline, UnknownStageRejected) {
  config::PipelineConfig cfg;
  cfg.out_dir = fresh_dir("pipe_badstage").string();
  EXPECT_THROW(pipeline::run_pipeline(cfg, {"frobnicate"}), ConfigError);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
