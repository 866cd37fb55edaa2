#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "laff/errors.hpp"
#include "test_util.hpp"

using namespace laff;
using laff::testing::scratch_dir;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << bytes;
}

FeatureSpace sample_video_space() {
  FeatureSpace s("f", FeatureLevel::video, 3);
  s.add("a", std::vector<double>{0.5, -1.25, 2.0});
  s.add("b", std::vector<double>{0.0, 3.5, -0.125});
  return s;
}

FeatureSpace sample_frame_space() {
  FeatureSpace s("fr", FeatureLevel::frame, 2);
  s.add_frames("a", Matrix{{1.0, 2.0}, {3.0, 4.0}});
  s.add_frames("b", Matrix{{-1.0, 0.5}});
  return s;
}

void expect_same(const FeatureSpace& a, const FeatureSpace& b) {
  ASSERT_EQ(a.ids(), b.ids());
  ASSERT_EQ(a.level(), b.level());
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a.pooled(i), y = b.pooled(i);
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << a.ids()[i];
    if (a.level() == FeatureLevel::frame) EXPECT_EQ(a.frames(i), b.frames(i));
  }
}

}  // namespace

// ---- mean pooling -----------------------------------------------------------------

TEST(MeanPool, SingleFrame) {
  EXPECT_EQ(mean_pool_frames(Matrix{{0.3, -0.7}}), (std::vector<double>{0.3, -0.7}));
}

TEST(MeanPool, OppositeFramesCancel) {
  EXPECT_EQ(mean_pool_frames(Matrix{{0.3, -0.7}, {-0.3, 0.7}}), (std::vector<double>{0.0, 0.0}));
}

TEST(MeanPool, HandMeanOfThree) {
  auto m = mean_pool_frames(Matrix{{1.0, 0.0}, {2.0, 3.0}, {6.0, -3.0}});
  EXPECT_DOUBLE_EQ(m[0], 3.0);
  EXPECT_DOUBLE_EQ(m[1], 0.0);
}

TEST(MeanPool, EmptyIsDegenerate) {
  EXPECT_THROW(mean_pool_frames(Matrix(0, 3)), DegenerateInputError);
}

// ---- feature files ----------------------------------------------------------------------

TEST(FeatureFile, BinaryRoundTrip) {
  const std::string dir = scratch_dir("feat_bin");
  for (const FeatureSpace& s : {sample_video_space(), sample_frame_space()}) {
    const std::string path = dir + "/" + s.name() + ".lftr";
    write_features_binary(s, path);
    expect_same(s, load_features(path, s.name(), s.dim(), s.level()));
  }
}

TEST(FeatureFile, TextAndBinaryLoadIdentically) {
  const std::string dir = scratch_dir("feat_dual");
  Rng rng(1);
  FeatureSpace s("x", FeatureLevel::video, 5);
  for (int i = 0; i < 20; ++i) {
    Matrix r = laff::testing::random_matrix(1, 5, rng);
    s.add("id" + std::to_string(i), r.values());
  }
  write_features_binary(s, dir + "/x.lftr");
  write_features_text(s, dir + "/x.txt");
  FeatureSpace b = load_features(dir + "/x.lftr", "x", 5, FeatureLevel::video);
  FeatureSpace t = load_features(dir + "/x.txt", "x", 5, FeatureLevel::video);
  expect_same(b, t);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(b.pooled(i)[c], s.pooled(i)[c], 1e-6);
}

TEST(FeatureFile, TextFramesAndComments) {
  const std::string dir = scratch_dir("feat_txt");
  spit(dir + "/f.txt", "# header\nv1 1 2\n\nv1 3 4\nv2 5 6\n");
  FeatureSpace s = load_features(dir + "/f.txt", "f", 2, FeatureLevel::frame);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.frames(0).rows(), 2u);
  EXPECT_DOUBLE_EQ(s.pooled(0)[1], 3.0);
}

TEST(FeatureFile, EmptyFileWithHeaderIsEmpty) {
  const std::string dir = scratch_dir("feat_empty");
  write_features_binary(FeatureSpace("e", FeatureLevel::video, 4), dir + "/e.lftr");
  EXPECT_EQ(load_features(dir + "/e.lftr", "e", 4, FeatureLevel::video).size(), 0u);
  spit(dir + "/e.txt", "");
  EXPECT_EQ(load_features(dir + "/e.txt", "e", 4, FeatureLevel::video).size(), 0u);
}

TEST(FeatureFile, StructuralErrors) {
  const std::string dir = scratch_dir("feat_err");
  const std::string path = dir + "/f.lftr";
  write_features_binary(sample_video_space(), path);
  const std::string good = slurp(path);

  EXPECT_THROW(load_features(path, "f", 4, FeatureLevel::video), FormatError);  // dim mismatch
  spit(path, good.substr(0, good.size() - 2));
  EXPECT_THROW(load_features(path, "f", 3, FeatureLevel::video), FormatError);  // truncated
  spit(path, good + "zz");
  EXPECT_THROW(load_features(path, "f", 3, FeatureLevel::video), FormatError);  // trailing
  std::string v2 = good;
  v2[4] = 9;
  spit(path, v2);
  try {
    load_features(path, "f", 3, FeatureLevel::video);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_features(dir + "/missing.lftr", "f", 3, FeatureLevel::video), FormatError);

  spit(dir + "/t.txt", "a 1 2 3\na 4 5 6\n");
  EXPECT_THROW(load_features(dir + "/t.txt", "t", 3, FeatureLevel::video), FormatError);
  spit(dir + "/t.txt", "a 1 2\n");
  EXPECT_THROW(load_features(dir + "/t.txt", "t", 3, FeatureLevel::video), FormatError);
  spit(dir + "/t.txt", "a 1 x 3\n");
  try {
    load_features(dir + "/t.txt", "t", 3, FeatureLevel::video);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
  spit(dir + "/t.txt", "a 1 2\nb 1 2\na 3 4\n");
  EXPECT_THROW(load_features(dir + "/t.txt", "t", 2, FeatureLevel::frame), FormatError);
}

TEST(FeatureSpace, RejectsDuplicatesAndWrongLevel) {
  FeatureSpace s = sample_video_space();
  EXPECT_THROW(s.add("a", std::vector<double>{1, 2, 3}), FormatError);
  EXPECT_THROW(s.add("c", std::vector<double>{1, 2}), FormatError);
  EXPECT_THROW(s.add_frames("c", Matrix{{1, 2, 3}}), FormatError);
  EXPECT_THROW(s.index_of("zzz"), FormatError);
}

// ---- batching --------------------------------------------------------------------------------

TEST(Batches, LargeBatchIsOneBatch) {
  std::vector<std::size_t> items{0, 1, 2, 3, 4};
  auto b = make_batches(items, 128, 1, 1);
  ASSERT_EQ(b.size(), 1u);
  std::set<std::size_t> got(b[0].begin(), b[0].end());
  EXPECT_EQ(got.size(), 5u);
}

TEST(Batches, SingletonTailDropped) {
  std::vector<std::size_t> items{0, 1, 2, 3, 4};
  auto b = make_batches(items, 2, 1, 1);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].size(), 2u);
  EXPECT_EQ(b[1].size(), 2u);
}

TEST(Batches, DeterministicPerSeedAndEpoch) {
  std::vector<std::size_t> items(50);
  for (std::size_t i = 0; i < items.size(); ++i) items[i] = i;
  EXPECT_EQ(make_batches(items, 8, 3, 2), make_batches(items, 8, 3, 2));
  EXPECT_NE(make_batches(items, 8, 3, 2), make_batches(items, 8, 3, 3));
  EXPECT_NE(make_batches(items, 8, 3, 2), make_batches(items, 8, 4, 2));
  EXPECT_THROW(make_batches(items, 1, 3, 2), ConfigError);
}

// ---- synthetic data and datasets ---------------------------------------------------------------

TEST(Synth, NoiselessNearestNeighbourIsTheTrueVideo) {
  SynthSpec s;
  s.videos = 60;
  s.seed = 11;
  s.video_features = {{"v", 12, 0.0, false, FeatureLevel::video, 4, 0.05, 77}};
  s.text_features = {{"t", 12, 0.0, false, FeatureLevel::video, 4, 0.05, 77}};
  SynthDataset d = synth_generate(s);
  const FeatureSpace& v = d.video_store.at("v");
  const FeatureSpace& t = d.text_store.at("t");
  for (std::size_t c = 0; c < t.size(); ++c) {
    auto q = t.pooled(c);
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      auto x = v.pooled(j);
      const double cos = dot(q, x) / std::sqrt(dot(q, q) * dot(x, x));
      if (cos > best_cos) {
        best_cos = cos;
        best = j;
      }
    }
    EXPECT_EQ(best, c);
    EXPECT_NEAR(best_cos, 1.0, 1e-12);
  }
}

TEST(Synth, SameSpecGivesIdenticalFiles) {
  SynthSpec s = SynthSpec::desk_default();
  s.videos = 40;
  const std::string a = scratch_dir("synth_a"), b = scratch_dir("synth_b");
  write_dataset(synth_generate(s), a);
  write_dataset(synth_generate(s), b);
  for (const auto& e : std::filesystem::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path().string()), slurp((std::filesystem::path(b) / rel).string())) << rel;
  }
}

TEST(Synth, DefaultShapeAndSplits) {
  SynthSpec s = SynthSpec::desk_default();
  SynthDataset d = synth_generate(s);
  EXPECT_EQ(d.manifest.videos.size(), 2000u);
  EXPECT_EQ(d.manifest.splits.at("train").size(), 1400u);
  EXPECT_EQ(d.manifest.splits.at("val").size(), 300u);
  EXPECT_EQ(d.manifest.splits.at("test").size(), 300u);
  EXPECT_EQ(d.video_store.at("motion").dim(), 48u);
  EXPECT_EQ(d.text_store.at("keywords").dim(), 16u);
}

TEST(Synth, InvalidSpecs) {
  SynthSpec s = SynthSpec::desk_default();
  s.videos = 0;
  EXPECT_THROW(synth_generate(s), ConfigError);
  s = SynthSpec::desk_default();
  s.text_features.clear();
  EXPECT_THROW(synth_generate(s), ConfigError);
  s = SynthSpec::desk_default();
  s.train_fraction = 0.9;
  s.val_fraction = 0.2;
  EXPECT_THROW(synth_generate(s), ConfigError);
}

TEST(Dataset, WriteLoadAndBatch) {
  SynthSpec s = SynthSpec::desk_default();
  s.videos = 30;
  s.captions_per_video = 2;
  s.video_features.push_back({"frames", 6, 0.1, false, FeatureLevel::frame, 3, 0.05, std::nullopt});
  SynthDataset gen = synth_generate(s);
  const std::string dir = scratch_dir("dataset");
  const std::string manifest = write_dataset(gen, dir, false);
  Dataset d = Dataset::load(manifest);

  SplitView train = d.split("train");
  EXPECT_EQ(train.videos.size(), 21u);
  EXPECT_EQ(train.captions.size(), 42u);
  EXPECT_THROW(d.split("dev"), ConfigError);

  ModelConfig c;
  c.video_features = d.manifest().feature_decls(Modality::video);
  c.text_features = d.manifest().feature_decls(Modality::text);
  c.total_dim = 8;
  c.spaces = 2;
  c.block = BlockKind::laff_ml;
  d.check_compatible(c);
  std::vector<std::size_t> caps{0, 1, 2, 3};
  PairedBatch b = make_paired_batch(d, c, caps);
  EXPECT_EQ(b.positive, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(b.video_groups, (std::vector<std::size_t>{0, 0, 1, 1}));
  ASSERT_TRUE(b.videos.frames[3].has_value());
  EXPECT_EQ(b.videos.frames[3]->offsets.back(), 12u);

  ModelConfig bad = c;
  bad.text_features.push_back({"nope", 3, FeatureLevel::video});
  EXPECT_THROW(d.check_compatible(bad), ConfigError);
}

TEST(Manifest, RoundTripAndValidation) {
  DatasetManifest m;
  m.videos = {"v0", "v1"};
  m.captions = {{"c0", "v0", "a cat"}, {"c1", "v1", "a dog"}};
  m.splits = {{"train", {"v0"}}, {"test", {"v1"}}};
  m.video_features = {{"f", 3, FeatureLevel::video, "f.lftr"}};
  m.text_features = {{"t", 2, FeatureLevel::video, "t.lftr"}};
  const std::string dir = scratch_dir("manifest");
  save_manifest(m, dir + "/m.json");
  DatasetManifest back = load_manifest(dir + "/m.json");
  EXPECT_EQ(back.videos, m.videos);
  EXPECT_EQ(back.captions[1].text, "a dog");
  EXPECT_EQ(back.splits, m.splits);

  DatasetManifest dup = m;
  dup.splits["val"] = {"v0"};
  EXPECT_THROW(dup.validate(), FormatError);
  DatasetManifest orphan = m;
  orphan.captions.push_back({"c2", "v9", ""});
  EXPECT_THROW(orphan.validate(), FormatError);
  spit(dir + "/bad.json", "{not json");
  EXPECT_THROW(load_manifest(dir + "/bad.json"), FormatError);
}
