#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "laff/errors.hpp"
#include "laff/evalkit.hpp"
#include "test_util.hpp"

using namespace laff;
using laff::testing::random_matrix;

namespace {

EmbeddingIndex make_index(std::vector<std::string> ids, std::vector<Matrix> spaces) {
  EmbeddingIndex idx;
  idx.ids = std::move(ids);
  for (Matrix& s : spaces) idx.spaces.push_back(l2_normalize_rows(s));
  idx.finalize();
  return idx;
}

std::vector<std::span<const double>> query_of(const std::vector<Matrix>& q, std::size_t row) {
  std::vector<std::span<const double>> out;
  for (const Matrix& m : q) out.push_back(m.row(row));
  return out;
}

std::vector<std::string> ids_of(const RankedList& l, const EmbeddingIndex& idx) {
  std::vector<std::string> out;
  for (std::size_t i : l.order) out.push_back(idx.ids[i]);
  return out;
}

std::vector<QueryRanks> single(std::initializer_list<std::size_t> best) {
  std::vector<QueryRanks> r;
  for (std::size_t b : best) r.push_back({b});
  return r;
}

SynthDataset small_synth() {
  SynthSpec s = SynthSpec::desk_default();
  s.videos = 80;
  s.seed = 3;
  return synth_generate(s);
}

ModelConfig model_for(const Dataset& d, BlockKind block, std::size_t spaces) {
  ModelConfig c;
  c.video_features = d.manifest().feature_decls(Modality::video);
  c.text_features = d.manifest().feature_decls(Modality::text);
  c.spaces = spaces;
  c.total_dim = 16;
  c.block = block;
  return c;
}

}  // namespace

// ---- ranking ------------------------------------------------------------------------------

TEST(Rank, MatchingEmbeddingRanksFirst) {
  Rng rng(1);
  std::vector<Matrix> spaces{random_matrix(6, 4, rng), random_matrix(6, 4, rng)};
  EmbeddingIndex idx = make_index({"a", "b", "c", "d", "e", "f"}, spaces);
  std::vector<Matrix> q{Matrix(1, 4), Matrix(1, 4)};
  for (std::size_t s = 0; s < 2; ++s)
    std::copy(idx.spaces[s].row(3).begin(), idx.spaces[s].row(3).end(), q[s].row(0).begin());
  RankedList r = rank(query_of(q, 0), idx);
  EXPECT_EQ(r.order[0], 3u);
  EXPECT_NEAR(r.scores[0], 1.0, 1e-12);
}

TEST(Rank, TiesFollowAscendingId) {
  Matrix e{{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}};
  EmbeddingIndex idx = make_index({"zeta", "mid", "alpha"}, {e});
  std::vector<Matrix> q{Matrix{{1.0, 0.0}}};
  EXPECT_EQ(ids_of(rank(query_of(q, 0), idx), idx), (std::vector<std::string>{"alpha", "zeta", "mid"}));
}

TEST(Rank, HandCaseTwoSpaces) {
  // Space 1 cosines with the query: 1, 0, 0.6. Space 2: 0, 1, 0.8.
  // Means 0.5, 0.5, 0.7, so c first, then the tie a/b by id.
  Matrix s1{{1.0, 0.0}, {0.0, 1.0}, {0.6, 0.8}};
  Matrix s2{{0.0, 1.0}, {1.0, 0.0}, {0.8, 0.6}};
  EmbeddingIndex idx = make_index({"a", "b", "c"}, {s1, s2});
  std::vector<Matrix> q{Matrix{{1.0, 0.0}}, Matrix{{1.0, 0.0}}};
  RankedList r = rank(query_of(q, 0), idx);
  EXPECT_EQ(ids_of(r, idx), (std::vector<std::string>{"c", "a", "b"}));
  EXPECT_NEAR(r.scores[0], 0.7, 1e-15);
  EXPECT_NEAR(r.scores[2], 0.5, 1e-15);
}

TEST(Rank, ErrorsOnEmptyIndexAndBadDims) {
  EmbeddingIndex empty;
  empty.spaces = {Matrix(0, 2)};
  EXPECT_THROW(empty.finalize(), DegenerateInputError);
  EmbeddingIndex idx = make_index({"a"}, {Matrix{{1.0, 0.0}}});
  std::vector<Matrix> q{Matrix{{1.0, 0.0, 0.0}}};
  EXPECT_THROW(rank(query_of(q, 0), idx), DimensionError);
}

TEST(Rank, PermutationAndThreadIndependence) {
  Rng rng(2);
  std::vector<Matrix> spaces{random_matrix(40, 6, rng), random_matrix(40, 6, rng), random_matrix(40, 6, rng)};
  std::vector<std::string> ids;
  for (int i = 0; i < 40; ++i) ids.push_back("v" + std::to_string(i));
  EmbeddingIndex idx = make_index(ids, spaces);
  std::vector<Matrix> q{random_matrix(25, 6, rng), random_matrix(25, 6, rng), random_matrix(25, 6, rng)};
  auto one = rank_all(q, idx, 1);
  auto four = rank_all(q, idx, 4);
  ASSERT_EQ(one.size(), 25u);
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(one[i].order, four[i].order);
    EXPECT_EQ(one[i].scores, four[i].scores);
    std::vector<std::size_t> sorted = one[i].order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t j = 0; j < 40; ++j) EXPECT_EQ(sorted[j], j);
  }
}

// ---- metrics -------------------------------------------------------------------------------

TEST(Metrics, RecallAtK) {
  auto r = single({1, 6, 5});
  EXPECT_DOUBLE_EQ(recall_at_k(r, 5), 2.0 / 3.0);
  EXPECT_EQ(recall_at_k(r, 100), 1.0);
  double prev = 0.0;
  for (std::size_t k = 1; k <= 10; ++k) {
    EXPECT_GE(recall_at_k(r, k), prev);
    prev = recall_at_k(r, k);
  }
  EXPECT_THROW(recall_at_k(r, 0), ConfigError);
}

TEST(Metrics, MedianRank) {
  EXPECT_EQ(median_rank(single({1, 3, 7})), 3u);
  EXPECT_EQ(median_rank(single({2, 4})), 2u);
  EXPECT_EQ(median_rank(single({1, 1, 1, 1})), 1u);
}

TEST(Metrics, AveragePrecision) {
  EXPECT_EQ(mean_ap(single({1})), 1.0);
  std::vector<QueryRanks> two{{1, 4}};
  EXPECT_DOUBLE_EQ(mean_ap(two), 0.75);
  EXPECT_DOUBLE_EQ(mean_ap(single({3})), 1.0 / 3.0);
}

TEST(Metrics, RelevantRanks) {
  RankedList l{{4, 2, 0, 1, 3}, {0.9, 0.8, 0.7, 0.6, 0.5}};
  std::vector<std::size_t> rel{0, 4};
  EXPECT_EQ(relevant_ranks(l, rel), (QueryRanks{1, 3}));
  std::vector<std::size_t> missing{9};
  EXPECT_THROW(relevant_ranks(l, missing), DegenerateInputError);
}

TEST(Metrics, OrderedInvariants) {
  Rng rng(3);
  std::uniform_int_distribution<std::size_t> u(1, 30);
  std::vector<QueryRanks> r;
  for (int i = 0; i < 100; ++i) r.push_back({u(rng)});
  RetrievalMetrics m = compute_metrics(r);
  EXPECT_LE(m.r1, m.r5);
  EXPECT_LE(m.r5, m.r10);
  EXPECT_LE(m.r10, 1.0);
  EXPECT_GE(m.median_rank, 1u);
  EXPECT_GE(m.map, 0.0);
  EXPECT_LE(m.map, 1.0);
}

// Full similarity, naive selection sort, textbook formulas.
TEST(Metrics, MatchBruteForceOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 10 + 4 * trial, h = 1 + trial % 3, d = 5;
    std::vector<Matrix> vs, qs;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("id" + std::to_string(1000 + i));
    for (std::size_t s = 0; s < h; ++s) {
      vs.push_back(l2_normalize_rows(random_matrix(n, d, rng)));
      qs.push_back(l2_normalize_rows(random_matrix(n, d, rng)));
    }
    EmbeddingIndex idx = make_index(ids, vs);
    std::vector<QueryRanks> fast;
    auto lists = rank_all(qs, idx, 2);
    for (std::size_t q = 0; q < n; ++q) fast.push_back(relevant_ranks(lists[q], std::vector<std::size_t>{q}));

    std::size_t hit1 = 0, hit5 = 0, hit10 = 0;
    double ap_sum = 0.0;
    std::vector<std::size_t> best;
    for (std::size_t q = 0; q < n; ++q) {
      std::vector<double> score(n, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t s = 0; s < h; ++s) {
          double c = 0.0;
          for (std::size_t k = 0; k < d; ++k) c += qs[s](q, k) * vs[s](j, k);
          score[j] += c;
        }
        score[j] *= 1.0 / static_cast<double>(h);
      }
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b)
          if (score[order[b]] > score[order[a]] ||
              (score[order[b]] == score[order[a]] && ids[order[b]] < ids[order[a]]))
            std::swap(order[a], order[b]);
      std::size_t r = 0;
      while (order[r] != q) ++r;
      ++r;
      hit1 += r <= 1;
      hit5 += r <= 5;
      hit10 += r <= 10;
      ap_sum += 1.0 / static_cast<double>(r);
      best.push_back(r);
    }
    std::sort(best.begin(), best.end());
    RetrievalMetrics m = compute_metrics(fast);
    const double nn = static_cast<double>(n);
    EXPECT_EQ(m.r1, static_cast<double>(hit1) / nn);
    EXPECT_EQ(m.r5, static_cast<double>(hit5) / nn);
    EXPECT_EQ(m.r10, static_cast<double>(hit10) / nn);
    EXPECT_EQ(m.median_rank, best[(n - 1) / 2]);
    EXPECT_EQ(m.map, ap_sum / nn);
  }
}

// ---- Jaccard ------------------------------------------------------------------------------------

TEST(Jaccard, SetArithmetic) {
  std::vector<std::size_t> a{1, 2, 3, 4, 5}, b{1, 2, 3, 6, 7};
  EXPECT_DOUBLE_EQ(jaccard(a, b), 3.0 / 7.0);
  EXPECT_EQ(jaccard(a, a), 1.0);
}

TEST(Jaccard, InterspaceMatrix) {
  Rng rng(5);
  Matrix shared = random_matrix(30, 4, rng);
  std::vector<Matrix> vs{shared, shared, random_matrix(30, 4, rng)};
  std::vector<std::string> ids;
  for (int i = 0; i < 30; ++i) ids.push_back(std::to_string(100 + i));
  EmbeddingIndex idx = make_index(ids, vs);
  Matrix q = random_matrix(12, 4, rng);
  std::vector<Matrix> qs{q, q, q};
  Matrix j = jaccard_interspace(qs, idx, 5, 2);
  for (std::size_t a = 0; a < 3; ++a) {
    EXPECT_EQ(j(a, a), 1.0);
    for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(j(a, b), j(b, a));
  }
  EXPECT_EQ(j(0, 1), 1.0);
  EXPECT_LT(j(0, 2), 1.0);

  EmbeddingIndex one = make_index(ids, {shared});
  std::vector<Matrix> q1{q};
  EXPECT_THROW(jaccard_interspace(q1, one), UnsupportedError);
}

// ---- feature selection -----------------------------------------------------------------------

TEST(Select, KeepsTopWeightsInDeclarationOrder) {
  ModelConfig c = laff::testing::tiny_config(BlockKind::laff, 2, 8);
  c.video_features.push_back({"vc", 2, FeatureLevel::video});
  AttentionSummary w;
  w.video_names = {"va", "vb", "vc"};
  w.video = {0.1, 0.6, 0.3};
  w.text_names = {"ta", "tb"};
  w.text = {0.5, 0.5};
  ModelConfig out = select_features(c, w, 2, 1);
  ASSERT_EQ(out.video_features.size(), 2u);
  EXPECT_EQ(out.video_features[0].name, "vb");
  EXPECT_EQ(out.video_features[1].name, "vc");
  ASSERT_EQ(out.text_features.size(), 1u);
  EXPECT_EQ(out.text_features[0].name, "ta");  // tie goes to declaration order

  EXPECT_EQ(select_features(c, w, 3, 2), c);
  EXPECT_THROW(select_features(c, w, 0, 1), ConfigError);
  EXPECT_THROW(select_features(c, w, 4, 1), ConfigError);
}

TEST(Select, OrderingExample) {
  ModelConfig c = laff::testing::tiny_config(BlockKind::laff, 2, 8);
  c.video_features.push_back({"vc", 2, FeatureLevel::video});
  AttentionSummary w{{"va", "vb", "vc"}, {0.6, 0.3, 0.1}, {"ta", "tb"}, {0.5, 0.5}};
  ModelConfig out = select_features(c, w, 2, 2);
  EXPECT_EQ(out.video_features[0].name, "va");
  EXPECT_EQ(out.video_features[1].name, "vb");
}

// ---- dataset-level evaluation -------------------------------------------------------------------

TEST(Evaluate, ReportShapeAndOptionalParts) {
  SynthDataset s = small_synth();
  Dataset d(s.manifest, s.video_store, s.text_store);
  FusionModel m(model_for(d, BlockKind::laff, 2), 1);
  EvalOptions opt;
  opt.keep_lists = true;
  opt.with_jaccard = true;
  opt.with_attention = true;
  opt.threads = 3;
  EvalReport r = evaluate(m, d, "test", opt);
  EXPECT_EQ(r.queries, d.split("test").captions.size());
  EXPECT_EQ(r.videos, d.split("test").videos.size());
  EXPECT_EQ(r.lists.size(), r.queries);
  ASSERT_TRUE(r.jaccard.has_value());
  EXPECT_EQ(r.jaccard->rows(), 2u);
  ASSERT_TRUE(r.attention.has_value());
  EXPECT_NEAR(std::accumulate(r.attention->video.begin(), r.attention->video.end(), 0.0), 1.0, 1e-9);

  EvalReport single_thread = evaluate(m, d, "test");
  EXPECT_EQ(single_thread.metrics.map, r.metrics.map);
  EXPECT_EQ(single_thread.metrics.r1, r.metrics.r1);
}

TEST(Evaluate, UntrainedAttentionIsUniform) {
  SynthDataset s = small_synth();
  Dataset d(s.manifest, s.video_store, s.text_store);
  FusionModel m(model_for(d, BlockKind::laff, 2), 1);
  AttentionSummary a = average_attention_weights(m, d, d.split("val"));
  for (double w : a.video) EXPECT_NEAR(w, 1.0 / 3.0, 1e-12);
  for (double w : a.text) EXPECT_NEAR(w, 0.5, 1e-12);
  FusionModel mh(model_for(d, BlockKind::mhsa, 2), 1);
  EXPECT_THROW(average_attention_weights(mh, d, d.split("val")), UnsupportedError);
}

TEST(Evaluate, UnknownSplit) {
  SynthDataset s = small_synth();
  Dataset d(s.manifest, s.video_store, s.text_store);
  FusionModel m(model_for(d, BlockKind::concat, 1), 1);
  EXPECT_THROW(evaluate(m, d, "holdout"), ConfigError);
}
