#pragma once

// Ranking, retrieval metrics and model diagnostics.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "laff/dataio.hpp"
#include "laff/fusion.hpp"
#include "laff/matrix.hpp"

namespace laff {

/// Unit-norm video embeddings per space, in `ids` order.
struct EmbeddingIndex {
  std::vector<std::string> ids;
  std::vector<Matrix> spaces;
  std::vector<std::size_t> id_order;  // position of ids[i] in ascending id order

  std::size_t size() const { return ids.size(); }
  /// Validates shapes/norms and fills id_order.
  void finalize();
};

/// Encodes in eval mode, `chunk` items at a time.
EmbeddingIndex build_index(const FusionModel& model, const Dataset& data,
                           std::span<const std::size_t> videos, std::size_t chunk = 512);

/// Per-space query embeddings (queries × d each).
std::vector<Matrix> encode_queries(const FusionModel& model, const Dataset& data,
                                   std::span<const std::size_t> captions, std::size_t chunk = 512);

struct RankedList {
  std::vector<std::size_t> order;  // index positions, best first
  std::vector<double> scores;      // matching `order`
};

/// Mean per-space cosine, descending; ties by ascending video id.
/// `query[s]` is the query's embedding in space s.
RankedList rank(std::span<const std::span<const double>> query, const EmbeddingIndex& index);

/// Ranks every row of `queries` (per space). Queries are split across
/// `threads` workers; results do not depend on the thread count.
std::vector<RankedList> rank_all(std::span<const Matrix> queries, const EmbeddingIndex& index,
                                 std::size_t threads = 1);

/// Ranking by a single space's cosine.
std::vector<RankedList> rank_all_in_space(std::span<const Matrix> queries,
                                          const EmbeddingIndex& index, std::size_t space,
                                          std::size_t threads = 1);

/// Sorted 1-based ranks of the relevant items of one query.
using QueryRanks = std::vector<std::size_t>;

/// Throws DegenerateInputError when no relevant item appears in the list.
QueryRanks relevant_ranks(const RankedList& list, std::span<const std::size_t> relevant);

/// Fraction of queries with at least one relevant item in the top k.
double recall_at_k(std::span<const QueryRanks> ranks, std::size_t k);
/// Lower median over queries of the best relevant rank.
std::size_t median_rank(std::span<const QueryRanks> ranks);
/// Mean over queries of AP = mean over relevant items of (relevant seen / rank).
double mean_ap(std::span<const QueryRanks> ranks);

struct RetrievalMetrics {
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  std::size_t median_rank = 0;
  double map = 0.0;

  double sum_of_recalls() const { return r1 + r5 + r10; }
};

RetrievalMetrics compute_metrics(std::span<const QueryRanks> ranks);

/// Mean attention weight per feature, averaged over samples and spaces.
struct AttentionSummary {
  std::vector<std::string> video_names;
  std::vector<double> video;
  std::vector<std::string> text_names;
  std::vector<double> text;
};

/// Throws UnsupportedError for blocks without attention weights.
AttentionSummary average_attention_weights(const FusionModel& model, const Dataset& data,
                                           const SplitView& split, std::size_t chunk = 512);

/// h×h matrix of mean top-k Jaccard overlap between per-space rankings.
Matrix jaccard_interspace(std::span<const Matrix> queries, const EmbeddingIndex& index,
                          std::size_t k = 5, std::size_t threads = 1);

double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b);

/// Keeps the top-m features per modality by mean weight (ties: declaration
/// order); survivors stay in declaration order.
ModelConfig select_features(const ModelConfig& config, const AttentionSummary& weights,
                            std::size_t top_video, std::size_t top_text);

struct EvalReport {
  RetrievalMetrics metrics;
  std::size_t queries = 0;
  std::size_t videos = 0;
  std::vector<std::string> query_ids;
  std::vector<RankedList> lists;  // optional
  std::optional<Matrix> jaccard;
  std::optional<AttentionSummary> attention;
};

struct EvalOptions {
  std::size_t threads = 1;
  bool keep_lists = false;
  bool with_jaccard = false;
  std::size_t jaccard_k = 5;
  bool with_attention = false;
};

/// Text-to-video retrieval over one split: every caption queries every video
/// of the split; its own video is the relevant item.
EvalReport evaluate(const FusionModel& model, const Dataset& data, const std::string& split,
                    const EvalOptions& options = {});

}  // namespace laff
