#include "laff/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "laff/errors.hpp"

namespace laff {

void EmbeddingIndex::finalize() {
  if (ids.empty()) throw DegenerateInputError("embedding index is empty");
  for (const Matrix& m : spaces) {
    if (m.rows() != ids.size()) {
      throw DimensionError("embedding index: space has " + std::to_string(m.rows()) +
                           " rows for " + std::to_string(ids.size()) + " ids");
    }
  }
  std::vector<std::size_t> sorted(ids.size());
  std::iota(sorted.begin(), sorted.end(), std::size_t{0});
  std::sort(sorted.begin(), sorted.end(),
            [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  id_order.assign(ids.size(), 0);
  for (std::size_t pos = 0; pos < sorted.size(); ++pos) id_order[sorted[pos]] = pos;
}

namespace {

template <typename EncodeChunk>
std::vector<Matrix> encode_chunked(const FusionModel& model, std::span<const std::size_t> items,
                                   std::size_t chunk, EncodeChunk&& encode_chunk) {
  const std::size_t h = model.spaces();
  const std::size_t d = model.config().space_dim();
  std::vector<Matrix> out(h, Matrix(items.size(), d));
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < items.size(); start += chunk) {
    const std::size_t end = std::min(items.size(), start + chunk);
    ModalityEncoding enc = encode_chunk(items.subspan(start, end - start));
    for (std::size_t s = 0; s < h; ++s) {
      for (std::size_t r = start; r < end; ++r) {
        auto src = enc.spaces[s].embedding.row(r - start);
        std::copy(src.begin(), src.end(), out[s].row(r).begin());
      }
    }
  }
  return out;
}

// Calls fn(begin, end) over contiguous slices of [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> workers;
  const std::size_t per = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * per;
    const std::size_t end = std::min(n, begin + per);
    if (begin >= end) break;
    workers.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
}

RankedList sort_scores(std::vector<double> scores, const EmbeddingIndex& index) {
  RankedList list;
  list.order.resize(scores.size());
  std::iota(list.order.begin(), list.order.end(), std::size_t{0});
  std::sort(list.order.begin(), list.order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return index.id_order[a] < index.id_order[b];
  });
  list.scores.reserve(scores.size());
  for (std::size_t i : list.order) list.scores.push_back(scores[i]);
  return list;
}

}  // namespace

EmbeddingIndex build_index(const FusionModel& model, const Dataset& data,
                           std::span<const std::size_t> videos, std::size_t chunk) {
  EmbeddingIndex index;
  for (std::size_t v : videos) index.ids.push_back(data.video_id(v));
  index.spaces = encode_chunked(model, videos, chunk, [&](std::span<const std::size_t> part) {
    return model.encode(Modality::video, data.video_batch(model.config(), part), Mode::eval,
                        nullptr);
  });
  index.finalize();
  return index;
}

std::vector<Matrix> encode_queries(const FusionModel& model, const Dataset& data,
                                   std::span<const std::size_t> captions, std::size_t chunk) {
  return encode_chunked(model, captions, chunk, [&](std::span<const std::size_t> part) {
    return model.encode(Modality::text, data.text_batch(model.config(), part), Mode::eval,
                        nullptr);
  });
}

RankedList rank(std::span<const std::span<const double>> query, const EmbeddingIndex& index) {
  if (index.size() == 0) throw DegenerateInputError("rank: empty index");
  if (query.size() != index.spaces.size()) {
    throw DimensionError("rank: query has " + std::to_string(query.size()) +
                         " spaces, index has " + std::to_string(index.spaces.size()));
  }
  if (index.id_order.size() != index.size()) throw DimensionError("rank: index not finalized");
  const double inv = 1.0 / static_cast<double>(query.size());
  std::vector<double> scores(index.size(), 0.0);
  for (std::size_t s = 0; s < query.size(); ++s) {
    if (query[s].size() != index.spaces[s].cols()) {
      throw DimensionError("rank: query dim " + std::to_string(query[s].size()) +
                           " vs index dim " + std::to_string(index.spaces[s].cols()));
    }
    for (std::size_t j = 0; j < index.size(); ++j) scores[j] += dot(query[s], index.spaces[s].row(j));
  }
  for (double& v : scores) v *= inv;
  return sort_scores(std::move(scores), index);
}

std::vector<RankedList> rank_all(std::span<const Matrix> queries, const EmbeddingIndex& index,
                                 std::size_t threads) {
  if (queries.size() != index.spaces.size()) {
    throw DimensionError("rank_all: space count mismatch");
  }
  const std::size_t n = queries.empty() ? 0 : queries.front().rows();
  std::vector<RankedList> out(n);
  parallel_for(n, threads, [&](std::size_t begin, std::size_t end) {
    std::vector<std::span<const double>> q(queries.size());
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t s = 0; s < queries.size(); ++s) q[s] = queries[s].row(i);
      out[i] = rank(q, index);
    }
  });
  return out;
}

std::vector<RankedList> rank_all_in_space(std::span<const Matrix> queries,
                                          const EmbeddingIndex& index, std::size_t space,
                                          std::size_t threads) {
  if (space >= queries.size() || space >= index.spaces.size()) {
    throw DimensionError("rank_all_in_space: space out of range");
  }
  const Matrix& q = queries[space];
  const Matrix& vids = index.spaces[space];
  std::vector<RankedList> out(q.rows());
  parallel_for(q.rows(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      std::vector<double> scores(index.size());
      for (std::size_t j = 0; j < index.size(); ++j) scores[j] = dot(q.row(i), vids.row(j));
      out[i] = sort_scores(std::move(scores), index);
    }
  });
  return out;
}

QueryRanks relevant_ranks(const RankedList& list, std::span<const std::size_t> relevant) {
  QueryRanks ranks;
  for (std::size_t pos = 0; pos < list.order.size(); ++pos) {
    if (std::find(relevant.begin(), relevant.end(), list.order[pos]) != relevant.end()) {
      ranks.push_back(pos + 1);
    }
  }
  if (ranks.empty()) throw DegenerateInputError("query has no relevant item in the ranked list");
  return ranks;
}

double recall_at_k(std::span<const QueryRanks> ranks, std::size_t k) {
  if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
  if (ranks.empty()) return 0.0;
  std::size_t hits = 0;
  for (const QueryRanks& r : ranks) {
    if (!r.empty() && r.front() <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

std::size_t median_rank(std::span<const QueryRanks> ranks) {
  if (ranks.empty()) throw DegenerateInputError("median_rank: no queries");
  std::vector<std::size_t> best;
  best.reserve(ranks.size());
  for (const QueryRanks& r : ranks) {
    if (r.empty()) throw DegenerateInputError("median_rank: query without relevant items");
    best.push_back(r.front());
  }
  std::sort(best.begin(), best.end());
  return best[(best.size() - 1) / 2];
}

double mean_ap(std::span<const QueryRanks> ranks) {
  if (ranks.empty()) return 0.0;
  double total = 0.0;
  for (const QueryRanks& r : ranks) {
    if (r.empty()) continue;
    double sum = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      sum += static_cast<double>(j + 1) / static_cast<double>(r[j]);
    }
    total += sum / static_cast<double>(r.size());
  }
  return total / static_cast<double>(ranks.size());
}

RetrievalMetrics compute_metrics(std::span<const QueryRanks> ranks) {
  RetrievalMetrics m;
  m.r1 = recall_at_k(ranks, 1);
  m.r5 = recall_at_k(ranks, 5);
  m.r10 = recall_at_k(ranks, 10);
  m.median_rank = median_rank(ranks);
  m.map = mean_ap(ranks);
  return m;
}

AttentionSummary average_attention_weights(const FusionModel& model, const Dataset& data,
                                           const SplitView& split, std::size_t chunk) {
  const ModelConfig& cfg = model.config();
  if (cfg.block != BlockKind::laff && cfg.block != BlockKind::laff_ml) {
    throw UnsupportedError("attention weights are only defined for laff and laff_ml blocks, not " +
                           to_string(cfg.block));
  }
  AttentionSummary out;
  for (const auto& f : cfg.video_features) out.video_names.push_back(f.name);
  for (const auto& f : cfg.text_features) out.text_names.push_back(f.name);

  auto accumulate = [&](Modality modality, std::span<const std::size_t> items,
                        std::vector<double>& sums) {
    if (items.empty()) throw DegenerateInputError("attention weights: empty split");
    sums.assign(cfg.features(modality).size(), 0.0);
    chunk = std::max<std::size_t>(chunk, 1);
    for (std::size_t start = 0; start < items.size(); start += chunk) {
      auto part = items.subspan(start, std::min(chunk, items.size() - start));
      ModalityBatch batch = modality == Modality::video ? data.video_batch(cfg, part)
                                                        : data.text_batch(cfg, part);
      ModalityEncoding enc = model.encode(modality, batch, Mode::eval, nullptr);
      for (const SpaceEncoding& s : enc.spaces) {
        for (std::size_t r = 0; r < s.weights.rows(); ++r) {
          auto row = s.weights.row(r);
          for (std::size_t i = 0; i < row.size(); ++i) sums[i] += row[i];
        }
      }
    }
    const double denom = static_cast<double>(items.size() * cfg.spaces);
    for (double& v : sums) v /= denom;
  };
  accumulate(Modality::video, split.videos, out.video);
  accumulate(Modality::text, split.captions, out.text);
  return out;
}

double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  sa.erase(std::unique(sa.begin(), sa.end()), sa.end());
  std::sort(sb.begin(), sb.end());
  sb.erase(std::unique(sb.begin(), sb.end()), sb.end());
  std::vector<std::size_t> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  if (uni.empty()) return 1.0;
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

Matrix jaccard_interspace(std::span<const Matrix> queries, const EmbeddingIndex& index,
                          std::size_t k, std::size_t threads) {
  const std::size_t h = index.spaces.size();
  if (h < 2) throw UnsupportedError("inter-space Jaccard needs at least two spaces");
  if (k < 1) throw ConfigError("jaccard: k must be >= 1");
  const std::size_t n = queries.empty() ? 0 : queries.front().rows();
  if (n == 0) throw DegenerateInputError("jaccard: no queries");

  std::vector<std::vector<RankedList>> per_space;
  for (std::size_t s = 0; s < h; ++s) per_space.push_back(rank_all_in_space(queries, index, s, threads));
  const std::size_t top = std::min(k, index.size());

  Matrix out(h, h);
  for (std::size_t i = 0; i < h; ++i) {
    out(i, i) = 1.0;
    for (std::size_t j = i + 1; j < h; ++j) {
      double sum = 0.0;
      for (std::size_t q = 0; q < n; ++q) {
        std::span<const std::size_t> a(per_space[i][q].order.data(), top);
        std::span<const std::size_t> b(per_space[j][q].order.data(), top);
        sum += jaccard(a, b);
      }
      out(i, j) = out(j, i) = sum / static_cast<double>(n);
    }
  }
  return out;
}

ModelConfig select_features(const ModelConfig& config, const AttentionSummary& weights,
                            std::size_t top_video, std::size_t top_text) {
  auto pick = [](const std::vector<FeatureDecl>& feats, const std::vector<double>& w,
                 std::size_t m) {
    if (m < 1) throw ConfigError("select_features: top_m must be >= 1");
    if (m > feats.size()) {
      throw ConfigError("select_features: top_m = " + std::to_string(m) + " exceeds " +
                        std::to_string(feats.size()) + " features");
    }
    if (w.size() != feats.size()) throw DimensionError("select_features: weight count mismatch");
    std::vector<std::size_t> order(feats.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    order.resize(m);
    std::sort(order.begin(), order.end());
    std::vector<FeatureDecl> kept;
    for (std::size_t i : order) kept.push_back(feats[i]);
    return kept;
  };
  ModelConfig out = config;
  out.video_features = pick(config.video_features, weights.video, top_video);
  out.text_features = pick(config.text_features, weights.text, top_text);
  out.validate();
  return out;
}

EvalReport evaluate(const FusionModel& model, const Dataset& data, const std::string& split_name,
                    const EvalOptions& options) {
  const SplitView split = data.split(split_name);
  if (split.videos.empty() || split.captions.empty()) {
    throw DegenerateInputError("evaluate: split '" + split_name + "' is empty");
  }
  data.check_compatible(model.config());
  EmbeddingIndex index = build_index(model, data, split.videos);
  std::vector<Matrix> queries = encode_queries(model, data, split.captions);
  std::vector<RankedList> lists = rank_all(queries, index, options.threads);

  std::vector<std::size_t> position(data.manifest().videos.size(), 0);
  for (std::size_t i = 0; i < split.videos.size(); ++i) position[split.videos[i]] = i;
  std::vector<QueryRanks> ranks;
  ranks.reserve(lists.size());
  for (std::size_t q = 0; q < lists.size(); ++q) {
    const std::size_t relevant = position[data.caption_video(split.captions[q])];
    ranks.push_back(relevant_ranks(lists[q], std::span<const std::size_t>(&relevant, 1)));
  }

  EvalReport report;
  report.metrics = compute_metrics(ranks);
  report.queries = split.captions.size();
  report.videos = split.videos.size();
  if (options.keep_lists) {
    for (std::size_t c : split.captions) report.query_ids.push_back(data.caption_id(c));
    report.lists = std::move(lists);
  }
  if (options.with_jaccard && model.spaces() >= 2) {
    report.jaccard = jaccard_interspace(queries, index, options.jaccard_k, options.threads);
  }
  if (options.with_attention) report.attention = average_attention_weights(model, data, split);
  return report;
}

}  // namespace laff
