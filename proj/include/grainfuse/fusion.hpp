#pragma once

#include "grainfuse/scoring.hpp"

#include <functional>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace grainfuse {

struct RankedEntry {
    std::string item_id;
    double score = 0.0;
    int rank = 0; // 0-based; the best item has rank 0
};

struct RankedList {
    MetricKind metric = MetricKind::qd;
    std::string query_id;
    std::vector<RankedEntry> entries; // score descending, id-ascending ties, ranks 0..n-1
};

/// Sorts one metric's scored pairs (score descending, item id ascending) and
/// assigns consecutive ranks from 0. Throws on duplicate (query, item).
RankedList rank(std::vector<ScoredPair> pairs);

/// Supplies the score of a pair that one metric's top-k list is missing, so
/// the pair can be ranked under that metric too.
using BackfillResolver =
    std::function<double(MetricKind metric, const std::string& query_id, const std::string& item_id)>;

BackfillResolver floor_backfill(double floor_value);

/// How backfilled pairs obtain ranks: re-rank the whole candidate union per
/// metric (default), or keep each top-k list's ranks and append backfilled
/// pairs after rank k-1 in backfilled-score order.
enum class RankPolicy { union_rerank, append_after_k };

const char* rank_policy_name(RankPolicy policy);
RankPolicy rank_policy_from_name(const std::string& name);

struct FusedEntry {
    std::string item_id;
    double fused_score = 0.0;
    std::vector<std::pair<MetricKind, int>> metric_ranks; // one per fused metric, metric order
};

struct FusedRun {
    std::string query_id;
    std::vector<FusedEntry> entries; // fused score descending, id-ascending ties
};

/// Reciprocal Rank Fusion over the given per-metric rankings:
/// each list is truncated to its top `depth` entries, the candidate union is
/// formed, missing (metric, pair) scores are resolved via `backfill`, each
/// metric is re-ranked over the union per `policy`, and every candidate is
/// scored as the sum of 1/(1+rank) across metrics.
FusedRun fuse_rrf(std::span<const RankedList> lists, std::size_t depth, const BackfillResolver& backfill,
                  RankPolicy policy = RankPolicy::union_rerank);

/// Two-term fusion over proposition-unit rankings {prop_qp, prop_sp}.
FusedRun fuse_rrf_prop(std::span<const RankedList> lists, std::size_t depth,
                       const BackfillResolver& backfill, RankPolicy policy = RankPolicy::union_rerank);

/// Leave-out ablation: the identical pipeline restricted to the metrics not
/// in `omit`. Throws when nothing is retained.
FusedRun fuse_ablate(std::span<const RankedList> lists, const std::set<MetricKind>& omit,
                     std::size_t depth, const BackfillResolver& backfill,
                     RankPolicy policy = RankPolicy::union_rerank);

/// Metrics fused for a query with M subqueries: all three granularity
/// combinations when M >= 2, {qd, qp} when the query is its own only
/// subquery.
std::vector<MetricKind> select_fusion_plan(std::size_t subquery_count);

// Ranked-run text format: one line per entry,
//   query_id Q0 item_id rank score tag
// with 1-based ranks and 6-decimal scores.
struct RunLine {
    std::string query_id;
    std::string item_id;
    int rank = 1;
    double score = 0.0;
};

void write_run(std::ostream& os, std::span<const RunLine> lines, const std::string& tag);
std::vector<RunLine> read_run(std::istream& is);

std::vector<RunLine> run_lines(const FusedRun& run);
std::vector<RunLine> run_lines(const RankedList& list, std::size_t depth);

} // namespace grainfuse
