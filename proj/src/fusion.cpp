#include "grainfuse/fusion.hpp"

#include "grainfuse/common.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace grainfuse {

RankedList rank(std::vector<ScoredPair> pairs) {
    RankedList out;
    if (pairs.empty()) return out;
    out.metric = pairs.front().metric;
    out.query_id = pairs.front().query_id;

    std::unordered_set<std::string> seen;
    for (const auto& p : pairs) {
        if (p.metric != out.metric || p.query_id != out.query_id)
            throw ValidationError("rank: pairs mix metrics or queries");
        if (!seen.insert(p.item_id).second)
            throw ValidationError("rank: duplicate (query, item) pair for item \"" + p.item_id + "\"");
    }

    std::sort(pairs.begin(), pairs.end(), [](const ScoredPair& a, const ScoredPair& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.item_id < b.item_id;
    });
    out.entries.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i)
        out.entries.push_back(RankedEntry{pairs[i].item_id, pairs[i].score, static_cast<int>(i)});
    return out;
}

BackfillResolver floor_backfill(double floor_value) {
    return [floor_value](MetricKind, const std::string&, const std::string&) { return floor_value; };
}

const char* rank_policy_name(RankPolicy policy) {
    return policy == RankPolicy::union_rerank ? "union_rerank" : "append_after_k";
}

RankPolicy rank_policy_from_name(const std::string& name) {
    if (name == "union_rerank") return RankPolicy::union_rerank;
    if (name == "append_after_k") return RankPolicy::append_after_k;
    throw ValidationError("unknown rank policy \"" + name + "\"");
}

namespace {

struct MetricColumn {
    MetricKind metric;
    // item -> (score, original top-k rank or -1 when backfilled)
    std::unordered_map<std::string, std::pair<double, int>> scores;
};

FusedRun fuse_core(std::span<const RankedList> lists, std::size_t depth, const BackfillResolver& backfill,
                   RankPolicy policy) {
    if (lists.empty()) throw ValidationError("fuse: no rankings to fuse");
    if (depth == 0) throw ValidationError("fuse: depth must be >= 1");

    const std::string& query_id = lists.front().query_id;
    std::set<MetricKind> metrics;
    for (const auto& l : lists) {
        if (l.query_id != query_id)
            throw ValidationError("fuse: rankings belong to different queries (\"" + query_id + "\" vs \"" +
                                  l.query_id + "\")");
        if (!metrics.insert(l.metric).second)
            throw ValidationError(std::string("fuse: metric ") + metric_name(l.metric) + " appears twice");
    }

    // Top-depth of each list, then the candidate union.
    std::vector<MetricColumn> columns;
    columns.reserve(lists.size());
    std::map<std::string, char> union_items;
    for (const auto& l : lists) {
        MetricColumn col;
        col.metric = l.metric;
        const std::size_t take = std::min(depth, l.entries.size());
        for (std::size_t i = 0; i < take; ++i) {
            const auto& e = l.entries[i];
            col.scores.emplace(e.item_id, std::make_pair(e.score, e.rank));
            union_items.emplace(e.item_id, 0);
        }
        columns.push_back(std::move(col));
    }

    // Resolve scores the truncated lists are missing.
    for (auto& col : columns) {
        for (const auto& [item, _] : union_items) {
            if (col.scores.contains(item)) continue;
            if (!backfill)
                throw ValidationError(std::string("fuse: no backfill resolver for pair (") + query_id +
                                      ", " + item + ") under metric " + metric_name(col.metric));
            col.scores.emplace(item, std::make_pair(backfill(col.metric, query_id, item), -1));
        }
    }

    // Ranks over the union, per metric.
    std::unordered_map<std::string, std::vector<std::pair<MetricKind, int>>> ranks;
    ranks.reserve(union_items.size());
    for (const auto& col : columns) {
        std::vector<const std::string*> items;
        items.reserve(union_items.size());
        for (const auto& [item, _] : union_items) items.push_back(&item);

        if (policy == RankPolicy::union_rerank) {
            std::sort(items.begin(), items.end(), [&](const std::string* a, const std::string* b) {
                const double sa = col.scores.at(*a).first, sb = col.scores.at(*b).first;
                if (sa != sb) return sa > sb;
                return *a < *b;
            });
        } else {
            // Keep top-k ranks; backfilled items follow, ordered by score.
            std::sort(items.begin(), items.end(), [&](const std::string* a, const std::string* b) {
                const auto& [sa, ra] = col.scores.at(*a);
                const auto& [sb, rb] = col.scores.at(*b);
                const bool in_a = ra >= 0, in_b = rb >= 0;
                if (in_a != in_b) return in_a;
                if (in_a) return ra < rb;
                if (sa != sb) return sa > sb;
                return *a < *b;
            });
        }
        for (std::size_t i = 0; i < items.size(); ++i)
            ranks[*items[i]].emplace_back(col.metric, static_cast<int>(i));
    }

    FusedRun run;
    run.query_id = query_id;
    run.entries.reserve(union_items.size());
    for (const auto& [item, _] : union_items) {
        FusedEntry e;
        e.item_id = item;
        e.metric_ranks = ranks.at(item);
        std::sort(e.metric_ranks.begin(), e.metric_ranks.end()); // fixed metric order keeps sums reproducible
        for (const auto& [metric, r] : e.metric_ranks)
            e.fused_score += 1.0 / (1.0 + static_cast<double>(r));
        run.entries.push_back(std::move(e));
    }
    std::sort(run.entries.begin(), run.entries.end(), [](const FusedEntry& a, const FusedEntry& b) {
        if (a.fused_score != b.fused_score) return a.fused_score > b.fused_score;
        return a.item_id < b.item_id;
    });
    return run;
}

} // namespace

FusedRun fuse_rrf(std::span<const RankedList> lists, std::size_t depth, const BackfillResolver& backfill,
                  RankPolicy policy) {
    for (const auto& l : lists)
        if (l.metric != MetricKind::qd && l.metric != MetricKind::qp && l.metric != MetricKind::sp)
            throw ValidationError("fuse_rrf: document-level fusion got proposition-level metric " +
                                  std::string(metric_name(l.metric)));
    return fuse_core(lists, depth, backfill, policy);
}

FusedRun fuse_rrf_prop(std::span<const RankedList> lists, std::size_t depth,
                       const BackfillResolver& backfill, RankPolicy policy) {
    for (const auto& l : lists)
        if (l.metric != MetricKind::prop_qp && l.metric != MetricKind::prop_sp)
            throw ValidationError("fuse_rrf_prop: proposition fusion got document-level metric " +
                                  std::string(metric_name(l.metric)));
    return fuse_core(lists, depth, backfill, policy);
}

FusedRun fuse_ablate(std::span<const RankedList> lists, const std::set<MetricKind>& omit,
                     std::size_t depth, const BackfillResolver& backfill, RankPolicy policy) {
    std::vector<RankedList> kept;
    for (const auto& l : lists)
        if (!omit.contains(l.metric)) kept.push_back(l);
    if (kept.empty()) throw ValidationError("fuse_ablate: all metrics omitted");
    return fuse_core(kept, depth, backfill, policy);
}

std::vector<MetricKind> select_fusion_plan(std::size_t subquery_count) {
    if (subquery_count == 0) throw ValidationError("select_fusion_plan: subquery count must be >= 1");
    if (subquery_count == 1) return {MetricKind::qd, MetricKind::qp};
    return {MetricKind::qd, MetricKind::qp, MetricKind::sp};
}

void write_run(std::ostream& os, std::span<const RunLine> lines, const std::string& tag) {
    char score_buf[64];
    for (const auto& l : lines) {
        std::snprintf(score_buf, sizeof(score_buf), "%.6f", l.score);
        os << l.query_id << " Q0 " << l.item_id << ' ' << l.rank << ' ' << score_buf << ' ' << tag << '\n';
    }
}

std::vector<RunLine> read_run(std::istream& is) {
    std::vector<RunLine> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        RunLine r;
        std::string q0, tag;
        if (!(ls >> r.query_id >> q0 >> r.item_id >> r.rank >> r.score >> tag))
            throw ValidationError("run file line " + std::to_string(line_no) + ": malformed record");
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<RunLine> run_lines(const FusedRun& run) {
    std::vector<RunLine> out;
    out.reserve(run.entries.size());
    for (std::size_t i = 0; i < run.entries.size(); ++i)
        out.push_back(RunLine{run.query_id, run.entries[i].item_id, static_cast<int>(i + 1),
                              run.entries[i].fused_score});
    return out;
}

std::vector<RunLine> run_lines(const RankedList& list, std::size_t depth) {
    std::vector<RunLine> out;
    const std::size_t take = std::min(depth, list.entries.size());
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        out.push_back(RunLine{list.query_id, list.entries[i].item_id, static_cast<int>(i + 1),
                              list.entries[i].score});
    return out;
}

} // namespace grainfuse
