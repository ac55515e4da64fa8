#include "grainfuse/scoring.hpp"

#include "grainfuse/common.hpp"

#include <algorithm>
#include <map>

namespace grainfuse {

namespace {

const std::string& resolve(const IdMap& child_to_parent, const std::string& child, const char* what) {
    auto it = child_to_parent.find(child);
    if (it == child_to_parent.end())
        throw ValidationError(std::string("unresolvable ") + what + " id \"" + child + "\"");
    return it->second;
}

std::vector<ScoredPair> to_pairs(const std::string& query_id, MetricKind metric,
                                 const std::map<std::string, double>& by_item) {
    std::vector<ScoredPair> out;
    out.reserve(by_item.size());
    for (const auto& [item, score] : by_item)
        out.push_back(ScoredPair{query_id, item, score, metric});
    return out;
}

} // namespace

const char* metric_name(MetricKind m) {
    switch (m) {
    case MetricKind::qd: return "qd";
    case MetricKind::qp: return "qp";
    case MetricKind::sp: return "sp";
    case MetricKind::prop_qp: return "prop_qp";
    case MetricKind::prop_sp: return "prop_sp";
    }
    return "?";
}

MetricKind metric_from_name(const std::string& name) {
    if (name == "qd") return MetricKind::qd;
    if (name == "qp") return MetricKind::qp;
    if (name == "sp") return MetricKind::sp;
    if (name == "prop_qp") return MetricKind::prop_qp;
    if (name == "prop_sp") return MetricKind::prop_sp;
    throw ValidationError("unknown metric \"" + name + "\"");
}

std::vector<ScoredPair> score_qd(const std::string& query_id, std::span<const SearchHit> chunk_hits,
                                 const IdMap& chunk_to_doc) {
    std::map<std::string, double> best;
    for (const auto& hit : chunk_hits) {
        const auto& doc = resolve(chunk_to_doc, hit.item_id, "chunk");
        auto [it, inserted] = best.emplace(doc, hit.score);
        if (!inserted) it->second = std::max(it->second, hit.score);
    }
    return to_pairs(query_id, MetricKind::qd, best);
}

std::vector<ScoredPair> score_qp(const std::string& query_id, std::span<const SearchHit> prop_hits,
                                 const IdMap& prop_to_doc) {
    std::map<std::string, double> best;
    for (const auto& hit : prop_hits) {
        const auto& doc = resolve(prop_to_doc, hit.item_id, "proposition");
        auto [it, inserted] = best.emplace(doc, hit.score);
        if (!inserted) it->second = std::max(it->second, hit.score);
    }
    return to_pairs(query_id, MetricKind::qp, best);
}

std::vector<ScoredPair> score_sp(
    const std::string& query_id,
    const std::vector<std::pair<std::string, std::vector<SearchHit>>>& hits_by_subquery,
    const IdMap& prop_to_doc, const MissingTermPolicy& missing) {
    const std::size_t m = hits_by_subquery.size();
    if (m == 0) throw ValidationError("score_sp: query \"" + query_id + "\" has no subqueries");
    if (missing.mode == MissingTermPolicy::Mode::exact && !missing.exact_max)
        throw ValidationError("score_sp: exact missing-term mode requires a resolver");

    // Per subquery, the best hit for each document it reached.
    std::vector<std::map<std::string, double>> best_per_sub(m);
    std::map<std::string, char> candidates; // keeps candidate docs ordered
    for (std::size_t i = 0; i < m; ++i) {
        for (const auto& hit : hits_by_subquery[i].second) {
            const auto& doc = resolve(prop_to_doc, hit.item_id, "proposition");
            auto [it, inserted] = best_per_sub[i].emplace(doc, hit.score);
            if (!inserted) it->second = std::max(it->second, hit.score);
            candidates.emplace(doc, 0);
        }
    }

    std::map<std::string, double> mean_of_max;
    for (const auto& [doc, _] : candidates) {
        double sum = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            auto it = best_per_sub[i].find(doc);
            if (it != best_per_sub[i].end()) {
                sum += it->second;
            } else if (missing.mode == MissingTermPolicy::Mode::exact) {
                sum += missing.exact_max(hits_by_subquery[i].first, doc);
            } else {
                sum += missing.floor_value;
            }
        }
        mean_of_max.emplace(doc, sum / static_cast<double>(m));
    }
    return to_pairs(query_id, MetricKind::sp, mean_of_max);
}

std::vector<ScoredPair> score_prop(
    const std::string& query_id,
    const std::vector<std::pair<std::string, std::vector<SearchHit>>>& hits_by_unit,
    MetricKind mode) {
    if (mode != MetricKind::prop_qp && mode != MetricKind::prop_sp)
        throw ValidationError("score_prop: mode must be prop_qp or prop_sp");
    if (hits_by_unit.empty())
        throw ValidationError("score_prop: query \"" + query_id + "\" has no scoring units");

    std::map<std::string, double> best;
    for (const auto& [unit, hits] : hits_by_unit) {
        for (const auto& hit : hits) {
            auto [it, inserted] = best.emplace(hit.item_id, hit.score);
            if (!inserted) it->second = std::max(it->second, hit.score);
        }
    }
    return to_pairs(query_id, mode, best);
}

} // namespace grainfuse
