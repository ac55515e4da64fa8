#pragma once

#include "grainfuse/flat_index.hpp"

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace grainfuse {

/// The granularity combinations a pair can be scored under. qd/qp/sp rank
/// documents; prop_qp/prop_sp rank propositions themselves.
enum class MetricKind { qd, qp, sp, prop_qp, prop_sp };

const char* metric_name(MetricKind m);
MetricKind metric_from_name(const std::string& name);

struct ScoredPair {
    std::string query_id;
    std::string item_id; // document id for qd/qp/sp, proposition id for prop_*
    double score = 0.0;
    MetricKind metric = MetricKind::qd;
};

using IdMap = std::unordered_map<std::string, std::string>;

/// What a subquery contributes for a document none of whose propositions it
/// reached within candidate depth: a fixed floor (default 0), or the true
/// maximum computed directly from embeddings.
struct MissingTermPolicy {
    enum class Mode { floor, exact };
    Mode mode = Mode::floor;
    double floor_value = 0.0;
    /// Required in exact mode: true max similarity between the subquery and
    /// the document's propositions.
    std::function<double(const std::string& sub_id, const std::string& doc_id)> exact_max;
};

/// Whole-document score from chunk hits: per document, the maximum chunk
/// similarity (chunks map back to their parent documents).
std::vector<ScoredPair> score_qd(const std::string& query_id, std::span<const SearchHit> chunk_hits,
                                 const IdMap& chunk_to_doc);

/// Query-proposition score: per document, the maximum similarity between
/// the query and the document's propositions in the candidate set.
std::vector<ScoredPair> score_qp(const std::string& query_id, std::span<const SearchHit> prop_hits,
                                 const IdMap& prop_to_doc);

/// Subquery-proposition score: per document, the mean over subqueries of
/// the best proposition match; subqueries that matched none of the
/// document's propositions contribute per the missing-term policy.
/// hits_by_subquery must carry one entry per subquery (possibly empty).
std::vector<ScoredPair> score_sp(
    const std::string& query_id,
    const std::vector<std::pair<std::string, std::vector<SearchHit>>>& hits_by_subquery,
    const IdMap& prop_to_doc, const MissingTermPolicy& missing);

/// Proposition-unit scores. prop_qp passes the query-proposition similarity
/// through (hits_by_unit holds the query's own hit list); prop_sp takes the
/// maximum over subqueries per proposition.
std::vector<ScoredPair> score_prop(
    const std::string& query_id,
    const std::vector<std::pair<std::string, std::vector<SearchHit>>>& hits_by_unit,
    MetricKind mode);

} // namespace grainfuse
