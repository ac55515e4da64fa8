#include "grainfuse/flat_index.hpp"

#include "grainfuse/common.hpp"

#include <algorithm>
#include <numeric>

namespace grainfuse {

FlatIndex::FlatIndex(const EmbeddingStore& store) : store_(&store) {
    rows_by_id_.resize(store.size());
    std::iota(rows_by_id_.begin(), rows_by_id_.end(), 0u);
    const auto& ids = store.ids();
    std::sort(rows_by_id_.begin(), rows_by_id_.end(),
              [&](std::uint32_t a, std::uint32_t b) { return ids[a] < ids[b]; });
}

std::vector<SearchHit> FlatIndex::search(std::span<const float> query, std::size_t k) const {
    if (k == 0) throw ValidationError("search: k must be >= 1");
    if (query.size() != store_->dimension())
        throw ValidationError("search: query dimension " + std::to_string(query.size()) +
                              " does not match index dimension " + std::to_string(store_->dimension()));

    const std::size_t n = store_->size();
    std::vector<double> scores(n);
    for (std::size_t row = 0; row < n; ++row)
        scores[row] = similarity(query, store_->vector_at(row));

    // Candidates start in id order, so stable score ordering keeps the
    // id-ascending tie rule.
    std::vector<std::uint32_t> order = rows_by_id_;
    const std::size_t take = std::min(k, n);
    const auto& ids = store_->ids();
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return ids[a] < ids[b];
                      });

    std::vector<SearchHit> hits;
    hits.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        hits.push_back(SearchHit{ids[order[i]], scores[order[i]]});
    return hits;
}

std::vector<std::vector<SearchHit>> FlatIndex::search_batch(const std::vector<DenseVector>& queries,
                                                            std::size_t k, unsigned workers) const {
    for (std::size_t i = 0; i < queries.size(); ++i)
        if (queries[i].size() != store_->dimension())
            throw ValidationError("search_batch: query at position " + std::to_string(i) +
                                  " has dimension " + std::to_string(queries[i].size()) +
                                  ", index has " + std::to_string(store_->dimension()));

    std::vector<std::vector<SearchHit>> out(queries.size());
    parallel_for(queries.size(), workers, [&](std::size_t i) { out[i] = search(queries[i], k); });
    return out;
}

} // namespace grainfuse
