#pragma once

#include "grainfuse/embedding.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace grainfuse {

struct SearchHit {
    std::string item_id;
    double score = 0.0;

    bool operator==(const SearchHit&) const = default;
};

/// Exhaustive top-k inner-product search over an EmbeddingStore.
///
/// Results are sorted by score descending; equal scores break ties by item
/// id ascending, so a given store and query always produce the same hit
/// sequence. The store must outlive the index.
class FlatIndex {
public:
    explicit FlatIndex(const EmbeddingStore& store);

    std::vector<SearchHit> search(std::span<const float> query, std::size_t k) const;

    /// Element-wise search(); parallel across queries, order-preserving.
    /// Any per-query dimension mismatch aborts the whole batch naming the
    /// offending position.
    std::vector<std::vector<SearchHit>> search_batch(const std::vector<DenseVector>& queries,
                                                     std::size_t k, unsigned workers = 1) const;

    std::size_t size() const { return store_->size(); }
    std::size_t dimension() const { return store_->dimension(); }

private:
    const EmbeddingStore* store_;
    std::vector<std::uint32_t> rows_by_id_; // store rows sorted by item id
};

} // namespace grainfuse
