#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace grainfuse {

using DenseVector = std::vector<float>;

enum class UnitKind { document_chunk, proposition, query, subquery, unknown };

const char* unit_kind_name(UnitKind kind);

/// Inner product with 64-bit accumulation. Throws ValidationError on
/// dimension mismatch.
double similarity(std::span<const float> a, std::span<const float> b);

/// Immutable id -> vector map with one dimension for every entry.
///
/// On-disk layout (little-endian): magic "MGRV1", dimension as u32, count
/// as u64, then count ids (u32 byte length + UTF-8 bytes), then
/// count * dimension f32 values in id-table order.
class EmbeddingStore {
public:
    EmbeddingStore() = default;
    EmbeddingStore(std::vector<std::string> ids, std::vector<float> values, std::size_t dimension,
                   UnitKind kind = UnitKind::unknown);

    static EmbeddingStore load(const std::filesystem::path& path, UnitKind kind = UnitKind::unknown);
    void save(const std::filesystem::path& path) const;

    std::size_t dimension() const { return dimension_; }
    std::size_t size() const { return ids_.size(); }
    UnitKind kind() const { return kind_; }
    const std::vector<std::string>& ids() const { return ids_; }

    std::span<const float> vector_at(std::size_t row) const;
    /// Throws ValidationError when the id is not in the store: lookup is
    /// total over the declared id set.
    std::span<const float> vector_for(const std::string& id) const;
    bool contains(const std::string& id) const { return row_of_.contains(id); }

    /// New store holding exactly the requested ids, in the requested order.
    EmbeddingStore subset(const std::vector<std::string>& wanted, UnitKind kind) const;

private:
    std::vector<std::string> ids_;
    std::vector<float> values_; // row-major, size() * dimension()
    std::unordered_map<std::string, std::size_t> row_of_;
    std::size_t dimension_ = 0;
    UnitKind kind_ = UnitKind::unknown;
};

} // namespace grainfuse
