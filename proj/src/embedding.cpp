#include "grainfuse/embedding.hpp"

#include "grainfuse/common.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace grainfuse {

namespace {

constexpr char kMagic[5] = {'M', 'G', 'R', 'V', '1'};

template <typename T>
T read_le(std::istream& in, const std::filesystem::path& path) {
    char buf[sizeof(T)];
    in.read(buf, sizeof(T));
    if (in.gcount() != sizeof(T))
        throw ValidationError("truncated store file: " + path.string());
    T v;
    std::memcpy(&v, buf, sizeof(T)); // little-endian host assumed
    return v;
}

template <typename T>
void write_le(std::ostream& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.write(buf, sizeof(T));
}

} // namespace

const char* unit_kind_name(UnitKind kind) {
    switch (kind) {
    case UnitKind::document_chunk: return "document_chunk";
    case UnitKind::proposition: return "proposition";
    case UnitKind::query: return "query";
    case UnitKind::subquery: return "subquery";
    case UnitKind::unknown: return "unknown";
    }
    return "unknown";
}

double similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw ValidationError("similarity: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

EmbeddingStore::EmbeddingStore(std::vector<std::string> ids, std::vector<float> values,
                               std::size_t dimension, UnitKind kind)
    : ids_(std::move(ids)), values_(std::move(values)), dimension_(dimension), kind_(kind) {
    if (dimension_ == 0) throw ValidationError("embedding store dimension must be positive");
    if (values_.size() != ids_.size() * dimension_)
        throw ValidationError("embedding store payload length mismatch: " + std::to_string(values_.size()) +
                              " values for " + std::to_string(ids_.size()) + " ids of dimension " +
                              std::to_string(dimension_));
    for (float v : values_)
        if (!std::isfinite(v)) throw ValidationError("embedding store contains a non-finite value");
    row_of_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i)
        if (!row_of_.emplace(ids_[i], i).second)
            throw ValidationError("embedding store id collision: \"" + ids_[i] + "\"");
}

EmbeddingStore EmbeddingStore::load(const std::filesystem::path& path, UnitKind kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open embedding store: " + path.string());

    char magic[5];
    in.read(magic, 5);
    if (in.gcount() != 5 || std::memcmp(magic, kMagic, 5) != 0)
        throw ValidationError("bad magic in embedding store: " + path.string());

    const auto dim = read_le<std::uint32_t>(in, path);
    const auto count = read_le<std::uint64_t>(in, path);
    if (dim == 0) throw ValidationError("embedding store declares dimension 0: " + path.string());

    std::vector<std::string> ids;
    ids.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = read_le<std::uint32_t>(in, path);
        std::string id(len, '\0');
        in.read(id.data(), static_cast<std::streamsize>(len));
        if (static_cast<std::uint32_t>(in.gcount()) != len)
            throw ValidationError("truncated id table in embedding store: " + path.string());
        ids.push_back(std::move(id));
    }

    const std::size_t nfloats = static_cast<std::size_t>(count) * dim;
    std::vector<float> values(nfloats);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(nfloats * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != nfloats * sizeof(float))
        throw ValidationError("embedding store payload shorter than declared: " + path.string());
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0)
        throw ValidationError("embedding store has trailing bytes: " + path.string());

    return EmbeddingStore(std::move(ids), std::move(values), dim, kind);
}

void EmbeddingStore::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot open embedding store for writing: " + path.string());
    out.write(kMagic, 5);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dimension_));
    write_le<std::uint64_t>(out, static_cast<std::uint64_t>(ids_.size()));
    for (const auto& id : ids_) {
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
    }
    out.write(reinterpret_cast<const char*>(values_.data()),
              static_cast<std::streamsize>(values_.size() * sizeof(float)));
    if (!out) throw RuntimeError("failed writing embedding store: " + path.string());
}

std::span<const float> EmbeddingStore::vector_at(std::size_t row) const {
    return std::span<const float>(values_.data() + row * dimension_, dimension_);
}

std::span<const float> EmbeddingStore::vector_for(const std::string& id) const {
    auto it = row_of_.find(id);
    if (it == row_of_.end())
        throw ValidationError("embedding store (" + std::string(unit_kind_name(kind_)) +
                              ") has no vector for id \"" + id + "\"");
    return vector_at(it->second);
}

EmbeddingStore EmbeddingStore::subset(const std::vector<std::string>& wanted, UnitKind kind) const {
    std::vector<std::string> ids;
    ids.reserve(wanted.size());
    std::vector<float> values;
    values.reserve(wanted.size() * dimension_);
    for (const auto& id : wanted) {
        auto v = vector_for(id);
        ids.push_back(id);
        values.insert(values.end(), v.begin(), v.end());
    }
    return EmbeddingStore(std::move(ids), std::move(values), dimension_, kind);
}

} // namespace grainfuse
