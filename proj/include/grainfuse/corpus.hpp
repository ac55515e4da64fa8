#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace grainfuse {

struct Document {
    std::string doc_id;
    std::string title; // may be empty
    std::string text;

    /// Text used for indexing and chunking: "title content" when a title
    /// exists, plain content otherwise.
    std::string indexed_text() const;
};

struct Chunk {
    std::string chunk_id; // "<doc_id>#<seq>"
    std::string doc_id;
    std::size_t seq = 0;
    std::string text;
};

struct Proposition {
    std::string prop_id;
    std::string doc_id;
    std::string text;
};

struct Query {
    std::string query_id;
    std::string text;
};

struct Subquery {
    std::string sub_id;
    std::string query_id;
    std::string text;
};

/// Whitespace tokenization: tokens are maximal runs of non-whitespace bytes.
std::vector<std::string_view> split_tokens(std::string_view text);

std::size_t count_codepoints(std::string_view utf8);

/// Greedy left-to-right packing of the document's indexed text into chunks
/// of at most chunk_word_limit tokens. Every chunk except possibly the last
/// carries exactly chunk_word_limit tokens; chunk text re-joins tokens with
/// single spaces. Throws ValidationError on a token-free document.
std::vector<Chunk> chunk_document(const Document& doc, std::size_t chunk_word_limit);

using IdSet = std::unordered_set<std::string>;

std::vector<Document> load_documents(const std::filesystem::path& path);
std::vector<Proposition> load_propositions(const std::filesystem::path& path, const IdSet& doc_ids);
std::vector<Query> load_queries(const std::filesystem::path& path);
std::vector<Subquery> load_subqueries(const std::filesystem::path& path, const IdSet& query_ids);

void save_documents(const std::filesystem::path& path, const std::vector<Document>& docs);
void save_propositions(const std::filesystem::path& path, const std::vector<Proposition>& props);
void save_queries(const std::filesystem::path& path, const std::vector<Query>& queries);
void save_subqueries(const std::filesystem::path& path, const std::vector<Subquery>& subs);
void save_chunks(const std::filesystem::path& path, const std::vector<Chunk>& chunks);
std::vector<Chunk> load_chunks(const std::filesystem::path& path, const IdSet& doc_ids);

struct CorpusPaths {
    std::filesystem::path documents;
    std::filesystem::path propositions;
    std::filesystem::path queries;
    std::filesystem::path subqueries;
};

/// A validated corpus. After build_corpus(), every document has at least one
/// proposition and every query at least one subquery: units whose parent had
/// no usable decomposition fall back to the parent's own text, so everything
/// stays retrievable at every granularity.
struct Corpus {
    std::vector<Document> documents;
    std::vector<Proposition> propositions;
    std::vector<Query> queries;
    std::vector<Subquery> subqueries;

    std::unordered_map<std::string, std::size_t> doc_index;   // doc_id -> position
    std::unordered_map<std::string, std::size_t> query_index; // query_id -> position
    std::unordered_map<std::string, std::vector<std::size_t>> props_by_doc;
    std::unordered_map<std::string, std::vector<std::size_t>> subs_by_query;

    std::size_t subquery_count(const std::string& query_id) const;
    /// Proposition text as indexed: parent title prepended, like documents.
    std::string proposition_indexed_text(const Proposition& p) const;
};

Corpus build_corpus(std::vector<Document> documents,
                    std::vector<Proposition> propositions,
                    std::vector<Query> queries,
                    std::vector<Subquery> subqueries);

Corpus load_corpus(const CorpusPaths& paths);

} // namespace grainfuse
