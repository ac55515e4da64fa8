#include "grainfuse/corpus.hpp"

#include "grainfuse/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace grainfuse {

using nlohmann::json;

namespace {

bool is_ws(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](char c) { return is_ws(static_cast<unsigned char>(c)); });
}

[[noreturn]] void parse_fail(const std::filesystem::path& path, std::size_t line_no, const std::string& what) {
    throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + what);
}

std::string get_field(const json& rec, const char* key, const std::filesystem::path& path, std::size_t line_no,
                      bool allow_empty = false) {
    auto it = rec.find(key);
    if (it == rec.end() || !it->is_string())
        parse_fail(path, line_no, std::string("missing or non-string field \"") + key + "\"");
    std::string v = it->get<std::string>();
    if (!allow_empty && blank(v))
        parse_fail(path, line_no, std::string("field \"") + key + "\" is empty");
    return v;
}

/// Calls fn(line_number, parsed_object) per non-blank line.
template <typename Fn>
void for_each_record(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open corpus file: " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object())
            parse_fail(path, line_no, "line is not a JSON object");
        fn(line_no, rec);
    }
}

void check_unique(IdSet& seen, const std::string& id, const std::filesystem::path& path, std::size_t line_no) {
    if (!seen.insert(id).second)
        parse_fail(path, line_no, "duplicate id \"" + id + "\"");
}

void check_parent(const IdSet& parents, const std::string& id, const char* what,
                  const std::filesystem::path& path, std::size_t line_no) {
    if (!parents.contains(id))
        parse_fail(path, line_no, std::string("dangling reference: unknown ") + what + " \"" + id + "\"");
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot open file for writing: " + path.string());
    return out;
}

} // namespace

std::string Document::indexed_text() const {
    if (blank(title)) return text;
    return title + " " + text;
}

std::vector<std::string_view> split_tokens(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        while (i < n && is_ws(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t start = i;
        while (i < n && !is_ws(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) out.push_back(text.substr(start, i - start));
    }
    return out;
}

std::size_t count_codepoints(std::string_view utf8) {
    std::size_t n = 0;
    for (unsigned char c : utf8)
        if ((c & 0xC0) != 0x80) ++n; // continuation bytes don't start a codepoint
    return n;
}

std::vector<Chunk> chunk_document(const Document& doc, std::size_t chunk_word_limit) {
    if (chunk_word_limit == 0) throw ValidationError("chunk_word_limit must be >= 1");
    const std::string indexed = doc.indexed_text();
    const auto tokens = split_tokens(indexed);
    if (tokens.empty())
        throw ValidationError("document \"" + doc.doc_id + "\" has no tokens");
    std::vector<Chunk> chunks;
    chunks.reserve((tokens.size() + chunk_word_limit - 1) / chunk_word_limit);
    for (std::size_t begin = 0; begin < tokens.size(); begin += chunk_word_limit) {
        const std::size_t end = std::min(begin + chunk_word_limit, tokens.size());
        std::string text;
        for (std::size_t i = begin; i < end; ++i) {
            if (i > begin) text += ' ';
            text.append(tokens[i]);
        }
        const std::size_t seq = begin / chunk_word_limit;
        chunks.push_back(Chunk{doc.doc_id + "#" + std::to_string(seq), doc.doc_id, seq, std::move(text)});
    }
    return chunks;
}

std::vector<Document> load_documents(const std::filesystem::path& path) {
    std::vector<Document> out;
    IdSet seen;
    for_each_record(path, [&](std::size_t line_no, const json& rec) {
        Document d;
        d.doc_id = get_field(rec, "doc_id", path, line_no);
        d.title = rec.contains("title") ? get_field(rec, "title", path, line_no, /*allow_empty=*/true) : "";
        d.text = get_field(rec, "text", path, line_no);
        check_unique(seen, d.doc_id, path, line_no);
        out.push_back(std::move(d));
    });
    return out;
}

std::vector<Proposition> load_propositions(const std::filesystem::path& path, const IdSet& doc_ids) {
    std::vector<Proposition> out;
    IdSet seen;
    for_each_record(path, [&](std::size_t line_no, const json& rec) {
        Proposition p;
        p.prop_id = get_field(rec, "prop_id", path, line_no);
        p.doc_id = get_field(rec, "doc_id", path, line_no);
        p.text = get_field(rec, "text", path, line_no);
        check_unique(seen, p.prop_id, path, line_no);
        check_parent(doc_ids, p.doc_id, "doc_id", path, line_no);
        out.push_back(std::move(p));
    });
    return out;
}

std::vector<Query> load_queries(const std::filesystem::path& path) {
    std::vector<Query> out;
    IdSet seen;
    for_each_record(path, [&](std::size_t line_no, const json& rec) {
        Query q;
        q.query_id = get_field(rec, "query_id", path, line_no);
        q.text = get_field(rec, "text", path, line_no);
        check_unique(seen, q.query_id, path, line_no);
        out.push_back(std::move(q));
    });
    return out;
}

std::vector<Subquery> load_subqueries(const std::filesystem::path& path, const IdSet& query_ids) {
    std::vector<Subquery> out;
    IdSet seen;
    for_each_record(path, [&](std::size_t line_no, const json& rec) {
        Subquery s;
        s.sub_id = get_field(rec, "sub_id", path, line_no);
        s.query_id = get_field(rec, "query_id", path, line_no);
        s.text = get_field(rec, "text", path, line_no);
        check_unique(seen, s.sub_id, path, line_no);
        check_parent(query_ids, s.query_id, "query_id", path, line_no);
        out.push_back(std::move(s));
    });
    return out;
}

std::vector<Chunk> load_chunks(const std::filesystem::path& path, const IdSet& doc_ids) {
    std::vector<Chunk> out;
    IdSet seen;
    for_each_record(path, [&](std::size_t line_no, const json& rec) {
        Chunk c;
        c.chunk_id = get_field(rec, "chunk_id", path, line_no);
        c.doc_id = get_field(rec, "doc_id", path, line_no);
        auto it = rec.find("seq");
        if (it == rec.end() || !it->is_number_unsigned())
            parse_fail(path, line_no, "missing or non-integer field \"seq\"");
        c.seq = it->get<std::size_t>();
        c.text = get_field(rec, "text", path, line_no);
        check_unique(seen, c.chunk_id, path, line_no);
        check_parent(doc_ids, c.doc_id, "doc_id", path, line_no);
        out.push_back(std::move(c));
    });
    return out;
}

void save_documents(const std::filesystem::path& path, const std::vector<Document>& docs) {
    auto out = open_out(path);
    for (const auto& d : docs)
        out << json{{"doc_id", d.doc_id}, {"title", d.title}, {"text", d.text}}.dump() << '\n';
}

void save_propositions(const std::filesystem::path& path, const std::vector<Proposition>& props) {
    auto out = open_out(path);
    for (const auto& p : props)
        out << json{{"prop_id", p.prop_id}, {"doc_id", p.doc_id}, {"text", p.text}}.dump() << '\n';
}

void save_queries(const std::filesystem::path& path, const std::vector<Query>& queries) {
    auto out = open_out(path);
    for (const auto& q : queries)
        out << json{{"query_id", q.query_id}, {"text", q.text}}.dump() << '\n';
}

void save_subqueries(const std::filesystem::path& path, const std::vector<Subquery>& subs) {
    auto out = open_out(path);
    for (const auto& s : subs)
        out << json{{"sub_id", s.sub_id}, {"query_id", s.query_id}, {"text", s.text}}.dump() << '\n';
}

void save_chunks(const std::filesystem::path& path, const std::vector<Chunk>& chunks) {
    auto out = open_out(path);
    for (const auto& c : chunks)
        out << json{{"chunk_id", c.chunk_id}, {"doc_id", c.doc_id}, {"seq", c.seq}, {"text", c.text}}.dump()
            << '\n';
}

std::size_t Corpus::subquery_count(const std::string& query_id) const {
    auto it = subs_by_query.find(query_id);
    return it == subs_by_query.end() ? 0 : it->second.size();
}

std::string Corpus::proposition_indexed_text(const Proposition& p) const {
    auto it = doc_index.find(p.doc_id);
    if (it == doc_index.end())
        throw ValidationError("proposition \"" + p.prop_id + "\" references unknown doc \"" + p.doc_id + "\"");
    const auto& title = documents[it->second].title;
    if (blank(title)) return p.text;
    return title + " " + p.text;
}

Corpus build_corpus(std::vector<Document> documents,
                    std::vector<Proposition> propositions,
                    std::vector<Query> queries,
                    std::vector<Subquery> subqueries) {
    Corpus c;
    c.documents = std::move(documents);
    c.queries = std::move(queries);

    for (std::size_t i = 0; i < c.documents.size(); ++i) {
        const auto& d = c.documents[i];
        if (blank(d.text)) throw ValidationError("document \"" + d.doc_id + "\" has empty text");
        if (!c.doc_index.emplace(d.doc_id, i).second)
            throw ValidationError("duplicate doc_id \"" + d.doc_id + "\"");
    }
    for (std::size_t i = 0; i < c.queries.size(); ++i) {
        const auto& q = c.queries[i];
        if (blank(q.text)) throw ValidationError("query \"" + q.query_id + "\" has empty text");
        if (!c.query_index.emplace(q.query_id, i).second)
            throw ValidationError("duplicate query_id \"" + q.query_id + "\"");
    }

    IdSet prop_ids, sub_ids;
    for (auto& p : propositions) {
        if (!prop_ids.insert(p.prop_id).second)
            throw ValidationError("duplicate prop_id \"" + p.prop_id + "\"");
        if (!c.doc_index.contains(p.doc_id))
            throw ValidationError("proposition \"" + p.prop_id + "\" references unknown doc_id \"" + p.doc_id + "\"");
        if (blank(p.text)) throw ValidationError("proposition \"" + p.prop_id + "\" has empty text");
    }
    for (auto& s : subqueries) {
        if (!sub_ids.insert(s.sub_id).second)
            throw ValidationError("duplicate sub_id \"" + s.sub_id + "\"");
        if (!c.query_index.contains(s.query_id))
            throw ValidationError("subquery \"" + s.sub_id + "\" references unknown query_id \"" + s.query_id + "\"");
        if (blank(s.text)) throw ValidationError("subquery \"" + s.sub_id + "\" has empty text");
    }

    c.propositions = std::move(propositions);
    c.subqueries = std::move(subqueries);

    // Parents without any decomposition fall back to their own text.
    std::unordered_set<std::string> docs_with_props, queries_with_subs;
    for (const auto& p : c.propositions) docs_with_props.insert(p.doc_id);
    for (const auto& s : c.subqueries) queries_with_subs.insert(s.query_id);
    for (const auto& d : c.documents) {
        if (docs_with_props.contains(d.doc_id)) continue;
        std::string pid = d.doc_id + "#self";
        while (prop_ids.contains(pid)) pid += "'";
        prop_ids.insert(pid);
        c.propositions.push_back(Proposition{pid, d.doc_id, d.text});
    }
    for (const auto& q : c.queries) {
        if (queries_with_subs.contains(q.query_id)) continue;
        std::string sid = q.query_id + "#self";
        while (sub_ids.contains(sid)) sid += "'";
        sub_ids.insert(sid);
        c.subqueries.push_back(Subquery{sid, q.query_id, q.text});
    }

    for (std::size_t i = 0; i < c.propositions.size(); ++i)
        c.props_by_doc[c.propositions[i].doc_id].push_back(i);
    for (std::size_t i = 0; i < c.subqueries.size(); ++i)
        c.subs_by_query[c.subqueries[i].query_id].push_back(i);
    return c;
}

Corpus load_corpus(const CorpusPaths& paths) {
    auto docs = load_documents(paths.documents);
    IdSet doc_ids;
    for (const auto& d : docs) doc_ids.insert(d.doc_id);
    auto props = load_propositions(paths.propositions, doc_ids);
    auto queries = load_queries(paths.queries);
    IdSet query_ids;
    for (const auto& q : queries) query_ids.insert(q.query_id);
    auto subs = load_subqueries(paths.subqueries, query_ids);
    return build_corpus(std::move(docs), std::move(props), std::move(queries), std::move(subs));
}

} // namespace grainfuse
