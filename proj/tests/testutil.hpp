#pragma once

// Shared test scaffolding: scratch directories, seeded generators, synthetic
// corpora, and reference implementations written straight from the metric
// definitions so library results can be checked against independent code.

#include "grainfuse/corpus.hpp"
#include "grainfuse/embedding.hpp"
#include "grainfuse/flat_index.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace testutil {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;

    explicit TempDir(const std::string& prefix = "grainfuse") {
        static std::atomic<unsigned> counter{0};
        std::random_device rd;
        std::ostringstream name;
        name << prefix << '-' << std::hex << rd() << '-' << counter.fetch_add(1);
        path = fs::temp_directory_path() / name.str();
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << content;
}

inline std::vector<float> random_vector(std::mt19937_64& rng, std::size_t dim) {
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> v(dim);
    for (auto& x : v) x = dist(rng);
    return v;
}

// Sequential inner product with double accumulation.
inline double ref_dot(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

// Full scan, sort by (score desc, id asc), cut at k.
inline std::vector<grainfuse::SearchHit> ref_top_k(const std::vector<std::string>& ids,
                                                   const std::vector<std::vector<float>>& vectors,
                                                   const std::vector<float>& query, std::size_t k) {
    std::vector<grainfuse::SearchHit> hits;
    hits.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i)
        hits.push_back({ids[i], ref_dot(vectors[i], query)});
    std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.item_id < b.item_id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
}

// Normalized discounted cumulative gain, restated from its definition: DCG
// discounts grade gains by log2(position + 1); the ideal ranking orders every
// judged grade descending.
inline double ref_ndcg(const std::vector<std::string>& ranked, const std::map<std::string, int>& judged,
                       std::size_t k, bool exponential = false) {
    auto gain = [&](int g) { return exponential ? std::exp2(double(g)) - 1.0 : double(g); };
    double dcg = 0.0;
    for (std::size_t i = 0; i < ranked.size() && i < k; ++i) {
        auto it = judged.find(ranked[i]);
        if (it != judged.end()) dcg += gain(it->second) / std::log2(double(i) + 2.0);
    }
    std::vector<int> grades;
    for (const auto& [id, g] : judged) grades.push_back(g);
    std::sort(grades.begin(), grades.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < grades.size() && grades[i] > 0; ++i)
        idcg += gain(grades[i]) / std::log2(double(i) + 2.0);
    return idcg == 0.0 ? 0.0 : dcg / idcg;
}

inline double ref_recall(const std::vector<std::string>& ranked, const std::map<std::string, int>& judged,
                         std::size_t k) {
    std::size_t relevant = 0, found = 0;
    for (const auto& [id, g] : judged)
        if (g > 0) ++relevant;
    if (relevant == 0) return 0.0;
    for (std::size_t i = 0; i < ranked.size() && i < k; ++i) {
        auto it = judged.find(ranked[i]);
        if (it != judged.end() && it->second > 0) ++found;
    }
    return double(found) / double(relevant);
}

// Reciprocal-rank fusion restated: every metric carries a complete score map
// over the same candidate set; rank each by (score desc, id asc) and sum
// 1/(1+rank).
struct RefFused {
    std::map<std::string, double> score;
    std::map<std::string, std::map<std::string, int>> ranks; // metric -> item -> rank
};

inline RefFused ref_rrf(const std::vector<std::pair<std::string, std::map<std::string, double>>>& metrics) {
    RefFused out;
    for (const auto& [name, scores] : metrics) {
        std::vector<std::pair<std::string, double>> v(scores.begin(), scores.end());
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        for (std::size_t i = 0; i < v.size(); ++i) {
            out.ranks[name][v[i].first] = static_cast<int>(i);
            out.score[v[i].first] += 1.0 / (1.0 + double(i));
        }
    }
    return out;
}

// A complete synthetic experiment: corpus files, embedding stores, judgments,
// plus enough bookkeeping to recompute every metric independently.
struct Fixture {
    std::size_t dim = 8;
    std::size_t chunk_word_limit = 128;

    std::vector<grainfuse::Document> docs;
    std::vector<grainfuse::Proposition> props; // explicit units only
    std::vector<grainfuse::Query> queries;
    std::vector<grainfuse::Subquery> subs; // explicit units only
    std::vector<grainfuse::Chunk> chunks;

    // Unit ids as the pipeline will see them, fallback self-units included.
    std::map<std::string, std::vector<std::string>> props_of; // doc -> prop ids
    std::map<std::string, std::vector<std::string>> subs_of;  // query -> sub ids
    std::map<std::string, std::vector<std::string>> chunks_of;

    std::map<std::string, std::vector<float>> vectors; // unit id -> embedding
    std::map<std::string, std::map<std::string, int>> qrels;

    double dot(const std::string& a, const std::string& b) const {
        return ref_dot(vectors.at(a), vectors.at(b));
    }
    double max_dot(const std::string& unit, const std::vector<std::string>& over) const {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& id : over) best = std::max(best, dot(unit, id));
        return best;
    }
    double oracle_qd(const std::string& q, const std::string& d) const {
        return max_dot(q, chunks_of.at(d));
    }
    double oracle_qp(const std::string& q, const std::string& d) const {
        return max_dot(q, props_of.at(d));
    }
    double oracle_sp(const std::string& q, const std::string& d) const {
        const auto& s = subs_of.at(q);
        double sum = 0.0;
        for (const auto& sub : s) sum += max_dot(sub, props_of.at(d));
        return sum / double(s.size());
    }
    double oracle_prop_qp(const std::string& q, const std::string& p) const { return dot(q, p); }
    double oracle_prop_sp(const std::string& q, const std::string& p) const {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& sub : subs_of.at(q)) best = std::max(best, dot(sub, p));
        return best;
    }

    fs::path input_dir(const fs::path& dir) const { return dir / "input"; }

    void write(const fs::path& dir) const {
        const fs::path in = input_dir(dir);
        fs::create_directories(in);
        grainfuse::save_documents(in / "documents.jsonl", docs);
        grainfuse::save_propositions(in / "propositions.jsonl", props);
        grainfuse::save_queries(in / "queries.jsonl", queries);
        grainfuse::save_subqueries(in / "subqueries.jsonl", subs);

        std::ostringstream q;
        for (const auto& [query_id, judged] : qrels)
            for (const auto& [doc_id, grade] : judged)
                q << query_id << " 0 " << doc_id << ' ' << grade << '\n';
        write_file(in / "qrels.txt", q.str());

        auto save_store = [&](const char* name, const std::vector<std::string>& ids) {
            std::vector<float> values;
            values.reserve(ids.size() * dim);
            for (const auto& id : ids) {
                const auto& v = vectors.at(id);
                values.insert(values.end(), v.begin(), v.end());
            }
            grainfuse::EmbeddingStore(ids, std::move(values), dim).save(in / name);
        };
        std::vector<std::string> chunk_ids, prop_ids, query_ids, sub_ids;
        for (const auto& c : chunks) chunk_ids.push_back(c.chunk_id);
        for (const auto& d : docs)
            for (const auto& p : props_of.at(d.doc_id)) prop_ids.push_back(p);
        for (const auto& qr : queries) query_ids.push_back(qr.query_id);
        for (const auto& qr : queries)
            for (const auto& s : subs_of.at(qr.query_id)) sub_ids.push_back(s);
        save_store("chunks.mgrv", chunk_ids);
        save_store("propositions.mgrv", prop_ids);
        save_store("queries.mgrv", query_ids);
        save_store("subqueries.mgrv", sub_ids);
    }

    // Config pointing at the written fixture; extra entries replace top-level
    // fields of the default.
    std::string config_json(const fs::path& dir, nlohmann::json extra = nlohmann::json::object(),
                            bool with_qrels = true) const {
        const fs::path in = input_dir(dir);
        nlohmann::json j;
        j["corpus"] = {{"documents", (in / "documents.jsonl").string()},
                       {"propositions", (in / "propositions.jsonl").string()},
                       {"queries", (in / "queries.jsonl").string()},
                       {"subqueries", (in / "subqueries.jsonl").string()}};
        if (with_qrels) j["corpus"]["qrels"] = (in / "qrels.txt").string();
        j["embeddings"] = {{"stores",
                            {{"chunks", (in / "chunks.mgrv").string()},
                             {"propositions", (in / "propositions.mgrv").string()},
                             {"queries", (in / "queries.mgrv").string()},
                             {"subqueries", (in / "subqueries.mgrv").string()}}}};
        j["chunk_word_limit"] = chunk_word_limit;
        j["out_dir"] = (dir / "out").string();
        for (const auto& [key, value] : extra.items()) j[key] = value;
        return j.dump(2);
    }
};

struct FixtureSpec {
    std::size_t n_docs = 20;
    std::size_t n_queries = 8;
    std::size_t dim = 8;
    std::size_t max_subs = 3;       // subquery counts cycle 1..max_subs
    std::size_t max_props = 3;      // explicit propositions per doc, 1..max_props
    double long_doc_prob = 0.15;    // docs long enough to split into 2+ chunks
    double no_prop_prob = 0.0;      // docs left without explicit propositions
    double no_sub_prob = 0.0;       // queries left without explicit subqueries
    double unjudged_query_prob = 0.1;
    std::size_t chunk_word_limit = 128;
    std::size_t words_per_chunk_hint = 128;
};

inline Fixture make_fixture(std::uint64_t seed, const FixtureSpec& spec = {}) {
    std::mt19937_64 rng(seed);
    Fixture fx;
    fx.dim = spec.dim;
    fx.chunk_word_limit = spec.chunk_word_limit;

    std::uniform_int_distribution<int> vocab(0, 499);
    auto words = [&](std::size_t n) {
        std::ostringstream ss;
        for (std::size_t i = 0; i < n; ++i) {
            if (i) ss << ' ';
            ss << 'w' << vocab(rng);
        }
        return ss.str();
    };
    auto chance = [&](double p) { return std::uniform_real_distribution<double>(0, 1)(rng) < p; };

    for (std::size_t di = 0; di < spec.n_docs; ++di) {
        grainfuse::Document d;
        d.doc_id = "d" + std::to_string(di);
        if (chance(0.5)) d.title = "t" + std::to_string(di);
        const bool long_doc = chance(spec.long_doc_prob);
        const std::size_t n_words =
            long_doc ? spec.words_per_chunk_hint + 1 + (rng() % (2 * spec.words_per_chunk_hint))
                     : 5 + (rng() % 36);
        d.text = words(n_words);
        fx.docs.push_back(d);

        auto doc_chunks = grainfuse::chunk_document(d, spec.chunk_word_limit);
        for (const auto& c : doc_chunks) {
            fx.chunks_of[d.doc_id].push_back(c.chunk_id);
            fx.vectors[c.chunk_id] = random_vector(rng, spec.dim);
            fx.chunks.push_back(c);
        }

        if (chance(spec.no_prop_prob)) {
            // No explicit units: the pipeline falls back to the doc itself.
            const std::string self_id = d.doc_id + "#self";
            fx.props_of[d.doc_id] = {self_id};
            fx.vectors[self_id] = random_vector(rng, spec.dim);
        } else {
            const std::size_t n_props = 1 + (rng() % spec.max_props);
            for (std::size_t pi = 0; pi < n_props; ++pi) {
                grainfuse::Proposition p{d.doc_id + "/p" + std::to_string(pi), d.doc_id, words(3 + rng() % 8)};
                fx.props.push_back(p);
                fx.props_of[d.doc_id].push_back(p.prop_id);
                fx.vectors[p.prop_id] = random_vector(rng, spec.dim);
            }
        }
    }

    for (std::size_t qi = 0; qi < spec.n_queries; ++qi) {
        grainfuse::Query q{"q" + std::to_string(qi), words(3 + rng() % 6)};
        fx.queries.push_back(q);
        fx.vectors[q.query_id] = random_vector(rng, spec.dim);

        if (chance(spec.no_sub_prob)) {
            const std::string self_id = q.query_id + "#self";
            fx.subs_of[q.query_id] = {self_id};
            fx.vectors[self_id] = random_vector(rng, spec.dim);
        } else {
            const std::size_t m = 1 + qi % spec.max_subs;
            for (std::size_t si = 0; si < m; ++si) {
                grainfuse::Subquery s{q.query_id + "/s" + std::to_string(si), q.query_id,
                                      words(2 + rng() % 5)};
                fx.subs.push_back(s);
                fx.subs_of[q.query_id].push_back(s.sub_id);
                fx.vectors[s.sub_id] = random_vector(rng, spec.dim);
            }
        }

        auto& judged = fx.qrels[q.query_id];
        const bool all_zero = chance(spec.unjudged_query_prob);
        const std::size_t n_judged = std::min<std::size_t>(5, spec.n_docs);
        std::vector<std::size_t> pool(spec.n_docs);
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t i = 0; i < n_judged; ++i) {
            int grade = all_zero ? 0 : static_cast<int>(rng() % 4);
            if (!all_zero && i == 0 && grade == 0) grade = 1; // keep one positive
            judged["d" + std::to_string(pool[i])] = grade;
        }
    }
    return fx;
}

} // namespace testutil
