#include "grainfuse/pipeline.hpp"

#include "grainfuse/common.hpp"
#include "grainfuse/embedding.hpp"
#include "grainfuse/flat_index.hpp"
#include "grainfuse/remote.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace grainfuse {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string utc_now() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

class StageTimer {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Writes stage outputs to "<final>.tmp" and renames them all on commit, so an
// aborted stage never leaves a partial file behind under its final name.
class OutputTxn {
  public:
    OutputTxn() = default;
    OutputTxn(const OutputTxn&) = delete;
    OutputTxn& operator=(const OutputTxn&) = delete;

    ~OutputTxn() {
        if (committed_) return;
        for (const auto& [tmp, _] : files_) {
            std::error_code ec;
            fs::remove(tmp, ec);
        }
    }

    fs::path stage(const fs::path& final_path) {
        fs::create_directories(final_path.parent_path());
        fs::path tmp = final_path;
        tmp += ".tmp";
        files_.emplace_back(tmp, final_path);
        return tmp;
    }

    void commit() {
        for (const auto& [tmp, final_path] : files_) fs::rename(tmp, final_path);
        committed_ = true;
    }

  private:
    std::vector<std::pair<fs::path, fs::path>> files_;
    bool committed_ = false;
};

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot open file for writing: " + path.string());
    return out;
}

std::string stage_key(const std::string& stage, const ordered_json& parts) {
    ordered_json j;
    j["artifact"] = kArtifactVersion;
    j["stage"] = stage;
    j["parts"] = parts;
    return to_hex64(fnv1a64(j.dump()));
}

const json& member(const json& obj, const char* key, const char* where) {
    auto it = obj.find(key);
    if (it == obj.end())
        throw ValidationError(std::string("config: missing field \"") + key + "\" in " + where);
    return *it;
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const char* where) {
    for (const auto& [key, _] : obj.items()) {
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* a) { return key == a; }) == allowed.end())
            throw ValidationError("config: unknown field \"" + key + "\" in " + where);
    }
}

fs::path path_field(const json& v, const char* field, const fs::path& base_dir) {
    if (!v.is_string() || v.get<std::string>().empty())
        throw ValidationError(std::string("config: \"") + field + "\" must be a non-empty string path");
    fs::path p = v.get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    return p;
}

std::size_t size_field(const json& v, const char* field) {
    if (!v.is_number_unsigned())
        throw ValidationError(std::string("config: \"") + field + "\" must be a non-negative integer");
    return v.get<std::size_t>();
}

double hit_score(const json& cell, const fs::path& path) {
    if (!cell.is_number())
        throw ValidationError("candidate file " + path.string() + " has a non-numeric score");
    return cell.get<double>();
}

struct CandidateLine {
    std::string query_id;
    std::string unit_id;
    std::vector<SearchHit> hits;
};

std::vector<CandidateLine> load_candidates(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open candidate file: " + path.string());
    std::vector<CandidateLine> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object() || !rec.contains("query_id") ||
            !rec.contains("unit_id") || !rec.contains("hits") || !rec["hits"].is_array())
            throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                  ": malformed candidate record");
        CandidateLine c;
        c.query_id = rec["query_id"].get<std::string>();
        c.unit_id = rec["unit_id"].get<std::string>();
        for (const auto& h : rec["hits"]) {
            if (!h.is_array() || h.size() != 2 || !h[0].is_string())
                throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                      ": malformed hit entry");
            c.hits.push_back(SearchHit{h[0].get<std::string>(), hit_score(h[1], path)});
        }
        out.push_back(std::move(c));
    }
    return out;
}

void write_candidates(std::ostream& os, const std::string& query_id, const std::string& unit_id,
                      const std::vector<SearchHit>& hits) {
    ordered_json rec;
    rec["query_id"] = query_id;
    rec["unit_id"] = unit_id;
    auto& out_hits = rec["hits"] = ordered_json::array();
    for (const auto& h : hits) out_hits.push_back(ordered_json::array({h.item_id, h.score}));
    os << rec.dump() << '\n';
}

// Recomputes any metric's score for a pair straight from the embeddings;
// used for exact backfill and exact missing-term handling.
struct ExactScorer {
    const Corpus* corpus = nullptr;
    const EmbeddingStore* chunks = nullptr;
    const EmbeddingStore* props = nullptr;
    const EmbeddingStore* queries = nullptr;
    const EmbeddingStore* subs = nullptr;
    std::unordered_map<std::string, std::vector<std::string>> chunks_by_doc;

    double max_over(const std::vector<std::string>& ids, const EmbeddingStore& store,
                    std::span<const float> vec) const {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& id : ids) best = std::max(best, similarity(vec, store.vector_for(id)));
        return best;
    }

    std::vector<std::string> prop_ids_of(const std::string& doc_id) const {
        auto it = corpus->props_by_doc.find(doc_id);
        if (it == corpus->props_by_doc.end())
            throw ValidationError("backfill: unknown doc \"" + doc_id + "\"");
        std::vector<std::string> ids;
        ids.reserve(it->second.size());
        for (auto i : it->second) ids.push_back(corpus->propositions[i].prop_id);
        return ids;
    }

    double qd(const std::string& query_id, const std::string& doc_id) const {
        auto it = chunks_by_doc.find(doc_id);
        if (it == chunks_by_doc.end())
            throw ValidationError("backfill: unknown doc \"" + doc_id + "\"");
        return max_over(it->second, *chunks, queries->vector_for(query_id));
    }

    double qp(const std::string& query_id, const std::string& doc_id) const {
        return max_over(prop_ids_of(doc_id), *props, queries->vector_for(query_id));
    }

    double sub_max(const std::string& sub_id, const std::string& doc_id) const {
        return max_over(prop_ids_of(doc_id), *props, subs->vector_for(sub_id));
    }

    double sp(const std::string& query_id, const std::string& doc_id) const {
        const auto& sub_rows = corpus->subs_by_query.at(query_id);
        double sum = 0.0;
        for (auto i : sub_rows) sum += sub_max(corpus->subqueries[i].sub_id, doc_id);
        return sum / static_cast<double>(sub_rows.size());
    }

    double prop_qp(const std::string& query_id, const std::string& prop_id) const {
        return similarity(queries->vector_for(query_id), props->vector_for(prop_id));
    }

    double prop_sp(const std::string& query_id, const std::string& prop_id) const {
        const auto& sub_rows = corpus->subs_by_query.at(query_id);
        double best = -std::numeric_limits<double>::infinity();
        auto pv = props->vector_for(prop_id);
        for (auto i : sub_rows)
            best = std::max(best, similarity(subs->vector_for(corpus->subqueries[i].sub_id), pv));
        return best;
    }

    double score(MetricKind metric, const std::string& query_id, const std::string& item_id) const {
        switch (metric) {
        case MetricKind::qd: return qd(query_id, item_id);
        case MetricKind::qp: return qp(query_id, item_id);
        case MetricKind::sp: return sp(query_id, item_id);
        case MetricKind::prop_qp: return prop_qp(query_id, item_id);
        case MetricKind::prop_sp: return prop_sp(query_id, item_id);
        }
        throw RuntimeError("unhandled metric kind");
    }
};

} // namespace

void ExperimentConfig::validate() const {
    if (k == 0) throw ValidationError("config: k must be >= 1");
    if (chunk_word_limit == 0) throw ValidationError("config: chunk_word_limit must be >= 1");
    if (workers == 0) throw ValidationError("config: workers must be >= 1");
    if (cutoffs.empty()) throw ValidationError("config: cutoffs must not be empty");
    for (auto c : cutoffs) {
        if (c == 0) throw ValidationError("config: cutoffs must be >= 1");
        if (c > k)
            throw ValidationError("config: candidate depth k=" + std::to_string(k) +
                                  " is smaller than evaluation cutoff " + std::to_string(c));
    }
    if (out_dir.empty()) throw ValidationError("config: out_dir must be set");
    if (run_tag.empty()) throw ValidationError("config: run_tag must not be empty");
    for (char c : run_tag)
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r')
            throw ValidationError("config: run_tag must not contain whitespace");

    if (corpus.documents.empty()) throw ValidationError("config: corpus.documents is required");
    if (corpus.queries.empty()) throw ValidationError("config: corpus.queries is required");
    const std::pair<const char*, const fs::path*> referenced[] = {
        {"corpus.documents", &corpus.documents},   {"corpus.propositions", &corpus.propositions},
        {"corpus.queries", &corpus.queries},       {"corpus.subqueries", &corpus.subqueries},
        {"corpus.qrels", &qrels},
    };
    for (const auto& [name, path] : referenced)
        if (!path->empty() && !fs::exists(*path))
            throw ValidationError(std::string("config: ") + name + " path does not exist: " +
                                  path->string());

    const bool has_stores = !embeddings.stores.empty();
    const bool has_endpoint = !embeddings.endpoint.empty();
    if (has_stores == has_endpoint)
        throw ValidationError("config: embeddings must name either four store files or one endpoint");
    if (has_stores) {
        for (const char* kind : {"chunks", "propositions", "queries", "subqueries"}) {
            auto it = embeddings.stores.find(kind);
            if (it == embeddings.stores.end())
                throw ValidationError(std::string("config: embeddings.stores.") + kind + " is required");
            if (!fs::exists(it->second))
                throw ValidationError("config: embedding store does not exist: " + it->second.string());
        }
    }
    if (embeddings.batch == 0) throw ValidationError("config: embeddings.batch must be >= 1");
    if (embeddings.in_flight == 0) throw ValidationError("config: embeddings.in_flight must be >= 1");
    if (decompose.batch == 0) throw ValidationError("config: decompose.batch must be >= 1");
    if (decompose.in_flight == 0) throw ValidationError("config: decompose.in_flight must be >= 1");

    std::set<MetricKind> seen;
    for (auto m : fusion_metrics) {
        if (m != MetricKind::qd && m != MetricKind::qp && m != MetricKind::sp)
            throw ValidationError("config: fusion_metrics may only name document-level metrics");
        if (!seen.insert(m).second)
            throw ValidationError("config: fusion_metrics repeats a metric");
    }
    if (!std::isfinite(backfill.floor_value))
        throw ValidationError("config: backfill.floor_value must be finite");
}

std::string ExperimentConfig::semantic_hash() const {
    ordered_json j;
    j["corpus"] = {
        {"documents", corpus.documents.generic_string()},
        {"propositions", corpus.propositions.generic_string()},
        {"queries", corpus.queries.generic_string()},
        {"subqueries", corpus.subqueries.generic_string()},
        {"qrels", qrels.generic_string()},
    };
    ordered_json stores = ordered_json::object();
    for (const auto& [kind, path] : embeddings.stores) stores[kind] = path.generic_string();
    j["embeddings"] = {{"stores", stores}, {"endpoint", embeddings.endpoint}};
    j["decompose_endpoint"] = decompose.endpoint;
    j["k"] = k;
    j["chunk_word_limit"] = chunk_word_limit;
    ordered_json metrics = ordered_json::array();
    for (auto m : fusion_metrics) metrics.push_back(metric_name(m));
    j["fusion_metrics"] = metrics;
    j["backfill"] = {{"mode", backfill.mode == BackfillConfig::Mode::exact ? "exact" : "floor"},
                     {"floor_value", backfill.floor_value}};
    j["rank_policy"] = rank_policy_name(rank_policy);
    j["ablations"] = ablations;
    j["proposition_runs"] = proposition_runs;
    j["cutoffs"] = cutoffs;
    j["gain"] = gain_name(gain);
    j["run_tag"] = run_tag;
    return to_hex64(fnv1a64(j.dump()));
}

ExperimentConfig parse_config(const std::string& json_text, const fs::path& base_dir) {
    json j = json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw ValidationError("config: not a JSON object");
    reject_unknown_keys(j,
                        {"corpus", "embeddings", "decompose", "k", "chunk_word_limit",
                         "fusion_metrics", "backfill", "rank_policy", "ablations",
                         "proposition_runs", "cutoffs", "gain", "out_dir", "run_tag", "workers"},
                        "the top level");

    ExperimentConfig cfg;

    const json& corpus = member(j, "corpus", "the top level");
    if (!corpus.is_object()) throw ValidationError("config: \"corpus\" must be an object");
    reject_unknown_keys(corpus, {"documents", "propositions", "queries", "subqueries", "qrels"},
                        "\"corpus\"");
    cfg.corpus.documents = path_field(member(corpus, "documents", "\"corpus\""), "documents", base_dir);
    cfg.corpus.queries = path_field(member(corpus, "queries", "\"corpus\""), "queries", base_dir);
    if (corpus.contains("propositions"))
        cfg.corpus.propositions = path_field(corpus["propositions"], "propositions", base_dir);
    if (corpus.contains("subqueries"))
        cfg.corpus.subqueries = path_field(corpus["subqueries"], "subqueries", base_dir);
    if (corpus.contains("qrels")) cfg.qrels = path_field(corpus["qrels"], "qrels", base_dir);

    const json& embeddings = member(j, "embeddings", "the top level");
    if (!embeddings.is_object()) throw ValidationError("config: \"embeddings\" must be an object");
    reject_unknown_keys(embeddings, {"stores", "endpoint", "batch", "in_flight"}, "\"embeddings\"");
    if (embeddings.contains("stores")) {
        const json& stores = embeddings["stores"];
        if (!stores.is_object()) throw ValidationError("config: \"embeddings.stores\" must be an object");
        reject_unknown_keys(stores, {"chunks", "propositions", "queries", "subqueries"},
                            "\"embeddings.stores\"");
        for (const auto& [kind, path] : stores.items())
            cfg.embeddings.stores[kind] = path_field(path, kind.c_str(), base_dir);
    }
    if (embeddings.contains("endpoint")) {
        if (!embeddings["endpoint"].is_string())
            throw ValidationError("config: \"embeddings.endpoint\" must be a string");
        cfg.embeddings.endpoint = embeddings["endpoint"].get<std::string>();
    }
    if (embeddings.contains("batch")) cfg.embeddings.batch = size_field(embeddings["batch"], "batch");
    if (embeddings.contains("in_flight"))
        cfg.embeddings.in_flight = static_cast<unsigned>(size_field(embeddings["in_flight"], "in_flight"));

    if (j.contains("decompose")) {
        const json& dec = j["decompose"];
        if (!dec.is_object()) throw ValidationError("config: \"decompose\" must be an object");
        reject_unknown_keys(dec, {"endpoint", "batch", "in_flight"}, "\"decompose\"");
        if (dec.contains("endpoint")) {
            if (!dec["endpoint"].is_string())
                throw ValidationError("config: \"decompose.endpoint\" must be a string");
            cfg.decompose.endpoint = dec["endpoint"].get<std::string>();
        }
        if (dec.contains("batch")) cfg.decompose.batch = size_field(dec["batch"], "batch");
        if (dec.contains("in_flight"))
            cfg.decompose.in_flight = static_cast<unsigned>(size_field(dec["in_flight"], "in_flight"));
    }

    if (j.contains("k")) cfg.k = size_field(j["k"], "k");
    if (j.contains("chunk_word_limit"))
        cfg.chunk_word_limit = size_field(j["chunk_word_limit"], "chunk_word_limit");
    if (j.contains("fusion_metrics")) {
        if (!j["fusion_metrics"].is_array())
            throw ValidationError("config: \"fusion_metrics\" must be an array");
        for (const auto& m : j["fusion_metrics"]) {
            if (!m.is_string()) throw ValidationError("config: fusion metric names must be strings");
            cfg.fusion_metrics.push_back(metric_from_name(m.get<std::string>()));
        }
    }
    if (j.contains("backfill")) {
        const json& bf = j["backfill"];
        if (!bf.is_object()) throw ValidationError("config: \"backfill\" must be an object");
        reject_unknown_keys(bf, {"mode", "floor_value"}, "\"backfill\"");
        if (bf.contains("mode")) {
            const std::string mode = bf["mode"].is_string() ? bf["mode"].get<std::string>() : "";
            if (mode == "exact")
                cfg.backfill.mode = BackfillConfig::Mode::exact;
            else if (mode == "floor")
                cfg.backfill.mode = BackfillConfig::Mode::floor;
            else
                throw ValidationError("config: backfill.mode must be \"exact\" or \"floor\"");
        }
        if (bf.contains("floor_value")) {
            if (!bf["floor_value"].is_number())
                throw ValidationError("config: backfill.floor_value must be a number");
            cfg.backfill.floor_value = bf["floor_value"].get<double>();
        }
    }
    if (j.contains("rank_policy")) {
        if (!j["rank_policy"].is_string())
            throw ValidationError("config: \"rank_policy\" must be a string");
        cfg.rank_policy = rank_policy_from_name(j["rank_policy"].get<std::string>());
    }
    if (j.contains("ablations")) {
        if (!j["ablations"].is_boolean()) throw ValidationError("config: \"ablations\" must be a boolean");
        cfg.ablations = j["ablations"].get<bool>();
    }
    if (j.contains("proposition_runs")) {
        if (!j["proposition_runs"].is_boolean())
            throw ValidationError("config: \"proposition_runs\" must be a boolean");
        cfg.proposition_runs = j["proposition_runs"].get<bool>();
    }
    if (j.contains("cutoffs")) {
        if (!j["cutoffs"].is_array()) throw ValidationError("config: \"cutoffs\" must be an array");
        cfg.cutoffs.clear();
        for (const auto& c : j["cutoffs"]) cfg.cutoffs.push_back(size_field(c, "cutoffs"));
    }
    if (j.contains("gain")) {
        if (!j["gain"].is_string()) throw ValidationError("config: \"gain\" must be a string");
        cfg.gain = gain_from_name(j["gain"].get<std::string>());
    }
    if (j.contains("out_dir")) cfg.out_dir = path_field(j["out_dir"], "out_dir", base_dir);
    if (j.contains("run_tag")) {
        if (!j["run_tag"].is_string()) throw ValidationError("config: \"run_tag\" must be a string");
        cfg.run_tag = j["run_tag"].get<std::string>();
    }
    if (j.contains("workers")) cfg.workers = static_cast<unsigned>(size_field(j["workers"], "workers"));

    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file: " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), fs::absolute(path).parent_path());
}

RunManifest RunManifest::load_or_create(const fs::path& path, const std::string& config_hash) {
    RunManifest m;
    m.config_hash = config_hash;
    m.created_utc = utc_now();
    m.updated_utc = m.created_utc;
    std::ifstream in(path);
    if (!in) return m;

    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return m; // unreadable manifest: start over, no cache
    if (!j.contains("config_hash") || j["config_hash"] != config_hash) {
        if (j.contains("created_utc") && j["created_utc"].is_string())
            m.created_utc = j["created_utc"].get<std::string>();
        return m; // different experiment in the same directory: drop all cache entries
    }
    try {
        m.created_utc = j.value("created_utc", m.created_utc);
        m.updated_utc = j.value("updated_utc", m.updated_utc);
        if (j.contains("input_digests"))
            for (const auto& [name, digest] : j["input_digests"].items())
                m.input_digests[name] = digest.get<std::string>();
        if (j.contains("stages")) {
            for (const auto& [name, st] : j["stages"].items()) {
                StageRecord rec;
                rec.digest_key = st.value("digest_key", "");
                rec.duration_seconds = st.value("duration_seconds", 0.0);
                rec.completed_utc = st.value("completed_utc", "");
                if (st.contains("sub_durations_seconds"))
                    for (const auto& [sub, secs] : st["sub_durations_seconds"].items())
                        rec.sub_durations_seconds[sub] = secs.get<double>();
                if (st.contains("counters"))
                    for (const auto& [counter, v] : st["counters"].items())
                        rec.counters[counter] = v.get<std::uint64_t>();
                m.stages[name] = std::move(rec);
            }
        }
    } catch (const json::exception&) {
        RunManifest fresh;
        fresh.config_hash = config_hash;
        fresh.created_utc = utc_now();
        fresh.updated_utc = fresh.created_utc;
        return fresh;
    }
    return m;
}

void RunManifest::save(const fs::path& path) const {
    ordered_json j;
    j["artifact"] = {{"name", kArtifactName}, {"version", kArtifactVersion}};
    j["config_hash"] = config_hash;
    j["created_utc"] = created_utc;
    j["updated_utc"] = updated_utc;
    j["input_digests"] = input_digests;
    ordered_json stages = ordered_json::object();
    for (const auto& [name, rec] : this->stages) {
        ordered_json st;
        st["digest_key"] = rec.digest_key;
        st["duration_seconds"] = rec.duration_seconds;
        st["completed_utc"] = rec.completed_utc;
        if (!rec.sub_durations_seconds.empty()) st["sub_durations_seconds"] = rec.sub_durations_seconds;
        if (!rec.counters.empty()) st["counters"] = rec.counters;
        stages[name] = std::move(st);
    }
    j["stages"] = std::move(stages);

    fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        auto out = open_out(tmp);
        out << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

Pipeline::Pipeline(ExperimentConfig config) : cfg_(std::move(config)) { cfg_.validate(); }

fs::path Pipeline::corpus_dir() const { return cfg_.out_dir / "corpus"; }
fs::path Pipeline::stores_dir() const { return cfg_.out_dir / "stores"; }
fs::path Pipeline::candidates_dir() const { return cfg_.out_dir / "candidates"; }
fs::path Pipeline::runs_dir() const { return cfg_.out_dir / "runs"; }
fs::path Pipeline::scores_dir() const { return cfg_.out_dir / "scores"; }
fs::path Pipeline::reports_dir() const { return cfg_.out_dir / "reports"; }
fs::path Pipeline::manifest_path() const { return cfg_.out_dir / "manifest.json"; }

fs::path Pipeline::run_file(const std::string& run_name) const {
    return runs_dir() / (run_name + ".run");
}

std::vector<MetricKind> Pipeline::metric_universe() const {
    if (!cfg_.fusion_metrics.empty()) return cfg_.fusion_metrics;
    return {MetricKind::qd, MetricKind::qp, MetricKind::sp};
}

std::vector<std::string> Pipeline::fuse_run_names() const {
    std::vector<std::string> names = {"qd", "qp", "sp", "fused"};
    if (cfg_.ablations)
        for (auto m : metric_universe()) names.push_back(std::string("fused_wo_") + metric_name(m));
    if (cfg_.proposition_runs) {
        names.push_back("prop_qp");
        names.push_back("prop_sp");
        names.push_back("prop_fused");
    }
    return names;
}

std::vector<std::string> Pipeline::eval_run_names() const {
    std::vector<std::string> names;
    for (const auto& n : fuse_run_names())
        if (n.rfind("prop_", 0) != 0) names.push_back(n);
    return names;
}

void Pipeline::note(const std::string& line) const {
    if (log) *log << line << '\n';
}

void Pipeline::with_manifest(const std::function<void(RunManifest&)>& fn) const {
    RunManifest m = RunManifest::load_or_create(manifest_path(), cfg_.semantic_hash());
    fn(m);
    m.updated_utc = utc_now();
    m.save(manifest_path());
}

bool Pipeline::stage_cached(const std::string& stage_name, const std::string& digest_key,
                            const std::vector<fs::path>& outputs) const {
    if (cfg_.force) return false;
    RunManifest m = RunManifest::load_or_create(manifest_path(), cfg_.semantic_hash());
    auto it = m.stages.find(stage_name);
    if (it == m.stages.end() || it->second.digest_key != digest_key) return false;
    for (const auto& o : outputs)
        if (!fs::exists(o)) return false;
    note("[" + stage_name + "] cached, skipping");
    return true;
}

void Pipeline::require_staged(const fs::path& path, const std::string& producer_stage) const {
    if (!fs::exists(path))
        throw ValidationError("missing " + path.string() + ": run the " + producer_stage +
                              " stage first");
}

void Pipeline::run_ingest() {
    std::map<std::string, std::string> digests;
    digests["documents"] = digest_file(cfg_.corpus.documents);
    digests["queries"] = digest_file(cfg_.corpus.queries);
    if (!cfg_.corpus.propositions.empty())
        digests["propositions"] = digest_file(cfg_.corpus.propositions);
    if (!cfg_.corpus.subqueries.empty()) digests["subqueries"] = digest_file(cfg_.corpus.subqueries);
    if (!cfg_.qrels.empty()) digests["qrels"] = digest_file(cfg_.qrels);

    ordered_json parts;
    for (const auto& [name, digest] : digests) parts[name] = digest;
    parts["chunk_word_limit"] = cfg_.chunk_word_limit;
    const std::string key = stage_key("ingest", parts);

    const std::vector<fs::path> outputs = {
        corpus_dir() / "documents.jsonl",  corpus_dir() / "propositions.jsonl",
        corpus_dir() / "queries.jsonl",    corpus_dir() / "subqueries.jsonl",
        corpus_dir() / "chunks.jsonl",     corpus_dir() / "fallbacks.json",
    };
    if (stage_cached("ingest", key, outputs)) return;

    StageTimer timer;
    auto docs = load_documents(cfg_.corpus.documents);
    IdSet doc_ids;
    for (const auto& d : docs) doc_ids.insert(d.doc_id);
    std::vector<Proposition> props;
    if (!cfg_.corpus.propositions.empty()) props = load_propositions(cfg_.corpus.propositions, doc_ids);
    auto queries = load_queries(cfg_.corpus.queries);
    IdSet query_ids;
    for (const auto& q : queries) query_ids.insert(q.query_id);
    std::vector<Subquery> subs;
    if (!cfg_.corpus.subqueries.empty()) subs = load_subqueries(cfg_.corpus.subqueries, query_ids);

    // Parents that will fall back to their own text; the decompose stage
    // offers these to the decomposition service.
    IdSet docs_with_props, queries_with_subs;
    for (const auto& p : props) docs_with_props.insert(p.doc_id);
    for (const auto& s : subs) queries_with_subs.insert(s.query_id);
    std::vector<std::string> fallback_docs, fallback_queries;
    for (const auto& d : docs)
        if (!docs_with_props.contains(d.doc_id)) fallback_docs.push_back(d.doc_id);
    for (const auto& q : queries)
        if (!queries_with_subs.contains(q.query_id)) fallback_queries.push_back(q.query_id);

    Corpus corpus = build_corpus(std::move(docs), std::move(props), std::move(queries), std::move(subs));
    std::vector<Chunk> chunks;
    for (const auto& d : corpus.documents) {
        auto doc_chunks = chunk_document(d, cfg_.chunk_word_limit);
        chunks.insert(chunks.end(), std::make_move_iterator(doc_chunks.begin()),
                      std::make_move_iterator(doc_chunks.end()));
    }

    OutputTxn txn;
    save_documents(txn.stage(outputs[0]), corpus.documents);
    save_propositions(txn.stage(outputs[1]), corpus.propositions);
    save_queries(txn.stage(outputs[2]), corpus.queries);
    save_subqueries(txn.stage(outputs[3]), corpus.subqueries);
    save_chunks(txn.stage(outputs[4]), chunks);
    {
        auto out = open_out(txn.stage(outputs[5]));
        ordered_json fb;
        fb["documents"] = fallback_docs;
        fb["queries"] = fallback_queries;
        out << fb.dump(2) << '\n';
    }
    txn.commit();

    StageRecord rec;
    rec.digest_key = key;
    rec.duration_seconds = timer.seconds();
    rec.completed_utc = utc_now();
    rec.counters = {{"documents", corpus.documents.size()},
                    {"propositions", corpus.propositions.size()},
                    {"queries", corpus.queries.size()},
                    {"subqueries", corpus.subqueries.size()},
                    {"chunks", chunks.size()}};
    with_manifest([&](RunManifest& m) {
        m.input_digests = digests;
        m.stages["ingest"] = rec;
        // This stage just rewrote the staged unit files, so any previous
        // decomposition of them is gone.
        m.stages.erase("decompose");
    });
    note("[ingest] " + std::to_string(rec.counters["documents"]) + " documents, " +
         std::to_string(rec.counters["chunks"]) + " chunks, " +
         std::to_string(rec.counters["queries"]) + " queries");
}

void Pipeline::run_decompose() {
    if (cfg_.decompose.endpoint.empty())
        throw ValidationError("decompose stage requires a decomposition service endpoint");
    for (const char* f : {"documents.jsonl", "queries.jsonl", "propositions.jsonl",
                          "subqueries.jsonl", "fallbacks.json"})
        require_staged(corpus_dir() / f, "ingest");

    RunManifest before = RunManifest::load_or_create(manifest_path(), cfg_.semantic_hash());
    auto ingest_it = before.stages.find("ingest");
    if (ingest_it == before.stages.end())
        throw ValidationError("missing ingest manifest entry: run the ingest stage first");
    const std::string key = stage_key(
        "decompose", {{"ingest", ingest_it->second.digest_key}, {"endpoint", cfg_.decompose.endpoint}});

    const std::vector<fs::path> outputs = {corpus_dir() / "propositions.jsonl",
                                           corpus_dir() / "subqueries.jsonl",
                                           corpus_dir() / "fallbacks.json"};
    if (stage_cached("decompose", key, outputs)) return;

    StageTimer timer;
    CorpusPaths staged{corpus_dir() / "documents.jsonl", corpus_dir() / "propositions.jsonl",
                       corpus_dir() / "queries.jsonl", corpus_dir() / "subqueries.jsonl"};
    Corpus corpus = load_corpus(staged);

    std::vector<std::string> fallback_docs, fallback_queries;
    {
        std::ifstream in(corpus_dir() / "fallbacks.json");
        json fb = json::parse(in, nullptr, false);
        if (fb.is_discarded() || !fb.is_object())
            throw ValidationError("unreadable fallback list; re-run the ingest stage");
        for (const auto& d : fb.value("documents", json::array()))
            fallback_docs.push_back(d.get<std::string>());
        for (const auto& q : fb.value("queries", json::array()))
            fallback_queries.push_back(q.get<std::string>());
    }

    RemoteOptions options;
    options.batch = cfg_.decompose.batch;
    options.in_flight = cfg_.decompose.in_flight;

    std::vector<std::string> doc_texts, query_texts;
    for (const auto& id : fallback_docs) doc_texts.push_back(corpus.documents[corpus.doc_index.at(id)].text);
    for (const auto& id : fallback_queries)
        query_texts.push_back(corpus.queries[corpus.query_index.at(id)].text);
    const auto doc_units = decompose_remote(doc_texts, cfg_.decompose.endpoint, options);
    const auto query_units = decompose_remote(query_texts, cfg_.decompose.endpoint, options);

    IdSet fallback_doc_set(fallback_docs.begin(), fallback_docs.end());
    IdSet fallback_query_set(fallback_queries.begin(), fallback_queries.end());

    // Units for parents that had explicit decompositions are kept verbatim;
    // fallback parents get their service units, or stay fallback when the
    // service output was degenerate.
    std::vector<Proposition> props;
    for (const auto& p : corpus.propositions)
        if (!fallback_doc_set.contains(p.doc_id)) props.push_back(p);
    std::vector<Subquery> subs;
    for (const auto& s : corpus.subqueries)
        if (!fallback_query_set.contains(s.query_id)) subs.push_back(s);

    std::uint64_t generated_props = 0, generated_subs = 0;
    std::vector<std::string> still_fallback_docs, still_fallback_queries;
    for (std::size_t i = 0; i < fallback_docs.size(); ++i) {
        std::vector<std::string> usable;
        if (!doc_units[i].degenerate)
            for (const auto& u : doc_units[i].units)
                if (u.find_first_not_of(" \t\r\n") != std::string::npos) usable.push_back(u);
        if (usable.empty()) {
            still_fallback_docs.push_back(fallback_docs[i]);
            continue;
        }
        for (std::size_t u = 0; u < usable.size(); ++u) {
            props.push_back(Proposition{fallback_docs[i] + "#p" + std::to_string(u), fallback_docs[i],
                                        usable[u]});
            ++generated_props;
        }
    }
    for (std::size_t i = 0; i < fallback_queries.size(); ++i) {
        std::vector<std::string> usable;
        if (!query_units[i].degenerate)
            for (const auto& u : query_units[i].units)
                if (u.find_first_not_of(" \t\r\n") != std::string::npos) usable.push_back(u);
        if (usable.empty()) {
            still_fallback_queries.push_back(fallback_queries[i]);
            continue;
        }
        for (std::size_t u = 0; u < usable.size(); ++u) {
            subs.push_back(Subquery{fallback_queries[i] + "#s" + std::to_string(u), fallback_queries[i],
                                    usable[u]});
            ++generated_subs;
        }
    }

    // Re-validate; parents whose decomposition stayed degenerate get their
    // fallback self-units back here.
    Corpus rebuilt = build_corpus(std::move(corpus.documents), std::move(props),
                                  std::move(corpus.queries), std::move(subs));

    OutputTxn txn;
    save_propositions(txn.stage(outputs[0]), rebuilt.propositions);
    save_subqueries(txn.stage(outputs[1]), rebuilt.subqueries);
    {
        auto out = open_out(txn.stage(outputs[2]));
        ordered_json fb;
        fb["documents"] = still_fallback_docs;
        fb["queries"] = still_fallback_queries;
        out << fb.dump(2) << '\n';
    }
    txn.commit();

    StageRecord rec;
    rec.digest_key = key;
    rec.duration_seconds = timer.seconds();
    rec.completed_utc = utc_now();
    rec.counters = {{"generated_propositions", generated_props},
                    {"generated_subqueries", generated_subs},
                    {"degenerate_documents", still_fallback_docs.size()},
                    {"degenerate_queries", still_fallback_queries.size()}};
    with_manifest([&](RunManifest& m) { m.stages["decompose"] = rec; });
    note("[decompose] " + std::to_string(generated_props) + " propositions, " +
         std::to_string(generated_subs) + " subqueries from the service");
}

void Pipeline::run_embed() {
    for (const char* f :
         {"documents.jsonl", "propositions.jsonl", "queries.jsonl", "subqueries.jsonl", "chunks.jsonl"})
        require_staged(corpus_dir() / f, "ingest");

    ordered_json parts;
    for (const char* f :
         {"documents.jsonl", "propositions.jsonl", "queries.jsonl", "subqueries.jsonl", "chunks.jsonl"})
        parts[f] = digest_file(corpus_dir() / f);
    if (!cfg_.embeddings.stores.empty()) {
        ordered_json sources;
        for (const auto& [kind, path] : cfg_.embeddings.stores) sources[kind] = digest_file(path);
        parts["stores"] = sources;
    } else {
        parts["endpoint"] = cfg_.embeddings.endpoint;
    }
    const std::string key = stage_key("embed", parts);

    const std::vector<fs::path> outputs = {
        stores_dir() / "chunks.mgrv", stores_dir() / "propositions.mgrv",
        stores_dir() / "queries.mgrv", stores_dir() / "subqueries.mgrv"};
    if (stage_cached("embed", key, outputs)) return;

    StageTimer timer;
    CorpusPaths staged{corpus_dir() / "documents.jsonl", corpus_dir() / "propositions.jsonl",
                       corpus_dir() / "queries.jsonl", corpus_dir() / "subqueries.jsonl"};
    Corpus corpus = load_corpus(staged);
    IdSet doc_ids;
    for (const auto& d : corpus.documents) doc_ids.insert(d.doc_id);
    const auto chunks = load_chunks(corpus_dir() / "chunks.jsonl", doc_ids);

    struct UnitBlock {
        const char* name;
        UnitKind kind;
        std::vector<std::string> ids;
        std::vector<std::string> texts;
    };
    UnitBlock blocks[4] = {{"chunks", UnitKind::document_chunk, {}, {}},
                           {"propositions", UnitKind::proposition, {}, {}},
                           {"queries", UnitKind::query, {}, {}},
                           {"subqueries", UnitKind::subquery, {}, {}}};
    for (const auto& c : chunks) {
        blocks[0].ids.push_back(c.chunk_id);
        blocks[0].texts.push_back(c.text);
    }
    for (const auto& p : corpus.propositions) {
        blocks[1].ids.push_back(p.prop_id);
        blocks[1].texts.push_back(corpus.proposition_indexed_text(p));
    }
    for (const auto& q : corpus.queries) {
        blocks[2].ids.push_back(q.query_id);
        blocks[2].texts.push_back(q.text);
    }
    for (const auto& s : corpus.subqueries) {
        blocks[3].ids.push_back(s.sub_id);
        blocks[3].texts.push_back(s.text);
    }

    OutputTxn txn;
    std::size_t dimension = 0;
    for (std::size_t bi = 0; bi < 4; ++bi) {
        auto& block = blocks[bi];
        EmbeddingStore store;
        if (!cfg_.embeddings.stores.empty()) {
            EmbeddingStore source = EmbeddingStore::load(cfg_.embeddings.stores.at(block.name));
            for (const auto& id : block.ids)
                if (!source.contains(id))
                    throw ValidationError("embedding store " +
                                          cfg_.embeddings.stores.at(block.name).string() +
                                          " lacks a vector for \"" + id + "\"");
            store = source.subset(block.ids, block.kind);
        } else {
            RemoteOptions options;
            options.batch = cfg_.embeddings.batch;
            options.in_flight = cfg_.embeddings.in_flight;
            const auto vectors = embed_remote(block.texts, cfg_.embeddings.endpoint, options);
            std::vector<float> values;
            const std::size_t dim = vectors.empty() ? 1 : vectors.front().size();
            values.reserve(vectors.size() * dim);
            for (const auto& v : vectors) values.insert(values.end(), v.begin(), v.end());
            store = EmbeddingStore(block.ids, std::move(values), dim, block.kind);
        }
        if (dimension == 0)
            dimension = store.dimension();
        else if (store.dimension() != dimension)
            throw ValidationError(std::string("embedding dimension mismatch: ") + block.name +
                                  " store has dimension " + std::to_string(store.dimension()) +
                                  ", expected " + std::to_string(dimension));
        store.save(txn.stage(outputs[bi]));
    }
    txn.commit();

    StageRecord rec;
    rec.digest_key = key;
    rec.duration_seconds = timer.seconds();
    rec.completed_utc = utc_now();
    rec.counters = {{"chunks", blocks[0].ids.size()},
                    {"propositions", blocks[1].ids.size()},
                    {"queries", blocks[2].ids.size()},
                    {"subqueries", blocks[3].ids.size()},
                    {"dimension", dimension}};
    with_manifest([&](RunManifest& m) { m.stages["embed"] = rec; });
    note("[embed] 4 stores at dimension " + std::to_string(dimension));
}

void Pipeline::run_search() {
    for (const char* f : {"chunks.mgrv", "propositions.mgrv", "queries.mgrv", "subqueries.mgrv"})
        require_staged(stores_dir() / f, "embed");
    for (const char* f : {"documents.jsonl", "propositions.jsonl", "queries.jsonl", "subqueries.jsonl"})
        require_staged(corpus_dir() / f, "ingest");

    ordered_json parts;
    for (const char* f : {"chunks.mgrv", "propositions.mgrv", "queries.mgrv", "subqueries.mgrv"})
        parts[f] = digest_file(stores_dir() / f);
    parts["queries.jsonl"] = digest_file(corpus_dir() / "queries.jsonl");
    parts["subqueries.jsonl"] = digest_file(corpus_dir() / "subqueries.jsonl");
    parts["k"] = cfg_.k;
    const std::string key = stage_key("search", parts);

    const std::vector<fs::path> outputs = {candidates_dir() / "qd.jsonl", candidates_dir() / "qp.jsonl",
                                           candidates_dir() / "sp.jsonl"};
    if (stage_cached("search", key, outputs)) return;

    StageTimer timer;
    CorpusPaths staged{corpus_dir() / "documents.jsonl", corpus_dir() / "propositions.jsonl",
                       corpus_dir() / "queries.jsonl", corpus_dir() / "subqueries.jsonl"};
    Corpus corpus = load_corpus(staged);
    const auto chunk_store = EmbeddingStore::load(stores_dir() / "chunks.mgrv", UnitKind::document_chunk);
    const auto prop_store = EmbeddingStore::load(stores_dir() / "propositions.mgrv", UnitKind::proposition);
    const auto query_store = EmbeddingStore::load(stores_dir() / "queries.mgrv", UnitKind::query);
    const auto sub_store = EmbeddingStore::load(stores_dir() / "subqueries.mgrv", UnitKind::subquery);

    FlatIndex chunk_index(chunk_store);
    FlatIndex prop_index(prop_store);

    std::vector<DenseVector> query_vecs;
    query_vecs.reserve(corpus.queries.size());
    for (const auto& q : corpus.queries) {
        auto v = query_store.vector_for(q.query_id);
        query_vecs.emplace_back(v.begin(), v.end());
    }
    std::vector<DenseVector> sub_vecs;
    sub_vecs.reserve(corpus.subqueries.size());
    for (const auto& s : corpus.subqueries) {
        auto v = sub_store.vector_for(s.sub_id);
        sub_vecs.emplace_back(v.begin(), v.end());
    }

    StageTimer qd_timer;
    const auto qd_hits = chunk_index.search_batch(query_vecs, cfg_.k, cfg_.workers);
    const double qd_seconds = qd_timer.seconds();

    StageTimer qp_timer;
    const auto qp_hits = prop_index.search_batch(query_vecs, cfg_.k, cfg_.workers);
    const double qp_seconds = qp_timer.seconds();

    StageTimer sp_timer;
    const auto sp_hits = prop_index.search_batch(sub_vecs, cfg_.k, cfg_.workers);
    const double sp_seconds = sp_timer.seconds();

    OutputTxn txn;
    {
        auto out = open_out(txn.stage(outputs[0]));
        for (std::size_t i = 0; i < corpus.queries.size(); ++i)
            write_candidates(out, corpus.queries[i].query_id, corpus.queries[i].query_id, qd_hits[i]);
    }
    {
        auto out = open_out(txn.stage(outputs[1]));
        for (std::size_t i = 0; i < corpus.queries.size(); ++i)
            write_candidates(out, corpus.queries[i].query_id, corpus.queries[i].query_id, qp_hits[i]);
    }
    {
        auto out = open_out(txn.stage(outputs[2]));
        for (const auto& q : corpus.queries)
            for (auto si : corpus.subs_by_query.at(q.query_id))
                write_candidates(out, q.query_id, corpus.subqueries[si].sub_id, sp_hits[si]);
    }
    txn.commit();

    StageRecord rec;
    rec.digest_key = key;
    rec.duration_seconds = timer.seconds();
    rec.completed_utc = utc_now();
    rec.sub_durations_seconds = {{"qd", qd_seconds}, {"qp", qp_seconds}, {"sp", sp_seconds}};
    rec.counters = {{"queries", corpus.queries.size()}, {"subqueries", corpus.subqueries.size()}};
    with_manifest([&](RunManifest& m) { m.stages["search"] = rec; });
    note("[search] " + std::to_string(corpus.queries.size()) + " queries, " +
         std::to_string(corpus.subqueries.size()) + " subqueries at depth " + std::to_string(cfg_.k));
}

void Pipeline::run_fuse() {
    for (const char* f : {"qd.jsonl", "qp.jsonl", "sp.jsonl"})
        require_staged(candidates_dir() / f, "search");
    for (const char* f :
         {"documents.jsonl", "propositions.jsonl", "queries.jsonl", "subqueries.jsonl", "chunks.jsonl"})
        require_staged(corpus_dir() / f, "ingest");
    const bool needs_stores = cfg_.backfill.mode == BackfillConfig::Mode::exact;
    if (needs_stores)
        for (const char* f : {"chunks.mgrv", "propositions.mgrv", "queries.mgrv", "subqueries.mgrv"})
            require_staged(stores_dir() / f, "embed");

    ordered_json parts;
    for (const char* f : {"qd.jsonl", "qp.jsonl", "sp.jsonl"})
        parts[f] = digest_file(candidates_dir() / f);
    parts["corpus"] = digest_file(corpus_dir() / "propositions.jsonl") + ":" +
                      digest_file(corpus_dir() / "subqueries.jsonl") + ":" +
                      digest_file(corpus_dir() / "chunks.jsonl");
    if (needs_stores)
        parts["stores"] = digest_file(stores_dir() / "chunks.mgrv") + ":" +
                          digest_file(stores_dir() / "propositions.mgrv") + ":" +
                          digest_file(stores_dir() / "queries.mgrv") + ":" +
                          digest_file(stores_dir() / "subqueries.mgrv");
    parts["k"] = cfg_.k;
    parts["backfill"] = cfg_.backfill.mode == BackfillConfig::Mode::exact ? "exact" : "floor";
    parts["floor_value"] = cfg_.backfill.floor_value;
    parts["rank_policy"] = rank_policy_name(cfg_.rank_policy);
    ordered_json metrics = ordered_json::array();
    for (auto m : metric_universe()) metrics.push_back(metric_name(m));
    parts["metrics"] = metrics;
    parts["explicit_plan"] = !cfg_.fusion_metrics.empty();
    parts["ablations"] = cfg_.ablations;
    parts["proposition_runs"] = cfg_.proposition_runs;
    parts["run_tag"] = cfg_.run_tag;
    const std::string key = stage_key("fuse", parts);

    std::vector<fs::path> outputs;
    for (const auto& name : fuse_run_names()) outputs.push_back(run_file(name));
    for (const auto& name : fuse_run_names()) outputs.push_back(scores_dir() / (name + ".jsonl"));
    if (stage_cached("fuse", key, outputs)) return;

    StageTimer timer;
    CorpusPaths staged{corpus_dir() / "documents.jsonl", corpus_dir() / "propositions.jsonl",
                       corpus_dir() / "queries.jsonl", corpus_dir() / "subqueries.jsonl"};
    Corpus corpus = load_corpus(staged);
    IdSet doc_ids;
    for (const auto& d : corpus.documents) doc_ids.insert(d.doc_id);
    const auto chunks = load_chunks(corpus_dir() / "chunks.jsonl", doc_ids);

    IdMap chunk_to_doc, prop_to_doc;
    for (const auto& c : chunks) chunk_to_doc.emplace(c.chunk_id, c.doc_id);
    for (const auto& p : corpus.propositions) prop_to_doc.emplace(p.prop_id, p.doc_id);

    std::unordered_map<std::string, std::vector<SearchHit>> qd_hits, qp_hits;
    for (auto& line : load_candidates(candidates_dir() / "qd.jsonl"))
        qd_hits[line.query_id] = std::move(line.hits);
    for (auto& line : load_candidates(candidates_dir() / "qp.jsonl"))
        qp_hits[line.query_id] = std::move(line.hits);
    std::unordered_map<std::string, std::vector<std::pair<std::string, std::vector<SearchHit>>>> sp_hits;
    for (auto& line : load_candidates(candidates_dir() / "sp.jsonl"))
        sp_hits[line.query_id].emplace_back(std::move(line.unit_id), std::move(line.hits));

    for (const auto& q : corpus.queries) {
        if (!qd_hits.contains(q.query_id))
            throw ValidationError("candidates/qd.jsonl lacks query \"" + q.query_id +
                                  "\": re-run the search stage");
        if (!qp_hits.contains(q.query_id))
            throw ValidationError("candidates/qp.jsonl lacks query \"" + q.query_id +
                                  "\": re-run the search stage");
        const auto found = sp_hits.contains(q.query_id) ? sp_hits.at(q.query_id).size() : 0;
        if (found != corpus.subquery_count(q.query_id))
            throw ValidationError("candidates/sp.jsonl covers " + std::to_string(found) + " of " +
                                  std::to_string(corpus.subquery_count(q.query_id)) +
                                  " subqueries for query \"" + q.query_id +
                                  "\": re-run the search stage");
    }

    EmbeddingStore chunk_store, prop_store, query_store, sub_store;
    ExactScorer exact;
    BackfillResolver resolver;
    MissingTermPolicy missing;
    if (needs_stores) {
        chunk_store = EmbeddingStore::load(stores_dir() / "chunks.mgrv", UnitKind::document_chunk);
        prop_store = EmbeddingStore::load(stores_dir() / "propositions.mgrv", UnitKind::proposition);
        query_store = EmbeddingStore::load(stores_dir() / "queries.mgrv", UnitKind::query);
        sub_store = EmbeddingStore::load(stores_dir() / "subqueries.mgrv", UnitKind::subquery);
        exact.corpus = &corpus;
        exact.chunks = &chunk_store;
        exact.props = &prop_store;
        exact.queries = &query_store;
        exact.subs = &sub_store;
        for (const auto& c : chunks) exact.chunks_by_doc[c.doc_id].push_back(c.chunk_id);
    }
    if (cfg_.backfill.mode == BackfillConfig::Mode::exact) {
        resolver = [&exact](MetricKind metric, const std::string& query_id, const std::string& item_id) {
            return exact.score(metric, query_id, item_id);
        };
        missing.mode = MissingTermPolicy::Mode::exact;
        missing.exact_max = [&exact](const std::string& sub_id, const std::string& doc_id) {
            return exact.sub_max(sub_id, doc_id);
        };
    } else {
        resolver = floor_backfill(cfg_.backfill.floor_value);
        missing.mode = MissingTermPolicy::Mode::floor;
        missing.floor_value = cfg_.backfill.floor_value;
    }

    struct QueryFusion {
        std::vector<MetricKind> plan;
        std::map<MetricKind, RankedList> lists;
        FusedRun fused;
        std::map<MetricKind, FusedRun> ablated; // key: the omitted metric
        RankedList prop_qp_list, prop_sp_list;
        FusedRun prop_fused;
    };
    std::vector<QueryFusion> results(corpus.queries.size());
    const auto universe = metric_universe();

    parallel_for(corpus.queries.size(), cfg_.workers, [&](std::size_t qi) {
        const std::string& query_id = corpus.queries[qi].query_id;
        QueryFusion& r = results[qi];
        const std::size_t m_count = corpus.subquery_count(query_id);
        r.plan = cfg_.fusion_metrics.empty() ? select_fusion_plan(m_count) : cfg_.fusion_metrics;

        for (MetricKind m : r.plan) {
            std::vector<ScoredPair> pairs;
            switch (m) {
            case MetricKind::qd:
                pairs = score_qd(query_id, qd_hits.at(query_id), chunk_to_doc);
                break;
            case MetricKind::qp:
                pairs = score_qp(query_id, qp_hits.at(query_id), prop_to_doc);
                break;
            case MetricKind::sp:
                pairs = score_sp(query_id, sp_hits.at(query_id), prop_to_doc, missing);
                break;
            default:
                throw RuntimeError("unexpected metric in fusion plan");
            }
            RankedList list = rank(std::move(pairs));
            list.metric = m;
            list.query_id = query_id;
            r.lists.emplace(m, std::move(list));
        }

        std::vector<RankedList> ordered;
        for (MetricKind m : r.plan) ordered.push_back(r.lists.at(m));
        r.fused = fuse_rrf(ordered, cfg_.k, resolver, cfg_.rank_policy);
        if (cfg_.ablations) {
            for (MetricKind omit : universe) {
                bool would_remain = false;
                for (MetricKind m : r.plan)
                    if (m != omit) { would_remain = true; break; }
                if (!would_remain) continue; // nothing left to fuse for this query
                r.ablated.emplace(omit,
                                  fuse_ablate(ordered, {omit}, cfg_.k, resolver, cfg_.rank_policy));
            }
        }

        if (cfg_.proposition_runs) {
            auto prop_qp_pairs = score_prop(
                query_id, {{query_id, qp_hits.at(query_id)}}, MetricKind::prop_qp);
            auto prop_sp_pairs = score_prop(query_id, sp_hits.at(query_id), MetricKind::prop_sp);
            r.prop_qp_list = rank(std::move(prop_qp_pairs));
            r.prop_qp_list.metric = MetricKind::prop_qp;
            r.prop_qp_list.query_id = query_id;
            r.prop_sp_list = rank(std::move(prop_sp_pairs));
            r.prop_sp_list.metric = MetricKind::prop_sp;
            r.prop_sp_list.query_id = query_id;
            std::vector<RankedList> prop_lists = {r.prop_qp_list, r.prop_sp_list};
            r.prop_fused = fuse_rrf_prop(prop_lists, cfg_.k, resolver, cfg_.rank_policy);
        }
    });

    OutputTxn txn;
    auto write_list_run = [&](const std::string& name, auto select) {
        auto out = open_out(txn.stage(run_file(name)));
        std::vector<RunLine> lines;
        for (std::size_t qi = 0; qi < results.size(); ++qi) {
            const RankedList* list = select(results[qi]);
            if (!list) continue;
            auto query_lines = run_lines(*list, cfg_.k);
            lines.insert(lines.end(), query_lines.begin(), query_lines.end());
        }
        write_run(out, lines, cfg_.run_tag + "_" + name);
    };
    auto write_fused_run = [&](const std::string& name, auto select) {
        auto out = open_out(txn.stage(run_file(name)));
        std::vector<RunLine> lines;
        for (std::size_t qi = 0; qi < results.size(); ++qi) {
            const FusedRun* run = select(results[qi]);
            if (!run) continue;
            auto query_lines = run_lines(*run);
            lines.insert(lines.end(), query_lines.begin(), query_lines.end());
        }
        write_run(out, lines, cfg_.run_tag + "_" + name);
    };
    auto write_list_scores = [&](const std::string& name, auto select) {
        auto out = open_out(txn.stage(scores_dir() / (name + ".jsonl")));
        for (std::size_t qi = 0; qi < results.size(); ++qi) {
            const RankedList* list = select(results[qi]);
            if (!list) continue;
            ordered_json rec;
            rec["query_id"] = corpus.queries[qi].query_id;
            rec["metric"] = name;
            auto& scores = rec["scores"] = ordered_json::array();
            for (const auto& e : list->entries)
                scores.push_back(ordered_json::array({e.item_id, e.score}));
            out << rec.dump() << '\n';
        }
    };
    auto write_fused_scores = [&](const std::string& name, auto select) {
        auto out = open_out(txn.stage(scores_dir() / (name + ".jsonl")));
        for (std::size_t qi = 0; qi < results.size(); ++qi) {
            const FusedRun* run = select(results[qi]);
            if (!run) continue;
            ordered_json rec;
            rec["query_id"] = corpus.queries[qi].query_id;
            auto& entries = rec["entries"] = ordered_json::array();
            for (const auto& e : run->entries) {
                ordered_json je;
                je["item"] = e.item_id;
                je["fused"] = e.fused_score;
                ordered_json ranks = ordered_json::object();
                for (const auto& [m, rank_value] : e.metric_ranks) ranks[metric_name(m)] = rank_value;
                je["ranks"] = std::move(ranks);
                entries.push_back(std::move(je));
            }
            out << rec.dump() << '\n';
        }
    };

    auto doc_list_of = [](MetricKind m) {
        return [m](const QueryFusion& r) -> const RankedList* {
            auto it = r.lists.find(m);
            return it == r.lists.end() ? nullptr : &it->second;
        };
    };
    write_list_run("qd", doc_list_of(MetricKind::qd));
    write_list_run("qp", doc_list_of(MetricKind::qp));
    write_list_run("sp", doc_list_of(MetricKind::sp));
    write_fused_run("fused", [](const QueryFusion& r) { return &r.fused; });
    write_list_scores("qd", doc_list_of(MetricKind::qd));
    write_list_scores("qp", doc_list_of(MetricKind::qp));
    write_list_scores("sp", doc_list_of(MetricKind::sp));
    write_fused_scores("fused", [](const QueryFusion& r) { return &r.fused; });
    if (cfg_.ablations) {
        for (MetricKind omit : universe) {
            const std::string name = std::string("fused_wo_") + metric_name(omit);
            auto select = [omit](const QueryFusion& r) -> const FusedRun* {
                auto it = r.ablated.find(omit);
                return it == r.ablated.end() ? nullptr : &it->second;
            };
            write_fused_run(name, select);
            write_fused_scores(name, select);
        }
    }
    if (cfg_.proposition_runs) {
        write_list_run("prop_qp", [](const QueryFusion& r) { return &r.prop_qp_list; });
        write_list_run("prop_sp", [](const QueryFusion& r) { return &r.prop_sp_list; });
        write_fused_run("prop_fused", [](const QueryFusion& r) { return &r.prop_fused; });
        write_list_scores("prop_qp", [](const QueryFusion& r) { return &r.prop_qp_list; });
        write_list_scores("prop_sp", [](const QueryFusion& r) { return &r.prop_sp_list; });
        write_fused_scores("prop_fused", [](const QueryFusion& r) { return &r.prop_fused; });
    }
    txn.commit();

    StageRecord rec;
    rec.digest_key = key;
    rec.duration_seconds = timer.seconds();
    rec.completed_utc = utc_now();
    rec.counters = {{"queries", corpus.queries.size()},
                    {"run_files", fuse_run_names().size()}};
    with_manifest([&](RunManifest& m) { m.stages["fuse"] = rec; });
    note("[fuse] " + std::to_string(fuse_run_names().size()) + " run files for " +
         std::to_string(corpus.queries.size()) + " queries");
}

void Pipeline::run_eval() {
    if (cfg_.qrels.empty())
        throw ValidationError("eval stage requires corpus.qrels in the config");
    for (const auto& name : eval_run_names())
        require_staged(run_file(name), "fuse");
    for (const char* f : {"queries.jsonl", "subqueries.jsonl"})
        require_staged(corpus_dir() / f, "ingest");

    ordered_json parts;
    for (const auto& name : eval_run_names()) parts[name] = digest_file(run_file(name));
    parts["qrels"] = digest_file(cfg_.qrels);
    parts["subqueries.jsonl"] = digest_file(corpus_dir() / "subqueries.jsonl");
    parts["cutoffs"] = cfg_.cutoffs;
    parts["gain"] = gain_name(cfg_.gain);
    const std::string key = stage_key("eval", parts);

    const std::vector<fs::path> outputs = {reports_dir() / "report.json", reports_dir() / "aggregate.tsv",
                                           reports_dir() / "per_query.tsv", reports_dir() / "strata.json"};
    if (stage_cached("eval", key, outputs)) return;

    StageTimer timer;
    const Qrels qrels = load_qrels(cfg_.qrels);
    CorpusPaths staged{corpus_dir() / "documents.jsonl", corpus_dir() / "propositions.jsonl",
                       corpus_dir() / "queries.jsonl", corpus_dir() / "subqueries.jsonl"};
    Corpus corpus = load_corpus(staged);

    std::vector<std::string> query_ids;
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& q : corpus.queries) {
        query_ids.push_back(q.query_id);
        counts[q.query_id] = corpus.subquery_count(q.query_id);
    }
    const StratifiedQueries strata = stratify(query_ids, counts);
    const std::set<std::string> multi(strata.multi.begin(), strata.multi.end());
    const std::set<std::string> single(strata.single.begin(), strata.single.end());

    std::vector<MetricReport> reports;
    std::vector<Comparison> comparisons;
    struct StratumSpec {
        Stratum stratum;
        const std::set<std::string>* filter;
    };
    const StratumSpec specs[] = {{Stratum::all, nullptr},
                                 {Stratum::multi_subquery, &multi},
                                 {Stratum::single_subquery, &single}};
    for (const auto& spec : specs) {
        std::vector<MetricReport> stratum_reports;
        for (const auto& name : eval_run_names()) {
            std::ifstream in(run_file(name));
            if (!in) throw RuntimeError("cannot open run file: " + run_file(name).string());
            const auto lines = read_run(in);
            stratum_reports.push_back(evaluate_run(name, spec.stratum, group_run(lines), qrels,
                                                   spec.filter, cfg_.cutoffs, cfg_.gain,
                                                   cfg_.workers));
        }
        comparisons.push_back(compare_runs(stratum_reports, "qd", "fused"));
        for (auto& r : stratum_reports) reports.push_back(std::move(r));
    }

    OutputTxn txn;
    {
        auto out = open_out(txn.stage(outputs[0]));
        write_report_json(out, reports, comparisons, cfg_.gain);
    }
    {
        auto out = open_out(txn.stage(outputs[1]));
        write_aggregate_tsv(out, reports, comparisons);
    }
    {
        auto out = open_out(txn.stage(outputs[2]));
        write_per_query_tsv(out, reports);
    }
    {
        auto out = open_out(txn.stage(outputs[3]));
        ordered_json js;
        js["multi_subquery"] = strata.multi;
        js["single_subquery"] = strata.single;
        js["complex"] = strata.complex_ids; // three or more subqueries
        out << js.dump(2) << '\n';
    }
    txn.commit();

    StageRecord rec;
    rec.digest_key = key;
    rec.duration_seconds = timer.seconds();
    rec.completed_utc = utc_now();
    rec.counters = {{"runs", eval_run_names().size()},
                    {"strata", 3},
                    {"multi_subquery", strata.multi.size()},
                    {"single_subquery", strata.single.size()},
                    {"complex", strata.complex_ids.size()}};
    with_manifest([&](RunManifest& m) { m.stages["eval"] = rec; });
    note("[eval] " + std::to_string(eval_run_names().size()) + " runs over 3 strata");
}

void Pipeline::run_all() {
    run_ingest();
    if (!cfg_.decompose.endpoint.empty()) run_decompose();
    run_embed();
    run_search();
    run_fuse();
    if (!cfg_.qrels.empty())
        run_eval();
    else
        note("[eval] skipped: no qrels configured");
}

} // namespace grainfuse
