#pragma once

#include "grainfuse/corpus.hpp"
#include "grainfuse/evaluation.hpp"
#include "grainfuse/fusion.hpp"
#include "grainfuse/scoring.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace grainfuse {

inline constexpr const char* kArtifactName = "grainfuse";
inline constexpr const char* kArtifactVersion = "1.0.0";

struct EmbeddingSourceConfig {
    // Exactly one source: four store files keyed chunks/propositions/queries/subqueries,
    // or a remote embedding endpoint.
    std::map<std::string, std::filesystem::path> stores;
    std::string endpoint;
    std::size_t batch = 32;
    unsigned in_flight = 1;
};

struct DecomposeConfig {
    std::string endpoint;
    std::size_t batch = 16;
    unsigned in_flight = 1;
};

struct BackfillConfig {
    enum class Mode { exact, floor };
    Mode mode = Mode::exact;
    double floor_value = 0.0;
};

struct ExperimentConfig {
    CorpusPaths corpus;
    std::filesystem::path qrels;
    EmbeddingSourceConfig embeddings;
    DecomposeConfig decompose;
    std::size_t k = 200;
    std::size_t chunk_word_limit = 128;
    std::vector<MetricKind> fusion_metrics; // empty: plan per query from its subquery count
    BackfillConfig backfill;
    RankPolicy rank_policy = RankPolicy::union_rerank;
    bool ablations = true;
    bool proposition_runs = false;
    std::vector<std::size_t> cutoffs = {5, 20};
    GainMode gain = GainMode::linear;
    std::filesystem::path out_dir = "out";
    std::string run_tag = "grainfuse";
    unsigned workers = 1;
    bool force = false; // re-run stages even when cached

    void validate() const;
    // Hash of every output-affecting field; concurrency knobs excluded.
    std::string semantic_hash() const;
};

ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& path);

struct StageRecord {
    std::string digest_key;
    double duration_seconds = 0.0;
    std::string completed_utc;
    std::map<std::string, double> sub_durations_seconds;
    std::map<std::string, std::uint64_t> counters;
};

struct RunManifest {
    std::string config_hash;
    std::string created_utc;
    std::string updated_utc;
    std::map<std::string, std::string> input_digests;
    std::map<std::string, StageRecord> stages;

    static RunManifest load_or_create(const std::filesystem::path& path, const std::string& config_hash);
    void save(const std::filesystem::path& path) const;
};

class Pipeline {
  public:
    explicit Pipeline(ExperimentConfig config);

    // Each stage validates its dependencies, skips itself when its digest key
    // matches the manifest and outputs exist, and commits outputs atomically.
    void run_ingest();
    void run_decompose();
    void run_embed();
    void run_search();
    void run_fuse();
    void run_eval();
    void run_all();

    const ExperimentConfig& config() const { return cfg_; }

    std::filesystem::path corpus_dir() const;
    std::filesystem::path stores_dir() const;
    std::filesystem::path candidates_dir() const;
    std::filesystem::path runs_dir() const;
    std::filesystem::path scores_dir() const;
    std::filesystem::path reports_dir() const;
    std::filesystem::path manifest_path() const;

    std::filesystem::path run_file(const std::string& run_name) const;

    // Run names the fuse stage produces under this config, in output order.
    std::vector<std::string> fuse_run_names() const;
    // The document-level subset of fuse_run_names(), the ones eval scores.
    std::vector<std::string> eval_run_names() const;

    // Progress notes ("[search] 120 queries (0.8s)") go here when set.
    std::ostream* log = nullptr;

  private:
    ExperimentConfig cfg_;

    std::vector<MetricKind> metric_universe() const;
    void note(const std::string& line) const;
    void with_manifest(const std::function<void(RunManifest&)>& fn) const;
    bool stage_cached(const std::string& stage_name, const std::string& digest_key,
                      const std::vector<std::filesystem::path>& outputs) const;
    void require_staged(const std::filesystem::path& path, const std::string& producer_stage) const;
};

} // namespace grainfuse
