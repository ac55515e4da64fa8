#include "grainfuse/common.hpp"
#include "grainfuse/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

using namespace grainfuse;

int main(int argc, char** argv) {
    CLI::App app{"mixed-granularity retrieval fusion pipeline"};
    app.set_version_flag("--version", kArtifactVersion);
    app.require_subcommand(1);
    app.fallthrough(); // options may follow the stage name

    std::string config_path;
    app.add_option("-c,--config", config_path, "experiment config (JSON)")->required();

    // Overrides; anything not given on the command line (or, for the service
    // endpoints, the environment) keeps its config-file value.
    std::size_t k = 0;
    auto* k_opt = app.add_option("-k,--depth", k, "candidate depth per metric");
    std::size_t chunk_words = 0;
    auto* chunk_opt = app.add_option("--chunk-word-limit", chunk_words, "words per document chunk");
    std::string out_dir;
    auto* out_opt = app.add_option("--out-dir", out_dir, "output directory");
    std::string run_tag;
    auto* tag_opt = app.add_option("--run-tag", run_tag, "tag prefix for run files");
    unsigned workers = 0;
    auto* workers_opt = app.add_option("--workers", workers, "intra-stage worker threads");
    bool force = false;
    app.add_flag("--force", force, "recompute stages even when cached");
    std::string embed_endpoint;
    auto* embed_opt = app.add_option("--embed-endpoint", embed_endpoint, "embedding service URL")
                          ->envname("GRAINFUSE_EMBED_ENDPOINT");
    std::string decompose_endpoint;
    auto* decompose_opt =
        app.add_option("--decompose-endpoint", decompose_endpoint, "decomposition service URL")
            ->envname("GRAINFUSE_DECOMPOSE_ENDPOINT");
    std::string backfill_mode;
    auto* backfill_opt = app.add_option("--backfill", backfill_mode, "missing-pair scores: exact|floor")
                             ->check(CLI::IsMember({"exact", "floor"}));
    double floor_value = 0.0;
    auto* floor_opt = app.add_option("--floor-value", floor_value, "score for floor backfill");
    std::string rank_policy;
    auto* policy_opt =
        app.add_option("--rank-policy", rank_policy, "backfilled-pair ranking: union_rerank|append_after_k");
    std::string gain;
    auto* gain_opt = app.add_option("--gain", gain, "nDCG gain: linear|exponential");
    std::vector<std::size_t> cutoffs;
    auto* cutoffs_opt = app.add_option("--cutoffs", cutoffs, "evaluation cutoffs");
    std::vector<std::string> metrics;
    auto* metrics_opt =
        app.add_option("--metrics", metrics, "fixed fusion plan (default: per-query by subquery count)");
    bool ablations = true;
    auto* abl_opt = app.add_flag("--ablations,!--no-ablations", ablations, "leave-one-out fused runs");
    bool prop_runs = false;
    auto* prop_opt =
        app.add_flag("--proposition-runs,!--no-proposition-runs", prop_runs, "proposition-level runs");

    auto* cmd_ingest = app.add_subcommand("ingest", "validate the corpus, stage it, derive chunks");
    auto* cmd_decompose =
        app.add_subcommand("decompose", "fetch propositions and subqueries for units lacking them");
    auto* cmd_embed = app.add_subcommand("embed", "build the four embedding stores");
    auto* cmd_search = app.add_subcommand("search", "run the three retrieval passes");
    auto* cmd_fuse = app.add_subcommand("fuse", "score, fuse, and write run files");
    auto* cmd_eval = app.add_subcommand("eval", "evaluate run files against the judgments");
    auto* cmd_all = app.add_subcommand("all", "run every stage in order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help, --version
        app.exit(e);
        return 1;
    }

    try {
        ExperimentConfig cfg = load_config(config_path);
        if (k_opt->count()) cfg.k = k;
        if (chunk_opt->count()) cfg.chunk_word_limit = chunk_words;
        if (out_opt->count()) cfg.out_dir = out_dir;
        if (tag_opt->count()) cfg.run_tag = run_tag;
        if (workers_opt->count()) cfg.workers = workers;
        if (force) cfg.force = true;
        if (embed_opt->count()) {
            cfg.embeddings.endpoint = embed_endpoint;
            cfg.embeddings.stores.clear();
        }
        if (decompose_opt->count()) cfg.decompose.endpoint = decompose_endpoint;
        if (backfill_opt->count())
            cfg.backfill.mode =
                backfill_mode == "exact" ? BackfillConfig::Mode::exact : BackfillConfig::Mode::floor;
        if (floor_opt->count()) cfg.backfill.floor_value = floor_value;
        if (policy_opt->count()) cfg.rank_policy = rank_policy_from_name(rank_policy);
        if (gain_opt->count()) cfg.gain = gain_from_name(gain);
        if (cutoffs_opt->count()) cfg.cutoffs = cutoffs;
        if (metrics_opt->count()) {
            cfg.fusion_metrics.clear();
            for (const auto& name : metrics) cfg.fusion_metrics.push_back(metric_from_name(name));
        }
        if (abl_opt->count()) cfg.ablations = ablations;
        if (prop_opt->count()) cfg.proposition_runs = prop_runs;

        Pipeline pipeline(std::move(cfg));
        pipeline.log = &std::cerr;
        if (*cmd_ingest) pipeline.run_ingest();
        if (*cmd_decompose) pipeline.run_decompose();
        if (*cmd_embed) pipeline.run_embed();
        if (*cmd_search) pipeline.run_search();
        if (*cmd_fuse) pipeline.run_fuse();
        if (*cmd_eval) pipeline.run_eval();
        if (*cmd_all) pipeline.run_all();
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const RuntimeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
