#pragma once

#include "grainfuse/fusion.hpp"

#include <cstddef>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace grainfuse {

// doc_id -> relevance grade (non-negative)
using Judgments = std::map<std::string, int>;

struct Qrels {
    std::map<std::string, Judgments> by_query;

    bool has_positive(const std::string& query_id) const;
};

// Lines of "query_id 0 doc_id grade".
Qrels load_qrels(const std::filesystem::path& path);

enum class GainMode { linear, exponential };

const char* gain_name(GainMode mode);
GainMode gain_from_name(std::string_view name);

// DCG over the top min(k, n) positions with log2(i+1) discount, 1-based i.
// The ideal DCG uses every judged grade, so deepening k never lowers the score.
// Returns 0 when no positive judgment exists.
double ndcg_at_k(std::span<const std::string> ranked_ids, const Judgments& judgments, std::size_t k,
                 GainMode gain = GainMode::linear);

// Fraction of positively judged docs present in the top min(k, n). 0 when none are judged positive.
double recall_at_k(std::span<const std::string> ranked_ids, const Judgments& judgments, std::size_t k);

enum class Stratum { all, multi_subquery, single_subquery };

const char* stratum_name(Stratum s);

struct StratifiedQueries {
    std::vector<std::string> multi;       // M >= 2
    std::vector<std::string> single;      // M == 1
    std::vector<std::string> complex_ids; // M >= 3, analysis export
};

StratifiedQueries stratify(const std::vector<std::string>& query_ids,
                           const std::unordered_map<std::string, std::size_t>& subquery_counts);

// Run lines grouped per query, ordered by rank. Rejects duplicate items and
// ranks that are not consecutive from 1.
std::map<std::string, std::vector<std::string>> group_run(std::span<const RunLine> lines);

struct MetricReport {
    std::string run_name;
    Stratum stratum = Stratum::all;
    std::vector<std::string> labels;                                // display order, e.g. ndcg@5
    std::map<std::string, std::map<std::string, double>> per_query; // label -> query -> value
    std::map<std::string, double> macro;                            // label -> mean over evaluated
    std::vector<std::string> evaluated_ids;                         // sorted, in the macro average
    std::vector<std::string> excluded_ids;                          // judged but no positive grade
};

// Scores one run against the qrels. The evaluated set is every qrels query with a
// positive grade, restricted to *query_filter when one is given (nullptr means no
// restriction); queries the run never ranked score 0 on all metrics.
MetricReport evaluate_run(const std::string& run_name, Stratum stratum,
                          const std::map<std::string, std::vector<std::string>>& ranked_by_query,
                          const Qrels& qrels, const std::set<std::string>* query_filter,
                          const std::vector<std::size_t>& cutoffs, GainMode gain = GainMode::linear,
                          unsigned workers = 1);

struct ComparisonRow {
    std::string label;
    std::map<std::string, double> values; // run name -> macro value
    std::string best_run;
    std::string second_run;
    bool delta_defined = false;
    double relative_delta = 0.0; // 100 * (enhanced - baseline) / baseline
};

struct Comparison {
    Stratum stratum = Stratum::all;
    std::string baseline_run;
    std::string enhanced_run;
    std::vector<ComparisonRow> rows;
};

// Side-by-side macro values for reports sharing a stratum, with the relative
// improvement of enhanced_run over baseline_run. All reports must cover the
// same evaluated query set.
Comparison compare_runs(std::span<const MetricReport> reports, const std::string& baseline_run,
                        const std::string& enhanced_run);

// Percent with one decimal, e.g. 0.36153 -> "36.2".
std::string format_percent(double value);

void write_report_json(std::ostream& os, std::span<const MetricReport> reports,
                       std::span<const Comparison> comparisons, GainMode gain);
void write_aggregate_tsv(std::ostream& os, std::span<const MetricReport> reports,
                         std::span<const Comparison> comparisons);
void write_per_query_tsv(std::ostream& os, std::span<const MetricReport> reports);

} // namespace grainfuse
