#include "grainfuse/evaluation.hpp"

#include "grainfuse/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace grainfuse {

namespace {

double gain_of(int grade, GainMode mode) {
    if (mode == GainMode::linear) return static_cast<double>(grade);
    return std::exp2(static_cast<double>(grade)) - 1.0;
}

double discount(std::size_t position_1based) {
    return std::log2(static_cast<double>(position_1based) + 1.0);
}

} // namespace

bool Qrels::has_positive(const std::string& query_id) const {
    auto it = by_query.find(query_id);
    if (it == by_query.end()) return false;
    for (const auto& [_, grade] : it->second)
        if (grade > 0) return true;
    return false;
}

Qrels load_qrels(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open qrels file " + path.string());
    Qrels qrels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        std::istringstream ls(line);
        std::string query_id, iteration, doc_id;
        long grade = 0;
        if (!(ls >> query_id >> iteration >> doc_id >> grade))
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": malformed qrels record");
        if (grade < 0)
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": negative relevance grade");
        auto [it, inserted] = qrels.by_query[query_id].emplace(doc_id, static_cast<int>(grade));
        if (!inserted && it->second != static_cast<int>(grade))
            throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                  ": conflicting grades for (" + query_id + ", " + doc_id + ")");
    }
    return qrels;
}

const char* gain_name(GainMode mode) {
    return mode == GainMode::linear ? "linear" : "exponential";
}

GainMode gain_from_name(std::string_view name) {
    if (name == "linear") return GainMode::linear;
    if (name == "exponential") return GainMode::exponential;
    throw ValidationError("unknown gain mode \"" + std::string(name) + "\"");
}

double ndcg_at_k(std::span<const std::string> ranked_ids, const Judgments& judgments, std::size_t k,
                 GainMode gain) {
    if (k == 0) throw ValidationError("ndcg_at_k: k must be >= 1");

    std::vector<int> grades;
    grades.reserve(judgments.size());
    for (const auto& [_, grade] : judgments) grades.push_back(grade);
    std::sort(grades.begin(), grades.end(), std::greater<>());

    double idcg = 0.0;
    for (std::size_t i = 0; i < grades.size() && grades[i] > 0; ++i)
        idcg += gain_of(grades[i], gain) / discount(i + 1);
    if (idcg == 0.0) return 0.0;

    double dcg = 0.0;
    const std::size_t take = std::min(k, ranked_ids.size());
    for (std::size_t i = 0; i < take; ++i) {
        auto it = judgments.find(ranked_ids[i]);
        if (it != judgments.end()) dcg += gain_of(it->second, gain) / discount(i + 1);
    }
    return dcg / idcg;
}

double recall_at_k(std::span<const std::string> ranked_ids, const Judgments& judgments, std::size_t k) {
    if (k == 0) throw ValidationError("recall_at_k: k must be >= 1");
    std::size_t relevant = 0;
    for (const auto& [_, grade] : judgments)
        if (grade > 0) ++relevant;
    if (relevant == 0) return 0.0;

    std::size_t found = 0;
    const std::size_t take = std::min(k, ranked_ids.size());
    for (std::size_t i = 0; i < take; ++i) {
        auto it = judgments.find(ranked_ids[i]);
        if (it != judgments.end() && it->second > 0) ++found;
    }
    return static_cast<double>(found) / static_cast<double>(relevant);
}

const char* stratum_name(Stratum s) {
    switch (s) {
    case Stratum::all: return "all";
    case Stratum::multi_subquery: return "multi_subquery";
    case Stratum::single_subquery: return "single_subquery";
    }
    throw RuntimeError("unhandled stratum");
}

StratifiedQueries stratify(const std::vector<std::string>& query_ids,
                           const std::unordered_map<std::string, std::size_t>& subquery_counts) {
    StratifiedQueries out;
    for (const auto& q : query_ids) {
        auto it = subquery_counts.find(q);
        if (it == subquery_counts.end())
            throw ValidationError("stratify: unknown query id \"" + q + "\"");
        if (it->second == 0)
            throw ValidationError("stratify: query \"" + q + "\" has zero subqueries");
        if (it->second >= 2)
            out.multi.push_back(q);
        else
            out.single.push_back(q);
        if (it->second >= 3) out.complex_ids.push_back(q);
    }
    return out;
}

std::map<std::string, std::vector<std::string>> group_run(std::span<const RunLine> lines) {
    std::map<std::string, std::vector<RunLine>> grouped;
    for (const auto& l : lines) grouped[l.query_id].push_back(l);

    std::map<std::string, std::vector<std::string>> out;
    for (auto& [query_id, entries] : grouped) {
        std::sort(entries.begin(), entries.end(),
                  [](const RunLine& a, const RunLine& b) { return a.rank < b.rank; });
        std::vector<std::string> ids;
        ids.reserve(entries.size());
        std::set<std::string> seen;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].rank != static_cast<int>(i + 1))
                throw ValidationError("run for query \"" + query_id + "\" has non-consecutive ranks");
            if (!seen.insert(entries[i].item_id).second)
                throw ValidationError("run for query \"" + query_id + "\" repeats item \"" +
                                      entries[i].item_id + "\"");
            ids.push_back(entries[i].item_id);
        }
        out.emplace(query_id, std::move(ids));
    }
    return out;
}

MetricReport evaluate_run(const std::string& run_name, Stratum stratum,
                          const std::map<std::string, std::vector<std::string>>& ranked_by_query,
                          const Qrels& qrels, const std::set<std::string>* query_filter,
                          const std::vector<std::size_t>& cutoffs, GainMode gain, unsigned workers) {
    if (cutoffs.empty()) throw ValidationError("evaluate_run: no cutoffs given");
    for (auto k : cutoffs)
        if (k == 0) throw ValidationError("evaluate_run: cutoff must be >= 1");

    MetricReport report;
    report.run_name = run_name;
    report.stratum = stratum;
    for (auto k : cutoffs) report.labels.push_back("ndcg@" + std::to_string(k));
    for (auto k : cutoffs) report.labels.push_back("recall@" + std::to_string(k));

    for (const auto& [query_id, judgments] : qrels.by_query) {
        if (query_filter && !query_filter->contains(query_id)) continue;
        bool positive = false;
        for (const auto& [_, grade] : judgments)
            if (grade > 0) { positive = true; break; }
        (positive ? report.evaluated_ids : report.excluded_ids).push_back(query_id);
    }

    static const std::vector<std::string> kNoRanking;
    std::vector<std::vector<double>> values(report.evaluated_ids.size(),
                                            std::vector<double>(report.labels.size(), 0.0));
    parallel_for(report.evaluated_ids.size(), workers, [&](std::size_t qi) {
        const std::string& query_id = report.evaluated_ids[qi];
        const Judgments& judgments = qrels.by_query.at(query_id);
        auto rit = ranked_by_query.find(query_id);
        const std::vector<std::string>& ranked = rit == ranked_by_query.end() ? kNoRanking : rit->second;
        std::size_t label = 0;
        for (auto k : cutoffs) values[qi][label++] = ndcg_at_k(ranked, judgments, k, gain);
        for (auto k : cutoffs) values[qi][label++] = recall_at_k(ranked, judgments, k);
    });

    for (std::size_t li = 0; li < report.labels.size(); ++li) {
        auto& column = report.per_query[report.labels[li]];
        double sum = 0.0;
        for (std::size_t qi = 0; qi < report.evaluated_ids.size(); ++qi) {
            column.emplace(report.evaluated_ids[qi], values[qi][li]);
            sum += values[qi][li];
        }
        report.macro[report.labels[li]] =
            report.evaluated_ids.empty() ? 0.0 : sum / static_cast<double>(report.evaluated_ids.size());
    }
    return report;
}

Comparison compare_runs(std::span<const MetricReport> reports, const std::string& baseline_run,
                        const std::string& enhanced_run) {
    if (reports.empty()) throw ValidationError("compare_runs: no reports");

    const MetricReport* baseline = nullptr;
    const MetricReport* enhanced = nullptr;
    for (const auto& r : reports) {
        if (r.stratum != reports.front().stratum)
            throw ValidationError("compare_runs: reports mix strata");
        if (r.labels != reports.front().labels)
            throw ValidationError("compare_runs: reports disagree on metric labels");
        if (r.evaluated_ids != reports.front().evaluated_ids)
            throw ValidationError("compare_runs: run \"" + r.run_name +
                                  "\" covers a different query set than \"" +
                                  reports.front().run_name + "\"");
        if (r.run_name == baseline_run) baseline = &r;
        if (r.run_name == enhanced_run) enhanced = &r;
    }
    if (!baseline) throw ValidationError("compare_runs: baseline run \"" + baseline_run + "\" missing");
    if (!enhanced) throw ValidationError("compare_runs: enhanced run \"" + enhanced_run + "\" missing");

    Comparison cmp;
    cmp.stratum = reports.front().stratum;
    cmp.baseline_run = baseline_run;
    cmp.enhanced_run = enhanced_run;
    for (const auto& label : reports.front().labels) {
        ComparisonRow row;
        row.label = label;
        for (const auto& r : reports) row.values[r.run_name] = r.macro.at(label);

        std::vector<std::pair<std::string, double>> ordered(row.values.begin(), row.values.end());
        std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        row.best_run = ordered.front().first;
        if (ordered.size() > 1) row.second_run = ordered[1].first;

        const double base = baseline->macro.at(label);
        const double enh = enhanced->macro.at(label);
        if (base != 0.0) {
            row.delta_defined = true;
            row.relative_delta = 100.0 * (enh - base) / base;
        }
        cmp.rows.push_back(std::move(row));
    }
    return cmp;
}

std::string format_percent(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f", value * 100.0);
    return buf;
}

namespace {

std::string full_precision(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

} // namespace

void write_report_json(std::ostream& os, std::span<const MetricReport> reports,
                       std::span<const Comparison> comparisons, GainMode gain) {
    nlohmann::ordered_json root;
    root["conventions"] = {
        {"gain", gain_name(gain)},
        {"discount", "log2(position + 1), positions 1-based"},
        {"ideal_dcg", "computed over all judged grades, not truncated at the cutoff"},
        {"queries_without_positive_judgment", "excluded from macro-averages"},
        {"unranked_evaluated_queries", "scored 0 on every metric"},
    };
    root["reports"] = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json jr;
        jr["run"] = r.run_name;
        jr["stratum"] = stratum_name(r.stratum);
        jr["evaluated_queries"] = r.evaluated_ids.size();
        jr["excluded_queries"] = r.excluded_ids;
        nlohmann::ordered_json macro;
        for (const auto& label : r.labels) {
            macro[label] = {
                {"value", r.macro.at(label)},
                {"percent", format_percent(r.macro.at(label))},
            };
        }
        jr["macro"] = std::move(macro);
        nlohmann::ordered_json per_query;
        for (const auto& label : r.labels) per_query[label] = r.per_query.at(label);
        jr["per_query"] = std::move(per_query);
        root["reports"].push_back(std::move(jr));
    }
    root["comparisons"] = nlohmann::ordered_json::array();
    for (const auto& c : comparisons) {
        nlohmann::ordered_json jc;
        jc["stratum"] = stratum_name(c.stratum);
        jc["baseline"] = c.baseline_run;
        jc["enhanced"] = c.enhanced_run;
        jc["rows"] = nlohmann::ordered_json::array();
        for (const auto& row : c.rows) {
            nlohmann::ordered_json jrow;
            jrow["label"] = row.label;
            nlohmann::ordered_json vals;
            for (const auto& [run, value] : row.values)
                vals[run] = {{"value", value}, {"percent", format_percent(value)}};
            jrow["values"] = std::move(vals);
            jrow["best"] = row.best_run;
            jrow["second"] = row.second_run;
            if (row.delta_defined)
                jrow["relative_delta_percent"] = row.relative_delta;
            else
                jrow["relative_delta_percent"] = nullptr;
            jc["rows"].push_back(std::move(jrow));
        }
        root["comparisons"].push_back(std::move(jc));
    }
    os << root.dump(2) << '\n';
}

void write_aggregate_tsv(std::ostream& os, std::span<const MetricReport> reports,
                         std::span<const Comparison> comparisons) {
    os << "# macro-averages; queries without a positive judgment are excluded\n";
    os << "run\tstratum\tmetric\tvalue\tpercent\n";
    for (const auto& r : reports)
        for (const auto& label : r.labels)
            os << r.run_name << '\t' << stratum_name(r.stratum) << '\t' << label << '\t'
               << full_precision(r.macro.at(label)) << '\t' << format_percent(r.macro.at(label))
               << '\n';
    for (const auto& c : comparisons) {
        os << "# relative improvement of " << c.enhanced_run << " over " << c.baseline_run << " ("
           << stratum_name(c.stratum) << ")\n";
        for (const auto& row : c.rows) {
            os << "delta\t" << stratum_name(c.stratum) << '\t' << row.label << '\t';
            if (row.delta_defined) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%+.1f", row.relative_delta);
                os << buf << "%\t";
            } else {
                os << "n/a\t";
            }
            os << "best=" << row.best_run << ",second=" << row.second_run << '\n';
        }
    }
}

void write_per_query_tsv(std::ostream& os, std::span<const MetricReport> reports) {
    os << "run\tstratum\tquery_id\tmetric\tvalue\n";
    for (const auto& r : reports)
        for (const auto& label : r.labels)
            for (const auto& [query_id, value] : r.per_query.at(label))
                os << r.run_name << '\t' << stratum_name(r.stratum) << '\t' << query_id << '\t'
                   << label << '\t' << full_precision(value) << '\n';
}

} // namespace grainfuse
