#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "grainfuse/common.hpp"
#include "grainfuse/fusion.hpp"

#include "testutil.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <sstream>

using namespace grainfuse;

namespace {

RankedList make_list(MetricKind metric, const std::string& query_id,
                     const std::vector<std::pair<std::string, double>>& scored) {
    std::vector<ScoredPair> pairs;
    for (const auto& [id, s] : scored) pairs.push_back({query_id, id, s, metric});
    return rank(std::move(pairs));
}

std::map<std::string, double> fused_map(const FusedRun& run) {
    std::map<std::string, double> m;
    for (const auto& e : run.entries) m[e.item_id] = e.fused_score;
    return m;
}

} // namespace

TEST_CASE("rank sorts by score descending with id-ascending ties") {
    auto list = make_list(MetricKind::qd, "q1", {{"b", 0.5}, {"a", 0.5}, {"c", 0.9}});
    REQUIRE(list.entries.size() == 3);
    CHECK(list.entries[0].item_id == "c");
    CHECK(list.entries[1].item_id == "a");
    CHECK(list.entries[2].item_id == "b");
    CHECK(list.entries[0].rank == 0);
    CHECK(list.entries[2].rank == 2);
    CHECK(list.metric == MetricKind::qd);
    CHECK(list.query_id == "q1");
}

TEST_CASE("rank rejects duplicate pairs and mixed lists") {
    std::vector<ScoredPair> dup = {{"q1", "d1", 0.5, MetricKind::qd}, {"q1", "d1", 0.4, MetricKind::qd}};
    CHECK_THROWS_AS(rank(std::move(dup)), ValidationError);

    std::vector<ScoredPair> mixed_metric = {{"q1", "d1", 0.5, MetricKind::qd},
                                            {"q1", "d2", 0.4, MetricKind::qp}};
    CHECK_THROWS_AS(rank(std::move(mixed_metric)), ValidationError);

    std::vector<ScoredPair> mixed_query = {{"q1", "d1", 0.5, MetricKind::qd},
                                           {"q2", "d2", 0.4, MetricKind::qd}};
    CHECK_THROWS_AS(rank(std::move(mixed_query)), ValidationError);
}

TEST_CASE("reciprocal rank fusion at pinned anchor ranks") {
    // Three metrics over one shared universe; the target's ranks are known.
    auto backfill = floor_backfill(0.0);

    SUBCASE("ranks (0,0,0) sum to 3") {
        std::vector<RankedList> lists = {
            make_list(MetricKind::qd, "q1", {{"t", 3}, {"u", 2}, {"v", 1}}),
            make_list(MetricKind::qp, "q1", {{"t", 3}, {"u", 2}, {"v", 1}}),
            make_list(MetricKind::sp, "q1", {{"t", 3}, {"u", 2}, {"v", 1}}),
        };
        auto run = fuse_rrf(lists, 10, backfill);
        CHECK(fused_map(run)["t"] == doctest::Approx(3.0).epsilon(1e-12));
        CHECK(run.entries[0].item_id == "t");
    }

    SUBCASE("ranks (0,1,2) sum to 11/6") {
        std::vector<RankedList> lists = {
            make_list(MetricKind::qd, "q1", {{"t", 3}, {"u", 2}, {"v", 1}}),
            make_list(MetricKind::qp, "q1", {{"u", 3}, {"t", 2}, {"v", 1}}),
            make_list(MetricKind::sp, "q1", {{"u", 3}, {"v", 2}, {"t", 1}}),
        };
        auto run = fuse_rrf(lists, 10, backfill);
        CHECK(fused_map(run)["t"] == doctest::Approx(1.0 + 0.5 + 1.0 / 3.0).epsilon(1e-12));
    }
}

TEST_CASE("fusion matches an independent reference on random instances") {
    std::mt19937_64 rng(2024);
    const MetricKind metrics[] = {MetricKind::qd, MetricKind::qp, MetricKind::sp};
    for (int iter = 0; iter < 200; ++iter) {
        const std::size_t n = 2 + rng() % 12;
        std::vector<std::string> items;
        for (std::size_t i = 0; i < n; ++i) items.push_back("i" + std::to_string(i));

        std::vector<RankedList> lists;
        std::vector<std::pair<std::string, std::map<std::string, double>>> ref_inputs;
        for (auto m : metrics) {
            std::vector<std::pair<std::string, double>> scored;
            std::map<std::string, double> ref_scores;
            std::vector<std::size_t> perm(n);
            for (std::size_t i = 0; i < n; ++i) perm[i] = i;
            std::shuffle(perm.begin(), perm.end(), rng);
            for (std::size_t i = 0; i < n; ++i) {
                const double s = double(n - perm[i]);
                scored.emplace_back(items[i], s);
                ref_scores[items[i]] = s;
            }
            lists.push_back(make_list(m, "q", scored));
            ref_inputs.emplace_back(metric_name(m), ref_scores);
        }

        auto run = fuse_rrf(lists, n, floor_backfill(0.0));
        auto ref = testutil::ref_rrf(ref_inputs);
        REQUIRE(run.entries.size() == n);
        for (const auto& e : run.entries) {
            CHECK(e.fused_score == doctest::Approx(ref.score.at(e.item_id)).epsilon(1e-12));
            for (const auto& [m, r] : e.metric_ranks)
                CHECK(r == ref.ranks.at(metric_name(m)).at(e.item_id));
        }
        // Output order: fused score descending, id-ascending ties.
        for (std::size_t i = 1; i < run.entries.size(); ++i) {
            const auto& prev = run.entries[i - 1];
            const auto& cur = run.entries[i];
            CHECK((prev.fused_score > cur.fused_score ||
                   (prev.fused_score == cur.fused_score && prev.item_id < cur.item_id)));
        }
    }
}

TEST_CASE("candidate union is backfilled and re-ranked per metric") {
    std::mt19937_64 rng(515);
    for (int iter = 0; iter < 100; ++iter) {
        const std::size_t pool = 4 + rng() % 10;
        const std::size_t depth = 1 + rng() % 4;
        std::vector<RankedList> lists;
        std::set<std::string> in_top_k;
        const MetricKind metrics[] = {MetricKind::qd, MetricKind::qp, MetricKind::sp};
        for (auto m : metrics) {
            std::vector<std::pair<std::string, double>> scored;
            for (std::size_t i = 0; i < pool; ++i)
                if (rng() % 2)
                    scored.emplace_back("i" + std::to_string(i), double(rng() % 100) / 10.0);
            if (scored.empty()) scored.emplace_back("i0", 1.0);
            auto list = make_list(m, "q", scored);
            for (std::size_t i = 0; i < std::min(depth, list.entries.size()); ++i)
                in_top_k.insert(list.entries[i].item_id);
            lists.push_back(std::move(list));
        }

        auto run = fuse_rrf(lists, depth, floor_backfill(0.0));

        // Union coverage: exactly the items any truncated list contributed.
        std::set<std::string> fused_items;
        for (const auto& e : run.entries) fused_items.insert(e.item_id);
        CHECK(fused_items == in_top_k);

        // Every metric ranks every union item exactly once, 0..|U|-1.
        for (auto m : metrics) {
            std::vector<int> ranks;
            for (const auto& e : run.entries)
                for (const auto& [em, r] : e.metric_ranks)
                    if (em == m) ranks.push_back(r);
            REQUIRE(ranks.size() == run.entries.size());
            std::sort(ranks.begin(), ranks.end());
            for (std::size_t i = 0; i < ranks.size(); ++i) CHECK(ranks[i] == int(i));
        }
    }
}

TEST_CASE("rank policies diverge when backfilled scores beat in-list ones") {
    // Metric qd retrieved x and y; z is backfilled at 0.7, above y's 0.5.
    std::vector<RankedList> lists = {
        make_list(MetricKind::qd, "q1", {{"x", 0.9}, {"y", 0.5}}),
        make_list(MetricKind::qp, "q1", {{"z", 0.8}}),
    };
    auto backfill = [](MetricKind, const std::string&, const std::string&) { return 0.7; };

    auto rerank = fuse_rrf(lists, 5, backfill, RankPolicy::union_rerank);
    auto append = fuse_rrf(lists, 5, backfill, RankPolicy::append_after_k);

    auto rank_of = [](const FusedRun& run, const std::string& id, MetricKind m) {
        for (const auto& e : run.entries)
            if (e.item_id == id)
                for (const auto& [em, r] : e.metric_ranks)
                    if (em == m) return r;
        return -1;
    };
    // Re-ranked: z's 0.7 sits between x and y.
    CHECK(rank_of(rerank, "x", MetricKind::qd) == 0);
    CHECK(rank_of(rerank, "z", MetricKind::qd) == 1);
    CHECK(rank_of(rerank, "y", MetricKind::qd) == 2);
    // Appended: retrieved items keep their ranks, z comes after.
    CHECK(rank_of(append, "x", MetricKind::qd) == 0);
    CHECK(rank_of(append, "y", MetricKind::qd) == 1);
    CHECK(rank_of(append, "z", MetricKind::qd) == 2);
}

TEST_CASE("leaving one metric out subtracts exactly its reciprocal") {
    std::mt19937_64 rng(77);
    const MetricKind metrics[] = {MetricKind::qd, MetricKind::qp, MetricKind::sp};
    for (int iter = 0; iter < 100; ++iter) {
        const std::size_t n = 3 + rng() % 8;
        std::vector<std::string> items;
        for (std::size_t i = 0; i < n; ++i) items.push_back("i" + std::to_string(i));
        std::vector<RankedList> lists;
        for (auto m : metrics) {
            std::vector<std::pair<std::string, double>> scored;
            std::vector<std::size_t> perm(n);
            for (std::size_t i = 0; i < n; ++i) perm[i] = i;
            std::shuffle(perm.begin(), perm.end(), rng);
            for (std::size_t i = 0; i < n; ++i) scored.emplace_back(items[i], double(n - perm[i]));
            lists.push_back(make_list(m, "q", scored));
        }
        auto full = fuse_rrf(lists, n, floor_backfill(0.0));
        for (auto omit : metrics) {
            auto loo = fuse_ablate(lists, {omit}, n, floor_backfill(0.0));
            auto loo_scores = fused_map(loo);
            for (const auto& e : full.entries) {
                int omitted_rank = -1;
                for (const auto& [m, r] : e.metric_ranks)
                    if (m == omit) omitted_rank = r;
                REQUIRE(omitted_rank >= 0);
                const double expected = e.fused_score - 1.0 / (1.0 + omitted_rank);
                CHECK(loo_scores.at(e.item_id) == doctest::Approx(expected).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("fuse_ablate refuses to drop every metric") {
    std::vector<RankedList> lists = {make_list(MetricKind::qd, "q1", {{"a", 1.0}})};
    CHECK_THROWS_AS(fuse_ablate(lists, {MetricKind::qd}, 5, floor_backfill(0.0)), ValidationError);
}

TEST_CASE("fusion input validation") {
    auto backfill = floor_backfill(0.0);
    std::vector<RankedList> empty;
    CHECK_THROWS_AS(fuse_rrf(empty, 5, backfill), ValidationError);

    std::vector<RankedList> lists = {make_list(MetricKind::qd, "q1", {{"a", 1.0}}),
                                     make_list(MetricKind::qp, "q1", {{"b", 1.0}})};
    CHECK_THROWS_AS(fuse_rrf(lists, 0, backfill), ValidationError);

    std::vector<RankedList> dup = {make_list(MetricKind::qd, "q1", {{"a", 1.0}}),
                                   make_list(MetricKind::qd, "q1", {{"b", 1.0}})};
    CHECK_THROWS_AS(fuse_rrf(dup, 5, backfill), ValidationError);

    std::vector<RankedList> queries = {make_list(MetricKind::qd, "q1", {{"a", 1.0}}),
                                       make_list(MetricKind::qp, "q2", {{"b", 1.0}})};
    CHECK_THROWS_AS(fuse_rrf(queries, 5, backfill), ValidationError);

    std::vector<RankedList> prop_lists = {make_list(MetricKind::prop_qp, "q1", {{"p", 1.0}}),
                                          make_list(MetricKind::prop_sp, "q1", {{"p", 1.0}})};
    CHECK_THROWS_AS(fuse_rrf(prop_lists, 5, backfill), ValidationError);
    CHECK_NOTHROW(fuse_rrf_prop(prop_lists, 5, backfill));
    CHECK_THROWS_AS(fuse_rrf_prop(lists, 5, backfill), ValidationError);

    // A missing pair with no way to resolve it.
    CHECK_THROWS_AS(fuse_rrf(lists, 5, BackfillResolver{}), ValidationError);
}

TEST_CASE("fusion plans follow the subquery count") {
    CHECK_THROWS_AS(select_fusion_plan(0), ValidationError);
    CHECK(select_fusion_plan(1) == std::vector<MetricKind>{MetricKind::qd, MetricKind::qp});
    const std::vector<MetricKind> all = {MetricKind::qd, MetricKind::qp, MetricKind::sp};
    CHECK(select_fusion_plan(2) == all);
    CHECK(select_fusion_plan(5) == all);
}

TEST_CASE("rank policy names round-trip") {
    CHECK(rank_policy_from_name(rank_policy_name(RankPolicy::union_rerank)) == RankPolicy::union_rerank);
    CHECK(rank_policy_from_name(rank_policy_name(RankPolicy::append_after_k)) ==
          RankPolicy::append_after_k);
    CHECK_THROWS_AS(rank_policy_from_name("nope"), ValidationError);
}

TEST_CASE("run lines serialize in the six-column format") {
    std::vector<RunLine> lines = {{"q1", "d7", 1, 0.1234567}, {"q1", "d3", 2, 2.0}};
    std::ostringstream os;
    write_run(os, lines, "tag_fused");
    CHECK(os.str() == "q1 Q0 d7 1 0.123457 tag_fused\nq1 Q0 d3 2 2.000000 tag_fused\n");

    std::istringstream is(os.str());
    auto parsed = read_run(is);
    REQUIRE(parsed.size() == 2);
    CHECK(parsed[0].query_id == "q1");
    CHECK(parsed[0].item_id == "d7");
    CHECK(parsed[0].rank == 1);
    CHECK(parsed[0].score == doctest::Approx(0.123457).epsilon(1e-12));
    CHECK(parsed[1].rank == 2);
}

TEST_CASE("read_run reports the malformed line") {
    std::istringstream is("q1 Q0 d7 1 0.5 tag\nbroken line\n");
    try {
        read_run(is);
        FAIL("expected a parse error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("2") != std::string::npos);
    }
}

TEST_CASE("run_lines converts fused and ranked outputs") {
    std::vector<RankedList> lists = {make_list(MetricKind::qd, "q1", {{"a", 3.0}, {"b", 2.0}}),
                                     make_list(MetricKind::qp, "q1", {{"a", 1.0}, {"b", 5.0}})};
    auto run = fuse_rrf(lists, 10, floor_backfill(0.0));
    auto fused_lines = run_lines(run);
    REQUIRE(fused_lines.size() == 2);
    CHECK(fused_lines[0].rank == 1);
    CHECK(fused_lines[1].rank == 2);
    CHECK(fused_lines[0].score >= fused_lines[1].score);

    auto top1 = run_lines(lists[0], 1);
    REQUIRE(top1.size() == 1);
    CHECK(top1[0].item_id == "a");
    CHECK(top1[0].rank == 1);
}
