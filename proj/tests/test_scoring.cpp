#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "grainfuse/common.hpp"
#include "grainfuse/scoring.hpp"

#include <map>

using namespace grainfuse;

namespace {

std::map<std::string, double> as_map(const std::vector<ScoredPair>& pairs) {
    std::map<std::string, double> m;
    for (const auto& p : pairs) m[p.item_id] = p.score;
    return m;
}

} // namespace

TEST_CASE("score_qd keeps the best chunk per document") {
    IdMap chunk_to_doc = {{"d1#0", "d1"}, {"d1#1", "d1"}, {"d2#0", "d2"}};
    std::vector<SearchHit> hits = {{"d1#1", 0.9}, {"d2#0", 0.8}, {"d1#0", 0.4}};
    auto pairs = score_qd("q1", hits, chunk_to_doc);
    auto m = as_map(pairs);
    REQUIRE(m.size() == 2);
    CHECK(m["d1"] == 0.9);
    CHECK(m["d2"] == 0.8);
    for (const auto& p : pairs) {
        CHECK(p.query_id == "q1");
        CHECK(p.metric == MetricKind::qd);
    }
}

TEST_CASE("score_qd rejects unresolvable chunk ids") {
    IdMap chunk_to_doc = {{"d1#0", "d1"}};
    std::vector<SearchHit> hits = {{"ghost#0", 0.5}};
    CHECK_THROWS_AS(score_qd("q1", hits, chunk_to_doc), ValidationError);
}

TEST_CASE("score_qp keeps the best proposition per document") {
    IdMap prop_to_doc = {{"p1", "d1"}, {"p2", "d1"}, {"p3", "d2"}};
    std::vector<SearchHit> hits = {{"p2", 0.7}, {"p1", 0.6}, {"p3", 0.2}};
    auto m = as_map(score_qp("q1", hits, prop_to_doc));
    CHECK(m["d1"] == 0.7);
    CHECK(m["d2"] == 0.2);
}

TEST_CASE("score_sp averages per-subquery maxima over the candidate union") {
    IdMap prop_to_doc = {{"p1", "d1"}, {"p2", "d1"}, {"p3", "d2"}};
    std::vector<std::pair<std::string, std::vector<SearchHit>>> hits_by_sub = {
        {"s1", {{"p1", 0.8}, {"p3", 0.1}}},
        {"s2", {{"p2", 0.6}}},
    };

    SUBCASE("floor policy fills unmatched subqueries with the floor") {
        MissingTermPolicy missing; // floor 0
        auto m = as_map(score_sp("q1", hits_by_sub, prop_to_doc, missing));
        REQUIRE(m.size() == 2);
        CHECK(m["d1"] == doctest::Approx((0.8 + 0.6) / 2).epsilon(1e-12));
        // s2 never reached d2, so d2 gets (0.1 + 0) / 2.
        CHECK(m["d2"] == doctest::Approx(0.05).epsilon(1e-12));
    }

    SUBCASE("a non-zero floor shifts unmatched contributions") {
        MissingTermPolicy missing;
        missing.floor_value = -1.0;
        auto m = as_map(score_sp("q1", hits_by_sub, prop_to_doc, missing));
        CHECK(m["d2"] == doctest::Approx((0.1 - 1.0) / 2).epsilon(1e-12));
    }

    SUBCASE("exact policy asks the resolver for unmatched pairs") {
        MissingTermPolicy missing;
        missing.mode = MissingTermPolicy::Mode::exact;
        int calls = 0;
        missing.exact_max = [&](const std::string& sub_id, const std::string& doc_id) {
            ++calls;
            CHECK(sub_id == "s2");
            CHECK(doc_id == "d2");
            return 0.3;
        };
        auto m = as_map(score_sp("q1", hits_by_sub, prop_to_doc, missing));
        CHECK(calls == 1);
        CHECK(m["d2"] == doctest::Approx((0.1 + 0.3) / 2).epsilon(1e-12));
    }

    SUBCASE("exact policy without a resolver is an error") {
        MissingTermPolicy missing;
        missing.mode = MissingTermPolicy::Mode::exact;
        CHECK_THROWS_AS(score_sp("q1", hits_by_sub, prop_to_doc, missing), ValidationError);
    }
}

TEST_CASE("score_sp takes the max when one subquery hits several propositions of a doc") {
    IdMap prop_to_doc = {{"p1", "d1"}, {"p2", "d1"}};
    std::vector<std::pair<std::string, std::vector<SearchHit>>> hits_by_sub = {
        {"s1", {{"p1", 0.5}, {"p2", 0.9}}},
    };
    MissingTermPolicy missing;
    auto m = as_map(score_sp("q1", hits_by_sub, prop_to_doc, missing));
    CHECK(m["d1"] == 0.9);
}

TEST_CASE("score_sp requires at least one subquery") {
    MissingTermPolicy missing;
    CHECK_THROWS_AS(score_sp("q1", {}, IdMap{}, missing), ValidationError);
}

TEST_CASE("score_sp rejects unresolvable proposition ids") {
    IdMap prop_to_doc = {{"p1", "d1"}};
    std::vector<std::pair<std::string, std::vector<SearchHit>>> hits_by_sub = {
        {"s1", {{"ghost", 0.5}}},
    };
    MissingTermPolicy missing;
    CHECK_THROWS_AS(score_sp("q1", hits_by_sub, prop_to_doc, missing), ValidationError);
}

TEST_CASE("score_prop passes query hits through and maxes subquery hits") {
    std::vector<std::pair<std::string, std::vector<SearchHit>>> query_hits = {
        {"q1", {{"p1", 0.4}, {"p2", 0.3}}},
    };
    auto qp = as_map(score_prop("q1", query_hits, MetricKind::prop_qp));
    CHECK(qp["p1"] == 0.4);
    CHECK(qp["p2"] == 0.3);

    std::vector<std::pair<std::string, std::vector<SearchHit>>> sub_hits = {
        {"s1", {{"p1", 0.2}, {"p2", 0.9}}},
        {"s2", {{"p1", 0.7}}},
    };
    auto sp = as_map(score_prop("q1", sub_hits, MetricKind::prop_sp));
    CHECK(sp["p1"] == 0.7);
    CHECK(sp["p2"] == 0.9);
    for (const auto& p : score_prop("q1", sub_hits, MetricKind::prop_sp))
        CHECK(p.metric == MetricKind::prop_sp);
}

TEST_CASE("metric names round-trip") {
    for (auto m : {MetricKind::qd, MetricKind::qp, MetricKind::sp, MetricKind::prop_qp,
                   MetricKind::prop_sp})
        CHECK(metric_from_name(metric_name(m)) == m);
    CHECK_THROWS_AS(metric_from_name("nope"), ValidationError);
}
