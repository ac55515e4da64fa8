#include "grainfuse/remote.hpp"

#include "grainfuse/common.hpp"
#include "grainfuse/corpus.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cmath>

namespace grainfuse {

Endpoint parse_endpoint(const std::string& url) {
    const std::string scheme = "http://";
    if (url.rfind(scheme, 0) != 0)
        throw ValidationError("endpoint \"" + url + "\" must start with http://");
    const auto slash = url.find('/', scheme.size());
    Endpoint ep;
    ep.base = slash == std::string::npos ? url : url.substr(0, slash);
    ep.path = slash == std::string::npos ? "/" : url.substr(slash);
    if (ep.base.size() == scheme.size())
        throw ValidationError("endpoint \"" + url + "\" has no host");
    return ep;
}

namespace {

nlohmann::json post_json(const Endpoint& ep, const std::string& url, const nlohmann::json& request,
                         const RemoteOptions& options) {
    httplib::Client client(ep.base);
    client.set_connection_timeout(options.timeout_seconds, 0);
    client.set_read_timeout(options.timeout_seconds, 0);
    client.set_write_timeout(options.timeout_seconds, 0);

    auto res = client.Post(ep.path, request.dump(), "application/json");
    if (!res)
        throw RuntimeError("service at " + url + " unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200)
        throw RuntimeError("service at " + url + " returned HTTP " + std::to_string(res->status));
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw RuntimeError("service at " + url + " returned malformed JSON: " + e.what());
    }
}

std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch) {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (std::size_t begin = 0; begin < n; begin += batch)
        ranges.emplace_back(begin, std::min(begin + batch, n));
    return ranges;
}

} // namespace

std::vector<DenseVector> embed_remote(const std::vector<std::string>& texts,
                                      const std::string& endpoint, const RemoteOptions& options) {
    if (options.batch == 0) throw ValidationError("embed_remote: batch size must be >= 1");
    const Endpoint ep = parse_endpoint(endpoint);

    std::vector<DenseVector> out(texts.size());
    const auto ranges = batch_ranges(texts.size(), options.batch);
    std::vector<std::size_t> dimensions(ranges.size(), 0);

    parallel_for(ranges.size(), options.in_flight, [&](std::size_t bi) {
        const auto [begin, end] = ranges[bi];
        nlohmann::json request;
        request["texts"] = std::vector<std::string>(texts.begin() + static_cast<long>(begin),
                                                    texts.begin() + static_cast<long>(end));
        const nlohmann::json response = post_json(ep, endpoint, request, options);

        if (!response.is_object() || !response.contains("vectors") || !response["vectors"].is_array())
            throw RuntimeError("embedding service response lacks a \"vectors\" array");
        const auto& vectors = response["vectors"];
        if (vectors.size() != end - begin)
            throw RuntimeError("embedding service returned " + std::to_string(vectors.size()) +
                               " vectors for " + std::to_string(end - begin) + " inputs");

        std::size_t dim = 0;
        if (response.contains("dimension")) {
            if (!response["dimension"].is_number_unsigned() || response["dimension"] == 0)
                throw RuntimeError("embedding service reported an invalid dimension");
            dim = response["dimension"].get<std::size_t>();
        }
        for (std::size_t i = 0; i < vectors.size(); ++i) {
            const auto& jv = vectors[i];
            if (!jv.is_array() || jv.empty())
                throw RuntimeError("embedding service returned a non-vector entry");
            if (dim == 0) dim = jv.size();
            if (jv.size() != dim)
                throw RuntimeError("embedding service mixed vector dimensions within one response");
            DenseVector v;
            v.reserve(jv.size());
            for (const auto& jx : jv) {
                if (!jx.is_number())
                    throw RuntimeError("embedding service returned a non-numeric component");
                const float x = jx.get<float>();
                if (!std::isfinite(x))
                    throw RuntimeError("embedding service returned a non-finite component");
                v.push_back(x);
            }
            out[begin + i] = std::move(v);
        }
        dimensions[bi] = dim;
    });

    for (std::size_t bi = 1; bi < dimensions.size(); ++bi)
        if (dimensions[bi] != dimensions[0])
            throw RuntimeError("embedding service dimension drifted between batches (" +
                               std::to_string(dimensions[0]) + " vs " +
                               std::to_string(dimensions[bi]) + ")");
    return out;
}

std::vector<Decomposition> decompose_remote(const std::vector<std::string>& texts,
                                            const std::string& endpoint,
                                            const RemoteOptions& options) {
    if (options.batch == 0) throw ValidationError("decompose_remote: batch size must be >= 1");
    const Endpoint ep = parse_endpoint(endpoint);

    std::vector<Decomposition> out(texts.size());
    const auto ranges = batch_ranges(texts.size(), options.batch);

    parallel_for(ranges.size(), options.in_flight, [&](std::size_t bi) {
        const auto [begin, end] = ranges[bi];
        nlohmann::json request;
        request["texts"] = std::vector<std::string>(texts.begin() + static_cast<long>(begin),
                                                    texts.begin() + static_cast<long>(end));
        const nlohmann::json response = post_json(ep, endpoint, request, options);

        if (!response.is_object() || !response.contains("decompositions") ||
            !response["decompositions"].is_array())
            throw RuntimeError("decomposition service response lacks a \"decompositions\" array");
        const auto& decomps = response["decompositions"];
        if (decomps.size() != end - begin)
            throw RuntimeError("decomposition service returned " + std::to_string(decomps.size()) +
                               " outputs for " + std::to_string(end - begin) + " inputs");

        for (std::size_t i = 0; i < decomps.size(); ++i) {
            const auto& jd = decomps[i];
            if (!jd.is_array())
                throw RuntimeError("decomposition service returned a non-list entry");
            Decomposition d;
            bool any_multichar = false;
            for (const auto& ju : jd) {
                if (!ju.is_string())
                    throw RuntimeError("decomposition service returned a non-string unit");
                std::string unit = ju.get<std::string>();
                if (count_codepoints(unit) > 1) any_multichar = true;
                d.units.push_back(std::move(unit));
            }
            d.degenerate = d.units.empty() || !any_multichar;
            if (d.degenerate) d.units.clear();
            out[begin + i] = std::move(d);
        }
    });
    return out;
}

} // namespace grainfuse
