#pragma once

#include "grainfuse/embedding.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace grainfuse {

struct Endpoint {
    std::string base; // http://host:port
    std::string path; // /embed
};

Endpoint parse_endpoint(const std::string& url);

struct RemoteOptions {
    std::size_t batch = 32;
    unsigned in_flight = 1;
    int timeout_seconds = 120;
};

// One vector per input text, order preserved, requests of size <= options.batch.
// All batches must agree on the vector dimension.
std::vector<DenseVector> embed_remote(const std::vector<std::string>& texts,
                                      const std::string& endpoint, const RemoteOptions& options = {});

struct Decomposition {
    std::vector<std::string> units;
    // Empty output, or nothing longer than a single character: the caller
    // falls back to treating the parent text as its own sole unit.
    bool degenerate = false;
};

std::vector<Decomposition> decompose_remote(const std::vector<std::string>& texts,
                                            const std::string& endpoint,
                                            const RemoteOptions& options = {});

} // namespace grainfuse
