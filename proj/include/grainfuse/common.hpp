#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace grainfuse {

/// Bad inputs or configuration: the caller gave us something we refuse to
/// work with. Maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Failure while doing otherwise valid work (I/O, transport, service
/// misbehavior). Maps to CLI exit code 2.
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Runs body(i) for i in [0, n). workers <= 1 runs inline. Iterations are
/// partitioned statically; the first exception thrown by any worker is
/// rethrown after all workers joined.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& body);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);

/// Streaming FNV-1a over a file's bytes, rendered as 16 hex digits.
std::string digest_file(const std::filesystem::path& path);

std::string to_hex64(std::uint64_t v);

} // namespace grainfuse
