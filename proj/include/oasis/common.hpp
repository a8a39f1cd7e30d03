#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace oasis {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
/// Insertion-ordered JSON so written records keep their documented field order.
using Json = nlohmann::ordered_json;

/// Error carrying a short machine-readable code ("budget_too_small",
/// "missing_input:<path>", ...) alongside the human-readable message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message.empty() ? code : code + ": " + message),
        code_(std::move(code)) {}
  explicit Error(std::string code) : Error(std::move(code), "") {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// 64-bit FNV-1a. Stable across platforms, used for feature hashing and
// seed derivation.
std::uint64_t fnv1a64(std::string_view data,
                      std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;

/// Derives an independent seed for a named consumer from a root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) noexcept;

/// Lower-cased maximal runs of ASCII alphanumerics. Everything else
/// (including '_' and non-ASCII bytes) is a boundary.
std::vector<std::string> alnum_tokens(std::string_view text);

/// Whitespace-delimited chunks; the budgeting unit for prompts.
std::vector<std::string_view> whitespace_tokens(std::string_view text);
std::size_t count_whitespace_tokens(std::string_view text);

/// Unbiased draw in [0, n) by rejection; independent of the standard
/// library's distribution implementations so streams are portable.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);

/// Uniform double in [0, 1) with 53 random bits.
double uniform_unit(std::mt19937_64& rng);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Exceptions from
/// fn are rethrown (first one wins) after all workers join.
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t)>& fn);

// ---- files ----

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames over the target so readers
/// never observe a partial file.
void write_file_atomic(const std::filesystem::path& path,
                       std::string_view content);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Retry policy shared by every external client.
struct RetryPolicy {
  int retries = 2;         // additional attempts after the first
  int backoff_ms = 200;    // linear backoff step
  int timeout_s = 60;
  std::size_t max_in_flight = 4;
};

/// Calls fn up to 1 + policy.retries times, sleeping between attempts.
/// The last failure propagates.
template <class F>
auto with_retries(const RetryPolicy& policy, std::string_view what, F&& fn)
    -> decltype(fn()) {
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const std::exception& e) {
      if (attempt >= policy.retries) throw;
      spdlog::warn("{}: attempt {} failed ({}), retrying", what, attempt + 1, e.what());
      std::this_thread::sleep_for(std::chrono::milliseconds(policy.backoff_ms * (attempt + 1)));
    }
  }
}

}  // namespace oasis
