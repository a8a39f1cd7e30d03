#include "oasis/synthetic.hpp"

#include <array>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "oasis/common.hpp"

namespace oasis {
namespace {

struct Template {
  const char* name;  // $N noun, $A / $B attributes
  const char* body;  // $F is the function name
  bool compat = false;  // lives in compat.py instead of the main module
};

// Listed in inclusion order: a repository with n functions uses the first n
// (cycling with a version suffix). The rounding helper is duplicated in
// compat.py, the accumulators are near-clones, and the clamp and retry
// helpers share no domain words with anything ($R $U $O $T $D are drawn per
// repository from neutral word lists).
constexpr std::array<Template, 12> kTemplates{{
    {"total_$N_$A",
     "def $F($N_items):\n"
     "    $N_$A_total = 0\n"
     "    for $N_item in $N_items:\n"
     "        $N_$A_total += $N_item.$A\n"
     "    return $N_$A_total\n"},
    {"clamp_$R",
     "def $F(numerator, denominator, $U):\n"
     "    if denominator == 0:\n"
     "        return 0.0\n"
     "    $R = numerator / denominator\n"
     "    return min($R, $U)\n"},
    {"round_$N_$A",
     "def $F($N_$A):\n"
     "    return round(float($N_$A), 2)\n"},
    {"round_$N_$A",
     "def $F($N_$A):\n"
     "    return round($N_$A, 2)\n",
     true},
    {"average_$N_$A",
     "def $F($N_items):\n"
     "    $N_$A_total = 0\n"
     "    for $N_item in $N_items:\n"
     "        $N_$A_total += $N_item.$A\n"
     "    return $N_$A_total / max(len($N_items), 1)\n"},
    {"filter_$N_by_$B",
     "def $F($N_items, $B_limit):\n"
     "    kept = []\n"
     "    for $N_item in $N_items:\n"
     "        if $N_item.$B >= $B_limit:\n"
     "            kept.append($N_item)\n"
     "    return kept\n"},
    {"find_$N_by_key",
     "def $F($N_index, lookup_key):\n"
     "    if lookup_key in $N_index:\n"
     "        return $N_index[lookup_key]\n"
     "    raise KeyError(lookup_key)\n"},
    {"parse_$N_line",
     "def $F(raw_line):\n"
     "    fields = raw_line.strip().split(\",\")\n"
     "    $N_record = {}\n"
     "    $N_record[\"$A\"] = float(fields[0])\n"
     "    $N_record[\"$B\"] = float(fields[1])\n"
     "    return $N_record\n"},
    {"format_$N_summary",
     "def $F($N_items):\n"
     "    total = total_$N_$A($N_items)\n"
     "    mean = average_$N_$A($N_items)\n"
     "    return \"{} items, total {}, mean {}\".format(len($N_items), total, mean)\n"},
    {"retry_$O_with_backoff",
     "def $F($O, $T, $D):\n"
     "    for attempt in range($T):\n"
     "        try:\n"
     "            return $O()\n"
     "        except Exception:\n"
     "            time.sleep($D * (attempt + 1))\n"
     "    raise RuntimeError(\"$O failed\")\n"},
    {"largest_$N_$A",
     "def $F($N_items):\n"
     "    $N_$A_best = None\n"
     "    for $N_item in $N_items:\n"
     "        if $N_$A_best is None or $N_item.$A > $N_$A_best:\n"
     "            $N_$A_best = $N_item.$A\n"
     "    return $N_$A_best\n"},
    {"total_$N_$B",
     "def $F($N_items):\n"
     "    $N_$B_total = 0\n"
     "    for $N_item in $N_items:\n"
     "        $N_$B_total += $N_item.$B\n"
     "    return $N_$B_total\n"},
}};

constexpr std::array<const char*, 24> kNouns{
    "order",   "invoice", "sensor",  "ticket", "parcel",  "account", "booking", "patient",
    "vehicle", "student", "product", "flight", "payment", "shipment", "reading", "employee",
    "recipe",  "listing", "session", "course", "device",  "contract", "loan",    "claim"};

constexpr std::array<const char*, 16> kAttributes{
    "price", "weight", "amount", "duration", "score",  "distance", "volume",   "balance",
    "rating", "height", "cost",   "quantity", "energy", "latency",  "capacity", "margin"};

constexpr std::array<const char*, 6> kRatioWords{"ratio", "fraction", "share", "portion", "quota", "rate"};
constexpr std::array<const char*, 4> kUpperWords{"upper_bound", "ceiling", "cap", "maximum"};
constexpr std::array<const char*, 6> kOperationWords{"operation", "task", "job", "action", "request", "callback"};
constexpr std::array<const char*, 4> kTriesWords{"attempts", "tries", "tries_left", "retry_count"};
constexpr std::array<const char*, 4> kDelayWords{"delay_seconds", "pause", "wait_time", "backoff_step"};

template <std::size_t N>
const char* pick(const std::array<const char*, N>& words, std::mt19937_64& rng) {
  return words[uniform_index(rng, N)];
}

void replace_all(std::string& s, std::string_view from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
    s.replace(pos, from.size(), to);
}

template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

}  // namespace

std::size_t make_synthetic_corpus(const std::filesystem::path& root, int n_repos,
                                  int funcs_per_repo, std::uint64_t seed) {
  if (n_repos < 1) throw Error("invalid_argument", "n_repos must be at least 1");
  if (funcs_per_repo < 0) throw Error("invalid_argument", "funcs_per_repo must be non-negative");
  std::mt19937_64 rng(derive_seed(seed, "synthetic-corpus"));

  std::vector<std::size_t> nouns(kNouns.size());
  std::iota(nouns.begin(), nouns.end(), 0);
  shuffle(nouns, rng);

  std::size_t written = 0;
  for (int r = 0; r < n_repos; ++r) {
    std::string noun = kNouns[nouns[static_cast<std::size_t>(r) % nouns.size()]];
    if (static_cast<std::size_t>(r) >= nouns.size()) noun += fmt::format("{}", r / nouns.size());
    const std::size_t a = uniform_index(rng, kAttributes.size());
    std::size_t b = uniform_index(rng, kAttributes.size() - 1);
    if (b >= a) ++b;
    const std::array<std::pair<const char*, std::string>, 5> neutral{{{"$R", pick(kRatioWords, rng)},
                                                                      {"$U", pick(kUpperWords, rng)},
                                                                      {"$O", pick(kOperationWords, rng)},
                                                                      {"$T", pick(kTriesWords, rng)},
                                                                      {"$D", pick(kDelayWords, rng)}}};

    // Which templates appear is fixed by the count; where they appear is seeded.
    std::vector<std::size_t> order(static_cast<std::size_t>(funcs_per_repo));
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, rng);

    std::string main_module = "import time\n", compat_module;
    for (const std::size_t f : order) {
      const auto& t = kTemplates[f % kTemplates.size()];
      const auto round = f / kTemplates.size();
      std::string name = t.name;
      if (round > 0) name += fmt::format("_v{}", round + 1);
      std::string body = t.body;
      replace_all(body, "$F", name);
      replace_all(body, "$N", noun);
      replace_all(body, "$A", kAttributes[a]);
      replace_all(body, "$B", kAttributes[b]);
      for (const auto& [key, word] : neutral) replace_all(body, key, word);
      (t.compat ? compat_module : main_module) += "\n\n" + body;
      ++written;
    }
    const auto dir = root / fmt::format("repo_{:02}", r);
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / (noun + "_ops.py"), main_module);
    if (!compat_module.empty()) write_file_atomic(dir / "compat.py", compat_module);
  }
  return written;
}

}  // namespace oasis
