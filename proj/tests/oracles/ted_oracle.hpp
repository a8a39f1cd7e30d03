#pragma once

// Exhaustive tree edit distance for small trees: minimum over all valid
// (ancestor- and sibling-order-preserving) node mappings of
// relabels + unmapped nodes of either tree. Exponential; keep trees tiny.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "oasis/ast.hpp"

namespace oracle {

struct FlatTree {
  std::vector<std::string> label;          // preorder
  std::vector<std::vector<char>> ancestor;  // ancestor[i][j]: i is a proper ancestor of j
};

inline FlatTree flatten(const oasis::AstTree& t) {
  FlatTree f;
  std::vector<int> path;
  std::vector<std::vector<int>> anc_lists;
  std::function<void(int)> walk = [&](int node) {
    f.label.push_back(t.label(node));
    anc_lists.push_back(path);
    const int me = static_cast<int>(f.label.size()) - 1;
    path.push_back(me);
    for (int c : t.children(node)) walk(c);
    path.pop_back();
  };
  walk(t.root());
  const std::size_t n = f.label.size();
  f.ancestor.assign(n, std::vector<char>(n, 0));
  for (std::size_t j = 0; j < n; ++j)
    for (int a : anc_lists[j]) f.ancestor[static_cast<std::size_t>(a)][j] = 1;
  return f;
}

inline int brute_force_ted(const oasis::AstTree& ta, const oasis::AstTree& tb) {
  const FlatTree a = flatten(ta), b = flatten(tb);
  const int n = static_cast<int>(a.label.size()), m = static_cast<int>(b.label.size());
  std::vector<int> map(static_cast<std::size_t>(n), -1);
  std::vector<char> used(static_cast<std::size_t>(m), 0);
  int best = n + m;

  // In preorder, i1 < i2 and not ancestor means i1 is left of i2.
  auto rel = [](const FlatTree& t, int x, int y) {
    if (t.ancestor[static_cast<std::size_t>(x)][static_cast<std::size_t>(y)]) return 0;  // x above y
    if (t.ancestor[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]) return 1;  // y above x
    return x < y ? 2 : 3;                                                                // x left / right
  };

  std::function<void(int, int, int)> go = [&](int i, int mapped, int relabels) {
    if (i == n) {
      best = std::min(best, relabels + (n - mapped) + (m - mapped));
      return;
    }
    go(i + 1, mapped, relabels);
    for (int j = 0; j < m; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      bool ok = true;
      for (int k = 0; k < i && ok; ++k) {
        const int mk = map[static_cast<std::size_t>(k)];
        if (mk < 0) continue;
        ok = rel(a, k, i) == rel(b, mk, j);
      }
      if (!ok) continue;
      map[static_cast<std::size_t>(i)] = j;
      used[static_cast<std::size_t>(j)] = 1;
      go(i + 1, mapped + 1, relabels + (a.label[static_cast<std::size_t>(i)] != b.label[static_cast<std::size_t>(j)]));
      used[static_cast<std::size_t>(j)] = 0;
      map[static_cast<std::size_t>(i)] = -1;
    }
  };
  go(0, 0, 0);
  return best;
}

/// Random ordered tree: node i (i >= 1) hangs under a uniformly chosen
/// earlier node; labels drawn from the first `alphabet` letters.
inline oasis::AstTree random_tree(std::mt19937_64& rng, int nodes, int alphabet = 3) {
  auto letter = [&] { return std::string(1, static_cast<char>('a' + rng() % static_cast<unsigned>(alphabet))); };
  oasis::AstTree t(letter());
  for (int i = 1; i < nodes; ++i) t.add_child(static_cast<int>(rng() % static_cast<unsigned>(i)), letter());
  return t;
}

}  // namespace oracle
