#pragma once

#include <cstdint>
#include <filesystem>

namespace oasis {

/// Writes a small Python corpus under `root`: one directory per repository
/// (repo_00, repo_01, ...), each holding one module of templated functions
/// over a repository-specific domain noun. Several templates are
/// near-clones of each other and a few share no domain vocabulary at all,
/// so within-repository negatives range from almost unrelated to almost
/// identical. Output depends only on the arguments. Returns the number of
/// functions written. Throws Error("invalid_argument") when n_repos < 1.
std::size_t make_synthetic_corpus(const std::filesystem::path& root, int n_repos,
                                  int funcs_per_repo, std::uint64_t seed);

}  // namespace oasis
