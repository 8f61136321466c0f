// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace qdst {

/// Worker-thread budget for head-parallel kernel loops. Defaults to 1 (or
/// the QDST_THREADS environment variable when set). Thread count never
/// changes results: parallel units write disjoint output slices.
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Run fn(i) for i in [0, count), spread over at most num_threads() threads.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

} // namespace qdst
