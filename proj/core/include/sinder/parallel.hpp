// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace sinder {

/// Worker cap: SINDER_THREADS when set to a positive integer, otherwise the
/// hardware concurrency.
int thread_cap();

/// Runs fn(0..n-1) on up to thread_cap() threads. Each index is handled by
/// exactly one call, so writing results by index stays deterministic. The
/// first exception thrown is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace sinder
