#pragma once

#include <cstddef>
#include <exception>
#include <thread>
#include <utility>
#include <vector>

namespace nhmm {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

// Chunked parallel reduction over [0, n). Each worker folds its contiguous
// range into a private accumulator; partials merge in chunk order, so a
// given thread count always reduces in the same order. threads == 1 runs
// the exact sequential loop (bit-reproducible mode).
template <class MakeAcc, class Body, class Merge>
auto parallel_reduce(std::size_t n, int threads, MakeAcc make_acc, Body body, Merge merge)
    -> decltype(make_acc()) {
  using Acc = decltype(make_acc());
  threads = resolve_threads(threads);
  if (threads <= 1 || n < 2) {
    Acc acc = make_acc();
    for (std::size_t i = 0; i < n; ++i) body(acc, i);
    return acc;
  }

  const std::size_t nchunks = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<Acc> parts;
  parts.reserve(nchunks);
  for (std::size_t c = 0; c < nchunks; ++c) parts.push_back(make_acc());
  std::vector<std::exception_ptr> errors(nchunks);

  std::vector<std::thread> workers;
  workers.reserve(nchunks);
  for (std::size_t c = 0; c < nchunks; ++c) {
    const std::size_t lo = n * c / nchunks;
    const std::size_t hi = n * (c + 1) / nchunks;
    workers.emplace_back([&, c, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) body(parts[c], i);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  Acc acc = std::move(parts[0]);
  for (std::size_t c = 1; c < nchunks; ++c) merge(acc, parts[c]);
  return acc;
}

}  // namespace nhmm
