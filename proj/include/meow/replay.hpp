// Fixed-capacity ring of transitions with uniform sampling. Stored as flat
// arrays so a million 2D transitions stay in a few contiguous buffers.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "meow/tensor.hpp"

namespace meow {

// Pointers borrow the buffer's storage; they are invalidated by push.
struct TransitionView {
  const double* s = nullptr;
  const double* a = nullptr;
  double r = 0.0;
  const double* s_next = nullptr;
  bool done = false;
};

class ReplayBuffer {
 public:
  ReplayBuffer(size_t capacity, int state_dim, int action_dim);

  // Oldest entry is overwritten once full. Rejects non-finite fields: a NaN
  // that reaches the buffer would poison every batch sampled later.
  void push(const std::vector<double>& s, const std::vector<double>& a,
            double r, const std::vector<double>& s_next, bool done);

  size_t size() const { return size_; }
  size_t capacity() const { return capacity_; }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }

  // i = 0 is the oldest stored transition.
  TransitionView at(size_t i) const;

  // n uniform i.i.d. draws with replacement; requires a non-empty buffer.
  std::vector<size_t> sample_indices(int n, Rng& rng) const;

 private:
  size_t capacity_;
  int state_dim_;
  int action_dim_;
  size_t size_ = 0;
  size_t head_ = 0;  // next physical write slot
  std::vector<double> s_, a_, s_next_;
  std::vector<double> r_;
  std::vector<uint8_t> done_;
};

}  // namespace meow
