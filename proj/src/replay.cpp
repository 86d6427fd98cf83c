#include "meow/replay.hpp"

#include <cmath>

namespace meow {

namespace {

void check_vec(const std::vector<double>& v, int want, const char* what) {
  if (static_cast<int>(v.size()) != want)
    throw ShapeError(std::string("replay push: bad ") + what + " size");
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericError(std::string("replay push: non-finite ") + what);
}

}  // namespace

ReplayBuffer::ReplayBuffer(size_t capacity, int state_dim, int action_dim)
    : capacity_(capacity), state_dim_(state_dim), action_dim_(action_dim) {
  if (capacity == 0) throw Error("replay: capacity must be positive");
  if (state_dim <= 0 || action_dim <= 0)
    throw Error("replay: dims must be positive");
  s_.resize(capacity * state_dim);
  a_.resize(capacity * action_dim);
  s_next_.resize(capacity * state_dim);
  r_.resize(capacity);
  done_.resize(capacity);
}

void ReplayBuffer::push(const std::vector<double>& s,
                        const std::vector<double>& a, double r,
                        const std::vector<double>& s_next, bool done) {
  check_vec(s, state_dim_, "state");
  check_vec(a, action_dim_, "action");
  check_vec(s_next, state_dim_, "next state");
  if (!std::isfinite(r)) throw NumericError("replay push: non-finite reward");

  std::copy(s.begin(), s.end(), s_.begin() + head_ * state_dim_);
  std::copy(a.begin(), a.end(), a_.begin() + head_ * action_dim_);
  std::copy(s_next.begin(), s_next.end(), s_next_.begin() + head_ * state_dim_);
  r_[head_] = r;
  done_[head_] = done ? 1 : 0;

  head_ = (head_ + 1) % capacity_;
  if (size_ < capacity_) ++size_;
}

TransitionView ReplayBuffer::at(size_t i) const {
  if (i >= size_) throw Error("replay at: index out of range");
  size_t phys = size_ == capacity_ ? (head_ + i) % capacity_ : i;
  TransitionView t;
  t.s = s_.data() + phys * state_dim_;
  t.a = a_.data() + phys * action_dim_;
  t.s_next = s_next_.data() + phys * state_dim_;
  t.r = r_[phys];
  t.done = done_[phys] != 0;
  return t;
}

std::vector<size_t> ReplayBuffer::sample_indices(int n, Rng& rng) const {
  if (size_ == 0) throw Error("replay sample: buffer is empty");
  if (n < 1) throw Error("replay sample: n must be >= 1");
  std::vector<size_t> out(n);
  for (int i = 0; i < n; ++i) {
    size_t idx = static_cast<size_t>(rng.uniform() * size_);
    out[i] = idx < size_ ? idx : size_ - 1;
  }
  return out;
}

}  // namespace meow
