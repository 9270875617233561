#pragma once

// Eagerly-recorded reverse-mode tape. Ops append one backward rule per
// recorded operation; backward() replays them in exact reverse order.
// One tape is owned by one thread at a time (installed via TapeScope).

#include <functional>
#include <utility>
#include <vector>

#include "asr/common.hpp"
#include "asr/tensor.hpp"

namespace asr {

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }

  size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays all recorded rules in reverse.
  // Gradients accumulate additively across fan-out and across calls.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError(str_format("backward: loss must be scalar, got shape %s",
                                     shape_str(loss.shape()).c_str()));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward: loss is not connected to any tracked parameter");
    }
    loss.ensure_grad();
    loss.grad()[0] += T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  static bool recording() { return current() != nullptr; }

 private:
  std::vector<BackwardFn> nodes_;
};

// RAII installation of the active tape for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current()) {
    Tape<T>::current() = &tape;
  }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace asr
