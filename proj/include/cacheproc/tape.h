#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cacheproc/tensor.h"

namespace cacheproc {

// Records primitive applications in execution order (a Wengert list).
// backward() replays the list once, in reverse, accumulating into the grad
// buffers of every recorded tensor that requires_grad. Ops only record onto
// the active tape; with no tape active the engine runs in inference mode.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(const char* op, std::vector<std::shared_ptr<TensorImpl>> involved,
                std::function<void()> backward_fn);

    // Seeds d(loss)=1 and walks the list in reverse. Every requires_grad
    // tensor recorded on the tape ends with an allocated grad buffer, so
    // leaves off the path from loss hold exact zeros.
    void backward(const Tensor& loss);

    void reset();

    size_t size() const { return nodes_.size(); }
    size_t last_backward_visits() const { return last_visits_; }

    static Tape* active();

  private:
    struct Node {
        const char* op;
        std::vector<std::shared_ptr<TensorImpl>> involved;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
    bool backward_done_ = false;
    size_t last_visits_ = 0;

    friend class TapeScope;
    friend class NoGradScope;
};

// RAII activation of a tape for the current thread.
class TapeScope {
  public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* prev_;
};

// Suspends recording within a scope.
class NoGradScope {
  public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

  private:
    Tape* prev_;
};

}  // namespace cacheproc
