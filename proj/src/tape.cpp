#include "cacheproc/tape.h"

#include "cacheproc/common.h"

namespace cacheproc {

namespace {
thread_local Tape* g_active_tape = nullptr;

void alloc_grad_buffers(TensorImpl& impl) {
    if (!impl.requires_grad || impl.grad_allocated()) return;
    if (impl.dtype == DType::F32) {
        impl.grad_f32.assign(impl.f32.size(), 0.0f);
    } else {
        impl.grad_f64.assign(impl.f64.size(), 0.0);
    }
}
}  // namespace

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::vector<std::shared_ptr<TensorImpl>> involved,
                  std::function<void()> backward_fn) {
    nodes_.push_back(Node{op, std::move(involved), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
    check(loss.defined() && loss.numel() == 1,
          "backward requires a scalar loss, got " +
              (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    check(!backward_done_, "backward called twice on the same tape without reset");
    check(loss.requires_grad(), "loss is not connected to this tape (requires_grad is false)");

    for (auto& node : nodes_) {
        for (auto& impl : node.involved) {
            alloc_grad_buffers(*impl);
        }
    }

    loss.impl()->requires_grad = true;
    alloc_grad_buffers(*loss.impl());
    if (loss.dtype() == DType::F32) {
        loss.impl()->grad_f32[0] = 1.0f;
    } else {
        loss.impl()->grad_f64[0] = 1.0;
    }

    last_visits_ = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->fn();
        ++last_visits_;
    }
    backward_done_ = true;
}

void Tape::reset() {
    nodes_.clear();
    backward_done_ = false;
    last_visits_ = 0;
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev_; }

}  // namespace cacheproc
