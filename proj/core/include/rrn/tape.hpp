#pragma once

#include "rrn/ops.hpp"
#include "rrn/tensor.hpp"

#include <deque>
#include <functional>
#include <utility>
#include <vector>

namespace rrn::diff {

/// Handle to a value recorded on a Tape.
struct Var {
    int id = -1;
    [[nodiscard]] bool valid() const { return id >= 0; }
};

/// Reverse-mode recorder. Each recorded value carries a closure that pushes
/// its output gradient onto its inputs; backward() replays them in reverse.
/// Parameter gradients are accumulated directly into caller-owned buffers.
template <typename T>
class Tape {
  public:
    using Backward = std::function<void(Tape&, const Tensor<T>& gout)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }
    Var input(Tensor<T> value) { return push(std::move(value), grad_enabled_, nullptr); }

    /// `requires_grad` is ignored (false) when the tape has gradients disabled.
    Var record(Tensor<T> value, bool requires_grad, Backward fn) {
        const bool rg = grad_enabled_ && requires_grad;
        return push(std::move(value), rg, rg ? std::move(fn) : Backward{});
    }

    [[nodiscard]] const Tensor<T>& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
    [[nodiscard]] bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }
    [[nodiscard]] bool grad_enabled() const { return grad_enabled_; }
    [[nodiscard]] bool has_grad(Var v) const { return !nodes_.at(static_cast<std::size_t>(v.id)).grad.empty(); }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    /// Gradient buffer of `v`, zero-allocated on first access.
    Tensor<T>& grad(Var v) {
        auto& n = nodes_.at(static_cast<std::size_t>(v.id));
        if (n.grad.empty()) n.grad = Tensor<T>(n.value.channels(), n.value.dims(), n.value.level());
        return n.grad;
    }

    /// Seeds d(root)/d(root) = 1 for a single-element root and back-propagates.
    void backward(Var root) {
        if (value(root).size() != 1) throw ValidationError("backward: root must be a scalar");
        if (!requires_grad(root)) return;
        grad(root)[0] = T(1);
        for (int id = root.id; id >= 0; --id) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.backward || n.grad.empty()) continue;
            n.backward(*this, n.grad);
        }
    }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Tensor<T> value, bool requires_grad, Backward fn) {
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(fn)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    bool grad_enabled_;
    std::deque<Node> nodes_;
};

// Recorded operators. Parameter gradient pointers may be null.

template <typename T>
Var conv3(Tape<T>& tape, Var x, const ConvWeights<T>& p, ConvWeights<T>* gp);
template <typename T>
Var leaky_relu(Tape<T>& tape, Var x, T slope);
template <typename T>
Var upsample2x(Tape<T>& tape, Var x, bool scale_values);
template <typename T>
Var warp(Tape<T>& tape, Var x, Var d, Padding pad = Padding::zeros);
template <typename T>
Var concat(Tape<T>& tape, const std::vector<Var>& parts);
/// Elementwise a + b.
template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
/// sum_k w_k * v_k over equally shaped values.
template <typename T>
Var linear_combination(Tape<T>& tape, const std::vector<std::pair<Var, T>>& terms);
/// Scalar <x, r> for a constant probe r.
template <typename T>
Var dot_const(Tape<T>& tape, Var x, const Tensor<T>& r);

}  // namespace rrn::diff
