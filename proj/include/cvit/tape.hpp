#pragma once

#include "cvit/tensor.hpp"

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cvit {

/// Handle to a value living on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Append-only record of a forward computation. Each node knows its input
/// variable ids and how to push the output gradient back to them. backward()
/// walks the nodes once in reverse order, so gradients of every recorded
/// variable with requires_grad are available afterwards; variables that never
/// influenced the loss keep an exact zero gradient.
template <typename Scalar>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor<Scalar> value, bool requires_grad = false) {
        values_.push_back(std::move(value));
        requires_grad_.push_back(requires_grad);
        grads_.emplace_back();
        return Var{static_cast<int>(values_.size()) - 1};
    }

    /// Records an op output. `backward` receives the tape and the output var;
    /// it reads grad(out) and accumulates into the grads of the captured
    /// inputs. Not recorded when no input requires grad.
    Var record(Tensor<Scalar> out, const std::vector<Var>& inputs,
               std::function<void(Tape&, Var)> backward) {
        bool needs_grad = false;
        for (Var v : inputs) needs_grad = needs_grad || requires_grad_[v.id];
        Var out_var = leaf(std::move(out), needs_grad);
        if (needs_grad) nodes_.push_back({out_var.id, std::move(backward)});
        return out_var;
    }

    const Tensor<Scalar>& value(Var v) const { return values_[v.id]; }
    Tensor<Scalar>& value(Var v) { return values_[v.id]; }
    bool requires_grad(Var v) const { return requires_grad_[v.id]; }

    /// Gradient slot for v, zero-initialized to v's shape on first access.
    Tensor<Scalar>& grad(Var v) {
        auto& g = grads_[v.id];
        if (g.numel() == 0 && values_[v.id].numel() > 0)
            g = Tensor<Scalar>(values_[v.id].shape());
        return g;
    }

    /// Accumulates into grad(v) only when v wants a gradient.
    void accumulate(Var v, const Tensor<Scalar>& g) {
        if (!requires_grad_[v.id]) return;
        grad(v).array() += g.array();
    }

    void backward(Var loss) {
        if (value(loss).numel() != 1)
            throw std::invalid_argument("backward requires a scalar loss, got " +
                                        shape_str(value(loss).shape()));
        grad(loss).array().setConstant(Scalar(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            it->backward(*this, Var{it->out});
    }

    size_t num_nodes() const { return nodes_.size(); }
    size_t num_values() const { return values_.size(); }

private:
    struct Node {
        int out;
        std::function<void(Tape&, Var)> backward;
    };

    std::vector<Tensor<Scalar>> values_;
    std::vector<bool> requires_grad_;
    std::vector<Tensor<Scalar>> grads_;
    std::vector<Node> nodes_;
};

}  // namespace cvit
