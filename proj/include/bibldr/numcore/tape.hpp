#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "bibldr/numcore/tensor.hpp"

namespace bibldr::numcore {

/// A named tensor owned by a model, with its gradient accumulator.
/// Non-trainable entries (running statistics, frozen tables) share the
/// same storage so they checkpoint alongside the weights.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
    bool decay = true;

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor(value.shape());
        else grad.fill(0.0);
    }
};

/// Ordered registry of parameters with stable addresses.
class ParameterStore {
public:
    Parameter& add(std::string name, Tensor value, bool trainable = true) {
        if (find(name)) throw ContractError("duplicate parameter name '" + name + "'");
        auto p = std::make_unique<Parameter>();
        p->name = std::move(name);
        p->value = std::move(value);
        p->value.requires_grad = trainable;
        p->trainable = trainable;
        p->grad = Tensor(p->value.shape());
        items_.push_back(std::move(p));
        return *items_.back();
    }

    Parameter* find(const std::string& name) {
        for (auto& p : items_)
            if (p->name == name) return p.get();
        return nullptr;
    }
    const Parameter* find(const std::string& name) const {
        for (const auto& p : items_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    Parameter& at(const std::string& name) {
        if (auto* p = find(name)) return *p;
        throw ContractError("no parameter named '" + name + "'");
    }
    const Parameter& at(const std::string& name) const {
        if (const auto* p = find(name)) return *p;
        throw ContractError("no parameter named '" + name + "'");
    }

    void zero_grad() {
        for (auto& p : items_) p->zero_grad();
    }

    std::size_t size() const noexcept { return items_.size(); }
    Parameter& operator[](std::size_t i) { return *items_[i]; }
    const Parameter& operator[](std::size_t i) const { return *items_[i]; }

    std::vector<Parameter*> trainable() {
        std::vector<Parameter*> out;
        for (auto& p : items_)
            if (p->trainable) out.push_back(p.get());
        return out;
    }

    ParameterStore() = default;
    ParameterStore(const ParameterStore& other) {
        for (const auto& p : other.items_) items_.push_back(std::make_unique<Parameter>(*p));
    }
    ParameterStore& operator=(const ParameterStore& other) {
        if (this != &other) {
            items_.clear();
            for (const auto& p : other.items_) items_.push_back(std::make_unique<Parameter>(*p));
        }
        return *this;
    }
    ParameterStore(ParameterStore&&) noexcept = default;
    ParameterStore& operator=(ParameterStore&&) noexcept = default;

private:
    std::vector<std::unique_ptr<Parameter>> items_;
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

/// Records forward operations in execution order and replays their
/// backward rules in reverse. One tape per forward pass.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) {
        Node n;
        n.value = std::move(value);
        return push(std::move(n));
    }

    /// Constant that aliases caller-owned storage; the tensor must outlive the tape.
    Var constant_ref(const Tensor& value) {
        Node n;
        n.external = &value;
        return push(std::move(n));
    }

    /// Differentiable leaf bound to a parameter; backward accumulates into p.grad.
    Var parameter(Parameter& p) {
        Node n;
        n.external = &p.value;
        n.param = p.trainable ? &p : nullptr;
        n.needs_grad = p.trainable;
        if (p.trainable && p.grad.shape() != p.value.shape()) p.zero_grad();
        return push(std::move(n));
    }

    /// Differentiable leaf that owns its value; gradient readable via grad().
    Var variable(Tensor value) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = true;
        return push(std::move(n));
    }

    Var record(Tensor value, bool needs_grad, BackwardFn fn) {
        if (!value.all_finite()) {
            // -inf is a legal mask sentinel in logit tensors, so only NaN/+inf are fatal here.
            for (double v : value.values()) {
                if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
                    throw DivergenceError("non-finite value produced by forward operation");
                }
            }
        }
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.backward = std::move(fn);
        return push(std::move(n));
    }

    const Tensor& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }

    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    /// Gradient slot of a node, allocated on first touch.
    Tensor& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.param) return n.param->grad;
        if (n.grad.empty()) n.grad = Tensor(value(id).shape());
        return n.grad;
    }

    bool has_grad(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.param != nullptr || !n.grad.empty();
    }

    void backward(Var loss) {
        if (loss.tape != this) throw ContractError("loss recorded on a different tape");
        if (value(loss.id).numel() != 1) {
            throw ContractError("backward needs a scalar loss, got shape " + shape_str(value(loss.id).shape()));
        }
        if (!nodes_[loss.id].needs_grad) return;
        grad(loss.id)[0] += 1.0;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.backward || n.grad.empty()) continue;
            n.backward(*this, n.grad);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        Parameter* param = nullptr;
        bool needs_grad = false;
        Tensor grad;
        BackwardFn backward;
    };

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace bibldr::numcore
