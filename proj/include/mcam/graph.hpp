// Reverse-mode automatic differentiation tape.
//
// A Graph owns a topologically ordered list of nodes (ops appended in
// execution order). backward() sweeps the tape in reverse once; gradient
// accumulation across fan-out is additive. Leaf gradients persist across
// repeated backward calls (they accumulate); intermediate gradients are
// cleared at the start of each sweep.
//
// A Graph and its tensors are confined to one execution context during a
// forward/backward pass.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mcam/errors.hpp"
#include "mcam/tensor.hpp"

namespace mcam {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    struct Node {
        Tensor value;
        std::vector<double> grad;  // empty until touched by a backward sweep
        bool requires_grad = false;
        bool is_leaf = false;
        std::vector<int> parents;
        std::function<void(Graph&, int)> backward;
        const char* op = "leaf";
    };

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    Var leaf(Tensor t, bool requires_grad = false) {
        Node n;
        n.value = std::move(t);
        n.requires_grad = requires_grad && grad_enabled_;
        n.is_leaf = true;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var constant(Tensor t) { return leaf(std::move(t), false); }

    // Appends an op node; requires_grad is inherited from parents. The
    // backward closure reads this node's grad and accumulates into parents.
    Var node(Tensor value, std::vector<int> parents, const char* op,
             std::function<void(Graph&, int)> backward) {
        Node n;
        n.value = std::move(value);
        if (grad_enabled_) {
            for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
        }
        n.parents = std::move(parents);
        if (n.requires_grad) n.backward = std::move(backward);
        n.op = op;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

    size_t size() const { return nodes_.size(); }

    // Gradient of a node as a tensor; all-zero if no backward path reached it.
    Tensor grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.id)];
        Tensor g(n.value.shape);
        if (!n.grad.empty()) g.values = n.grad;
        return g;
    }

    bool grad_touched(Var v) const { return !nodes_[static_cast<size_t>(v.id)].grad.empty(); }

    // Zero-initialized gradient buffer for accumulation.
    double* grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.value.values.size(), 0.0);
        return n.grad.data();
    }

    const double* grad_data(int id) const { return nodes_[static_cast<size_t>(id)].grad.data(); }

    // Reverse sweep from a scalar loss. Leaves keep (and accumulate) their
    // gradients across calls; intermediates are recomputed per call.
    void backward(Var loss) {
        if (!grad_enabled_) throw ContractError("backward: graph was built with gradients disabled");
        if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size()))
            throw ContractError("backward: invalid loss node");
        Node& ln = nodes_[static_cast<size_t>(loss.id)];
        if (ln.value.numel() != 1)
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(ln.value.shape));
        if (!ln.requires_grad) return;  // loss independent of every parameter

        for (auto& n : nodes_) {
            if (!n.is_leaf) n.grad.clear();
        }
        grad_buf(loss.id)[0] += 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.is_leaf || !n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
    }

private:
    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    int worst_param = -1;     // index into the params list
    int64_t worst_coord = -1; // flat coordinate within that parameter
    double analytic = 0.0;
    double numeric = 0.0;
};

// Central finite-difference check of the analytic gradients produced by a
// deterministic forward closure. The closure receives a graph plus one leaf
// Var per parameter and must return a scalar loss Var.
inline GradCheckReport grad_check_report(
    const std::function<Var(Graph&, const std::vector<Var>&)>& model_forward,
    std::vector<Tensor> params, double eps) {
    if (!(eps > 0.0) || eps > 1e-2)
        throw ContractError("grad_check: eps must lie in (0, 1e-2]");

    auto eval_loss = [&](const std::vector<Tensor>& p) {
        Graph g(false);
        std::vector<Var> vars;
        vars.reserve(p.size());
        for (const auto& t : p) vars.push_back(g.leaf(t, false));
        Var loss = model_forward(g, vars);
        if (g.value(loss).numel() != 1)
            throw ContractError("grad_check: forward closure must return a scalar loss");
        return g.value(loss)[0];
    };

    const double l0 = eval_loss(params);
    const double l1 = eval_loss(params);
    if (l0 != l1)
        throw ContractError("grad_check: stochastic forward detected (two identical calls differ)");

    // Analytic pass.
    Graph g(true);
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& t : params) vars.push_back(g.leaf(t, true));
    Var loss = model_forward(g, vars);
    g.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(vars.size());
    for (Var v : vars) analytic.push_back(g.grad(v));

    GradCheckReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (int64_t c = 0; c < params[pi].numel(); ++c) {
            const double orig = params[pi][c];
            params[pi][c] = orig + eps;
            const double lp = eval_loss(params);
            params[pi][c] = orig - eps;
            const double lm = eval_loss(params);
            params[pi][c] = orig;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = analytic[pi][c];
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_param = static_cast<int>(pi);
                rep.worst_coord = c;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
    }
    return rep;
}

inline double grad_check(const std::function<Var(Graph&, const std::vector<Var>&)>& model_forward,
                         std::vector<Tensor> params, double eps) {
    return grad_check_report(model_forward, std::move(params), eps).max_rel_error;
}

}  // namespace mcam
