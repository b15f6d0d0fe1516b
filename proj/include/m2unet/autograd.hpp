#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include "m2unet/vjp.hpp"

namespace m2unet {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Records forward operators and replays their vjps in reverse. Only the
/// operator set in vjp.hpp is supported.
template <typename T>
class Tape {
 public:
  Var leaf(Tensor<T> value, bool requires_grad = false) {
    return push(std::make_shared<const Tensor<T>>(std::move(value)), requires_grad);
  }

  const Tensor<T>& value(Var v) const { return *values_.at(v.id); }
  TensorRef<T> ref(Var v) const { return values_.at(v.id); }

  Var conv2d(Var x, Var kernel, ConvGeometry g, CostTally* tally = nullptr) {
    auto y = m2unet::conv2d(value(x), value(kernel), g, tally);
    const OpKind op = g.groups > 1 && g.groups == value(x).c() ? OpKind::depthwise_conv2d : OpKind::conv2d;
    return record(std::move(y), SavedContext<T>::conv(op, ref(x), ref(kernel), g), {x, kernel});
  }

  /// gamma/beta come from the Vars; eps, momentum and running statistics from
  /// `p`, whose running statistics are updated in train mode.
  Var batchnorm(Var x, Var gamma, Var beta, BatchNormParams<T>& p, BnMode mode, CostTally* tally = nullptr) {
    p.gamma = value(gamma).vec();
    p.beta = value(beta).vec();
    BnCache<T> cache;
    auto y = m2unet::batchnorm(value(x), p, mode, &cache, tally);
    auto x_hat = std::make_shared<const Tensor<T>>(std::move(cache.x_hat));
    return record(std::move(y), SavedContext<T>::bn(std::move(x_hat), ref(gamma), std::move(cache.inv_std), mode),
                  {x, gamma, beta});
  }

  Var relu6(Var x) { return record(m2unet::relu6(value(x)), SavedContext<T>::unary(OpKind::relu6, ref(x)), {x}); }
  Var relu(Var x) { return record(m2unet::relu(value(x)), SavedContext<T>::unary(OpKind::relu, ref(x)), {x}); }

  Var sigmoid(Var x) {
    auto y = std::make_shared<const Tensor<T>>(m2unet::sigmoid(value(x)));
    nodes_.push_back({SavedContext<T>::unary(OpKind::sigmoid, y), {x.id}, values_.size()});
    return push(std::move(y), true);
  }

  Var upsample(Var x) {
    return record(m2unet::bilinear_upsample_x2(value(x)), SavedContext<T>::upsample(value(x).shape()), {x});
  }

  Var concat(Var a, Var b) {
    return record(m2unet::concat_channels(value(a), value(b)), SavedContext<T>::concat(value(a).c()), {a, b});
  }

  Var add(Var a, Var b) {
    return record(m2unet::add_residual(value(a), value(b)), SavedContext<T>::add(), {a, b});
  }

  /// Joint loss against a constant target; `op` selects bce, soft Jaccard or jbce.
  Var loss(OpKind op, Var pred, const Tensor<T>& gt, T w = static_cast<T>(kDefaultJaccardWeight)) {
    const auto& p = value(pred);
    T v = 0;
    if (op == OpKind::bce_loss) v = bce_loss(p.span(), gt.span());
    else if (op == OpKind::soft_jaccard) v = soft_jaccard(p.span(), gt.span());
    else if (op == OpKind::jbce_loss) v = jbce_loss(p.span(), gt.span(), w);
    else throw UsageError("Tape::loss: not a loss operator");
    auto gt_ref = std::make_shared<const Tensor<T>>(gt);
    return record(Tensor<T>(Shape{1, 1, 1, 1}, {v}), SavedContext<T>::loss(op, ref(pred), gt_ref, w), {pred});
  }

  /// Seeds d(out)/d(out) = 1 and accumulates gradients into every input.
  void backward(Var out) {
    grads_.assign(values_.size(), std::nullopt);
    grads_[out.id] = Tensor<T>(value(out).shape(), T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& g = grads_[it->output];
      if (!g) continue;
      auto parts = vjp(it->saved, *g);
      for (std::size_t i = 0; i < it->inputs.size() && i < parts.size(); ++i) {
        const std::size_t in = it->inputs[i];
        if (!requires_grad_[in]) continue;
        accumulate(in, std::move(parts[i]));
      }
      // Intermediate gradients are not needed once propagated.
      if (!is_leaf_[it->output]) g.reset();
    }
  }

  /// Gradient of a leaf after backward(); zeros if nothing flowed into it.
  Tensor<T> grad(Var v) const {
    if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
    return Tensor<T>(value(v).shape());
  }

  std::size_t size() const { return values_.size(); }

 private:
  struct Node {
    SavedContext<T> saved;
    std::vector<std::size_t> inputs;
    std::size_t output;
  };

  Var push(TensorRef<T> v, bool requires_grad, bool leaf = true) {
    values_.push_back(std::move(v));
    requires_grad_.push_back(requires_grad);
    is_leaf_.push_back(leaf);
    return Var{values_.size() - 1};
  }

  Var record(Tensor<T> y, SavedContext<T> saved, std::initializer_list<Var> inputs) {
    bool needs = false;
    std::vector<std::size_t> ids;
    for (Var v : inputs) {
      ids.push_back(v.id);
      needs = needs || requires_grad_[v.id];
    }
    const std::size_t out = values_.size();
    if (needs) nodes_.push_back({std::move(saved), std::move(ids), out});
    return push(std::make_shared<const Tensor<T>>(std::move(y)), needs, false);
  }

  void accumulate(std::size_t id, Tensor<T> g) {
    auto& slot = grads_[id];
    if (!slot) {
      slot = std::move(g);
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
  }

  std::vector<TensorRef<T>> values_;
  std::vector<bool> requires_grad_;
  std::vector<bool> is_leaf_;
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
};

}  // namespace m2unet
