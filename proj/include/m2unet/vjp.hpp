#pragma once

#include <memory>
#include <string>
#include <vector>

#include "m2unet/losses.hpp"
#include "m2unet/ops.hpp"

namespace m2unet {

enum class OpKind {
  conv2d,
  depthwise_conv2d,
  batchnorm,
  relu6,
  relu,
  bilinear_upsample_x2,
  concat_channels,
  sigmoid,
  add_residual,
  bce_loss,
  soft_jaccard,
  jbce_loss,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::conv2d: return "conv2d";
    case OpKind::depthwise_conv2d: return "depthwise_conv2d";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::relu6: return "relu6";
    case OpKind::relu: return "relu";
    case OpKind::bilinear_upsample_x2: return "bilinear_upsample_x2";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::add_residual: return "add_residual";
    case OpKind::bce_loss: return "bce_loss";
    case OpKind::soft_jaccard: return "soft_jaccard";
    case OpKind::jbce_loss: return "jbce_loss";
  }
  return "?";
}

template <typename T>
using TensorRef = std::shared_ptr<const Tensor<T>>;

/// What an operator's forward pass leaves behind for its vjp.
///
///   conv2d / depthwise_conv2d  tensors {x, kernel}, geom
///   batchnorm                  tensors {x_hat, gamma}, inv_std, bn_mode
///   relu6 / relu               tensors {x}
///   sigmoid                    tensors {y}
///   bilinear_upsample_x2       in_shape
///   concat_channels            split (channels of the first operand)
///   add_residual               nothing
///   losses                     tensors {pred, gt}, weight (jbce)
template <typename T>
struct SavedContext {
  OpKind op = OpKind::add_residual;
  std::vector<TensorRef<T>> tensors;
  ConvGeometry geom{};
  BnMode bn_mode = BnMode::infer;
  std::vector<T> inv_std;
  Shape in_shape{};
  std::size_t split = 0;
  T weight = 0;
  bool captured = false;

  static SavedContext conv(OpKind op, TensorRef<T> x, TensorRef<T> kernel, ConvGeometry g) {
    SavedContext s;
    s.op = op;
    s.tensors = {std::move(x), std::move(kernel)};
    s.geom = g;
    s.captured = true;
    return s;
  }
  static SavedContext bn(TensorRef<T> x_hat, TensorRef<T> gamma, std::vector<T> inv_std, BnMode mode) {
    SavedContext s;
    s.op = OpKind::batchnorm;
    s.tensors = {std::move(x_hat), std::move(gamma)};
    s.inv_std = std::move(inv_std);
    s.bn_mode = mode;
    s.captured = true;
    return s;
  }
  static SavedContext unary(OpKind op, TensorRef<T> t) {
    SavedContext s;
    s.op = op;
    s.tensors = {std::move(t)};
    s.captured = true;
    return s;
  }
  static SavedContext upsample(Shape in) {
    SavedContext s;
    s.op = OpKind::bilinear_upsample_x2;
    s.in_shape = in;
    s.captured = true;
    return s;
  }
  static SavedContext concat(std::size_t split) {
    SavedContext s;
    s.op = OpKind::concat_channels;
    s.split = split;
    s.captured = true;
    return s;
  }
  static SavedContext add() {
    SavedContext s;
    s.op = OpKind::add_residual;
    s.captured = true;
    return s;
  }
  static SavedContext loss(OpKind op, TensorRef<T> pred, TensorRef<T> gt, T w = 0) {
    SavedContext s;
    s.op = op;
    s.tensors = {std::move(pred), std::move(gt)};
    s.weight = w;
    s.captured = true;
    return s;
  }
};

namespace detail {
template <typename T>
void require_saved(const SavedContext<T>& s, std::size_t count) {
  if (!s.captured || s.tensors.size() < count) {
    throw UsageError(std::string("vjp(") + op_name(s.op) + "): missing saved context");
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (!s.tensors[i]) throw UsageError(std::string("vjp(") + op_name(s.op) + "): missing saved context");
  }
}

template <typename T>
Tensor<T> vector_tensor(const std::vector<T>& v) {
  return Tensor<T>(Shape{v.size(), 1, 1, 1}, v);
}
}  // namespace detail

/// Exact vector-Jacobian product of one recorded operator. Gradients come back
/// in operand order:
///
///   conv2d            {dx, dkernel}
///   batchnorm         {dx, dgamma, dbeta}   (vectors as (c,1,1,1))
///   concat_channels   {da, db}
///   add_residual      {da, db}
///   losses            {dpred}               (grad_out is a 1-element tensor)
///   everything else   {dx}
template <typename T>
std::vector<Tensor<T>> vjp(const SavedContext<T>& s, const Tensor<T>& grad_out) {
  switch (s.op) {
    case OpKind::conv2d:
    case OpKind::depthwise_conv2d: {
      detail::require_saved(s, 2);
      auto g = conv2d_backward(*s.tensors[0], *s.tensors[1], s.geom, grad_out);
      std::vector<Tensor<T>> out;
      out.push_back(std::move(g.dx));
      out.push_back(std::move(g.dkernel));
      return out;
    }
    case OpKind::batchnorm: {
      detail::require_saved(s, 2);
      BnCache<T> cache{*s.tensors[0], s.inv_std};
      auto g = batchnorm_backward(cache, s.tensors[1]->vec(), s.bn_mode, grad_out);
      std::vector<Tensor<T>> out;
      out.push_back(std::move(g.dx));
      out.push_back(detail::vector_tensor(g.dgamma));
      out.push_back(detail::vector_tensor(g.dbeta));
      return out;
    }
    case OpKind::relu6:
      detail::require_saved(s, 1);
      return {relu6_backward(*s.tensors[0], grad_out)};
    case OpKind::relu:
      detail::require_saved(s, 1);
      return {relu_backward(*s.tensors[0], grad_out)};
    case OpKind::sigmoid:
      detail::require_saved(s, 1);
      return {sigmoid_backward(*s.tensors[0], grad_out)};
    case OpKind::bilinear_upsample_x2:
      if (!s.captured) throw UsageError("vjp(bilinear_upsample_x2): missing saved context");
      return {bilinear_upsample_x2_backward(s.in_shape, grad_out)};
    case OpKind::concat_channels: {
      if (!s.captured) throw UsageError("vjp(concat_channels): missing saved context");
      auto [da, db] = concat_channels_backward(s.split, grad_out);
      std::vector<Tensor<T>> out;
      out.push_back(std::move(da));
      out.push_back(std::move(db));
      return out;
    }
    case OpKind::add_residual:
      if (!s.captured) throw UsageError("vjp(add_residual): missing saved context");
      return {grad_out, grad_out};
    case OpKind::bce_loss:
    case OpKind::soft_jaccard:
    case OpKind::jbce_loss: {
      detail::require_saved(s, 2);
      if (grad_out.size() != 1) throw InputError("vjp(loss): grad_out must be a scalar");
      const auto& pred = *s.tensors[0];
      const auto& gt = *s.tensors[1];
      std::vector<T> g;
      if (s.op == OpKind::bce_loss) g = bce_loss_grad(pred.span(), gt.span());
      else if (s.op == OpKind::soft_jaccard) g = soft_jaccard_grad(pred.span(), gt.span());
      else g = jbce_loss_grad(pred.span(), gt.span(), s.weight);
      for (auto& v : g) v *= grad_out[0];
      return {Tensor<T>(pred.shape(), std::move(g))};
    }
  }
  throw UsageError("vjp: unknown operator");
}

}  // namespace m2unet
