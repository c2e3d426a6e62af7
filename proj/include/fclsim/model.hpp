#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fclsim/data.hpp"
#include "fclsim/numcore.hpp"

namespace fclsim {

enum class Activation { none, relu };

struct DenseSpec {
  std::size_t units = 0;
  Activation activation = Activation::none;
};

/// Encoder (input -> h) followed by a projector (h -> z), both stacks of
/// dense layers. All weights live in one ParamVector whose layout is owned
/// here.
class ModelArch {
 public:
  ModelArch(Shape input, std::vector<DenseSpec> encoder, std::vector<DenseSpec> projector);

  /// flatten -> dense(128, relu) -> dense(64) ; projector dense(64, relu) -> dense(32)
  static ModelArch desk_default(Shape input);

  const Shape& input() const noexcept { return input_; }
  std::size_t input_dim() const noexcept { return input_.size(); }
  std::size_t feature_dim() const noexcept { return encoder_.back().units; }
  std::size_t projection_dim() const noexcept { return projector_.back().units; }
  const std::vector<DenseSpec>& encoder() const noexcept { return encoder_; }
  const std::vector<DenseSpec>& projector() const noexcept { return projector_; }

  const std::shared_ptr<const Layout>& layout() const noexcept { return layout_; }
  std::size_t param_count() const noexcept { return layout_->total(); }

  /// Tensor names that belong to the projector.
  std::vector<std::string> projector_tensors() const;

  /// He-uniform weights for relu layers, Glorot-uniform otherwise; zero biases.
  ParamVector init_params(RngStream& rng) const;
  ParamVector zero_params() const { return ParamVector(layout_); }

  void require_params(const ParamVector& p) const;

 private:
  Shape input_;
  std::vector<DenseSpec> encoder_;
  std::vector<DenseSpec> projector_;
  std::shared_ptr<const Layout> layout_;
};

/// Activations kept from a forward pass for the matching backward pass.
struct StackCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation output of each layer
};

enum class Stack { encoder, projector };

Matrix forward_stack(const ParamVector& params, const ModelArch& arch, Stack which, const Matrix& x,
                     StackCache* cache = nullptr);

/// Accumulates d(loss)/d(params) into grad and returns d(loss)/d(input)
/// (an empty matrix when want_input_grad is false).
Matrix backward_stack(const ParamVector& params, const ModelArch& arch, Stack which, const StackCache& cache,
                      const Matrix& d_out, ParamVector& grad, bool want_input_grad = true);

/// Features h for each row of batch (rows are flattened CHW images).
Matrix encode(const ParamVector& params, const ModelArch& arch, const Matrix& batch);
Matrix encode(const ParamVector& params, const ModelArch& arch, const Dataset& ds);

/// Projections z for each row of h.
Matrix project(const ParamVector& params, const ModelArch& arch, const Matrix& h);

}  // namespace fclsim
