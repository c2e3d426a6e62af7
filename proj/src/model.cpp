#include "fclsim/model.hpp"

#include <cmath>

namespace fclsim {

namespace {

std::string tensor_name(Stack which, std::size_t layer, const char* kind) {
  return std::string(which == Stack::encoder ? "encoder." : "projector.") + std::to_string(layer) + "." + kind;
}

const std::vector<DenseSpec>& specs_of(const ModelArch& arch, Stack which) {
  return which == Stack::encoder ? arch.encoder() : arch.projector();
}

std::size_t stack_input_dim(const ModelArch& arch, Stack which) {
  return which == Stack::encoder ? arch.input_dim() : arch.feature_dim();
}

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

}  // namespace

ModelArch::ModelArch(Shape input, std::vector<DenseSpec> encoder, std::vector<DenseSpec> projector)
    : input_(input), encoder_(std::move(encoder)), projector_(std::move(projector)) {
  if (input_.size() == 0) throw ConfigError("model input shape must be non-empty");
  if (encoder_.empty() || projector_.empty()) throw ConfigError("encoder and projector need at least one layer");
  for (const auto& s : encoder_)
    if (s.units == 0) throw ConfigError("dense layer with zero units");
  for (const auto& s : projector_)
    if (s.units == 0) throw ConfigError("dense layer with zero units");
  if (feature_dim() < 2) throw ConfigError("feature dimension d_h must be >= 2");
  if (projection_dim() < 2) throw ConfigError("projection dimension d_z must be >= 2");

  auto layout = std::make_shared<Layout>();
  for (Stack which : {Stack::encoder, Stack::projector}) {
    std::size_t in = stack_input_dim(*this, which);
    const auto& specs = specs_of(*this, which);
    for (std::size_t l = 0; l < specs.size(); ++l) {
      layout->add(tensor_name(which, l, "weight"), {specs[l].units, in});
      layout->add(tensor_name(which, l, "bias"), {specs[l].units});
      in = specs[l].units;
    }
  }
  layout_ = std::move(layout);
}

ModelArch ModelArch::desk_default(Shape input) {
  return ModelArch(input, {{128, Activation::relu}, {64, Activation::none}},
                   {{64, Activation::relu}, {32, Activation::none}});
}

std::vector<std::string> ModelArch::projector_tensors() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < projector_.size(); ++l) {
    out.push_back(tensor_name(Stack::projector, l, "weight"));
    out.push_back(tensor_name(Stack::projector, l, "bias"));
  }
  return out;
}

ParamVector ModelArch::init_params(RngStream& rng) const {
  ParamVector p(layout_);
  for (Stack which : {Stack::encoder, Stack::projector}) {
    std::size_t in = stack_input_dim(*this, which);
    const auto& specs = specs_of(*this, which);
    for (std::size_t l = 0; l < specs.size(); ++l) {
      const double fan_in = static_cast<double>(in);
      const double fan_out = static_cast<double>(specs[l].units);
      const double limit = specs[l].activation == Activation::relu ? std::sqrt(6.0 / fan_in)
                                                                   : std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& w : p.tensor(tensor_name(which, l, "weight"))) w = rng.uniform(-limit, limit);
      in = specs[l].units;
    }
  }
  return p;
}

void ModelArch::require_params(const ParamVector& p) const {
  if (p.size() != layout_->total() || !(p.layout_ptr() == layout_ || p.layout() == *layout_)) {
    throw StructuralError("parameter vector layout does not match the model architecture");
  }
}

Matrix forward_stack(const ParamVector& params, const ModelArch& arch, Stack which, const Matrix& x,
                     StackCache* cache) {
  arch.require_params(params);
  const auto& specs = specs_of(arch, which);
  std::size_t in = stack_input_dim(arch, which);
  if (static_cast<std::size_t>(x.cols()) != in) {
    throw StructuralError("forward: input has " + std::to_string(x.cols()) + " columns, expected " +
                          std::to_string(in));
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix cur = x;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto w = params.tensor(tensor_name(which, l, "weight"));
    const auto b = params.tensor(tensor_name(which, l, "bias"));
    ConstMap W(w.data(), static_cast<Eigen::Index>(specs[l].units), static_cast<Eigen::Index>(in));
    Eigen::Map<const Eigen::RowVectorXd> B(b.data(), static_cast<Eigen::Index>(specs[l].units));
    Matrix y = cur * W.transpose();
    y.rowwise() += B;
    if (cache) {
      cache->inputs.push_back(std::move(cur));
      cache->pre.push_back(y);
    }
    if (specs[l].activation == Activation::relu) y = y.cwiseMax(0.0);
    cur = std::move(y);
    in = specs[l].units;
  }
  return cur;
}

Matrix backward_stack(const ParamVector& params, const ModelArch& arch, Stack which, const StackCache& cache,
                      const Matrix& d_out, ParamVector& grad, bool want_input_grad) {
  const auto& specs = specs_of(arch, which);
  Matrix d = d_out;
  for (std::size_t l = specs.size(); l-- > 0;) {
    if (specs[l].activation == Activation::relu) {
      d = (cache.pre[l].array() > 0.0).select(d, 0.0);
    }
    const auto& input = cache.inputs[l];
    const auto units = static_cast<Eigen::Index>(specs[l].units);
    const auto in = input.cols();
    auto gw = grad.tensor(tensor_name(which, l, "weight"));
    auto gb = grad.tensor(tensor_name(which, l, "bias"));
    MutMap GW(gw.data(), units, in);
    Eigen::Map<Eigen::RowVectorXd> GB(gb.data(), units);
    GW.noalias() += d.transpose() * input;
    GB += d.colwise().sum();
    if (l > 0 || want_input_grad) {
      const auto w = params.tensor(tensor_name(which, l, "weight"));
      ConstMap W(w.data(), units, in);
      d = d * W;
    } else {
      d = Matrix();
    }
  }
  return d;
}

Matrix encode(const ParamVector& params, const ModelArch& arch, const Matrix& batch) {
  return forward_stack(params, arch, Stack::encoder, batch);
}

Matrix encode(const ParamVector& params, const ModelArch& arch, const Dataset& ds) {
  if (!(ds.shape() == arch.input())) throw StructuralError("encode: dataset shape does not match model input");
  return encode(params, arch, ds.to_matrix());
}

Matrix project(const ParamVector& params, const ModelArch& arch, const Matrix& h) {
  return forward_stack(params, arch, Stack::projector, h);
}

}  // namespace fclsim
