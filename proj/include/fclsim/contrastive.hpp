#pragma once

#include "fclsim/data.hpp"
#include "fclsim/model.hpp"
#include "fclsim/numcore.hpp"
#include "fclsim/update.hpp"

namespace fclsim {

struct ContrastiveConfig {
  double temperature = 0.5;
  int batch_size = 16;
  int local_epochs = 1;
  double learning_rate = 0.1;
  AugmentPolicy augment = AugmentPolicy::simclr_lite();

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Loss value plus gradient with respect to a matrix input.
struct MatrixGrad {
  double loss = 0.0;
  Matrix grad;
};

/// SimCLR InfoNCE over 2M rows where rows k and k+M are the two views of
/// sample k. Averaged over all 2M ordered positive pairs, cosine similarity.
MatrixGrad info_nce_loss(const Matrix& z, double temperature);

/// Loss of the full encoder+projector on a pre-augmented 2M-row view batch,
/// with the gradient chained back to the parameters.
GradResult info_nce_param_grad(const ParamVector& params, const ModelArch& arch, const Matrix& views,
                               double temperature);

/// One benign client's local round: L := G, local_epochs of minibatch SGD on
/// InfoNCE with two augmentations per sample, returns delta = L - G.
ClientUpdate benign_local_train(const ParamVector& global, const ModelArch& arch, const Dataset& shard,
                                const ContrastiveConfig& cfg, RngStream rng, ClientTag tag = {});

}  // namespace fclsim
