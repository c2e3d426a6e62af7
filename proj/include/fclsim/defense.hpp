#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fclsim/numcore.hpp"
#include "fclsim/update.hpp"

namespace fclsim {

struct DefenseSpec {
  enum class Kind { none, foolsgold, clip_noise } kind = Kind::none;
  /// Fixed clipping threshold; empty means the median of the round's update norms.
  std::optional<double> clip_threshold;
  /// Noise standard deviation. When noise_relative is set it is a fraction of
  /// the clipping threshold in effect.
  double noise_sigma = 1e-3;
  bool noise_relative = true;
  double foolsgold_epsilon = 1e-5;

  void validate() const;
};

/// Per-client aggregation weights in [0, 1] from cumulative update histories
/// (FoolsGold with pardoning and logit rescaling). Zero-norm histories get
/// weight 1 and are left out of the similarity computation.
std::vector<double> foolsgold_weights(std::span<const ParamVector> histories, double epsilon = 1e-5);

/// Clips each delta whose L2 norm exceeds threshold down to the threshold,
/// then adds i.i.d. N(0, sigma^2) noise to every coordinate of every update.
std::vector<AnonymousUpdate> clip_and_noise(std::span<const AnonymousUpdate> updates, double threshold, double sigma,
                                            RngStream& rng);

double median(std::vector<double> values);

struct DefenseOutcome {
  std::vector<AnonymousUpdate> updates;
  std::vector<double> weights;
  std::optional<double> clip_threshold;
};

/// histories[i] is the cumulative delta of updates[i]'s client, current round included.
DefenseOutcome apply_defense(const DefenseSpec& spec, std::span<const AnonymousUpdate> updates,
                             std::span<const ParamVector> histories, RngStream& rng);

}  // namespace fclsim
