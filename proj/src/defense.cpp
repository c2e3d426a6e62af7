#include "fclsim/defense.hpp"

#include <algorithm>
#include <cmath>

namespace fclsim {

void DefenseSpec::validate() const {
  if (clip_threshold && !(*clip_threshold > 0.0)) throw ConfigError("defense.clip_threshold must be > 0");
  if (!(noise_sigma >= 0.0)) throw ConfigError("defense.noise_sigma must be >= 0");
  if (!(foolsgold_epsilon > 0.0)) throw ConfigError("defense.foolsgold_epsilon must be > 0");
}

std::vector<double> foolsgold_weights(std::span<const ParamVector> histories, double epsilon) {
  const std::size_t n = histories.size();
  std::vector<double> weights(n, 1.0);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < n; ++i) {
    if (l2_norm(histories[i]) > 0.0) active.push_back(i);
  }
  const std::size_t m = active.size();
  if (m < 2) return weights;

  std::vector<std::vector<double>> cs(m, std::vector<double>(m, 0.0));
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b) {
      cs[a][b] = cs[b][a] = cosine_sim(histories[active[a]].values(), histories[active[b]].values());
    }
  std::vector<double> max_cs(m, -1.0);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b)
      if (a != b) max_cs[a] = std::max(max_cs[a], cs[a][b]);

  // Pardoning: a client that looks less sybil-like than its peer has its
  // similarity to that peer discounted.
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) {
      if (a == b) continue;
      if (max_cs[a] < max_cs[b] && max_cs[b] > epsilon) cs[a][b] *= std::max(max_cs[a], 0.0) / max_cs[b];
    }

  std::vector<double> wv(m);
  for (std::size_t a = 0; a < m; ++a) {
    double row_max = -1.0;
    for (std::size_t b = 0; b < m; ++b)
      if (a != b) row_max = std::max(row_max, cs[a][b]);
    wv[a] = std::clamp(1.0 - row_max, 0.0, 1.0);
  }
  const double top = *std::max_element(wv.begin(), wv.end());
  for (std::size_t a = 0; a < m; ++a) {
    double w = top > 0.0 ? wv[a] / top : 0.0;
    if (w >= 1.0) w = 0.99;
    // Logit stretch around 0.5, clamped back into [0, 1]; w == 0 is -inf, i.e. 0.
    const double logit = w > 0.0 ? std::log(w / (1.0 - w)) + 0.5 : 0.0;
    weights[active[a]] = std::clamp(logit, 0.0, 1.0);
  }
  return weights;
}

std::vector<AnonymousUpdate> clip_and_noise(std::span<const AnonymousUpdate> updates, double threshold, double sigma,
                                            RngStream& rng) {
  if (!(threshold > 0.0)) throw ConfigError("clip_and_noise: threshold must be > 0");
  if (!(sigma >= 0.0)) throw ConfigError("clip_and_noise: sigma must be >= 0");
  std::vector<AnonymousUpdate> out;
  out.reserve(updates.size());
  for (const auto& u : updates) {
    ParamVector d = u.delta;
    const double norm = l2_norm(d);
    if (norm > threshold) d.scale(threshold / norm);
    if (sigma > 0.0) {
      for (auto& v : d.values()) v += rng.normal(0.0, sigma);
    }
    out.push_back(AnonymousUpdate::make(std::move(d), u.client_id));
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ConfigError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

DefenseOutcome apply_defense(const DefenseSpec& spec, std::span<const AnonymousUpdate> updates,
                             std::span<const ParamVector> histories, RngStream& rng) {
  spec.validate();
  DefenseOutcome out;
  switch (spec.kind) {
    case DefenseSpec::Kind::none:
      out.updates.assign(updates.begin(), updates.end());
      out.weights.assign(updates.size(), 1.0);
      break;
    case DefenseSpec::Kind::foolsgold:
      if (histories.size() != updates.size()) throw StructuralError("apply_defense: one history per update required");
      out.updates.assign(updates.begin(), updates.end());
      out.weights = foolsgold_weights(histories, spec.foolsgold_epsilon);
      break;
    case DefenseSpec::Kind::clip_noise: {
      double threshold = 0.0;
      if (spec.clip_threshold) {
        threshold = *spec.clip_threshold;
      } else {
        std::vector<double> norms;
        for (const auto& u : updates) norms.push_back(u.l2);
        threshold = median(std::move(norms));
      }
      out.clip_threshold = threshold;
      if (threshold > 0.0) {
        const double sigma = spec.noise_relative ? spec.noise_sigma * threshold : spec.noise_sigma;
        out.updates = clip_and_noise(updates, threshold, sigma, rng);
      } else {
        // A zero threshold clips everything to the zero vector.
        for (const auto& u : updates) out.updates.push_back(AnonymousUpdate::make(u.delta.zeros_like(), u.client_id));
      }
      out.weights.assign(updates.size(), 1.0);
      break;
    }
  }
  return out;
}

}  // namespace fclsim
