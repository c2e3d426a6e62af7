#pragma once

#include "fclsim/numcore.hpp"

namespace fclsim {

enum class UpdateKind { benign, malicious };

/// One round's parameter delta from one client. `kind` is ground truth for
/// bookkeeping only; the aggregation path receives AnonymousUpdate instead.
struct ClientUpdate {
  ParamVector delta;
  int client_id = -1;
  int round = 0;
  UpdateKind kind = UpdateKind::benign;
  bool scaled = false;
  double l2 = 0.0;

  static ClientUpdate make(ParamVector delta, int client_id, int round, UpdateKind kind) {
    ClientUpdate u{std::move(delta), client_id, round, kind, false, 0.0};
    u.l2 = l2_norm(u.delta);
    return u;
  }
};

/// What the server-side aggregation and defenses get to see.
struct AnonymousUpdate {
  ParamVector delta;
  int client_id = -1;
  double l2 = 0.0;

  static AnonymousUpdate from(const ClientUpdate& u) { return {u.delta, u.client_id, u.l2}; }
  static AnonymousUpdate make(ParamVector delta, int client_id) {
    AnonymousUpdate u{std::move(delta), client_id, 0.0};
    u.l2 = l2_norm(u.delta);
    return u;
  }
};

struct ClientTag {
  int client_id = -1;
  int round = 0;
};

}  // namespace fclsim
