#pragma once

// Unit tensors, unit / auxiliary representations and the divergence metric
// that gates every protocol decision.

#include <cstddef>
#include <span>
#include <vector>

#include "uapdfl/nn.hpp"

namespace uapdfl::repr {

inline constexpr double kDefaultUnitFill = 1.0;
inline constexpr double kDefaultEps = 1e-12;

// How a unit tensor's entries are produced. Only constant fill is honored;
// `mean_of_subset` is accepted and rejected at construction.
enum class FillKind { constant, mean_of_subset };

struct UnitTensor {
  std::vector<double> values;
  FillKind fill_kind = FillKind::constant;
  double fill = kDefaultUnitFill;

  std::size_t size() const noexcept { return values.size(); }
  bool operator==(const UnitTensor&) const = default;
};

// Probability vector over classes.
struct UnitRep {
  std::vector<double> probs;
  bool operator==(const UnitRep&) const = default;
};

// Feature-extractor output on the unit tensor.
struct AuxRep {
  std::vector<double> features;
  bool operator==(const AuxRep&) const = default;
};

UnitTensor make_unit_tensor(std::size_t shape, double fill = kDefaultUnitFill,
                            FillKind kind = FillKind::constant);

// softmax(forward(model, u)).
UnitRep unit_representation(const nn::LayeredModel& model, const UnitTensor& u);

// feature_forward(model, u).
AuxRep aux_representation(const nn::LayeredModel& model, const UnitTensor& u);

// sum_o p_o ln(p_o / q_o) after clamping both inputs to >= eps and
// renormalizing.
double kl_div(std::span<const double> p, std::span<const double> q, double eps = kDefaultEps);
double kl_div(const UnitRep& p, const UnitRep& q, double eps = kDefaultEps);

// Symmetrized KL: 0.5 KL(p||q) + 0.5 KL(q||p). Note this is the Jeffreys
// form rather than the midpoint-mixture Jensen-Shannon divergence.
double js_div(std::span<const double> p, std::span<const double> q, double eps = kDefaultEps);
double js_div(const UnitRep& p, const UnitRep& q, double eps = kDefaultEps);

}  // namespace uapdfl::repr
