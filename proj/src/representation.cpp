#include "uapdfl/representation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "uapdfl/errors.hpp"

namespace uapdfl::repr {

namespace {

std::vector<double> clamp_normalize(std::span<const double> p, double eps) {
  std::vector<double> out(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!std::isfinite(p[i])) throw NumericError("probability vector has non-finite entries");
    out[i] = std::max(p[i], eps);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

double kl_clamped(const std::vector<double>& p, const std::vector<double>& q) {
  double acc = 0.0;
  for (std::size_t o = 0; o < p.size(); ++o) acc += p[o] * std::log(p[o] / q[o]);
  return acc;
}

void check_pair(std::span<const double> p, std::span<const double> q, double eps) {
  if (p.size() != q.size()) {
    throw ShapeError("divergence of vectors with lengths " + std::to_string(p.size()) + " and " +
                     std::to_string(q.size()));
  }
  if (p.empty()) throw ShapeError("divergence of empty vectors");
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
}

nn::Matrix as_batch(const nn::LayeredModel& model, const UnitTensor& u) {
  if (u.size() != model.input_dim()) {
    throw ShapeError("unit tensor length " + std::to_string(u.size()) + " != model input_dim " +
                     std::to_string(model.input_dim()));
  }
  return nn::Matrix::from_row(u.values);
}

}  // namespace

UnitTensor make_unit_tensor(std::size_t shape, double fill, FillKind kind) {
  if (shape == 0) throw ShapeError("unit tensor shape must be positive");
  if (kind != FillKind::constant) {
    throw ConfigError("only constant-fill unit tensors are supported", "unit_fill");
  }
  if (!std::isfinite(fill)) throw NumericError("unit tensor fill must be finite");
  return {std::vector<double>(shape, fill), kind, fill};
}

UnitRep unit_representation(const nn::LayeredModel& model, const UnitTensor& u) {
  const auto logits = nn::forward(model, as_batch(model, u));
  return {nn::softmax(logits.row(0))};
}

AuxRep aux_representation(const nn::LayeredModel& model, const UnitTensor& u) {
  const auto f = nn::feature_forward(model, as_batch(model, u));
  const auto row = f.row(0);
  return {{row.begin(), row.end()}};
}

double kl_div(std::span<const double> p, std::span<const double> q, double eps) {
  check_pair(p, q, eps);
  return kl_clamped(clamp_normalize(p, eps), clamp_normalize(q, eps));
}

double kl_div(const UnitRep& p, const UnitRep& q, double eps) { return kl_div(p.probs, q.probs, eps); }

double js_div(std::span<const double> p, std::span<const double> q, double eps) {
  check_pair(p, q, eps);
  const auto pc = clamp_normalize(p, eps);
  const auto qc = clamp_normalize(q, eps);
  // Summed term by term in a fixed order so that js_div(p,q) == js_div(q,p).
  double acc = 0.0;
  for (std::size_t o = 0; o < pc.size(); ++o) {
    acc += 0.5 * ((pc[o] - qc[o]) * std::log(pc[o] / qc[o]));
  }
  return acc;
}

double js_div(const UnitRep& p, const UnitRep& q, double eps) { return js_div(p.probs, q.probs, eps); }

}  // namespace uapdfl::repr
