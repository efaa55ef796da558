#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ipf/nn/tape.hpp"

namespace ipf::nn {

// Builds a scalar loss on the supplied tape from its ParamStore.
template <typename T>
using LossBuilder = std::function<Var(Tape<T>&)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  bool fourth_order = false;
  // Entries larger than this are checked on a random subsample of this many
  // offsets; 0 checks everything.
  std::size_t max_per_param = 0;
  std::uint64_t seed = 0;
  // Denominator floor: rel = |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-10;
  // Optional predicate on parameter names.
  std::function<bool(const std::string&)> include;
};

struct GradCheckEntry {
  std::string param;
  std::size_t offset = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
  const GradCheckEntry* worst() const;
};

double relative_error(double analytic, double numeric, double abs_floor);

template <typename T>
double evaluate_loss(const LossBuilder<T>& build, const ParamStore<T>& params);

template <typename T>
Gradients<T> analytic_gradients(const LossBuilder<T>& build, const ParamStore<T>& params);

// (L(w + eps e_i) - L(w - eps e_i)) / (2 eps) for one scalar; restores w.
template <typename T>
double central_difference(const LossBuilder<T>& build, ParamStore<T>& params, std::size_t param,
                          std::size_t offset, double epsilon);

// Fourth-order stencil
// (-L(w + 2h) + 8 L(w + h) - 8 L(w - h) + L(w - 2h)) / (12 h); restores w.
template <typename T>
double central_difference4(const LossBuilder<T>& build, ParamStore<T>& params, std::size_t param,
                           std::size_t offset, double h);

// Offsets of `param` selected for checking under the options' sampling rule.
std::vector<std::size_t> sample_offsets(std::size_t count, const GradCheckOptions& options,
                                        std::uint64_t salt);

// Compares reverse-mode gradients against central differences over every
// selected trainable scalar; returns the worst relative error.
template <typename T>
GradCheckResult finite_difference_check(const LossBuilder<T>& build, ParamStore<T>& params,
                                        const GradCheckOptions& options = {});

}  // namespace ipf::nn
