#include "ipf/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ipf/random.hpp"

namespace ipf::nn {

const GradCheckEntry* GradCheckResult::worst() const {
  if (entries.empty()) return nullptr;
  return &*std::max_element(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    return a.rel_error < b.rel_error;
  });
}

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

template <typename T>
double evaluate_loss(const LossBuilder<T>& build, const ParamStore<T>& params) {
  Tape<T> tape(&params);
  return static_cast<double>(tape.scalar(build(tape)));
}

template <typename T>
Gradients<T> analytic_gradients(const LossBuilder<T>& build, const ParamStore<T>& params) {
  Tape<T> tape(&params);
  tape.backward(build(tape));
  return tape.param_grads();
}

template <typename T>
double central_difference(const LossBuilder<T>& build, ParamStore<T>& params, std::size_t param,
                          std::size_t offset, double epsilon) {
  auto w = params.data(param);
  const T original = w[offset];
  w[offset] = static_cast<T>(static_cast<double>(original) + epsilon);
  const T up = w[offset];
  const double plus = evaluate_loss(build, params);
  w[offset] = static_cast<T>(static_cast<double>(original) - epsilon);
  const T down = w[offset];
  const double minus = evaluate_loss(build, params);
  w[offset] = original;
  // Divide by the step actually taken after rounding to T.
  return (plus - minus) / (static_cast<double>(up) - static_cast<double>(down));
}

template <typename T>
double central_difference4(const LossBuilder<T>& build, ParamStore<T>& params, std::size_t param,
                           std::size_t offset, double h) {
  auto w = params.data(param);
  const T original = w[offset];
  auto at = [&](double k) {
    w[offset] = static_cast<T>(static_cast<double>(original) + k * h);
    return evaluate_loss(build, params);
  };
  const double numer = -at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0);
  w[offset] = original;
  return numer / (12.0 * h);
}

std::vector<std::size_t> sample_offsets(std::size_t count, const GradCheckOptions& options,
                                        std::uint64_t salt) {
  std::vector<std::size_t> offsets(count);
  for (std::size_t i = 0; i < count; ++i) offsets[i] = i;
  if (options.max_per_param > 0 && count > options.max_per_param) {
    Rng rng(mix_seed(options.seed, salt));
    rng.shuffle(offsets);
    offsets.resize(options.max_per_param);
    std::sort(offsets.begin(), offsets.end());
  }
  return offsets;
}

template <typename T>
GradCheckResult finite_difference_check(const LossBuilder<T>& build, ParamStore<T>& params,
                                        const GradCheckOptions& options) {
  const auto grads = analytic_gradients(build, params);
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params.trainable(p)) continue;
    if (options.include && !options.include(params.name(p))) continue;
    for (std::size_t off : sample_offsets(params.value(p).size(), options, p)) {
      GradCheckEntry e;
      e.param = params.name(p);
      e.offset = off;
      e.analytic = static_cast<double>(grads[p].data[off]);
      e.numeric = options.fourth_order
                      ? central_difference4(build, params, p, off, options.epsilon)
                      : central_difference(build, params, p, off, options.epsilon);
      e.rel_error = relative_error(e.analytic, e.numeric, options.abs_floor);
      result.max_rel_error = std::max(result.max_rel_error, e.rel_error);
      result.entries.push_back(std::move(e));
    }
  }
  return result;
}

template double evaluate_loss(const LossBuilder<float>&, const ParamStore<float>&);
template double evaluate_loss(const LossBuilder<double>&, const ParamStore<double>&);
template Gradients<float> analytic_gradients(const LossBuilder<float>&, const ParamStore<float>&);
template Gradients<double> analytic_gradients(const LossBuilder<double>&, const ParamStore<double>&);
template double central_difference(const LossBuilder<float>&, ParamStore<float>&, std::size_t,
                                   std::size_t, double);
template double central_difference(const LossBuilder<double>&, ParamStore<double>&, std::size_t,
                                   std::size_t, double);
template double central_difference4(const LossBuilder<float>&, ParamStore<float>&, std::size_t,
                                    std::size_t, double);
template double central_difference4(const LossBuilder<double>&, ParamStore<double>&, std::size_t,
                                    std::size_t, double);
template GradCheckResult finite_difference_check(const LossBuilder<float>&, ParamStore<float>&,
                                                 const GradCheckOptions&);
template GradCheckResult finite_difference_check(const LossBuilder<double>&, ParamStore<double>&,
                                                 const GradCheckOptions&);

}  // namespace ipf::nn
