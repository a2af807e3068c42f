#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include "evnas/dataset.hpp"
#include "evnas/evolution.hpp"
#include "evnas/nn_ops.hpp"
#include "evnas/supernet.hpp"

namespace evnas {

/// Cosine annealing without restarts over a fixed step horizon.
struct CosineSchedule {
  double lr_max = 0.025;
  double lr_min = 0.001;
  long total_steps = 1;

  double at(long step) const {
    if (step >= total_steps) return lr_min;
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * step / total_steps));
  }
};

/// SGD with momentum and weight decay; velocity buffers are aligned with the
/// canonical parameter order they were attached to.
struct OptimizerState {
  CosineSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  long step = 0;
  std::vector<Tensor> velocity;

  void attach(const std::vector<Param*>& params) {
    velocity.clear();
    velocity.reserve(params.size());
    for (const Param* p : params) velocity.emplace_back(p->value.shape);
  }
};

enum class LossKind { softmax_cross_entropy };

struct TrainPlan {
  int batches_per_generation = 100;
  int batch_size = 8;
  LossKind loss = LossKind::softmax_cross_entropy;
  std::optional<double> grad_clip;  // global L2 norm threshold

  void validate() const {
    if (batches_per_generation < 0) throw std::invalid_argument("TrainPlan: batches_per_generation must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainPlan: batch_size must be >= 1");
    if (grad_clip && *grad_clip <= 0.0) throw std::invalid_argument("TrainPlan: grad_clip must be positive");
  }
};

/// v <- momentum*v + (grad + wd*param); param <- param - lr*v. Gradients are
/// zeroed afterward and the schedule advances one step.
inline void sgd_step(OptimizerState& opt, const std::vector<Param*>& params,
                     std::optional<double> grad_clip = std::nullopt) {
  if (opt.velocity.empty()) opt.attach(params);
  if (opt.velocity.size() != params.size())
    throw std::invalid_argument("sgd_step: optimizer is attached to a different parameter set");

  double scale = 1.0;
  if (grad_clip) {
    double sq = 0.0;
    for (const Param* p : params)
      for (float g : p->grad.data) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > *grad_clip) scale = *grad_clip / norm;
  }

  const double lr = opt.schedule.at(opt.step);
  for (size_t i = 0; i < params.size(); ++i) {
    Param* p = params[i];
    if (!p->grad_live)
      throw std::invalid_argument("sgd_step: missing gradient on learnable parameter " + std::to_string(i));
    Tensor& v = opt.velocity[i];
    for (size_t j = 0; j < v.data.size(); ++j) {
      const double g = scale * p->grad.data[j] + opt.weight_decay * p->value.data[j];
      const double vel = opt.momentum * v.data[j] + g;
      v.data[j] = static_cast<float>(vel);
      p->value.data[j] = static_cast<float>(p->value.data[j] - lr * vel);
    }
    p->zero_grad();
  }
  ++opt.step;
}

struct TrainStepLog {
  long step = 0;
  int generation = 0;
  int individual_index = 0;
  double loss = 0.0;
  double lr = 0.0;
};

using TrainLogFn = std::function<void(const TrainStepLog&)>;

/// One generation of round-robin weight-inheritance training: batch i trains
/// the supernet under individual (i mod N)'s parameters. Supernet weights are
/// updated in place; the individuals' alphas are never modified.
inline void train_generation(Supernet& net, const Population& pop, const TrainPlan& plan, OptimizerState& opt,
                             BatchStream& data, const EvolutionConfig& cfg, const TrainLogFn& log = {}) {
  plan.validate();
  if (pop.size() == 0) throw std::invalid_argument("train_generation: empty population");
  if (plan.batches_per_generation > 0 && data.dataset_size() == 0)
    throw std::invalid_argument("train_generation: empty training stream");

  const auto params = net.parameters();
  const int n = pop.size();
  for (int i = 0; i < plan.batches_per_generation; ++i) {
    const int individual = i % n;
    const ArchParam& alpha = pop.individuals[static_cast<size_t>(individual)].alpha;
    const double lr = opt.schedule.at(opt.step);

    double loss_value = 0.0;
    const Batch batch = data.next();
    auto step_with = [&](const CellParams& cell_params) {
      const int logits = net.forward_train(batch.images, cell_params);
      const int loss = softmax_cross_entropy(net.tape(), logits, batch.labels);
      loss_value = net.tape().value(loss).data[0];
      if (!std::isfinite(loss_value)) throw std::runtime_error("non-finite loss");
      net.backward(loss);
      sgd_step(opt, params, plan.grad_clip);
      net.clear_tape();
    };
    try {
      if (cfg.use_decode_in_training) {
        const DecodedParam decoded = decode(alpha, cfg.decode_k, net.config().topology, net.config().ops);
        step_with(view(decoded));
      } else {
        step_with(view(alpha));
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("train_generation: aborted at batch " + std::to_string(i) + " of generation " +
                               std::to_string(pop.generation) + ": " + e.what());
    }

    if (log) log({opt.step - 1, pop.generation, individual, loss_value, lr});
  }
}

}  // namespace evnas
