#pragma once

#include <span>
#include <vector>

#include "coscale/schedule.h"
#include "coscale/tensor.h"

namespace coscale::finetune {

// Row-per-token logits for each scale.
using ScaleLogits = std::vector<MatrixD>;

struct LossReport {
  double total = 0.0;
  std::vector<double> per_scale;  // unweighted per-token-mean term of each scale
  std::vector<double> weights;    // weight applied to each scale
  double lambda_used = 1.0;       // weight on the drafting scales
};

// Sum over scales k < n of the per-token mean cross-entropy against `targets`.
// Scales >= n get weight 0. Throws kContract when fewer than n scales of
// logits are supplied.
LossReport drafter_loss(const ScaleLogits& logits, const TokenPyramid& targets, int n);

// 1 - ep / total_ep. Throws kRange unless 0 <= ep <= total_ep and total_ep >= 1.
double lambda_schedule(int ep, int total_ep);

// Sum over all scales of w_k * mean_tokens KL(softmax(student_k) || softmax(teacher_k)),
// w_k = lambda(ep) for k < n, 1 otherwise.
LossReport refiner_loss(const ScaleLogits& student, const ScaleLogits& teacher, int ep,
                        int total_ep, int n);

// Gradients of the losses above with respect to the (student) logits.
//
// Cross-entropy of one row:   d/dz_j = (p_j - [j == target]) / T
// KL(p || q), p = softmax(z):  d/dz_j = p_j * ((log p_j - log q_j) - KL(p || q)) / T
//
// where T is the scale's token count (mean reduction), times the scale weight.
ScaleLogits drafter_loss_grad(const ScaleLogits& logits, const TokenPyramid& targets, int n);
ScaleLogits refiner_loss_grad(const ScaleLogits& student, const ScaleLogits& teacher, int ep,
                              int total_ep, int n);

// Numerically stable log-softmax of one row.
std::vector<double> log_softmax(std::span<const double> z);

}  // namespace coscale::finetune
