#include "coscale/finetune.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "coscale/errors.h"

namespace coscale::finetune {
namespace {

void check_scale(const MatrixD& logits, const TokenMap& target, int k) {
  require(logits.rows() == target.tokens.size(), ErrorKind::kContract,
          "scale " + std::to_string(k) + ": logit rows do not match target tokens");
  require(logits.cols() > 0, ErrorKind::kContract, "empty vocabulary");
  for (auto t : target.tokens) {
    require(t >= 0 && static_cast<std::size_t>(t) < logits.cols(), ErrorKind::kRange,
            "target token outside vocabulary");
  }
}

void check_pair(const ScaleLogits& student, const ScaleLogits& teacher) {
  require(student.size() == teacher.size(), ErrorKind::kContract,
          "student and teacher cover different scale counts");
  for (std::size_t k = 0; k < student.size(); ++k) {
    require(student[k].rows() == teacher[k].rows() && student[k].cols() == teacher[k].cols() &&
                student[k].rows() > 0 && student[k].cols() > 0,
            ErrorKind::kContract, "scale " + std::to_string(k) + ": logit shapes differ");
  }
}

std::vector<double> refiner_weights(std::size_t scales, double lambda, int n) {
  std::vector<double> w(scales);
  for (std::size_t k = 0; k < scales; ++k) w[k] = static_cast<int>(k) < n ? lambda : 1.0;
  return w;
}

double row_kl(std::span<const double> lp, std::span<const double> lq) {
  double kl = 0.0;
  for (std::size_t j = 0; j < lp.size(); ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
  return kl;
}

}  // namespace

std::vector<double> log_softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

LossReport drafter_loss(const ScaleLogits& logits, const TokenPyramid& targets, int n) {
  require(n >= 0, ErrorKind::kRange, "negative drafting steps");
  require(static_cast<int>(logits.size()) >= n && targets.num_scales() >= n,
          ErrorKind::kContract, "logits/targets missing for a drafting scale");
  LossReport report;
  const std::size_t K = std::max<std::size_t>(logits.size(), static_cast<std::size_t>(n));
  report.per_scale.assign(K, 0.0);
  report.weights.assign(K, 0.0);
  for (int k = 0; k < n; ++k) {
    check_scale(logits[k], targets.maps[k], k);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits[k].rows(); ++i) {
      sum -= log_softmax(logits[k].row(i))[targets.maps[k].tokens[i]];
    }
    report.per_scale[k] = sum / static_cast<double>(logits[k].rows());
    report.weights[k] = 1.0;
    report.total += report.per_scale[k];
  }
  return report;
}

double lambda_schedule(int ep, int total_ep) {
  require(total_ep >= 1 && ep >= 0 && ep <= total_ep, ErrorKind::kRange,
          "epoch " + std::to_string(ep) + " outside [0, " + std::to_string(total_ep) + "]");
  return 1.0 - static_cast<double>(ep) / total_ep;
}

LossReport refiner_loss(const ScaleLogits& student, const ScaleLogits& teacher, int ep,
                        int total_ep, int n) {
  check_pair(student, teacher);
  LossReport report;
  report.lambda_used = lambda_schedule(ep, total_ep);
  report.weights = refiner_weights(student.size(), report.lambda_used, n);
  report.per_scale.assign(student.size(), 0.0);
  for (std::size_t k = 0; k < student.size(); ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < student[k].rows(); ++i) {
      sum += row_kl(log_softmax(student[k].row(i)), log_softmax(teacher[k].row(i)));
    }
    report.per_scale[k] = sum / static_cast<double>(student[k].rows());
    report.total += report.weights[k] * report.per_scale[k];
  }
  return report;
}

ScaleLogits drafter_loss_grad(const ScaleLogits& logits, const TokenPyramid& targets, int n) {
  require(n >= 0, ErrorKind::kRange, "negative drafting steps");
  require(static_cast<int>(logits.size()) >= n && targets.num_scales() >= n,
          ErrorKind::kContract, "logits/targets missing for a drafting scale");
  ScaleLogits grad;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    MatrixD g(logits[k].rows(), logits[k].cols(), 0.0);
    if (static_cast<int>(k) < n) {
      check_scale(logits[k], targets.maps[k], static_cast<int>(k));
      const double inv_t = 1.0 / static_cast<double>(logits[k].rows());
      for (std::size_t i = 0; i < logits[k].rows(); ++i) {
        const auto lp = log_softmax(logits[k].row(i));
        auto gr = g.row(i);
        for (std::size_t j = 0; j < lp.size(); ++j) gr[j] = std::exp(lp[j]) * inv_t;
        gr[targets.maps[k].tokens[i]] -= inv_t;
      }
    }
    grad.push_back(std::move(g));
  }
  return grad;
}

ScaleLogits refiner_loss_grad(const ScaleLogits& student, const ScaleLogits& teacher, int ep,
                              int total_ep, int n) {
  check_pair(student, teacher);
  const auto weights = refiner_weights(student.size(), lambda_schedule(ep, total_ep), n);
  ScaleLogits grad;
  for (std::size_t k = 0; k < student.size(); ++k) {
    MatrixD g(student[k].rows(), student[k].cols(), 0.0);
    if (weights[k] != 0.0) {
      const double scale = weights[k] / static_cast<double>(student[k].rows());
      for (std::size_t i = 0; i < student[k].rows(); ++i) {
        const auto lp = log_softmax(student[k].row(i));
        const auto lq = log_softmax(teacher[k].row(i));
        const double kl = row_kl(lp, lq);
        auto gr = g.row(i);
        for (std::size_t j = 0; j < lp.size(); ++j) {
          gr[j] = scale * std::exp(lp[j]) * ((lp[j] - lq[j]) - kl);
        }
      }
    }
    grad.push_back(std::move(g));
  }
  return grad;
}

}  // namespace coscale::finetune
