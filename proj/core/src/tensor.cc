#include "coscale/tensor.h"

#include <cmath>

#include "coscale/errors.h"

namespace coscale {

double FeatureMap::l2_norm() const {
  double sum = 0.0;
  for (double v : data_) sum += v * v;
  return std::sqrt(sum);
}

FeatureMap& FeatureMap::operator+=(const FeatureMap& other) {
  require(side_ == other.side_ && channels_ == other.channels_, ErrorKind::kShape,
          "feature map add with mismatched shapes");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

FeatureMap& FeatureMap::operator-=(const FeatureMap& other) {
  require(side_ == other.side_ && channels_ == other.channels_, ErrorKind::kShape,
          "feature map subtract with mismatched shapes");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

}  // namespace coscale
