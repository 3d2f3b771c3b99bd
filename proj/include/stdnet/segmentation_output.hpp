#pragma once

#include <vector>

#include "stdnet/tensor.hpp"

namespace stdnet {

/// Per-class probability maps produced by the segmenter. `fused` is the
/// mean of the side outputs; every side output is already upsampled to the
/// fused resolution.
template <typename Scalar>
struct SegmentationOutput {
  Tensor<Scalar> fused;
  std::vector<Tensor<Scalar>> side_outputs;

  int classes() const { return fused.c(); }
};

}  // namespace stdnet
