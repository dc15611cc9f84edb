#pragma once

#include "styleshift/autograd.hpp"

#include <stdexcept>
#include <string>

namespace styleshift {

enum class Domain { source, target };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

/// Throws unless `pixels` is a finite (N >= 1, 3, R, R) tensor.
template <typename Scalar>
void validate_images(const Tensor<Scalar>& pixels) {
  if (pixels.rank() != 4) throw std::invalid_argument("image batch must be rank 4, got " + shape_string(pixels.shape()));
  if (pixels.dim(0) < 1) throw std::invalid_argument("image batch is empty");
  if (pixels.dim(1) != 3) throw std::invalid_argument("image batch must have 3 channels");
  if (pixels.dim(2) != pixels.dim(3)) throw std::invalid_argument("image batch must be square, got " + shape_string(pixels.shape()));
  if (!pixels.all_finite()) throw std::invalid_argument("image batch contains non-finite values");
}

/// Images in (N, 3, R, R) layout with values in [-1, 1].
template <typename Scalar>
struct ImageBatch {
  Tensor<Scalar> pixels;
  Domain domain = Domain::source;

  ImageBatch() = default;
  ImageBatch(Tensor<Scalar> p, Domain d) : pixels(std::move(p)), domain(d) { validate_images(pixels); }

  Index size() const { return pixels.dim(0); }
  Index resolution() const { return pixels.dim(2); }
  Var<Scalar> var() const { return Var<Scalar>::constant(pixels); }
};

}  // namespace styleshift
