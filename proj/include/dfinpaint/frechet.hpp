// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "dfinpaint/common.hpp"

namespace dfi {

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased (n - 1)
};

inline GaussianFit fit_gaussian(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) throw ParameterError("frechet: need at least 2 feature vectors for a covariance");
  const std::size_t dim = features[0].size();
  if (dim == 0) throw DimensionError("frechet: empty feature vectors");
  Eigen::MatrixXd x(features.size(), dim);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != dim) throw DimensionError("frechet: ragged feature vectors");
    for (std::size_t j = 0; j < dim; ++j) {
      if (!std::isfinite(features[i][j])) throw NumericError("frechet: non-finite feature");
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = features[i][j];
    }
  }
  GaussianFit g;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
  g.cov = centered.transpose() * centered / static_cast<double>(features.size() - 1);
  return g;
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

// Tr (A B)^(1/2) = Tr (A^(1/2) B A^(1/2))^(1/2)
inline double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::MatrixXd s = psd_sqrt(a);
  const Eigen::MatrixXd inner = s * b * s;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).
/// The trace term averages both factor orders so the result is exactly
/// symmetric in its arguments despite eigenvalue clamping.
inline double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.mean.size() != b.mean.size()) throw DimensionError("frechet: feature dims differ");
  const double tr_sqrt = 0.5 * (trace_sqrt_product(a.cov, b.cov) + trace_sqrt_product(b.cov, a.cov));
  const double d = (a.mean - b.mean).squaredNorm() + (a.cov.trace() + b.cov.trace()) - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

inline double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  return frechet_distance(fit_gaussian(a), fit_gaussian(b));
}

}  // namespace dfi
