#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace edgedepth {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Vector2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

using Index = Eigen::Index;

enum class ErrorKind {
  InvalidArgument,
  PointBehindCamera,
  DegenerateEdge,
  TooFewKeypoints,
  NoValidCandidates,
  ShapeMismatch,
  NonFiniteGradient,
  NonFiniteLoss,
  NonPositiveSigma,
  UnprojectableInstance,
  IoError,
  ParseError,
  IncompatibleCheckpoint,
  EmptyDataset,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::PointBehindCamera: return "PointBehindCamera";
    case ErrorKind::DegenerateEdge: return "DegenerateEdge";
    case ErrorKind::TooFewKeypoints: return "TooFewKeypoints";
    case ErrorKind::NoValidCandidates: return "NoValidCandidates";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::NonPositiveSigma: return "NonPositiveSigma";
    case ErrorKind::UnprojectableInstance: return "UnprojectableInstance";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

/// Number of unordered pairs among n items.
constexpr Index pair_count(Index n) { return n < 2 ? 0 : n * (n - 1) / 2; }

/// splitmix64 finalizer; derives independent per-item seeds from a base seed.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace edgedepth
