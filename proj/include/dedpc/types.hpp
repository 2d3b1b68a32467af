#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

namespace dedpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Frequency deviations are carried in rad/s internally and reported in Hz.
inline constexpr double hz_to_rad(double hz) { return kTwoPi * hz; }
inline constexpr double rad_to_hz(double rad) { return rad / kTwoPi; }

}  // namespace dedpc
