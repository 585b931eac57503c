#include "hmt/synth.hpp"

#include "hmt/rotations.hpp"

#include <cmath>
#include <numbers>

namespace hmt {

namespace {

struct Oscillator {
  double freq = 0.0;
  double phase = 0.0;

  double at(double t) const { return std::sin(2.0 * std::numbers::pi * freq * t + phase); }
};

Oscillator random_oscillator(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(0.0, 2.0 * std::numbers::pi)};
}

}  // namespace

std::vector<HandPose> synthesize_motion(Rng& rng, int frames, double fps, Side side) {
  constexpr int kDrivers = 3;
  Oscillator drivers[kDrivers];
  for (auto& d : drivers) d = random_oscillator(rng, 0.2, 1.2);

  double base[kNumArticulated];
  double mix[kNumArticulated][kDrivers];
  double spread[kNumArticulated];
  for (int j = 0; j < kNumArticulated; ++j) {
    base[j] = rng.uniform(0.1, 0.6);
    for (auto& m : mix[j]) m = rng.uniform(-0.25, 0.25);
    spread[j] = (j % 3 == 0) ? rng.uniform(-0.15, 0.15) : 0.0;  // abduction at the knuckle
  }

  const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
  const Mat3 wrist_base = axis_angle_to_matrix({rng.uniform(0.0, 2.5) * axis});
  const Oscillator sway[3] = {random_oscillator(rng, 0.1, 0.6), random_oscillator(rng, 0.1, 0.6),
                              random_oscillator(rng, 0.1, 0.6)};
  const double sway_amp = rng.uniform(0.05, 0.35);
  const Vec3 center(rng.uniform(-0.15, 0.15), rng.uniform(-0.1, 0.1), rng.uniform(0.35, 0.7));
  const Oscillator drift[3] = {random_oscillator(rng, 0.05, 0.4), random_oscillator(rng, 0.05, 0.4),
                               random_oscillator(rng, 0.05, 0.4)};
  const double drift_amp = rng.uniform(0.01, 0.06);
  ShapeVec beta;
  for (int i = 0; i < kNumShape; ++i) beta[i] = rng.uniform(-1.0, 1.0);

  std::vector<HandPose> out(static_cast<std::size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    const double t = f / fps;
    HandPose& p = out[static_cast<std::size_t>(f)];
    p.side = side;
    p.beta = beta;
    for (int j = 0; j < kNumArticulated; ++j) {
      double flex = base[j];
      for (int k = 0; k < kDrivers; ++k) flex += mix[j][k] * drivers[k].at(t);
      p.theta[static_cast<std::size_t>(j)] = {Vec3(0.0, spread[j], flex)};
    }
    const Vec3 w(sway[0].at(t), sway[1].at(t), sway[2].at(t));
    p.r_rot = matrix_to_axis_angle(wrist_base * axis_angle_to_matrix({sway_amp * w}));
    p.tau = center + drift_amp * Vec3(drift[0].at(t), drift[1].at(t), drift[2].at(t));
  }
  return out;
}

}  // namespace hmt
