#pragma once

#include "hmt/mano.hpp"
#include "hmt/rng.hpp"

#include <vector>

namespace hmt {

/// Smooth procedural hand motion for tests, demos and the acceptance run.
/// Finger flexion is driven by a few shared oscillators mixed per joint, the
/// wrist sways around a random orientation and drifts around a point in front
/// of the camera. Shape is constant over the sequence.
std::vector<HandPose> synthesize_motion(Rng& rng, int frames, double fps, Side side = Side::right);

}  // namespace hmt
