#pragma once

#include "hmt/tokenizer.hpp"

#include <functional>
#include <span>
#include <vector>

namespace hmt {

struct TrainSchedule {
  int steps = 600;
  int batch = 256;  // windows drawn with replacement per step
};

using TrainProgress = std::function<void(int step, const LossReport& loss)>;

/// Data-driven initialization on every window, then `steps` optimizer steps.
/// Returns the pre-step loss of each step.
std::vector<LossReport> train_tokenizer(PartTokenizer& tok, std::span<const FeatureSequence> windows,
                                        const TrainOptions& opts, const TrainSchedule& schedule, const Rng& rng,
                                        const TrainProgress& progress = {});

/// Mean per-joint error in cm between each pose window and its
/// tokenize/detokenize reconstruction. Windows must be `fps` frames long.
double reconstruction_mpjpe(const PartTokenizer& tok, std::span<const std::vector<HandPose>> windows,
                            const HandSkeleton& skel);

}  // namespace hmt
