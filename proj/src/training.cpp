#include "hmt/training.hpp"

#include "hmt/error.hpp"
#include "hmt/metrics.hpp"

namespace hmt {

std::vector<LossReport> train_tokenizer(PartTokenizer& tok, std::span<const FeatureSequence> windows,
                                        const TrainOptions& opts, const TrainSchedule& schedule, const Rng& rng,
                                        const TrainProgress& progress) {
  if (windows.empty()) fail(Errc::invalid_input, "training needs at least one window");
  if (schedule.steps < 0 || schedule.batch < 1) fail(Errc::config, "training schedule needs steps >= 0, batch >= 1");
  Trainer trainer(tok, opts, rng.split("trainer"));
  trainer.initialize(windows);
  Rng draw = rng.split("batches");
  std::vector<LossReport> history;
  std::vector<FeatureSequence> batch(static_cast<std::size_t>(schedule.batch));
  for (int s = 0; s < schedule.steps; ++s) {
    for (auto& b : batch) b = windows[draw.below(windows.size())];
    history.push_back(trainer.step(batch));
    if (progress) progress(s, history.back());
  }
  return history;
}

double reconstruction_mpjpe(const PartTokenizer& tok, std::span<const std::vector<HandPose>> windows,
                            const HandSkeleton& skel) {
  if (windows.empty()) fail(Errc::invalid_input, "no windows to evaluate");
  const auto& cfg = tok.config();
  std::vector<Joints21> truth, recon;
  for (const auto& w : windows) {
    const FeatureSequence fs = encode_feature(w, cfg.variant, skel, cfg.fps);
    const auto ids = tokenize_window(fs, tok);
    const auto decoded = decode_feature(detokenize_window(ids, tok, fs.beta_ref, fs.side));
    for (std::size_t t = 0; t < w.size(); ++t) {
      truth.push_back(forward_kinematics(w[t], skel));
      recon.push_back(forward_kinematics(decoded[t], skel));
    }
  }
  return mpjpe(recon, truth);
}

}  // namespace hmt
