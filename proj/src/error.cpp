#include "hmt/error.hpp"

namespace hmt {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_input: return "invalid_input";
    case Errc::invalid_rotation: return "invalid_rotation";
    case Errc::degenerate_6d: return "degenerate_6d";
    case Errc::encode: return "encode";
    case Errc::decode: return "decode";
    case Errc::fit_failure: return "fit_failure";
    case Errc::config: return "config";
    case Errc::uninitialized_codebook: return "uninitialized_codebook";
    case Errc::invalid_token: return "invalid_token";
    case Errc::windowing: return "windowing";
    case Errc::malformed_block: return "malformed_block";
    case Errc::training_diverged: return "training_diverged";
    case Errc::behind_camera: return "behind_camera";
    case Errc::augment_range: return "augment_range";
    case Errc::mode: return "mode";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::degenerate_frame: return "degenerate_frame";
    case Errc::serialization: return "serialization";
    case Errc::ingest: return "ingest";
    case Errc::balance: return "balance";
    case Errc::io: return "io";
    case Errc::usage: return "usage";
  }
  return "unknown";
}

int exit_code_for(Errc code) noexcept {
  switch (code) {
    case Errc::usage: return 2;
    case Errc::training_diverged:
    case Errc::fit_failure: return 4;
    default: return 3;
  }
}

}  // namespace hmt
