#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hmt {

enum class Errc {
  invalid_input,
  invalid_rotation,
  degenerate_6d,
  encode,
  decode,
  fit_failure,
  config,
  uninitialized_codebook,
  invalid_token,
  windowing,
  malformed_block,
  training_diverged,
  behind_camera,
  augment_range,
  mode,
  shape_mismatch,
  degenerate_frame,
  serialization,
  ingest,
  balance,
  io,
  usage,
};

std::string_view errc_name(Errc code) noexcept;

/// Process exit code for an error category: 2 usage, 4 numeric divergence,
/// 3 for everything data-related.
int exit_code_for(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace hmt
