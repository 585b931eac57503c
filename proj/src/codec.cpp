#include "hmt/codec.hpp"

#include "hmt/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace hmt {

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::standard(int motion_codes, int block_size, int text_size) {
  Vocabulary v;
  v.text = {0, text_size};
  v.mot_open = text_size;
  v.mot_close = text_size + 1;
  v.img_open = text_size + 2;
  v.img_close = text_size + 3;
  v.img_context = text_size + 4;
  v.eos = text_size + 5;
  v.motion = {text_size + 6, text_size + 6 + motion_codes};
  v.block_size = block_size;
  v.validate();
  return v;
}

int Vocabulary::size() const {
  return std::max({text.end, motion.end, mot_open + 1, mot_close + 1, img_open + 1, img_close + 1, img_context + 1,
                   eos + 1});
}

TokenClass Vocabulary::classify(int id) const {
  if (text.contains(id)) return TokenClass::text;
  if (motion.contains(id)) return TokenClass::motion;
  if (id == mot_open) return TokenClass::mot_open;
  if (id == mot_close) return TokenClass::mot_close;
  if (id == img_open) return TokenClass::img_open;
  if (id == img_close) return TokenClass::img_close;
  if (id == img_context) return TokenClass::img_context;
  if (id == eos) return TokenClass::eos;
  return TokenClass::unknown;
}

void Vocabulary::validate() const {
  auto bad = [](const std::string& what) { fail(Errc::config, "vocabulary: " + what); };
  if (text.begin < 0 || text.size() < 0 || motion.begin < 0 || motion.size() <= 0) bad("invalid ranges");
  if (text.begin < motion.end && motion.begin < text.end && text.size() > 0) bad("text and motion ranges overlap");
  const int specials[] = {mot_open, mot_close, img_open, img_close, img_context, eos};
  for (std::size_t i = 0; i < 6; ++i) {
    if (specials[i] < 0) bad("negative special id");
    if (text.contains(specials[i]) || motion.contains(specials[i])) bad("special id inside a range");
    for (std::size_t j = 0; j < i; ++j) {
      if (specials[i] == specials[j]) bad("duplicate special id");
    }
  }
  if (block_size < 1) bad("block_size must be >= 1");
}

nlohmann::json Vocabulary::to_json() const {
  return {{"text", {text.begin, text.end}},
          {"motion", {motion.begin, motion.end}},
          {"block_size", block_size},
          {"specials",
           {{"<MOT>", mot_open},
            {"</MOT>", mot_close},
            {"<IMG>", img_open},
            {"</IMG>", img_close},
            {"<IMG_CONTEXT>", img_context},
            {"<EOS>", eos}}}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  try {
    auto range = [&](const char* key) {
      const auto& r = j.at(key);
      if (!r.is_array() || r.size() != 2) fail(Errc::config, std::string("vocabulary: '") + key + "' must be [begin, end)");
      return IdRange{r[0].get<int>(), r[1].get<int>()};
    };
    v.text = range("text");
    v.motion = range("motion");
    v.block_size = j.at("block_size").get<int>();
    const auto& s = j.at("specials");
    v.mot_open = s.at("<MOT>").get<int>();
    v.mot_close = s.at("</MOT>").get<int>();
    v.img_open = s.at("<IMG>").get<int>();
    v.img_close = s.at("</IMG>").get<int>();
    v.img_context = s.at("<IMG_CONTEXT>").get<int>();
    v.eos = s.at("<EOS>").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config, std::string("vocabulary: ") + e.what());
  }
  v.validate();
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io, "cannot open vocabulary file " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config, path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Streams

TokenStream serialize_blocks(const MotionTokens& tokens, const Vocabulary& vocab) {
  TokenStream out;
  std::size_t seconds = 0;
  for (const auto& h : tokens.hands) seconds = std::max(seconds, h.seconds.size());
  for (const auto& h : tokens.hands) {
    if (h.seconds.size() != seconds) fail(Errc::serialization, "hands cover different numbers of seconds");
  }
  for (std::size_t s = 0; s < seconds; ++s) {
    for (std::size_t h = 0; h < tokens.hands.size(); ++h) {
      const auto& block = tokens.hands[h].seconds[s];
      if (static_cast<int>(block.size()) != vocab.block_size) {
        fail(Errc::serialization, "hand " + std::to_string(h) + " second " + std::to_string(s) + " has " +
                                      std::to_string(block.size()) + " tokens, block size is " +
                                      std::to_string(vocab.block_size));
      }
      out.ids.push_back(vocab.mot_open);
      for (int k : block) {
        if (k < 0 || k >= vocab.motion.size()) {
          fail(Errc::serialization, "motion code " + std::to_string(k) + " outside the vocabulary's motion range");
        }
        out.ids.push_back(vocab.motion.begin + k);
      }
      out.ids.push_back(vocab.mot_close);
    }
  }
  return out;
}

ParseResult parse_stream(std::span<const int> ids, const Vocabulary& vocab) {
  ParseResult r;
  auto reject = [&](int pos, const char* why) {
    r.valid = false;
    r.position = pos;
    r.reason = why;
    return r;
  };
  auto add = [&](SegmentKind kind, int b, int e) {
    if (kind == SegmentKind::text && !r.segments.empty() && r.segments.back().kind == SegmentKind::text &&
        r.segments.back().end == b) {
      r.segments.back().end = e;
    } else {
      r.segments.push_back({kind, b, e});
    }
  };
  const int n = static_cast<int>(ids.size());
  int i = 0;
  while (i < n) {
    const TokenClass c = vocab.classify(ids[static_cast<std::size_t>(i)]);
    switch (c) {
      case TokenClass::text:
        add(SegmentKind::text, i, i + 1);
        ++i;
        break;
      case TokenClass::eos:
        if (i != n - 1) return reject(i + 1, "token after end of sequence");
        add(SegmentKind::text, i, i + 1);
        ++i;
        break;
      case TokenClass::motion:
        return reject(i, "motion token outside block");
      case TokenClass::mot_close:
        return reject(i, "unmatched close");
      case TokenClass::img_close:
        return reject(i, "unmatched image close");
      case TokenClass::img_context:
        return reject(i, "image token outside image span");
      case TokenClass::unknown:
        return reject(i, "unknown token id");
      case TokenClass::img_open: {
        int j = i + 1;
        while (j < n && vocab.classify(ids[static_cast<std::size_t>(j)]) == TokenClass::img_context) ++j;
        if (j == n) return reject(n, "unterminated image span");
        if (vocab.classify(ids[static_cast<std::size_t>(j)]) != TokenClass::img_close) {
          return reject(j, "non-image token in image span");
        }
        add(SegmentKind::image_span, i, j + 1);
        i = j + 1;
        break;
      }
      case TokenClass::mot_open: {
        int j = i + 1;
        int count = 0;
        for (; j < n; ++j) {
          const TokenClass inner = vocab.classify(ids[static_cast<std::size_t>(j)]);
          if (inner == TokenClass::mot_close) break;
          if (inner != TokenClass::motion) return reject(j, "non-motion token in block");
          if (count == vocab.block_size) return reject(j, "long block");
          ++count;
        }
        if (j == n) return reject(n, "unterminated block");
        if (count < vocab.block_size) return reject(j, "short block");
        add(SegmentKind::motion_block, i, j + 1);
        i = j + 1;
        break;
      }
    }
  }
  return r;
}

MotionTokens deserialize_blocks(std::span<const int> ids, const Vocabulary& vocab, std::span<const Side> sides) {
  const ParseResult r = parse_stream(ids, vocab);
  if (!r.valid) {
    fail(Errc::malformed_block, "invalid token stream at position " + std::to_string(r.position) + ": " + r.reason);
  }
  if (sides.empty()) fail(Errc::invalid_input, "deserialize_blocks: at least one hand is required");
  MotionTokens out;
  for (Side s : sides) out.hands.push_back({s, {}});
  std::size_t block = 0;
  for (const auto& seg : r.segments) {
    if (seg.kind != SegmentKind::motion_block) continue;
    std::vector<int> codes;
    for (int p = seg.begin + 1; p < seg.end - 1; ++p) codes.push_back(ids[static_cast<std::size_t>(p)] - vocab.motion.begin);
    out.hands[block % sides.size()].seconds.push_back(std::move(codes));
    ++block;
  }
  if (block % sides.size() != 0) {
    fail(Errc::malformed_block, std::to_string(block) + " motion blocks do not divide among " +
                                    std::to_string(sides.size()) + " hands");
  }
  return out;
}

std::string format_ids(std::span<const int> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

std::string format_tags(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    const int id = ids[i];
    switch (vocab.classify(id)) {
      case TokenClass::text: out += "t_" + std::to_string(id); break;
      case TokenClass::motion: out += "m_" + std::to_string(id - vocab.motion.begin); break;
      case TokenClass::mot_open: out += "<MOT>"; break;
      case TokenClass::mot_close: out += "</MOT>"; break;
      case TokenClass::img_open: out += "<IMG>"; break;
      case TokenClass::img_close: out += "</IMG>"; break;
      case TokenClass::img_context: out += "<IMG_CONTEXT>"; break;
      case TokenClass::eos: out += "<EOS>"; break;
      case TokenClass::unknown: out += std::to_string(id); break;
    }
  }
  return out;
}

namespace {

bool parse_int(const std::string& s, std::size_t from, int& out) {
  if (from >= s.size()) return false;
  std::size_t k = from;
  if (s[k] == '-') ++k;
  if (k >= s.size()) return false;
  for (std::size_t i = k; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') return false;
  }
  try {
    out = std::stoi(s.substr(from));
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

}  // namespace

std::vector<int> parse_token_text(const std::string& text, const Vocabulary& vocab) {
  std::istringstream in(text);
  std::vector<int> out;
  std::string tok;
  while (in >> tok) {
    int v = 0;
    if (parse_int(tok, 0, v)) {
      out.push_back(v);
    } else if (tok.rfind("m_", 0) == 0 && parse_int(tok, 2, v)) {
      if (v < 0 || v >= vocab.motion.size()) fail(Errc::invalid_input, "motion tag out of range: " + tok);
      out.push_back(vocab.motion.begin + v);
    } else if (tok.rfind("t_", 0) == 0 && parse_int(tok, 2, v)) {
      out.push_back(v);
    } else if (tok == "<MOT>") {
      out.push_back(vocab.mot_open);
    } else if (tok == "</MOT>") {
      out.push_back(vocab.mot_close);
    } else if (tok == "<IMG>") {
      out.push_back(vocab.img_open);
    } else if (tok == "</IMG>") {
      out.push_back(vocab.img_close);
    } else if (tok == "<IMG_CONTEXT>") {
      out.push_back(vocab.img_context);
    } else if (tok == "<EOS>") {
      out.push_back(vocab.eos);
    } else {
      fail(Errc::invalid_input, "unrecognized token '" + tok + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoding modes

std::string_view mode_name(DecodeMode m) {
  switch (m) {
    case DecodeMode::free: return "free";
    case DecodeMode::block: return "block";
    case DecodeMode::soft: return "soft";
  }
  return "?";
}

DecodeMode mode_from_name(std::string_view name) {
  if (name == "free") return DecodeMode::free;
  if (name == "block") return DecodeMode::block;
  if (name == "soft") return DecodeMode::soft;
  fail(Errc::mode, "unknown decoding mode '" + std::string(name) + "'");
}

std::vector<bool> allowed_mask(const DecodeState& st, const Vocabulary& vocab) {
  if (st.mode == DecodeMode::free) fail(Errc::mode, "allowed_mask is undefined in free mode");
  std::vector<bool> mask(static_cast<std::size_t>(vocab.size()), false);
  auto allow = [&](int id) { mask[static_cast<std::size_t>(id)] = true; };
  if (st.inside_block) {
    if (st.emitted_in_block < vocab.block_size) {
      for (int id = vocab.motion.begin; id < vocab.motion.end; ++id) allow(id);
    } else {
      allow(vocab.mot_close);
    }
    return mask;
  }
  for (int id = vocab.text.begin; id < vocab.text.end; ++id) allow(id);
  const bool target_reached = st.target_blocks && st.blocks_done >= *st.target_blocks;
  if (!target_reached) allow(vocab.mot_open);
  if (!st.target_blocks || target_reached) allow(vocab.eos);
  return mask;
}

void DecodeState::advance(int id, const Vocabulary& vocab) {
  if (mode != DecodeMode::free) {
    const auto mask = allowed_mask(*this, vocab);
    if (id < 0 || id >= static_cast<int>(mask.size()) || !mask[static_cast<std::size_t>(id)]) {
      fail(Errc::invalid_token, "token " + std::to_string(id) + " is not allowed in the current decoding state");
    }
  }
  switch (vocab.classify(id)) {
    case TokenClass::mot_open:
      inside_block = true;
      emitted_in_block = 0;
      break;
    case TokenClass::motion:
      if (inside_block) ++emitted_in_block;
      break;
    case TokenClass::mot_close:
      if (inside_block) {
        inside_block = false;
        emitted_in_block = 0;
        ++blocks_done;
      }
      break;
    default:
      break;
  }
}

namespace {

Vec6 rotation_block_to_6d(const Eigen::MatrixXd& data, Eigen::Index row, int col) {
  const Vec3 v(data(row, col), data(row, col + 1), data(row, col + 2));
  return matrix_to_rot6d(axis_angle_to_matrix({v})).r;
}

}  // namespace

FeatureSequence blend_features(const FeatureSequence& pred, const FeatureSequence& gt) {
  if (pred.variant != gt.variant || pred.data.rows() != gt.data.rows() || pred.data.cols() != gt.data.cols()) {
    fail(Errc::shape_mismatch, "blend: windows differ in shape or variant");
  }
  FeatureSequence out = gt;
  out.data = 0.5 * (pred.data + gt.data);
  const FeatureLayout l = feature_layout(gt.variant);
  if (!l.six_d) {
    std::vector<int> starts{l.rrot_begin};
    for (int j = 0; j < kNumArticulated; ++j) starts.push_back(l.theta_begin + 3 * j);
    for (Eigen::Index t = 0; t < out.data.rows(); ++t) {
      for (int c : starts) {
        const Vec6 mean = 0.5 * (rotation_block_to_6d(pred.data, t, c) + rotation_block_to_6d(gt.data, t, c));
        const Vec3 v = matrix_to_axis_angle(rot6d_to_matrix({mean})).v;
        out.data.block(t, c, 1, 3) = v.transpose();
      }
    }
  }
  return out;
}

std::vector<int> soft_blend(std::span<const HandPose> pred, std::span<const HandPose> gt, const PartTokenizer& tok,
                            const HandSkeleton& skel) {
  const auto& cfg = tok.config();
  if (pred.size() != gt.size() || static_cast<int>(gt.size()) != cfg.fps) {
    fail(Errc::shape_mismatch, "soft_blend: both windows must have " + std::to_string(cfg.fps) + " frames");
  }
  const FeatureSequence fp = encode_feature(pred, cfg.variant, skel, cfg.fps);
  const FeatureSequence fg = encode_feature(gt, cfg.variant, skel, cfg.fps);
  return tokenize_window(blend_features(fp, fg), tok);
}

// ---------------------------------------------------------------------------
// Losses

void LossFilterConfig::validate() const {
  if (!(q_low >= 0.0 && q_high <= 100.0 && q_low < q_high)) {
    fail(Errc::config, "loss filter bounds must satisfy 0 <= q_low < q_high <= 100");
  }
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) fail(Errc::config, "mask probability must be in [0, 1]");
}

bool logit_mask(std::span<double> logits, bool label_is_motion, double p, const Vocabulary& vocab, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) fail(Errc::config, "mask probability must be in [0, 1]");
  if (!label_is_motion) return false;
  if (!rng.bernoulli(p)) return false;
  const double lowest = std::numeric_limits<double>::lowest();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!vocab.motion.contains(static_cast<int>(i))) logits[i] = lowest;
  }
  return true;
}

double nearest_rank(std::span<const double> sorted, double q) {
  const auto n = static_cast<double>(sorted.size());
  // q * n before dividing keeps integer percentiles exact (0.15 * 100 is
  // not 15 in binary floating point).
  const double rank = std::clamp(std::ceil(q * n / 100.0 - 1e-9), 1.0, n);
  return sorted[static_cast<std::size_t>(rank) - 1];
}

double filtered_motion_loss(std::span<const double> losses, const LossFilterConfig& cfg) {
  if (losses.empty()) fail(Errc::invalid_input, "filtered_motion_loss: empty list");
  cfg.validate();
  std::vector<double> sorted(losses.begin(), losses.end());
  std::sort(sorted.begin(), sorted.end());
  const double lo = nearest_rank(sorted, cfg.q_low);
  const double hi = nearest_rank(sorted, cfg.q_high);
  double sum = 0.0;
  std::size_t kept = 0;
  for (double l : losses) {
    if (l >= lo && l <= hi) {
      sum += l;
      ++kept;
    }
  }
  if (kept == 0) return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
  return sum / static_cast<double>(kept);
}

double token_cross_entropy(const Eigen::MatrixXd& logits, std::span<const int> labels,
                           std::span<const std::uint8_t> mask) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.size() != mask.size()) {
    fail(Errc::shape_mismatch, "token_cross_entropy: logits, labels and mask lengths differ");
  }
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) fail(Errc::invalid_input, "label " + std::to_string(y) + " outside the vocabulary");
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    sum += lse - logits(i, y);
    ++count;
  }
  if (count == 0) fail(Errc::invalid_input, "token_cross_entropy: every position is masked");
  return sum / count;
}

}  // namespace hmt
