#include "doctest.h"

#include "hmt/codec.hpp"
#include "hmt/error.hpp"
#include "hmt/synth.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>

using namespace hmt;

namespace {

MotionTokens random_tokens(Rng& rng, int hands, int seconds, int block, int codes) {
  MotionTokens t;
  for (int h = 0; h < hands; ++h) {
    HandTokens ht;
    ht.side = h == 0 ? Side::left : Side::right;
    for (int s = 0; s < seconds; ++s) {
      std::vector<int> b(static_cast<std::size_t>(block));
      for (auto& k : b) k = static_cast<int>(rng.below(static_cast<std::uint64_t>(codes)));
      ht.seconds.push_back(b);
    }
    t.hands.push_back(ht);
  }
  return t;
}

}  // namespace

TEST_CASE("vocabulary layout and JSON") {
  const Vocabulary v = Vocabulary::standard(8192, 128);
  CHECK(v.mot_open == 32000);
  CHECK(v.eos == 32005);
  CHECK(v.motion.begin == 32006);
  CHECK(v.size() == 32006 + 8192);
  CHECK(v.classify(5) == TokenClass::text);
  CHECK(v.classify(32010) == TokenClass::motion);
  CHECK(v.classify(32001) == TokenClass::mot_close);
  CHECK(v.classify(-1) == TokenClass::unknown);
  CHECK(v.classify(v.size()) == TokenClass::unknown);

  const Vocabulary back = Vocabulary::from_json(nlohmann::json::parse(v.to_json().dump()));
  CHECK(back.motion.end == v.motion.end);
  CHECK(back.img_context == v.img_context);

  Vocabulary bad = v;
  bad.eos = 10;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = v;
  bad.motion = {31000, 33000};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("serialize_blocks layout") {
  const Vocabulary v = Vocabulary::standard(8192, 128);
  Rng rng(1);
  CHECK(serialize_blocks(MotionTokens{}, v).ids.empty());

  const MotionTokens one = random_tokens(rng, 1, 1, 128, 8192);
  const TokenStream s1 = serialize_blocks(one, v);
  CHECK(s1.ids.size() == 130);
  CHECK(s1.ids[1] == v.motion.begin + one.hands[0].seconds[0][0]);

  const MotionTokens two = random_tokens(rng, 1, 2, 128, 8192);
  const TokenStream s2 = serialize_blocks(two, v);
  REQUIRE(s2.ids.size() == 260);
  CHECK(s2.ids[0] == v.mot_open);
  CHECK(s2.ids[129] == v.mot_close);
  CHECK(s2.ids[130] == v.mot_open);
  CHECK(s2.ids[259] == v.mot_close);

  MotionTokens partial = one;
  partial.hands[0].seconds[0].pop_back();
  try {
    serialize_blocks(partial, v);
    FAIL("expected serialization error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::serialization);
  }
}

TEST_CASE("parse_stream accepts serializer output and round-trips") {
  const Vocabulary v = Vocabulary::standard(8192, 128);
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const int hands = 1 + static_cast<int>(rng.below(2));
    const int seconds = static_cast<int>(rng.below(4));
    const MotionTokens t = random_tokens(rng, hands, seconds, 128, 8192);
    const TokenStream s = serialize_blocks(t, v);
    const ParseResult r = parse_stream(s.ids, v);
    REQUIRE(r.valid);
    CHECK(static_cast<int>(r.segments.size()) == hands * seconds);
    for (const auto& seg : r.segments) CHECK(seg.kind == SegmentKind::motion_block);

    std::vector<Side> sides;
    for (const auto& h : t.hands) sides.push_back(h.side);
    const MotionTokens back = deserialize_blocks(s.ids, v, sides);
    for (int h = 0; h < hands; ++h) CHECK(back.hands[h].seconds == t.hands[h].seconds);

    CHECK(parse_token_text(format_ids(s.ids), v) == s.ids);
    CHECK(parse_token_text(format_tags(s.ids, v), v) == s.ids);
  }
}

TEST_CASE("parse_stream rejections") {
  const Vocabulary v = Vocabulary::standard(64, 4);
  const int m = v.motion.begin;
  auto check = [&](std::vector<int> ids, int pos, const std::string& reason) {
    const ParseResult r = parse_stream(ids, v);
    CHECK_FALSE(r.valid);
    CHECK(r.position == pos);
    CHECK(r.reason == reason);
  };
  check({v.mot_open, 7, m, m, m, v.mot_close}, 1, "non-motion token in block");
  check({v.mot_open, m, m, m, v.mot_close}, 4, "short block");
  check({v.mot_open, m, m, m, m, m, v.mot_close}, 5, "long block");
  check({v.mot_open, m, m}, 3, "unterminated block");
  check({5, v.mot_close}, 1, "unmatched close");
  check({5, m}, 1, "motion token outside block");
  check({5, v.eos, 6}, 2, "token after end of sequence");
  check({v.size() + 3}, 0, "unknown token id");
  check({v.img_open, v.img_context, 5, v.img_close}, 2, "non-image token in image span");

  const ParseResult mixed =
      parse_stream(std::vector<int>{1, 2, v.img_open, v.img_context, v.img_close, v.mot_open, m, m, m, m, v.mot_close,
                                    3, v.eos},
                   v);
  REQUIRE(mixed.valid);
  REQUIRE(mixed.segments.size() == 4);
  CHECK(mixed.segments[0].kind == SegmentKind::text);
  CHECK(mixed.segments[1].kind == SegmentKind::image_span);
  CHECK(mixed.segments[2].kind == SegmentKind::motion_block);
  CHECK(mixed.segments[2].begin == 5);
  CHECK(mixed.segments[2].end == 11);
  CHECK(mixed.segments[3].end == 13);
}

TEST_CASE("readable tags") {
  const Vocabulary v = Vocabulary::standard(64, 2);
  const std::vector<int> ids{12, v.mot_open, v.motion.begin + 17, v.motion.begin, v.mot_close, v.eos};
  CHECK(format_tags(ids, v) == "t_12 <MOT> m_17 m_0 </MOT> <EOS>");
  CHECK(parse_token_text("t_12 <MOT> m_17 m_0 </MOT> <EOS>", v) == ids);
  CHECK_THROWS_AS(parse_token_text("<MOT> m_99 </MOT>", v), Error);
  CHECK_THROWS_AS(parse_token_text("banana", v), Error);
}

TEST_CASE("allowed_mask") {
  const Vocabulary v = Vocabulary::standard(16, 3, 10);
  DecodeState st;
  st.target_blocks = 2;
  auto mask = allowed_mask(st, v);
  CHECK_FALSE(mask[static_cast<std::size_t>(v.eos)]);
  CHECK(mask[static_cast<std::size_t>(v.mot_open)]);
  CHECK(mask[3]);
  CHECK_FALSE(mask[static_cast<std::size_t>(v.motion.begin)]);

  st.advance(v.mot_open, v);
  for (int i = 0; i < 3; ++i) {
    mask = allowed_mask(st, v);
    CHECK(mask[static_cast<std::size_t>(v.motion.begin)]);
    CHECK_FALSE(mask[static_cast<std::size_t>(v.mot_close)]);
    CHECK_FALSE(mask[3]);
    st.advance(v.motion.begin + i, v);
  }
  mask = allowed_mask(st, v);
  CHECK(std::count(mask.begin(), mask.end(), true) == 1);
  CHECK(mask[static_cast<std::size_t>(v.mot_close)]);
  CHECK_THROWS_AS(st.advance(v.motion.begin, v), Error);
  st.advance(v.mot_close, v);
  CHECK(st.blocks_done == 1);
  CHECK_FALSE(allowed_mask(st, v)[static_cast<std::size_t>(v.eos)]);

  st.blocks_done = 2;
  mask = allowed_mask(st, v);
  CHECK(mask[static_cast<std::size_t>(v.eos)]);
  CHECK_FALSE(mask[static_cast<std::size_t>(v.mot_open)]);

  DecodeState free_state;
  free_state.mode = DecodeMode::free;
  try {
    allowed_mask(free_state, v);
    FAIL("expected mode error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::mode);
  }
}

TEST_CASE("mask-respecting rollouts always parse") {
  const Vocabulary v = Vocabulary::standard(16, 4, 20);
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    DecodeState st;
    st.mode = trial % 2 ? DecodeMode::block : DecodeMode::soft;
    if (trial % 3) st.target_blocks = static_cast<int>(rng.below(4));
    std::vector<int> ids;
    for (int step = 0; step < 400; ++step) {
      const auto mask = allowed_mask(st, v);
      std::vector<int> choices;
      for (int id = 0; id < v.size(); ++id) {
        if (mask[static_cast<std::size_t>(id)]) choices.push_back(id);
      }
      REQUIRE_FALSE(choices.empty());
      // Bias toward structure so blocks actually appear.
      int id = choices[rng.below(choices.size())];
      if (mask[static_cast<std::size_t>(v.mot_open)] && rng.bernoulli(0.3)) id = v.mot_open;
      if (mask[static_cast<std::size_t>(v.eos)] && rng.bernoulli(0.1)) id = v.eos;
      st.advance(id, v);
      ids.push_back(id);
      if (id == v.eos) break;
    }
    if (st.inside_block) continue;  // rollout cut off mid-block by the step limit
    const ParseResult r = parse_stream(ids, v);
    CHECK(r.valid);
    if (st.target_blocks && !ids.empty() && ids.back() == v.eos) CHECK(st.blocks_done == *st.target_blocks);
  }
}

TEST_CASE("blend_features and soft_blend") {
  const HandSkeleton skel = HandSkeleton::rest_default();
  Rng rng(4);
  const auto gt = synthesize_motion(rng, 15, 15);
  const FeatureSequence fg = encode_feature(gt, FeatureVariant::D162, skel);
  FeatureSequence fp = fg;
  Eigen::MatrixXd delta(fg.data.rows(), fg.data.cols());
  for (Eigen::Index i = 0; i < delta.size(); ++i) delta.data()[i] = 0.05 * rng.normal();
  fp.data += delta;
  CHECK((blend_features(fp, fg).data - (fg.data + 0.5 * delta)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(blend_features(fg, fg).data == fg.data);

  // Axis-angle variants average rotations through 6D.
  const FeatureSequence a51 = encode_feature(gt, FeatureVariant::D51, skel);
  CHECK((blend_features(a51, a51).data - a51.data).cwiseAbs().maxCoeff() < 1e-9);

  FeatureSequence short_window = fg;
  short_window.data.conservativeResize(10, Eigen::NoChange);
  CHECK_THROWS_AS(blend_features(short_window, fg), Error);

  // Anchoring: blending toward ground truth never does worse than the raw
  // prediction, measured after detokenization.
  QuantizerConfig c;
  c.codebook_wrist = 128;
  c.codebook_finger = 128;
  c.code_dim = 32;
  std::vector<FeatureSequence> corpus;
  for (int i = 0; i < 60; ++i) corpus.push_back(encode_feature(synthesize_motion(rng, 15, 15), c.variant, skel));
  PartTokenizer tok = PartTokenizer::create(c, Rng(1));
  Trainer(tok, {}, Rng(2)).initialize(corpus);

  CHECK(soft_blend(gt, gt, tok, skel) == tokenize_window(fg, tok));

  auto joint_error = [&](const std::vector<HandPose>& a, std::span<const HandPose> b) {
    double e = 0;
    for (std::size_t t = 0; t < a.size(); ++t) {
      const Joints21 ja = forward_kinematics(a[t], skel), jb = forward_kinematics(b[t], skel);
      for (int j = 0; j < kNumJoints; ++j) e += (ja[j] - jb[j]).norm();
    }
    return e / (a.size() * kNumJoints);
  };
  int better = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<HandPose> pred = gt;
    const double scale = 0.3;
    for (auto& p : pred) {
      p.tau += Vec3(0.05 * rng.normal(), 0.05 * rng.normal(), 0.05 * rng.normal());
      for (auto& th : p.theta) th.v += scale * Vec3(rng.normal(), rng.normal(), rng.normal());
    }
    const auto blended = decode_feature(detokenize_window(soft_blend(pred, gt, tok, skel), tok, gt[0].beta, Side::right));
    if (joint_error(blended, gt) <= joint_error(pred, gt)) ++better;
  }
  CHECK(better == trials);
}

TEST_CASE("logit_mask") {
  const Vocabulary v = Vocabulary::standard(32, 8, 40);
  Rng rng(5);
  std::vector<double> logits(static_cast<std::size_t>(v.size()));
  for (auto& l : logits) l = rng.normal();
  const std::vector<double> original = logits;

  for (int i = 0; i < 100; ++i) CHECK_FALSE(logit_mask(logits, true, 0.0, v, rng));
  CHECK(logits == original);
  for (int i = 0; i < 100; ++i) CHECK_FALSE(logit_mask(logits, false, 1.0, v, rng));
  CHECK(logits == original);

  CHECK(logit_mask(logits, true, 1.0, v, rng));
  for (int id = 0; id < v.size(); ++id) {
    if (v.motion.contains(id)) {
      CHECK(logits[static_cast<std::size_t>(id)] == original[static_cast<std::size_t>(id)]);
    } else {
      CHECK(logits[static_cast<std::size_t>(id)] == std::numeric_limits<double>::lowest());
    }
  }

  int fired = 0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    std::vector<double> l = original;
    fired += logit_mask(l, true, 0.5, v, rng) ? 1 : 0;
  }
  CHECK(std::abs(fired / static_cast<double>(trials) - 0.5) <= 0.02);
}

TEST_CASE("filtered_motion_loss") {
  const LossFilterConfig cfg;
  std::vector<double> same(17, 2.5);
  CHECK(filtered_motion_loss(same, cfg) == 2.5);

  std::vector<double> hundred;
  for (int i = 1; i <= 100; ++i) hundred.push_back(i);
  CHECK(filtered_motion_loss(hundred, cfg) == 55.0);
  CHECK(filtered_motion_loss(hundred, {0, 100, 0.5}) == 50.5);

  CHECK_THROWS_AS(filtered_motion_loss(std::vector<double>{}, cfg), Error);
  CHECK_THROWS_AS(filtered_motion_loss(hundred, {50, 40, 0.5}), Error);

  Rng rng(6);
  for (int trial = 0; trial < 5000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(50));
    std::vector<double> xs(static_cast<std::size_t>(n));
    const bool ties = rng.bernoulli(0.5);
    for (auto& x : xs) x = ties ? static_cast<double>(rng.below(6)) : rng.uniform(0, 10);
    double lo = 0.5 * static_cast<double>(rng.below(200));
    double hi = 0.5 * static_cast<double>(rng.below(201));
    if (lo >= hi) std::swap(lo, hi);
    if (lo == hi) hi = std::min(100.0, lo + 0.5);
    if (lo >= hi) lo = hi - 0.5;
    const double got = filtered_motion_loss(xs, {lo, hi, 0.5});
    CHECK(std::abs(got - oracle::filtered_mean(xs, lo, hi)) < 1e-12);
  }
}

TEST_CASE("token_cross_entropy") {
  Rng rng(7);
  const int V = 50;
  Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(4, V);
  const std::vector<int> labels{3, 7, 0, 49};
  const std::vector<std::uint8_t> all(4, 1);
  CHECK(std::abs(token_cross_entropy(logits, labels, all) - std::log(V)) < 1e-12);

  for (int i = 0; i < 4; ++i) logits(i, labels[static_cast<std::size_t>(i)]) = 1e4;
  CHECK(token_cross_entropy(logits, labels, all) < 1e-12);

  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = 3 * rng.normal();
  const std::vector<std::uint8_t> some{1, 0, 1, 1};
  double expected = 0;
  for (int i : {0, 2, 3}) {
    double s = 0;
    for (int k = 0; k < V; ++k) s += std::exp(logits(i, k));
    expected += std::log(s) - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  CHECK(std::abs(token_cross_entropy(logits, labels, some) - expected / 3) < 1e-10);

  CHECK_THROWS_AS(token_cross_entropy(logits, std::vector<int>{1, 2}, some), Error);
  CHECK_THROWS_AS(token_cross_entropy(logits, labels, std::vector<std::uint8_t>(4, 0)), Error);
}

TEST_CASE("single-token mutations are rejected at the first offending position") {
  const Vocabulary v = Vocabulary::standard(40, 8, 30);
  const oracle::StreamGrammar g{v.text.end, v.motion.begin, v.motion.end, v.mot_open, v.mot_close,
                                v.img_open, v.img_close,    v.img_context, v.eos,     v.block_size};
  Rng rng(9);
  int invalid = 0, located = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<int> ids;
    for (int i = 0; i < 3; ++i) {
      if (rng.bernoulli(0.5)) ids.push_back(static_cast<int>(rng.below(30)));
      ids.push_back(v.mot_open);
      for (int k = 0; k < 8; ++k) ids.push_back(v.motion.begin + static_cast<int>(rng.below(40)));
      ids.push_back(v.mot_close);
    }
    if (rng.bernoulli(0.5)) ids.push_back(v.eos);
    REQUIRE(g.valid(g.letters(ids)));
    REQUIRE(parse_stream(ids, v).valid);

    const auto pos = rng.below(ids.size());
    ids[pos] = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.size() + 2)));
    const std::string letters = g.letters(ids);
    const ParseResult r = parse_stream(ids, v);
    CHECK(r.valid == g.valid(letters));
    if (!g.valid(letters)) {
      ++invalid;
      if (r.position == g.first_offense(letters, static_cast<int>(pos))) ++located;
    }
  }
  CHECK(invalid > 1000);
  CHECK(located == invalid);
}
