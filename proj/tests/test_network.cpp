#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mdsp/loss.hpp"
#include "mdsp/network.hpp"
#include "mdsp/rng.hpp"
#include "mdsp/tensor.hpp"
#include "test_util.hpp"

using mdsp::Network;
using mdsp::NetworkSpec;
using mdsp::ParamGroup;
using mdsp::Rng;
using mdsp::TaskMask;
using mdsp::Tensor;
using testutil::bitwise_equal;
using testutil::grad_l1;

namespace {

NetworkSpec small_spec(float width, int input, TaskMask mask = TaskMask{}) {
  NetworkSpec s = mdsp::default_spec();
  s.width_mult = width;
  s.input_size = input;
  s.anchors = mdsp::default_anchors(input);
  s.task_mask = mask;
  return s;
}

// Independent closed-form parameter count, mirroring the documented layer
// inventory rather than walking the parameter store.
std::int64_t conv_p(std::int64_t cin, std::int64_t cout, std::int64_t k, bool bias) {
  return cout * cin * k * k + (bias ? cout : 0);
}
std::int64_t convbn_p(std::int64_t cin, std::int64_t cout, std::int64_t k) {
  return conv_p(cin, cout, k, false) + 2 * cout;
}
std::int64_t convset_p(std::int64_t cin, std::int64_t cout) {
  return convbn_p(cin, cout, 1) + convbn_p(cout, 2 * cout, 3) + convbn_p(2 * cout, cout, 1) +
         convbn_p(cout, 2 * cout, 3) + convbn_p(2 * cout, cout, 1);
}

std::int64_t expected_params(const NetworkSpec& s) {
  auto ch = [&](int base) { return static_cast<std::int64_t>(s.ch(base)); };
  const std::int64_t w0 = ch(16);
  std::int64_t total = convbn_p(3, w0, 3);
  std::int64_t prev = w0;
  for (int base : {32, 64, 128, 256, 512}) {
    const std::int64_t c = ch(base);
    const std::int64_t h = std::max<std::int64_t>(1, c / 2);
    total += convbn_p(prev, c, 3);
    total += 2 * convbn_p(c, h, 1) + convbn_p(h, h, 1) + convbn_p(h, h, 3) + convbn_p(2 * h, c, 1);
    prev = c;
  }
  const std::int64_t c3 = ch(128), c4 = ch(256), c5 = ch(512);
  const std::int64_t o1 = std::max<std::int64_t>(1, c5 / 2);
  const std::int64_t o2 = std::max<std::int64_t>(1, c4 / 2);
  const std::int64_t o3 = std::max<std::int64_t>(1, c3 / 2);
  const std::int64_t r1 = std::max<std::int64_t>(1, o1 / 2);
  const std::int64_t r2 = std::max<std::int64_t>(1, o2 / 2);
  if (s.task_mask.detect || s.task_mask.segment) {
    total += convset_p(c5, o1) + convbn_p(o1, r1, 1);
    total += convset_p(r1 + c4, o2) + convbn_p(o2, r2, 1);
    total += convset_p(r2 + c3, o3);
  }
  if (s.task_mask.detect) {
    const std::int64_t depth = s.det_depth();
    total += conv_p(o1, depth, 1, true) + conv_p(o2, depth, 1, true) + conv_p(o3, depth, 1, true);
  }
  if (s.task_mask.segment) {
    const std::int64_t d = ch(256);
    total += conv_p(o1, d, 1, false);
    total += 4 * (4 * conv_p(d, d, 1, false));
    total += conv_p(d, d, 1, false) + conv_p(o2, d, 1, false);
    total += conv_p(d, d, 1, false) + conv_p(o3, d, 1, false);
    total += conv_p(d, d, 1, false) + conv_p(ch(64), d, 1, false);
    total += conv_p(d, s.num_seg_classes, 3, true);
  }
  if (s.task_mask.pose) {
    const std::int64_t p = ch(128);
    const std::int64_t w = ch(64);
    total += conv_p(ch(128), p, 3, true) + 2 * conv_p(p, p, 3, true);
    const std::int64_t paf_ch = 2 * s.num_limbs();
    const std::int64_t hm_ch = s.num_keypoints + 1;
    auto stage_p = [&](std::int64_t cin, std::int64_t cout) {
      std::int64_t sp = 0;
      std::int64_t c = cin;
      for (int b = 0; b < 5; ++b) {
        sp += conv_p(c, w, 3, true) + 2 * conv_p(w, w, 3, true);
        c = 3 * w;
      }
      sp += conv_p(c, w, 1, true) + conv_p(w, cout, 1, true);
      return sp;
    };
    total += stage_p(p, paf_ch);
    total += stage_p(paf_ch + p, paf_ch) + stage_p(paf_ch + p, paf_ch);
    total += stage_p(paf_ch + p, hm_ch);
  }
  return total;
}

}  // namespace

TEST_CASE("forward shapes at 416 with four classes") {
  NetworkSpec spec = small_spec(0.125f, 416, TaskMask{true, true, true});
  Network<float> net(spec, 3);
  Rng rng(5);
  Tensor<float> img = Tensor<float>::randn({1, 3, 416, 416}, rng, 0.5);
  auto out = net.forward(img, false);

  REQUIRE(out.detect.has_value());
  CHECK_EQ(out.detect->scales[0].shape(), mdsp::Shape{1, 27, 13, 13});
  CHECK_EQ(out.detect->scales[1].shape(), mdsp::Shape{1, 27, 26, 26});
  CHECK_EQ(out.detect->scales[2].shape(), mdsp::Shape{1, 27, 52, 52});

  REQUIRE(out.seg_logits.has_value());
  CHECK_EQ(out.seg_logits->shape(), mdsp::Shape{1, 5, 416, 416});

  REQUIRE(out.pose.has_value());
  CHECK_EQ(out.pose->pafs.size(), 3);
  for (const auto& p : out.pose->pafs) CHECK_EQ(p.shape(), mdsp::Shape{1, 12, 52, 52});
  CHECK_EQ(out.pose->heatmaps.shape(), mdsp::Shape{1, 8, 52, 52});

  CHECK_EQ(out.pyramid.c5.dim(2), 13);
  CHECK_EQ(out.pyramid.c_early.dim(2), 104);
}

TEST_CASE("forward shapes at 64 and pose stage wiring") {
  NetworkSpec spec = small_spec(0.125f, 64, TaskMask{true, true, true});
  Network<float> net(spec, 3);
  Rng rng(5);
  Tensor<float> img = Tensor<float>::randn({2, 3, 64, 64}, rng, 0.5);
  auto out = net.forward(img, false);

  CHECK_EQ(out.pyramid.c_early.dim(2), 16);
  CHECK_EQ(out.pyramid.c3.dim(2), 8);
  CHECK_EQ(out.pyramid.c4.dim(2), 4);
  CHECK_EQ(out.pyramid.c5.dim(2), 2);
  CHECK_EQ(out.detect->scales[0].dim(2), 2);
  CHECK_EQ(out.detect->scales[1].dim(2), 4);
  CHECK_EQ(out.detect->scales[2].dim(2), 8);
  CHECK_EQ(out.seg_logits->dim(2), 64);
  CHECK_EQ(out.pose->heatmaps.dim(2), 8);

  // Refinement stages consume the previous stage output concatenated with
  // the CPM features: 2L + CPM channels.
  auto* e = net.params().find("pose.s2.b0.c0.w");
  REQUIRE(e != nullptr);
  CHECK_EQ(e->tensor.dim(1), 2 * spec.num_limbs() + spec.ch(128));

  SUBCASE("wrong input size is an error") {
    Tensor<float> bad = Tensor<float>::zeros({1, 3, 32, 32});
    CHECK_THROWS_AS((void)net.forward(bad, false), mdsp::Error);
    Tensor<float> bad2 = Tensor<float>::zeros({1, 1, 64, 64});
    CHECK_THROWS_AS((void)net.forward(bad2, false), mdsp::Error);
  }
}

TEST_CASE("parameter count matches the closed-form layer inventory") {
  for (float w : {0.25f, 1.0f}) {
    for (TaskMask mask : {TaskMask{true, true, true}, TaskMask{true, false, false},
                          TaskMask{false, true, false}, TaskMask{false, false, true},
                          TaskMask{true, true, false}, TaskMask{false, false, false}}) {
      NetworkSpec spec = small_spec(w, 416, mask);
      CHECK_EQ(mdsp::param_count(spec, mask), expected_params(spec));
    }
  }
}

TEST_CASE("parameter groups follow the task mask") {
  NetworkSpec spec = small_spec(0.25f, 64);
  SUBCASE("width 1 backbone ends at 512 channels") {
    NetworkSpec full = small_spec(1.0f, 416, TaskMask{false, false, false});
    Network<float> net(full, 0);
    auto* e = net.params().find("backbone.stage5.csp.merge.w");
    REQUIRE(e != nullptr);
    CHECK_EQ(e->tensor.dim(0), 512);
  }
  SUBCASE("detect-only has no segment or pose parameters") {
    Network<float> net(small_spec(0.25f, 64, TaskMask{true, false, false}), 1);
    CHECK_EQ(net.params().count_trainable(ParamGroup::segment), 0);
    CHECK_EQ(net.params().count_trainable(ParamGroup::pose), 0);
    CHECK_GT(net.params().count_trainable(ParamGroup::detect_pred), 0);
  }
  SUBCASE("segment-only builds the shared trunk but no prediction convs") {
    Network<float> net(small_spec(0.25f, 64, TaskMask{false, true, false}), 1);
    CHECK_GT(net.params().count_trainable(ParamGroup::detect_shared), 0);
    CHECK_EQ(net.params().count_trainable(ParamGroup::detect_pred), 0);
    CHECK_GT(net.params().count_trainable(ParamGroup::segment), 0);
  }
  SUBCASE("pose-only has no detection trunk") {
    Network<float> net(small_spec(0.25f, 64, TaskMask{false, false, true}), 1);
    CHECK_EQ(net.params().count_trainable(ParamGroup::detect_shared), 0);
    CHECK_GT(net.params().count_trainable(ParamGroup::pose), 0);
  }
  SUBCASE("halving the width shrinks the shared trunk about fourfold") {
    const auto count = [&](float w) {
      Network<float> net(small_spec(w, 416, TaskMask{true, false, false}), 1);
      return static_cast<double>(net.params().count_trainable(ParamGroup::detect_shared));
    };
    const double ratio = count(1.0f) / count(0.5f);
    CHECK_GT(ratio, 3.2);
    CHECK_LT(ratio, 4.4);
  }
  SUBCASE("joint model is at most 80 percent of the single-task sum") {
    NetworkSpec s = small_spec(0.25f, 416);
    const auto joint = mdsp::param_count(s, TaskMask{true, true, true});
    const auto singles = mdsp::param_count(s, TaskMask{true, false, false}) +
                         mdsp::param_count(s, TaskMask{false, true, false}) +
                         mdsp::param_count(s, TaskMask{false, false, true});
    CHECK_LE(static_cast<double>(joint), 0.8 * static_cast<double>(singles));
  }
}

TEST_CASE("initialization is deterministic and mask-stable") {
  NetworkSpec all = small_spec(0.125f, 64, TaskMask{true, true, true});
  Network<float> a(all, 9);
  Network<float> b(all, 9);
  SUBCASE("same seed builds bitwise-identical parameters") {
    auto& ea = a.params().entries();
    auto& eb = b.params().entries();
    REQUIRE_EQ(ea.size(), eb.size());
    for (size_t i = 0; i < ea.size(); ++i) {
      CHECK_EQ(ea[i].name, eb[i].name);
      CHECK(bitwise_equal(ea[i].tensor, eb[i].tensor));
    }
  }
  SUBCASE("shared parameters do not depend on which heads exist") {
    Network<float> det(small_spec(0.125f, 64, TaskMask{true, false, false}), 9);
    Network<float> seg(small_spec(0.125f, 64, TaskMask{false, true, false}), 9);
    Network<float> pose(small_spec(0.125f, 64, TaskMask{false, false, true}), 9);
    for (auto& e : a.params().entries()) {
      if (e.group == ParamGroup::backbone) {
        for (Network<float>* other : {&det, &seg, &pose}) {
          auto* oe = other->params().find(e.name);
          REQUIRE(oe != nullptr);
          CHECK(bitwise_equal(e.tensor, oe->tensor));
        }
      }
      if (e.group == ParamGroup::detect_shared) {
        for (Network<float>* other : {&det, &seg}) {
          auto* oe = other->params().find(e.name);
          REQUIRE(oe != nullptr);
          CHECK(bitwise_equal(e.tensor, oe->tensor));
        }
      }
      if (e.group == ParamGroup::pose) {
        auto* oe = pose.params().find(e.name);
        REQUIRE(oe != nullptr);
        CHECK(bitwise_equal(e.tensor, oe->tensor));
      }
    }
  }
}

TEST_CASE("task mask never changes shared activations") {
  Rng rng(17);
  Tensor<float> img = Tensor<float>::randn({1, 3, 64, 64}, rng, 0.5);
  Network<float> all(small_spec(0.125f, 64, TaskMask{true, true, true}), 9);
  Network<float> det(small_spec(0.125f, 64, TaskMask{true, false, false}), 9);
  Network<float> detseg(small_spec(0.125f, 64, TaskMask{true, true, false}), 9);

  auto oa = all.forward(img, false);
  auto od = det.forward(img, false);
  auto ods = detseg.forward(img, false);

  CHECK(bitwise_equal(oa.pyramid.c_early, od.pyramid.c_early));
  CHECK(bitwise_equal(oa.pyramid.c3, od.pyramid.c3));
  CHECK(bitwise_equal(oa.pyramid.c4, od.pyramid.c4));
  CHECK(bitwise_equal(oa.pyramid.c5, od.pyramid.c5));
  for (int s = 0; s < 3; ++s) {
    CHECK(bitwise_equal(oa.convset_taps[static_cast<size_t>(s)],
                        od.convset_taps[static_cast<size_t>(s)]));
    CHECK(bitwise_equal(oa.convset_taps[static_cast<size_t>(s)],
                        ods.convset_taps[static_cast<size_t>(s)]));
    CHECK(bitwise_equal(oa.detect->scales[static_cast<size_t>(s)],
                        od.detect->scales[static_cast<size_t>(s)]));
  }
}

TEST_CASE("detection trunk consumes every pyramid level") {
  NetworkSpec spec = small_spec(0.25f, 64, TaskMask{true, false, false});
  mdsp::ParamStore<float> store;
  Rng rs(3), rp(4);
  auto head = mdsp::make_detect_head(store, spec, true, rs, rp);

  Rng rng(8);
  mdsp::FeaturePyramid<float> pyr;
  pyr.c_early = Tensor<float>::randn({1, spec.ch(64), 16, 16}, rng);
  pyr.c3 = Tensor<float>::randn({1, spec.ch(128), 8, 8}, rng);
  pyr.c4 = Tensor<float>::randn({1, spec.ch(256), 4, 4}, rng);
  pyr.c5 = Tensor<float>::randn({1, spec.ch(512), 2, 2}, rng);

  std::optional<mdsp::RawDetectOutput<float>> base;
  (void)head.forward(pyr, false, base);
  REQUIRE(base.has_value());
  std::optional<mdsp::RawDetectOutput<float>> again;
  (void)head.forward(pyr, false, again);
  for (int s = 0; s < 3; ++s)
    CHECK(bitwise_equal(base->scales[static_cast<size_t>(s)],
                        again->scales[static_cast<size_t>(s)]));

  SUBCASE("zeroing the coarsest level changes every scale") {
    pyr.c5 = Tensor<float>::zeros(pyr.c5.shape());
    std::optional<mdsp::RawDetectOutput<float>> out;
    (void)head.forward(pyr, false, out);
    for (int s = 0; s < 3; ++s)
      CHECK_FALSE(bitwise_equal(base->scales[static_cast<size_t>(s)],
                                out->scales[static_cast<size_t>(s)]));
  }
  SUBCASE("zeroing the mid level leaves only the coarse scale untouched") {
    pyr.c4 = Tensor<float>::zeros(pyr.c4.shape());
    std::optional<mdsp::RawDetectOutput<float>> out;
    (void)head.forward(pyr, false, out);
    CHECK(bitwise_equal(base->scales[0], out->scales[0]));
    CHECK_FALSE(bitwise_equal(base->scales[1], out->scales[1]));
    CHECK_FALSE(bitwise_equal(base->scales[2], out->scales[2]));
  }
  SUBCASE("zeroing the fine level leaves coarse and mid untouched") {
    pyr.c3 = Tensor<float>::zeros(pyr.c3.shape());
    std::optional<mdsp::RawDetectOutput<float>> out;
    (void)head.forward(pyr, false, out);
    CHECK(bitwise_equal(base->scales[0], out->scales[0]));
    CHECK(bitwise_equal(base->scales[1], out->scales[1]));
    CHECK_FALSE(bitwise_equal(base->scales[2], out->scales[2]));
  }
}

TEST_CASE("chained residual pooling behaves as documented") {
  NetworkSpec spec = small_spec(0.25f, 64, TaskMask{false, true, false});
  Rng rng(5);

  SUBCASE("a freshly built block is an identity") {
    mdsp::ParamStore<float> store;
    auto crp = mdsp::make_crp<float>(store, "crp", 8, ParamGroup::segment);
    Tensor<float> x = Tensor<float>::randn({1, 8, 6, 6}, rng);
    CHECK(bitwise_equal(x, crp.forward(x)));
  }
  SUBCASE("constant fields stay spatially constant") {
    mdsp::ParamStore<float> store;
    Rng r(2);
    auto crp = mdsp::make_crp<float>(store, "crp", 4, ParamGroup::segment);
    for (auto& e : store.entries())
      for (std::int64_t i = 0; i < e.tensor.numel(); ++i)
        e.tensor.data()[i] = static_cast<float>(r.normal(0.0, 0.3));
    Tensor<float> x = Tensor<float>::filled({1, 4, 5, 5}, 0.7f);
    Tensor<float> y = crp.forward(x);
    CHECK_EQ(y.shape(), x.shape());
    for (int c = 0; c < 4; ++c) {
      const float v0 = y.values()[static_cast<size_t>(c * 25)];
      for (int i = 0; i < 25; ++i)
        CHECK_EQ(y.values()[static_cast<size_t>(c * 25 + i)], doctest::Approx(v0));
    }
  }
  SUBCASE("all-zero weights leave only the final bias, a constant argmax") {
    Network<float> net(spec, 7);
    for (auto& e : net.params().entries()) {
      if (e.group != ParamGroup::segment) continue;
      std::fill(e.tensor.data(), e.tensor.data() + e.tensor.numel(), 0.0f);
    }
    auto* bias = net.params().find("seg.final.b");
    REQUIRE(bias != nullptr);
    for (int c = 0; c < 5; ++c) bias->tensor.data()[c] = static_cast<float>(c == 2 ? 3 : -1);
    Tensor<float> img = Tensor<float>::randn({1, 3, 64, 64}, rng, 0.5);
    auto out = net.forward(img, false);
    for (std::int64_t i = 0; i < 64 * 64; ++i) {
      float best = -1e30f;
      int arg = -1;
      for (int c = 0; c < 5; ++c) {
        const float v = out.seg_logits->values()[static_cast<size_t>(c * 64 * 64 + i)];
        if (v > best) {
          best = v;
          arg = c;
        }
      }
      if (arg != 2) {
        CHECK_EQ(arg, 2);
        break;
      }
    }
  }
}

TEST_CASE("segmentation loss reaches the shared trunk") {
  NetworkSpec spec = small_spec(0.125f, 64, TaskMask{false, true, false});
  Network<float> net(spec, 11);
  Rng rng(12);
  Tensor<float> img = Tensor<float>::randn({1, 3, 64, 64}, rng, 0.5);
  auto out = net.forward(img, true);
  std::vector<int> labels(64 * 64);
  for (auto& l : labels) l = rng.uniform_int(0, 4);
  auto loss = mdsp::softmax_cross_entropy_pixels(*out.seg_logits, labels, -1);
  mdsp::backward(loss);

  double shared_total = 0;
  for (auto& e : net.params().entries()) {
    if (e.group != ParamGroup::detect_shared || !e.trainable) continue;
    CHECK(e.tensor.has_grad());
    shared_total += grad_l1(e.tensor);
  }
  CHECK_GT(shared_total, 0.0);

  // Per-pixel softmax over the logits sums to one.
  const auto& lg = *out.seg_logits;
  for (std::int64_t i = 0; i < 16; ++i) {
    double m = -1e30;
    for (int c = 0; c < 5; ++c)
      m = std::max(m, static_cast<double>(lg.values()[static_cast<size_t>(c * 64 * 64 + i)]));
    double z = 0;
    for (int c = 0; c < 5; ++c)
      z += std::exp(static_cast<double>(lg.values()[static_cast<size_t>(c * 64 * 64 + i)]) - m);
    double total = 0;
    for (int c = 0; c < 5; ++c)
      total += std::exp(static_cast<double>(lg.values()[static_cast<size_t>(c * 64 * 64 + i)]) - m) / z;
    CHECK_EQ(total, doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("pose-only gradients stop at the mid-resolution tap") {
  NetworkSpec spec = small_spec(0.125f, 64, TaskMask{false, false, true});
  Network<float> net(spec, 13);
  Rng rng(14);
  Tensor<float> img = Tensor<float>::randn({1, 3, 64, 64}, rng, 0.5);
  auto out = net.forward(img, true);
  REQUIRE(out.pose.has_value());

  Tensor<float> paf_t = Tensor<float>::zeros(out.pose->pafs[0].shape());
  Tensor<float> hm_t = Tensor<float>::zeros(out.pose->heatmaps.shape());
  auto loss = mdsp::pose_loss(*out.pose, paf_t, hm_t);
  mdsp::backward(loss);

  double sum_up_to_c3 = 0;
  for (auto& e : net.params().entries()) {
    if (!e.trainable) continue;
    const bool beyond = e.name.rfind("backbone.stage4", 0) == 0 ||
                        e.name.rfind("backbone.stage5", 0) == 0;
    if (beyond) {
      CHECK_EQ(grad_l1(e.tensor), 0.0);
    } else if (e.group == ParamGroup::backbone) {
      sum_up_to_c3 += grad_l1(e.tensor);
    }
  }
  CHECK_GT(sum_up_to_c3, 0.0);

  SUBCASE("every refinement stage contributes to the loss graph") {
    net.params().zero_grads();
    auto out2 = net.forward(img, true);
    auto l2 = mdsp::pose_loss(*out2.pose, paf_t, hm_t);
    mdsp::backward(l2);
    for (const char* stage : {"pose.s1", "pose.s2", "pose.s3", "pose.s4"}) {
      double stage_total = 0;
      for (auto& e : net.params().entries())
        if (e.name.rfind(stage, 0) == 0) stage_total += grad_l1(e.tensor);
      CHECK_GT(stage_total, 0.0);
    }
  }
}

TEST_CASE("backbone stays finite across random inputs") {
  NetworkSpec spec = small_spec(0.125f, 64, TaskMask{false, false, false});
  Network<float> net(spec, 21);
  for (int s = 0; s < 100; ++s) {
    Rng rng(static_cast<std::uint64_t>(s) + 1);
    Tensor<float> img = Tensor<float>::randn({1, 3, 64, 64}, rng, s % 2 == 0 ? 0.5 : 2.0);
    auto out = net.forward(img, false);
    CHECK(mdsp::all_finite(out.pyramid.c_early));
    CHECK(mdsp::all_finite(out.pyramid.c3));
    CHECK(mdsp::all_finite(out.pyramid.c4));
    CHECK(mdsp::all_finite(out.pyramid.c5));
  }
}
