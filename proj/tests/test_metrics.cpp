#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mdsp/geometry.hpp"
#include "mdsp/metrics.hpp"
#include "mdsp/rng.hpp"
#include "mdsp/synthdata.hpp"

#include "test_util.hpp"

using mdsp::Box;
using mdsp::Detection;
using mdsp::GtBox;
using mdsp::Keypoint;
using mdsp::PersonGT;
using mdsp::Skeleton;

namespace {

using PredLists = std::vector<std::vector<Detection>>;
using GtLists = std::vector<std::vector<GtBox>>;

// Straightforward VOC-style AP: rank detections of one class globally,
// greedily match each against the unused ground truth with the highest
// IoU, then integrate the 101-point interpolated precision-recall curve.
double ref_ap_one_class(const PredLists& preds, const GtLists& gts, int c, float thresh) {
  struct Row {
    float score;
    size_t img, idx;
    Box box;
  };
  std::vector<Row> rows;
  int num_gt = 0;
  for (size_t img = 0; img < preds.size(); ++img) {
    for (size_t i = 0; i < preds[img].size(); ++i)
      if (preds[img][i].class_id == c) rows.push_back({preds[img][i].score, img, i, preds[img][i].box});
    for (const auto& g : gts[img])
      if (g.class_id == c) ++num_gt;
  }
  if (num_gt == 0) return -1.0;
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.idx < b.idx;
  });

  std::vector<std::vector<bool>> used(gts.size());
  for (size_t img = 0; img < gts.size(); ++img) used[img].assign(gts[img].size(), false);
  std::vector<double> precision, recall;
  int tp = 0;
  for (size_t r = 0; r < rows.size(); ++r) {
    float best = 0;
    int pick = -1;
    for (size_t g = 0; g < gts[rows[r].img].size(); ++g) {
      const auto& gt = gts[rows[r].img][g];
      if (gt.class_id != c || used[rows[r].img][g]) continue;
      const float v = mdsp::iou(rows[r].box, gt.box);
      if (v > best) {
        best = v;
        pick = static_cast<int>(g);
      }
    }
    if (pick >= 0 && best >= thresh) {
      ++tp;
      used[rows[r].img][static_cast<size_t>(pick)] = true;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }

  double sum = 0;
  for (int ri = 0; ri <= 100; ++ri) {
    const double target = ri / 100.0;
    double best_p = 0;
    for (size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= target) best_p = std::max(best_p, precision[i]);
    sum += best_p;
  }
  return sum / 101.0;
}

double ref_ap(const PredLists& preds, const GtLists& gts, int num_classes, float thresh,
              std::vector<double>* per_class = nullptr) {
  if (per_class) per_class->assign(static_cast<size_t>(num_classes), -1.0);
  double sum = 0;
  int seen = 0;
  for (int c = 0; c < num_classes; ++c) {
    const double ap = ref_ap_one_class(preds, gts, c, thresh);
    if (per_class) (*per_class)[static_cast<size_t>(c)] = ap;
    if (ap >= 0) {
      sum += ap;
      ++seen;
    }
  }
  return seen > 0 ? sum / seen : 0.0;
}

void random_fixture(std::uint64_t seed, int num_classes, PredLists* preds, GtLists* gts) {
  mdsp::Rng rng(seed);
  const int images = rng.uniform_int(1, 4);
  preds->assign(static_cast<size_t>(images), {});
  gts->assign(static_cast<size_t>(images), {});
  const auto rand_box = [&rng]() {
    return Box{static_cast<float>(rng.uniform(20, 230)), static_cast<float>(rng.uniform(20, 230)),
               static_cast<float>(rng.uniform(8, 90)), static_cast<float>(rng.uniform(8, 90))};
  };
  for (int img = 0; img < images; ++img) {
    const int n_gt = rng.uniform_int(0, 5);
    for (int i = 0; i < n_gt; ++i)
      (*gts)[static_cast<size_t>(img)].push_back({rand_box(), rng.uniform_int(0, num_classes - 1)});
    const int n_noise = rng.uniform_int(0, 4);
    for (int i = 0; i < n_noise; ++i) {
      Detection d;
      d.box = rand_box();
      d.class_id = rng.uniform_int(0, num_classes - 1);
      d.score = static_cast<float>(rng.uniform(0.05, 1.0));
      (*preds)[static_cast<size_t>(img)].push_back(d);
    }
    for (const auto& g : (*gts)[static_cast<size_t>(img)]) {
      if (rng.bernoulli(0.25)) continue;  // missed detection
      Detection d;
      d.box = g.box;
      d.box.cx += static_cast<float>(rng.uniform(-12, 12));
      d.box.cy += static_cast<float>(rng.uniform(-12, 12));
      d.box.w *= static_cast<float>(rng.uniform(0.8, 1.25));
      d.box.h *= static_cast<float>(rng.uniform(0.8, 1.25));
      d.class_id = g.class_id;
      d.score = static_cast<float>(rng.uniform(0.05, 1.0));
      (*preds)[static_cast<size_t>(img)].push_back(d);
    }
  }
}

Skeleton skeleton_at(const std::vector<std::pair<float, float>>& pts, float score) {
  Skeleton s;
  s.score = score;
  for (const auto& [x, y] : pts) s.keypoints.push_back(Keypoint{x, y, 1.0f, true});
  while (s.keypoints.size() < 7) s.keypoints.push_back(Keypoint{});
  return s;
}

PersonGT person_at(const std::vector<std::pair<float, float>>& pts, const Box& box) {
  PersonGT p;
  p.box = box;
  for (const auto& [x, y] : pts) p.keypoints.push_back(Keypoint{x, y, 1.0f, true});
  while (p.keypoints.size() < 7) p.keypoints.push_back(Keypoint{});
  return p;
}

}  // namespace

TEST_CASE("detection metrics: perfect predictions score 1") {
  GtLists gts = {{{Box{50, 50, 30, 40}, 0}, {Box{150, 80, 60, 20}, 2}},
                 {{Box{100, 100, 44, 44}, 1}}};
  PredLists preds(2);
  for (size_t img = 0; img < gts.size(); ++img)
    for (const auto& g : gts[img]) preds[img].push_back({g.box, g.class_id, 0.9f});

  const auto e = mdsp::detection_metrics(preds, gts, 4);
  CHECK_EQ(e.ap50, doctest::Approx(1.0).epsilon(1e-12));
  CHECK_EQ(e.ap75, doctest::Approx(1.0).epsilon(1e-12));
  CHECK_EQ(e.map5095, doctest::Approx(1.0).epsilon(1e-12));
  REQUIRE_EQ(e.per_class_ap50.size(), 4u);
  CHECK_EQ(e.per_class_ap50[0], doctest::Approx(1.0));
  CHECK_EQ(e.per_class_ap50[1], doctest::Approx(1.0));
  CHECK_EQ(e.per_class_ap50[2], doctest::Approx(1.0));
  CHECK_EQ(e.per_class_ap50[3], -1.0);
}

TEST_CASE("detection metrics: no predictions score 0") {
  GtLists gts = {{{Box{50, 50, 30, 40}, 0}}};
  PredLists preds = {{}};
  const auto e = mdsp::detection_metrics(preds, gts, 4);
  CHECK_EQ(e.ap50, 0.0);
  CHECK_EQ(e.map5095, 0.0);
  CHECK_EQ(e.per_class_ap50[0], 0.0);
}

TEST_CASE("detection metrics: matches an independent reference") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    PredLists preds;
    GtLists gts;
    random_fixture(1000 + seed, 3, &preds, &gts);

    for (float thresh : {0.5f, 0.65f, 0.75f}) {
      std::vector<double> got_pc, want_pc;
      const double got = mdsp::average_precision_at_iou(preds, gts, 3, thresh, &got_pc);
      const double want = ref_ap(preds, gts, 3, thresh, &want_pc);
      CHECK_EQ(got, doctest::Approx(want).epsilon(1e-9));
      REQUIRE_EQ(got_pc.size(), want_pc.size());
      for (size_t c = 0; c < got_pc.size(); ++c)
        CHECK_EQ(got_pc[c], doctest::Approx(want_pc[c]).epsilon(1e-9));
    }

    const auto e = mdsp::detection_metrics(preds, gts, 3);
    double mean = 0;
    for (int i = 0; i < 10; ++i) mean += ref_ap(preds, gts, 3, 0.5f + 0.05f * static_cast<float>(i));
    CHECK_EQ(e.map5095, doctest::Approx(mean / 10.0).epsilon(1e-9));
  }
}

TEST_CASE("detection metrics: order of detections and images is irrelevant") {
  PredLists preds;
  GtLists gts;
  random_fixture(55, 3, &preds, &gts);

  PredLists shuffled = preds;
  mdsp::Rng rng(56);
  for (auto& list : shuffled)
    for (size_t i = list.size(); i > 1; --i)
      std::swap(list[i - 1], list[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  CHECK_EQ(mdsp::average_precision_at_iou(shuffled, gts, 3, 0.5f),
           doctest::Approx(mdsp::average_precision_at_iou(preds, gts, 3, 0.5f)).epsilon(1e-12));

  PredLists rev_preds(preds.rbegin(), preds.rend());
  GtLists rev_gts(gts.rbegin(), gts.rend());
  CHECK_EQ(mdsp::average_precision_at_iou(rev_preds, rev_gts, 3, 0.5f),
           doctest::Approx(mdsp::average_precision_at_iou(preds, gts, 3, 0.5f)).epsilon(1e-12));
}

TEST_CASE("detection metrics: classes without ground truth are left out") {
  GtLists gts = {{{Box{50, 50, 30, 40}, 0}}};
  PredLists with_stray = {{{Box{50, 50, 30, 40}, 0, 0.9f}, {Box{120, 120, 30, 30}, 2, 0.8f}}};
  PredLists without = {{{Box{50, 50, 30, 40}, 0, 0.9f}}};

  std::vector<double> pc;
  const double a = mdsp::average_precision_at_iou(with_stray, gts, 4, 0.5f, &pc);
  const double b = mdsp::average_precision_at_iou(without, gts, 4, 0.5f);
  CHECK_EQ(a, doctest::Approx(b).epsilon(1e-12));
  CHECK_EQ(pc[2], -1.0);

  CHECK_THROWS_AS(mdsp::average_precision_at_iou(with_stray, {}, 4, 0.5f), mdsp::Error);
  CHECK_THROWS_AS(mdsp::average_precision_at_iou(with_stray, gts, 0, 0.5f), mdsp::Error);
}

TEST_CASE("seg metrics: accuracy, per-class IoU, and errors") {
  SUBCASE("perfect maps") {
    std::vector<std::vector<int>> maps = {{0, 1, 2, 1}, {0, 0, 3, 3}};
    const auto e = mdsp::seg_metrics(maps, maps, 5);
    CHECK_EQ(e.miou, doctest::Approx(1.0));
    CHECK_EQ(e.pixel_acc, doctest::Approx(1.0));
    CHECK_EQ(e.per_class_iou[4], -1.0);
    CHECK_EQ(e.per_class_iou[1], doctest::Approx(1.0));
  }

  SUBCASE("all-background predictions match only the background") {
    std::vector<std::vector<int>> gt = {{0, 0, 1, 1, 2, 0}};
    std::vector<std::vector<int>> pred = {{0, 0, 0, 0, 0, 0}};
    const auto e = mdsp::seg_metrics(pred, gt, 5);
    CHECK_EQ(e.pixel_acc, doctest::Approx(3.0 / 6.0));
    CHECK_EQ(e.per_class_iou[0], doctest::Approx(3.0 / 6.0));
    CHECK_EQ(e.per_class_iou[1], doctest::Approx(0.0));
    CHECK_EQ(e.per_class_iou[2], doctest::Approx(0.0));
    CHECK_EQ(e.per_class_iou[3], -1.0);
    CHECK_EQ(e.miou, doctest::Approx((0.5 + 0.0 + 0.0) / 3.0));
  }

  SUBCASE("hand-counted confusion") {
    // gt:   0 0 1 1 2
    // pred: 0 1 1 2 2
    std::vector<std::vector<int>> gt = {{0, 0, 1, 1, 2}};
    std::vector<std::vector<int>> pred = {{0, 1, 1, 2, 2}};
    const auto e = mdsp::seg_metrics(pred, gt, 3);
    CHECK_EQ(e.pixel_acc, doctest::Approx(3.0 / 5.0));
    CHECK_EQ(e.per_class_iou[0], doctest::Approx(1.0 / 2.0));
    CHECK_EQ(e.per_class_iou[1], doctest::Approx(1.0 / 3.0));
    CHECK_EQ(e.per_class_iou[2], doctest::Approx(1.0 / 2.0));
  }

  SUBCASE("rejects malformed inputs") {
    CHECK_THROWS_AS(mdsp::seg_metrics({{0, 1}}, {{0}}, 5), mdsp::Error);
    CHECK_THROWS_AS(mdsp::seg_metrics({{0, 7}}, {{0, 1}}, 5), mdsp::Error);
    CHECK_THROWS_AS(mdsp::seg_metrics({{0}}, {{-1}}, 5), mdsp::Error);
    CHECK_THROWS_AS(mdsp::seg_metrics({{0}}, {{0}, {1}}, 5), mdsp::Error);
  }
}

TEST_CASE("object_keypoint_similarity: closed form") {
  const Box box{50, 50, 30, 40};
  const float diag = box.diagonal();
  const PersonGT gt = person_at({{40, 40}, {60, 60}}, box);

  SUBCASE("identical keypoints give 1") {
    CHECK_EQ(mdsp::object_keypoint_similarity(skeleton_at({{40, 40}, {60, 60}}, 1.0f), gt),
             doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("an absent prediction contributes zero") {
    Skeleton s = skeleton_at({{40, 40}}, 1.0f);
    CHECK_EQ(mdsp::object_keypoint_similarity(s, gt), doctest::Approx(0.5).epsilon(1e-9));
  }

  SUBCASE("displacement follows the Gaussian") {
    const float d = 3.0f;
    Skeleton s = skeleton_at({{40 + d, 40}, {60, 60}}, 1.0f);
    const double sigma = 0.1 * diag;
    const double want = (std::exp(-static_cast<double>(d * d) / (2 * sigma * sigma)) + 1.0) / 2.0;
    CHECK_EQ(mdsp::object_keypoint_similarity(s, gt), doctest::Approx(want).epsilon(1e-6));
  }

  SUBCASE("degenerate ground-truth box is rejected") {
    PersonGT bad = gt;
    bad.box = Box{10, 10, 0, 0};
    CHECK_THROWS_AS(mdsp::object_keypoint_similarity(skeleton_at({{1, 1}}, 1.0f), bad), mdsp::Error);
  }
}

TEST_CASE("pose metrics: perfect, empty, and jittered predictions") {
  const Box box_a{50, 50, 30, 40};
  const Box box_b{150, 150, 30, 40};
  std::vector<std::vector<PersonGT>> gts = {
      {person_at({{40, 40}, {60, 60}, {50, 30}}, box_a)},
      {person_at({{140, 140}, {160, 160}}, box_b)}};

  SUBCASE("exact predictions score 1 everywhere") {
    std::vector<std::vector<Skeleton>> preds = {
        {skeleton_at({{40, 40}, {60, 60}, {50, 30}}, 0.9f)},
        {skeleton_at({{140, 140}, {160, 160}}, 0.8f)}};
    const auto e = mdsp::pose_metrics(preds, gts);
    CHECK_EQ(e.ap, doctest::Approx(1.0));
    CHECK_EQ(e.ap50, doctest::Approx(1.0));
    CHECK_EQ(e.ap75, doctest::Approx(1.0));
    CHECK_EQ(e.pck, doctest::Approx(1.0));
    CHECK_EQ(e.mean_oks, doctest::Approx(1.0));
    CHECK_EQ(e.gt_persons, 2);
  }

  SUBCASE("no predictions score 0") {
    std::vector<std::vector<Skeleton>> preds = {{}, {}};
    const auto e = mdsp::pose_metrics(preds, gts);
    CHECK_EQ(e.ap, 0.0);
    CHECK_EQ(e.pck, 0.0);
    CHECK_EQ(e.mean_oks, 0.0);
    CHECK_EQ(e.gt_persons, 2);
  }

  SUBCASE("keypoints outside a tenth of the diagonal fail the PCK gate") {
    const float tol = 0.1f * box_a.diagonal();
    std::vector<std::vector<PersonGT>> gt_one = {{person_at({{40, 40}, {60, 60}}, box_a)}};
    std::vector<std::vector<Skeleton>> preds = {
        {skeleton_at({{40 + 0.5f * tol, 40}, {60 + 2.0f * tol, 60}}, 0.9f)}};
    const auto e = mdsp::pose_metrics(preds, gt_one);
    CHECK_EQ(e.pck, doctest::Approx(0.5));
    CHECK_EQ(e.gt_persons, 1);
  }

  SUBCASE("greedy matching pairs each prediction with its best person") {
    std::vector<std::vector<PersonGT>> two = {
        {person_at({{40, 40}, {60, 60}}, box_a), person_at({{140, 140}, {160, 160}}, box_b)}};
    std::vector<std::vector<Skeleton>> preds = {
        {skeleton_at({{40, 40}, {60, 60}}, 0.7f),
         skeleton_at({{42.83f, 40}, {62.83f, 60}}, 0.9f)}};
    const auto e = mdsp::pose_metrics(preds, two);
    // The exact skeleton takes the first person; the jittered one is left
    // with the far person and scores almost nothing.
    CHECK_EQ(e.mean_oks, doctest::Approx(0.5).epsilon(0.01));
    CHECK_EQ(e.pck, doctest::Approx(0.5));
  }

  SUBCASE("length mismatch is rejected") {
    std::vector<std::vector<Skeleton>> preds = {{}};
    CHECK_THROWS_AS(mdsp::pose_metrics(preds, gts), mdsp::Error);
  }
}

TEST_CASE("metrics report: table and json") {
  mdsp::MetricsReport r;
  mdsp::DetectionEval de;
  de.ap50 = 0.75;
  de.map5095 = 0.5;
  de.per_class_ap50 = {0.75, -1, -1, -1};
  r.detection = de;
  mdsp::SegEval se;
  se.miou = 0.6;
  se.pixel_acc = 0.9;
  se.per_class_iou = {0.9, 0.3, -1, -1, -1};
  r.segmentation = se;
  mdsp::PoseEval pe;
  pe.ap = 0.4;
  pe.pck = 0.8;
  pe.gt_persons = 12;
  r.pose = pe;

  const std::string t = r.table();
  CHECK(testutil::contains(t, "detection"));
  CHECK(testutil::contains(t, "AP@0.50"));
  CHECK(testutil::contains(t, "mIoU"));
  CHECK(testutil::contains(t, "PCK@0.1"));
  CHECK(testutil::contains(t, "Person"));

  const auto j = r.to_json();
  CHECK_EQ(j.at("detection").at("ap50").get<double>(), doctest::Approx(0.75));
  CHECK_EQ(j.at("segmentation").at("miou").get<double>(), doctest::Approx(0.6));
  CHECK_EQ(j.at("pose").at("gt_persons").get<int>(), 12);

  mdsp::MetricsReport empty;
  CHECK(empty.to_json().empty());
  CHECK_EQ(empty.table(), "");
}
