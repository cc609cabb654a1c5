#pragma once

// Central finite-difference gradient checking, double precision throughout.
// Used by the tensor op suite and by the acceptance gate, so tolerances and
// seed counts live here in one place.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mdsp/loss.hpp"
#include "mdsp/network.hpp"
#include "mdsp/rng.hpp"
#include "mdsp/synthdata.hpp"
#include "mdsp/tensor.hpp"
#include "mdsp/train.hpp"

namespace fdcheck {

using mdsp::Rng;
using mdsp::Tensor;

struct Result {
  double max_rel_err = 0;
  std::int64_t coords = 0;
};

// Relative error with a floor in the denominator: strict for healthy
// gradients, effectively absolute for near-zero ones where the central
// difference itself carries little signal.
inline double rel_err(double ad, double fd) {
  const double denom = std::max({std::abs(ad), std::abs(fd), 1e-2});
  return std::abs(ad - fd) / denom;
}

// Compares the reverse-mode gradient of loss_fn with central differences at
// every coordinate of every input (or a random subset of coordinates when
// max_coords_per_input > 0). loss_fn must be value-pure in the inputs.
inline Result check_gradients(std::vector<Tensor<double>>& inputs,
                              const std::function<Tensor<double>()>& loss_fn,
                              double h = 1e-5, int max_coords_per_input = 0,
                              Rng* coord_rng = nullptr) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> loss = loss_fn();
  mdsp::backward(loss);

  Result res;
  for (auto& t : inputs) {
    const std::int64_t n = t.numel();
    std::vector<std::int64_t> coords(static_cast<size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_input > 0 && n > max_coords_per_input && coord_rng != nullptr) {
      for (int i = 0; i < max_coords_per_input; ++i) {
        const int j = coord_rng->uniform_int(i, static_cast<int>(n) - 1);
        std::swap(coords[static_cast<size_t>(i)], coords[static_cast<size_t>(j)]);
      }
      coords.resize(static_cast<size_t>(max_coords_per_input));
    }
    for (std::int64_t idx : coords) {
      double* slot = t.data() + idx;
      const double orig = *slot;
      double fp = 0, fm = 0;
      {
        mdsp::NoGradGuard ng;
        *slot = orig + h;
        fp = loss_fn().item();
        *slot = orig - h;
        fm = loss_fn().item();
        *slot = orig;
      }
      const double fd = (fp - fm) / (2 * h);
      const double ad =
          t.has_grad() ? t.grad()[static_cast<size_t>(idx)] : 0.0;
      res.max_rel_err = std::max(res.max_rel_err, rel_err(ad, fd));
      ++res.coords;
    }
  }
  return res;
}

// sum(out * proj) with a constant random projection: turns any op output
// into a scalar whose upstream gradient is dense and unstructured.
inline Tensor<double> project(const Tensor<double>& out, const Tensor<double>& proj) {
  return mdsp::sum(mdsp::mul(out, proj));
}

// Moves every value at least `margin` away from zero. Keeps piecewise ops
// (relu, elu) off their kink so finite differences stay two-sided smooth.
inline void shift_from_zero(Tensor<double>& t, double margin = 0.05) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double& v = t.data()[i];
    v += (v >= 0 ? margin : -margin);
  }
}

// Fills t with a random permutation of evenly spaced distinct values so that
// pooling windows never see near-ties and the argmax is FD-stable.
inline void fill_distinct(Tensor<double>& t, Rng& rng) {
  const std::int64_t n = t.numel();
  std::vector<double> vals(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    vals[static_cast<size_t>(i)] =
        0.07 * static_cast<double>(i) - 0.035 * static_cast<double>(n);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(0, static_cast<int>(i));
    std::swap(vals[static_cast<size_t>(i)], vals[static_cast<size_t>(j)]);
  }
  std::copy(vals.begin(), vals.end(), t.data());
}

struct OpCase {
  std::string name;
  double tol = 1e-4;
  std::function<Result(std::uint64_t seed)> run;
};

inline std::vector<OpCase> op_cases() {
  using mdsp::Shape;
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, double tol,
                      std::function<Result(std::uint64_t)> run) {
    cases.push_back(OpCase{std::move(name), tol, std::move(run)});
  };

  add_case("add", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 4}, rng),
                                   Tensor<double>::randn({2, 3, 4}, rng)};
    Tensor<double> p = Tensor<double>::randn({2, 3, 4}, rng);
    return check_gradients(in, [&] { return project(mdsp::add(in[0], in[1]), p); });
  });

  add_case("mul", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 4}, rng),
                                   Tensor<double>::randn({2, 3, 4}, rng)};
    Tensor<double> p = Tensor<double>::randn({2, 3, 4}, rng);
    return check_gradients(in, [&] { return project(mdsp::mul(in[0], in[1]), p); });
  });

  add_case("mul_scalar", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({3, 5}, rng)};
    Tensor<double> p = Tensor<double>::randn({3, 5}, rng);
    return check_gradients(in, [&] { return project(mdsp::mul_scalar(in[0], -1.7), p); });
  });

  add_case("relu", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({4, 4, 3}, rng)};
    shift_from_zero(in[0]);
    Tensor<double> p = Tensor<double>::randn({4, 4, 3}, rng);
    return check_gradients(in, [&] { return project(mdsp::relu(in[0]), p); });
  });

  add_case("elu", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({4, 4, 3}, rng)};
    shift_from_zero(in[0]);
    Tensor<double> p = Tensor<double>::randn({4, 4, 3}, rng);
    return check_gradients(in, [&] { return project(mdsp::elu(in[0]), p); });
  });

  add_case("sigmoid", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({4, 4, 3}, rng)};
    Tensor<double> p = Tensor<double>::randn({4, 4, 3}, rng);
    return check_gradients(in, [&] { return project(mdsp::sigmoid(in[0]), p); });
  });

  add_case("sum", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 7}, rng)};
    return check_gradients(in, [&] { return mdsp::sum(in[0]); });
  });

  add_case("mean", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 7}, rng)};
    return check_gradients(in, [&] { return mdsp::mean(in[0]); });
  });

  add_case("reshape", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 4}, rng)};
    Tensor<double> p = Tensor<double>::randn({4, 6}, rng);
    return check_gradients(in, [&] { return project(mdsp::reshape(in[0], {4, 6}), p); });
  });

  add_case("slice_channels", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 5, 3, 3}, rng)};
    Tensor<double> p = Tensor<double>::randn({2, 3, 3, 3}, rng);
    return check_gradients(in,
                           [&] { return project(mdsp::slice_channels(in[0], 1, 4), p); });
  });

  add_case("concat_channels", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 1, 3, 3}, rng),
                                   Tensor<double>::randn({2, 2, 3, 3}, rng),
                                   Tensor<double>::randn({2, 3, 3, 3}, rng)};
    Tensor<double> p = Tensor<double>::randn({2, 6, 3, 3}, rng);
    return check_gradients(in, [&] {
      return project(mdsp::concat_channels<double>({in[0], in[1], in[2]}), p);
    });
  });

  add_case("conv2d 1x1", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 5, 5}, rng),
                                   Tensor<double>::randn({4, 3, 1, 1}, rng),
                                   Tensor<double>::randn({4}, rng)};
    Tensor<double> p = Tensor<double>::randn({2, 4, 5, 5}, rng);
    return check_gradients(in, [&] {
      return project(mdsp::conv2d(in[0], in[1], in[2], 1, 0), p);
    });
  });

  add_case("conv2d 3x3 s1 p1", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 6, 6}, rng),
                                   Tensor<double>::randn({2, 3, 3, 3}, rng),
                                   Tensor<double>::randn({2}, rng)};
    Tensor<double> p = Tensor<double>::randn({2, 2, 6, 6}, rng);
    return check_gradients(in, [&] {
      return project(mdsp::conv2d(in[0], in[1], in[2], 1, 1), p);
    });
  });

  add_case("conv2d 3x3 s2 bias-free", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({1, 2, 7, 7}, rng),
                                   Tensor<double>::randn({3, 2, 3, 3}, rng)};
    Tensor<double> p = Tensor<double>::randn({1, 3, 4, 4}, rng);
    return check_gradients(in, [&] {
      return project(mdsp::conv2d(in[0], in[1], Tensor<double>(), 2, 1), p);
    });
  });

  add_case("conv2d 5x5 p2", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({1, 2, 8, 8}, rng),
                                   Tensor<double>::randn({2, 2, 5, 5}, rng),
                                   Tensor<double>::randn({2}, rng)};
    Tensor<double> p = Tensor<double>::randn({1, 2, 8, 8}, rng);
    return check_gradients(in, [&] {
      return project(mdsp::conv2d(in[0], in[1], in[2], 1, 2), p);
    });
  });

  add_case("maxpool2d 2x2 s2", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::zeros({2, 2, 6, 6})};
    fill_distinct(in[0], rng);
    Tensor<double> p = Tensor<double>::randn({2, 2, 3, 3}, rng);
    return check_gradients(in, [&] { return project(mdsp::maxpool2d(in[0], 2, 2, 0), p); });
  });

  add_case("maxpool2d 5x5 s1 p2", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::zeros({1, 2, 8, 8})};
    fill_distinct(in[0], rng);
    Tensor<double> p = Tensor<double>::randn({1, 2, 8, 8}, rng);
    return check_gradients(in, [&] { return project(mdsp::maxpool2d(in[0], 5, 1, 2), p); });
  });

  add_case("upsample_nearest x2", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 4, 4}, rng)};
    Tensor<double> p = Tensor<double>::randn({2, 3, 8, 8}, rng);
    return check_gradients(in, [&] { return project(mdsp::upsample_nearest(in[0], 2), p); });
  });

  add_case("batchnorm2d training", 1e-3, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({3, 4, 5, 5}, rng),
                                   Tensor<double>::randn({4}, rng),
                                   Tensor<double>::randn({4}, rng)};
    Tensor<double> rmean = Tensor<double>::zeros({4});
    Tensor<double> rvar = Tensor<double>::filled({4}, 1.0);
    Tensor<double> p = Tensor<double>::randn({3, 4, 5, 5}, rng);
    return check_gradients(in, [&] {
      return project(mdsp::batchnorm2d(in[0], in[1], in[2], rmean, rvar, true), p);
    });
  });

  add_case("batchnorm2d eval", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 4, 4}, rng),
                                   Tensor<double>::randn({3}, rng),
                                   Tensor<double>::randn({3}, rng)};
    Rng stat_rng(seed + 99);
    Tensor<double> rmean = Tensor<double>::randn({3}, stat_rng);
    Tensor<double> rvar = Tensor<double>::randn({3}, stat_rng);
    for (std::int64_t i = 0; i < 3; ++i)
      rvar.data()[i] = std::abs(rvar.data()[i]) + 0.5;
    Tensor<double> p = Tensor<double>::randn({2, 3, 4, 4}, rng);
    return check_gradients(in, [&] {
      return project(mdsp::batchnorm2d(in[0], in[1], in[2], rmean, rvar, false), p);
    });
  });

  add_case("mse_loss", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 4}, rng)};
    Tensor<double> target = Tensor<double>::randn({2, 3, 4}, rng);
    return check_gradients(in, [&] { return mdsp::mse_loss(in[0], target); });
  });

  add_case("masked_mse_sum", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 3, 4, 4}, rng)};
    Tensor<double> target = Tensor<double>::randn({2, 3, 4, 4}, rng);
    Tensor<double> mask = Tensor<double>::zeros({2, 3, 4, 4});
    for (std::int64_t i = 0; i < mask.numel(); ++i)
      mask.data()[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
    return check_gradients(in, [&] { return mdsp::masked_mse_sum(in[0], target, mask); });
  });

  add_case("masked_bce_with_logits_sum", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 2, 4, 4}, rng)};
    for (std::int64_t i = 0; i < in[0].numel(); ++i) in[0].data()[i] *= 2.0;
    Tensor<double> target = Tensor<double>::zeros({2, 2, 4, 4});
    Tensor<double> mask = Tensor<double>::zeros({2, 2, 4, 4});
    for (std::int64_t i = 0; i < mask.numel(); ++i) {
      target.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      mask.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    return check_gradients(
        in, [&] { return mdsp::masked_bce_with_logits_sum(in[0], target, mask); });
  });

  add_case("softmax_cross_entropy_pixels", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::randn({2, 4, 3, 3}, rng)};
    std::vector<int> labels(2 * 3 * 3);
    for (auto& l : labels) l = rng.uniform_int(-1, 3);
    labels[0] = 2;  // guarantee at least one valid label
    return check_gradients(
        in, [&] { return mdsp::softmax_cross_entropy_pixels(in[0], labels, -1); });
  });

  add_case("weighted_sum", 1e-4, [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> in{Tensor<double>::scalar(rng.normal()),
                                   Tensor<double>::scalar(rng.normal()),
                                   Tensor<double>::scalar(rng.normal())};
    return check_gradients(in, [&] {
      return mdsp::weighted_sum<double>({in[0], in[1], in[2]}, {0.3, -1.2, 2.0});
    });
  });

  return cases;
}

struct SuiteOutcome {
  bool ok = true;
  double worst = 0;
  std::int64_t coords = 0;
  std::string failures;
};

inline SuiteOutcome run_per_op_suite(int num_seeds) {
  SuiteOutcome out;
  for (const OpCase& c : op_cases()) {
    double case_worst = 0;
    for (int s = 0; s < num_seeds; ++s) {
      const Result r = c.run(1000 + static_cast<std::uint64_t>(s));
      case_worst = std::max(case_worst, r.max_rel_err);
      out.coords += r.coords;
    }
    out.worst = std::max(out.worst, case_worst);
    if (case_worst > c.tol) {
      out.ok = false;
      std::ostringstream os;
      os << "  " << c.name << ": max rel err " << case_worst << " > tol " << c.tol << "\n";
      out.failures += os.str();
    }
  }
  return out;
}

// Full-network gradient check: a reduced-width all-task network built in
// double precision, loss over real encoded targets, finite differences at
// randomly sampled parameter and input-image coordinates.
inline SuiteOutcome run_composed_check(int num_seeds, int coords_per_seed,
                                       double tol = 1e-3) {
  using mdsp::Network;
  using mdsp::NetworkSpec;

  NetworkSpec spec = mdsp::default_spec();
  spec.width_mult = 0.0625f;
  spec.input_size = 64;
  spec.anchors = mdsp::default_anchors(64);
  const int S = spec.input_size;

  mdsp::GenSpec gen;
  gen.image_size = S;
  gen.min_slots = 2;
  gen.max_slots = 2;

  SuiteOutcome out;
  for (int s = 0; s < num_seeds; ++s) {
    const std::uint64_t seed = 500 + static_cast<std::uint64_t>(s);
    Network<double> net(spec, seed);

    const mdsp::Sample sample = mdsp::generate_scene(gen, seed + 77);
    std::vector<double> img_vals(sample.image.values().begin(), sample.image.values().end());
    Tensor<double> img = Tensor<double>::from_vector({1, 3, S, S}, std::move(img_vals));
    img.set_requires_grad(true);

    const mdsp::EncodedBatch enc = mdsp::encode_batch({sample}, spec);
    mdsp::DetectTargets<double> dt;
    for (int i = 0; i < 3; ++i) {
      dt.obj[static_cast<size_t>(i)] = enc.detect.obj[static_cast<size_t>(i)].cast<double>();
      dt.pos_mask[static_cast<size_t>(i)] =
          enc.detect.pos_mask[static_cast<size_t>(i)].cast<double>();
      dt.noobj_mask[static_cast<size_t>(i)] =
          enc.detect.noobj_mask[static_cast<size_t>(i)].cast<double>();
      dt.box[static_cast<size_t>(i)] = enc.detect.box[static_cast<size_t>(i)].cast<double>();
      dt.box_mask[static_cast<size_t>(i)] =
          enc.detect.box_mask[static_cast<size_t>(i)].cast<double>();
      dt.cls[static_cast<size_t>(i)] = enc.detect.cls[static_cast<size_t>(i)];
    }
    const Tensor<double> paf_t = enc.paf_targets.cast<double>();
    const Tensor<double> hm_t = enc.heatmap_targets.cast<double>();

    auto loss_fn = [&]() -> Tensor<double> {
      mdsp::NetworkOutput<double> o = net.forward(img, true);
      mdsp::PartialLosses<double> pl;
      pl.dct = mdsp::detection_loss(*o.detect, dt, spec);
      pl.seg = mdsp::softmax_cross_entropy_pixels(*o.seg_logits, enc.seg_labels, -1);
      pl.pose = mdsp::pose_loss(*o.pose, paf_t, hm_t);
      return mdsp::total_loss(pl, {1.0, 1.0, 1.0}, spec.task_mask);
    };

    // One backward pass, then finite differences at sampled coordinates.
    net.params().zero_grads();
    img.zero_grad();
    Tensor<double> loss = loss_fn();
    mdsp::backward(loss);

    std::vector<Tensor<double>*> trainables;
    for (auto& e : net.params().entries())
      if (e.trainable) trainables.push_back(&e.tensor);

    Rng pick(seed * 31 + 7);
    const double h = 1e-6;
    for (int c = 0; c < coords_per_seed; ++c) {
      Tensor<double>* t = nullptr;
      std::int64_t idx = 0;
      if (c < 3) {
        t = &img;
        idx = pick.uniform_int(0, static_cast<int>(img.numel()) - 1);
      } else {
        t = trainables[static_cast<size_t>(
            pick.uniform_int(0, static_cast<int>(trainables.size()) - 1))];
        idx = pick.uniform_int(0, static_cast<int>(t->numel()) - 1);
      }
      double* slot = t->data() + idx;
      const double orig = *slot;
      const double ad = t->has_grad() ? t->grad()[static_cast<size_t>(idx)] : 0.0;
      // The loss surface of the full network has very large third
      // derivatives at some coordinates (batchnorm divides by per-channel
      // deviations that can be small), so the central-difference step is
      // refined until truncation error stops dominating. Roundoff stays
      // negligible in double at these gradient magnitudes.
      double best = std::numeric_limits<double>::infinity();
      {
        mdsp::NoGradGuard ng;
        for (double hc : {h, h * 0.1, h * 0.01}) {
          *slot = orig + hc;
          const double fp = loss_fn().item();
          *slot = orig - hc;
          const double fm = loss_fn().item();
          *slot = orig;
          best = std::min(best, rel_err(ad, (fp - fm) / (2 * hc)));
          if (best <= tol) break;
        }
      }
      out.worst = std::max(out.worst, best);
      ++out.coords;
    }
  }
  if (out.worst > tol) {
    out.ok = false;
    std::ostringstream os;
    os << "  composed network: max rel err " << out.worst << " > tol " << tol << "\n";
    out.failures += os.str();
  }
  return out;
}

}  // namespace fdcheck
