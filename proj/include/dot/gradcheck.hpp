#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dot/losses.hpp"
#include "dot/model.hpp"
#include "dot/tensor.hpp"

namespace dot {

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double threshold = 0.0;
  int instances = 0;
  bool pass() const { return max_rel_err < threshold; }
};

namespace detail {

inline Tensor frozen(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
  std::size_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d));
}

inline Tensor checked_input(Shape shape, Rng& rng, double lo = -1.5,
                            double hi = 1.5) {
  Tensor t = frozen(std::move(shape), rng, lo, hi);
  t.impl()->requires_grad = true;
  return t;
}

// Fixed linear functional pinning the whole Jacobian into one scalar.
inline Tensor scalarize(const Tensor& out, const Tensor& w) {
  return sum(mul(out, w));
}

// Twice Richardson-extrapolated central differences,
//   (64 D(h/4) - 20 D(h/2) + D(h)) / 45,
// cancelling the h^2 and h^4 truncation terms. The relative-error floor of
// 1e-8 in the denominator demands absolute agreement near 1e-12 on
// zero-gradient coordinates of an O(1) loss, which a plain central
// difference cannot reach in double precision at any step size.
inline double grad_check_extrapolated(
    const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 4e-3) {
  x.zero_grad();
  Tensor loss = f(x);
  loss.backward();
  std::vector<double> ad = x.grad();
  auto central = [&](std::size_t i, double step) {
    const double orig = x.data()[i];
    x.data()[i] = orig + step;
    double fp;
    {
      NoGradGuard ng;
      fp = f(x).item();
    }
    x.data()[i] = orig - step;
    double fm;
    {
      NoGradGuard ng;
      fm = f(x).item();
    }
    x.data()[i] = orig;
    return (fp - fm) / (2.0 * step);
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fd = (64.0 * central(i, h / 4) - 20.0 * central(i, h / 2) +
                       central(i, h)) /
                      45.0;
    const double rel =
        std::abs(fd - ad[i]) / std::max(1e-8, std::abs(fd) + std::abs(ad[i]));
    worst = std::max(worst, rel);
  }
  return worst;
}

// matmul with a deliberately wrong backward; negative control proving the
// suite catches gradient bugs.
inline Tensor corrupted_matmul(const Tensor& a, const Tensor& b) {
  Tensor good = matmul(a, b);
  std::vector<double> data = good.data();
  return make_node(good.shape(), std::move(data), {a, b},
                   [](TensorImpl& self) {
                     auto& pa = *self.parents[0];
                     if (pa.requires_grad) {
                       auto& g = ensure_grad(pa);
                       g[0] += 0.5;  // bogus contribution
                     }
                   });
}

}  // namespace detail

// Runs every registered differentiable op and loss composition through the
// central finite-difference checker on seeded random instances.
inline std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed,
                                                     int instances = 20,
                                                     bool corrupt = false) {
  std::vector<GradCheckRow> rows;
  auto run = [&](const std::string& name, double threshold, int reps,
                 const std::function<double(Rng&)>& one) {
    GradCheckRow row{name, 0.0, threshold, reps};
    for (int i = 0; i < reps; ++i) {
      Rng rng(mix_seed(tag_seed(seed, name), static_cast<std::uint64_t>(i)));
      row.max_rel_err = std::max(row.max_rel_err, one(rng));
    }
    rows.push_back(row);
  };

  const double op_tol = 1e-5;
  const double loss_tol = 1e-4;

  run("add", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({3, 4}, rng);
    Tensor y = detail::frozen({3, 4}, rng);
    Tensor w = detail::frozen({3, 4}, rng);
    return grad_check(
        [&](const Tensor& t) { return detail::scalarize(add(t, y), w); }, x);
  });

  run("scale", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({2, 5}, rng);
    Tensor w = detail::frozen({2, 5}, rng);
    const double c = rng.uniform(-2.0, 2.0);
    return grad_check(
        [&](const Tensor& t) { return detail::scalarize(scale(t, c), w); }, x);
  });

  run("mul", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({4, 3}, rng);
    Tensor y = detail::frozen({4, 3}, rng);
    Tensor w = detail::frozen({4, 3}, rng);
    return grad_check(
        [&](const Tensor& t) { return detail::scalarize(mul(t, y), w); }, x);
  });

  run(corrupt ? "matmul[corrupted]" : "matmul", op_tol, instances,
      [corrupt](Rng& rng) {
        Tensor a = detail::checked_input({3, 4}, rng);
        Tensor b = detail::checked_input({4, 2}, rng);
        Tensor w = detail::frozen({3, 2}, rng);
        auto mm = [corrupt](const Tensor& x, const Tensor& y) {
          return corrupt ? detail::corrupted_matmul(x, y) : matmul(x, y);
        };
        double e1 = grad_check(
            [&](const Tensor& t) { return detail::scalarize(mm(t, b), w); }, a);
        double e2 = grad_check(
            [&](const Tensor& t) { return detail::scalarize(mm(a, t), w); }, b);
        return std::max(e1, e2);
      });

  run("transpose", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({3, 5}, rng);
    Tensor w = detail::frozen({5, 3}, rng);
    return grad_check(
        [&](const Tensor& t) { return detail::scalarize(transpose(t), w); }, x);
  });

  run("add_row_bias", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({4, 6}, rng);
    Tensor b = detail::checked_input({6}, rng);
    Tensor w = detail::frozen({4, 6}, rng);
    double e1 = grad_check(
        [&](const Tensor& t) { return detail::scalarize(add_row_bias(t, b), w); },
        x);
    double e2 = grad_check(
        [&](const Tensor& t) { return detail::scalarize(add_row_bias(x, t), w); },
        b);
    return std::max(e1, e2);
  });

  run("concat_slice_reshape", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({3, 4}, rng);
    Tensor y = detail::frozen({2, 4}, rng);
    Tensor w = detail::frozen({8, 7}, rng);
    return grad_check(
        [&](const Tensor& t) {
          Tensor cat = concat_rows({t, y, slice_rows(t, 1, 2)});
          Tensor cols = concat_cols({cat, scale(cat, 0.5)});
          return detail::scalarize(reshape(cols, {8, 7}), w);
        },
        x);
  });

  run("softmax", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({3, 5}, rng, -3.0, 3.0);
    Tensor w = detail::frozen({3, 5}, rng);
    return grad_check(
        [&](const Tensor& t) { return detail::scalarize(softmax(t), w); }, x);
  });

  run("layer_norm", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({3, 6}, rng);
    Tensor g = detail::checked_input({6}, rng, 0.5, 1.5);
    Tensor b = detail::checked_input({6}, rng);
    Tensor w = detail::frozen({3, 6}, rng);
    double e1 = grad_check(
        [&](const Tensor& t) { return detail::scalarize(layer_norm(t, g, b), w); },
        x);
    double e2 = grad_check(
        [&](const Tensor& t) { return detail::scalarize(layer_norm(x, t, b), w); },
        g);
    double e3 = grad_check(
        [&](const Tensor& t) { return detail::scalarize(layer_norm(x, g, t), w); },
        b);
    return std::max({e1, e2, e3});
  });

  run("gelu", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({4, 4}, rng, -3.0, 3.0);
    Tensor w = detail::frozen({4, 4}, rng);
    return grad_check(
        [&](const Tensor& t) { return detail::scalarize(gelu(t), w); }, x);
  });

  run("l2_normalize", op_tol, instances, [](Rng& rng) {
    Tensor x = detail::checked_input({3, 5}, rng);
    for (auto& v : x.data()) v += (v >= 0 ? 0.5 : -0.5);  // keep norms healthy
    Tensor w = detail::frozen({3, 5}, rng);
    return grad_check(
        [&](const Tensor& t) { return detail::scalarize(l2_normalize(t), w); },
        x);
  });

  run("cross_entropy", op_tol, instances, [](Rng& rng) {
    Tensor logits = detail::checked_input({5, 3}, rng, -2.0, 2.0);
    std::vector<int> labels(5);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_index(3));
    return grad_check(
        [&](const Tensor& t) { return cross_entropy_with_logits(t, labels); },
        logits);
  });

  run("self_attention", op_tol, instances, [](Rng& rng) {
    DotVitConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.head_dim = 4;
    cfg.num_heads = 2;
    cfg.depth = 1;
    cfg.num_classes = 2;
    DotVitModel model = DotVitModel::init(cfg, rng.next_u64());
    Tensor x = detail::checked_input({cfg.seq_len(), cfg.embed_dim}, rng);
    Tensor w = detail::frozen({cfg.seq_len(), cfg.embed_dim}, rng);
    return grad_check(
        [&](const Tensor& t) {
          return detail::scalarize(model.self_attention(t, 0), w);
        },
        x);
  });

  // Loss terms, checked against the raw (pre-normalization) feature inputs.
  auto loss_model = [](Rng& rng) {
    DotVitConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.head_dim = 4;
    cfg.num_heads = 2;
    cfg.depth = 1;
    cfg.num_classes = 3;
    return DotVitModel::init(cfg, rng.next_u64());
  };
  auto random_batch = [](Rng& rng, std::size_t bs, std::size_t bt,
                         std::size_t d, std::size_t k) {
    BatchFeatures bf;
    bf.fs_src = detail::checked_input({bs, d}, rng);
    bf.ft_src = detail::checked_input({bs, d}, rng);
    bf.fs_tgt = detail::checked_input({bt, d}, rng);
    bf.ft_tgt = detail::checked_input({bt, d}, rng);
    bf.source_labels.resize(bs);
    bf.target_pseudo_labels.resize(bt);
    for (auto& l : bf.source_labels) l = static_cast<int>(rng.uniform_index(k));
    for (auto& l : bf.target_pseudo_labels)
      l = static_cast<int>(rng.uniform_index(k));
    return bf;
  };

  run("sup_loss_source", loss_tol, instances, [&](Rng& rng) {
    DotVitModel model = loss_model(rng);
    BatchFeatures bf = random_batch(rng, 4, 3, 8, 3);
    return grad_check(
        [&](const Tensor&) { return sup_loss_source(bf, model); }, bf.fs_src);
  });

  run("sup_loss_target", loss_tol, instances, [&](Rng& rng) {
    DotVitModel model = loss_model(rng);
    BatchFeatures bf = random_batch(rng, 4, 3, 8, 3);
    return grad_check(
        [&](const Tensor&) { return sup_loss_target(bf, model); }, bf.ft_tgt);
  });

  run("contrastive_source", loss_tol, instances, [&](Rng& rng) {
    BatchFeatures bf = random_batch(rng, 5, 4, 8, 3);
    double e1 = grad_check(
        [&](const Tensor&) { return contrastive_source(bf, 0.3).loss; },
        bf.fs_tgt);
    double e2 = grad_check(
        [&](const Tensor&) { return contrastive_source(bf, 0.3).loss; },
        bf.fs_src);
    return std::max(e1, e2);
  });

  run("contrastive_target", loss_tol, instances, [&](Rng& rng) {
    BatchFeatures bf = random_batch(rng, 5, 4, 8, 3);
    double e1 = grad_check(
        [&](const Tensor&) { return contrastive_target(bf, 0.3).loss; },
        bf.ft_src);
    double e2 = grad_check(
        [&](const Tensor&) { return contrastive_target(bf, 0.3).loss; },
        bf.ft_tgt);
    return std::max(e1, e2);
  });

  run("diff_regularizer", loss_tol, instances, [&](Rng& rng) {
    BatchFeatures bf = random_batch(rng, 4, 3, 8, 3);
    double worst = 0.0;
    for (Tensor t : {bf.fs_src, bf.ft_src, bf.fs_tgt, bf.ft_tgt})
      worst = std::max(worst, grad_check([&](const Tensor&) {
                         return diff_regularizer(bf);
                       },
                                         t));
    return worst;
  });

  run("total_loss", loss_tol, instances, [&](Rng& rng) {
    DotVitModel model = loss_model(rng);
    BatchFeatures bf = random_batch(rng, 4, 3, 8, 3);
    LossWeights w;
    double worst = 0.0;
    for (Tensor t : {bf.fs_src, bf.ft_src, bf.fs_tgt, bf.ft_tgt})
      worst = std::max(worst, grad_check([&](const Tensor&) {
                         return total_loss(bf, model, w).value;
                       },
                                         t));
    return worst;
  });

  // Cross-entropy through the encoder and source head, checked against
  // every model parameter on a 2-image batch with depth 1.
  run("dot_vit_end_to_end", loss_tol, std::min(instances, 5), [&](Rng& rng) {
    DotVitConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.head_dim = 4;
    cfg.num_heads = 2;
    cfg.depth = 1;
    cfg.num_classes = 2;
    DotVitModel model = DotVitModel::init(cfg, rng.next_u64());
    Tensor images = detail::frozen({2, 1, 8, 8}, rng, 0.0, 1.0);
    std::vector<int> ys = {0, 1};
    auto forward = [&]() {
      EncoderOutput enc = model.encode(images);
      return cross_entropy_with_logits(model.classify(enc.fs, 0), ys);
    };
    double worst = 0.0;
    for (Parameter* p : model.parameters())
      worst = std::max(worst, detail::grad_check_extrapolated(
                                  [&](const Tensor&) { return forward(); },
                                  p->tensor));
    return worst;
  });

  return rows;
}

}  // namespace dot
