#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support/gradcheck.hpp"
#include "support/instances.hpp"
#include "support/reference.hpp"
#include "vsla/errors.hpp"
#include "vsla/losses.hpp"
#include "vsla/rng.hpp"

#include <cmath>
#include <numeric>

using namespace vsla;
using inst::make_instance;

namespace {

constexpr int kInstances = 50;
constexpr double kTol = 1e-3;

}  // namespace

TEST_CASE("contrastive losses match the oracle and their finite differences") {
  for (int s = 0; s < kInstances; ++s) {
    const auto in = make_instance(static_cast<std::uint64_t>(s));
    CAPTURE(s);
    const double sc = in.sim.logit_scale;
    const auto t2i = loss_t2i(in.visual, in.labels, in.text, in.text_labels, in.sim);
    const auto i2t = loss_i2t(in.visual, in.labels, in.text, in.text_labels, in.sim);
    CHECK(t2i.value == doctest::Approx(ref::t2i(in.visual, in.labels, in.text, in.text_labels, sc)).epsilon(1e-10));
    CHECK(i2t.value == doctest::Approx(ref::i2t(in.visual, in.labels, in.text, in.text_labels, sc)).epsilon(1e-10));

    auto f_t2i_v = [&](const Matrix& v) { return ref::t2i(v, in.labels, in.text, in.text_labels, sc); };
    auto f_t2i_t = [&](const Matrix& t) { return ref::t2i(in.visual, in.labels, t, in.text_labels, sc); };
    auto f_i2t_v = [&](const Matrix& v) { return ref::i2t(v, in.labels, in.text, in.text_labels, sc); };
    auto f_i2t_t = [&](const Matrix& t) { return ref::i2t(in.visual, in.labels, t, in.text_labels, sc); };
    CHECK(gc::relative_error(t2i.d_visual, gc::numeric_grad(f_t2i_v, in.visual)) < kTol);
    CHECK(gc::relative_error(t2i.d_text, gc::numeric_grad(f_t2i_t, in.text)) < kTol);
    CHECK(gc::relative_error(i2t.d_visual, gc::numeric_grad(f_i2t_v, in.visual)) < kTol);
    CHECK(gc::relative_error(i2t.d_text, gc::numeric_grad(f_i2t_t, in.text)) < kTol);
  }
}

TEST_CASE("v2sce and id losses match the oracle and their finite differences") {
  for (int s = 0; s < kInstances; ++s) {
    const auto in = make_instance(100 + static_cast<std::uint64_t>(s));
    CAPTURE(s);
    const double sc = in.sim.logit_scale, ls = 0.1;
    const auto v2s = loss_v2sce(in.visual, in.labels, in.gallery, in.sim, ls);
    CHECK(v2s.value == doctest::Approx(ref::v2sce(in.visual, in.labels, in.gallery, sc, ls)).epsilon(1e-10));
    auto fv = [&](const Matrix& v) { return ref::v2sce(v, in.labels, in.gallery, sc, ls); };
    auto fg = [&](const Matrix& g) { return ref::v2sce(in.visual, in.labels, g, sc, ls); };
    CHECK(gc::relative_error(v2s.d_input, gc::numeric_grad(fv, in.visual)) < kTol);
    CHECK(gc::relative_error(v2s.d_gallery, gc::numeric_grad(fg, in.gallery)) < kTol);

    const auto id = loss_id(in.logits, in.labels, ls);
    CHECK(id.value == doctest::Approx(ref::id_loss(in.logits, in.labels, ls)).epsilon(1e-10));
    auto fl = [&](const Matrix& z) { return ref::id_loss(z, in.labels, ls); };
    CHECK(gc::relative_error(id.d_input, gc::numeric_grad(fl, in.logits)) < kTol);
  }
}

TEST_CASE("batch-hard triplet matches exhaustive mining and its finite differences") {
  for (bool soft : {false, true})
    for (int s = 0; s < kInstances; ++s) {
      const auto in = make_instance(200 + static_cast<std::uint64_t>(s));
      CAPTURE(s);
      CAPTURE(soft);
      const double margin = 0.3;
      const auto tri = loss_triplet(in.visual, in.labels, margin, soft);
      CHECK(tri.value == doctest::Approx(ref::triplet(in.visual, in.labels, margin, soft)).epsilon(1e-10));
      auto f = [&](const Matrix& v) { return ref::triplet(v, in.labels, margin, soft); };
      CHECK(gc::relative_error(tri.d_embeddings, gc::numeric_grad(f, in.visual)) < kTol);
    }
}

TEST_CASE("stage-two objective combines the weighted terms") {
  LossWeights w;
  for (int s = 0; s < kInstances; ++s) {
    const auto in = make_instance(300 + static_cast<std::uint64_t>(s));
    CAPTURE(s);
    const double sc = in.sim.logit_scale;
    auto total = [&](const Matrix& v, const Matrix& z) {
      return ref::v2sce(v, in.labels, in.gallery, sc, w.label_smoothing) +
             w.triplet * ref::triplet(v, in.labels, w.margin) + w.id * ref::id_loss(z, in.labels, w.label_smoothing) +
             w.i2t * ref::i2t(v, in.labels, in.text, in.text_labels, sc) +
             w.t2i * ref::t2i(v, in.labels, in.text, in.text_labels, sc);
    };
    const auto out = loss_stage2(in.visual, in.logits, in.labels, in.gallery, in.sim, w);
    CHECK(out.total == doctest::Approx(total(in.visual, in.logits)).epsilon(1e-10));
    CHECK(gc::relative_error(out.d_visual, gc::numeric_grad([&](const Matrix& v) { return total(v, in.logits); },
                                                            in.visual)) < kTol);
    CHECK(gc::relative_error(out.d_logits, gc::numeric_grad([&](const Matrix& z) { return total(in.visual, z); },
                                                            in.logits)) < kTol);
  }
}

TEST_CASE("uniform similarities give ln B") {
  const int B = 32;
  Matrix v = Matrix::Ones(B, 4);
  std::vector<int> labels;
  for (int i = 0; i < B; ++i) labels.push_back(i / 4);
  std::vector<int> tl = {0, 1, 2, 3, 4, 5, 6, 7};
  auto rng = make_rng({5});
  const Matrix t = gaussian(8, 4, 1.0, rng);
  const auto out = loss_t2i(v, labels, t, tl, SimilarityConfig{10.0});
  CHECK(out.value == doctest::Approx(std::log(32.0)).epsilon(1e-12));
}

TEST_CASE("saturated similarities stay finite") {
  Matrix e(2, 2);
  e << 1, 0, -1, 0;
  std::vector<int> y = {0, 1};
  const SimilarityConfig sim{10.0};  // s = [[10, -10], [-10, 10]]
  const double expected = std::log1p(std::exp(-20.0));
  for (const auto& l : {loss_i2t(e, y, e, y, sim), loss_t2i(e, y, e, y, sim)}) {
    CHECK(std::isfinite(l.value));
    CHECK(l.value == doctest::Approx(expected).epsilon(1e-6));
    CHECK(l.d_visual.allFinite());
  }
  SimilarityConfig hot{1e4};
  CHECK(std::isfinite(loss_i2t(e, y, e, y, hot).value));
}

TEST_CASE("triplet examples") {
  std::vector<int> y = {0, 0, 1, 1};
  Matrix e(4, 2);
  e << 0, 0, 0.2, 0, 0.8, 0, 1.0, 0;
  auto out = loss_triplet(e, y, 0.3);
  CHECK(out.hardest_positive[0] == doctest::Approx(0.2));
  CHECK(out.hardest_negative[0] == doctest::Approx(0.8));
  CHECK(out.value == doctest::Approx(0.0));

  e << 0, 0, 0.9, 0, 0.1, 0, -0.1, 0;
  out = loss_triplet(e, y, 0.3);
  CHECK(out.hardest_positive[0] == doctest::Approx(0.9));
  CHECK(out.hardest_negative[0] == doctest::Approx(0.1));
  CHECK(std::max(0.0, out.hardest_positive[0] - out.hardest_negative[0] + 0.3) == doctest::Approx(1.1));

  CHECK_THROWS_AS(loss_triplet(e, std::vector<int>{0, 0, 0, 0}, 0.3), ConfigError);
  CHECK_THROWS_AS(loss_triplet(e, std::vector<int>{0, 0, 1, 2}, 0.3), ConfigError);
}

TEST_CASE("label smoothing targets") {
  const auto q = smoothed_target(2, 4, 0.1);
  REQUIRE(q.size() == 4);
  CHECK(q[2] == doctest::Approx(0.925));
  CHECK(q[0] == doctest::Approx(0.025));
  CHECK(std::accumulate(q.begin(), q.end(), 0.0) == doctest::Approx(1.0));
  CHECK_THROWS(smoothed_target(4, 4, 0.1));
}

TEST_CASE("normalisation rejects zero rows") {
  CHECK_THROWS_AS(normalize_rows(Matrix::Zero(2, 3)), std::domain_error);
  auto rng = make_rng({3});
  const Matrix x = gaussian(4, 5, 1.0, rng), g = gaussian(4, 5, 1.0, rng);
  auto f = [&](const Matrix& m) { return normalize_rows(m).cwiseProduct(g).sum(); };
  CHECK(gc::relative_error(normalize_rows_backward(x, g), gc::numeric_grad(f, x)) < kTol);
}

TEST_CASE("loss weights are validated") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.id = -1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w = LossWeights{};
  w.label_smoothing = 1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}
