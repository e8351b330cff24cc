#include "wsd/trainer.hpp"

#include <cmath>

#include "doctest.h"
#include "support/oracles.hpp"
#include "wsd/error.hpp"
#include "wsd/rng.hpp"

using namespace wsd;

namespace {

// Separable two-class bags: class-1 bags carry a small cluster of shifted
// instances on a coordinate grid.
std::vector<Bag> toy_dataset(int64_t num_bags, int64_t side, int64_t d, double shift,
                             uint64_t seed) {
  Rng rng(seed);
  std::vector<Bag> bags;
  for (int64_t b = 0; b < num_bags; ++b) {
    Bag bag;
    bag.id = "toy_" + std::to_string(b);
    bag.n = side * side;
    bag.d = d;
    bag.label = b % 2;
    for (int32_t r = 0; r < side; ++r) {
      for (int32_t c = 0; c < side; ++c) bag.coords.push_back({r, c});
    }
    bag.embeddings.resize(static_cast<size_t>(bag.n * d));
    for (double& x : bag.embeddings) x = rng.normal();
    if (bag.label == 1) {
      const int64_t blob = 2 + static_cast<int64_t>(rng.below(3));
      const int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(bag.n - blob)));
      for (int64_t i = start; i < start + blob; ++i) {
        for (int64_t j = 0; j < d; ++j) bag.embeddings[static_cast<size_t>(i * d + j)] += shift;
      }
    }
    bags.push_back(std::move(bag));
  }
  return bags;
}

WsdConfig tiny_model_config(int64_t f) {
  WsdConfig c;
  c.feature_dim = f;
  c.heads = 2;
  c.landmarks = 8;
  c.agg_hidden = 16;
  return c;
}

}  // namespace

TEST_CASE("train config defaults follow the experimental setup") {
  TrainConfig tc;
  CHECK(tc.lr == 1e-5);
  CHECK(tc.epochs == 100);
  CHECK(tc.folds == 5);
  CHECK(tc.clusters == 10);
  CHECK(tc.beta1 == 0.9);
  CHECK(tc.beta2 == 0.999);
  CHECK(tc.adam_eps == 1e-8);
  tc.lr = 0.0;
  CHECK_THROWS_AS(tc.validate(), ArgumentError);
}

TEST_CASE("first adam step moves by roughly -lr * sign(g)") {
  WsdConfig cfg = tiny_model_config(8);
  cfg.disable_wsda = true;
  cfg.disable_serg = true;
  WsdModel model = WsdModel::init(cfg, 1);
  AdamState state = AdamState::for_model(model);
  TrainConfig tc;
  tc.lr = 1e-2;
  // Plant a gradient on the classifier bias.
  Tensor b = model.cls_b;
  {
    Graph g;
    GraphScope scope(g);
    g.backward(sum_all(mul(b, Tensor::from({2}, {3.0, -0.5}))));
  }
  const double before0 = b.values()[0], before1 = b.values()[1];
  adam_step(model, state, tc);
  CHECK(b.values()[0] == doctest::Approx(before0 - tc.lr).epsilon(1e-6));
  CHECK(b.values()[1] == doctest::Approx(before1 + tc.lr).epsilon(1e-6));
}

TEST_CASE("adam matches an independent reference trajectory on a quadratic") {
  // Implementation side: a one-parameter model trained on f(x) = (x-3)^2.
  WsdConfig cfg = tiny_model_config(8);
  cfg.disable_wsda = true;
  cfg.disable_serg = true;
  cfg.num_classes = 2;
  WsdModel model = WsdModel::init(cfg, 2);
  TrainConfig tc;
  tc.lr = 0.1;
  // Use one coordinate of the classifier bias as the scalar parameter.
  Tensor x = model.cls_b;
  x.impl()->data[0] = 0.0;
  AdamState state = AdamState::for_model(model);

  // Reference: textbook Adam coded separately.
  double rx = 0.0, rm = 0.0, rv = 0.0;
  for (int step = 1; step <= 10; ++step) {
    {
      Graph g;
      GraphScope scope(g);
      auto x0 = slice_last(x, 0, 1);
      auto diff = sub(x0, Tensor::scalar(3.0));
      g.backward(mul(diff, diff));
    }
    adam_step(model, state, tc);
    model.zero_grads();

    const double rg = 2.0 * (rx - 3.0);
    rm = 0.9 * rm + 0.1 * rg;
    rv = 0.999 * rv + 0.001 * rg * rg;
    const double mhat = rm / (1.0 - std::pow(0.9, step));
    const double vhat = rv / (1.0 - std::pow(0.999, step));
    rx -= tc.lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::abs(x.values()[0] - rx) < 1e-12);
  }
}

TEST_CASE("adam rejects non-finite gradients by parameter name") {
  WsdConfig cfg = tiny_model_config(8);
  cfg.disable_wsda = true;
  cfg.disable_serg = true;
  WsdModel model = WsdModel::init(cfg, 3);
  AdamState state = AdamState::for_model(model);
  {
    Graph g;
    GraphScope scope(g);
    g.backward(sum_all(model.cls_b));
  }
  model.cls_b.impl()->grad[0] = std::nan("");
  TrainConfig tc;
  try {
    adam_step(model, state, tc);
    FAIL("expected TrainError");
  } catch (const TrainError& e) {
    CHECK(std::string(e.what()).find("cls.b") != std::string::npos);
  }
}

TEST_CASE("auc handles perfect separation and full ties") {
  std::vector<int64_t> labels = {0, 0, 1, 1};
  std::vector<std::vector<double>> perfect = {{0.9, 0.1}, {0.8, 0.2}, {0.1, 0.9}, {0.2, 0.8}};
  auto m = compute_metrics(labels, perfect, 2);
  CHECK(m.auc_defined);
  CHECK(m.auc == doctest::Approx(1.0));
  CHECK(m.acc == doctest::Approx(1.0));
  CHECK(m.f1 == doctest::Approx(1.0));

  std::vector<std::vector<double>> ties = {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}};
  auto mt = compute_metrics(labels, ties, 2);
  CHECK(mt.auc == doctest::Approx(0.5));
}

TEST_CASE("auc equals brute-force pair counting, including ties") {
  std::vector<int64_t> labels = {1, 0, 1, 0, 1, 0};
  std::vector<double> scores = {0.9, 0.9, 0.7, 0.3, 0.2, 0.2};
  std::vector<std::vector<double>> probs;
  for (double s : scores) probs.push_back({1.0 - s, s});
  auto m = compute_metrics(labels, probs, 2);
  std::vector<int> int_labels(labels.begin(), labels.end());
  CHECK(m.auc == doctest::Approx(oracle::pair_count_auc(scores, int_labels)).epsilon(1e-12));

  Rng rng(77);
  for (int rep = 0; rep < 30; ++rep) {
    const size_t n = 4 + rng.below(20);
    std::vector<int64_t> ls(n);
    std::vector<int> li(n);
    std::vector<double> sc(n);
    std::vector<std::vector<double>> pr(n);
    bool has0 = false, has1 = false;
    for (size_t i = 0; i < n; ++i) {
      ls[i] = static_cast<int64_t>(rng.below(2));
      li[i] = static_cast<int>(ls[i]);
      has0 = has0 || ls[i] == 0;
      has1 = has1 || ls[i] == 1;
      sc[i] = std::round(rng.uniform() * 8.0) / 8.0;  // force ties
      pr[i] = {1.0 - sc[i], sc[i]};
    }
    if (!has0 || !has1) continue;
    auto mm = compute_metrics(ls, pr, 2);
    CHECK(mm.auc == doctest::Approx(oracle::pair_count_auc(sc, li)).epsilon(1e-12));
  }
}

TEST_CASE("single-class evaluation leaves auc undefined but computes the rest") {
  std::vector<int64_t> labels = {1, 1, 1};
  std::vector<std::vector<double>> probs = {{0.2, 0.8}, {0.6, 0.4}, {0.3, 0.7}};
  auto m = compute_metrics(labels, probs, 2);
  CHECK_FALSE(m.auc_defined);
  CHECK(m.acc == doctest::Approx(2.0 / 3.0));
  CHECK(m.f1 == doctest::Approx(0.8));
}

TEST_CASE("stratified folds partition bags with balanced class counts") {
  Rng rng(5);
  std::vector<int64_t> labels;
  for (int i = 0; i < 50; ++i) labels.push_back(i < 30 ? 0 : 1);
  const auto fold_of = stratified_folds(labels, 5, 9);
  std::vector<std::vector<int64_t>> per_fold_class(5, std::vector<int64_t>(2, 0));
  for (size_t i = 0; i < labels.size(); ++i) {
    per_fold_class[static_cast<size_t>(fold_of[i])][static_cast<size_t>(labels[i])]++;
  }
  for (int f = 0; f < 5; ++f) {
    CHECK(per_fold_class[static_cast<size_t>(f)][0] == 6);  // 30/5
    CHECK(per_fold_class[static_cast<size_t>(f)][1] == 4);  // 20/5
  }
  CHECK_THROWS_AS(stratified_folds(std::vector<int64_t>{0, 1, 0}, 5, 1), ArgumentError);
}

TEST_CASE("training loss on one repeated bag decreases over the first epochs") {
  auto bags = toy_dataset(2, 6, 8, 3.0, 11);
  WsdConfig wc = tiny_model_config(8);
  WsdModel model = WsdModel::init(wc, 12);
  TrainConfig tc;
  tc.lr = 1e-3;
  AdamState state = AdamState::for_model(model);
  SampledSequence seq = sample_bag(bags[1], 100.0, 4, wc, 13);
  double prev = 1e300;
  for (int epoch = 0; epoch < 10; ++epoch) {
    Graph g;
    double loss_val;
    {
      GraphScope scope(g);
      Tensor loss = cross_entropy(forward(seq, model), bags[1].label);
      loss_val = loss.item();
      g.backward(loss);
    }
    CHECK(loss_val <= prev + 1e-12);
    prev = loss_val;
    adam_step(model, state, tc);
    model.zero_grads();
  }
}

TEST_CASE("cross-validation is deterministic and partitions every bag once") {
  auto bags = toy_dataset(12, 5, 6, 3.0, 21);
  TrainConfig tc;
  tc.folds = 3;
  tc.epochs = 2;
  tc.lr = 1e-3;
  tc.alpha = 100.0;
  tc.clusters = 3;
  tc.seed = 4;
  WsdConfig wc = tiny_model_config(6);
  wc.heads = 2;
  const FoldReport a = run_cv(bags, tc, wc);
  const FoldReport b = run_cv(bags, tc, wc);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.folds.size() == 3);

  std::vector<int64_t> labels;
  for (const auto& bag : bags) labels.push_back(bag.label);
  const auto fold_of = stratified_folds(labels, tc.folds, tc.seed);
  std::vector<int64_t> count(3, 0);
  for (int64_t f : fold_of) count[static_cast<size_t>(f)]++;
  CHECK(count[0] + count[1] + count[2] == 12);

  TrainConfig bad = tc;
  bad.folds = 13;
  CHECK_THROWS_AS(run_cv(bags, bad, wc), ArgumentError);
}

TEST_CASE("parallel fold execution reproduces the single-threaded report") {
  auto bags = toy_dataset(9, 5, 6, 3.0, 31);
  TrainConfig tc;
  tc.folds = 3;
  tc.epochs = 1;
  tc.lr = 1e-3;
  tc.alpha = 100.0;
  tc.clusters = 3;
  tc.seed = 8;
  WsdConfig wc = tiny_model_config(6);
  const FoldReport serial = run_cv(bags, tc, wc);
  tc.jobs = 3;
  const FoldReport parallel = run_cv(bags, tc, wc);
  CHECK(serial.to_json() == parallel.to_json());
}

TEST_CASE("a separable toy task trains to high accuracy") {
  auto bags = toy_dataset(16, 6, 8, 3.5, 41);
  TrainConfig tc;
  tc.folds = 4;
  tc.epochs = 12;
  tc.lr = 2e-3;
  tc.alpha = 100.0;
  tc.clusters = 4;
  tc.seed = 5;
  WsdConfig wc = tiny_model_config(8);
  const FoldReport report = run_cv(bags, tc, wc);
  CHECK(report.mean.auc_defined);
  CHECK(report.mean.auc >= 0.9);
}

TEST_CASE("memory bench scales with the sampling ratio") {
  auto bags = toy_dataset(2, 24, 8, 3.0, 51);  // 576 instances per bag
  TrainConfig tc;
  tc.clusters = 5;
  tc.seed = 3;
  WsdConfig wc = tiny_model_config(8);
  const auto rows = bench_memory(bags, {100.0, 60.0, 20.0}, tc, wc);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].alpha == 100.0);
  CHECK(rows[0].ratio == doctest::Approx(1.0));
  CHECK(rows[0].peak_bytes >= rows[1].peak_bytes);
  CHECK(rows[1].peak_bytes >= rows[2].peak_bytes);
  CHECK(rows[2].ratio <= 0.6);

  const auto csv = bench_csv(rows, tc.seed);
  CHECK(csv.find("alpha,peak_bytes,ratio") != std::string::npos);
  CHECK(csv.find("# seed=3") != std::string::npos);
  CHECK(csv.find("# ratios_non_increasing=true") != std::string::npos);

  CHECK_THROWS_AS(bench_memory(bags, {}, tc, wc), ArgumentError);
}

TEST_CASE("bench reports identical peaks for identical shapes") {
  auto bags = toy_dataset(1, 16, 8, 3.0, 61);
  TrainConfig tc;
  tc.clusters = 4;
  WsdConfig wc = tiny_model_config(8);
  const auto r1 = bench_memory(bags, {100.0}, tc, wc);
  const auto r2 = bench_memory(bags, {100.0}, tc, wc);
  CHECK(r1[0].peak_bytes == r2[0].peak_bytes);
}
