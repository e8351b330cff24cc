#include "wsd/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "wsd/error.hpp"
#include "wsd/rng.hpp"

namespace wsd {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ArgumentError("train config: lr must be positive");
  if (epochs < 1) throw ArgumentError("train config: epochs must be >= 1");
  if (folds < 2) throw ArgumentError("train config: folds must be >= 2");
  if (!(alpha > 0.0) || alpha > 100.0) throw ArgumentError("train config: alpha outside (0,100]");
  if (clusters < 1) throw ArgumentError("train config: clusters must be >= 1");
  if (jobs < 1) throw ArgumentError("train config: jobs must be >= 1");
}

AdamState AdamState::for_model(const WsdModel& model) {
  AdamState s;
  for (const auto& [name, t] : model.parameters()) {
    s.m.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    s.v.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
  return s;
}

void adam_step(const WsdModel& model, AdamState& state, const TrainConfig& config) {
  const auto params = model.parameters();
  if (state.m.size() != params.size()) {
    throw ArgumentError("adam state does not match the model's parameter list");
  }
  state.t++;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != t.impl()->data.size()) {
      throw ArgumentError("adam moment shape mismatch for " + params[p].first);
    }
    const bool has = t.has_grad();
    const double* g = has ? t.grad().data() : nullptr;
    double* x = t.data();
    for (size_t i = 0; i < m.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      if (!std::isfinite(gi)) {
        throw TrainError("non-finite gradient in parameter " + params[p].first);
      }
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      x[i] -= config.lr * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
  }
}

namespace {

double binary_rank_auc(const std::vector<double>& scores, const std::vector<int>& is_pos) {
  // Mann-Whitney statistic with midranks for ties.
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based midrank
    for (size_t t = i; t <= j; ++t) rank[order[t]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  int64_t pos = 0, neg = 0;
  for (size_t t = 0; t < n; ++t) {
    if (is_pos[t]) {
      rank_sum += rank[t];
      pos++;
    } else {
      neg++;
    }
  }
  return (rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1)) /
         (static_cast<double>(pos) * static_cast<double>(neg));
}

struct PrCounts {
  int64_t tp = 0, fp = 0, fn = 0;
};

double f1_from(const PrCounts& c) {
  const double denom = 2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp) +
                       static_cast<double>(c.fn);
  if (denom == 0.0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / denom;
}

}  // namespace

Metrics compute_metrics(const std::vector<int64_t>& labels,
                        const std::vector<std::vector<double>>& probs, int64_t num_classes) {
  if (labels.size() != probs.size() || labels.empty()) {
    throw ArgumentError("metrics: labels and probabilities must align and be non-empty");
  }
  Metrics out;
  const size_t n = labels.size();
  std::vector<int64_t> pred(n);
  int64_t correct = 0;
  for (size_t i = 0; i < n; ++i) {
    int64_t arg = 0;
    for (int64_t c = 1; c < num_classes; ++c) {
      if (probs[i][static_cast<size_t>(c)] > probs[i][static_cast<size_t>(arg)]) arg = c;
    }
    pred[i] = arg;
    if (arg == labels[i]) correct++;
  }
  out.acc = static_cast<double>(correct) / static_cast<double>(n);

  std::vector<int64_t> class_count(static_cast<size_t>(num_classes), 0);
  for (int64_t l : labels) class_count[static_cast<size_t>(l)]++;
  const int64_t present =
      static_cast<int64_t>(std::count_if(class_count.begin(), class_count.end(),
                                         [](int64_t c) { return c > 0; }));
  if (present >= 2) {
    if (num_classes == 2) {
      std::vector<double> scores(n);
      std::vector<int> is_pos(n);
      for (size_t i = 0; i < n; ++i) {
        scores[i] = probs[i][1];
        is_pos[i] = labels[i] == 1 ? 1 : 0;
      }
      out.auc = binary_rank_auc(scores, is_pos);
    } else {
      double sum = 0.0;
      int64_t used = 0;
      for (int64_t c = 0; c < num_classes; ++c) {
        if (class_count[static_cast<size_t>(c)] == 0 ||
            class_count[static_cast<size_t>(c)] == static_cast<int64_t>(n)) {
          continue;
        }
        std::vector<double> scores(n);
        std::vector<int> is_pos(n);
        for (size_t i = 0; i < n; ++i) {
          scores[i] = probs[i][static_cast<size_t>(c)];
          is_pos[i] = labels[i] == c ? 1 : 0;
        }
        sum += binary_rank_auc(scores, is_pos);
        used++;
      }
      out.auc = sum / static_cast<double>(used);
    }
    out.auc_defined = true;
  }

  if (num_classes == 2) {
    PrCounts c;
    for (size_t i = 0; i < n; ++i) {
      if (pred[i] == 1 && labels[i] == 1) c.tp++;
      if (pred[i] == 1 && labels[i] == 0) c.fp++;
      if (pred[i] == 0 && labels[i] == 1) c.fn++;
    }
    out.f1 = f1_from(c);
  } else {
    double sum = 0.0;
    for (int64_t cl = 0; cl < num_classes; ++cl) {
      PrCounts c;
      for (size_t i = 0; i < n; ++i) {
        if (pred[i] == cl && labels[i] == cl) c.tp++;
        if (pred[i] == cl && labels[i] != cl) c.fp++;
        if (pred[i] != cl && labels[i] == cl) c.fn++;
      }
      sum += f1_from(c);
    }
    out.f1 = sum / static_cast<double>(num_classes);
  }
  return out;
}

std::vector<double> predict_probs(const WsdModel& model, const SampledSequence& seq) {
  Tensor logits = forward(seq, model);
  Tensor p = softmax(logits);
  return p.values();
}

Metrics evaluate(const WsdModel& model, const std::vector<SampledSequence>& seqs,
                 const std::vector<int64_t>& labels, int64_t num_classes) {
  std::vector<std::vector<double>> probs;
  probs.reserve(seqs.size());
  for (const auto& s : seqs) probs.push_back(predict_probs(model, s));
  return compute_metrics(labels, probs, num_classes);
}

std::vector<int64_t> stratified_folds(const std::vector<int64_t>& labels, int64_t folds,
                                      uint64_t seed) {
  if (folds < 2) throw ArgumentError("stratified_folds: need at least two folds");
  if (static_cast<int64_t>(labels.size()) < folds) {
    throw ArgumentError("stratified_folds: fewer bags than folds");
  }
  const int64_t num_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int64_t> fold_of(labels.size(), 0);
  Rng rng(split_seed(seed, 0xf01d));
  int64_t dealt = 0;
  for (int64_t c = 0; c < num_classes; ++c) {
    std::vector<int64_t> idx;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) idx.push_back(static_cast<int64_t>(i));
    }
    rng.shuffle(idx);
    for (size_t i = 0; i < idx.size(); ++i) {
      fold_of[static_cast<size_t>(idx[i])] = (dealt + static_cast<int64_t>(i)) % folds;
    }
    dealt += static_cast<int64_t>(idx.size());
  }
  return fold_of;
}

SampledSequence sample_bag(const Bag& bag, double alpha, int64_t clusters,
                           const WsdConfig& config, uint64_t seed) {
  const int64_t k = std::min<int64_t>(clusters, bag.n);
  const Clustering clustering = kmeans(bag.embeddings, bag.n, bag.d, k, split_seed(seed, 1));
  const auto kept = stratified_sample(clustering, alpha, split_seed(seed, 2));
  SampledSequence seq =
      build_sequence(bag, kept, config.window_base, config.sequence_multiple());
  seq.alpha = alpha;
  return seq;
}

TrainedFold train_fold(const std::vector<Bag>& bags, const std::vector<int64_t>& fold_of,
                       int64_t fold, const TrainConfig& tc, const WsdConfig& wc) {
  const uint64_t fold_seed = split_seed(tc.seed, 0xbeef + static_cast<uint64_t>(fold));
  WsdModel model = WsdModel::init(wc, split_seed(fold_seed, 7));

  std::vector<int64_t> train_idx, test_idx;
  for (size_t i = 0; i < bags.size(); ++i) {
    (fold_of[i] == fold ? test_idx : train_idx).push_back(static_cast<int64_t>(i));
  }
  if (train_idx.empty() || test_idx.empty()) {
    throw ArgumentError("fold " + std::to_string(fold) + " has an empty split");
  }

  // One sampling draw per bag per fold.
  std::vector<SampledSequence> seqs(bags.size());
  for (size_t i = 0; i < bags.size(); ++i) {
    seqs[i] = sample_bag(bags[i], tc.alpha, tc.clusters, wc,
                         split_seed(fold_seed, 0x5a5a + static_cast<uint64_t>(i)));
  }

  AdamState adam = AdamState::for_model(model);
  Rng order_rng(split_seed(fold_seed, 0x0e0e));
  size_t peak = 0;
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<int64_t> order(train_idx);
    order_rng.shuffle(order);
    for (int64_t i : order) {
      Graph g;
      {
        GraphScope scope(g);
        Tensor loss = cross_entropy(forward(seqs[static_cast<size_t>(i)], model),
                                    bags[static_cast<size_t>(i)].label);
        g.backward(loss);
      }
      peak = std::max(peak, g.peak_bytes());
      adam_step(model, adam, tc);
      model.zero_grads();
    }
  }

  std::vector<SampledSequence> test_seqs;
  std::vector<int64_t> test_labels;
  for (int64_t i : test_idx) {
    test_seqs.push_back(seqs[static_cast<size_t>(i)]);
    test_labels.push_back(bags[static_cast<size_t>(i)].label);
  }
  TrainedFold out{std::move(model), {}};
  out.entry.fold = fold;
  out.entry.metrics = evaluate(out.model, test_seqs, test_labels, wc.num_classes);
  out.entry.peak_bytes = peak;
  return out;
}

namespace {

void accumulate_stats(FoldReport& report) {
  const auto n = static_cast<double>(report.folds.size());
  auto stat = [&](auto get) {
    double mean = 0.0;
    for (const auto& f : report.folds) mean += get(f);
    mean /= n;
    double var = 0.0;
    for (const auto& f : report.folds) {
      const double d = get(f) - mean;
      var += d * d;
    }
    return std::pair<double, double>(mean, std::sqrt(var / n));
  };
  auto [am, as] = stat([](const FoldEntry& f) { return f.metrics.acc; });
  report.mean.acc = am;
  report.stddev.acc = as;
  auto [fm, fs] = stat([](const FoldEntry& f) { return f.metrics.f1; });
  report.mean.f1 = fm;
  report.stddev.f1 = fs;
  const bool all_auc = std::all_of(report.folds.begin(), report.folds.end(),
                                   [](const FoldEntry& f) { return f.metrics.auc_defined; });
  if (all_auc) {
    auto [um, us] = stat([](const FoldEntry& f) { return f.metrics.auc; });
    report.mean.auc = um;
    report.stddev.auc = us;
    report.mean.auc_defined = true;
    report.stddev.auc_defined = true;
  }
  for (const auto& f : report.folds) {
    report.max_peak_bytes = std::max(report.max_peak_bytes, f.peak_bytes);
  }
}

}  // namespace

FoldReport run_cv(const std::vector<Bag>& bags, const TrainConfig& tc, const WsdConfig& wc,
                  const std::string& checkpoint_dir) {
  tc.validate();
  wc.validate();
  if (static_cast<int64_t>(bags.size()) < tc.folds) {
    throw ArgumentError("run_cv: fewer bags than folds");
  }
  std::vector<int64_t> labels;
  for (const auto& b : bags) labels.push_back(b.label);
  const auto fold_of = stratified_folds(labels, tc.folds, tc.seed);

  FoldReport report;
  report.seed = tc.seed;
  report.folds.resize(static_cast<size_t>(tc.folds));
  std::vector<WsdModel> models(static_cast<size_t>(tc.folds));

  const int64_t jobs = std::min<int64_t>(tc.jobs, tc.folds);
  std::atomic<int64_t> next{0};
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(tc.folds));
  auto work = [&]() {
    while (true) {
      const int64_t fold = next.fetch_add(1);
      if (fold >= tc.folds) return;
      try {
        TrainedFold tf = train_fold(bags, fold_of, fold, tc, wc);
        report.folds[static_cast<size_t>(fold)] = tf.entry;
        models[static_cast<size_t>(fold)] = std::move(tf.model);
      } catch (...) {
        errors[static_cast<size_t>(fold)] = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    work();
  } else {
    for (int64_t j = 0; j < jobs; ++j) workers.emplace_back(work);
    for (auto& w : workers) w.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  accumulate_stats(report);
  if (!checkpoint_dir.empty()) {
    std::filesystem::create_directories(checkpoint_dir);
    for (int64_t f = 0; f < tc.folds; ++f) {
      save_checkpoint(models[static_cast<size_t>(f)],
                      (std::filesystem::path(checkpoint_dir) /
                       ("fold_" + std::to_string(f) + ".ckpt")).string());
    }
  }
  return report;
}

std::string FoldReport::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["max_peak_bytes"] = max_peak_bytes;
  j["folds"] = nlohmann::json::array();
  for (const auto& f : folds) {
    nlohmann::json e;
    e["fold"] = f.fold;
    e["acc"] = f.metrics.acc;
    if (f.metrics.auc_defined) {
      e["auc"] = f.metrics.auc;
    } else {
      e["auc"] = nullptr;
    }
    e["f1"] = f.metrics.f1;
    e["peak_bytes"] = f.peak_bytes;
    j["folds"].push_back(e);
  }
  j["mean"] = {{"acc", mean.acc}, {"f1", mean.f1}};
  j["std"] = {{"acc", stddev.acc}, {"f1", stddev.f1}};
  if (mean.auc_defined) {
    j["mean"]["auc"] = mean.auc;
    j["std"]["auc"] = stddev.auc;
  } else {
    j["mean"]["auc"] = nullptr;
    j["std"]["auc"] = nullptr;
  }
  return j.dump(2) + "\n";
}

std::vector<BenchRow> bench_memory(const std::vector<Bag>& bags,
                                   const std::vector<double>& alphas, const TrainConfig& tc,
                                   const WsdConfig& wc) {
  if (alphas.empty()) throw ArgumentError("bench_memory: alpha list is empty");
  for (double a : alphas) {
    if (!(a > 0.0) || a > 100.0) {
      throw ArgumentError("bench_memory: alpha " + std::to_string(a) + " outside (0,100]");
    }
  }
  if (bags.empty()) throw ArgumentError("bench_memory: no bags");
  WsdModel model = WsdModel::init(wc, split_seed(tc.seed, 0x3e6c));

  auto measure = [&](double alpha) {
    size_t peak = 0;
    for (size_t i = 0; i < bags.size(); ++i) {
      SampledSequence seq = sample_bag(bags[i], alpha, tc.clusters, wc,
                                       split_seed(tc.seed, 0xa1fa + static_cast<uint64_t>(i)));
      Graph g;
      {
        GraphScope scope(g);
        Tensor loss = cross_entropy(forward(seq, model), bags[i].label);
        g.backward(loss);
      }
      model.zero_grads();
      peak = std::max(peak, g.peak_bytes());
    }
    return peak;
  };

  size_t base = 0;
  const bool has_full = std::find(alphas.begin(), alphas.end(), 100.0) != alphas.end();
  std::vector<BenchRow> rows;
  std::vector<std::pair<double, size_t>> measured;
  for (double a : alphas) {
    const size_t p = measure(a);
    measured.push_back({a, p});
    if (a == 100.0) base = p;
  }
  if (!has_full) base = measure(100.0);
  for (auto& [a, p] : measured) {
    rows.push_back({a, p, static_cast<double>(p) / static_cast<double>(base)});
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows, uint64_t seed) {
  std::ostringstream os;
  os << "alpha,peak_bytes,ratio\n";
  for (const auto& r : rows) {
    os << r.alpha << "," << r.peak_bytes << "," << r.ratio << "\n";
  }
  auto sorted = rows;
  std::sort(sorted.begin(), sorted.end(),
            [](const BenchRow& a, const BenchRow& b) { return a.alpha > b.alpha; });
  bool monotone = true;
  for (size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].ratio > sorted[i - 1].ratio + 1e-12) monotone = false;
  }
  os << "# seed=" << seed << "\n";
  os << "# ratios_non_increasing=" << (monotone ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace wsd
