#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wsd/bag.hpp"
#include "wsd/model.hpp"
#include "wsd/sampler.hpp"

namespace wsd {

struct TrainConfig {
  double lr = 1e-5;
  int64_t epochs = 100;
  // Batch size is fixed at one bag per step.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t folds = 5;
  uint64_t seed = 0;
  double alpha = 20.0;   // sampling percentage
  int64_t clusters = 10; // K for the per-bag feature clustering
  int64_t jobs = 1;

  void validate() const;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  int64_t t = 0;

  static AdamState for_model(const WsdModel& model);
};

// One bias-corrected Adam update over every model parameter. Parameters
// without a gradient buffer are treated as zero-gradient. Throws TrainError
// naming the parameter on a non-finite gradient.
void adam_step(const WsdModel& model, AdamState& state, const TrainConfig& config);

struct Metrics {
  double acc = 0.0;
  double auc = 0.0;
  bool auc_defined = false;
  double f1 = 0.0;
};

// Accuracy by argmax, AUC by the rank statistic with ties counted 0.5
// (macro one-vs-rest beyond two classes), F1 on the positive class or
// macro-F1. AUC is undefined when only one class is present.
Metrics compute_metrics(const std::vector<int64_t>& labels,
                        const std::vector<std::vector<double>>& probs, int64_t num_classes);

std::vector<double> predict_probs(const WsdModel& model, const SampledSequence& seq);

Metrics evaluate(const WsdModel& model, const std::vector<SampledSequence>& seqs,
                 const std::vector<int64_t>& labels, int64_t num_classes);

struct FoldEntry {
  int64_t fold = 0;
  Metrics metrics;
  size_t peak_bytes = 0;
};

struct FoldReport {
  uint64_t seed = 0;
  std::vector<FoldEntry> folds;
  Metrics mean;
  Metrics stddev;
  size_t max_peak_bytes = 0;

  std::string to_json() const;
};

// Label-stratified fold assignment: fold id per bag, each class dealt
// round-robin after a seeded shuffle.
std::vector<int64_t> stratified_folds(const std::vector<int64_t>& labels, int64_t folds,
                                      uint64_t seed);

// Clusters and samples one bag (single draw per bag per fold) into the
// model-ready sequence.
SampledSequence sample_bag(const Bag& bag, double alpha, int64_t clusters,
                           const WsdConfig& config, uint64_t seed);

struct TrainedFold {
  WsdModel model;
  FoldEntry entry;
};

// Trains on every bag outside the fold and evaluates on the fold.
TrainedFold train_fold(const std::vector<Bag>& bags, const std::vector<int64_t>& fold_of,
                       int64_t fold, const TrainConfig& tc, const WsdConfig& wc);

// Full k-fold cross-validation; fold models are discarded unless
// checkpoint_dir is given (one checkpoint per fold is written there).
FoldReport run_cv(const std::vector<Bag>& bags, const TrainConfig& tc, const WsdConfig& wc,
                  const std::string& checkpoint_dir = "");

struct BenchRow {
  double alpha = 0.0;
  size_t peak_bytes = 0;
  double ratio = 0.0;  // relative to the alpha=100 measurement
};

// One forward+backward per bag per sampling ratio, reporting the maximum
// peak of live tensor bytes. The alpha=100 reference is measured even when
// not requested.
std::vector<BenchRow> bench_memory(const std::vector<Bag>& bags,
                                   const std::vector<double>& alphas, const TrainConfig& tc,
                                   const WsdConfig& wc);

std::string bench_csv(const std::vector<BenchRow>& rows, uint64_t seed);

}  // namespace wsd
