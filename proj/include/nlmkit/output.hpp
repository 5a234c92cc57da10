#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nlmkit/corpus.hpp"
#include "nlmkit/matrix.hpp"
#include "nlmkit/rng.hpp"

namespace nlmkit {

enum class StrategyKind { Softmax, DSoftmax, Hsm, TargetSampling, Nce, Weaknorm };

std::string_view strategy_name(StrategyKind k);

struct DsoftmaxBand {
  int64_t size = 0;  // words in the band, in frequency-id order
  int64_t dim = 0;   // output embedding width for those words
};

// Two-level word hierarchy: every word id maps to (cluster, index within
// cluster) and the within indices form 0..|cluster|-1.
struct HsmAssignment {
  int32_t num_clusters = 0;
  std::vector<int32_t> cluster_of;
  std::vector<int32_t> within_of;

  void validate(int64_t vocab) const;
  std::vector<std::vector<WordId>> members(int64_t vocab) const;
};

struct StrategySpec {
  StrategyKind kind = StrategyKind::Softmax;

  // dsoftmax: bands cover ids 0..V in frequency order, dims non-increasing
  std::vector<DsoftmaxBand> bands;

  // hsm
  HsmAssignment hsm;

  // target sampling: distractors drawn uniformly without replacement
  int64_t sample_size = 0;

  // nce: k noise draws per data point; posteriors use k * noise(w); the data
  // term is up-weighted by data_weight so the effective data/noise ratio is
  // configurable independently of the drawn count (default k/50 -> 1/50).
  int64_t nce_k = 100;
  double nce_data_weight = 2.0;
  std::vector<double> noise;  // unigram distribution over V, strictly positive

  // weaknorm: base term -s(w|x) plus a Bernoulli(gamma)-sampled
  // (alpha/gamma) * logZ or (logZ)^2 penalty; bound squashes every logit
  // through 10*tanh(x/5) in training and evaluation alike.
  double alpha = 1.0;
  double gamma = 1.0;
  bool squared = false;
  bool bound = false;

  void validate(int64_t vocab, int64_t dk) const;
};

// Unigram noise with add-one smoothing so every word is sampleable.
std::vector<double> make_unigram_noise(std::span<const int64_t> counts);

// Sampled state fixed per batch: freezing a plan makes the sampled losses
// deterministic functions of (h, params), which the gradient checks rely on.
struct BatchPlan {
  std::vector<WordId> candidates;   // target sampling: sorted, contains all batch targets
  std::vector<WordId> noise_draws;  // nce: l * k draws
  std::vector<uint8_t> penalty;     // weaknorm: per-row Bernoulli(gamma) flags
};

struct UpdateOpts {
  double lr = 0.1;
  double clip = 5.0;  // element-wise on the summed batch gradient; <= 0 off
};

template <typename T>
struct ParamBlock {
  std::string name;
  Mat<T>* mat;
};

// One interface over the seven output strategies: training loss and
// gradients for (h, targets), and a proper normalized distribution at
// evaluation time.
template <typename T>
class OutputLayer {
 public:
  virtual ~OutputLayer() = default;

  virtual const StrategySpec& spec() const = 0;
  virtual int64_t vocab() const = 0;
  virtual int64_t input_dim() const = 0;

  virtual BatchPlan plan(std::span<const WordId> targets, Rng& rng) const;

  // Summed training loss of the batch under a frozen plan; read-only.
  virtual double loss(const Mat<T>& h, std::span<const WordId> targets,
                      const BatchPlan& plan) const = 0;

  // Summed loss; writes dL/dh and applies one SGD update to the strategy
  // parameters touched by this batch.
  virtual double train(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan& plan,
                       Mat<T>& dh, const UpdateOpts& opts) = 0;

  // l x V probabilities, each row a proper distribution.
  virtual void full_distribution(const Mat<T>& h, Mat<T>& probs) const = 0;

  // Natural-log p(target | context) per row.
  virtual void eval_logprob(const Mat<T>& h, std::span<const WordId> targets,
                            std::span<double> out) const = 0;

  // Natural-log partition value per row. Identically 0 for HSM, whose
  // distribution is normalized by construction.
  virtual void log_z(const Mat<T>& h, std::span<double> out) const = 0;

  // Weights start at zero (a fresh model scores every word uniformly); the
  // NCE bias starts at -log V to begin near self-normalization.
  virtual void init_params() = 0;

  // PCA initialization hook; table is V x dk.
  virtual void set_output_embeddings(const Mat<T>& table) = 0;

  // Parameter blocks in checkpoint declaration order.
  virtual std::vector<ParamBlock<T>> param_blocks() = 0;

  double max_abs_logit() const { return max_abs_logit_; }

 protected:
  mutable double max_abs_logit_ = 0.0;  // diagnostic for non-finite aborts
};

template <typename T>
std::unique_ptr<OutputLayer<T>> make_output_layer(StrategySpec spec, int64_t vocab, int64_t dk);

// Nearest-rank percentile (1-based rank ceil(p/100 * n)) of a sample.
double nearest_rank_percentile(std::span<const double> values, double pct);

struct Dispersion {
  double p10 = 0.0;
  double p50 = 0.0;
  double p90 = 0.0;
};

// Percentile summary of log Z over a set of rows of final hidden states.
template <typename T>
Dispersion partition_dispersion(const OutputLayer<T>& layer, const Mat<T>& h);

Dispersion dispersion_from_values(std::span<const double> log_z_values);

}  // namespace nlmkit
