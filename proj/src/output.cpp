#include "nlmkit/output.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

namespace nlmkit {

std::string_view strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::Softmax: return "softmax";
    case StrategyKind::DSoftmax: return "dsoftmax";
    case StrategyKind::Hsm: return "hsm";
    case StrategyKind::TargetSampling: return "sampling";
    case StrategyKind::Nce: return "nce";
    case StrategyKind::Weaknorm: return "weaknorm";
  }
  return "?";
}

void HsmAssignment::validate(int64_t vocab) const {
  if (num_clusters < 1) throw ConfigError("hsm: num_clusters must be >= 1");
  if (static_cast<int64_t>(cluster_of.size()) != vocab ||
      static_cast<int64_t>(within_of.size()) != vocab) {
    throw ConfigError("hsm: assignment must cover every word id");
  }
  std::vector<int64_t> sizes(static_cast<size_t>(num_clusters), 0);
  for (int64_t w = 0; w < vocab; ++w) {
    int32_t c = cluster_of[static_cast<size_t>(w)];
    if (c < 0 || c >= num_clusters) throw ConfigError("hsm: cluster id out of range");
    ++sizes[static_cast<size_t>(c)];
  }
  // within indices must form 0..|cluster|-1 per cluster
  std::vector<std::vector<uint8_t>> seen(static_cast<size_t>(num_clusters));
  for (int32_t c = 0; c < num_clusters; ++c) {
    seen[static_cast<size_t>(c)].assign(static_cast<size_t>(sizes[static_cast<size_t>(c)]), 0);
  }
  for (int64_t w = 0; w < vocab; ++w) {
    int32_t c = cluster_of[static_cast<size_t>(w)];
    int32_t i = within_of[static_cast<size_t>(w)];
    if (i < 0 || i >= sizes[static_cast<size_t>(c)] || seen[static_cast<size_t>(c)][static_cast<size_t>(i)]) {
      throw ConfigError("hsm: within-cluster indices are not a bijection");
    }
    seen[static_cast<size_t>(c)][static_cast<size_t>(i)] = 1;
  }
}

std::vector<std::vector<WordId>> HsmAssignment::members(int64_t vocab) const {
  std::vector<std::vector<WordId>> out(static_cast<size_t>(num_clusters));
  std::vector<int64_t> sizes(static_cast<size_t>(num_clusters), 0);
  for (int64_t w = 0; w < vocab; ++w) ++sizes[static_cast<size_t>(cluster_of[static_cast<size_t>(w)])];
  for (int32_t c = 0; c < num_clusters; ++c) {
    out[static_cast<size_t>(c)].resize(static_cast<size_t>(sizes[static_cast<size_t>(c)]));
  }
  for (int64_t w = 0; w < vocab; ++w) {
    out[static_cast<size_t>(cluster_of[static_cast<size_t>(w)])]
       [static_cast<size_t>(within_of[static_cast<size_t>(w)])] = static_cast<WordId>(w);
  }
  return out;
}

void StrategySpec::validate(int64_t vocab, int64_t dk) const {
  switch (kind) {
    case StrategyKind::Softmax:
      break;
    case StrategyKind::DSoftmax: {
      if (bands.empty()) throw ConfigError("dsoftmax: at least one band required");
      int64_t words = 0, dims = 0, prev_dim = INT64_MAX;
      for (const auto& b : bands) {
        if (b.size < 1 || b.dim < 1) throw ConfigError("dsoftmax: band sizes and dims must be >= 1");
        if (b.dim > prev_dim) {
          throw ConfigError("dsoftmax: band dims must be non-increasing with band index");
        }
        prev_dim = b.dim;
        words += b.size;
        dims += b.dim;
      }
      if (words != vocab) {
        throw ConfigError("dsoftmax: band sizes sum to " + std::to_string(words) +
                          ", vocabulary is " + std::to_string(vocab));
      }
      if (dims != dk) {
        throw ConfigError("dsoftmax: band dims sum to " + std::to_string(dims) +
                          " but final hidden width is " + std::to_string(dk));
      }
      break;
    }
    case StrategyKind::Hsm:
      hsm.validate(vocab);
      break;
    case StrategyKind::TargetSampling:
      if (sample_size < 1) throw ConfigError("sampling: sample_size must be >= 1");
      break;
    case StrategyKind::Nce: {
      if (nce_k < 1) throw ConfigError("nce: k must be >= 1");
      if (nce_data_weight <= 0) throw ConfigError("nce: data_weight must be > 0");
      if (static_cast<int64_t>(noise.size()) != vocab) {
        throw ConfigError("nce: noise distribution must cover the vocabulary");
      }
      double sum = 0.0;
      for (double p : noise) {
        if (!(p > 0.0)) throw ConfigError("nce: noise probabilities must be strictly positive");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("nce: noise distribution must sum to 1");
      break;
    }
    case StrategyKind::Weaknorm:
      if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("weaknorm: need 0 < gamma <= 1");
      if (!(alpha > 0.0)) throw ConfigError("weaknorm: need alpha > 0");
      break;
  }
}

std::vector<double> make_unigram_noise(std::span<const int64_t> counts) {
  std::vector<double> noise(counts.size());
  double total = 0.0;
  for (size_t i = 0; i < counts.size(); ++i) total += static_cast<double>(counts[i] + 1);
  for (size_t i = 0; i < counts.size(); ++i) noise[i] = static_cast<double>(counts[i] + 1) / total;
  return noise;
}

double nearest_rank_percentile(std::span<const double> values, double pct) {
  if (values.empty()) throw ConfigError("percentile of empty sample");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  int64_t n = static_cast<int64_t>(sorted.size());
  int64_t rank = static_cast<int64_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
  rank = std::clamp<int64_t>(rank, 1, n);
  return sorted[static_cast<size_t>(rank - 1)];
}

Dispersion dispersion_from_values(std::span<const double> v) {
  return Dispersion{nearest_rank_percentile(v, 10.0), nearest_rank_percentile(v, 50.0),
                    nearest_rank_percentile(v, 90.0)};
}

namespace {

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Softmax cross-entropy over the rows of `logits` with per-row target
// columns. Returns the summed loss and converts logits in place to
// delta = y - onehot(target). Row losses are computed before the conversion.
template <typename T>
double xent_to_delta(Mat<T>& logits, std::span<const int64_t> target_cols, double* max_abs) {
  int64_t l = logits.rows, n = logits.cols;
  std::vector<double> row_loss(static_cast<size_t>(l));
  std::vector<double> row_max(static_cast<size_t>(l), 0.0);
  parallel_for(l, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T* r = logits.row(i);
      T mx = r[0];
      double ma = std::abs(static_cast<double>(r[0]));
      for (int64_t j = 1; j < n; ++j) {
        mx = std::max(mx, r[j]);
        ma = std::max(ma, std::abs(static_cast<double>(r[j])));
      }
      row_max[static_cast<size_t>(i)] = ma;
      double z = 0.0;
      for (int64_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(r[j] - mx));
      double lse = static_cast<double>(mx) + std::log(z);
      int64_t t = target_cols[static_cast<size_t>(i)];
      row_loss[static_cast<size_t>(i)] = lse - static_cast<double>(r[t]);
      for (int64_t j = 0; j < n; ++j) {
        r[j] = static_cast<T>(std::exp(static_cast<double>(r[j] - mx)) / z);
      }
      r[t] -= T{1};
    }
  });
  double loss = 0.0;
  for (double v : row_loss) loss += v;
  if (max_abs != nullptr) {
    for (double v : row_max) *max_abs = std::max(*max_abs, v);
  }
  return loss;
}

// Summed NLL of targets under row-wise softmax; logits untouched.
template <typename T>
double xent_loss_only(const Mat<T>& logits, std::span<const int64_t> target_cols) {
  int64_t l = logits.rows, n = logits.cols;
  std::vector<double> row_loss(static_cast<size_t>(l));
  parallel_for(l, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* r = logits.row(i);
      T mx = r[0];
      for (int64_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
      double z = 0.0;
      for (int64_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(r[j] - mx));
      int64_t t = target_cols[static_cast<size_t>(i)];
      row_loss[static_cast<size_t>(i)] =
          static_cast<double>(mx) + std::log(z) - static_cast<double>(r[t]);
    }
  });
  double loss = 0.0;
  for (double v : row_loss) loss += v;
  return loss;
}

template <typename T>
void softmax_rows_inplace(Mat<T>& m) {
  parallel_for(m.rows, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T* r = m.row(i);
      T mx = r[0];
      for (int64_t j = 1; j < m.cols; ++j) mx = std::max(mx, r[j]);
      double z = 0.0;
      for (int64_t j = 0; j < m.cols; ++j) z += std::exp(static_cast<double>(r[j] - mx));
      for (int64_t j = 0; j < m.cols; ++j) {
        r[j] = static_cast<T>(std::exp(static_cast<double>(r[j] - mx)) / z);
      }
    }
  });
}

template <typename T>
void colsum(const Mat<T>& m, Mat<T>& out) {
  out = Mat<T>(1, m.cols);
  for (int64_t i = 0; i < m.rows; ++i) {
    const T* r = m.row(i);
    T* o = out.row(0);
    for (int64_t j = 0; j < m.cols; ++j) o[j] += r[j];
  }
}

template <typename T>
T dot(const T* a, const T* b, int64_t n) {
  T acc[8] = {T{0}, T{0}, T{0}, T{0}, T{0}, T{0}, T{0}, T{0}};
  int64_t k = 0;
  for (; k + 8 <= n; k += 8) {
    for (int u = 0; u < 8; ++u) acc[u] += a[k + u] * b[k + u];
  }
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; k < n; ++k) s += a[k] * b[k];
  return s;
}

}  // namespace

template <typename T>
BatchPlan OutputLayer<T>::plan(std::span<const WordId>, Rng&) const {
  return {};
}

// ---------------------------------------------------------------------------
// Full-matrix family: softmax, target sampling, NCE, weaknorm. One W^{k+1} of
// V x dk plus bias; they differ in the training objective, not the shape.
// ---------------------------------------------------------------------------

template <typename T>
class FullMatrixLayer : public OutputLayer<T> {
 public:
  FullMatrixLayer(StrategySpec spec, int64_t vocab, int64_t dk)
      : spec_(std::move(spec)), V_(vocab), dk_(dk), W_(vocab, dk), b_(1, vocab) {}

  const StrategySpec& spec() const override { return spec_; }
  int64_t vocab() const override { return V_; }
  int64_t input_dim() const override { return dk_; }

  void init_params() override {
    W_.zero();
    b_.zero();
  }

  void set_output_embeddings(const Mat<T>& table) override {
    if (table.rows != V_ || table.cols != dk_) {
      throw ShapeError("output embedding table " + table.shape_str() + " does not fit " +
                       std::to_string(V_) + "x" + std::to_string(dk_));
    }
    W_ = table;
  }

  std::vector<ParamBlock<T>> param_blocks() override {
    return {{"out.W", &W_}, {"out.b", &b_}};
  }

  void full_distribution(const Mat<T>& h, Mat<T>& probs) const override {
    compute_logits(h, probs);
    softmax_rows_inplace(probs);
  }

  void eval_logprob(const Mat<T>& h, std::span<const WordId> targets,
                    std::span<double> out) const override {
    Mat<T> logits;
    compute_logits(h, logits);
    std::vector<double> lse(static_cast<size_t>(h.rows));
    logsumexp_rows(logits, std::span<double>(lse));
    for (int64_t i = 0; i < h.rows; ++i) {
      out[static_cast<size_t>(i)] =
          static_cast<double>(logits.at(i, targets[static_cast<size_t>(i)])) -
          lse[static_cast<size_t>(i)];
    }
  }

  void log_z(const Mat<T>& h, std::span<double> out) const override {
    Mat<T> logits;
    compute_logits(h, logits);
    logsumexp_rows(logits, out);
  }

 protected:
  // logits = h W^T + b, plus the strategy's score transform (weaknorm bound)
  void compute_logits(const Mat<T>& h, Mat<T>& logits) const {
    if (h.cols != dk_) {
      throw ShapeError("output layer expects h of width " + std::to_string(dk_) + ", got " +
                       h.shape_str());
    }
    logits = Mat<T>(h.rows, V_);
    gemm(h, Trans::No, W_, Trans::Yes, logits);
    add_row_vector(logits, std::span<const T>(b_.data));
    transform_logits(logits);
  }

  virtual void transform_logits(Mat<T>&) const {}

  StrategySpec spec_;
  int64_t V_;
  int64_t dk_;
  Mat<T> W_;
  Mat<T> b_;
};

// ---------------------------------------------------------------------------

template <typename T>
class SoftmaxLayer final : public FullMatrixLayer<T> {
 public:
  using FullMatrixLayer<T>::FullMatrixLayer;

  double loss(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan&) const override {
    Mat<T> logits;
    this->compute_logits(h, logits);
    std::vector<int64_t> cols(targets.begin(), targets.end());
    return xent_loss_only(logits, cols);
  }

  double train(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan&, Mat<T>& dh,
               const UpdateOpts& opts) override {
    this->compute_logits(h, logits_);
    std::vector<int64_t> cols(targets.begin(), targets.end());
    double loss = xent_to_delta(logits_, cols, &this->max_abs_logit_);
    dh = Mat<T>(h.rows, this->dk_);
    gemm(logits_, Trans::No, this->W_, Trans::No, dh);
    if (gW_.rows != this->V_) gW_ = Mat<T>(this->V_, this->dk_);
    gemm(logits_, Trans::Yes, h, Trans::No, gW_);
    colsum(logits_, gb_);
    sgd_update(this->W_, gW_, static_cast<T>(opts.lr), static_cast<T>(opts.clip));
    sgd_update(this->b_, gb_, static_cast<T>(opts.lr), static_cast<T>(opts.clip));
    return loss;
  }

 private:
  Mat<T> logits_, gW_, gb_;
};

// ---------------------------------------------------------------------------

template <typename T>
class TargetSamplingLayer final : public FullMatrixLayer<T> {
 public:
  using FullMatrixLayer<T>::FullMatrixLayer;

  BatchPlan plan(std::span<const WordId> targets, Rng& rng) const override {
    BatchPlan plan;
    std::vector<WordId> uniq(targets.begin(), targets.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    int64_t others = this->V_ - static_cast<int64_t>(uniq.size());
    int64_t want = this->spec_.sample_size;
    if (want >= others) {
      // degenerates to full softmax over every word
      if (!degenerate_logged_) {
        std::fprintf(stderr, "[sampling] sample_size %lld covers the vocabulary; using full softmax\n",
                     static_cast<long long>(want));
        degenerate_logged_ = true;
      }
      plan.candidates.resize(static_cast<size_t>(this->V_));
      for (int64_t w = 0; w < this->V_; ++w) plan.candidates[static_cast<size_t>(w)] = static_cast<WordId>(w);
      return plan;
    }
    // uniform without replacement from the complement of the batch targets
    std::unordered_set<WordId> chosen(uniq.begin(), uniq.end());
    std::vector<WordId> draws;
    draws.reserve(static_cast<size_t>(want));
    if (want * 8 < others) {
      while (static_cast<int64_t>(draws.size()) < want) {
        WordId w = static_cast<WordId>(rng.next_below(this->V_));
        if (chosen.insert(w).second) draws.push_back(w);
      }
    } else {
      std::vector<WordId> pool;
      pool.reserve(static_cast<size_t>(others));
      std::unordered_set<WordId> tset(uniq.begin(), uniq.end());
      for (int64_t w = 0; w < this->V_; ++w) {
        if (tset.find(static_cast<WordId>(w)) == tset.end()) pool.push_back(static_cast<WordId>(w));
      }
      for (int64_t i = 0; i < want; ++i) {
        int64_t j = i + rng.next_below(static_cast<int64_t>(pool.size()) - i);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        draws.push_back(pool[static_cast<size_t>(i)]);
      }
    }
    plan.candidates = std::move(uniq);
    plan.candidates.insert(plan.candidates.end(), draws.begin(), draws.end());
    std::sort(plan.candidates.begin(), plan.candidates.end());
    return plan;
  }

  double loss(const Mat<T>& h, std::span<const WordId> targets,
              const BatchPlan& plan) const override {
    Mat<T> Wc, bc, logits;
    gather(plan.candidates, Wc, bc);
    candidate_logits(h, Wc, bc, logits);
    return xent_loss_only(logits, target_cols(plan, targets));
  }

  double train(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan& plan, Mat<T>& dh,
               const UpdateOpts& opts) override {
    gather(plan.candidates, Wc_, bc_);
    candidate_logits(h, Wc_, bc_, logits_);
    auto cols = target_cols(plan, targets);
    double loss = xent_to_delta(logits_, cols, &this->max_abs_logit_);
    dh = Mat<T>(h.rows, this->dk_);
    gemm(logits_, Trans::No, Wc_, Trans::No, dh);
    Mat<T> gW(static_cast<int64_t>(plan.candidates.size()), this->dk_);
    gemm(logits_, Trans::Yes, h, Trans::No, gW);
    Mat<T> gb;
    colsum(logits_, gb);
    // only candidate rows of W receive updates
    for (size_t j = 0; j < plan.candidates.size(); ++j) {
      WordId w = plan.candidates[j];
      sgd_update(std::span<T>(this->W_.row(w), static_cast<size_t>(this->dk_)),
                 std::span<const T>(gW.row(static_cast<int64_t>(j)), static_cast<size_t>(this->dk_)),
                 static_cast<T>(opts.lr), static_cast<T>(opts.clip));
      T g = gb.at(0, static_cast<int64_t>(j));
      T clipped = opts.clip > 0 ? std::clamp(g, static_cast<T>(-opts.clip), static_cast<T>(opts.clip)) : g;
      this->b_.at(0, w) -= static_cast<T>(opts.lr) * clipped;
    }
    return loss;
  }

 private:
  void gather(std::span<const WordId> cand, Mat<T>& Wc, Mat<T>& bc) const {
    int64_t c = static_cast<int64_t>(cand.size());
    Wc = Mat<T>(c, this->dk_);
    bc = Mat<T>(1, c);
    for (int64_t j = 0; j < c; ++j) {
      const T* src = this->W_.row(cand[static_cast<size_t>(j)]);
      std::copy(src, src + this->dk_, Wc.row(j));
      bc.at(0, j) = this->b_.at(0, cand[static_cast<size_t>(j)]);
    }
  }

  void candidate_logits(const Mat<T>& h, const Mat<T>& Wc, const Mat<T>& bc, Mat<T>& logits) const {
    logits = Mat<T>(h.rows, Wc.rows);
    gemm(h, Trans::No, Wc, Trans::Yes, logits);
    add_row_vector(logits, std::span<const T>(bc.data));
  }

  std::vector<int64_t> target_cols(const BatchPlan& plan, std::span<const WordId> targets) const {
    std::vector<int64_t> cols(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
      auto it = std::lower_bound(plan.candidates.begin(), plan.candidates.end(), targets[i]);
      cols[i] = it - plan.candidates.begin();
    }
    return cols;
  }

  mutable bool degenerate_logged_ = false;
  Mat<T> Wc_, bc_, logits_;
};

// ---------------------------------------------------------------------------

template <typename T>
class NceLayer final : public FullMatrixLayer<T> {
 public:
  NceLayer(StrategySpec spec, int64_t vocab, int64_t dk)
      : FullMatrixLayer<T>(std::move(spec), vocab, dk),
        alias_(std::span<const double>(this->spec_.noise)) {
    log_k_noise_.resize(static_cast<size_t>(vocab));
    for (int64_t w = 0; w < vocab; ++w) {
      log_k_noise_[static_cast<size_t>(w)] =
          std::log(static_cast<double>(this->spec_.nce_k) * this->spec_.noise[static_cast<size_t>(w)]);
    }
  }

  void init_params() override {
    this->W_.zero();
    // start near self-normalization: exp(b) sums to about 1
    T b0 = static_cast<T>(-std::log(static_cast<double>(this->V_)));
    for (int64_t w = 0; w < this->V_; ++w) this->b_.at(0, w) = b0;
  }

  BatchPlan plan(std::span<const WordId> targets, Rng& rng) const override {
    BatchPlan plan;
    int64_t k = this->spec_.nce_k;
    plan.noise_draws.resize(targets.size() * static_cast<size_t>(k));
    for (auto& w : plan.noise_draws) w = alias_.sample(rng);
    return plan;
  }

  double loss(const Mat<T>& h, std::span<const WordId> targets,
              const BatchPlan& plan) const override {
    return run(h, targets, plan, nullptr, nullptr);
  }

  double train(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan& plan, Mat<T>& dh,
               const UpdateOpts& opts) override {
    dh = Mat<T>(h.rows, this->dk_);
    return run(h, targets, plan, &dh, &opts);
  }

 private:
  // Forward/backward over the data point and the k noise draws of each row.
  // With grads == nullptr computes the loss only.
  double run(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan& plan, Mat<T>* dh,
             const UpdateOpts* opts) const {
    int64_t l = h.rows;
    int64_t k = this->spec_.nce_k;
    double dw = this->spec_.nce_data_weight;
    int64_t per_row = k + 1;
    std::vector<WordId> words(static_cast<size_t>(l * per_row));
    for (int64_t i = 0; i < l; ++i) {
      words[static_cast<size_t>(i * per_row)] = targets[static_cast<size_t>(i)];
      for (int64_t j = 0; j < k; ++j) {
        words[static_cast<size_t>(i * per_row + 1 + j)] =
            plan.noise_draws[static_cast<size_t>(i * k + j)];
      }
    }
    // scores and loss coefficients; coef[m] = d(loss)/d(score m)
    std::vector<double> coef(static_cast<size_t>(l * per_row));
    std::vector<double> row_loss(static_cast<size_t>(l));
    std::vector<double> row_max(static_cast<size_t>(l), 0.0);
    parallel_for(l, [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        const T* hr = h.row(i);
        double loss_i = 0.0, ma = 0.0;
        for (int64_t m = 0; m < per_row; ++m) {
          WordId w = words[static_cast<size_t>(i * per_row + m)];
          double s = static_cast<double>(dot(hr, this->W_.row(w), this->dk_)) +
                     static_cast<double>(this->b_.at(0, w));
          ma = std::max(ma, std::abs(s));
          double z = s - log_k_noise_[static_cast<size_t>(w)];
          if (m == 0) {
            loss_i += dw * softplus(-z);
            coef[static_cast<size_t>(i * per_row)] = -dw * sigmoid(-z);
          } else {
            loss_i += softplus(z);
            coef[static_cast<size_t>(i * per_row + m)] = sigmoid(z);
          }
        }
        row_loss[static_cast<size_t>(i)] = loss_i;
        row_max[static_cast<size_t>(i)] = ma;
      }
    });
    double loss = 0.0;
    for (double v : row_loss) loss += v;
    for (double v : row_max) this->max_abs_logit_ = std::max(this->max_abs_logit_, v);
    if (dh == nullptr) return loss;

    // dh rows are independent
    parallel_for(l, [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        T* out = dh->row(i);
        std::fill(out, out + this->dk_, T{0});
        for (int64_t m = 0; m < per_row; ++m) {
          WordId w = words[static_cast<size_t>(i * per_row + m)];
          T c = static_cast<T>(coef[static_cast<size_t>(i * per_row + m)]);
          const T* wr = this->W_.row(w);
          for (int64_t d = 0; d < this->dk_; ++d) out[d] += c * wr[d];
        }
      }
    });
    // gradients summed over the batch, then one update per touched row
    ensure_scratch();
    std::vector<WordId> touched;
    for (int64_t i = 0; i < l; ++i) {
      const T* hr = h.row(i);
      for (int64_t m = 0; m < per_row; ++m) {
        WordId w = words[static_cast<size_t>(i * per_row + m)];
        T c = static_cast<T>(coef[static_cast<size_t>(i * per_row + m)]);
        T* g = gW_.row(w);
        if (gb_[static_cast<size_t>(w)] == T{0} && g[0] == T{0}) touched.push_back(w);
        for (int64_t d = 0; d < this->dk_; ++d) g[d] += c * hr[d];
        gb_[static_cast<size_t>(w)] += c;
      }
    }
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    T lr = static_cast<T>(opts->lr), clip = static_cast<T>(opts->clip);
    for (WordId w : touched) {
      sgd_update(std::span<T>(this->W_.row(w), static_cast<size_t>(this->dk_)),
                 std::span<const T>(gW_.row(w), static_cast<size_t>(this->dk_)), lr, clip);
      T g = gb_[static_cast<size_t>(w)];
      this->b_.at(0, w) -= lr * (clip > 0 ? std::clamp(g, -clip, clip) : g);
      std::fill(gW_.row(w), gW_.row(w) + this->dk_, T{0});
      gb_[static_cast<size_t>(w)] = T{0};
    }
    return loss;
  }

  void ensure_scratch() const {
    if (gW_.rows != this->V_) {
      gW_ = Mat<T>(this->V_, this->dk_);
      gb_.assign(static_cast<size_t>(this->V_), T{0});
    }
  }

  AliasTable alias_;
  std::vector<double> log_k_noise_;
  mutable Mat<T> gW_;
  mutable std::vector<T> gb_;
};

// ---------------------------------------------------------------------------

template <typename T>
class WeaknormLayer final : public FullMatrixLayer<T> {
 public:
  using FullMatrixLayer<T>::FullMatrixLayer;

  BatchPlan plan(std::span<const WordId> targets, Rng& rng) const override {
    BatchPlan plan;
    plan.penalty.resize(targets.size());
    for (auto& f : plan.penalty) {
      f = this->spec_.gamma >= 1.0 ? 1 : (rng.next_double() < this->spec_.gamma ? 1 : 0);
    }
    return plan;
  }

  double loss(const Mat<T>& h, std::span<const WordId> targets,
              const BatchPlan& plan) const override {
    Mat<T> logits;
    this->compute_logits(h, logits);  // bound already applied by transform
    int64_t l = h.rows;
    double pen_scale = this->spec_.alpha / this->spec_.gamma;
    std::vector<double> lse(static_cast<size_t>(l));
    logsumexp_rows(logits, std::span<double>(lse));
    double loss = 0.0;
    for (int64_t i = 0; i < l; ++i) {
      loss -= static_cast<double>(logits.at(i, targets[static_cast<size_t>(i)]));
      if (plan.penalty[static_cast<size_t>(i)]) {
        double z = lse[static_cast<size_t>(i)];
        loss += pen_scale * (this->spec_.squared ? z * z : z);
      }
    }
    return loss;
  }

  double train(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan& plan, Mat<T>& dh,
               const UpdateOpts& opts) override {
    int64_t l = h.rows;
    dh = Mat<T>(l, this->dk_);
    dh.zero();
    double pen_scale = this->spec_.alpha / this->spec_.gamma;
    double loss = 0.0;

    std::vector<int64_t> pen_rows, plain_rows;
    for (int64_t i = 0; i < l; ++i) {
      (plan.penalty[static_cast<size_t>(i)] ? pen_rows : plain_rows).push_back(i);
    }

    ensure_scratch();
    std::vector<WordId> touched;

    // plain rows need only the target's score
    for (int64_t i : plain_rows) {
      WordId t = targets[static_cast<size_t>(i)];
      const T* hr = h.row(i);
      double s = static_cast<double>(dot(hr, this->W_.row(t), this->dk_)) +
                 static_cast<double>(this->b_.at(0, t));
      this->max_abs_logit_ = std::max(this->max_abs_logit_, std::abs(s));
      double sb = s, dsb = 1.0;
      if (this->spec_.bound) {
        double th = std::tanh(s / 5.0);
        sb = 10.0 * th;
        dsb = 2.0 * (1.0 - th * th);
      }
      loss -= sb;
      double g = -dsb;
      T* gw = gW_.row(t);
      if (gb_[static_cast<size_t>(t)] == T{0} && gw[0] == T{0}) touched.push_back(t);
      for (int64_t d = 0; d < this->dk_; ++d) gw[d] += static_cast<T>(g) * hr[d];
      gb_[static_cast<size_t>(t)] += static_cast<T>(g);
      const T* wr = this->W_.row(t);
      T* out = dh.row(i);
      for (int64_t d = 0; d < this->dk_; ++d) out[d] = static_cast<T>(g) * wr[d];
    }

    // penalty rows pay for the full partition
    if (!pen_rows.empty()) {
      int64_t p = static_cast<int64_t>(pen_rows.size());
      Mat<T> hp(p, this->dk_);
      for (int64_t r = 0; r < p; ++r) {
        const T* src = h.row(pen_rows[static_cast<size_t>(r)]);
        std::copy(src, src + this->dk_, hp.row(r));
      }
      Mat<T> raw(p, this->V_);
      gemm(hp, Trans::No, this->W_, Trans::Yes, raw);
      add_row_vector(raw, std::span<const T>(this->b_.data));
      // delta = (pen'(lse) * y - onehot) * bound'(s), built in place over raw
      std::vector<double> row_loss(static_cast<size_t>(p));
      std::vector<double> row_max(static_cast<size_t>(p), 0.0);
      parallel_for(p, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
          T* row = raw.row(r);
          WordId t = targets[static_cast<size_t>(pen_rows[static_cast<size_t>(r)])];
          double ma = 0.0;
          double mx = -HUGE_VAL;
          // bounded scores and their derivative, computed in one pass
          for (int64_t j = 0; j < this->V_; ++j) {
            double s = static_cast<double>(row[j]);
            ma = std::max(ma, std::abs(s));
            if (this->spec_.bound) {
              double th = std::tanh(s / 5.0);
              bnd_[static_cast<size_t>(j)] = 10.0 * th;
              dbnd_[static_cast<size_t>(j)] = 2.0 * (1.0 - th * th);
            } else {
              bnd_[static_cast<size_t>(j)] = s;
              dbnd_[static_cast<size_t>(j)] = 1.0;
            }
            mx = std::max(mx, bnd_[static_cast<size_t>(j)]);
          }
          row_max[static_cast<size_t>(r)] = ma;
          double z = 0.0;
          for (int64_t j = 0; j < this->V_; ++j) z += std::exp(bnd_[static_cast<size_t>(j)] - mx);
          double lse = mx + std::log(z);
          double dpen = pen_scale * (this->spec_.squared ? 2.0 * lse : 1.0);
          row_loss[static_cast<size_t>(r)] =
              -bnd_[static_cast<size_t>(t)] + pen_scale * (this->spec_.squared ? lse * lse : lse);
          for (int64_t j = 0; j < this->V_; ++j) {
            double y = std::exp(bnd_[static_cast<size_t>(j)] - mx) / z;
            double delta = (dpen * y - (j == t ? 1.0 : 0.0)) * dbnd_[static_cast<size_t>(j)];
            row[j] = static_cast<T>(delta);
          }
        }
      });
      for (double v : row_loss) loss += v;
      for (double v : row_max) this->max_abs_logit_ = std::max(this->max_abs_logit_, v);

      // dh for penalty rows
      Mat<T> dhp(p, this->dk_);
      gemm(raw, Trans::No, this->W_, Trans::No, dhp);
      for (int64_t r = 0; r < p; ++r) {
        const T* src = dhp.row(r);
        T* out = dh.row(pen_rows[static_cast<size_t>(r)]);
        std::copy(src, src + this->dk_, out);
      }

      // dense update: every word's row receives the penalty gradient, merged
      // with any sparse contribution accumulated above
      T lr = static_cast<T>(opts.lr), clip = static_cast<T>(opts.clip);
      parallel_for(this->V_, [&](int64_t w0, int64_t w1) {
        std::vector<T> grad(static_cast<size_t>(this->dk_));
        for (int64_t w = w0; w < w1; ++w) {
          std::copy(gW_.row(w), gW_.row(w) + this->dk_, grad.begin());
          T gb = gb_[static_cast<size_t>(w)];
          for (int64_t r = 0; r < p; ++r) {
            T c = raw.at(r, w);
            if (c == T{0}) continue;
            const T* hr = hp.row(r);
            for (int64_t d = 0; d < this->dk_; ++d) grad[static_cast<size_t>(d)] += c * hr[d];
            gb += c;
          }
          sgd_update(std::span<T>(this->W_.row(w), static_cast<size_t>(this->dk_)),
                     std::span<const T>(grad), lr, clip);
          this->b_.at(0, w) -= lr * (clip > 0 ? std::clamp(gb, -clip, clip) : gb);
        }
      });
      for (WordId w : touched) {
        std::fill(gW_.row(w), gW_.row(w) + this->dk_, T{0});
        gb_[static_cast<size_t>(w)] = T{0};
      }
      return loss;
    }

    // sparse-only batch: update just the touched target rows
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    T lr = static_cast<T>(opts.lr), clip = static_cast<T>(opts.clip);
    for (WordId w : touched) {
      sgd_update(std::span<T>(this->W_.row(w), static_cast<size_t>(this->dk_)),
                 std::span<const T>(gW_.row(w), static_cast<size_t>(this->dk_)), lr, clip);
      T g = gb_[static_cast<size_t>(w)];
      this->b_.at(0, w) -= lr * (clip > 0 ? std::clamp(g, -clip, clip) : g);
      std::fill(gW_.row(w), gW_.row(w) + this->dk_, T{0});
      gb_[static_cast<size_t>(w)] = T{0};
    }
    return loss;
  }

 protected:
  void transform_logits(Mat<T>& logits) const override {
    if (!this->spec_.bound) return;
    parallel_for(logits.rows, [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        T* r = logits.row(i);
        for (int64_t j = 0; j < logits.cols; ++j) {
          r[j] = static_cast<T>(10.0 * std::tanh(static_cast<double>(r[j]) / 5.0));
        }
      }
    });
  }

 private:
  void ensure_scratch() const {
    if (gW_.rows != this->V_) {
      gW_ = Mat<T>(this->V_, this->dk_);
      gb_.assign(static_cast<size_t>(this->V_), T{0});
    }
    if (bnd_.size() != static_cast<size_t>(this->V_)) {
      bnd_.resize(static_cast<size_t>(this->V_));
      dbnd_.resize(static_cast<size_t>(this->V_));
    }
  }

  mutable Mat<T> gW_;
  mutable std::vector<T> gb_;
  mutable std::vector<double> bnd_, dbnd_;
};

// ---------------------------------------------------------------------------
// Differentiated softmax: per-band weight blocks against per-band slices of
// the final hidden layer; one joint softmax over all V logits. The sparse
// full matrix is never materialized.
// ---------------------------------------------------------------------------

template <typename T>
class DsoftmaxLayer final : public OutputLayer<T> {
 public:
  DsoftmaxLayer(StrategySpec spec, int64_t vocab, int64_t dk)
      : spec_(std::move(spec)), V_(vocab), dk_(dk) {
    int64_t woff = 0, hoff = 0;
    for (const auto& band : spec_.bands) {
      word_off_.push_back(woff);
      dim_off_.push_back(hoff);
      W_.emplace_back(band.size, band.dim);
      b_.emplace_back(1, band.size);
      woff += band.size;
      hoff += band.dim;
    }
  }

  const StrategySpec& spec() const override { return spec_; }
  int64_t vocab() const override { return V_; }
  int64_t input_dim() const override { return dk_; }

  void init_params() override {
    for (auto& w : W_) w.zero();
    for (auto& b : b_) b.zero();
  }

  void set_output_embeddings(const Mat<T>& table) override {
    if (table.rows != V_ || table.cols != dk_) {
      throw ShapeError("output embedding table " + table.shape_str() + " does not fit");
    }
    for (size_t j = 0; j < W_.size(); ++j) {
      for (int64_t r = 0; r < W_[j].rows; ++r) {
        const T* src = table.row(word_off_[j] + r) + dim_off_[j];
        std::copy(src, src + W_[j].cols, W_[j].row(r));
      }
    }
  }

  std::vector<ParamBlock<T>> param_blocks() override {
    std::vector<ParamBlock<T>> blocks;
    for (size_t j = 0; j < W_.size(); ++j) {
      blocks.push_back({"dsm.W" + std::to_string(j), &W_[j]});
      blocks.push_back({"dsm.b" + std::to_string(j), &b_[j]});
    }
    return blocks;
  }

  double loss(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan&) const override {
    Mat<T> logits;
    forward(h, logits);
    std::vector<int64_t> cols(targets.begin(), targets.end());
    return xent_loss_only(logits, cols);
  }

  double train(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan&, Mat<T>& dh,
               const UpdateOpts& opts) override {
    forward(h, logits_);
    std::vector<int64_t> cols(targets.begin(), targets.end());
    double loss = xent_to_delta(logits_, cols, &this->max_abs_logit_);
    dh = Mat<T>(h.rows, dk_);
    for (size_t j = 0; j < W_.size(); ++j) {
      int64_t bs = spec_.bands[j].size, bd = spec_.bands[j].dim;
      Mat<T> ds(h.rows, bs);
      copy_cols(logits_, word_off_[j], bs, ds);
      Mat<T> hs(h.rows, bd);
      copy_cols(h, dim_off_[j], bd, hs);
      Mat<T> gW(bs, bd);
      gemm(ds, Trans::Yes, hs, Trans::No, gW);
      Mat<T> gb;
      colsum(ds, gb);
      Mat<T> dhs(h.rows, bd);
      gemm(ds, Trans::No, W_[j], Trans::No, dhs);
      paste_cols(dhs, dim_off_[j], dh);
      sgd_update(W_[j], gW, static_cast<T>(opts.lr), static_cast<T>(opts.clip));
      sgd_update(b_[j], gb, static_cast<T>(opts.lr), static_cast<T>(opts.clip));
    }
    return loss;
  }

  void full_distribution(const Mat<T>& h, Mat<T>& probs) const override {
    forward(h, probs);
    softmax_rows_inplace(probs);
  }

  void eval_logprob(const Mat<T>& h, std::span<const WordId> targets,
                    std::span<double> out) const override {
    Mat<T> logits;
    forward(h, logits);
    std::vector<double> lse(static_cast<size_t>(h.rows));
    logsumexp_rows(logits, std::span<double>(lse));
    for (int64_t i = 0; i < h.rows; ++i) {
      out[static_cast<size_t>(i)] =
          static_cast<double>(logits.at(i, targets[static_cast<size_t>(i)])) - lse[static_cast<size_t>(i)];
    }
  }

  void log_z(const Mat<T>& h, std::span<double> out) const override {
    Mat<T> logits;
    forward(h, logits);
    logsumexp_rows(logits, out);
  }

 private:
  void forward(const Mat<T>& h, Mat<T>& logits) const {
    if (h.cols != dk_) {
      throw ShapeError("dsoftmax expects h of width " + std::to_string(dk_) + ", got " + h.shape_str());
    }
    logits = Mat<T>(h.rows, V_);
    for (size_t j = 0; j < W_.size(); ++j) {
      int64_t bs = spec_.bands[j].size, bd = spec_.bands[j].dim;
      Mat<T> hs(h.rows, bd);
      copy_cols(h, dim_off_[j], bd, hs);
      Mat<T> lj(h.rows, bs);
      gemm(hs, Trans::No, W_[j], Trans::Yes, lj);
      add_row_vector(lj, std::span<const T>(b_[j].data));
      paste_cols(lj, word_off_[j], logits);
    }
  }

  static void copy_cols(const Mat<T>& src, int64_t off, int64_t n, Mat<T>& dst) {
    for (int64_t i = 0; i < src.rows; ++i) {
      const T* s = src.row(i) + off;
      std::copy(s, s + n, dst.row(i));
    }
  }

  static void paste_cols(const Mat<T>& src, int64_t off, Mat<T>& dst) {
    for (int64_t i = 0; i < src.rows; ++i) {
      std::copy(src.row(i), src.row(i) + src.cols, dst.row(i) + off);
    }
  }

  StrategySpec spec_;
  int64_t V_;
  int64_t dk_;
  std::vector<Mat<T>> W_;
  std::vector<Mat<T>> b_;
  std::vector<int64_t> word_off_, dim_off_;
  Mat<T> logits_;
};

// ---------------------------------------------------------------------------
// Two-level hierarchical softmax: p(w|x) = p(c|x) p(w|c,x). Per row only the
// cluster matrix and the target's cluster receive gradients.
// ---------------------------------------------------------------------------

template <typename T>
class HsmLayer final : public OutputLayer<T> {
 public:
  HsmLayer(StrategySpec spec, int64_t vocab, int64_t dk)
      : spec_(std::move(spec)), V_(vocab), dk_(dk) {
    C_ = spec_.hsm.num_clusters;
    members_ = spec_.hsm.members(vocab);
    Wc_ = Mat<T>(C_, dk);
    bc_ = Mat<T>(1, C_);
    for (int32_t c = 0; c < C_; ++c) {
      int64_t sz = static_cast<int64_t>(members_[static_cast<size_t>(c)].size());
      Ww_.emplace_back(sz, dk);
      bw_.emplace_back(1, sz);
    }
  }

  const StrategySpec& spec() const override { return spec_; }
  int64_t vocab() const override { return V_; }
  int64_t input_dim() const override { return dk_; }

  void init_params() override {
    Wc_.zero();
    bc_.zero();
    for (auto& w : Ww_) w.zero();
    for (auto& b : bw_) b.zero();
  }

  void set_output_embeddings(const Mat<T>& table) override {
    if (table.rows != V_ || table.cols != dk_) {
      throw ShapeError("output embedding table " + table.shape_str() + " does not fit");
    }
    for (int64_t w = 0; w < V_; ++w) {
      int32_t c = spec_.hsm.cluster_of[static_cast<size_t>(w)];
      int32_t i = spec_.hsm.within_of[static_cast<size_t>(w)];
      const T* src = table.row(w);
      std::copy(src, src + dk_, Ww_[static_cast<size_t>(c)].row(i));
    }
  }

  std::vector<ParamBlock<T>> param_blocks() override {
    std::vector<ParamBlock<T>> blocks{{"hsm.Wc", &Wc_}, {"hsm.bc", &bc_}};
    for (size_t c = 0; c < Ww_.size(); ++c) {
      blocks.push_back({"hsm.Ww" + std::to_string(c), &Ww_[c]});
      blocks.push_back({"hsm.bw" + std::to_string(c), &bw_[c]});
    }
    return blocks;
  }

  double loss(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan&) const override {
    return run(const_cast<Mat<T>&>(h), targets, nullptr, nullptr);
  }

  double train(const Mat<T>& h, std::span<const WordId> targets, const BatchPlan&, Mat<T>& dh,
               const UpdateOpts& opts) override {
    dh = Mat<T>(h.rows, dk_);
    return run(const_cast<Mat<T>&>(h), targets, &dh, &opts);
  }

  void full_distribution(const Mat<T>& h, Mat<T>& probs) const override {
    Mat<T> lc;
    cluster_logits(h, lc);
    Mat<T> lpc;
    log_softmax_rows(lc, lpc);
    probs = Mat<T>(h.rows, V_);
    parallel_for(C_, [&](int64_t c0, int64_t c1) {
      for (int64_t c = c0; c < c1; ++c) {
        const auto& mem = members_[static_cast<size_t>(c)];
        if (mem.empty()) continue;
        Mat<T> lw(h.rows, static_cast<int64_t>(mem.size()));
        gemm(h, Trans::No, Ww_[static_cast<size_t>(c)], Trans::Yes, lw);
        add_row_vector(lw, std::span<const T>(bw_[static_cast<size_t>(c)].data));
        Mat<T> lpw;
        log_softmax_rows(lw, lpw);
        for (int64_t i = 0; i < h.rows; ++i) {
          for (size_t m = 0; m < mem.size(); ++m) {
            probs.at(i, mem[m]) = static_cast<T>(
                std::exp(static_cast<double>(lpc.at(i, c)) +
                         static_cast<double>(lpw.at(i, static_cast<int64_t>(m)))));
          }
        }
      }
    });
  }

  void eval_logprob(const Mat<T>& h, std::span<const WordId> targets,
                    std::span<double> out) const override {
    Mat<T> lc;
    cluster_logits(h, lc);
    std::vector<double> lse_c(static_cast<size_t>(h.rows));
    logsumexp_rows(lc, std::span<double>(lse_c));
    auto groups = group_rows(targets);
    parallel_for(static_cast<int64_t>(groups.size()), [&](int64_t g0, int64_t g1) {
      for (int64_t g = g0; g < g1; ++g) {
        int32_t c = groups[static_cast<size_t>(g)].first;
        const auto& rows = groups[static_cast<size_t>(g)].second;
        const auto& mem = members_[static_cast<size_t>(c)];
        Mat<T> hc(static_cast<int64_t>(rows.size()), dk_);
        for (size_t r = 0; r < rows.size(); ++r) {
          const T* src = h.row(rows[r]);
          std::copy(src, src + dk_, hc.row(static_cast<int64_t>(r)));
        }
        Mat<T> lw(hc.rows, static_cast<int64_t>(mem.size()));
        gemm(hc, Trans::No, Ww_[static_cast<size_t>(c)], Trans::Yes, lw);
        add_row_vector(lw, std::span<const T>(bw_[static_cast<size_t>(c)].data));
        std::vector<double> lse_w(rows.size());
        logsumexp_rows(lw, std::span<double>(lse_w));
        for (size_t r = 0; r < rows.size(); ++r) {
          int64_t i = rows[r];
          int32_t wi = spec_.hsm.within_of[static_cast<size_t>(targets[static_cast<size_t>(i)])];
          out[static_cast<size_t>(i)] =
              (static_cast<double>(lc.at(i, c)) - lse_c[static_cast<size_t>(i)]) +
              (static_cast<double>(lw.at(static_cast<int64_t>(r), wi)) - lse_w[r]);
        }
      }
    });
  }

  // The two-factor distribution is normalized by construction.
  void log_z(const Mat<T>& h, std::span<double> out) const override {
    for (int64_t i = 0; i < h.rows; ++i) out[static_cast<size_t>(i)] = 0.0;
  }

 private:
  void cluster_logits(const Mat<T>& h, Mat<T>& lc) const {
    if (h.cols != dk_) {
      throw ShapeError("hsm expects h of width " + std::to_string(dk_) + ", got " + h.shape_str());
    }
    lc = Mat<T>(h.rows, C_);
    gemm(h, Trans::No, Wc_, Trans::Yes, lc);
    add_row_vector(lc, std::span<const T>(bc_.data));
  }

  std::vector<std::pair<int32_t, std::vector<int64_t>>> group_rows(
      std::span<const WordId> targets) const {
    std::vector<std::vector<int64_t>> by_cluster(static_cast<size_t>(C_));
    for (size_t i = 0; i < targets.size(); ++i) {
      by_cluster[static_cast<size_t>(spec_.hsm.cluster_of[static_cast<size_t>(targets[i])])]
          .push_back(static_cast<int64_t>(i));
    }
    std::vector<std::pair<int32_t, std::vector<int64_t>>> groups;
    for (int32_t c = 0; c < C_; ++c) {
      if (!by_cluster[static_cast<size_t>(c)].empty()) {
        groups.emplace_back(c, std::move(by_cluster[static_cast<size_t>(c)]));
      }
    }
    return groups;
  }

  double run(Mat<T>& h, std::span<const WordId> targets, Mat<T>* dh, const UpdateOpts* opts) {
    Mat<T> lc;
    cluster_logits(h, lc);
    std::vector<int64_t> ccols(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
      ccols[i] = spec_.hsm.cluster_of[static_cast<size_t>(targets[i])];
    }
    double loss;
    if (dh != nullptr) {
      loss = xent_to_delta(lc, ccols, &this->max_abs_logit_);
      gemm(lc, Trans::No, Wc_, Trans::No, *dh);
      Mat<T> gWc(C_, dk_);
      gemm(lc, Trans::Yes, h, Trans::No, gWc);
      Mat<T> gbc;
      colsum(lc, gbc);
      sgd_update(Wc_, gWc, static_cast<T>(opts->lr), static_cast<T>(opts->clip));
      sgd_update(bc_, gbc, static_cast<T>(opts->lr), static_cast<T>(opts->clip));
    } else {
      loss = xent_loss_only(lc, ccols);
    }

    auto groups = group_rows(targets);
    std::vector<double> group_loss(groups.size(), 0.0);
    parallel_for(static_cast<int64_t>(groups.size()), [&](int64_t g0, int64_t g1) {
      for (int64_t g = g0; g < g1; ++g) {
        int32_t c = groups[static_cast<size_t>(g)].first;
        const auto& rows = groups[static_cast<size_t>(g)].second;
        auto& Wwc = Ww_[static_cast<size_t>(c)];
        Mat<T> hc(static_cast<int64_t>(rows.size()), dk_);
        std::vector<int64_t> wcols(rows.size());
        for (size_t r = 0; r < rows.size(); ++r) {
          const T* src = h.row(rows[r]);
          std::copy(src, src + dk_, hc.row(static_cast<int64_t>(r)));
          wcols[r] = spec_.hsm.within_of[static_cast<size_t>(targets[static_cast<size_t>(rows[r])])];
        }
        Mat<T> lw(hc.rows, Wwc.rows);
        gemm(hc, Trans::No, Wwc, Trans::Yes, lw);
        add_row_vector(lw, std::span<const T>(bw_[static_cast<size_t>(c)].data));
        if (dh != nullptr) {
          group_loss[static_cast<size_t>(g)] = xent_to_delta(lw, wcols, &this->max_abs_logit_);
          Mat<T> dhc(hc.rows, dk_);
          gemm(lw, Trans::No, Wwc, Trans::No, dhc);
          for (size_t r = 0; r < rows.size(); ++r) {
            const T* src = dhc.row(static_cast<int64_t>(r));
            T* out = dh->row(rows[r]);
            for (int64_t d = 0; d < dk_; ++d) out[d] += src[d];
          }
          Mat<T> gWw(Wwc.rows, dk_);
          gemm(lw, Trans::Yes, hc, Trans::No, gWw);
          Mat<T> gbw;
          colsum(lw, gbw);
          sgd_update(Wwc, gWw, static_cast<T>(opts->lr), static_cast<T>(opts->clip));
          sgd_update(bw_[static_cast<size_t>(c)], gbw, static_cast<T>(opts->lr),
                     static_cast<T>(opts->clip));
        } else {
          group_loss[static_cast<size_t>(g)] = xent_loss_only(lw, wcols);
        }
      }
    });
    for (double v : group_loss) loss += v;
    return loss;
  }

  StrategySpec spec_;
  int64_t V_;
  int64_t dk_;
  int32_t C_ = 0;
  std::vector<std::vector<WordId>> members_;
  Mat<T> Wc_, bc_;
  std::vector<Mat<T>> Ww_, bw_;
};

// ---------------------------------------------------------------------------

template <typename T>
std::unique_ptr<OutputLayer<T>> make_output_layer(StrategySpec spec, int64_t vocab, int64_t dk) {
  spec.validate(vocab, dk);
  std::unique_ptr<OutputLayer<T>> layer;
  switch (spec.kind) {
    case StrategyKind::Softmax:
      layer = std::make_unique<SoftmaxLayer<T>>(std::move(spec), vocab, dk);
      break;
    case StrategyKind::DSoftmax:
      layer = std::make_unique<DsoftmaxLayer<T>>(std::move(spec), vocab, dk);
      break;
    case StrategyKind::Hsm:
      layer = std::make_unique<HsmLayer<T>>(std::move(spec), vocab, dk);
      break;
    case StrategyKind::TargetSampling:
      layer = std::make_unique<TargetSamplingLayer<T>>(std::move(spec), vocab, dk);
      break;
    case StrategyKind::Nce:
      layer = std::make_unique<NceLayer<T>>(std::move(spec), vocab, dk);
      break;
    case StrategyKind::Weaknorm:
      layer = std::make_unique<WeaknormLayer<T>>(std::move(spec), vocab, dk);
      break;
  }
  layer->init_params();
  return layer;
}

template <typename T>
Dispersion partition_dispersion(const OutputLayer<T>& layer, const Mat<T>& h) {
  if (h.rows == 0) throw ConfigError("partition_dispersion: empty sample");
  std::vector<double> z(static_cast<size_t>(h.rows));
  layer.log_z(h, std::span<double>(z));
  return dispersion_from_values(z);
}

template class OutputLayer<float>;
template class OutputLayer<double>;
template std::unique_ptr<OutputLayer<float>> make_output_layer<float>(StrategySpec, int64_t, int64_t);
template std::unique_ptr<OutputLayer<double>> make_output_layer<double>(StrategySpec, int64_t, int64_t);
template Dispersion partition_dispersion<float>(const OutputLayer<float>&, const Mat<float>&);
template Dispersion partition_dispersion<double>(const OutputLayer<double>&, const Mat<double>&);

}  // namespace nlmkit
