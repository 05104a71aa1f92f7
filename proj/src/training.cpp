#include "ptst/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

#include "ptst/distributions.hpp"

namespace ptst {

using ag::Matrix;
using ag::Tensor;

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (micro_batch_size < 0) throw std::invalid_argument("micro_batch_size must be >= 0");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be positive");
  if (!(labelled_fraction > 0 && labelled_fraction <= 1))
    throw std::invalid_argument("labelled_fraction must lie in (0, 1]");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0))
    throw std::invalid_argument("invalid Adam hyperparameters");
  if (objective == ObjectiveKind::tvae) (void)ptst::preset(preset);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"micro_batch_size", c.micro_batch_size},
       {"weight_decay", c.weight_decay},
       {"decoupled_weight_decay", c.decoupled_weight_decay},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"objective", to_string(c.objective)},
       {"preset", c.preset},
       {"labelled_fraction", c.labelled_fraction},
       {"deterministic", c.deterministic},
       {"standardize", c.standardize},
       {"eval_every_epoch", c.eval_every_epoch}};
  if (c.objective_override) j["objective_override"] = *c.objective_override;
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.micro_batch_size = j.value("micro_batch_size", d.micro_batch_size);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.decoupled_weight_decay = j.value("decoupled_weight_decay", d.decoupled_weight_decay);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.objective = objective_kind_from_string(j.value("objective", std::string("tvae")));
  c.preset = j.value("preset", d.preset);
  c.labelled_fraction = j.value("labelled_fraction", d.labelled_fraction);
  c.deterministic = j.value("deterministic", d.deterministic);
  c.standardize = j.value("standardize", d.standardize);
  c.eval_every_epoch = j.value("eval_every_epoch", d.eval_every_epoch);
  if (j.contains("objective_override")) c.objective_override = j.at("objective_override").get<ObjectiveConfig>();
}

double learning_rate(long step, long total_steps, double lr0) {
  if (total_steps <= 0) return 0.0;
  const double r = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return lr0 * (1.0 - r);
}

const HeadResult* Evaluation::find(const std::string& head) const {
  for (const auto& h : heads)
    if (h.head == head) return &h;
  return nullptr;
}

nlohmann::json to_json(const Evaluation& e) {
  nlohmann::json heads = nlohmann::json::object();
  for (const auto& h : e.heads)
    heads[h.head] = {{"oa", h.metrics.oa},
                     {"precision", h.metrics.precision},
                     {"recall", h.metrics.recall},
                     {"f1", h.metrics.f1},
                     {"n", h.confusion.total()}};
  return {{"n_records", e.n_records}, {"heads", heads}};
}

namespace {

nlohmann::json components_json(const LossComponents& c) {
  return {{"recon", c.recon},         {"cos_or_kl_z", c.cos_or_kl_z}, {"ce_yx", c.ce_yx},
          {"ce_yz", c.ce_yz},         {"kl_yz_yx", c.kl_yz_yx},       {"kl_ycos_yx", c.kl_ycos_yx},
          {"kl_yx_prior", c.kl_yx_prior}};
}

}  // namespace

void write_run_jsonl(const RunRecord& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : r.epochs) {
    nlohmann::json line = {{"epoch", e.epoch},
                           {"loss", {{"total", e.mean_total}, {"terms", components_json(e.mean_terms)}}},
                           {"weights", components_json(e.weights)},
                           {"lr_last", e.lr_last},
                           {"seconds", e.seconds},
                           {"seed", r.seed}};
    if (e.eval) line["metrics"] = to_json(*e.eval)["heads"];
    os << line.dump() << '\n';
  }
  os << nlohmann::json{{"summary", {{"wall_seconds", r.wall_seconds}, {"seed", r.seed}, {"config", r.config}}}}.dump()
     << '\n';
}

// ---------------------------------------------------------------------------
// optimizer

namespace {

class Adam {
 public:
  Adam(ParameterStore<float>& store, const TrainConfig& cfg) : store_(store), cfg_(cfg) {
    for (const auto& p : store_.all()) {
      m_.push_back(Matrix<float>::Zero(p.tensor.rows(), p.tensor.cols()));
      v_.push_back(Matrix<float>::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const float b1 = static_cast<float>(cfg_.adam_beta1), b2 = static_cast<float>(cfg_.adam_beta2);
    const float bc1 = static_cast<float>(1.0 - std::pow(cfg_.adam_beta1, t_));
    const float bc2 = static_cast<float>(1.0 - std::pow(cfg_.adam_beta2, t_));
    const float wd = static_cast<float>(cfg_.weight_decay);
    const float eps = static_cast<float>(cfg_.adam_eps);
    const float a = static_cast<float>(lr);
    auto& params = store_.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.trainable) continue;
      auto& w = p.tensor.mutable_value();
      Matrix<float> g = p.tensor.has_grad() ? p.tensor.grad() : Matrix<float>::Zero(w.rows(), w.cols());
      if (!cfg_.decoupled_weight_decay && wd > 0) g += wd * w;
      m_[i] = b1 * m_[i] + (1 - b1) * g;
      v_[i] = b2 * v_[i] + (1 - b2) * g.cwiseProduct(g);
      w.array() -= a * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps);
      if (cfg_.decoupled_weight_decay && wd > 0) w *= (1 - a * wd);
    }
  }

 private:
  ParameterStore<float>& store_;
  const TrainConfig& cfg_;
  std::vector<Matrix<float>> m_, v_;
  long t_ = 0;
};

struct MicroBatch {
  Matrix<float> x;
  std::vector<int> labels;
  Noise<float> noise;
  int size = 0;
  int step_records = 0;  // records in the whole optimizer step
  bool last_of_step = false;
};

// Bounded single-producer queue used when batches are prepared off-thread.
class BatchQueue {
 public:
  explicit BatchQueue(std::size_t capacity) : capacity_(capacity) {}

  bool push(MicroBatch b) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return false;
    items_.push_back(std::move(b));
    not_empty_.notify_one();
    return true;
  }

  MicroBatch pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty(); });
    MicroBatch b = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return b;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<MicroBatch> items_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
};

// Produces the micro-batches of every step in order. All randomness comes
// from the seeded generators, so the sequence is independent of threading.
class BatchSource {
 public:
  BatchSource(const std::vector<RowMatrixF>& features, const std::vector<int>& labels, const TrainConfig& cfg,
              int latent_dim, int K, std::uint64_t seed)
      : features_(features), labels_(labels), cfg_(cfg), D_(latent_dim), K_(K), shuffle_rng_(seed),
        noise_rng_(seed ^ 0x5DEECE66DULL) {}

  long steps_per_epoch() const {
    return (static_cast<long>(features_.size()) + cfg_.batch_size - 1) / cfg_.batch_size;
  }

  // Appends the micro-batches of one epoch.
  template <typename Sink>
  void epoch(Sink&& sink) {
    std::vector<int> order(features_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng_);
    const int mb = cfg_.micro_batch_size > 0 ? cfg_.micro_batch_size : cfg_.batch_size;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      // noise is drawn for the whole step so micro-batching does not change it
      const Noise<float> step_noise = draw_noise(static_cast<int>(end - start));
      for (std::size_t s = start; s < end; s += mb) {
        const std::size_t e = std::min(end, s + mb);
        auto b = make(order, s, e, static_cast<int>(end - start), e == end);
        b.noise.eps = step_noise.eps.middleRows(s - start, e - s);
        b.noise.gumbel = step_noise.gumbel.middleRows(s - start, e - s);
        if (!sink(std::move(b))) return;
      }
    }
  }

 private:
  MicroBatch make(const std::vector<int>& order, std::size_t s, std::size_t e, int step_records, bool last) {
    MicroBatch b;
    b.size = static_cast<int>(e - s);
    b.step_records = step_records;
    const int T = static_cast<int>(features_[0].rows());
    const int F = static_cast<int>(features_[0].cols());
    b.x.resize(static_cast<Eigen::Index>(b.size) * T, F);
    for (int i = 0; i < b.size; ++i) {
      const int r = order[s + i];
      b.x.middleRows(static_cast<Eigen::Index>(i) * T, T) = features_[r];
      b.labels.push_back(labels_[r]);
    }
    b.last_of_step = last;
    return b;
  }

  Noise<float> draw_noise(int n) {
    std::normal_distribution<float> normal(0.0F, 1.0F);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    Noise<float> noise;
    noise.eps.resize(n, D_);
    for (Eigen::Index i = 0; i < noise.eps.size(); ++i) noise.eps.data()[i] = normal(noise_rng_);
    noise.gumbel.resize(n, K_);
    for (Eigen::Index i = 0; i < noise.gumbel.size(); ++i)
      noise.gumbel.data()[i] = static_cast<float>(gumbel_from_uniform(uniform(noise_rng_)));
    return noise;
  }

  const std::vector<RowMatrixF>& features_;
  const std::vector<int>& labels_;
  const TrainConfig& cfg_;
  int D_, K_;
  std::mt19937_64 shuffle_rng_;
  std::mt19937_64 noise_rng_;
};

struct Resolved {
  ModelConfig model;
  ObjectiveConfig objective;
};

Resolved resolve(const Dataset& ds, const TrainConfig& cfg, const ModelConfig& model_cfg) {
  Resolved r{model_cfg, {}};
  r.model.input_dim = ds.F;
  r.model.num_classes = ds.K;
  r.model.init_seed = cfg.seed;
  if (cfg.objective == ObjectiveKind::ptst) {
    r.model.mode = ModelMode::ptst;
    return r;
  }
  const Preset p = preset(cfg.preset);
  apply_preset(p, r.model);
  r.objective = cfg.objective_override ? *cfg.objective_override : p.objective;
  r.model.centers_mode = r.objective.learnable_centers ? CentersMode::learnable : CentersMode::fixed_orthonormal;
  if (r.objective.kl_ycos_yx) r.model.cosine_softmax_head = true;
  r.objective.validate();
  return r;
}

std::vector<double> empirical_prior(const std::vector<int>& labels, int K) {
  std::vector<double> p(K, 0.0);
  double n = 0;
  for (int y : labels)
    if (y >= 0) {
      p[y] += 1;
      n += 1;
    }
  if (n == 0) return std::vector<double>(K, 1.0 / K);
  for (auto& v : p) v /= n;
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------

TrainResult train(const Dataset& train_ds_in, const TrainConfig& cfg, const ModelConfig& model_cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  train_ds_in.validate();
  if (train_ds_in.empty()) throw std::invalid_argument("training dataset is empty");
  const Dataset ds = cfg.labelled_fraction < 1.0 ? mask_labels(train_ds_in, cfg.labelled_fraction, cfg.seed)
                                                 : train_ds_in;
  std::vector<int> labels;
  for (const auto& r : ds.records) labels.push_back(r.label_present && r.label ? *r.label : -1);
  const bool any_labelled = std::any_of(labels.begin(), labels.end(), [](int y) { return y >= 0; });
  if (cfg.objective == ObjectiveKind::ptst && !any_labelled)
    throw std::invalid_argument("configuration error: the ptst objective needs at least one labelled record");

  Resolved res = resolve(ds, cfg, model_cfg);
  if (res.objective.prior_y == PriorY::empirical && res.objective.prior_probs.empty())
    res.objective.prior_probs = empirical_prior(labels, ds.K);
  const bool tvae = cfg.objective == ObjectiveKind::tvae;

  Checkpoint ckpt;
  ckpt.model = res.model;
  ckpt.objective_kind = cfg.objective;
  ckpt.preset = tvae ? cfg.preset : "";
  ckpt.objective = res.objective;
  ckpt.train_config = cfg;
  if (cfg.standardize) ckpt.normalization = Standardizer::fit(ds);

  std::vector<RowMatrixF> features;
  features.reserve(ds.size());
  for (const auto& r : ds.records)
    features.push_back(ckpt.normalization.empty() ? r.features : ckpt.normalization.apply(r.features));

  TvaeModel<float> model(res.model);
  Adam adam(model.parameters(), cfg);
  BatchSource source(features, labels, cfg, res.model.latent_dim, ds.K, cfg.seed);
  const long total_steps = source.steps_per_epoch() * cfg.epochs;
  ckpt.total_steps = total_steps;
  std::mt19937_64 dropout_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);

  RunRecord record;
  record.seed = cfg.seed;
  record.config = {{"train", cfg}, {"model", res.model}, {"objective", res.objective}};
  const auto t_start = std::chrono::steady_clock::now();

  std::unique_ptr<BatchQueue> queue;
  std::thread producer;
  if (!cfg.deterministic) {
    queue = std::make_unique<BatchQueue>(8);
    producer = std::thread([&] {
      for (int e = 0; e < cfg.epochs; ++e) {
        bool open = true;
        source.epoch([&](MicroBatch b) { return open = queue->push(std::move(b)); });
        if (!open) return;
      }
    });
  }

  long step = 0;
  bool stop = false;
  try {
    for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
      const auto t_epoch = std::chrono::steady_clock::now();
      EpochRecord er;
      er.epoch = epoch;
      double epoch_weight = 0;
      LossComponents step_terms;
      double step_total = 0;
      int step_records = 0;
      model.parameters().zero_grad();

      auto consume = [&](MicroBatch b) -> bool {
        const float share = static_cast<float>(b.size) / static_cast<float>(b.step_records);
        ScheduleState s{step, total_steps};
        ForwardOptions<float> opts;
        opts.training = true;
        opts.temperature = static_cast<float>(
            concrete_temperature(step, total_steps, res.objective.temperature_start, res.objective.temperature_end));
        b.noise.dropout_rng = &dropout_rng;
        opts.noise = &b.noise;
        opts.decode = tvae;
        opts.all_class_posteriors = tvae && res.objective.use_dkl_gaussian_instead_of_cos;
        auto out = model.forward(b.x, b.size, ds.T, b.labels, opts);
        auto obj = tvae ? compute_objective(b.x, b.labels, out, res.objective, s) : classifier_objective(b.labels, out);
        if (!std::isfinite(obj.breakdown.total))
          throw std::runtime_error("non-finite loss at step " + std::to_string(step));
        ag::scale(obj.total, share).backward();
        step_terms += obj.breakdown.terms.scaled(share);
        step_total += obj.breakdown.total * share;
        step_records += b.size;
        er.weights = obj.breakdown.weights;
        if (!b.last_of_step) return true;

        const double lr = learning_rate(step, total_steps, cfg.lr);
        adam.step(lr);
        model.parameters().zero_grad();
        record.step_losses.push_back(step_total);
        er.mean_terms += step_terms.scaled(step_records);
        er.mean_total += step_total * step_records;
        epoch_weight += step_records;
        er.lr_last = lr;
        step_terms = {};
        step_total = 0;
        step_records = 0;
        ++step;
        if (hooks.max_steps >= 0 && step >= hooks.max_steps) {
          stop = true;
          return false;
        }
        return true;
      };

      if (queue) {
        const long steps_here = source.steps_per_epoch();
        for (long k = 0; k < steps_here && !stop;) {
          MicroBatch b = queue->pop();
          const bool last = b.last_of_step;
          consume(std::move(b));
          if (last) ++k;
        }
      } else {
        source.epoch(consume);
      }

      if (epoch_weight > 0) {
        er.mean_terms = er.mean_terms.scaled(1.0 / epoch_weight);
        er.mean_total /= epoch_weight;
      }
      ckpt.step = step;
      if (cfg.eval_every_epoch) {
        const Dataset& eval_ds = hooks.eval_ds ? *hooks.eval_ds : ds;
        er.eval = evaluate(predict(model, ckpt, eval_ds), ds.K);
      }
      er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
      record.epochs.push_back(er);
      if (hooks.on_epoch) hooks.on_epoch(record.epochs.back());
    }
  } catch (...) {
    if (queue) {
      queue->close();
      producer.join();
    }
    throw;
  }
  if (queue) {
    queue->close();
    producer.join();
  }

  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  ckpt.step = step;
  ckpt.tensors = snapshot_parameters(model);
  return {std::move(ckpt), std::move(record)};
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

int argmax_row(const Matrix<float>& m, Eigen::Index r) {
  Eigen::Index k = 0;
  m.row(r).maxCoeff(&k);
  return static_cast<int>(k);
}

}  // namespace

Predictions predict(const TvaeModel<float>& model, const Checkpoint& ckpt, const Dataset& ds) {
  const auto& mc = model.config();
  if (ds.K != mc.num_classes)
    throw std::invalid_argument("configuration error: dataset has " + std::to_string(ds.K) + " classes, model " +
                                std::to_string(mc.num_classes));
  if (ds.F != mc.input_dim)
    throw std::invalid_argument("configuration error: dataset has " + std::to_string(ds.F) +
                                " features, model " + std::to_string(mc.input_dim));
  const bool latent = ckpt.has_latent();
  const bool z_head = ckpt.has_z_head();
  Predictions p;
  if (latent) p.latent_mean.resize(static_cast<Eigen::Index>(ds.size()), mc.latent_dim);
  constexpr std::size_t kChunk = 128;
  ForwardOptions<float> opts;
  opts.decode = false;
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    const std::size_t end = std::min(ds.size(), start + kChunk);
    const int n = static_cast<int>(end - start);
    Matrix<float> x(static_cast<Eigen::Index>(n) * ds.T, ds.F);
    for (int i = 0; i < n; ++i) {
      const auto& r = ds.records[start + i];
      x.middleRows(static_cast<Eigen::Index>(i) * ds.T, ds.T) =
          ckpt.normalization.empty() ? r.features : ckpt.normalization.apply(r.features);
      p.ids.push_back(r.parcel_id);
      p.truth.push_back(r.label ? *r.label : -1);
    }
    auto out = model.forward(x, n, ds.T, {}, opts);
    for (int i = 0; i < n; ++i) {
      p.y.push_back(argmax_row(out.y_logits.value(), i));
      if (z_head) p.z.push_back(argmax_row(out.z_logits.value(), i));
      if (latent) p.cos.push_back(argmax_row(out.cos_scores.value(), i));
    }
    if (latent) p.latent_mean.middleRows(static_cast<Eigen::Index>(start), n) = out.mean.value();
  }
  return p;
}

Evaluation evaluate(const Predictions& p, int K, AbsentClassRule rule) {
  Evaluation e;
  std::vector<int> truth;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < p.truth.size(); ++i)
    if (p.truth[i] >= 0) {
      truth.push_back(p.truth[i]);
      rows.push_back(i);
    }
  e.n_records = rows.size();
  auto head = [&](const std::string& name, const std::vector<int>& pred) {
    if (pred.empty() || rows.empty()) return;
    std::vector<int> picked;
    for (auto i : rows) picked.push_back(pred[i]);
    HeadResult h{name, ConfusionMatrix::from_predictions(K, truth, picked), {}};
    h.metrics = macro_metrics(h.confusion, rule);
    e.heads.push_back(std::move(h));
  };
  head("Y", p.y);
  head("Z", p.z);
  head("Cos", p.cos);
  return e;
}

Evaluation evaluate(const Checkpoint& ckpt, const Dataset& ds, AbsentClassRule rule) {
  if (ds.K != ckpt.model.num_classes)
    throw std::invalid_argument("configuration error: class-count mismatch between dataset and checkpoint");
  const auto model = restore_model<float>(ckpt);
  return evaluate(predict(model, ckpt, ds), ds.K, rule);
}

std::vector<SweepRow> semi_supervised_sweep(const Dataset& train_ds, const Dataset& test_ds,
                                            const std::vector<double>& fractions, const TrainConfig& cfg,
                                            const ModelConfig& model_cfg) {
  for (double f : fractions)
    if (!(f > 0 && f <= 1)) throw std::invalid_argument("sweep fractions must lie in (0, 1]");
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    TrainConfig c = cfg;
    c.labelled_fraction = f;
    c.eval_every_epoch = false;
    const auto result = train(train_ds, c, model_cfg);
    for (const auto& h : evaluate(result.checkpoint, test_ds).heads) rows.push_back({f, h.head, h.metrics});
  }
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "fraction,head,oa,precision,recall,f1\n";
  for (const auto& r : rows)
    os << r.fraction << ',' << r.head << ',' << r.metrics.oa << ',' << r.metrics.precision << ',' << r.metrics.recall
       << ',' << r.metrics.f1 << '\n';
}

}  // namespace ptst
