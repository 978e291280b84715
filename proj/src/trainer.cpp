#include "kdseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "kdseg/adversary.hpp"
#include "kdseg/checkpoint.hpp"
#include "kdseg/error.hpp"
#include "kdseg/kernels.hpp"

namespace kdseg {
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(mu0 > 0)) throw ConfigError("train.mu0 must be > 0");
  if (!(gamma >= 0)) throw ConfigError("train.gamma must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum must be in [0, 1)");
  if (eta < 1) throw ConfigError("train.eta must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(scale_min > 0 && scale_min <= scale_max)) throw ConfigError("train.scale_min/scale_max must satisfy 0 < min <= max");
  if (!(flip_prob >= 0 && flip_prob <= 1)) throw ConfigError("train.flip_prob must be in [0, 1]");
  if (pool_factor < 1) throw ConfigError("train.pool_factor must be >= 1");
  if (update_ratio < 1) throw ConfigError("train.update_ratio must be >= 1");
  if (!(critic_lr > 0)) throw ConfigError("train.critic_lr must be > 0");
  try {
    loss_weights.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"mu0", c.mu0},
          {"gamma", c.gamma},
          {"momentum", c.momentum},
          {"batch_size", c.batch_size},
          {"eta", c.eta},
          {"temperature", c.temperature.tau()},
          {"weights", {{"pi", c.loss_weights.pi}, {"pa", c.loss_weights.pa}, {"ho", c.loss_weights.ho}, {"ifv", c.loss_weights.ifv}}},
          {"seed", c.seed},
          {"init",
           {{"mode", c.init.mode == InitPolicy::Mode::random ? "random" : "pretrained"},
            {"weights", c.init.weight_source ? nlohmann::json(*c.init.weight_source) : nlohmann::json(nullptr)}}},
          {"eval_interval", c.eval_interval},
          {"crop_size", c.crop_size},
          {"scale_min", c.scale_min},
          {"scale_max", c.scale_max},
          {"flip_prob", c.flip_prob},
          {"pool_factor", c.pool_factor},
          {"update_ratio", c.update_ratio},
          {"critic_lr", c.critic_lr},
          {"student_tap", c.student_tap},
          {"teacher_tap", c.teacher_tap}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.mu0 = j.value("mu0", c.mu0);
    c.gamma = j.value("gamma", c.gamma);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.eta = j.value("eta", c.eta);
    c.temperature = Temperature(j.value("temperature", 1.0));
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      c.loss_weights = {w.value("pi", 0.0), w.value("pa", 0.0), w.value("ho", 0.0), w.value("ifv", 0.0)};
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("init")) {
      const auto& i = j.at("init");
      const std::string mode = i.value("mode", "random");
      if (mode == "pretrained") {
        c.init = InitPolicy::pretrained(i.at("weights").get<std::string>());
      } else if (mode == "random") {
        c.init = InitPolicy::random(c.seed);
      } else {
        throw ConfigError("init.mode must be 'random' or 'pretrained'");
      }
    }
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.crop_size = j.value("crop_size", c.crop_size);
    c.scale_min = j.value("scale_min", c.scale_min);
    c.scale_max = j.value("scale_max", c.scale_max);
    c.flip_prob = j.value("flip_prob", c.flip_prob);
    c.pool_factor = j.value("pool_factor", c.pool_factor);
    c.update_ratio = j.value("update_ratio", c.update_ratio);
    c.critic_lr = j.value("critic_lr", c.critic_lr);
    c.student_tap = j.value("student_tap", c.student_tap);
    c.teacher_tap = j.value("teacher_tap", c.teacher_tap);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

double poly_lr(double mu0, std::size_t i, std::size_t eta) {
  if (eta == 0) throw RangeError("poly_lr: eta must be >= 1");
  if (i > eta) throw RangeError("poly_lr: step " + std::to_string(i) + " beyond eta " + std::to_string(eta));
  return mu0 * std::pow(1.0 - static_cast<double>(i) / static_cast<double>(eta), 0.9);
}

namespace {

// Samples either fully cached or loaded on demand.
class SampleSource {
 public:
  SampleSource(const DatasetSpec& spec, const std::string& split_name)
      : split_(load_split(spec, split_name)) {
    if (split_.empty()) throw EmptyBatchError("split '" + split_name + "' of " + spec.root.string() + " is empty");
    if (split_.size() <= kCacheLimit) cache_.emplace(split_);
  }

  std::size_t size() const noexcept { return split_.size(); }
  const DatasetSpec& spec() const noexcept { return split_.spec(); }

  Sample get(std::size_t i) const { return cache_ ? (*cache_)[i] : split_.load(i); }
  const CachedSplit* cached() const noexcept { return cache_ ? &*cache_ : nullptr; }

 private:
  static constexpr std::size_t kCacheLimit = 4096;
  Split split_;
  std::optional<CachedSplit> cache_;
};

struct Batch {
  Tensorf images;  // normalized
  LabelMap labels;
};

Batch make_batch(const SampleSource& source, const std::vector<std::size_t>& indices, const AugmentConfig& aug,
                 std::uint64_t seed, std::size_t step) {
  const DatasetSpec& spec = source.spec();
  std::vector<std::optional<std::pair<Tensorf, LabelMap>>> items(indices.size());
  std::vector<std::exception_ptr> errors(indices.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t k = 0; k < indices.size(); ++k) {
    try {
      const Sample s = source.get(indices[k]);
      items[k] = augment(s.image, s.label, aug, derive_seed(seed, {0xa06u, step, k}));
    } catch (...) {
      errors[k] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<Tensorf> images;
  std::vector<LabelMap> labels;
  for (auto& item : items) {
    images.push_back(normalize(item->first, spec.mean, spec.stddev));
    labels.push_back(std::move(item->second));
  }
  return {stack_images(images), stack_labels(labels)};
}

// Plain SGD with momentum and decoupled weight decay.
class Sgd {
 public:
  Sgd(nn::ParamRefs<float> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), decay_(weight_decay) {
    for (auto* p : params_) velocity_.emplace_back(p->value.shape());
  }

  void step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      float* w = params_[k]->value.data();
      const float* g = params_[k]->grad.data();
      float* v = velocity_[k].data();
      const auto m = static_cast<float>(momentum_);
      const auto a = static_cast<float>(lr);
      const auto d = static_cast<float>(lr * decay_);
      for (std::size_t i = 0; i < params_[k]->value.size(); ++i) {
        v[i] = m * v[i] + g[i];
        w[i] -= a * v[i] + d * w[i];
      }
    }
  }

  void zero_grad() { nn::zero_grads(params_); }

 private:
  nn::ParamRefs<float> params_;
  double momentum_;
  double decay_;
  std::vector<Tensorf> velocity_;
};

bool all_finite(const Tensorf& t) {
  return std::all_of(t.data(), t.data() + t.size(), [](float v) { return std::isfinite(v); });
}

void check_term(const LossWithGrad& lg, std::size_t step) {
  if (!std::isfinite(lg.loss.value) || !all_finite(lg.grad)) {
    throw DivergenceError(lg.loss.term, "loss term '" + lg.loss.term + "' became non-finite at step " +
                                            std::to_string(step));
  }
}

void add_scaled(Tensorf& acc, const Tensorf& g, double weight) {
  if (acc.size() == 0) {
    acc = Tensorf(g.shape());
  }
  require_same_shape(acc, g, "gradient accumulation");
  const auto w = static_cast<float>(weight);
  for (std::size_t i = 0; i < g.size(); ++i) acc.data()[i] += w * g.data()[i];
}

nlohmann::json report_json(const CompositeLossReport& r) {
  nlohmann::json terms = nlohmann::json::object();
  for (const auto& e : r.per_term) terms[e.term] = {{"raw", e.raw}, {"weight", e.weight}, {"weighted", e.weighted}};
  return {{"total", r.total}, {"terms", terms}};
}

Checkpoint make_checkpoint(SegmentationModel& student, FeatureAdapter* adapter, AdversarialState* adv,
                           const TrainConfig& cfg, std::size_t step, double miou) {
  Checkpoint ck;
  ck.model = student.name();
  ck.class_count = student.class_count();
  ck.meta = {{"step", step}, {"miou", miou}, {"train", to_json(cfg)}};
  append_parameters(ck, student.state(), "model");
  if (adapter) append_parameters(ck, adapter->parameters(), "adapter");
  if (adv) append_parameters(ck, adv->critic.parameters(), "discriminator");
  return ck;
}

Tensorf crop_logits(const Tensorf& logits, std::size_t h, std::size_t w) {
  if (logits.h() == h && logits.w() == w) return logits;
  Tensorf out(logits.n(), logits.c(), h, w);
  for (std::size_t b = 0; b < logits.n(); ++b)
    for (std::size_t c = 0; c < logits.c(); ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(&logits(b, c, y, 0), w, &out(b, c, y, 0));
  return out;
}

template <typename GetSample>
EvalResult evaluate_samples(SegmentationModel& model, const DatasetSpec& spec, std::size_t count, GetSample get) {
  if (count == 0) throw EmptyBatchError("evaluate: empty split");
  constexpr std::size_t kGroup = 8;
  ConfusionMatrix cm(model.class_count());
  std::size_t i = 0;
  while (i < count) {
    std::vector<Tensorf> images;
    std::vector<LabelMap> labels;
    Sample first = get(i++);
    const std::size_t h = first.image.h(), w = first.image.w();
    images.push_back(std::move(first.image));
    labels.push_back(std::move(first.label));
    while (i < count && images.size() < kGroup) {
      Sample s = get(i);
      if (s.image.h() != h || s.image.w() != w) break;
      images.push_back(std::move(s.image));
      labels.push_back(std::move(s.label));
      ++i;
    }
    const LogitMap logits = predict(model, spec, stack_images(images));
    cm = accumulate(std::move(cm), argmax(logits, spec.ignore_id), stack_labels(labels));
  }
  return {miou(cm), std::move(cm)};
}

}  // namespace

LogitMap predict(SegmentationModel& model, const DatasetSpec& data, const Tensorf& raw_images) {
  const Tensorf x = normalize(raw_images, data.mean, data.stddev);
  const std::size_t m = model.input_multiple();
  const std::size_t h = x.h(), w = x.w();
  const std::size_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  if (ph == h && pw == w) return model.forward(x, {}, false).logits;
  Tensorf padded(x.n(), x.c(), ph, pw);
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t y = 0; y < h; ++y) std::copy_n(&x(b, c, y, 0), w, &padded(b, c, y, 0));
  return LogitMap(crop_logits(model.forward(padded, {}, false).logits.values(), h, w));
}

EvalResult evaluate(SegmentationModel& model, const CachedSplit& split) {
  if (split.spec().class_count != model.class_count()) {
    throw ValidationError("evaluate: model has " + std::to_string(model.class_count()) + " classes, dataset has " +
                          std::to_string(split.spec().class_count));
  }
  return evaluate_samples(model, split.spec(), split.size(), [&](std::size_t i) { return split[i]; });
}

EvalResult evaluate(SegmentationModel& model, const DatasetSpec& data, const std::string& split_name) {
  if (data.class_count != model.class_count()) {
    throw ValidationError("evaluate: model has " + std::to_string(model.class_count()) + " classes, dataset has " +
                          std::to_string(data.class_count));
  }
  const Split split = load_split(data, split_name);
  return evaluate_samples(model, data, split.size(), [&](std::size_t i) { return split.load(i); });
}

RunRecord train(SegmentationModel& student, SegmentationModel* teacher, const TrainConfig& cfg,
                const DatasetSpec& data, const TrainOutputs& outputs) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const LossWeights& lw = cfg.loss_weights;
  if (lw.any_distillation() && !teacher) throw ConfigError("distillation weights are set but no teacher is given");
  if (teacher && teacher->class_count() != student.class_count()) {
    throw ConfigError("teacher has " + std::to_string(teacher->class_count()) + " classes, student has " +
                      std::to_string(student.class_count()));
  }
  if (data.class_count != student.class_count()) {
    throw ConfigError("dataset has " + std::to_string(data.class_count) + " classes, student has " +
                      std::to_string(student.class_count()));
  }

  const SampleSource train_set(data, "train");
  const SampleSource val_set(data, "val");

  AugmentConfig aug;
  aug.crop_size = cfg.crop_size ? cfg.crop_size : data.crop_size;
  aug.scale_min = cfg.scale_min;
  aug.scale_max = cfg.scale_max;
  aug.flip_prob = cfg.flip_prob;
  aug.pad_value = data.mean;
  if (aug.crop_size % student.input_multiple() != 0 ||
      (teacher && aug.crop_size % teacher->input_multiple() != 0)) {
    throw ConfigError("crop size " + std::to_string(aug.crop_size) + " is not a multiple of the model input stride");
  }

  const bool feature_terms = lw.pa > 0 || lw.ifv > 0;
  const std::string s_tap = cfg.student_tap.empty() ? student.default_tap() : cfg.student_tap;
  const std::string t_tap = teacher ? (cfg.teacher_tap.empty() ? teacher->default_tap() : cfg.teacher_tap) : "";
  std::vector<std::string> s_taps, t_taps;
  if (feature_terms) {
    s_taps = {s_tap};
    t_taps = {t_tap};
  }

  // The adapter's width is only known after a first forward; it is created
  // lazily when student and teacher feature widths differ.
  std::optional<FeatureAdapter> adapter;
  std::optional<AdversarialState> adv;
  if (lw.ho > 0) {
    adv.emplace(Discriminator<float>(3, student.class_count(), derive_seed(cfg.seed, {0xd15cu})), cfg.critic_lr,
                0.9, cfg.update_ratio);
  }
  std::optional<Sgd> opt;
  auto build_optimizer = [&] {
    nn::ParamRefs<float> params = student.parameters();
    if (adapter) {
      auto extra = adapter->parameters();
      params.insert(params.end(), extra.begin(), extra.end());
    }
    opt.emplace(std::move(params), cfg.momentum, cfg.gamma);
  };

  RunRecord record;
  record.config = to_json(cfg);
  std::ofstream log;
  if (outputs.run_dir) {
    fs::create_directories(*outputs.run_dir);
    log.open(*outputs.run_dir / "steps.jsonl");
    if (!log) throw IoError("cannot write " + (*outputs.run_dir / "steps.jsonl").string());
  }

  auto run_eval = [&](std::size_t step) {
    const EvalResult r = val_set.cached() ? evaluate(student, *val_set.cached()) : evaluate(student, data, "val");
    const EvalRecord e{step, r.miou};
    record.evals.push_back(e);
    if (log.is_open()) log << nlohmann::json{{"kind", "eval"}, {"step", step}, {"miou", r.miou}}.dump() << '\n';
    if (outputs.on_eval) outputs.on_eval(e);
    if (record.evals.size() == 1 || r.miou > record.best_miou) {
      record.best_miou = r.miou;
      record.best_step = step;
      if (outputs.run_dir) {
        save_checkpoint(make_checkpoint(student, adapter ? &*adapter : nullptr, adv ? &*adv : nullptr, cfg, step, r.miou),
                        *outputs.run_dir / "best.ckpt");
      }
    }
    return r.miou;
  };

  EpochSampler sampler(train_set.size(), cfg.batch_size, derive_seed(cfg.seed, {0x5a3u}));
  record.steps.reserve(cfg.eta);

  for (std::size_t i = 0; i < cfg.eta; ++i) {
    const Batch batch = make_batch(train_set, sampler.next(), aug, cfg.seed, i);

    std::optional<ForwardResult> t_out;
    if (teacher) t_out = teacher->forward(batch.images, t_taps, false);

    ForwardResult s_out = [&] {
      try {
        return student.forward(batch.images, s_taps, true);
      } catch (const NonFiniteError&) {
        throw DivergenceError(term::kCrossEntropy, "student logits became non-finite at step " + std::to_string(i));
      }
    }();

    std::vector<WeightedTerm> terms;
    Tensorf dlogits;
    std::map<std::string, Tensorf> dtaps;

    LossWithGrad ce = cross_entropy(s_out.logits, batch.labels);
    check_term(ce, i);
    terms.push_back({ce.loss, 1.0});
    add_scaled(dlogits, ce.grad, 1.0);

    if (lw.pi > 0) {
      LossWithGrad pi = pixelwise_distillation(s_out.logits, t_out->logits, cfg.temperature);
      check_term(pi, i);
      terms.push_back({pi.loss, lw.pi});
      add_scaled(dlogits, pi.grad, lw.pi);
    }

    std::optional<ProbabilityMap> s_probs;
    if (lw.ho > 0) {
      s_probs.emplace(softmax(s_out.logits, Temperature(1.0)));
      LossWithGrad ho = holistic_student_loss(adv->critic, *s_probs, batch.images);
      check_term(ho, i);
      terms.push_back({ho.loss, lw.ho});
      add_scaled(dlogits, kernels::softmax_backward(s_probs->values(), ho.grad), lw.ho);
    }

    if (feature_terms) {
      const FeatureMap& sf_raw = s_out.taps.at(s_tap);
      const FeatureMap& tf = t_out->taps.at(t_tap);
      if (!adapter && sf_raw.values().c() != tf.values().c()) {
        adapter.emplace(sf_raw.values().c(), tf.values().c(), derive_seed(cfg.seed, {0xada7u}));
        opt.reset();
      }
      const FeatureMap sf = adapter ? adapter->forward(sf_raw) : sf_raw;
      Tensorf dfeat;
      if (lw.pa > 0) {
        LossWithGrad pa = pairwise_affinity_loss(sf, tf, cfg.pool_factor);
        check_term(pa, i);
        terms.push_back({pa.loss, lw.pa});
        add_scaled(dfeat, pa.grad, lw.pa);
      }
      if (lw.ifv > 0) {
        LossWithGrad ifv = ifv_loss(sf, tf, batch.labels);
        check_term(ifv, i);
        terms.push_back({ifv.loss, lw.ifv});
        add_scaled(dfeat, ifv.grad, lw.ifv);
      }
      dtaps[s_tap] = adapter ? adapter->backward(dfeat) : std::move(dfeat);
    }

    if (!opt) build_optimizer();
    StepRecord step;
    step.step = i;
    step.learning_rate = poly_lr(cfg.mu0, i, cfg.eta);
    step.losses = compose(terms);
    if (!std::isfinite(step.losses.total)) {
      throw DivergenceError("total", "composite loss became non-finite at step " + std::to_string(i));
    }

    opt->zero_grad();
    student.backward(dlogits, dtaps);
    opt->step(step.learning_rate);

    if (adv) {
      const ProbabilityMap t_probs = softmax(t_out->logits, Temperature(1.0));
      double critic_loss = 0.0;
      for (std::size_t k = 0; k < adv->update_ratio; ++k) {
        critic_loss = discriminator_step(*adv, *s_probs, t_probs, batch.images).value;
      }
      if (!std::isfinite(critic_loss)) {
        throw DivergenceError(term::kHolistic, "critic loss became non-finite at step " + std::to_string(i));
      }
      step.critic_loss = critic_loss;
    }

    if (log.is_open()) {
      nlohmann::json j{{"kind", "step"}, {"step", i}, {"lr", step.learning_rate}, {"loss", report_json(step.losses)}};
      if (step.critic_loss) j["critic_loss"] = *step.critic_loss;
      log << j.dump() << '\n';
    }
    if (outputs.on_step) outputs.on_step(step);
    record.steps.push_back(std::move(step));

    const std::size_t done = i + 1;
    if (cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done != cfg.eta) run_eval(done);
  }
  record.final_miou = run_eval(cfg.eta);

  const auto elapsed = std::chrono::steady_clock::now() - started;
  record.seconds = std::chrono::duration<double>(elapsed).count();
  if (outputs.run_dir) {
    save_checkpoint(make_checkpoint(student, adapter ? &*adapter : nullptr, adv ? &*adv : nullptr, cfg, cfg.eta,
                                    record.final_miou),
                    *outputs.run_dir / "final.ckpt");
    nlohmann::json evals = nlohmann::json::array();
    for (const auto& e : record.evals) evals.push_back({{"step", e.step}, {"miou", e.miou}});
    const nlohmann::json summary{{"config", record.config},
                                 {"model", student.name()},
                                 {"teacher", teacher ? nlohmann::json(teacher->name()) : nlohmann::json(nullptr)},
                                 {"final_miou", record.final_miou},
                                 {"best_miou", record.best_miou},
                                 {"best_step", record.best_step},
                                 {"steps", record.steps.size()},
                                 {"evals", evals},
                                 {"seconds", record.seconds}};
    std::ofstream(*outputs.run_dir / "summary.json") << summary.dump(2) << '\n';
  }
  return record;
}

}  // namespace kdseg
