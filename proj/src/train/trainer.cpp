#include "minimt/trainer.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <exception>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "minimt/io.hpp"

namespace minimt {

using json = nlohmann::json;

namespace {

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void copy_params(const std::vector<Parameter>& from, std::vector<Parameter>& to) {
  for (std::size_t p = 0; p < from.size(); ++p) {
    auto src = from[p].value.data();
    auto dst = to[p].value.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void zero_grads(Seq2Seq& m) {
  for (auto& p : m.params()) p.value.zero_grad();
}

// Runs fn(k) for k in [0, n) on n threads, rethrowing the first failure.
template <typename Fn>
void fork_join(std::size_t n, Fn fn) {
  if (n == 1) {
    fn(0);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> threads;
  for (std::size_t k = 1; k < n; ++k) {
    threads.emplace_back([&, k] {
      try {
        fn(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  try {
    fn(0);
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

std::string to_string(ParallelMode m) { return m == ParallelMode::kSync ? "sync" : "async"; }

ParallelMode parse_mode(std::string_view s) {
  if (s == "sync" || s == "synchronous") return ParallelMode::kSync;
  if (s == "async" || s == "asynchronous") return ParallelMode::kAsync;
  throw TrainError("unknown training mode: " + std::string(s));
}

void TrainOptions::validate() const {
  if (batch_size == 0) throw TrainError("batch_size must be positive");
  if (replicas == 0) throw TrainError("replicas must be at least 1");
  if (window_batches == 0) throw TrainError("window_batches must be positive");
  if (learning_rate < 0.0) throw TrainError("learning_rate must be positive");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) {
    throw TrainError("decay_factor must lie in (0, 1]");
  }
  if (clip_norm < 0.0) throw TrainError("clip_norm must be non-negative");
  if (checkpoint_dtype != DType::kF64 && checkpoint_dtype != DType::kF32) {
    throw TrainError("checkpoint dtype must be f32 or f64");
  }
}

double EpochStats::ppl() const {
  return tokens == 0 ? 0.0 : std::exp(nll / static_cast<double>(tokens));
}

double EvalStats::ppl() const {
  return tokens == 0 ? 0.0 : std::exp(nll / static_cast<double>(tokens));
}

double EvalStats::accuracy() const {
  return tokens == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(tokens);
}

std::uint64_t parameter_checksum(const std::vector<Parameter>& params) {
  std::uint64_t h = fnv1a64("");
  for (const auto& p : params) {
    auto d = p.value.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)),
                h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(Seq2Seq model, TrainOptions options)
    : master_(std::move(model)), options_(std::move(options)) {
  options_.validate();
  optim_.method = options_.optim;
  optim_.learning_rate =
      options_.learning_rate > 0 ? options_.learning_rate : default_learning_rate(options_.optim);
  optim_.decay_factor = options_.decay_factor;
  optim_.start_decay_at = options_.start_decay_at;
  optim_.clip_norm = options_.clip_norm;
  optim_.validate();
  for (std::size_t k = 0; k < options_.replicas; ++k) {
    replicas_.push_back({master_.clone(), Tape()});
  }
}

Trainer::Trainer(Seq2Seq model, TrainOptions options, OptimState optim, TrainerState state)
    : Trainer(std::move(model), std::move(options)) {
  optim_ = std::move(optim);
  optim_.validate();
  state_ = std::move(state);
}

bool Trainer::reached_max_steps() const {
  return options_.max_steps > 0 && state_.step >= options_.max_steps;
}

LossResult Trainer::replica_pass(Replica& r, const Batch& batch, std::uint64_t step,
                                 std::size_t k) {
  zero_grads(r.model);
  r.tape.reset();
  Rng rng = make_rng({options_.seed, step, k});
  const bool drop = r.model.config().dropout > 0.0;
  LossResult res = r.model.forward_loss(r.tape, batch, drop ? &rng : nullptr);
  backward(r.tape, res.nll);
  r.tape.reset();
  return res;
}

void Trainer::broadcast() {
  const std::uint64_t expected = parameter_checksum(master_.params());
  for (auto& r : replicas_) {
    copy_params(master_.params(), r.model.params());
    if (parameter_checksum(r.model.params()) != expected) {
      throw TrainError("replica diverged from master after broadcast");
    }
  }
}

Gradients Trainer::normalized_gradient(std::span<const Batch> batches, std::uint64_t step) {
  if (batches.empty() || batches.size() > replicas_.size()) {
    throw TrainError("a step needs between 1 and " + std::to_string(replicas_.size()) +
                     " batches, got " + std::to_string(batches.size()));
  }
  const std::size_t n = batches.size();
  std::vector<LossResult> results(n);
  fork_join(n, [&](std::size_t k) { results[k] = replica_pass(replicas_[k], batches[k], step, k); });

  std::size_t tokens = 0;
  for (const auto& r : results) tokens += r.tokens;
  Gradients grads(master_.params().size());
  for (std::size_t p = 0; p < grads.size(); ++p) {
    auto g0 = replicas_[0].model.params()[p].value.grad();
    grads[p].assign(g0.begin(), g0.end());
    for (std::size_t k = 1; k < n; ++k) {
      auto gk = replicas_[k].model.params()[p].value.grad();
      for (std::size_t i = 0; i < gk.size(); ++i) grads[p][i] += gk[i];
    }
    const double denom = static_cast<double>(std::max<std::size_t>(tokens, 1));
    for (double& x : grads[p]) x /= denom;
  }
  last_results_ = std::move(results);
  return grads;
}

StepStats Trainer::train_step(std::span<const Batch> batches) {
  Gradients grads = normalized_gradient(batches, state_.step);
  StepStats s;
  s.learning_rate = optim_.learning_rate;
  for (const auto& r : last_results_) {
    s.nll += r.nll.item();
    s.tokens += r.tokens;
    s.correct += r.correct;
  }
  s.grad_norm = clip_and_step(master_.params(), grads, optim_);
  broadcast();
  s.step = ++state_.step;
  return s;
}

void Trainer::report(std::ostream* log, const StepStats& s) {
  interval_nll_ += s.nll;
  interval_tokens_ += s.tokens;
  if (step_hook_) step_hook_(s);
  if (!log || options_.report_every == 0 || s.step % options_.report_every != 0) return;
  const double now = now_seconds();
  const double elapsed = std::max(now - interval_start_, 1e-9);
  const double ppl =
      interval_tokens_ ? std::exp(interval_nll_ / static_cast<double>(interval_tokens_)) : 0.0;
  std::ostringstream line;
  line << "step=" << s.step << " epoch=" << state_.epoch + 1 << " lr=" << s.learning_rate
       << " ppl=" << ppl << " tok/s=" << static_cast<double>(interval_tokens_) / elapsed << '\n';
  *log << line.str() << std::flush;
  interval_nll_ = 0.0;
  interval_tokens_ = 0;
  interval_start_ = now;
}

EpochStats Trainer::train_epoch(const ShardSet& train, std::ostream* log) {
  interval_start_ = now_seconds();
  interval_nll_ = 0.0;
  interval_tokens_ = 0;
  return options_.mode == ParallelMode::kSync || options_.replicas == 1
             ? train_epoch_sync(train, log)
             : train_epoch_async(train, log);
}

EpochStats Trainer::train_epoch_sync(const ShardSet& train, std::ostream* log) {
  const double start = now_seconds();
  EpochStats es;
  es.epoch = state_.epoch + 1;
  BatchStream stream(train, options_.batch_size, options_.seed, state_.epoch,
                     options_.window_batches);
  for (std::size_t i = 0; i < state_.batch_offset; ++i) {
    if (!stream.next()) throw TrainError("resume offset lies beyond the end of the epoch");
  }
  std::vector<Batch> group;
  while (!reached_max_steps()) {
    group.clear();
    while (group.size() < options_.replicas) {
      auto b = stream.next();
      if (!b) break;
      group.push_back(std::move(*b));
    }
    if (group.empty()) {
      es.completed = true;
      break;
    }
    StepStats s = train_step(group);
    state_.batch_offset += group.size();
    es.steps += 1;
    es.tokens += s.tokens;
    es.nll += s.nll;
    report(log, s);
  }
  if (!es.completed && !reached_max_steps()) es.completed = true;
  if (es.completed) {
    // A max_steps stop that lands exactly on the last batch still ends the epoch.
    ++state_.epoch;
    state_.batch_offset = 0;
  } else if (!stream.next()) {
    es.completed = true;
    ++state_.epoch;
    state_.batch_offset = 0;
  }
  es.seconds = now_seconds() - start;
  return es;
}

// Bounded-staleness asynchronous training. Batches are handed out as
// tickets in stream order and applied to the master in ticket order, so
// ticket i always produces master version i + 1. A worker may compute
// ticket i on parameters of any version v with i - v <= staleness_bound;
// it refreshes its copy from the master only when the copy is older.
EpochStats Trainer::train_epoch_async(const ShardSet& train, std::ostream* log) {
  const double start = now_seconds();
  EpochStats es;
  es.epoch = state_.epoch + 1;
  BatchStream stream(train, options_.batch_size, options_.seed, state_.epoch,
                     options_.window_batches);
  for (std::size_t i = 0; i < state_.batch_offset; ++i) {
    if (!stream.next()) throw TrainError("resume offset lies beyond the end of the epoch");
  }
  const std::size_t bound = options_.staleness_bound;
  std::mutex mu;
  std::condition_variable cv;
  std::uint64_t next_ticket = 0;  // relative to this call
  std::uint64_t applied = 0;      // master version relative to this call
  bool exhausted = false;
  bool failed = false;
  const std::uint64_t base_step = state_.step;
  const std::size_t K = options_.replicas;

  auto worker = [&](std::size_t w) {
    Replica& rep = replicas_[w];
    std::uint64_t local_version = 0;
    while (true) {
      Batch batch;
      std::uint64_t ticket = 0;
      {
        std::unique_lock lock(mu);
        if (failed || exhausted) return;
        if (options_.max_steps > 0 && base_step + next_ticket >= options_.max_steps) return;
        auto b = stream.next();
        if (!b) {
          exhausted = true;
          cv.notify_all();
          return;
        }
        batch = std::move(*b);
        ticket = next_ticket++;
        if (ticket - std::min(ticket, local_version) > bound) {
          const std::uint64_t need = ticket - bound;
          cv.wait(lock, [&] { return failed || applied >= need; });
          if (failed) return;
          copy_params(master_.params(), rep.model.params());
          local_version = applied;
        }
      }
      LossResult res = replica_pass(rep, batch, base_step + ticket, 0);

      std::unique_lock lock(mu);
      cv.wait(lock, [&] { return failed || applied == ticket; });
      if (failed) return;
      const std::uint64_t staleness = ticket - local_version;
      if (staleness > bound) {
        failed = true;
        cv.notify_all();
        throw TrainError("staleness accounting violated: ticket " + std::to_string(ticket) +
                         " computed on version " + std::to_string(local_version));
      }
      Gradients grads(rep.model.params().size());
      const double denom = static_cast<double>(std::max<std::size_t>(res.tokens, 1));
      for (std::size_t p = 0; p < grads.size(); ++p) {
        auto g = rep.model.params()[p].value.grad();
        grads[p].assign(g.begin(), g.end());
        for (double& x : grads[p]) x /= denom;
      }
      StepStats s;
      s.learning_rate = optim_.learning_rate;
      s.nll = res.nll.item();
      s.tokens = res.tokens;
      s.correct = res.correct;
      s.staleness = staleness;
      s.grad_norm = clip_and_step(master_.params(), grads, optim_);
      ++applied;
      s.step = ++state_.step;
      ++state_.batch_offset;
      if (staleness == 0) {
        // No foreign update intervened, so the fresh master is one copy away.
        copy_params(master_.params(), rep.model.params());
        local_version = applied;
      }
      es.steps += 1;
      es.tokens += s.tokens;
      es.nll += s.nll;
      report(log, s);
      cv.notify_all();
    }
  };

  std::vector<std::exception_ptr> errors(K);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < K; ++w) {
    threads.emplace_back([&, w] {
      try {
        worker(w);
      } catch (...) {
        errors[w] = std::current_exception();
        std::lock_guard lock(mu);
        failed = true;
        cv.notify_all();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  broadcast();
  es.completed = exhausted || !stream.next();
  if (es.completed) {
    ++state_.epoch;
    state_.batch_offset = 0;
  }
  es.seconds = now_seconds() - start;
  return es;
}

EvalStats Trainer::evaluate(const ShardSet& data, std::size_t batch_size) const {
  if (batch_size == 0) batch_size = options_.batch_size;
  EvalStats st;
  Tape tape(false);
  for (std::size_t i = 0; i < data.count(); ++i) {
    Shard shard = data.load(i);
    for (const auto& b : sequential_batches(shard.examples, batch_size)) {
      tape.reset();
      LossResult r = master_.forward_loss(tape, b, nullptr);
      st.nll += r.nll.item();
      st.tokens += r.tokens;
      st.correct += r.correct;
    }
  }
  return st;
}

void Trainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, master_, optim_, state_, options_, vocabs_ ? &*vocabs_ : nullptr,
                  data_path_, metadata_);
}

void Trainer::fit(const ShardSet& train, const ShardSet* valid, std::ostream* log) {
  const bool saving = !options_.save_model.empty();
  auto path_for = [&](const std::string& suffix) {
    return std::filesystem::path(options_.save_model + suffix + ".mnmt");
  };
  if (options_.epochs == 0) {
    if (saving) save(path_for("_e0"));
    return;
  }
  while (state_.epoch < options_.epochs && !reached_max_steps()) {
    EpochStats es = train_epoch(train, log);
    if (!es.completed) break;
    std::optional<EvalStats> ev;
    if (valid && valid->count() > 0) {
      ev = evaluate(*valid);
      state_.val_ppl.push_back(ev->ppl());
    }
    maybe_decay(optim_, state_.val_ppl, state_.epoch);
    if (log) {
      std::ostringstream line;
      line << "epoch=" << es.epoch << " train_ppl=" << es.ppl() << " steps=" << es.steps
           << " seconds=" << es.seconds;
      if (ev) line << " val_ppl=" << ev->ppl() << " val_acc=" << ev->accuracy();
      line << " next_lr=" << optim_.learning_rate << '\n';
      *log << line.str() << std::flush;
    }
    bool best = false;
    if (ev && ev->ppl() < state_.best_val_ppl) {
      state_.best_val_ppl = ev->ppl();
      best = true;
    }
    if (saving) {
      save(path_for("_e" + std::to_string(es.epoch)));
      if (best) save(path_for("_best"));
    }
    if (epoch_hook_) epoch_hook_(es, ev ? &*ev : nullptr);
  }
  if (saving && reached_max_steps() && state_.batch_offset > 0) {
    save(path_for("_step" + std::to_string(state_.step)));
  }
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json config_json(const ModelConfig& c) {
  json feats = json::array();
  for (const auto& f : c.src_features) {
    feats.push_back({{"vocab_size", f.vocab_size}, {"emb_size", f.emb_size}});
  }
  return {{"cell", to_string(c.cell)},
          {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers},
          {"rnn_size", c.rnn_size},
          {"emb_size", c.emb_size},
          {"bidirectional", c.bidirectional},
          {"attention", to_string(c.attention)},
          {"input_feed", c.input_feed},
          {"copy", c.copy},
          {"dropout", c.dropout},
          {"src_vocab", c.src_vocab},
          {"tgt_vocab", c.tgt_vocab},
          {"src_features", feats}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.cell = parse_cell(j.at("cell").get<std::string>());
  j.at("enc_layers").get_to(c.enc_layers);
  j.at("dec_layers").get_to(c.dec_layers);
  j.at("rnn_size").get_to(c.rnn_size);
  j.at("emb_size").get_to(c.emb_size);
  j.at("bidirectional").get_to(c.bidirectional);
  c.attention = parse_attention(j.at("attention").get<std::string>());
  j.at("input_feed").get_to(c.input_feed);
  j.at("copy").get_to(c.copy);
  j.at("dropout").get_to(c.dropout);
  j.at("src_vocab").get_to(c.src_vocab);
  j.at("tgt_vocab").get_to(c.tgt_vocab);
  for (const auto& f : j.at("src_features")) {
    c.src_features.push_back({f.at("vocab_size").get<std::size_t>(),
                              f.at("emb_size").get<std::size_t>()});
  }
  return c;
}

json options_json(const TrainOptions& o) {
  return {{"epochs", o.epochs},
          {"batch_size", o.batch_size},
          {"optim", to_string(o.optim)},
          {"learning_rate", o.learning_rate},
          {"decay_factor", o.decay_factor},
          {"start_decay_at", o.start_decay_at},
          {"clip_norm", o.clip_norm},
          {"replicas", o.replicas},
          {"mode", to_string(o.mode)},
          {"staleness_bound", o.staleness_bound},
          {"seed", o.seed},
          {"report_every", o.report_every},
          {"window_batches", o.window_batches},
          {"max_steps", o.max_steps},
          {"save_model", o.save_model},
          {"checkpoint_dtype", o.checkpoint_dtype == DType::kF32 ? "f32" : "f64"}};
}

TrainOptions options_from(const json& j) {
  TrainOptions o;
  j.at("epochs").get_to(o.epochs);
  j.at("batch_size").get_to(o.batch_size);
  o.optim = parse_optim(j.at("optim").get<std::string>());
  j.at("learning_rate").get_to(o.learning_rate);
  j.at("decay_factor").get_to(o.decay_factor);
  j.at("start_decay_at").get_to(o.start_decay_at);
  j.at("clip_norm").get_to(o.clip_norm);
  j.at("replicas").get_to(o.replicas);
  o.mode = parse_mode(j.at("mode").get<std::string>());
  j.at("staleness_bound").get_to(o.staleness_bound);
  j.at("seed").get_to(o.seed);
  j.at("report_every").get_to(o.report_every);
  j.at("window_batches").get_to(o.window_batches);
  j.at("max_steps").get_to(o.max_steps);
  j.at("save_model").get_to(o.save_model);
  o.checkpoint_dtype = j.at("checkpoint_dtype").get<std::string>() == "f32" ? DType::kF32
                                                                              : DType::kF64;
  return o;
}

json optim_json(const OptimState& s) {
  return {{"method", to_string(s.method)}, {"learning_rate", s.learning_rate},
          {"decay_factor", s.decay_factor}, {"start_decay_at", s.start_decay_at},
          {"clip_norm", s.clip_norm},       {"beta1", s.beta1},
          {"beta2", s.beta2},               {"epsilon", s.epsilon},
          {"step", s.step},                 {"decaying", s.decaying}};
}

OptimState optim_from(const json& j) {
  OptimState s;
  s.method = parse_optim(j.at("method").get<std::string>());
  j.at("learning_rate").get_to(s.learning_rate);
  j.at("decay_factor").get_to(s.decay_factor);
  j.at("start_decay_at").get_to(s.start_decay_at);
  j.at("clip_norm").get_to(s.clip_norm);
  j.at("beta1").get_to(s.beta1);
  j.at("beta2").get_to(s.beta2);
  j.at("epsilon").get_to(s.epsilon);
  j.at("step").get_to(s.step);
  j.at("decaying").get_to(s.decaying);
  return s;
}

json state_json(const TrainerState& s) {
  json best = std::isfinite(s.best_val_ppl) ? json(s.best_val_ppl) : json(nullptr);
  return {{"epoch", s.epoch},       {"batch_offset", s.batch_offset}, {"step", s.step},
          {"val_ppl", s.val_ppl}, {"best_val_ppl", best}};
}

TrainerState state_from(const json& j) {
  TrainerState s;
  j.at("epoch").get_to(s.epoch);
  j.at("batch_offset").get_to(s.batch_offset);
  j.at("step").get_to(s.step);
  j.at("val_ppl").get_to(s.val_ppl);
  if (!j.at("best_val_ppl").is_null()) j.at("best_val_ppl").get_to(s.best_val_ppl);
  return s;
}

NamedArray values_array(const std::string& name, const std::vector<double>& v, DType dtype,
                        const Shape& shape) {
  NamedArray a;
  a.name = name;
  a.dims.assign(shape.begin(), shape.end());
  if (dtype == DType::kF32) {
    a.values = std::vector<float>(v.begin(), v.end());
  } else {
    a.values = v;
  }
  return a;
}

std::vector<double> as_doubles(const NamedArray& a) {
  if (auto f = std::get_if<std::vector<float>>(&a.values)) return {f->begin(), f->end()};
  if (auto d = std::get_if<std::vector<double>>(&a.values)) return *d;
  throw FormatError("array " + a.name + " is not floating point");
}

}  // namespace

std::string model_config_to_json(const ModelConfig& c) { return config_json(c).dump(); }

ModelConfig model_config_from_json(std::string_view text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

std::string train_options_to_json(const TrainOptions& o) { return options_json(o).dump(); }

TrainOptions train_options_from_json(std::string_view text) {
  try {
    return options_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed training options: ") + e.what());
  }
}

std::string config_hash(const ModelConfig& c) {
  return hex64(fnv1a64(model_config_to_json(c)));
}

void save_checkpoint(const std::filesystem::path& path, const Seq2Seq& model,
                     const OptimState& optim, const TrainerState& state,
                     const TrainOptions& options, const Vocabs* vocabs,
                     const std::string& data_path, const std::string& metadata) {
  const DType dtype = options.checkpoint_dtype;
  std::vector<NamedArray> arrays;
  arrays.push_back(NamedArray::from_text("model_config", model_config_to_json(model.config())));
  arrays.push_back(NamedArray::from_text("train_options", train_options_to_json(options)));
  arrays.push_back(NamedArray::from_text("optim_state", optim_json(optim).dump()));
  arrays.push_back(NamedArray::from_text("trainer_state", state_json(state).dump()));
  for (const auto& p : model.params()) {
    auto d = p.value.data();
    arrays.push_back(values_array("param/" + p.name, {d.begin(), d.end()}, dtype, p.value.shape()));
  }
  if (!optim.m.empty()) {
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      const auto& p = model.params()[i];
      arrays.push_back(values_array("adam_m/" + p.name, optim.m[i], dtype, p.value.shape()));
      arrays.push_back(values_array("adam_v/" + p.name, optim.v[i], dtype, p.value.shape()));
    }
  }
  json side = {{"format", "minimt-checkpoint"},
               {"version", 1},
               {"model", config_json(model.config())},
               {"config_hash", config_hash(model.config())},
               {"step", state.step},
               {"epoch", state.epoch},
               {"data", data_path},
               {"dtype", dtype == DType::kF32 ? "f32" : "f64"}};
  if (vocabs) {
    const std::string src = vocab_to_text(vocabs->src);
    const std::string tgt = vocab_to_text(vocabs->tgt);
    arrays.push_back(NamedArray::from_text("vocab/src", src));
    arrays.push_back(NamedArray::from_text("vocab/tgt", tgt));
    side["src_vocab_hash"] = hex64(fnv1a64(src));
    side["tgt_vocab_hash"] = hex64(fnv1a64(tgt));
    for (std::size_t k = 0; k < vocabs->feats.size(); ++k) {
      arrays.push_back(
          NamedArray::from_text("vocab/feat" + std::to_string(k), vocab_to_text(vocabs->feats[k])));
    }
  }
  if (!data_path.empty()) {
    arrays.push_back(NamedArray::from_text("data_path", data_path));
    try {
      const auto m = load_manifest(data_path);
      side["src_vocab"] = m.src_vocab;
      side["tgt_vocab"] = m.tgt_vocab;
    } catch (const std::exception&) {
      // The sidecar is informational; a missing manifest is not fatal.
    }
  }
  if (!metadata.empty()) {
    arrays.push_back(NamedArray::from_text("metadata", metadata));
    side["metadata"] = json::parse(metadata);
  }
  write_container(path, arrays);
  write_file_atomic(path.string() + ".json", side.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto arrays = read_container(path);
  Checkpoint ck;
  try {
    ck.options = options_from(json::parse(find_array(arrays, "train_options").text()));
    ck.optim = optim_from(json::parse(find_array(arrays, "optim_state").text()));
    ck.state = state_from(json::parse(find_array(arrays, "trainer_state").text()));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  ModelConfig cfg = model_config_from_json(find_array(arrays, "model_config").text());
  ck.model = Seq2Seq(cfg, 0);
  bool has_adam = false;
  for (const auto& a : arrays) has_adam |= a.name.starts_with("adam_m/");
  if (has_adam) {
    ck.optim.m.resize(ck.model.params().size());
    ck.optim.v.resize(ck.model.params().size());
  }
  for (std::size_t i = 0; i < ck.model.params().size(); ++i) {
    auto& p = ck.model.params()[i];
    const auto& a = find_array(arrays, "param/" + p.name);
    const Shape& shape = p.value.shape();
    if (a.dims != std::vector<std::uint64_t>(shape.begin(), shape.end())) {
      throw FormatError("shape mismatch for parameter " + p.name);
    }
    auto values = as_doubles(a);
    std::copy(values.begin(), values.end(), p.value.data().begin());
    if (has_adam) {
      ck.optim.m[i] = as_doubles(find_array(arrays, "adam_m/" + p.name));
      ck.optim.v[i] = as_doubles(find_array(arrays, "adam_v/" + p.name));
      if (ck.optim.m[i].size() != p.value.numel() || ck.optim.v[i].size() != p.value.numel()) {
        throw FormatError("Adam moment size mismatch for " + p.name);
      }
    }
  }
  bool has_vocab = false;
  for (const auto& a : arrays) has_vocab |= a.name == "vocab/src";
  if (has_vocab) {
    Vocabs v;
    v.src = vocab_from_text(find_array(arrays, "vocab/src").text());
    v.tgt = vocab_from_text(find_array(arrays, "vocab/tgt").text());
    for (std::size_t k = 0; k < cfg.src_features.size(); ++k) {
      v.feats.push_back(vocab_from_text(find_array(arrays, "vocab/feat" + std::to_string(k)).text()));
    }
    if (v.src.size() != cfg.src_vocab || v.tgt.size() != cfg.tgt_vocab) {
      throw FormatError("checkpoint vocabularies disagree with the model config");
    }
    ck.vocabs = std::move(v);
  }
  for (const auto& a : arrays) {
    if (a.name == "data_path") ck.data_path = a.text();
    if (a.name == "metadata") ck.metadata = a.text();
  }
  return ck;
}

}  // namespace minimt
