#include "mlcil/protocol.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "mlcil/errors.hpp"
#include "mlcil/format.hpp"
#include "mlcil/random.hpp"

namespace mlcil::protocol {

using nlohmann::json;
using numgrad::Graph;
using numgrad::Var;

// ---------------------------------------------------------------- schedule

std::vector<ClassId> SessionSchedule::seen_through(std::size_t s) const {
  std::vector<ClassId> out;
  for (std::size_t i = 0; i <= s && i < sessions.size(); ++i) {
    out.insert(out.end(), sessions[i].begin(), sessions[i].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t SessionSchedule::session_of(ClassId c) const {
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    if (std::find(sessions[s].begin(), sessions[s].end(), c) != sessions[s].end()) {
      return s;
    }
  }
  throw ContractError("class " + std::to_string(c) + " is not scheduled");
}

SessionSchedule make_schedule(std::span<const std::string> class_names,
                              std::size_t base, std::size_t increment) {
  std::vector<std::string> names(class_names.begin(), class_names.end());
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
    throw DataError("schedule: duplicate class names");
  }
  const std::size_t n = names.size();
  // "B0-Cj": equal sessions of j classes.
  if (base == 0) base = increment;
  if (base < 1) throw DataError("schedule: base session needs at least one class");
  if (base > n) {
    throw DataError("schedule: base count " + std::to_string(base) + " exceeds " +
                    std::to_string(n) + " classes");
  }
  if (increment == 0 && base != n) {
    throw DataError("schedule: increment 0 leaves classes unscheduled");
  }
  SessionSchedule sch;
  sch.base_count = base;
  sch.increment = increment;
  std::size_t next = 0;
  auto take = [&](std::size_t count) {
    std::vector<ClassId> ids;
    for (std::size_t i = 0; i < count && next < n; ++i) ids.push_back(next++);
    sch.sessions.push_back(std::move(ids));
  };
  take(base);
  while (next < n) take(increment);
  return sch;
}

SessionSchedule schedule_from_lists(std::span<const std::string> class_names,
                                    const std::vector<std::vector<std::string>>& sessions) {
  std::vector<std::string> names(class_names.begin(), class_names.end());
  std::sort(names.begin(), names.end());
  SessionSchedule sch;
  std::set<ClassId> used;
  for (const auto& list : sessions) {
    if (list.empty()) throw DataError("schedule: empty session list");
    std::vector<ClassId> ids;
    for (const auto& name : list) {
      auto it = std::lower_bound(names.begin(), names.end(), name);
      if (it == names.end() || *it != name) {
        throw DataError("schedule: unknown class '" + name + "'");
      }
      const auto id = static_cast<ClassId>(it - names.begin());
      if (!used.insert(id).second) {
        throw DataError("schedule: class '" + name + "' appears twice");
      }
      ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    sch.sessions.push_back(std::move(ids));
  }
  if (used.size() != names.size()) {
    throw DataError("schedule: session lists do not cover all " +
                    std::to_string(names.size()) + " classes");
  }
  sch.base_count = sch.sessions.front().size();
  sch.increment = sch.sessions.size() > 1 ? sch.sessions[1].size() : 0;
  return sch;
}

std::vector<std::uint8_t> relabel(const dataio::Sample& sample,
                                  std::span<const ClassId> label_space,
                                  std::span<const ClassId> scope) {
  std::vector<std::uint8_t> out(label_space.size(), 0);
  for (std::size_t i = 0; i < label_space.size(); ++i) {
    const ClassId c = label_space[i];
    out[i] = sample.has_label(c) &&
             std::find(scope.begin(), scope.end(), c) != scope.end();
  }
  return out;
}

// ---------------------------------------------------------------- optimizer

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractError("epochs must be >= 1");
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (!(base_lr > 0.0) || !(incremental_lr > 0.0)) {
    throw ContractError("learning rates must be positive");
  }
  if (!(weight_decay >= 0.0)) throw ContractError("weight_decay must be >= 0");
  if (!(f1_threshold > 0.0 && f1_threshold < 1.0)) {
    throw ContractError("f1_threshold must be in (0, 1)");
  }
}

OneCycleSchedule::OneCycleSchedule(double peak, std::size_t total_steps,
                                   double warmup_fraction, double start_divisor,
                                   double end_divisor)
    : peak_(peak),
      start_(peak / start_divisor),
      end_(peak / end_divisor),
      total_(std::max<std::size_t>(1, total_steps)) {
  peak_step_ = std::min(total_ - 1, static_cast<std::size_t>(
                                        std::floor(warmup_fraction * static_cast<double>(total_))));
}

double OneCycleSchedule::lr(std::size_t step) const {
  if (step <= peak_step_) {
    if (peak_step_ == 0) return peak_;
    const double frac = static_cast<double>(step) / static_cast<double>(peak_step_);
    return start_ + (peak_ - start_) * frac;
  }
  const std::size_t last = total_ - 1;
  if (step >= last) return end_;
  const double frac = static_cast<double>(step - peak_step_) /
                      static_cast<double>(last - peak_step_);
  return end_ + (peak_ - end_) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void Adam::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                double lr) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam: parameter and gradient counts differ");
  }
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (grads[k].shape() != params[k]->shape()) {
      throw DimensionError("adam: gradient shape mismatch for parameter " +
                           std::to_string(k));
    }
    if (!grads[k].all_finite()) {
      throw NumericError("non-finite gradient in parameter " + std::to_string(k) +
                         " at step " + std::to_string(t_));
    }
  }
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  } else if (m_.size() != params.size()) {
    throw ContractError("adam: parameter set changed; reset the optimizer");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * p[i]);
    }
  }
}

// ---------------------------------------------------------------- state

ModelSnapshot ModelSnapshot::capture(const icp::PromptBank& bank,
                                     const encoders::Encoders& enc) {
  return ModelSnapshot{bank, losses::capture_snapshot(bank, enc), bank.checksum()};
}

Context::Context(const dataio::Dataset& data, SessionSchedule schedule,
                 const encoders::Encoders& enc, ProtocolOptions options)
    : data_(&data), schedule_(std::move(schedule)), enc_(&enc), options_(options) {
  options_.train.validate();
  options_.loss.validate();
  options_.icp.validate();
  if (data.n_regions() != enc.config().n_regions || data.d_in() != enc.config().d_in) {
    throw DataError("dataset regions [" + std::to_string(data.n_regions()) + "x" +
                    std::to_string(data.d_in()) + "] do not match encoder config");
  }
  projected_.reserve(data.samples().size());
  for (const auto& s : data.samples()) projected_.push_back(enc.image_to_text(s.regions));
}

ExperimentState initial_state(const Context& ctx) {
  return ExperimentState{
      icp::PromptBank(ctx.encoders().config().d_token, ctx.options().icp),
      sccr::ReplayBuffer(ctx.options().replay.budget), std::nullopt, {}, 0};
}

std::vector<TrainItem> build_training_set(const Context& ctx, const ExperimentState& state,
                                          std::size_t session) {
  const auto& sch = ctx.schedule();
  const auto& samples = ctx.dataset().samples();
  const auto label_space = sch.seen_through(session);
  const auto& current = sch.sessions.at(session);

  // sample index -> label scope
  std::map<std::size_t, std::set<ClassId>> scopes;
  std::set<std::size_t> replayed;
  for (std::size_t idx : ctx.dataset().indices(dataio::Split::kTrain)) {
    const auto& s = samples[idx];
    const bool fresh = std::any_of(current.begin(), current.end(),
                                   [&](ClassId c) { return s.has_label(c); });
    if (fresh) scopes[idx].insert(current.begin(), current.end());
  }
  if (ctx.options().replay.strategy != sccr::Strategy::kNone) {
    for (const sccr::BufferEntry* e : state.buffer.all()) {
      const std::size_t idx = ctx.dataset().index_of(e->sample_id);
      const auto scope = sch.seen_through(e->stored_session);
      scopes[idx].insert(scope.begin(), scope.end());
      replayed.insert(idx);
    }
  }
  std::vector<TrainItem> items;
  items.reserve(scopes.size());
  for (const auto& [idx, scope] : scopes) {
    const std::vector<ClassId> sc(scope.begin(), scope.end());
    items.push_back(TrainItem{idx, relabel(samples[idx], label_space, sc),
                              replayed.count(idx) > 0});
  }
  return items;
}

metrics::SessionReport evaluate(const Context& ctx, const icp::PromptBank& bank,
                                std::size_t session) {
  const auto seen = ctx.schedule().seen_through(session);
  if (bank.class_ids() != seen) {
    throw ContractError("evaluate: model classes differ from the seen classes");
  }
  const auto test = ctx.dataset().indices(dataio::Split::kTest);
  const icp::Scorer scorer(bank, ctx.encoders());
  Tensor probs({std::max<std::size_t>(1, test.size()), seen.size()});
  metrics::LabelMatrix labels{test.size(), seen.size(), {}};
  labels.data.reserve(test.size() * seen.size());
  for (std::size_t r = 0; r < test.size(); ++r) {
    const auto& s = ctx.dataset().samples()[test[r]];
    const auto sc = scorer.score_projected(ctx.projected()[test[r]]);
    for (std::size_t c = 0; c < seen.size(); ++c) {
      probs.at(r, c) = sc.probs[c];
      labels.data.push_back(s.has_label(seen[c]));
    }
  }
  if (test.empty()) {
    metrics::SessionReport rep;
    rep.session = session;
    rep.seen_classes = seen;
    return rep;
  }
  return metrics::evaluate_session(session, seen, probs, labels,
                                   ctx.options().train.f1_threshold);
}

namespace {

void train_session(const Context& ctx, ExperimentState& state, std::size_t session,
                   const std::vector<TrainItem>& items) {
  const auto& opt = ctx.options();
  const std::size_t batch = opt.train.batch_size;
  const std::size_t per_epoch = (items.size() + batch - 1) / batch;
  const OneCycleSchedule schedule(session == 0 ? opt.train.base_lr : opt.train.incremental_lr,
                                  per_epoch * opt.train.epochs);
  Adam adam(AdamConfig{0.9, 0.999, 1e-8, opt.train.weight_decay});
  const bool use_tpc = opt.tpc && opt.loss.alpha > 0.0 && state.previous &&
                       !state.previous->text.empty();

  std::vector<std::size_t> order(items.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.train.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(opt.train.seed, 0x5e55 + session), epoch));
    rng.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      Graph g;
      const icp::BoundBank bound = icp::bind(g, state.bank, true);
      const icp::TextFeatures text = icp::encode_prompts(bound, state.bank, ctx.encoders());
      std::vector<Var> per_sample;
      per_sample.reserve(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const TrainItem& item = items[order[k]];
        const auto agg = icp::cfa(g.constant(ctx.projected()[item.sample_index]),
                                  text.class_stack);
        const Var probs = numgrad::sigmoid(icp::class_logits(agg, text, opt.icp));
        per_sample.push_back(numgrad::reshape(losses::asl(probs, item.labels, opt.loss), {1}));
      }
      Var loss = numgrad::mean(numgrad::concat_rows(per_sample));
      if (use_tpc) {
        loss = numgrad::add(
            loss, numgrad::scale(losses::tpc(g, text, state.previous->text), opt.loss.alpha));
      }
      if (!std::isfinite(loss.value().item())) {
        throw NumericError("non-finite loss in session " + std::to_string(session) +
                           ", epoch " + std::to_string(epoch));
      }
      g.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(bound.params.size());
      for (const Var& p : bound.params) grads.push_back(g.grad(p));
      const auto params = state.bank.parameters();
      adam.step(params, grads, schedule.lr(step));
      ++step;
    }
  }
}

}  // namespace

std::pair<ExperimentState, metrics::SessionReport> run_session(
    const Context& ctx, ExperimentState state, std::size_t session) {
  const auto& sch = ctx.schedule();
  if (session >= sch.size()) throw ContractError("session index out of range");
  if (session != state.next_session) {
    throw ContractError("sessions must run in order: expected " +
                        std::to_string(state.next_session) + ", got " +
                        std::to_string(session));
  }
  const auto& opt = ctx.options();
  const auto& new_classes = sch.sessions[session];
  std::vector<std::string> names;
  for (ClassId c : new_classes) names.push_back(ctx.dataset().class_names().at(c));
  state.bank.add_classes(new_classes, names, session,
                         derive_seed(opt.train.seed, 0x9e0 + session));

  const auto items = build_training_set(ctx, state, session);
  if (!items.empty()) train_session(ctx, state, session, items);

  state.previous = ModelSnapshot::capture(state.bank, ctx.encoders());

  sccr::SessionData sd;
  sd.dataset = &ctx.dataset();
  sd.new_classes = new_classes;
  sd.session = session;
  sd.projected = &ctx.projected();
  for (const auto& item : items) {
    const auto& s = ctx.dataset().samples()[item.sample_index];
    if (std::any_of(new_classes.begin(), new_classes.end(),
                    [&](ClassId c) { return s.has_label(c); })) {
      sd.train_indices.push_back(item.sample_index);
    }
  }
  state.buffer = sccr::update_buffer(std::move(state.buffer), sd, state.bank,
                                     ctx.encoders(), opt.replay);

  auto report = evaluate(ctx, state.bank, session);
  state.reports.push_back(report);
  state.next_session = session + 1;
  return {std::move(state), std::move(report)};
}

metrics::RunReport run_all(const Context& ctx) {
  ExperimentState state = initial_state(ctx);
  for (std::size_t s = 0; s < ctx.schedule().size(); ++s) {
    state = run_session(ctx, std::move(state), s).first;
  }
  return metrics::RunReport{state.reports};
}

// ---------------------------------------------------------------- checkpoints

namespace {

json tensor_to_json(const Tensor& t) {
  if (t.rank() == 1) return std::vector<double>(t.data().begin(), t.data().end());
  json rows = json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

Tensor tensor_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw DataError("bank: tensor must be a non-empty array");
  if (!j.front().is_array()) return Tensor::vector(j.get<std::vector<double>>());
  std::vector<double> flat;
  const std::size_t cols = j.front().size();
  for (const auto& row : j) {
    if (row.size() != cols) throw DataError("bank: ragged tensor");
    for (const auto& v : row) flat.push_back(v.get<double>());
  }
  return Tensor::matrix(j.size(), cols, std::move(flat));
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError("bad number '" + s + "'");
  }
  return v;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::istringstream is(read_file(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

json bank_to_json(const icp::PromptBank& bank) {
  const auto& cfg = bank.config();
  json classes = json::array();
  for (const auto& e : bank.entries()) {
    classes.push_back({{"id", e.id},
                       {"name", e.name},
                       {"session_added", e.session_added},
                       {"context", tensor_to_json(e.class_prompt.context)},
                       {"class_embedding", tensor_to_json(e.class_prompt.class_embedding)},
                       {"context_prompt", tensor_to_json(e.context_prompt.tokens)}});
  }
  return {{"d_token", bank.d_token()},
          {"config",
           {{"context_length", cfg.context_length},
            {"temperature", cfg.temperature},
            {"init_std", cfg.init_std},
            {"use_context_prompt", cfg.use_context_prompt},
            {"shared_context", cfg.shared_context}}},
          {"shared_context", bank.shared_context() ? tensor_to_json(*bank.shared_context())
                                                   : json(nullptr)},
          {"classes", classes}};
}

icp::PromptBank bank_from_json(const json& j) {
  try {
    icp::IcpConfig cfg;
    const auto& c = j.at("config");
    cfg.context_length = c.at("context_length").get<std::size_t>();
    cfg.temperature = c.at("temperature").get<double>();
    cfg.init_std = c.at("init_std").get<double>();
    cfg.use_context_prompt = c.at("use_context_prompt").get<bool>();
    cfg.shared_context = c.at("shared_context").get<bool>();
    icp::PromptBank bank(j.at("d_token").get<std::size_t>(), cfg);
    std::vector<icp::PromptEntry> entries;
    for (const auto& e : j.at("classes")) {
      icp::PromptEntry pe;
      pe.id = e.at("id").get<ClassId>();
      pe.name = e.at("name").get<std::string>();
      pe.session_added = e.at("session_added").get<std::size_t>();
      pe.class_prompt.context = tensor_from_json(e.at("context"));
      pe.class_prompt.class_embedding = tensor_from_json(e.at("class_embedding"));
      pe.context_prompt.tokens = tensor_from_json(e.at("context_prompt"));
      entries.push_back(std::move(pe));
    }
    std::optional<Tensor> shared;
    if (!j.at("shared_context").is_null()) shared = tensor_from_json(j.at("shared_context"));
    bank.restore(std::move(entries), std::move(shared));
    return bank;
  } catch (const json::exception& e) {
    throw DataError(std::string("bank: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& dir, const ExperimentState& state,
                     const metrics::SessionReport& report) {
  std::filesystem::create_directories(dir);
  write_file(dir / "bank.json", bank_to_json(state.bank).dump(1) + "\n");
  write_file(dir / "buffer.json", state.buffer.to_json().dump(1) + "\n");
  std::ostringstream rep;
  metrics::write_session_csv(rep, {report});
  write_file(dir / "report.csv", rep.str());
  std::ostringstream ap;
  metrics::write_class_ap_csv(ap, {report});
  write_file(dir / "class_ap.csv", ap.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, const Context& ctx,
                           std::size_t session) {
  json bank_json, buffer_json;
  try {
    bank_json = json::parse(read_file(dir / "bank.json"));
    buffer_json = json::parse(read_file(dir / "buffer.json"));
  } catch (const json::parse_error& e) {
    throw DataError("checkpoint '" + dir.string() + "': " + e.what());
  }
  Checkpoint cp{bank_from_json(bank_json), sccr::ReplayBuffer::from_json(buffer_json), {}};
  auto& rep = cp.report;
  rep.session = session;
  rep.seen_classes = ctx.schedule().seen_through(session);
  rep.n_test = ctx.dataset().indices(dataio::Split::kTest).size();
  const auto rows = read_csv(dir / "report.csv");
  if (rows.size() != 1 || rows[0].size() != 4) {
    throw DataError("checkpoint '" + dir.string() + "': malformed report.csv");
  }
  rep.map = parse_double(rows[0][1]);
  rep.cf1 = parse_double(rows[0][2]);
  rep.of1 = parse_double(rows[0][3]);
  for (const auto& row : read_csv(dir / "class_ap.csv")) {
    if (row.size() != 3) throw DataError("checkpoint: malformed class_ap.csv");
    rep.class_ap.push_back({static_cast<ClassId>(std::stoull(row[1])), parse_double(row[2])});
  }
  return cp;
}

}  // namespace mlcil::protocol
