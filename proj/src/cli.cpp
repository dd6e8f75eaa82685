#include "mlcil/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>
#include <type_traits>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "mlcil/errors.hpp"
#include "mlcil/format.hpp"
#include "mlcil/metrics.hpp"

namespace mlcil::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

namespace {

constexpr auto kMaxSeed = static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max());

std::string where(const toml::node& n) {
  const auto& src = n.source();
  if (src.begin.line == 0) return "";
  return " (line " + std::to_string(src.begin.line) + ")";
}

// Reads the keys of one table and remembers which were consumed.
class Fields {
 public:
  Fields(const toml::table& t, std::string prefix) : t_(t), prefix_(std::move(prefix)) {}

  const toml::node* take(std::string_view key) {
    used_.insert(std::string(key));
    return t_.get(key);
  }

  std::string path(std::string_view key) const { return prefix_ + std::string(key); }

  void finish() const {
    for (auto&& [k, v] : t_) {
      if (!used_.count(std::string(k.str()))) {
        throw UsageError("unknown config key '" + path(k.str()) + "'" + where(v));
      }
    }
  }

  template <class T>
    requires std::is_unsigned_v<T>
  void get(std::string_view key, T& out) {
    if (const auto* n = take(key)) {
      const auto v = n->value_exact<std::int64_t>();
      if (!v || *v < 0) throw bad(key, *n, "a non-negative integer");
      out = static_cast<T>(*v);
    }
  }

  void get(std::string_view key, double& out) {
    if (const auto* n = take(key)) {
      if (n->is_integer()) {
        out = static_cast<double>(*n->value<std::int64_t>());
      } else if (n->is_floating_point()) {
        out = *n->value<double>();
      } else {
        throw bad(key, *n, "a number");
      }
    }
  }

  void get(std::string_view key, bool& out) {
    if (const auto* n = take(key)) {
      if (!n->is_boolean()) throw bad(key, *n, "true or false");
      out = *n->value<bool>();
    }
  }

  void get(std::string_view key, std::string& out) {
    if (const auto* n = take(key)) {
      if (!n->is_string()) throw bad(key, *n, "a string");
      out = *n->value<std::string>();
    }
  }

  UsageError bad(std::string_view key, const toml::node& n, const char* expected) const {
    return UsageError("config key '" + path(key) + "' must be " + expected + where(n));
  }

 private:
  const toml::table& t_;
  std::string prefix_;
  std::set<std::string> used_;
};

const toml::table* subtable(Fields& top, std::string_view key) {
  const auto* n = top.take(key);
  if (!n) return nullptr;
  if (!n->is_table()) throw top.bad(key, *n, "a table");
  return n->as_table();
}

template <class F>
void with_table(Fields& top, std::string_view key, F&& body) {
  if (const auto* t = subtable(top, key)) {
    Fields f(*t, std::string(key) + ".");
    body(f);
    f.finish();
  }
}

std::vector<std::vector<std::string>> read_sessions(Fields& f, const toml::node& n) {
  const auto* outer = n.as_array();
  if (!outer) throw f.bad("sessions", n, "an array of arrays of class names");
  std::vector<std::vector<std::string>> lists;
  for (const auto& inner_node : *outer) {
    const auto* inner = inner_node.as_array();
    if (!inner) throw f.bad("sessions", n, "an array of arrays of class names");
    std::vector<std::string> names;
    for (const auto& v : *inner) {
      if (!v.is_string()) throw f.bad("sessions", n, "an array of arrays of class names");
      names.push_back(*v.value<std::string>());
    }
    lists.push_back(std::move(names));
  }
  return lists;
}

void apply_override(toml::table& root, const Override& o) {
  toml::table* t = &root;
  std::string_view rest = o.key;
  for (auto dot = rest.find('.'); dot != std::string_view::npos; dot = rest.find('.')) {
    const std::string part(rest.substr(0, dot));
    rest.remove_prefix(dot + 1);
    auto* next = t->get(part);
    if (!next) {
      t->insert(part, toml::table{});
      next = t->get(part);
    }
    if (!next->is_table()) throw UsageError("--set " + o.key + ": '" + part + "' is not a table");
    t = next->as_table();
  }
  if (rest.empty()) throw UsageError("--set " + o.key + ": empty key");
  const std::string leaf(rest);
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + o.value);
  } catch (const toml::parse_error&) {
    t->insert_or_assign(leaf, o.value);
    return;
  }
  parsed["v"].visit([&](auto&& node) { t->insert_or_assign(leaf, node); });
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (const char ch : s) {
    switch (ch) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(ch) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", static_cast<unsigned>(ch));
          out += buf;
        } else {
          out += ch;
        }
    }
  }
  return out + "\"";
}

std::string toml_double(double v) {
  std::string s = format_double(v);
  if (s.find_first_of(".eni") == std::string::npos) s += ".0";
  return s;
}

}  // namespace

protocol::ProtocolOptions ExperimentConfig::options() const {
  protocol::ProtocolOptions opt;
  opt.icp = prompt;
  opt.icp.use_context_prompt = icp_context_prompt;
  opt.loss = loss;
  opt.train = train;
  opt.train.seed = seed;
  opt.replay.budget = buffer;
  opt.replay.clusters = clusters;
  opt.replay.strategy = replay_strategy;
  opt.replay.seed = seed;
  opt.tpc = tpc;
  return opt;
}

encoders::EncoderConfig ExperimentConfig::encoder_config(const dataio::Dataset& data) const {
  encoders::EncoderConfig ec;
  ec.seed = encoder_seed.value_or(seed);
  ec.d_in = data.d_in();
  ec.n_regions = data.n_regions();
  ec.d_token = d_token;
  ec.d_feat = d_feat;
  return ec;
}

protocol::SessionSchedule ExperimentConfig::make_schedule(const dataio::Dataset& data) const {
  if (!schedule.sessions.empty()) {
    return protocol::schedule_from_lists(data.class_names(), schedule.sessions);
  }
  return protocol::make_schedule(data.class_names(), schedule.base, schedule.increment);
}

std::string ExperimentConfig::buffer_label() const {
  if (replay_strategy == sccr::Strategy::kNone) return "0";
  if (buffer.mode == sccr::BudgetMode::kPerClass) {
    return std::to_string(buffer.size) + "/class";
  }
  return std::to_string(buffer.size);
}

Override parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw UsageError("--set expects key=value, got '" + text + "'");
  }
  return {text.substr(0, eq), text.substr(eq + 1)};
}

ExperimentConfig parse_config(std::string_view text, const std::string& source,
                              const ExperimentConfig& defaults,
                              const std::vector<Override>& overrides) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << e.source().begin.line << ": " << e.description();
    throw UsageError(os.str());
  }
  for (const auto& o : overrides) apply_override(root, o);

  ExperimentConfig cfg = defaults;
  Fields top(root, "");
  top.get("name", cfg.name);
  top.get("dataset", cfg.dataset);
  top.get("seed", cfg.seed);

  with_table(top, "schedule", [&](Fields& f) {
    f.get("base", cfg.schedule.base);
    f.get("increment", cfg.schedule.increment);
    if (const auto* n = f.take("sessions")) {
      cfg.schedule.sessions = read_sessions(f, *n);
      if (cfg.schedule.sessions.empty()) throw f.bad("sessions", *n, "non-empty");
    }
  });
  with_table(top, "buffer", [&](Fields& f) {
    std::string mode = cfg.buffer.mode == sccr::BudgetMode::kPerClass ? "per_class" : "total";
    f.get("mode", mode);
    if (mode == "per_class") {
      cfg.buffer.mode = sccr::BudgetMode::kPerClass;
    } else if (mode == "total") {
      cfg.buffer.mode = sccr::BudgetMode::kTotal;
    } else {
      throw UsageError("config key 'buffer.mode' must be \"per_class\" or \"total\"");
    }
    f.get("size", cfg.buffer.size);
    f.get("clusters", cfg.clusters);
  });
  with_table(top, "loss", [&](Fields& f) {
    f.get("gamma_pos", cfg.loss.gamma_pos);
    f.get("gamma_neg", cfg.loss.gamma_neg);
    f.get("alpha", cfg.loss.alpha);
    f.get("neg_clip", cfg.loss.neg_clip);
  });
  with_table(top, "train", [&](Fields& f) {
    f.get("epochs", cfg.train.epochs);
    f.get("batch_size", cfg.train.batch_size);
    f.get("base_lr", cfg.train.base_lr);
    f.get("incremental_lr", cfg.train.incremental_lr);
    f.get("weight_decay", cfg.train.weight_decay);
    f.get("f1_threshold", cfg.train.f1_threshold);
  });
  with_table(top, "encoder", [&](Fields& f) {
    if (f.take("seed")) {
      std::uint64_t s = 0;
      f.get("seed", s);
      cfg.encoder_seed = s;
    }
    f.get("d_token", cfg.d_token);
    f.get("d_feat", cfg.d_feat);
  });
  with_table(top, "prompt", [&](Fields& f) {
    f.get("context_length", cfg.prompt.context_length);
    f.get("temperature", cfg.prompt.temperature);
    f.get("init_std", cfg.prompt.init_std);
    f.get("shared_context", cfg.prompt.shared_context);
  });
  with_table(top, "toggles", [&](Fields& f) {
    f.get("icp_context_prompt", cfg.icp_context_prompt);
    f.get("tpc", cfg.tpc);
    std::optional<bool> sccr_flag;
    if (f.take("sccr")) {
      bool b = true;
      f.get("sccr", b);
      sccr_flag = b;
    }
    if (const auto* n = f.take("replay_strategy")) {
      std::string s;
      f.get("replay_strategy", s);
      try {
        cfg.replay_strategy = sccr::parse_strategy(s);
      } catch (const DataError& e) {
        throw UsageError("config key 'toggles.replay_strategy': " + std::string(e.what()) +
                         where(*n));
      }
      if (sccr_flag && *sccr_flag != (cfg.replay_strategy == sccr::Strategy::kSccr)) {
        throw UsageError("config keys 'toggles.sccr' and 'toggles.replay_strategy' disagree");
      }
    } else if (sccr_flag) {
      cfg.replay_strategy = *sccr_flag ? sccr::Strategy::kSccr : sccr::Strategy::kNone;
    }
  });
  with_table(top, "ablation", [&](Fields& f) {
    if (const auto* n = f.take("seeds")) {
      const auto* arr = n->as_array();
      if (!arr || arr->empty()) throw f.bad("seeds", *n, "a non-empty array of integers");
      cfg.ablation_seeds.clear();
      for (const auto& v : *arr) {
        const auto s = v.value_exact<std::int64_t>();
        if (!s || *s < 0) throw f.bad("seeds", *n, "a non-empty array of non-negative integers");
        cfg.ablation_seeds.push_back(static_cast<std::uint64_t>(*s));
      }
    }
  });
  top.finish();

  if (cfg.name.empty() || cfg.name.find_first_of("/\\") != std::string::npos ||
      cfg.name == "." || cfg.name == "..") {
    throw UsageError("config key 'name' must be a plain directory name");
  }
  if (cfg.seed > kMaxSeed) throw UsageError("seed out of range");
  try {
    cfg.loss.validate();
    cfg.train.validate();
    cfg.prompt.validate();
  } catch (const ContractError& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  if (cfg.d_token < 1 || cfg.d_feat < 2) {
    throw UsageError("invalid config: encoder.d_token must be >= 1 and encoder.d_feat >= 2");
  }
  if (cfg.clusters < 1) throw UsageError("invalid config: buffer.clusters must be >= 1");
  return cfg;
}

ExperimentConfig load_config(const fs::path& path, const ExperimentConfig& defaults,
                             const std::vector<Override>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  ExperimentConfig base = defaults;
  base.name = path.stem().string();
  return parse_config(os.str(), path.string(), base, overrides);
}

std::string to_toml(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "name = " << quote(cfg.name) << "\n"
     << "dataset = " << quote(cfg.dataset) << "\n"
     << "seed = " << cfg.seed << "\n\n[schedule]\n";
  if (cfg.schedule.sessions.empty()) {
    os << "base = " << cfg.schedule.base << "\nincrement = " << cfg.schedule.increment << "\n";
  } else {
    os << "sessions = [";
    for (std::size_t i = 0; i < cfg.schedule.sessions.size(); ++i) {
      os << (i ? ", [" : "[");
      for (std::size_t j = 0; j < cfg.schedule.sessions[i].size(); ++j) {
        os << (j ? ", " : "") << quote(cfg.schedule.sessions[i][j]);
      }
      os << "]";
    }
    os << "]\n";
  }
  os << "\n[buffer]\nmode = "
     << (cfg.buffer.mode == sccr::BudgetMode::kPerClass ? "\"per_class\"" : "\"total\"")
     << "\nsize = " << cfg.buffer.size << "\nclusters = " << cfg.clusters << "\n"
     << "\n[loss]\ngamma_pos = " << toml_double(cfg.loss.gamma_pos)
     << "\ngamma_neg = " << toml_double(cfg.loss.gamma_neg)
     << "\nalpha = " << toml_double(cfg.loss.alpha)
     << "\nneg_clip = " << toml_double(cfg.loss.neg_clip) << "\n"
     << "\n[train]\nepochs = " << cfg.train.epochs
     << "\nbatch_size = " << cfg.train.batch_size
     << "\nbase_lr = " << toml_double(cfg.train.base_lr)
     << "\nincremental_lr = " << toml_double(cfg.train.incremental_lr)
     << "\nweight_decay = " << toml_double(cfg.train.weight_decay)
     << "\nf1_threshold = " << toml_double(cfg.train.f1_threshold) << "\n"
     << "\n[encoder]\n";
  if (cfg.encoder_seed) os << "seed = " << *cfg.encoder_seed << "\n";
  os << "d_token = " << cfg.d_token << "\nd_feat = " << cfg.d_feat << "\n"
     << "\n[prompt]\ncontext_length = " << cfg.prompt.context_length
     << "\ntemperature = " << toml_double(cfg.prompt.temperature)
     << "\ninit_std = " << toml_double(cfg.prompt.init_std)
     << "\nshared_context = " << (cfg.prompt.shared_context ? "true" : "false") << "\n"
     << "\n[toggles]\nicp_context_prompt = " << (cfg.icp_context_prompt ? "true" : "false")
     << "\ntpc = " << (cfg.tpc ? "true" : "false")
     << "\nreplay_strategy = " << quote(sccr::strategy_name(cfg.replay_strategy)) << "\n"
     << "\n[ablation]\nseeds = [";
  for (std::size_t i = 0; i < cfg.ablation_seeds.size(); ++i) {
    os << (i ? ", " : "") << cfg.ablation_seeds[i];
  }
  os << "]\n";
  return os.str();
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::string format_with_delta(double value, double baseline) {
  char buf[64];
  double delta = 100.0 * (value - baseline);
  if (std::abs(delta) < 0.05) delta = 0.0;  // no "-0.0"
  std::snprintf(buf, sizeof buf, "%.1f(%+.1f)", 100.0 * value, delta);
  return buf;
}

// ---------------------------------------------------------------- commands

namespace {

struct Globals {
  fs::path workdir = ".";
  std::uint64_t default_seed = 0;

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : workdir / p; }
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw DataError("write failed for '" + p.string() + "'");
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::uint64_t seed_from_env() {
  const char* env = std::getenv("MLCIL_SEED");
  if (!env || !*env) return 0;
  std::uint64_t v = 0;
  const std::string s(env);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || v > kMaxSeed) {
    throw UsageError("MLCIL_SEED must be a non-negative integer, got '" + s + "'");
  }
  return v;
}

std::string session_dir_name(std::size_t s) { return "session_" + std::to_string(s); }

bool has_checkpoint(const fs::path& dir) {
  for (const char* f : {"bank.json", "buffer.json", "report.csv", "class_ap.csv"}) {
    if (!fs::exists(dir / f)) return false;
  }
  return true;
}

std::size_t completed_sessions(const fs::path& run_dir, std::size_t total) {
  std::size_t k = 0;
  while (k < total && has_checkpoint(run_dir / session_dir_name(k))) ++k;
  return k;
}

json report_to_json(const metrics::RunReport& rr) {
  json sessions = json::array();
  for (const auto& s : rr.sessions) {
    json ap = json::array();
    for (const auto& c : s.class_ap) ap.push_back({{"class", c.class_id}, {"ap", c.ap}});
    sessions.push_back({{"session", s.session},
                        {"seen_classes", s.seen_classes},
                        {"n_test", s.n_test},
                        {"mAP", s.map},
                        {"CF1", s.cf1},
                        {"OF1", s.of1},
                        {"class_ap", ap}});
  }
  json j{{"sessions", sessions}};
  if (!rr.sessions.empty()) {
    j["average_accuracy"] = rr.average_accuracy();
    j["last_accuracy"] = rr.last_accuracy();
  }
  return j;
}

struct Manifest {
  std::string status;
  std::size_t completed = 0;
  std::size_t total = 0;
  std::string error;
};

void write_manifest(const fs::path& dir, const Manifest& m) {
  std::ostringstream os;
  os << "status = " << quote(m.status) << "\n"
     << "sessions_completed = " << m.completed << "\n"
     << "sessions_total = " << m.total << "\n";
  if (!m.error.empty()) os << "error = " << quote(m.error) << "\n";
  write_text(dir / "MANIFEST", os.str());
}

void write_run_reports(const fs::path& dir, const ExperimentConfig& cfg,
                       const metrics::RunReport& rr) {
  std::ostringstream sessions, class_ap, summary;
  metrics::write_session_csv(sessions, rr.sessions);
  metrics::write_class_ap_csv(class_ap, rr.sessions);
  metrics::write_markdown_table(summary, {{cfg.name, cfg.buffer_label(), rr}});
  write_text(dir / "sessions.csv", sessions.str());
  write_text(dir / "class_ap.csv", class_ap.str());
  write_text(dir / "summary.md", summary.str());
  write_text(dir / "run_report.json", report_to_json(rr).dump(1) + "\n");
}

// Config stored with a run, re-read by dump-attention and report.
ExperimentConfig run_config(const fs::path& run_dir) {
  const fs::path p = run_dir / "config.toml";
  if (!fs::exists(p)) throw DataError("'" + run_dir.string() + "' is not a run directory");
  return parse_config(read_text(p), p.string());
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
  std::istringstream is(read_text(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

double to_double(const std::string& s, const fs::path& file) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError("'" + file.string() + "': bad number '" + s + "'");
  }
  return v;
}

// ---- generate

struct GenerateArgs {
  dataio::GeneratorConfig gen;
  std::string out = "dataset.jsonl";
};

int cmd_generate(const Globals& g, const GenerateArgs& a, bool seed_given,
                 std::ostream& out) {
  dataio::GeneratorConfig gen = a.gen;
  if (!seed_given) gen.seed = g.default_seed;
  try {
    gen.validate();
  } catch (const DataError& e) {
    throw UsageError(std::string("invalid generator settings: ") + e.what());
  }
  const auto data = dataio::generate(gen);
  const fs::path path = g.resolve(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  dataio::save(data.dataset, path);
  out << "wrote " << data.dataset.samples().size() << " samples (" << gen.n_classes
      << " classes) to " << path.string() << "\n";
  return kOk;
}

// ---- run

struct RunArgs {
  std::string config;
  std::string out = "run";
  bool resume = false;
  std::optional<std::size_t> stop_after;
  std::vector<Override> overrides;
};

int cmd_run(const Globals& g, const RunArgs& a, std::ostream& out, std::ostream& err) {
  ExperimentConfig defaults;
  defaults.seed = g.default_seed;
  const ExperimentConfig cfg = load_config(g.resolve(a.config), defaults, a.overrides);
  if (cfg.dataset.empty()) throw UsageError("config has no 'dataset'");

  std::ostringstream warnings;
  const dataio::Dataset data = dataio::load(g.resolve(cfg.dataset), &warnings);
  err << warnings.str();
  const encoders::Encoders enc(cfg.encoder_config(data));
  const protocol::Context ctx(data, cfg.make_schedule(data), enc, cfg.options());
  const std::size_t total = ctx.schedule().size();

  const fs::path dir = g.resolve(a.out) / cfg.name;
  const std::string cfg_text = to_toml(cfg);
  protocol::ExperimentState state = protocol::initial_state(ctx);

  if (a.resume && fs::exists(dir / "config.toml")) {
    if (read_text(dir / "config.toml") != cfg_text) {
      throw UsageError("--resume: configuration differs from the one stored in " +
                       dir.string());
    }
    const std::size_t done = completed_sessions(dir, total);
    for (std::size_t s = 0; s < done; ++s) {
      auto cp = protocol::load_checkpoint(dir / session_dir_name(s), ctx, s);
      state.reports.push_back(std::move(cp.report));
      if (s + 1 == done) {
        state.bank = std::move(cp.bank);
        state.buffer = std::move(cp.buffer);
        state.previous = protocol::ModelSnapshot::capture(state.bank, enc);
      }
    }
    state.next_session = done;
    out << "resuming " << cfg.name << " after " << done << " of " << total << " sessions\n";
  } else {
    if (fs::exists(dir)) {
      if (!fs::exists(dir / "MANIFEST")) {
        throw UsageError("refusing to overwrite '" + dir.string() +
                         "': not a run directory");
      }
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
  write_text(dir / "config.toml", cfg_text);

  Manifest manifest{"incomplete", state.next_session, total, ""};
  write_manifest(dir, manifest);
  try {
    for (std::size_t s = state.next_session; s < total; ++s) {
      if (a.stop_after && s > *a.stop_after) break;
      auto [next, report] = protocol::run_session(ctx, std::move(state), s);
      state = std::move(next);
      protocol::save_checkpoint(dir / session_dir_name(s), state, report);
      manifest.completed = s + 1;
      write_manifest(dir, manifest);
      char line[160];
      std::snprintf(line, sizeof line, "session %zu/%zu (%zu classes): mAP %.4f CF1 %.4f OF1 %.4f\n",
                    s + 1, total, report.seen_classes.size(), report.map, report.cf1,
                    report.of1);
      out << line;
    }
  } catch (const std::exception& e) {
    manifest.error = e.what();
    write_manifest(dir, manifest);
    throw;
  }

  const metrics::RunReport rr{state.reports};
  if (manifest.completed < total) {
    std::ostringstream sessions;
    metrics::write_session_csv(sessions, rr.sessions);
    write_text(dir / "sessions.csv", sessions.str());
    out << "stopped after " << manifest.completed << " of " << total
        << " sessions; continue with --resume\n";
    return kOk;
  }
  write_run_reports(dir, cfg, rr);
  manifest.status = "complete";
  write_manifest(dir, manifest);
  std::ostringstream table;
  metrics::write_markdown_table(table, {{cfg.name, cfg.buffer_label(), rr}});
  out << table.str();
  return kOk;
}

// ---- ablate

struct AblateArgs {
  std::string config;
  std::string out = "run";
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
  std::vector<Override> overrides;
};

struct Variant {
  const char* name;
  bool context_prompt;
  sccr::Strategy strategy;
  bool tpc;
};

constexpr Variant kVariants[] = {
    {"Baseline", false, sccr::Strategy::kNone, false},
    {"+ICP", true, sccr::Strategy::kNone, false},
    {"+SCCR", false, sccr::Strategy::kSccr, false},
    {"+ICP+SCCR", true, sccr::Strategy::kSccr, false},
    {"+ICP+SCCR+TPC", true, sccr::Strategy::kSccr, true},
};

int cmd_ablate(const Globals& g, const AblateArgs& a, std::ostream& out, std::ostream& err) {
  ExperimentConfig defaults;
  defaults.seed = g.default_seed;
  const ExperimentConfig cfg = load_config(g.resolve(a.config), defaults, a.overrides);
  if (cfg.dataset.empty()) throw UsageError("config has no 'dataset'");
  const auto seeds = a.seeds.empty() ? cfg.ablation_seeds : a.seeds;
  if (a.jobs < 1) throw UsageError("--jobs must be >= 1");

  std::ostringstream warnings;
  const dataio::Dataset data = dataio::load(g.resolve(cfg.dataset), &warnings);
  err << warnings.str();
  if (seeds.size() == 1) {
    err << "warning: single seed; medians carry no run-to-run variance\n";
  }

  constexpr std::size_t nv = std::size(kVariants);
  const std::size_t n_tasks = nv * seeds.size();
  std::vector<metrics::RunReport> results(n_tasks);
  std::vector<std::exception_ptr> errors(n_tasks);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t t = next++; t < n_tasks; t = next++) {
      try {
        const Variant& v = kVariants[t % nv];
        ExperimentConfig c = cfg;
        c.seed = seeds[t / nv];
        c.icp_context_prompt = v.context_prompt;
        c.replay_strategy = v.strategy;
        c.tpc = v.tpc;
        const encoders::Encoders enc(c.encoder_config(data));
        const protocol::Context ctx(data, c.make_schedule(data), enc, c.options());
        results[t] = protocol::run_all(ctx);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < std::min(a.jobs, n_tasks); ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::ostringstream csv, table;
  csv << "method,seed,avg_acc,last_acc\n";
  std::vector<double> avg(nv), last(nv);
  for (std::size_t v = 0; v < nv; ++v) {
    std::vector<double> a_vals, l_vals;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& rr = results[s * nv + v];
      a_vals.push_back(rr.average_accuracy());
      l_vals.push_back(rr.last_accuracy());
      csv << kVariants[v].name << "," << seeds[s] << "," << format_double(a_vals.back())
          << "," << format_double(l_vals.back()) << "\n";
    }
    avg[v] = median(a_vals);
    last[v] = median(l_vals);
  }
  table << "| Method | Avg.Acc | Last Acc |\n|---|---|---|\n";
  for (std::size_t v = 0; v < nv; ++v) {
    table << "| " << kVariants[v].name << " | " << format_with_delta(avg[v], avg[0]) << " | "
          << format_with_delta(last[v], last[0]) << " |\n";
  }

  const fs::path dir = g.resolve(a.out) / cfg.name;
  fs::create_directories(dir);
  write_text(dir / "ablation.md", table.str());
  write_text(dir / "ablation.csv", csv.str());
  out << table.str();
  return kOk;
}

// ---- dump-attention

struct DumpArgs {
  std::string run_dir;
  std::vector<std::string> ids;
  std::optional<std::size_t> session;
  std::string out;
};

int cmd_dump_attention(const Globals& g, const DumpArgs& a, std::ostream& out,
                       std::ostream& err) {
  const fs::path dir = g.resolve(a.run_dir);
  const ExperimentConfig cfg = run_config(dir);
  std::ostringstream warnings;
  const dataio::Dataset data = dataio::load(g.resolve(cfg.dataset), &warnings);
  err << warnings.str();
  const encoders::Encoders enc(cfg.encoder_config(data));

  std::size_t session = 0;
  if (a.session) {
    session = *a.session;
  } else {
    const auto done = completed_sessions(dir, cfg.make_schedule(data).size());
    if (done == 0) throw DataError("'" + dir.string() + "' holds no completed session");
    session = done - 1;
  }
  const fs::path bank_path = dir / session_dir_name(session) / "bank.json";
  if (!fs::exists(bank_path)) throw DataError("no checkpoint at '" + bank_path.string() + "'");
  json bank_json;
  try {
    bank_json = json::parse(read_text(bank_path));
  } catch (const json::parse_error& e) {
    throw DataError("'" + bank_path.string() + "': " + e.what());
  }
  const icp::PromptBank bank = protocol::bank_from_json(bank_json);
  const icp::Scorer scorer(bank, enc);

  std::ostringstream csv;
  csv << "image_id,class_id,region_index,weight\n";
  for (const auto& id : a.ids) {
    const auto& sample = data.sample(id);  // DataError on unknown id
    const auto sc = scorer.score_projected(enc.image_to_text(sample.regions));
    icp::write_attention_rows(csv, id, sc.attention);
  }
  if (a.out.empty()) {
    out << csv.str();
  } else {
    write_text(g.resolve(a.out), csv.str());
  }
  return kOk;
}

// ---- report

struct ReportArgs {
  std::vector<std::string> run_dirs;
  std::string out;
};

int cmd_report(const Globals& g, const ReportArgs& a, std::ostream& out) {
  std::vector<metrics::TableRow> rows;
  for (const auto& r : a.run_dirs) {
    const fs::path dir = g.resolve(r);
    const ExperimentConfig cfg = run_config(dir);
    const fs::path csv = dir / "sessions.csv";
    if (!fs::exists(csv)) throw DataError("no sessions.csv in '" + dir.string() + "'");
    metrics::RunReport rr;
    for (const auto& row : read_csv_rows(csv)) {
      if (row.size() != 4) throw DataError("'" + csv.string() + "': expected 4 columns");
      metrics::SessionReport s;
      s.session = static_cast<std::size_t>(to_double(row[0], csv));
      s.map = to_double(row[1], csv);
      s.cf1 = to_double(row[2], csv);
      s.of1 = to_double(row[3], csv);
      rr.sessions.push_back(std::move(s));
    }
    rows.push_back({cfg.name, cfg.buffer_label(), std::move(rr)});
  }
  std::ostringstream table;
  metrics::write_markdown_table(table, rows);
  if (a.out.empty()) {
    out << table.str();
  } else {
    write_text(g.resolve(a.out), table.str());
  }
  return kOk;
}

std::vector<Override> overrides_from(const std::vector<std::string>& sets) {
  std::vector<Override> out;
  for (const auto& s : sets) out.push_back(parse_override(s));
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-label class-incremental learning with prompt tuning and replay", "mlcil"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string workdir = ".";
  app.add_option("--workdir", workdir, "Directory all relative paths are resolved against");

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic region-feature dataset");
  generate->add_option("--classes", gen.gen.n_classes, "Number of classes")->required();
  generate->add_option("--train", gen.gen.n_train, "Training images")->required();
  generate->add_option("--test", gen.gen.n_test, "Test images")->required();
  auto* gen_seed = generate->add_option("--seed", gen.gen.seed, "Seed (default: $MLCIL_SEED or 0)");
  generate->add_option("--regions", gen.gen.n_regions, "Regions per image")->capture_default_str();
  generate->add_option("--dim", gen.gen.d_in, "Region descriptor width")->capture_default_str();
  generate->add_option("--max-labels", gen.gen.max_labels_per_image, "Labels per image at most")
      ->capture_default_str();
  generate->add_option("--noise", gen.gen.noise_sigma, "Gaussian noise sigma")
      ->capture_default_str();
  generate->add_option("--out,-o", gen.out, "Output file; .gz compresses")->capture_default_str();

  RunArgs run_args;
  std::vector<std::string> run_sets;
  std::uint64_t run_seed = 0;
  std::string run_dataset;
  std::size_t stop_after = 0;
  auto* runc = app.add_subcommand("run", "Run every session of an experiment");
  runc->add_option("--config,-c", run_args.config, "Experiment TOML file")->required();
  runc->add_option("--out", run_args.out, "Directory holding run directories")
      ->capture_default_str();
  runc->add_flag("--resume", run_args.resume, "Continue from the last session checkpoint");
  auto* stop_opt = runc->add_option("--stop-after", stop_after, "Stop after this session index");
  auto* run_seed_opt = runc->add_option("--seed", run_seed, "Override the config seed");
  auto* run_dataset_opt = runc->add_option("--dataset", run_dataset, "Override the dataset path");
  runc->add_option("--set", run_sets, "Override a config value, e.g. train.epochs=5");

  AblateArgs ab;
  std::vector<std::string> ab_sets;
  auto* ablate = app.add_subcommand("ablate", "Component ablation over several seeds");
  ablate->add_option("--config,-c", ab.config, "Experiment TOML file")->required();
  ablate->add_option("--out", ab.out, "Directory for the ablation table")->capture_default_str();
  ablate->add_option("--seeds", ab.seeds, "Seeds (default: ablation.seeds)")->delimiter(',');
  ablate->add_option("--jobs,-j", ab.jobs, "Worker threads")->capture_default_str();
  ablate->add_option("--set", ab_sets, "Override a config value");

  DumpArgs dump;
  std::size_t dump_session = 0;
  auto* dumpc = app.add_subcommand("dump-attention", "Per-class region attention of images");
  dumpc->add_option("run_dir", dump.run_dir, "Run directory")->required();
  dumpc->add_option("ids", dump.ids, "Image ids")->required();
  auto* dump_session_opt =
      dumpc->add_option("--session", dump_session, "Checkpoint to use (default: last)");
  dumpc->add_option("--out,-o", dump.out, "Write CSV here instead of stdout");

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Markdown summary table of finished runs");
  report->add_option("run_dirs", rep.run_dirs, "Run directories")->required();
  report->add_option("--out,-o", rep.out, "Write the table here instead of stdout");

  std::vector<const char*> argv{"mlcil"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    Globals g;
    g.workdir = workdir;
    g.default_seed = seed_from_env();
    if (*generate) return cmd_generate(g, gen, gen_seed->count() > 0, out);
    if (*runc) {
      run_args.overrides = overrides_from(run_sets);
      if (run_seed_opt->count()) run_args.overrides.push_back({"seed", std::to_string(run_seed)});
      if (run_dataset_opt->count()) {
        run_args.overrides.push_back({"dataset", quote(run_dataset)});
      }
      if (stop_opt->count()) run_args.stop_after = stop_after;
      return cmd_run(g, run_args, out, err);
    }
    if (*ablate) {
      ab.overrides = overrides_from(ab_sets);
      return cmd_ablate(g, ab, out, err);
    }
    if (*dumpc) {
      if (dump_session_opt->count()) dump.session = dump_session;
      return cmd_dump_attention(g, dump, out, err);
    }
    if (*report) return cmd_report(g, rep, out);
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DegenerateVectorError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DimensionError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

}  // namespace mlcil::cli
