#include "klflow/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <sstream>

#include "klflow/error.hpp"

namespace klflow {

namespace {

// ---------------------------------------------------------------------------
// TOML reader

[[noreturn]] void fail(std::size_t line, const std::string& msg) {
  throw ParseError("config line " + std::to_string(line) + ": " + msg);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// Drop a trailing comment that is not inside a string.
std::string_view strip_comment(std::string_view s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && in_str) {
      ++i;
    } else if (s[i] == '"') {
      in_str = !in_str;
    } else if (s[i] == '#' && !in_str) {
      return s.substr(0, i);
    }
  }
  return s;
}

bool bare_key(std::string_view k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

class ValueReader {
 public:
  ValueReader(std::string_view s, std::size_t line) : s_(s), line_(line) {}

  TomlValue read() {
    TomlValue v;
    v.line = line_;
    skip_ws();
    if (peek() == '[') {
      ++pos_;
      std::vector<TomlValue::Scalar> items;
      skip_ws();
      if (peek() == ']') {
        ++pos_;
      } else {
        for (;;) {
          items.push_back(scalar());
          skip_ws();
          if (peek() == ',') {
            ++pos_;
            skip_ws();
            if (peek() == ']') {
              ++pos_;
              break;
            }
            continue;
          }
          if (peek() == ']') {
            ++pos_;
            break;
          }
          fail(line_, "expected ',' or ']' in array");
        }
      }
      v.v = std::move(items);
    } else {
      v.v = scalar();
    }
    skip_ws();
    if (pos_ != s_.size()) fail(line_, "unexpected text after value: '" + std::string(s_.substr(pos_)) + "'");
    return v;
  }

 private:
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  TomlValue::Scalar scalar() {
    skip_ws();
    if (peek() == '"') return string();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != ' ' && s_[pos_] != '\t') ++pos_;
    const std::string tok(s_.substr(start, pos_ - start));
    if (tok.empty()) fail(line_, "missing value");
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string clean;
    for (char c : tok) {
      if (c != '_') clean.push_back(c);
    }
    const bool is_float = clean.find_first_of(".eEn") != std::string::npos;
    try {
      std::size_t used = 0;
      if (is_float) {
        const double d = std::stod(clean, &used);
        if (used == clean.size()) return d;
      } else {
        const long long i = std::stoll(clean, &used);
        if (used == clean.size()) return static_cast<std::int64_t>(i);
      }
    } catch (const std::exception&) {
    }
    fail(line_, "cannot parse value '" + tok + "'");
  }

  std::string string() {
    ++pos_;  // opening quote
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) break;
        const char e = s_[pos_++];
        switch (e) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          default: fail(line_, std::string("unsupported escape '\\") + e + "'");
        }
      } else {
        out.push_back(c);
      }
    }
    if (pos_ >= s_.size()) fail(line_, "unterminated string");
    ++pos_;
    return out;
  }

  std::string_view s_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out.push_back(c);
    }
  }
  return out + "\"";
}

std::string format_double(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  std::string s(buf);
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}

// ---------------------------------------------------------------------------
// Typed access

std::string where(const std::string& table, const std::string& key) {
  return table.empty() ? key : table + "." + key;
}

const TomlValue::Scalar& as_scalar(const TomlValue& v, const std::string& field) {
  if (const auto* s = std::get_if<TomlValue::Scalar>(&v.v)) return *s;
  fail(v.line, "field '" + field + "' expects a single value, not an array");
}

const std::vector<TomlValue::Scalar>& as_array(const TomlValue& v, const std::string& field) {
  if (const auto* a = std::get_if<std::vector<TomlValue::Scalar>>(&v.v)) return *a;
  fail(v.line, "field '" + field + "' expects an array");
}

double to_double(const TomlValue::Scalar& s, std::size_t line, const std::string& field) {
  if (const auto* d = std::get_if<double>(&s)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&s)) return static_cast<double>(*i);
  fail(line, "field '" + field + "' expects a number");
}

std::int64_t to_int(const TomlValue::Scalar& s, std::size_t line, const std::string& field) {
  if (const auto* i = std::get_if<std::int64_t>(&s)) return *i;
  fail(line, "field '" + field + "' expects an integer");
}

std::uint64_t to_unsigned(const TomlValue::Scalar& s, std::size_t line, const std::string& field) {
  const std::int64_t i = to_int(s, line, field);
  if (i < 0) fail(line, "field '" + field + "' must be nonnegative");
  return static_cast<std::uint64_t>(i);
}

std::string to_str(const TomlValue::Scalar& s, std::size_t line, const std::string& field) {
  if (const auto* str = std::get_if<std::string>(&s)) return *str;
  fail(line, "field '" + field + "' expects a string");
}

bool to_bool(const TomlValue::Scalar& s, std::size_t line, const std::string& field) {
  if (const auto* b = std::get_if<bool>(&s)) return *b;
  fail(line, "field '" + field + "' expects true or false");
}

struct Field {
  std::string table;
  std::string key;
  std::function<void(ExperimentConfig&, const TomlValue&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
using Accessor = T& (*)(ExperimentConfig&);

template <class T>
T& read_only(const ExperimentConfig& c, Accessor<T> acc) {
  return acc(const_cast<ExperimentConfig&>(c));
}

Field size_field(std::string t, std::string k, Accessor<std::size_t> acc) {
  return {t, k,
          [acc](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            acc(c) = static_cast<std::size_t>(to_unsigned(as_scalar(v, f), v.line, f));
          },
          [acc](const ExperimentConfig& c) { return std::to_string(read_only(c, acc)); }};
}

Field int_field(std::string t, std::string k, Accessor<int> acc) {
  return {t, k,
          [acc](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            const auto i = to_int(as_scalar(v, f), v.line, f);
            if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max()) {
              fail(v.line, "field '" + f + "' out of range");
            }
            acc(c) = static_cast<int>(i);
          },
          [acc](const ExperimentConfig& c) { return std::to_string(read_only(c, acc)); }};
}

Field double_field(std::string t, std::string k, Accessor<double> acc) {
  return {t, k,
          [acc](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            acc(c) = to_double(as_scalar(v, f), v.line, f);
          },
          [acc](const ExperimentConfig& c) { return format_double(read_only(c, acc)); }};
}

Field bool_field(std::string t, std::string k, Accessor<bool> acc) {
  return {t, k,
          [acc](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            acc(c) = to_bool(as_scalar(v, f), v.line, f);
          },
          [acc](const ExperimentConfig& c) { return std::string(read_only(c, acc) ? "true" : "false"); }};
}

Field string_field(std::string t, std::string k, Accessor<std::string> acc) {
  return {t, k,
          [acc](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            acc(c) = to_str(as_scalar(v, f), v.line, f);
          },
          [acc](const ExperimentConfig& c) { return quote(read_only(c, acc)); }};
}

template <class E>
Field enum_field(std::string t, std::string k, Accessor<E> acc, E (*parse)(std::string_view)) {
  return {t, k,
          [acc, parse](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            const std::string s = to_str(as_scalar(v, f), v.line, f);
            try {
              acc(c) = parse(s);
            } catch (const std::exception& e) {
              fail(v.line, "field '" + f + "': " + e.what());
            }
          },
          [acc](const ExperimentConfig& c) { return quote(to_string(read_only(c, acc))); }};
}

Field double_list(std::string t, std::string k, Accessor<std::vector<double>> acc) {
  return {t, k,
          [acc](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            std::vector<double> out;
            for (const auto& s : as_array(v, f)) out.push_back(to_double(s, v.line, f));
            acc(c) = std::move(out);
          },
          [acc](const ExperimentConfig& c) {
            std::string s = "[";
            const auto& xs = read_only(c, acc);
            for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + format_double(xs[i]);
            return s + "]";
          }};
}

Field u64_list(std::string t, std::string k, Accessor<std::vector<std::uint64_t>> acc) {
  return {t, k,
          [acc](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            std::vector<std::uint64_t> out;
            for (const auto& s : as_array(v, f)) out.push_back(to_unsigned(s, v.line, f));
            acc(c) = std::move(out);
          },
          [acc](const ExperimentConfig& c) {
            std::string s = "[";
            const auto& xs = read_only(c, acc);
            for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + std::to_string(xs[i]);
            return s + "]";
          }};
}

Field string_list(std::string t, std::string k, Accessor<std::vector<std::string>> acc) {
  return {t, k,
          [acc](ExperimentConfig& c, const TomlValue& v, const std::string& f) {
            std::vector<std::string> out;
            for (const auto& s : as_array(v, f)) out.push_back(to_str(s, v.line, f));
            acc(c) = std::move(out);
          },
          [acc](const ExperimentConfig& c) {
            std::string s = "[";
            const auto& xs = read_only(c, acc);
            for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + quote(xs[i]);
            return s + "]";
          }};
}

#define KF(expr) +[](ExperimentConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(u64_list("", "seeds", KF(seeds)));
    f.push_back(string_field("", "output", KF(output)));
    f.push_back(string_list("", "methods", KF(methods)));
    f.push_back(size_field("", "threads", KF(threads)));

    f.push_back(size_field("data", "n", KF(data.n)));
    f.push_back(size_field("data", "dim", KF(data.dim)));
    f.push_back(double_field("data", "separation", KF(data.separation)));

    const std::string s = "solver";
    f.push_back(double_field(s, "tau", KF(solver.tau)));
    f.push_back(double_field(s, "beta2", KF(solver.beta2)));
    f.push_back(enum_field(s, "tau_schedule", KF(solver.tau_schedule), parse_tau_schedule));
    f.push_back(double_field(s, "lambda", KF(solver.lambda)));
    f.push_back(double_field(s, "gamma", KF(solver.gamma)));
    f.push_back(double_field(s, "beta1", KF(solver.beta1)));
    f.push_back(enum_field(s, "lr_schedule", KF(solver.lr_schedule), parse_lr_schedule));
    f.push_back(size_field(s, "outer_iters", KF(solver.outer_iters)));
    f.push_back(size_field(s, "max_inner", KF(solver.max_inner)));
    f.push_back(size_field(s, "particles", KF(solver.particles)));
    f.push_back(double_field(s, "grad_tol", KF(solver.grad_tol)));
    f.push_back(size_field(s, "patience", KF(solver.patience)));
    f.push_back(enum_field(s, "patience_metric", KF(solver.patience_metric), parse_patience_metric));
    f.push_back(enum_field(s, "zeta_schedule", KF(solver.zeta_schedule), parse_zeta_schedule));
    f.push_back(double_field(s, "zeta0", KF(solver.zeta0)));
    f.push_back(size_field(s, "fv_check_every", KF(solver.fv_check_every)));
    f.push_back(bool_field(s, "early_stop", KF(solver.early_stop)));
    f.push_back(double_field(s, "outer_zeta", KF(solver.outer_zeta)));
    f.push_back(size_field(s, "burn_in", KF(solver.burn_in)));
    f.push_back(size_field(s, "blocks", KF(solver.blocks)));
    f.push_back(size_field(s, "width", KF(solver.width)));
    f.push_back(size_field(s, "hidden_layers", KF(solver.hidden_layers)));
    f.push_back(double_field(s, "base_variance", KF(solver.base_variance)));
    f.push_back(enum_field(s, "resample", KF(solver.resample), parse_base_resample));
    f.push_back(size_field(s, "eval_particles", KF(solver.eval_particles)));
    f.push_back(bool_field(s, "strict", KF(solver.strict)));

    f.push_back(size_field("stochastic", "batch", KF(stochastic.batch)));
    f.push_back(double_field("stochastic", "beta2", KF(stochastic.beta2)));
    f.push_back(double_field("stochastic", "gamma", KF(stochastic.gamma)));
    f.push_back(enum_field("stochastic", "lr_schedule", KF(stochastic.lr_schedule), parse_lr_schedule));

    const std::string cp = "compose";
    f.push_back(size_field(cp, "short_blocks", KF(compose.short_blocks)));
    f.push_back(size_field(cp, "max_blocks", KF(compose.max_blocks)));
    f.push_back(size_field(cp, "student_blocks", KF(compose.student_blocks)));
    f.push_back(size_field(cp, "distill_iters", KF(compose.distill_iters)));
    f.push_back(double_field(cp, "distill_lr", KF(compose.distill_lr)));
    f.push_back(double_field(cp, "distill_tol", KF(compose.distill_tol)));
    f.push_back(size_field(cp, "short_width", KF(compose.short_width)));
    f.push_back(size_field(cp, "student_width", KF(compose.student_width)));

    f.push_back(size_field("kw", "grid", KF(kw.grid)));
    f.push_back(double_field("kw", "tau", KF(kw.tau)));
    f.push_back(size_field("kw", "steps", KF(kw.steps)));

    f.push_back(size_field("reference", "em_iters", KF(reference.em_iters)));

    f.push_back(int_field("bayes", "alpha", KF(bayes.alpha)));
    f.push_back(double_field("bayes", "langevin_dt", KF(bayes.langevin_dt)));
    f.push_back(size_field("bayes", "w1_cap", KF(bayes.w1_cap)));
    f.push_back(size_field("bayes", "w1_repeats", KF(bayes.w1_repeats)));

    f.push_back(double_list("study", "taus", KF(study.taus)));
    f.push_back(double_list("study", "gammas", KF(study.gammas)));

    const std::string v = "verify";
    f.push_back(size_field(v, "kl_atoms", KF(verify.kl_atoms)));
    f.push_back(size_field(v, "npmle_atoms", KF(verify.npmle_atoms)));
    f.push_back(size_field(v, "npmle_n", KF(verify.npmle_n)));
    f.push_back(size_field(v, "stochastic_atoms", KF(verify.stochastic_atoms)));
    f.push_back(size_field(v, "kl_steps", KF(verify.kl_steps)));
    f.push_back(size_field(v, "npmle_steps", KF(verify.npmle_steps)));
    f.push_back(size_field(v, "reference_iters", KF(verify.reference_iters)));
    f.push_back(double_field(v, "tau", KF(verify.tau)));
    f.push_back(double_field(v, "flow_dt", KF(verify.flow_dt)));
    f.push_back(double_field(v, "flow_horizon", KF(verify.flow_horizon)));
    f.push_back(size_field(v, "inexact_steps", KF(verify.inexact_steps)));
    f.push_back(double_field(v, "kappa", KF(verify.kappa)));
    f.push_back(double_field(v, "eps", KF(verify.eps)));
    f.push_back(double_field(v, "alpha", KF(verify.alpha)));
    f.push_back(size_field(v, "stochastic_batch", KF(verify.stochastic_batch)));
    f.push_back(size_field(v, "stochastic_steps", KF(verify.stochastic_steps)));
    f.push_back(size_field(v, "stochastic_trials", KF(verify.stochastic_trials)));
    f.push_back(size_field(v, "lemma_pairs", KF(verify.lemma_pairs)));
    return f;
  }();
  return all;
}

#undef KF

constexpr std::pair<ExperimentKind, std::string_view> kKindNames[] = {
    {ExperimentKind::kNpmleLocation, "npmle-location"},
    {ExperimentKind::kNpmleLocationScale, "npmle-location-scale"},
    {ExperimentKind::kBayesSampling, "bayes-sampling"},
    {ExperimentKind::kSimplexVerify, "simplex-verify"},
    {ExperimentKind::kStepSizeStudy, "step-size-study"},
    {ExperimentKind::kDistillStudy, "distill-study"},
};

}  // namespace

// ---------------------------------------------------------------------------
// TOML

TomlDocument parse_toml(std::istream& in) {
  TomlDocument doc;
  doc.tables[""];
  std::string table;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string_view s = trim(strip_comment(raw));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) fail(line, "malformed table header");
      table = std::string(trim(s.substr(1, s.size() - 2)));
      if (!bare_key(table)) fail(line, "invalid table name '" + table + "'");
      if (doc.tables.count(table) && table != "") fail(line, "table [" + table + "] defined twice");
      doc.tables[table];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) fail(line, "expected 'key = value'");
    const std::string key(trim(s.substr(0, eq)));
    if (!bare_key(key)) fail(line, "invalid key '" + key + "'");
    auto& t = doc.tables[table];
    if (t.count(key)) fail(line, "field '" + where(table, key) + "' set twice");
    t[key] = ValueReader(trim(s.substr(eq + 1)), line).read();
  }
  return doc;
}

TomlDocument parse_toml_string(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_toml(in);
}

// ---------------------------------------------------------------------------
// Names

std::string_view to_string(ExperimentKind k) {
  for (const auto& [kind, name] : kKindNames) {
    if (kind == k) return name;
  }
  return "unknown";
}

std::string_view to_string(Profile p) { return p == Profile::kPaper ? "paper" : "desk"; }

ExperimentKind parse_experiment_kind(std::string_view s) {
  for (const auto& [kind, name] : kKindNames) {
    if (name == s) return kind;
  }
  throw ParseError("unknown experiment kind '" + std::string(s) + "'");
}

Profile parse_profile(std::string_view s) {
  if (s == "desk") return Profile::kDesk;
  if (s == "paper") return Profile::kPaper;
  throw ParseError("unknown profile '" + std::string(s) + "' (expected \"paper\" or \"desk\")");
}

std::vector<std::string> allowed_methods(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kNpmleLocation:
    case ExperimentKind::kNpmleLocationScale: return {"iklpd", "iklpd-stochastic", "kw-grid"};
    case ExperimentKind::kBayesSampling: return {"iklpd", "langevin"};
    case ExperimentKind::kDistillStudy: return {"iklpd", "iklpd-composed"};
    case ExperimentKind::kStepSizeStudy: return {"iklpd"};
    case ExperimentKind::kSimplexVerify: return {"simplex"};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Profiles

ExperimentConfig profile_defaults(ExperimentKind kind, Profile profile) {
  const bool paper = profile == Profile::kPaper;
  ExperimentConfig c;
  c.kind = kind;
  c.profile = profile;
  c.methods = {allowed_methods(kind).front()};
  SolverConfig& s = c.solver;
  // Shared NPMLE settings: tau_k = 5 * 1.15^(k-1), gamma_k = gamma * 0.912^(k-1),
  // early stop on gradient norm 1e-4 or 200 steps without a new minimum.
  s.tau = 5.0;
  s.beta2 = 1.15;
  s.tau_schedule = TauSchedule::kGeometric;
  s.beta1 = 0.912;
  s.lr_schedule = LrSchedule::kGeometric;
  s.grad_tol = 1e-4;
  s.base_variance = 4.0;
  s.hidden_layers = 2;
  c.stochastic = StochasticSettings{500, 1.0, 1.0, LrSchedule::kInverseLinear};

  switch (kind) {
    case ExperimentKind::kNpmleLocation:
      c.methods = {"iklpd", "iklpd-stochastic", "kw-grid"};
      c.data = {paper ? 5000u : 500u, 2, 1.0};
      s.particles = paper ? 3000 : 500;
      s.blocks = paper ? 30 : 10;
      s.width = paper ? 256 : 64;
      s.outer_iters = 25;
      s.max_inner = paper ? 1000 : 150;
      s.patience = paper ? 200 : 50;
      s.gamma = paper ? 1e-4 : 2e-3;
      // At a few hundred particles one cloud per outer step gets overfit.
      s.resample = paper ? BaseResample::kPerOuter : BaseResample::kPerInner;
      c.stochastic.batch = paper ? 500 : 100;
      c.stochastic.gamma = paper ? 1.0 : 2e-3;
      c.kw = {3025, 1.0, 2000};
      c.reference.em_iters = paper ? 20000 : 5000;
      c.seeds = paper ? std::vector<std::uint64_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                      : std::vector<std::uint64_t>{1, 2, 3};
      break;
    case ExperimentKind::kNpmleLocationScale:
      c.methods = {"iklpd", "iklpd-stochastic", "kw-grid"};
      c.data = {paper ? 5000u : 500u, 2, 1.0};
      s.particles = paper ? 2041 : 500;
      s.blocks = paper ? 30 : 10;
      s.width = 64;
      s.outer_iters = paper ? 50 : 25;
      s.max_inner = paper ? 1000 : 150;
      s.patience = paper ? 200 : 50;
      s.gamma = paper ? 1e-4 : 2e-3;
      // At a few hundred particles one cloud per outer step gets overfit.
      s.resample = paper ? BaseResample::kPerOuter : BaseResample::kPerInner;
      c.stochastic.batch = paper ? 500 : 100;
      c.stochastic.gamma = paper ? 1.0 : 2e-3;
      c.kw = {2041, 1.0, 2000};
      c.reference.em_iters = paper ? 20000 : 5000;
      c.seeds = paper ? std::vector<std::uint64_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                      : std::vector<std::uint64_t>{1, 2, 3};
      break;
    case ExperimentKind::kBayesSampling:
      c.methods = {"iklpd", "langevin"};
      c.data = {1, 2, 1.0};
      s.tau = 5.0;
      s.tau_schedule = TauSchedule::kConstant;
      s.beta2 = 1.0;
      s.particles = 1000;
      s.blocks = paper ? 20 : 10;
      s.width = 64;
      s.outer_iters = paper ? 25 : 15;
      s.max_inner = paper ? 1000 : 60;
      s.early_stop = false;
      // 5e-3 blew up on some seeds, with or without fresh draws per step.
      s.gamma = paper ? 1e-4 : 2e-3;
      s.resample = paper ? BaseResample::kPerOuter : BaseResample::kPerInner;
      s.base_variance = 9.0;
      c.bayes = {2, 1e-2, 512, 8};
      c.seeds = paper ? std::vector<std::uint64_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                      : std::vector<std::uint64_t>{1, 2, 3};
      break;
    case ExperimentKind::kSimplexVerify:
      c.seeds = {1};
      break;
    case ExperimentKind::kStepSizeStudy:
      c.data = {1000, 2, 1.4};
      s.tau_schedule = TauSchedule::kConstant;
      s.beta2 = 1.0;
      s.lr_schedule = LrSchedule::kHarmonic;
      s.zeta_schedule = ZetaSchedule::kHarmonic;
      s.zeta0 = 0.07;
      s.outer_zeta = 0.05;
      s.burn_in = 2;
      s.grad_tol = 0.0;
      s.patience = 0;
      s.particles = paper ? 1000 : 500;
      s.blocks = 10;
      s.width = 64;
      s.base_variance = 1.0;
      s.outer_iters = paper ? 50 : 20;
      s.max_inner = paper ? 5000 : 800;
      s.gamma = 1e-3;
      s.resample = paper ? BaseResample::kPerOuter : BaseResample::kPerInner;
      c.study.taus = paper ? std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10} : std::vector<double>{1, 2, 4, 8};
      c.seeds = paper ? std::vector<std::uint64_t>{1, 2, 3, 4, 5} : std::vector<std::uint64_t>{1, 2};
      break;
    case ExperimentKind::kDistillStudy:
      c.methods = {"iklpd", "iklpd-composed"};
      c.data = {paper ? 5000u : 500u, 2, 1.0};
      s.tau_schedule = TauSchedule::kConstant;
      s.beta2 = 1.0;
      s.early_stop = false;
      s.particles = paper ? 3000 : 500;
      s.blocks = paper ? 30 : 10;
      s.width = paper ? 256 : 64;
      s.outer_iters = paper ? 25 : 15;
      s.max_inner = paper ? 1000 : 80;
      s.gamma = paper ? 8e-5 : 2e-3;
      c.compose = paper ? ComposeConfig{4, 40, 20, 3000, 1e-5, 1e-4, 512, 256}
                        : ComposeConfig{2, 12, 6, 1500, 1e-3, 1e-4, 64, 64};
      c.reference.em_iters = paper ? 20000 : 5000;
      c.kw = {3025, 1.0, 2000};
      c.seeds = paper ? std::vector<std::uint64_t>{1, 2, 3, 4, 5} : std::vector<std::uint64_t>{1, 2};
      break;
  }
  return c;
}

namespace {

// Settings that follow the potential exponent unless given explicitly.
void apply_alpha_defaults(ExperimentConfig& c) {
  if (c.kind != ExperimentKind::kBayesSampling) return;
  c.bayes.langevin_dt = c.bayes.alpha == 3 ? 4e-4 : 1e-2;
  c.solver.base_variance = c.bayes.alpha == 3 ? 4.0 : 9.0;
}

}  // namespace

ExperimentConfig config_from_toml(const TomlDocument& doc) {
  const auto root_it = doc.tables.find("");
  ExperimentKind kind = ExperimentKind::kNpmleLocation;
  Profile profile = Profile::kDesk;
  if (root_it != doc.tables.end()) {
    const auto& root = root_it->second;
    if (auto it = root.find("experiment"); it != root.end()) {
      try {
        kind = parse_experiment_kind(to_str(as_scalar(it->second, "experiment"), it->second.line, "experiment"));
      } catch (const ParseError& e) {
        fail(it->second.line, e.what());
      }
    } else {
      throw ParseError("config: missing required field 'experiment'");
    }
    if (auto it = root.find("profile"); it != root.end()) {
      try {
        profile = parse_profile(to_str(as_scalar(it->second, "profile"), it->second.line, "profile"));
      } catch (const ParseError& e) {
        fail(it->second.line, e.what());
      }
    }
  } else {
    throw ParseError("config: missing required field 'experiment'");
  }
  ExperimentConfig c = profile_defaults(kind, profile);
  if (auto t = doc.tables.find("bayes"); t != doc.tables.end()) {
    if (auto a = t->second.find("alpha"); a != t->second.end()) {
      c.bayes.alpha = static_cast<int>(to_int(as_scalar(a->second, "bayes.alpha"), a->second.line, "bayes.alpha"));
      apply_alpha_defaults(c);
    }
  }

  for (const auto& [table, entries] : doc.tables) {
    for (const auto& [key, value] : entries) {
      if (table.empty() && (key == "experiment" || key == "profile")) continue;
      const auto it = std::find_if(fields().begin(), fields().end(),
                                   [&](const Field& f) { return f.table == table && f.key == key; });
      if (it == fields().end()) fail(value.line, "unknown field '" + where(table, key) + "'");
      it->set(c, value, where(table, key));
    }
  }
  return c;
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c = config_from_toml(parse_toml(in));
  validate(c);
  return c;
}

ExperimentConfig parse_config_string(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_config(in);
}

std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "experiment = " << quote(to_string(c.kind)) << '\n';
  out << "profile = " << quote(to_string(c.profile)) << '\n';
  std::string table;
  for (const Field& f : fields()) {
    if (f.table != table) {
      table = f.table;
      out << "\n[" << table << "]\n";
    }
    out << f.key << " = " << f.get(c) << '\n';
  }
  return out.str();
}

void validate(const ExperimentConfig& c) {
  auto bad = [](const std::string& m) { throw ParseError("config: " + m); };
  if (c.seeds.empty()) bad("seeds must be nonempty");
  if (c.methods.empty()) bad("methods must be nonempty");
  const auto allowed = allowed_methods(c.kind);
  for (const auto& m : c.methods) {
    if (std::find(allowed.begin(), allowed.end(), m) == allowed.end()) {
      bad("method '" + m + "' is not available for experiment " + std::string(to_string(c.kind)));
    }
  }
  if (c.threads < 1) bad("threads must be >= 1");
  if (c.data.n < 1 || c.data.dim < 1) bad("data.n and data.dim must be >= 1");
  if (c.kind == ExperimentKind::kNpmleLocation && c.data.dim != 2) bad("npmle-location uses two-moons data (dim 2)");
  if (c.kind == ExperimentKind::kNpmleLocationScale && c.data.dim < 2) bad("location-scale dim must be >= 2");
  if (c.kind == ExperimentKind::kBayesSampling && c.bayes.alpha < 1) bad("bayes.alpha must be >= 1");
  if (c.bayes.langevin_dt <= 0.0) bad("bayes.langevin_dt must be positive");
  if (c.kw.grid < 1 || c.kw.tau <= 0.0) bad("kw.grid and kw.tau must be positive");
  if (c.study.taus.empty()) bad("study.taus must be nonempty");
  if (!c.study.gammas.empty() && c.study.gammas.size() != c.study.taus.size()) {
    bad("study.gammas needs one learning rate per tau");
  }
  for (double t : c.study.taus) {
    if (!(t > 0.0)) bad("study.taus must be positive");
  }
  try {
    validate(c.solver);
    validate(c.compose);
  } catch (const ContractViolation& e) {
    bad(e.what());
  }
  const bool stochastic = std::find(c.methods.begin(), c.methods.end(), "iklpd-stochastic") != c.methods.end();
  if (stochastic && (c.stochastic.batch < 1 || c.stochastic.batch > c.data.n)) {
    bad("stochastic.batch must lie in [1, data.n]");
  }
}

}  // namespace klflow
