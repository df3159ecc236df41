// SPDX-License-Identifier: Apache-2.0
#include "tlora/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace tlora {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(AdapterMode m) {
  switch (m) {
    case AdapterMode::kLora: return "lora";
    case AdapterMode::kTlora: return "tlora";
    case AdapterMode::kWSvd: return "wsvd";
    case AdapterMode::kTheoretical: return "theoretical";
  }
  return "?";
}

AdapterMode adapter_mode_from_string(std::string_view s) {
  if (s == "lora") return AdapterMode::kLora;
  if (s == "tlora") return AdapterMode::kTlora;
  if (s == "wsvd") return AdapterMode::kWSvd;
  if (s == "theoretical") return AdapterMode::kTheoretical;
  throw Error(ErrorCode::kInvalidConfig, "unknown adapter mode '" + std::string(s) + "'");
}

InitKind init_kind_for(AdapterMode m) {
  switch (m) {
    case AdapterMode::kLora: return InitKind::kRandomGaussian;
    case AdapterMode::kTlora: return InitKind::kWcSvd;
    case AdapterMode::kWSvd: return InitKind::kWSvd;
    case AdapterMode::kTheoretical: return InitKind::kTheoretical;
  }
  return InitKind::kWcSvd;
}

std::vector<VariantSpec> component_variants() {
  const InitKind rnd = InitKind::kRandomGaussian;
  const InitKind wc = InitKind::kWcSvd;
  return {
      {"lora", rnd, false, false, false},
      {"+RA", rnd, true, false, false},
      {"+SA", rnd, false, true, false},
      {"+Init", wc, false, false, true},
      {"+Init+RA", wc, true, false, true},
      {"+Init+SA", wc, false, true, true},
      {"+RA+SA", rnd, true, true, false},
      {"tlora", wc, true, true, true},
  };
}

std::vector<VariantSpec> init_ablation_variants() {
  return {
      {"random_gaussian", InitKind::kRandomGaussian, false, false, true},
      {"w_svd", InitKind::kWSvd, false, false, true},
      {"wc_svd", InitKind::kWcSvd, false, false, true},
  };
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, m); };
  task.validate();
  if (adapter.r_init == 0) fail("adapter.r_init must be >= 1");
  if (!(adapter.alpha > 0.0)) fail("adapter.alpha must be > 0");
  if (!(adapter.eps > 0.0)) fail("adapter.eps must be > 0");
  if (adapter.gaussian_std && !(*adapter.gaussian_std > 0.0)) fail("adapter.gaussian_std must be > 0");
  if (calib.n_samples == 0) fail("calib.n_samples must be >= 1");
  if (calib.n_samples > task.n_calib) fail("calib.n_samples exceeds task.n_calib");
  if (train.steps == 0) fail("train.steps must be >= 1");
  if (!(train.lr > 0.0)) fail("train.lr must be > 0");
  if (train.batch_size == 0) fail("train.batch_size must be >= 1");
  if (train.mode == TrainMode::kBOnly && !adapter.freeze_a) {
    fail("train.mode b_only requires adapter.freeze_a");
  }
  if (compare.seeds.empty()) fail("compare.seeds must not be empty");
  if (compare.variants.empty()) fail("compare.variants must not be empty");
  std::set<std::string> names;
  for (const auto& v : compare.variants) {
    if (v.name.empty()) fail("compare variant without a name");
    if (!names.insert(v.name).second) fail("duplicate compare variant '" + v.name + "'");
  }
}

namespace {

struct Location {
  std::size_t line = 0;
  std::size_t column = 0;
};

Location locate_offset(std::string_view text, std::size_t offset) {
  Location loc{1, 1};
  for (std::size_t i = 0; i < std::min(offset, text.size()); ++i) {
    if (text[i] == '\n') {
      ++loc.line;
      loc.column = 1;
    } else {
      ++loc.column;
    }
  }
  return loc;
}

// Reads a JSON object field by field and rejects keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path, const std::function<std::string(const std::string&, const std::string&)>& where)
      : j_(j), path_(std::move(path)), where_(where) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    throw ConfigError(where_(path, path.substr(path.find_last_of('/') + 1)) + path + ": " + msg);
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) fail(path_ + "/" + key, "expected true/false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_unsigned()) fail(path_ + "/" + key, "expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) fail(path_ + "/" + key, "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) fail(path_ + "/" + key, "expected a string");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      fail(path_ + "/" + key, e.what());
    }
  }

  template <typename Enum>
  void read_enum(const std::string& key, Enum& out, Enum (*parse)(std::string_view)) {
    std::string s;
    if (!has(key)) return;
    read(key, s);
    try {
      out = parse(s);
    } catch (const Error& e) {
      fail(path_ + "/" + key, e.what());
    }
  }

  const json& child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return path_ + "/" + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(path_ + "/" + key, "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::function<std::string(const std::string&, const std::string&)> where_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig parse_config(std::string_view text, const std::string& source) {
  json root;
  try {
    root = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const Location loc = locate_offset(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(source + ":" + std::to_string(loc.line) + ":" + std::to_string(loc.column) +
                      ": malformed JSON: " + e.what());
  }

  // Best-effort location of a key: first occurrence of "key" in the text.
  auto where = [&](const std::string&, const std::string& key) -> std::string {
    if (key.empty()) return source + ": ";
    const std::size_t at = text.find("\"" + key + "\"");
    if (at == std::string_view::npos) return source + ": ";
    const Location loc = locate_offset(text, at);
    return source + ":" + std::to_string(loc.line) + ":" + std::to_string(loc.column) + ": ";
  };

  RunConfig cfg;
  bool variants_given = false;
  try {
    Reader top(root, "", where);
    if (top.has("task")) {
      Reader t(top.child("task"), "/task", where);
      TaskSpec& ts = cfg.task;
      t.read_enum("kind", ts.kind, task_kind_from_string);
      if (t.has("dims")) {
        const json& d = t.child("dims");
        if (!d.is_array()) t.fail(t.path("dims"), "expected an array of widths");
        ts.dims.clear();
        for (const auto& v : d) {
          if (!v.is_number_unsigned()) t.fail(t.path("dims"), "widths must be positive integers");
          ts.dims.push_back(v.get<std::size_t>());
        }
      }
      t.read_enum("activation", ts.activation, activation_from_string);
      if (t.has("covariance")) {
        Reader c(t.child("covariance"), "/task/covariance", where);
        c.read_enum("kind", ts.covariance.kind, covariance_kind_from_string);
        c.read("lambda_max", ts.covariance.lambda_max);
        c.read("lambda_min", ts.covariance.lambda_min);
        c.read("rotation_seed", ts.covariance.rotation_seed);
        c.finish();
      }
      if (t.has("teacher")) {
        Reader c(t.child("teacher"), "/task/teacher", where);
        c.read("rank", ts.teacher.rank);
        c.read_enum("alignment", ts.teacher.alignment, alignment_from_string);
        c.read("scale", ts.teacher.scale);
        c.finish();
      }
      t.read("pretrain_alignment", ts.pretrain_alignment);
      t.read("noise_var", ts.noise_var);
      t.read("n_train", ts.n_train);
      t.read("n_test", ts.n_test);
      t.read("n_calib", ts.n_calib);
      t.read("calib_rows", ts.calib_rows);
      t.read("seed", ts.seed);
      t.finish();
    }
    if (top.has("adapter")) {
      Reader a(top.child("adapter"), "/adapter", where);
      AdapterConfig& ac = cfg.adapter;
      a.read_enum("mode", ac.mode, adapter_mode_from_string);
      a.read("r_init", ac.r_init);
      a.read("alpha", ac.alpha);
      a.read("adapt_ra", ac.adapt_ra);
      a.read("adapt_sa", ac.adapt_sa);
      a.read("freeze_a", ac.freeze_a);
      a.read("r_min", ac.r_min);
      a.read("eps", ac.eps);
      if (a.has("gaussian_std")) {
        double v = 0.0;
        a.read("gaussian_std", v);
        ac.gaussian_std = v;
      }
      a.finish();
    }
    if (top.has("calib")) {
      Reader c(top.child("calib"), "/calib", where);
      c.read("n_samples", cfg.calib.n_samples);
      c.finish();
    }
    if (top.has("train")) {
      Reader t(top.child("train"), "/train", where);
      TrainConfig& tc = cfg.train;
      t.read("lr", tc.lr);
      t.read("steps", tc.steps);
      t.read("batch_size", tc.batch_size);
      t.read_enum("optimizer", tc.optimizer.kind, optimizer_from_string);
      t.read("beta1", tc.optimizer.beta1);
      t.read("beta2", tc.optimizer.beta2);
      t.read("adam_eps", tc.optimizer.eps);
      t.read("weight_decay", tc.optimizer.weight_decay);
      t.read("seed", tc.seed);
      t.read_enum("mode", tc.mode, train_mode_from_string);
      t.read_enum("schedule", tc.schedule, schedule_from_string);
      t.finish();
    }
    if (top.has("compare")) {
      Reader c(top.child("compare"), "/compare", where);
      if (c.has("seeds")) {
        const json& s = c.child("seeds");
        if (!s.is_array()) c.fail(c.path("seeds"), "expected an array of seeds");
        cfg.compare.seeds.clear();
        for (const auto& v : s) {
          if (!v.is_number_unsigned()) c.fail(c.path("seeds"), "seeds must be non-negative integers");
          cfg.compare.seeds.push_back(v.get<std::uint64_t>());
        }
      }
      c.read("preset", cfg.compare.preset);
      c.read("parallel", cfg.compare.parallel);
      if (c.has("variants")) {
        variants_given = true;
        const json& vs = c.child("variants");
        if (!vs.is_array()) c.fail(c.path("variants"), "expected an array");
        cfg.compare.variants.clear();
        for (std::size_t i = 0; i < vs.size(); ++i) {
          Reader v(vs[i], "/compare/variants/" + std::to_string(i), where);
          VariantSpec spec;
          v.read("name", spec.name);
          v.read_enum("init", spec.init, init_kind_from_string);
          v.read("adapt_ra", spec.adapt_ra);
          v.read("adapt_sa", spec.adapt_sa);
          v.read("freeze_a", spec.freeze_a);
          v.finish();
          cfg.compare.variants.push_back(spec);
        }
      }
      c.finish();
    }
    if (top.has("output")) {
      Reader o(top.child("output"), "/output", where);
      o.read("dir", cfg.output.dir);
      o.finish();
    }
    top.finish();

    if (!variants_given) {
      if (cfg.compare.preset == "components") {
        cfg.compare.variants = component_variants();
      } else if (cfg.compare.preset == "init_ablation") {
        cfg.compare.variants = init_ablation_variants();
      } else {
        top.fail("/compare/preset", "unknown preset '" + cfg.compare.preset +
                                        "' (expected components or init_ablation)");
      }
    } else {
      cfg.compare.preset = "custom";
    }
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

ordered_json to_json(const RunConfig& cfg) {
  const TaskSpec& t = cfg.task;
  ordered_json j;
  j["task"] = {
      {"kind", to_string(t.kind)},
      {"dims", t.dims},
      {"activation", to_string(t.activation)},
      {"covariance",
       {{"kind", to_string(t.covariance.kind)},
        {"lambda_max", t.covariance.lambda_max},
        {"lambda_min", t.covariance.lambda_min},
        {"rotation_seed", t.covariance.rotation_seed}}},
      {"teacher",
       {{"rank", t.teacher.rank},
        {"alignment", to_string(t.teacher.alignment)},
        {"scale", t.teacher.scale}}},
      {"pretrain_alignment", t.pretrain_alignment},
      {"noise_var", t.noise_var},
      {"n_train", t.n_train},
      {"n_test", t.n_test},
      {"n_calib", t.n_calib},
      {"calib_rows", t.calib_rows},
      {"seed", t.seed},
  };
  const AdapterConfig& a = cfg.adapter;
  j["adapter"] = {
      {"mode", to_string(a.mode)},
      {"r_init", a.r_init},
      {"alpha", a.alpha},
      {"adapt_ra", a.adapt_ra},
      {"adapt_sa", a.adapt_sa},
      {"freeze_a", a.freeze_a},
      {"r_min", a.r_min},
      {"eps", a.eps},
      {"gaussian_std", a.gaussian_std ? ordered_json(*a.gaussian_std) : ordered_json(nullptr)},
  };
  j["calib"] = {{"n_samples", cfg.calib.n_samples}};
  const TrainConfig& tr = cfg.train;
  j["train"] = {
      {"lr", tr.lr},
      {"steps", tr.steps},
      {"batch_size", tr.batch_size},
      {"optimizer", to_string(tr.optimizer.kind)},
      {"beta1", tr.optimizer.beta1},
      {"beta2", tr.optimizer.beta2},
      {"adam_eps", tr.optimizer.eps},
      {"weight_decay", tr.optimizer.weight_decay},
      {"seed", tr.seed},
      {"mode", to_string(tr.mode)},
      {"schedule", to_string(tr.schedule)},
  };
  ordered_json variants = ordered_json::array();
  for (const auto& v : cfg.compare.variants) {
    variants.push_back({{"name", v.name},
                        {"init", to_string(v.init)},
                        {"adapt_ra", v.adapt_ra},
                        {"adapt_sa", v.adapt_sa},
                        {"freeze_a", v.freeze_a}});
  }
  j["compare"] = {{"seeds", cfg.compare.seeds},
                  {"parallel", cfg.compare.parallel},
                  {"variants", variants}};
  j["output"] = {{"dir", cfg.output.dir}};
  return j;
}

std::string config_hash(const RunConfig& cfg) {
  // Output location does not change results, so it is left out.
  ordered_json j = to_json(cfg);
  j.erase("output");
  j["compare"].erase("parallel");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace tlora
