// SPDX-License-Identifier: Apache-2.0
#include "tlora/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

namespace tlora::io {

namespace {

[[noreturn]] void bad(const std::string& what) {
  throw Error(ErrorCode::kInvalidInput, "malformed file: " + what);
}

const Json& field(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) bad(std::string("missing '") + key + "'");
  return j.at(key);
}

Json vector_to_json(const Vector& v) {
  Json arr = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Vector vector_from_json(const Json& j) {
  if (!j.is_array()) bad("expected an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

Json layers_to_json(const Network& net) {
  Json layers = Json::array();
  for (const auto& l : net.layers) {
    Json jl;
    jl["name"] = l.name;
    jl["shape"] = {l.w.rows(), l.w.cols()};
    jl["data"] = matrix_to_json(l.w)["data"];
    jl["bias"] = l.b ? vector_to_json(*l.b) : Json(nullptr);
    jl["adaptable"] = l.adaptable;
    layers.push_back(std::move(jl));
  }
  return layers;
}

Network network_from_json(const Json& network, const Json& layers) {
  Network net;
  net.activation = activation_from_string(field(network, "activation").get<std::string>());
  net.loss = loss_kind_from_string(field(network, "loss").get<std::string>());
  if (!layers.is_array()) bad("layers must be an array");
  for (const auto& jl : layers) {
    LinearLayer l;
    l.name = field(jl, "name").get<std::string>();
    Json m;
    m["shape"] = field(jl, "shape");
    m["data"] = field(jl, "data");
    l.w = matrix_from_json(m);
    if (jl.contains("bias") && !jl.at("bias").is_null()) l.b = vector_from_json(jl.at("bias"));
    l.adaptable = jl.value("adaptable", true);
    net.layers.push_back(std::move(l));
  }
  net.validate();
  return net;
}

Json batch_to_json(const Batch& b) { return Json{{"x", matrix_to_json(b.x)}, {"y", matrix_to_json(b.y)}}; }

Batch batch_from_json(const Json& j) {
  return {matrix_from_json(field(j, "x")), matrix_from_json(field(j, "y"))};
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Json matrix_to_json(const Matrix& m) {
  Json data = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index k = 0; k < m.cols(); ++k) data.push_back(m(i, k));
  return Json{{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const Json& j) {
  const Json& shape = field(j, "shape");
  const Json& data = field(j, "data");
  if (!shape.is_array() || shape.size() != 2) bad("shape must be [rows, cols]");
  const auto rows = shape[0].get<Eigen::Index>();
  const auto cols = shape[1].get<Eigen::Index>();
  if (rows < 0 || cols < 0 || !data.is_array() ||
      data.size() != static_cast<std::size_t>(rows * cols)) {
    bad("data length does not match shape");
  }
  Matrix m(rows, cols);
  std::size_t idx = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) {
      const Json& v = data[idx++];
      if (!v.is_number()) bad("matrix entries must be numbers");
      m(i, k) = v.get<double>();
    }
  return m;
}

Json meta_to_json(const Meta& meta) {
  return Json{{"format_version", meta.format_version},
              {"seed", meta.seed},
              {"config_hash", meta.config_hash}};
}

Meta meta_from_json(const Json& j) {
  Meta m;
  m.format_version = field(j, "format_version").get<int>();
  if (m.format_version != kFormatVersion) {
    bad("unsupported format_version " + std::to_string(m.format_version));
  }
  m.seed = field(j, "seed").get<std::uint64_t>();
  m.config_hash = field(j, "config_hash").get<std::string>();
  return m;
}

Json checkpoint_to_json(const Checkpoint& ckpt) {
  Json j;
  j["meta"] = meta_to_json(ckpt.meta);
  j["network"] = {{"activation", to_string(ckpt.net.activation)}, {"loss", to_string(ckpt.net.loss)}};
  j["layers"] = layers_to_json(ckpt.net);
  Json adapters = Json::array();
  for (const auto& a : ckpt.adapters) {
    adapters.push_back({{"layer_name", a.layer_name},
                        {"r", a.r},
                        {"alpha", a.alpha},
                        {"frozen_a", a.frozen_a},
                        {"A", matrix_to_json(a.a)},
                        {"B", matrix_to_json(a.b)}});
  }
  j["adapters"] = std::move(adapters);
  return j;
}

Checkpoint checkpoint_from_json(const Json& j) {
  try {
    Checkpoint c;
    c.meta = meta_from_json(field(j, "meta"));
    c.net = network_from_json(field(j, "network"), field(j, "layers"));
    for (const auto& ja : field(j, "adapters")) {
      AdapterState a;
      a.layer_name = field(ja, "layer_name").get<std::string>();
      a.r = field(ja, "r").get<std::size_t>();
      a.alpha = field(ja, "alpha").get<double>();
      a.frozen_a = field(ja, "frozen_a").get<bool>();
      a.a = matrix_from_json(field(ja, "A"));
      a.b = matrix_from_json(field(ja, "B"));
      const LinearLayer& l = c.net.layer(a.layer_name);
      if (static_cast<std::size_t>(a.a.rows()) != a.r || a.a.cols() != l.w.cols() ||
          a.b.rows() != l.w.rows() || static_cast<std::size_t>(a.b.cols()) != a.r) {
        bad("adapter '" + a.layer_name + "' shape inconsistent with its layer");
      }
      c.adapters.push_back(std::move(a));
    }
    return c;
  } catch (const Json::exception& e) {
    bad(e.what());
  }
}

Json stats_to_json(const CalibrationStats& stats, const Meta& meta) {
  Json j;
  j["meta"] = meta_to_json(meta);
  for (const auto& m : stats.modules) {
    if (m.name == "meta" || m.name == "n_samples") bad("reserved module name '" + m.name + "'");
    j[m.name] = {{"s", m.importance}, {"c", matrix_to_json(m.covariance)}};
  }
  j["n_samples"] = stats.n_samples;
  return j;
}

CalibrationStats stats_from_json(const Json& j) {
  try {
    CalibrationStats s;
    s.n_samples = field(j, "n_samples").get<std::size_t>();
    for (const auto& [key, value] : j.items()) {
      if (key == "meta" || key == "n_samples") continue;
      s.modules.push_back({key, field(value, "s").get<double>(), matrix_from_json(field(value, "c"))});
    }
    return s;
  } catch (const Json::exception& e) {
    bad(e.what());
  }
}

Json plan_to_json(const AllocationPlan& plan) {
  Json modules = Json::array();
  for (const auto& m : plan.modules) {
    modules.push_back({{"name", m.name}, {"rank", m.rank}, {"alpha", m.alpha}, {"scale", m.scale()}});
  }
  return Json{{"r_total", plan.r_total},
              {"alpha_total", plan.alpha_total},
              {"r_init", plan.r_init},
              {"r_min", plan.r_min},
              {"modules", std::move(modules)}};
}

Json dataset_to_json(const GeneratedTask& task, const RunConfig& cfg, const Meta& meta) {
  Json j;
  j["meta"] = meta_to_json(meta);
  j["task"] = to_json(cfg)["task"];
  j["network"] = {{"activation", to_string(task.base.activation)}, {"loss", to_string(task.base.loss)}};
  j["layers"] = layers_to_json(task.base);
  j["train"] = batch_to_json(task.train);
  j["test"] = batch_to_json(task.test);
  Json calib = Json::array();
  for (const auto& b : task.calib) calib.push_back(batch_to_json(b));
  j["calib"] = std::move(calib);
  Json deltas = Json::array();
  for (const auto& d : task.delta_star) deltas.push_back(matrix_to_json(d));
  j["delta_star"] = std::move(deltas);
  j["population_c"] = matrix_to_json(task.population_c);
  Json covs = Json::array();
  for (const auto& c : task.layer_covariance) covs.push_back(matrix_to_json(c));
  j["layer_covariance"] = std::move(covs);
  return j;
}

GeneratedTask dataset_from_json(const Json& j) {
  try {
    meta_from_json(field(j, "meta"));
    GeneratedTask t;
    t.base = network_from_json(field(j, "network"), field(j, "layers"));
    t.train = batch_from_json(field(j, "train"));
    t.test = batch_from_json(field(j, "test"));
    for (const auto& b : field(j, "calib")) t.calib.push_back(batch_from_json(b));
    for (const auto& d : field(j, "delta_star")) t.delta_star.push_back(matrix_from_json(d));
    t.population_c = matrix_from_json(field(j, "population_c"));
    for (const auto& c : field(j, "layer_covariance")) t.layer_covariance.push_back(matrix_from_json(c));
    return t;
  } catch (const Json::exception& e) {
    bad(e.what());
  }
}

Json report_to_json(const analysis::AlignmentReport& report, const Meta& meta) {
  Json layers = Json::array();
  for (const auto& l : report.layers) {
    layers.push_back({{"layer", l.layer},
                      {"r", l.r},
                      {"phi_proxy_delta", l.phi_proxy_delta},
                      {"phi_approx_theory", l.phi_approx_theory},
                      {"cond_C", l.cond_c},
                      {"near_degenerate", l.near_degenerate},
                      {"top_eig_proxy", l.top_eig_proxy},
                      {"top_eig_delta", l.top_eig_delta},
                      {"covariance_spectrum", l.covariance_spectrum}});
  }
  return Json{{"meta", meta_to_json(meta)},
              {"eps", report.eps},
              {"delta_source", report.delta_source},
              {"layers", std::move(layers)}};
}

void write_report_csv(std::ostream& out, const analysis::AlignmentReport& report,
                      const std::string& config_hash) {
  out << "# config_hash=" << config_hash << "\n";
  out << "layer,phi_proxy_delta,phi_approx_theory,cond_C,r,near_degenerate,top_eig_proxy,top_eig_delta\n";
  for (const auto& l : report.layers) {
    out << l.layer << ',' << format_double(l.phi_proxy_delta) << ','
        << format_double(l.phi_approx_theory) << ',' << format_double(l.cond_c) << ',' << l.r << ','
        << (l.near_degenerate ? 1 : 0) << ','
        << format_double(l.top_eig_proxy.empty() ? 0.0 : l.top_eig_proxy.front()) << ','
        << format_double(l.top_eig_delta.empty() ? 0.0 : l.top_eig_delta.front()) << "\n";
  }
}

void write_metrics_csv(std::ostream& out, const MetricsHistory& history,
                       const std::string& config_hash) {
  out << "# config_hash=" << config_hash << "\n";
  out << "step,loss,grad_norm,grad_norm_B,lr\n";
  for (const auto& r : history) {
    out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.grad_norm) << ','
        << format_double(r.grad_norm_b) << ',' << format_double(r.lr) << "\n";
  }
}

void write_compare_csv(std::ostream& out, const std::vector<CompareRow>& rows,
                       const std::string& config_hash) {
  out << "# config_hash=" << config_hash << "\n";
  out << "variant,seed,final_loss,trainable_params,steps\n";
  for (const auto& r : rows) {
    out << r.variant << ',' << r.seed << ',' << format_double(r.final_loss) << ','
        << r.trainable_params << ',' << r.steps << "\n";
  }
}

std::vector<CompareRow> read_compare_csv(std::istream& in) {
  std::vector<CompareRow> rows;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "variant,seed,final_loss,trainable_params,steps") bad("unexpected compare header");
      header = true;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) bad("compare row needs 5 cells: " + line);
    rows.push_back({cells[0], std::stoull(cells[1]), std::stod(cells[2]),
                    static_cast<std::size_t>(std::stoull(cells[3])),
                    static_cast<std::size_t>(std::stoull(cells[4]))});
  }
  return rows;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kInvalidInput, "cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json read_json_file(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::kInvalidInput, "'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kInvalidInput, "cannot write '" + path + "'");
  out << j.dump(1) << "\n";
}

}  // namespace tlora::io
