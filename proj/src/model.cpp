// SPDX-License-Identifier: Apache-2.0
#include "tlora/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "tlora/rng.hpp"

namespace tlora {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

std::string_view to_string(LossKind l) {
  return l == LossKind::kMse ? "mse" : "cross_entropy";
}

Activation activation_from_string(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw Error(ErrorCode::kInvalidConfig, "unknown activation '" + std::string(name) + "'");
}

LossKind loss_kind_from_string(std::string_view name) {
  if (name == "mse") return LossKind::kMse;
  if (name == "cross_entropy") return LossKind::kCrossEntropy;
  throw Error(ErrorCode::kInvalidConfig, "unknown loss '" + std::string(name) + "'");
}

void Network::validate() const {
  if (layers.empty()) throw Error(ErrorCode::kInvalidInput, "network has no layers");
  std::set<std::string> names;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    if (!names.insert(l.name).second) {
      throw Error(ErrorCode::kInvalidInput, "duplicate layer name '" + l.name + "'");
    }
    if (l.w.size() == 0) throw Error(ErrorCode::kInvalidInput, "layer '" + l.name + "' is empty");
    if (l.b && static_cast<std::size_t>(l.b->size()) != l.d_out()) {
      throw Error(ErrorCode::kInvalidInput, "bias size mismatch in '" + l.name + "'");
    }
    if (k > 0 && layers[k - 1].d_out() != l.d_in()) {
      throw Error(ErrorCode::kInvalidInput, "layer '" + l.name + "' does not chain");
    }
  }
}

const LinearLayer& Network::layer(std::string_view name) const {
  for (const auto& l : layers)
    if (l.name == name) return l;
  throw Error(ErrorCode::kInvalidInput, "no layer named '" + std::string(name) + "'");
}

LinearLayer& Network::layer(std::string_view name) {
  return const_cast<LinearLayer&>(std::as_const(*this).layer(name));
}

namespace {

Matrix activate(Activation a, const Matrix& z) {
  switch (a) {
    case Activation::kRelu: return z.cwiseMax(0.0);
    case Activation::kTanh: return z.array().tanh().matrix();
    case Activation::kIdentity: return z;
  }
  return z;
}

// dL/dZ given dL/dact(Z).
Matrix activation_backward(Activation a, const Matrix& z, const Matrix& upstream) {
  switch (a) {
    case Activation::kRelu:
      return (z.array() > 0.0).select(upstream, 0.0);
    case Activation::kTanh: {
      const Eigen::ArrayXXd t = z.array().tanh();
      return (upstream.array() * (1.0 - t * t)).matrix();
    }
    case Activation::kIdentity: return upstream;
  }
  return upstream;
}

Matrix one_hot_targets(const Matrix& y, Eigen::Index batch, Eigen::Index classes) {
  if (y.rows() != batch) throw Error(ErrorCode::kInvalidInput, "target rows != batch rows");
  if (y.cols() == classes) return y;
  if (y.cols() != 1) throw Error(ErrorCode::kInvalidInput, "targets must be one-hot or indices");
  Matrix out = Matrix::Zero(batch, classes);
  for (Eigen::Index i = 0; i < batch; ++i) {
    const double c = y(i, 0);
    const auto idx = static_cast<Eigen::Index>(c);
    if (c < 0.0 || idx >= classes || static_cast<double>(idx) != c) {
      throw Error(ErrorCode::kInvalidInput, "class index out of range");
    }
    out(i, idx) = 1.0;
  }
  return out;
}

// Loss value and dL/dOutput.
double loss_and_grad(LossKind kind, const Matrix& out, const Matrix& y, Matrix& grad) {
  const auto batch = static_cast<double>(out.rows());
  if (kind == LossKind::kMse) {
    if (y.rows() != out.rows() || y.cols() != out.cols()) {
      throw Error(ErrorCode::kInvalidInput, "mse targets shape mismatch");
    }
    const Matrix diff = out - y;
    grad = (2.0 / batch) * diff;
    return diff.squaredNorm() / batch;
  }
  const Matrix target = one_hot_targets(y, out.rows(), out.cols());
  grad.resize(out.rows(), out.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (out.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    const double log_z = mx + std::log(z);
    total -= (target.row(i).array() * (out.row(i).array() - log_z)).sum();
    grad.row(i) = (e / z - target.row(i)) / batch;
  }
  return total / batch;
}

}  // namespace

ForwardTrace forward(const Network& net, const Batch& batch, const AdapterSet* adapters) {
  net.validate();
  if (static_cast<std::size_t>(batch.x.cols()) != net.d_in() || batch.x.rows() == 0) {
    throw Error(ErrorCode::kInvalidInput, "batch width " + std::to_string(batch.x.cols()) +
                                              " != network input " + std::to_string(net.d_in()));
  }
  ForwardTrace t;
  t.net = &net;
  t.adapters = adapters;
  const std::size_t n = net.layers.size();
  t.inputs.reserve(n);
  t.pre_activations.reserve(n);
  t.projections.resize(n);

  Matrix h = batch.x;
  for (std::size_t k = 0; k < n; ++k) {
    const LinearLayer& layer = net.layers[k];
    t.inputs.push_back(h);
    Matrix z = h * layer.w.transpose();
    if (layer.b) z.rowwise() += layer.b->transpose();
    if (adapters) {
      if (const AdapterState* ad = find_adapter(*adapters, layer.name)) {
        if (ad->a.cols() != layer.w.cols() || ad->b.rows() != layer.w.rows() ||
            ad->a.rows() != ad->b.cols()) {
          throw Error(ErrorCode::kInvalidInput, "adapter shape mismatch on '" + layer.name + "'");
        }
        t.projections[k] = h * ad->a.transpose();
        z.noalias() += ad->scale() * (t.projections[k] * ad->b.transpose());
      }
    }
    t.pre_activations.push_back(z);
    h = k + 1 < n ? activate(net.activation, z) : z;
  }
  t.output = h;
  t.loss = loss_and_grad(net.loss, t.output, batch.y, t.output_grad);
  return t;
}

Matrix predict(const Network& net, const Matrix& x, const AdapterSet* adapters) {
  Matrix h = x;
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const LinearLayer& layer = net.layers[k];
    Matrix z = h * layer.w.transpose();
    if (layer.b) z.rowwise() += layer.b->transpose();
    if (adapters) {
      if (const AdapterState* ad = find_adapter(*adapters, layer.name)) {
        z.noalias() += ad->scale() * ((h * ad->a.transpose()) * ad->b.transpose());
      }
    }
    h = k + 1 < net.layers.size() ? activate(net.activation, z) : z;
  }
  return h;
}

GradientSet backward(const ForwardTrace& trace) {
  if (!trace.net) throw Error(ErrorCode::kInvalidInput, "empty trace");
  const Network& net = *trace.net;
  const std::size_t n = net.layers.size();
  GradientSet g;
  g.layers.resize(n);
  if (trace.adapters) {
    for (const auto& ad : *trace.adapters) g.adapters.push_back({ad.layer_name, {}, {}});
  }

  Matrix dz = trace.output_grad;
  for (std::size_t k = n; k-- > 0;) {
    const LinearLayer& layer = net.layers[k];
    if (k + 1 < n) dz = activation_backward(net.activation, trace.pre_activations[k], dz);
    const Matrix& x = trace.inputs[k];
    g.layers[k].dw = dz.transpose() * x;
    if (layer.b) g.layers[k].db = dz.colwise().sum().transpose();

    const AdapterState* ad = nullptr;
    std::size_t ad_index = 0;
    if (trace.adapters) {
      for (; ad_index < trace.adapters->size(); ++ad_index) {
        if ((*trace.adapters)[ad_index].layer_name == layer.name) {
          ad = &(*trace.adapters)[ad_index];
          break;
        }
      }
    }
    Matrix dx;
    if (k > 0) dx = dz * layer.w;
    if (ad) {
      const double s = ad->scale();
      const Matrix dz_b = dz * ad->b;  // batch x r
      AdapterGrad& ag = g.adapters[ad_index];
      ag.db = s * (dz.transpose() * trace.projections[k]);
      if (!ad->frozen_a) ag.da = s * (dz_b.transpose() * x);
      if (k > 0) dx.noalias() += s * (dz_b * ad->a);
    }
    if (k > 0) dz = std::move(dx);
  }

  for (const auto& lg : g.layers) {
    if (!lg.dw.allFinite() || (lg.db.size() && !lg.db.allFinite())) {
      throw Error(ErrorCode::kNumericalFailure, "non-finite weight gradient");
    }
  }
  for (const auto& ag : g.adapters) {
    if (!ag.db.allFinite() || (ag.da.size() && !ag.da.allFinite())) {
      throw Error(ErrorCode::kNumericalFailure, "non-finite adapter gradient");
    }
  }
  return g;
}

namespace {

struct BlockRef {
  std::string name;
  double* data;
  Eigen::Index size;
  const double* analytic;
};

}  // namespace

std::vector<GradCheckBlock> fd_gradcheck(const Network& net, const AdapterSet& adapters,
                                         const Batch& batch, double step, std::uint64_t seed,
                                         std::size_t max_coords) {
  if (!(step >= 1e-7 && step <= 1e-3)) {
    throw Error(ErrorCode::kInvalidInput, "finite-difference step must lie in [1e-7, 1e-3]");
  }
  Network work = net;
  AdapterSet work_ad = adapters;
  const ForwardTrace trace = forward(work, batch, &work_ad);
  const GradientSet grads = backward(trace);

  std::vector<BlockRef> blocks;
  for (std::size_t k = 0; k < work.layers.size(); ++k) {
    auto& l = work.layers[k];
    blocks.push_back({l.name + ".W", l.w.data(), l.w.size(), grads.layers[k].dw.data()});
    if (l.b) blocks.push_back({l.name + ".b", l.b->data(), l.b->size(), grads.layers[k].db.data()});
  }
  for (std::size_t j = 0; j < work_ad.size(); ++j) {
    auto& ad = work_ad[j];
    blocks.push_back({ad.layer_name + ".B", ad.b.data(), ad.b.size(), grads.adapters[j].db.data()});
    if (!ad.frozen_a) {
      blocks.push_back({ad.layer_name + ".A", ad.a.data(), ad.a.size(), grads.adapters[j].da.data()});
    }
  }

  Rng rng(seed);
  std::vector<GradCheckBlock> report;
  for (const auto& blk : blocks) {
    std::vector<std::size_t> coords = rng.permutation(static_cast<std::size_t>(blk.size));
    if (coords.size() > max_coords) coords.resize(max_coords);
    GradCheckBlock out{blk.name, coords.size(), 0.0};
    for (std::size_t c : coords) {
      const double saved = blk.data[c];
      blk.data[c] = saved + step;
      const double plus = forward(work, batch, &work_ad).loss;
      blk.data[c] = saved - step;
      const double minus = forward(work, batch, &work_ad).loss;
      blk.data[c] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double analytic = blk.analytic[c];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
    }
    report.push_back(out);
  }
  return report;
}

Network make_mlp(const std::vector<std::size_t>& dims, Activation activation, LossKind loss,
                 std::uint64_t seed, bool with_bias) {
  if (dims.size() < 2) throw Error(ErrorCode::kInvalidInput, "need at least input and output dims");
  Rng rng(seed);
  Network net;
  net.activation = activation;
  net.loss = loss;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    LinearLayer l;
    l.name = "fc" + std::to_string(k + 1);
    l.w = rng.gaussian(dims[k + 1], dims[k], 1.0 / std::sqrt(static_cast<double>(dims[k])));
    if (with_bias) l.b = rng.gaussian(dims[k + 1], 1, 0.1).col(0);
    net.layers.push_back(std::move(l));
  }
  return net;
}

}  // namespace tlora
