// SPDX-License-Identifier: Apache-2.0

#include "aacap/nn.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace aacap::nn {

void fill_uniform(Matrix& m, Real bound, Rng& rng) {
  // Row-major fill so the draw order does not depend on Eigen's storage.
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
  }
}

DropoutMask DropoutMask::sample(Eigen::Index rows, Eigen::Index cols, Real p, Rng* rng) {
  DropoutMask mask;
  if (rng == nullptr || p <= 0.0) return mask;
  mask.active = true;
  mask.scale.resize(rows, cols);
  const Real keep = 1.0 / (1.0 - p);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) mask.scale(r, c) = rng->bernoulli(p) ? 0.0 : keep;
  }
  return mask;
}

// ---------------------------------------------------------------------------

Linear::Linear(Eigen::Index in, Eigen::Index out)
    : weight(in, out, ParamKind::kWeight), bias(1, out, ParamKind::kBias) {}

void Linear::init(Rng& rng) {
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(in_features()));
  fill_uniform(weight.value, bound, rng);
  fill_uniform(bias.value, bound, rng);
}

Matrix Linear::forward(const Matrix& x) const {
  Matrix y = x * weight.value;
  y.rowwise() += bias.value.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
  weight.grad.noalias() += x.transpose() * dy;
  bias.grad.row(0) += dy.colwise().sum();
  return dy * weight.value.transpose();
}

void Linear::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(Eigen::Index d) : gain(1, d, ParamKind::kNorm), bias(1, d, ParamKind::kNorm) {
  gain.value.setOnes();
}

Matrix LayerNorm::forward(const Matrix& x, Cache& cache) const {
  const Eigen::Index n = x.rows(), d = x.cols();
  cache.normalized.resize(n, d);
  cache.inv_std.resize(n);
  Matrix y(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Real mean = x.row(r).mean();
    const Real var = (x.row(r).array() - mean).square().mean();
    const Real inv = 1.0 / std::sqrt(var + kEps);
    cache.inv_std(r) = inv;
    cache.normalized.row(r) = (x.row(r).array() - mean) * inv;
    y.row(r) = cache.normalized.row(r).cwiseProduct(gain.value.row(0)) + bias.value.row(0);
  }
  return y;
}

Matrix LayerNorm::backward(const Cache& cache, const Matrix& dy) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  gain.grad.row(0) += dy.cwiseProduct(cache.normalized).colwise().sum();
  bias.grad.row(0) += dy.colwise().sum();
  Matrix dx(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gain.value.row(0));
    const Real mean_dxhat = dxhat.mean();
    const Real mean_dxhat_xhat = dxhat.cwiseProduct(cache.normalized.row(r)).mean();
    dx.row(r) = cache.inv_std(r) *
                (dxhat.array() - mean_dxhat - cache.normalized.row(r).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

void LayerNorm::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", &gain});
  out.push_back({prefix + ".bias", &bias});
}

// ---------------------------------------------------------------------------

Matrix softmax_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real m = x.row(r).maxCoeff();
    if (!std::isfinite(m)) {
      y.row(r).setZero();
      continue;
    }
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

Matrix log_softmax_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real m = x.row(r).maxCoeff();
    const Real lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  return y;
}

MultiHeadAttention::MultiHeadAttention(Eigen::Index d_model, int heads)
    : q(d_model, d_model), k(d_model, d_model), v(d_model, d_model), o(d_model, d_model), n_heads(heads) {}

void MultiHeadAttention::init(Rng& rng) {
  q.init(rng);
  k.init(rng);
  v.init(rng);
  o.init(rng);
}

Matrix MultiHeadAttention::forward(const Matrix& query_in, const Matrix& kv_in, bool causal, Real dropout, Rng* rng,
                                   Cache& cache) const {
  const Eigen::Index d = q.out_features();
  const Eigen::Index dh = d / n_heads;
  const Eigen::Index tq = query_in.rows(), tk = kv_in.rows();
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
  cache.query_in = query_in;
  cache.kv_in = kv_in;
  cache.queries = q.forward(query_in);
  cache.keys = k.forward(kv_in);
  cache.values = v.forward(kv_in);
  cache.probs.assign(static_cast<std::size_t>(n_heads), Matrix());
  cache.drop.assign(static_cast<std::size_t>(n_heads), DropoutMask());
  cache.context.resize(tq, d);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = cache.queries.middleCols(h * dh, dh);
    const auto kh = cache.keys.middleCols(h * dh, dh);
    const auto vh = cache.values.middleCols(h * dh, dh);
    Matrix scores = (qh * kh.transpose()) * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < tq; ++i) {
        for (Eigen::Index j = i + 1; j < tk; ++j) scores(i, j) = -std::numeric_limits<Real>::infinity();
      }
    }
    auto& probs = cache.probs[static_cast<std::size_t>(h)];
    probs = softmax_rows(scores);
    auto& drop = cache.drop[static_cast<std::size_t>(h)];
    drop = DropoutMask::sample(tq, tk, dropout, rng);
    cache.context.middleCols(h * dh, dh) = drop.apply(probs) * vh;
  }
  return o.forward(cache.context);
}

std::pair<Matrix, Matrix> MultiHeadAttention::backward(const Cache& cache, const Matrix& dy) {
  const Eigen::Index d = q.out_features();
  const Eigen::Index dh = d / n_heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
  const Matrix dcontext = o.backward(cache.context, dy);
  Matrix dq(cache.queries.rows(), d), dk(cache.keys.rows(), d), dv(cache.values.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    const auto& probs = cache.probs[static_cast<std::size_t>(h)];
    const auto& drop = cache.drop[static_cast<std::size_t>(h)];
    const auto qh = cache.queries.middleCols(h * dh, dh);
    const auto kh = cache.keys.middleCols(h * dh, dh);
    const auto vh = cache.values.middleCols(h * dh, dh);
    const Matrix dctx_h = dcontext.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh) = drop.apply(probs).transpose() * dctx_h;
    const Matrix dprobs = drop.apply(dctx_h * vh.transpose());
    // softmax Jacobian-vector product, row by row
    const Eigen::VectorXd row_dot = dprobs.cwiseProduct(probs).rowwise().sum();
    Matrix dscores = probs.cwiseProduct(dprobs.colwise() - row_dot) * scale;
    dq.middleCols(h * dh, dh) = dscores * kh;
    dk.middleCols(h * dh, dh) = dscores.transpose() * qh;
  }
  Matrix dquery = q.backward(cache.query_in, dq);
  Matrix dkv = k.backward(cache.kv_in, dk);
  dkv += v.backward(cache.kv_in, dv);
  return {std::move(dquery), std::move(dkv)};
}

void MultiHeadAttention::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  q.collect(prefix + ".q_proj", out);
  k.collect(prefix + ".k_proj", out);
  v.collect(prefix + ".v_proj", out);
  o.collect(prefix + ".out_proj", out);
}

// ---------------------------------------------------------------------------

Real gelu(Real x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

Real gelu_grad(Real x) {
  const Real cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const Real pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

FeedForward::FeedForward(Eigen::Index d_model, Eigen::Index d_ff) : in(d_model, d_ff), out(d_ff, d_model) {}

void FeedForward::init(Rng& rng) {
  in.init(rng);
  out.init(rng);
}

Matrix FeedForward::forward(const Matrix& x, Real dropout, Rng* rng, Cache& cache) const {
  cache.x = x;
  cache.pre_act = in.forward(x);
  cache.drop = DropoutMask::sample(cache.pre_act.rows(), cache.pre_act.cols(), dropout, rng);
  cache.hidden = cache.drop.apply(cache.pre_act.unaryExpr([](Real z) { return gelu(z); }));
  return out.forward(cache.hidden);
}

Matrix FeedForward::backward(const Cache& cache, const Matrix& dy) {
  const Matrix dhidden = cache.drop.apply(out.backward(cache.hidden, dy));
  const Matrix dpre = dhidden.cwiseProduct(cache.pre_act.unaryExpr([](Real z) { return gelu_grad(z); }));
  return in.backward(cache.x, dpre);
}

void FeedForward::collect(const std::string& prefix, std::vector<NamedParam>& out_params) {
  in.collect(prefix + ".linear1", out_params);
  out.collect(prefix + ".linear2", out_params);
}

// ---------------------------------------------------------------------------

DecoderLayer::DecoderLayer(Eigen::Index d_model, int n_heads, Eigen::Index d_ff)
    : self_attn(d_model, n_heads),
      cross_attn(d_model, n_heads),
      ff(d_model, d_ff),
      norm1(d_model),
      norm2(d_model),
      norm3(d_model) {}

void DecoderLayer::init(Rng& rng) {
  self_attn.init(rng);
  cross_attn.init(rng);
  ff.init(rng);
}

Matrix DecoderLayer::forward(const Matrix& x, const Matrix& memory, Real dropout, Rng* rng, Cache& cache) const {
  Matrix a = self_attn.forward(x, x, /*causal=*/true, dropout, rng, cache.self_attn);
  cache.drop1 = DropoutMask::sample(a.rows(), a.cols(), dropout, rng);
  const Matrix h1 = norm1.forward(x + cache.drop1.apply(a), cache.norm1);

  Matrix c = cross_attn.forward(h1, memory, /*causal=*/false, dropout, rng, cache.cross_attn);
  cache.drop2 = DropoutMask::sample(c.rows(), c.cols(), dropout, rng);
  const Matrix h2 = norm2.forward(h1 + cache.drop2.apply(c), cache.norm2);

  Matrix f = ff.forward(h2, dropout, rng, cache.ff);
  cache.drop3 = DropoutMask::sample(f.rows(), f.cols(), dropout, rng);
  return norm3.forward(h2 + cache.drop3.apply(f), cache.norm3);
}

std::pair<Matrix, Matrix> DecoderLayer::backward(const Cache& cache, const Matrix& dy) {
  const Matrix dsum3 = norm3.backward(cache.norm3, dy);
  Matrix dh2 = dsum3 + ff.backward(cache.ff, cache.drop3.apply(dsum3));

  const Matrix dsum2 = norm2.backward(cache.norm2, dh2);
  auto [dh1_cross, dmemory] = cross_attn.backward(cache.cross_attn, cache.drop2.apply(dsum2));
  Matrix dh1 = dsum2 + dh1_cross;

  const Matrix dsum1 = norm1.backward(cache.norm1, dh1);
  auto [dq, dkv] = self_attn.backward(cache.self_attn, cache.drop1.apply(dsum1));
  Matrix dx = dsum1 + dq + dkv;
  return {std::move(dx), std::move(dmemory)};
}

void DecoderLayer::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  self_attn.collect(prefix + ".self_attn", out);
  cross_attn.collect(prefix + ".cross_attn", out);
  ff.collect(prefix + ".ff", out);
  norm1.collect(prefix + ".norm1", out);
  norm2.collect(prefix + ".norm2", out);
  norm3.collect(prefix + ".norm3", out);
}

Matrix sinusoidal_positions(Eigen::Index max_len, Eigen::Index d_model) {
  Matrix pe(max_len, d_model);
  for (Eigen::Index pos = 0; pos < max_len; ++pos) {
    for (Eigen::Index i = 0; i < d_model; ++i) {
      const Real exponent = static_cast<Real>(2 * (i / 2)) / static_cast<Real>(d_model);
      const Real angle = static_cast<Real>(pos) / std::pow(10000.0, exponent);
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

}  // namespace aacap::nn
