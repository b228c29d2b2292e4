// SPDX-License-Identifier: Apache-2.0

// Building blocks of the caption decoder. Every layer exposes a forward pass
// that returns the activations needed later, and a backward pass that
// accumulates parameter gradients and returns the input gradient. Rows are
// sequence positions, columns are features.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aacap/random.hpp"

namespace aacap::nn {

using Real = double;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;

enum class ParamKind { kWeight, kBias, kNorm, kEmbedding };

struct Param {
  Matrix value;
  Matrix grad;
  ParamKind kind = ParamKind::kWeight;

  Param() = default;
  Param(Eigen::Index rows, Eigen::Index cols, ParamKind k)
      : value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)), kind(k) {}

  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

struct NamedParam {
  std::string name;
  Param* param;
};

void fill_uniform(Matrix& m, Real bound, Rng& rng);

// Inverted dropout: kept units are scaled by 1/(1-p). An inactive mask is the
// identity.
struct DropoutMask {
  Matrix scale;
  bool active = false;

  static DropoutMask sample(Eigen::Index rows, Eigen::Index cols, Real p, Rng* rng);
  Matrix apply(const Matrix& x) const { return active ? Matrix(x.cwiseProduct(scale)) : x; }
};

struct Linear {
  Param weight;  // in x out
  Param bias;    // 1 x out

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out);
  void init(Rng& rng);
  Eigen::Index in_features() const { return weight.value.rows(); }
  Eigen::Index out_features() const { return weight.value.cols(); }

  Matrix forward(const Matrix& x) const;
  Matrix backward(const Matrix& x, const Matrix& dy);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

struct LayerNorm {
  static constexpr Real kEps = 1e-5;

  Param gain;  // 1 x d
  Param bias;  // 1 x d

  struct Cache {
    Matrix normalized;
    Eigen::VectorXd inv_std;
  };

  LayerNorm() = default;
  explicit LayerNorm(Eigen::Index d);

  Matrix forward(const Matrix& x, Cache& cache) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int n_heads = 1;

  struct Cache {
    Matrix query_in, kv_in;
    Matrix queries, keys, values;
    std::vector<Matrix> probs;      // per head, after softmax
    std::vector<DropoutMask> drop;  // per head, on the attention weights
    Matrix context;                 // concatenated head outputs
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(Eigen::Index d_model, int n_heads);
  void init(Rng& rng);

  Matrix forward(const Matrix& query_in, const Matrix& kv_in, bool causal, Real dropout, Rng* rng,
                 Cache& cache) const;
  // Returns (d query_in, d kv_in).
  std::pair<Matrix, Matrix> backward(const Cache& cache, const Matrix& dy);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

Real gelu(Real x);
Real gelu_grad(Real x);

struct FeedForward {
  Linear in, out;

  struct Cache {
    Matrix x, pre_act, hidden;
    DropoutMask drop;
  };

  FeedForward() = default;
  FeedForward(Eigen::Index d_model, Eigen::Index d_ff);
  void init(Rng& rng);

  Matrix forward(const Matrix& x, Real dropout, Rng* rng, Cache& cache) const;
  Matrix backward(const Cache& cache, const Matrix& dy);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

// Post-norm transformer decoder block: masked self-attention, cross-attention
// over the audio memory, then a GELU feed-forward; each sub-block is wrapped
// as LayerNorm(x + Dropout(sublayer(x))).
struct DecoderLayer {
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ff;
  LayerNorm norm1, norm2, norm3;

  struct Cache {
    MultiHeadAttention::Cache self_attn, cross_attn;
    FeedForward::Cache ff;
    LayerNorm::Cache norm1, norm2, norm3;
    DropoutMask drop1, drop2, drop3;
  };

  DecoderLayer() = default;
  DecoderLayer(Eigen::Index d_model, int n_heads, Eigen::Index d_ff);
  void init(Rng& rng);

  Matrix forward(const Matrix& x, const Matrix& memory, Real dropout, Rng* rng, Cache& cache) const;
  // Returns (d x, d memory).
  std::pair<Matrix, Matrix> backward(const Cache& cache, const Matrix& dy);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

// Fixed sinusoidal table, rows = positions.
Matrix sinusoidal_positions(Eigen::Index max_len, Eigen::Index d_model);

// Row-wise softmax / log-softmax with -inf support.
Matrix softmax_rows(const Matrix& x);
Matrix log_softmax_rows(const Matrix& x);

}  // namespace aacap::nn
