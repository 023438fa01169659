#include "steerlab/tinylmm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "steerlab/error.hpp"
#include "steerlab/linalg.hpp"
#include "steerlab/rng.hpp"

namespace steerlab::tinylmm {

namespace {

template <typename T>
struct LayerCache {
  Matrix<T> x_in;
  Matrix<T> xhat1, n1;
  std::vector<T> rstd1;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // per head, S x S
  Matrix<T> attn;                // concatenated head outputs, S x d
  Matrix<T> x_mid;
  Matrix<T> xhat2, n2;
  std::vector<T> rstd2;
  Matrix<T> pre, act;
};

template <typename T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  Matrix<T> x_final;
  Matrix<T> xhatf, nf;
  std::vector<T> rstdf;
};

template <typename T>
void layer_norm(const Matrix<T>& x, const RowVector<T>& gain, const RowVector<T>& bias, T eps,
                Matrix<T>& xhat, std::vector<T>& rstd, Matrix<T>& y) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(rows, d);
  y.resize(rows, d);
  rstd.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < rows; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(i)] = rs;
    xhat.row(i) = (x.row(i).array() - mean) * rs;
    y.row(i) = xhat.row(i).cwiseProduct(gain) + bias;
  }
}

// dx for y = LN(x); accumulates gain/bias gradients when given.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat,
                              const std::vector<T>& rstd, const RowVector<T>& gain,
                              RowVector<T>* dgain, RowVector<T>* dbias) {
  if (dgain) *dgain += dy.cwiseProduct(xhat).colwise().sum();
  if (dbias) *dbias += dy.colwise().sum();
  Matrix<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const RowVector<T> dxhat = dy.row(i).cwiseProduct(gain);
    const T m1 = dxhat.mean();
    const T m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = (dxhat.array() - m1 - xhat.row(i).array() * m2) * rstd[static_cast<std::size_t>(i)];
  }
  return dx;
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::tanh(kGeluC<T> * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T t = std::tanh(kGeluC<T> * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) +
         T(0.5) * x * (T(1) - t * t) * kGeluC<T> * (T(1) + T(3) * T(0.044715) * x * x);
}

template <typename T>
void ablate_rows(Matrix<T>& x, const Ablation& ablation) {
  const std::span<const double> a(ablation.direction);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    project_out(std::span<T>(x.row(i).data(), static_cast<std::size_t>(x.cols())), a);
  }
}

void check_inputs(const ModelConfig& c, const TokenSequence& text, Eigen::Index image_rows,
                  Eigen::Index image_cols) {
  if (image_rows != c.n_image_tokens || image_cols != c.d_model) {
    throw ArgumentError("image tokens must be " + std::to_string(c.n_image_tokens) + "x" +
                        std::to_string(c.d_model));
  }
  if (static_cast<int>(text.size()) > c.max_text()) {
    throw CapacityError("sequence of " + std::to_string(text.size() + c.n_image_tokens) +
                        " positions exceeds max_seq " + std::to_string(c.max_seq));
  }
  for (const TokenId t : text) {
    if (t < 0 || t >= c.vocab_size) {
      throw ArgumentError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

template <typename T>
Matrix<T> embed(const BasicParams<T>& p, const TokenSequence& text, const ImageTokens<T>& image) {
  const int k = p.config.n_image_tokens;
  Matrix<T> x(k + static_cast<Eigen::Index>(text.size()), p.config.d_model);
  x.topRows(k) = image;
  for (std::size_t i = 0; i < text.size(); ++i) {
    x.row(k + static_cast<Eigen::Index>(i)) =
        p.token_embedding.row(text[i]) + p.position_embedding.row(static_cast<Eigen::Index>(i));
  }
  return x;
}

template <typename T>
RowVector<T> read_position(const Matrix<T>& x, const CapturePosition& pos) {
  switch (pos.kind) {
    case CapturePosition::Kind::kMean:
      return x.colwise().mean();
    case CapturePosition::Kind::kFromEnd: {
      const Eigen::Index row = x.rows() - 1 - pos.offset;
      if (pos.offset < 0 || row < 0) throw ArgumentError("capture position outside sequence");
      return x.row(row);
    }
    case CapturePosition::Kind::kFinal:
    default:
      return x.row(x.rows() - 1);
  }
}

// Runs every block over the embedded input `x`, filling `cache`. With an
// ablation the cache holds post-projection residuals.
template <typename T>
void run_blocks(const BasicParams<T>& p, Matrix<T> x, const ForwardOptions& opts,
                ForwardCache<T>& cache, ActivationTrace<T>* trace) {
  const ModelConfig& c = p.config;
  const Eigen::Index seq = x.rows();
  const int n_heads = c.n_heads;
  const int hd = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const T eps = static_cast<T>(c.layernorm_eps);
  if (opts.ablation && opts.ablation->include_embeddings) ablate_rows(x, *opts.ablation);

  cache.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerWeights<T>& w = p.layers[l];
    LayerCache<T>& lc = cache.layers[l];
    lc.x_in = x;
    layer_norm(x, w.ln1_gain, w.ln1_bias, eps, lc.xhat1, lc.rstd1, lc.n1);
    lc.q.noalias() = lc.n1 * w.wq;
    lc.k.noalias() = lc.n1 * w.wk;
    lc.v.noalias() = lc.n1 * w.wv;
    lc.probs.resize(static_cast<std::size_t>(n_heads));
    lc.attn.resize(seq, c.d_model);
    for (int h = 0; h < n_heads; ++h) {
      Matrix<T>& s = lc.probs[static_cast<std::size_t>(h)];
      s.noalias() = lc.q.middleCols(h * hd, hd) * lc.k.middleCols(h * hd, hd).transpose();
      for (Eigen::Index i = 0; i < seq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) {
          s(i, j) *= scale;
          mx = std::max(mx, s(i, j));
        }
        T sum = T(0);
        for (Eigen::Index j = 0; j <= i; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          sum += s(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < seq; ++j) s(i, j) = T(0);
      }
      lc.attn.middleCols(h * hd, hd).noalias() = s * lc.v.middleCols(h * hd, hd);
    }
    x.noalias() += lc.attn * w.wo;
    lc.x_mid = x;
    layer_norm(x, w.ln2_gain, w.ln2_bias, eps, lc.xhat2, lc.rstd2, lc.n2);
    lc.pre.noalias() = lc.n2 * w.w_up;
    lc.pre.rowwise() += w.b_up;
    lc.act = lc.pre.unaryExpr([](T v) { return gelu(v); });
    x.noalias() += lc.act * w.w_down;
    x.rowwise() += w.b_down;
    if (opts.ablation) ablate_rows(x, *opts.ablation);
    if (!x.allFinite()) {
      throw NumericError("non-finite residual after layer " + std::to_string(l));
    }
    if (trace) {
      const int li = static_cast<int>(l);
      if (std::find(opts.capture_layers.begin(), opts.capture_layers.end(), li) !=
          opts.capture_layers.end()) {
        trace->layers.push_back(li);
        trace->hidden.push_back(read_position(x, opts.position));
        if (opts.keep_residuals) trace->residuals.push_back(x);
      }
    }
  }
  cache.x_final = std::move(x);
  layer_norm(cache.x_final, p.lnf_gain, p.lnf_bias, eps, cache.xhatf, cache.rstdf, cache.nf);
}

// Reverse pass from dlogits (seq x V). Returns d(loss)/d(embedded input).
template <typename T>
Matrix<T> run_backward(const BasicParams<T>& p, const ForwardCache<T>& cache,
                       const Matrix<T>& dlogits, BasicParams<T>* grads) {
  const ModelConfig& c = p.config;
  const int n_heads = c.n_heads;
  const int hd = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  if (grads) grads->unembedding.noalias() += cache.nf.transpose() * dlogits;
  Matrix<T> dnf = dlogits * p.unembedding.transpose();
  Matrix<T> dx = layer_norm_backward<T>(dnf, cache.xhatf, cache.rstdf, p.lnf_gain,
                                        grads ? &grads->lnf_gain : nullptr,
                                        grads ? &grads->lnf_bias : nullptr);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const LayerWeights<T>& w = p.layers[li];
    const LayerCache<T>& lc = cache.layers[li];
    LayerWeights<T>* gw = grads ? &grads->layers[li] : nullptr;

    // MLP
    if (gw) {
      gw->w_down.noalias() += lc.act.transpose() * dx;
      gw->b_down += dx.colwise().sum();
    }
    Matrix<T> dpre = dx * w.w_down.transpose();
    dpre = dpre.cwiseProduct(lc.pre.unaryExpr([](T v) { return gelu_grad(v); }));
    if (gw) {
      gw->w_up.noalias() += lc.n2.transpose() * dpre;
      gw->b_up += dpre.colwise().sum();
    }
    const Matrix<T> dn2 = dpre * w.w_up.transpose();
    dx += layer_norm_backward<T>(dn2, lc.xhat2, lc.rstd2, w.ln2_gain,
                                 gw ? &gw->ln2_gain : nullptr, gw ? &gw->ln2_bias : nullptr);

    // Attention
    if (gw) gw->wo.noalias() += lc.attn.transpose() * dx;
    const Matrix<T> dattn = dx * w.wo.transpose();
    Matrix<T> dq(dx.rows(), c.d_model), dk(dx.rows(), c.d_model), dv(dx.rows(), c.d_model);
    for (int h = 0; h < n_heads; ++h) {
      const Matrix<T>& prob = lc.probs[static_cast<std::size_t>(h)];
      const auto dout = dattn.middleCols(h * hd, hd);
      Matrix<T> dprob = dout * lc.v.middleCols(h * hd, hd).transpose();
      dv.middleCols(h * hd, hd).noalias() = prob.transpose() * dout;
      // softmax backward, row-wise
      for (Eigen::Index i = 0; i < dprob.rows(); ++i) {
        const T inner = dprob.row(i).dot(prob.row(i));
        dprob.row(i) = (prob.row(i).array() * (dprob.row(i).array() - inner) * scale).matrix();
      }
      dq.middleCols(h * hd, hd).noalias() = dprob * lc.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd).noalias() = dprob.transpose() * lc.q.middleCols(h * hd, hd);
    }
    if (gw) {
      gw->wq.noalias() += lc.n1.transpose() * dq;
      gw->wk.noalias() += lc.n1.transpose() * dk;
      gw->wv.noalias() += lc.n1.transpose() * dv;
    }
    Matrix<T> dn1 = dq * w.wq.transpose();
    dn1.noalias() += dk * w.wk.transpose();
    dn1.noalias() += dv * w.wv.transpose();
    dx += layer_norm_backward<T>(dn1, lc.xhat1, lc.rstd1, w.ln1_gain,
                                 gw ? &gw->ln1_gain : nullptr, gw ? &gw->ln1_bias : nullptr);
    if (!dx.allFinite()) {
      throw NumericError("non-finite gradient in layer " + std::to_string(li));
    }
  }
  return dx;
}

template <typename T>
ForwardCache<T> forward_cached(const BasicParams<T>& p, const TokenSequence& text,
                               const ImageTokens<T>& image, const ForwardOptions& opts,
                               ActivationTrace<T>* trace) {
  check_inputs(p.config, text, image.rows(), image.cols());
  if (!image.allFinite()) throw NumericError("non-finite image tokens");
  ForwardCache<T> cache;
  run_blocks(p, embed(p, text, image), opts, cache, trace);
  return cache;
}

}  // namespace

std::string CapturePosition::to_string() const {
  switch (kind) {
    case Kind::kMean:
      return "mean";
    case Kind::kFromEnd:
      return offset == 0 ? "final" : "final-" + std::to_string(offset);
    case Kind::kFinal:
    default:
      return "final";
  }
}

CapturePosition CapturePosition::parse(const std::string& s) {
  if (s == "final") return final_position();
  if (s == "mean") return mean();
  if (s.rfind("final-", 0) == 0) {
    try {
      const int k = std::stoi(s.substr(6));
      if (k >= 0) return from_end(k);
    } catch (const std::exception&) {
    }
  }
  throw ArgumentError("unknown capture position '" + s + "'");
}

void validate_ablation(const Ablation& ablation, int d_model) {
  if (static_cast<int>(ablation.direction.size()) != d_model) {
    throw ArgumentError("steering direction has length " +
                        std::to_string(ablation.direction.size()) + ", model expects " +
                        std::to_string(d_model));
  }
  double n2 = 0.0;
  for (double v : ablation.direction) n2 += v * v;
  if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) {
    throw ArgumentError("steering direction is not unit length");
  }
}

template <typename T>
ForwardResult<T> forward(const BasicParams<T>& params, const TokenSequence& text,
                         const ImageTokens<T>& image, const ForwardOptions& options) {
  if (options.ablation) validate_ablation(*options.ablation, params.config.d_model);
  for (int l : options.capture_layers) {
    if (l < 0 || l >= params.config.n_layers) {
      throw ArgumentError("capture layer " + std::to_string(l) + " out of range");
    }
  }
  ForwardResult<T> out;
  const ForwardCache<T> cache = forward_cached(params, text, image, options, &out.trace);
  out.logits = cache.nf.row(cache.nf.rows() - 1) * params.unembedding;
  if (options.all_logits) out.all_logits = cache.nf * params.unembedding;
  if (!out.logits.allFinite()) throw NumericError("non-finite logits");
  return out;
}

template <typename T>
ImageGradient<T> backward_wrt_image_tokens(const BasicParams<T>& params,
                                           const TokenSequence& text,
                                           const ImageTokens<T>& image,
                                           const LogitLoss<T>& loss) {
  const ForwardCache<T> cache = forward_cached<T>(params, text, image, ForwardOptions{}, nullptr);
  ImageGradient<T> out;
  const Eigen::Index last = cache.nf.rows() - 1;
  out.logits = cache.nf.row(last) * params.unembedding;
  RowVector<T> dz = RowVector<T>::Zero(params.config.vocab_size);
  out.loss = loss(out.logits, dz);
  if (!std::isfinite(static_cast<double>(out.loss)) || !dz.allFinite()) {
    throw NumericError("non-finite loss or loss gradient at the logits");
  }
  Matrix<T> dlogits = Matrix<T>::Zero(cache.nf.rows(), params.config.vocab_size);
  dlogits.row(last) = dz;
  const Matrix<T> dx = run_backward<T>(params, cache, dlogits, nullptr);
  out.grad = dx.topRows(params.config.n_image_tokens);
  return out;
}

template <typename T>
T sequence_loss(const BasicParams<T>& params, const TokenSequence& text,
                const ImageTokens<T>& image, BasicParams<T>* grads) {
  if (text.size() < 2) throw ArgumentError("training sequence needs at least two tokens");
  const ForwardCache<T> cache = forward_cached<T>(params, text, image, ForwardOptions{}, nullptr);
  const int k = params.config.n_image_tokens;
  const Eigen::Index n_pred = static_cast<Eigen::Index>(text.size()) - 1;
  const Matrix<T> logits = cache.nf.middleRows(k, n_pred) * params.unembedding;
  Matrix<T> dlogits = Matrix<T>::Zero(cache.nf.rows(), params.config.vocab_size);
  T total = T(0);
  const T inv = T(1) / static_cast<T>(n_pred);
  for (Eigen::Index i = 0; i < n_pred; ++i) {
    const T mx = logits.row(i).maxCoeff();
    const RowVector<T> e = (logits.row(i).array() - mx).exp().matrix();
    const T sum = e.sum();
    const TokenId target = text[static_cast<std::size_t>(i) + 1];
    total += -(logits(i, target) - mx - std::log(sum));
    dlogits.row(k + i) = e * (inv / sum);
    dlogits(k + i, target) -= inv;
  }
  const T loss = total * inv;
  if (!std::isfinite(static_cast<double>(loss))) throw NumericError("training loss is not finite");
  if (grads) {
    const Matrix<T> dx = run_backward<T>(params, cache, dlogits, grads);
    for (std::size_t i = 0; i < text.size(); ++i) {
      const Eigen::Index row = k + static_cast<Eigen::Index>(i);
      grads->token_embedding.row(text[i]) += dx.row(row);
      grads->position_embedding.row(static_cast<Eigen::Index>(i)) += dx.row(row);
    }
  }
  return loss;
}

TokenId argmax(std::span<const float> logits) {
  TokenId best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(i);
  }
  return best;
}

TokenSequence generate(const ModelParams& params, const TokenSequence& text,
                       const ImageTokens<float>& image, const Ablation* ablation,
                       const DecodeOptions& decode, int max_new) {
  TokenSequence out;
  if (max_new <= 0) return out;
  if (static_cast<int>(text.size()) + max_new > params.config.max_text()) {
    throw CapacityError("prompt plus " + std::to_string(max_new) +
                        " new tokens exceeds max_seq " + std::to_string(params.config.max_seq));
  }
  if (ablation) validate_ablation(*ablation, params.config.d_model);
  CounterRng rng(decode.seed, Stream::kSampling);
  ForwardOptions opts;
  opts.ablation = ablation;
  TokenSequence context = text;
  for (int step = 0; step < max_new; ++step) {
    const ForwardResult<float> fr = forward(params, context, image, opts);
    TokenId next = 0;
    if (decode.temperature <= 0.0) {
      next = argmax(std::span<const float>(fr.logits.data(), static_cast<std::size_t>(fr.logits.size())));
    } else {
      const double inv_t = 1.0 / decode.temperature;
      const double mx = static_cast<double>(fr.logits.maxCoeff());
      std::vector<double> w(static_cast<std::size_t>(fr.logits.size()));
      double sum = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp((static_cast<double>(fr.logits(static_cast<Eigen::Index>(i))) - mx) * inv_t);
        sum += w[i];
      }
      const double r = rng.uniform() * sum;
      double acc = 0.0;
      next = static_cast<TokenId>(w.size() - 1);
      for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (r < acc) {
          next = static_cast<TokenId>(i);
          break;
        }
      }
    }
    if (decode.stop_token && next == *decode.stop_token) break;
    out.push_back(next);
    context.push_back(next);
  }
  return out;
}

double perplexity(const ModelParams& params, std::span<const Example> corpus,
                  const Ablation* ablation) {
  if (corpus.empty()) throw ArgumentError("perplexity needs a non-empty corpus");
  ForwardOptions opts;
  opts.all_logits = true;
  opts.ablation = ablation;
  const int k = params.config.n_image_tokens;
  double nll = 0.0;
  std::size_t count = 0;
  for (const Example& ex : corpus) {
    if (ex.text.size() < 2) continue;
    const ForwardResult<float> fr = forward(params, ex.text, ex.image, opts);
    for (std::size_t i = 0; i + 1 < ex.text.size(); ++i) {
      const auto row = fr.all_logits.row(k + static_cast<Eigen::Index>(i)).cast<double>();
      const double mx = row.maxCoeff();
      const double lse = mx + std::log((row.array() - mx).exp().sum());
      nll += lse - row(ex.text[i + 1]);
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("perplexity corpus has no next-token predictions");
  return std::exp(nll / static_cast<double>(count));
}

template ForwardResult<float> forward(const BasicParams<float>&, const TokenSequence&,
                                      const ImageTokens<float>&, const ForwardOptions&);
template ForwardResult<double> forward(const BasicParams<double>&, const TokenSequence&,
                                       const ImageTokens<double>&, const ForwardOptions&);
template ImageGradient<float> backward_wrt_image_tokens(const BasicParams<float>&,
                                                        const TokenSequence&,
                                                        const ImageTokens<float>&,
                                                        const LogitLoss<float>&);
template ImageGradient<double> backward_wrt_image_tokens(const BasicParams<double>&,
                                                         const TokenSequence&,
                                                         const ImageTokens<double>&,
                                                         const LogitLoss<double>&);
template float sequence_loss(const BasicParams<float>&, const TokenSequence&,
                             const ImageTokens<float>&, BasicParams<float>*);
template double sequence_loss(const BasicParams<double>&, const TokenSequence&,
                              const ImageTokens<double>&, BasicParams<double>*);

}  // namespace steerlab::tinylmm
