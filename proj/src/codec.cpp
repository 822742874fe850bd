#include "lmap/codec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace lmap {

namespace {

void check_shape(const CodecShape& s) {
  if (s.dims.n < 1 || s.dims.l < 1 || s.dims.L < 1) throw InputError("codec: bad dims");
  if (s.codebook_size < 2) throw InputError("codec: codebook size must be >= 2");
  if (s.latent_dim < 1 || s.hidden < 1) throw InputError("codec: bad latent/hidden width");
}

struct EncCache {
  VecX u1, u2, v1, v2, z1, z2;
};

struct DecCache {
  VecX g1, g2, y1, y2, o1, o2;
};

VecX project_in(const CodecParams& p, const VecX& x, bool masked) {
  auto W = p.params.mat(p.enc_in_w);
  auto b = p.params.vec(p.enc_in_b);
  if (!masked) return W * x + b;
  const Eigen::Index w = x.size();
  return W.rightCols(w - 1) * x.tail(w - 1) + p.params.vec(p.mask) + b;
}

EncCache enc_forward(const CodecParams& p, const VecX& x1, const VecX& x2, bool masked) {
  auto A = p.params.mat(p.enc_self);
  auto C = p.params.mat(p.enc_cross);
  auto c = p.params.vec(p.enc_mix_b);
  auto E = p.params.mat(p.enc_out_w);
  auto eb = p.params.vec(p.enc_out_b);
  EncCache k;
  k.u1 = project_in(p, x1, masked);
  k.u2 = project_in(p, x2, masked);
  k.v1 = (A * k.u1 + c).array().tanh();
  k.v2 = (A * k.u2 + C * k.u1 + c).array().tanh();
  k.z1 = E * k.v1 + eb;
  k.z2 = E * k.v2 + eb;
  return k;
}

void enc_backward(const CodecParams& p, const EncCache& k, const VecX& x1, const VecX& x2,
                  bool masked, const VecX& dz1, const VecX& dz2, ParamSet& g) {
  auto A = p.params.mat(p.enc_self);
  auto C = p.params.mat(p.enc_cross);
  auto E = p.params.mat(p.enc_out_w);
  g.mat(p.enc_out_w).noalias() += dz1 * k.v1.transpose() + dz2 * k.v2.transpose();
  g.vec(p.enc_out_b) += dz1 + dz2;
  const VecX da1 = ((E.transpose() * dz1).array() * (1.0 - k.v1.array().square())).matrix();
  const VecX da2 = ((E.transpose() * dz2).array() * (1.0 - k.v2.array().square())).matrix();
  g.mat(p.enc_self).noalias() += da1 * k.u1.transpose() + da2 * k.u2.transpose();
  g.mat(p.enc_cross).noalias() += da2 * k.u1.transpose();
  g.vec(p.enc_mix_b) += da1 + da2;
  const VecX du1 = A.transpose() * da1 + C.transpose() * da2;
  const VecX du2 = A.transpose() * da2;
  g.vec(p.enc_in_b) += du1 + du2;
  auto dW = g.mat(p.enc_in_w);
  if (masked) {
    const Eigen::Index w = x1.size();
    dW.rightCols(w - 1).noalias() += du1 * x1.tail(w - 1).transpose() + du2 * x2.tail(w - 1).transpose();
    g.vec(p.mask) += du1 + du2;
  } else {
    dW.noalias() += du1 * x1.transpose() + du2 * x2.transpose();
  }
}

DecCache dec_forward(const CodecParams& p, const VecX& s, const VecX& q1, const VecX& q2) {
  auto F = p.params.mat(p.dec_code_w);
  auto G = p.params.mat(p.dec_state_w);
  auto f = p.params.vec(p.dec_in_b);
  auto P = p.params.mat(p.dec_self);
  auto Q = p.params.mat(p.dec_cross);
  auto pb = p.params.vec(p.dec_mix_b);
  auto O = p.params.mat(p.dec_out_w);
  auto ob = p.params.vec(p.dec_out_b);
  DecCache k;
  const VecX gs = G * s + f;
  k.g1 = F * q1 + gs;
  k.g2 = F * q2 + gs;
  k.y1 = (P * k.g1 + pb).array().tanh();
  k.y2 = (P * k.g2 + Q * k.g1 + pb).array().tanh();
  k.o1 = O * k.y1 + ob;
  k.o2 = O * k.y2 + ob;
  return k;
}

// Returns d/dq for both positions.
std::pair<VecX, VecX> dec_backward(const CodecParams& p, const DecCache& k, const VecX& s,
                                   const VecX& q1, const VecX& q2, const VecX& do1,
                                   const VecX& do2, ParamSet& g) {
  auto F = p.params.mat(p.dec_code_w);
  auto P = p.params.mat(p.dec_self);
  auto Q = p.params.mat(p.dec_cross);
  auto O = p.params.mat(p.dec_out_w);
  g.mat(p.dec_out_w).noalias() += do1 * k.y1.transpose() + do2 * k.y2.transpose();
  g.vec(p.dec_out_b) += do1 + do2;
  const VecX db1 = ((O.transpose() * do1).array() * (1.0 - k.y1.array().square())).matrix();
  const VecX db2 = ((O.transpose() * do2).array() * (1.0 - k.y2.array().square())).matrix();
  g.mat(p.dec_self).noalias() += db1 * k.g1.transpose() + db2 * k.g2.transpose();
  g.mat(p.dec_cross).noalias() += db2 * k.g1.transpose();
  g.vec(p.dec_mix_b) += db1 + db2;
  const VecX dg1 = P.transpose() * db1 + Q.transpose() * db2;
  const VecX dg2 = P.transpose() * db2;
  g.mat(p.dec_code_w).noalias() += dg1 * q1.transpose() + dg2 * q2.transpose();
  g.mat(p.dec_state_w).noalias() += (dg1 + dg2) * s.transpose();
  g.vec(p.dec_in_b) += dg1 + dg2;
  return {F.transpose() * dg1, F.transpose() * dg2};
}

void check_chunk(const TokenChunk& c, const CodecShape& s) {
  const auto n = static_cast<std::size_t>(s.dims.n);
  const auto m = static_cast<std::size_t>(s.dims.macro_width());
  for (const MacroToken* t : {&c.first, &c.second}) {
    if (t->state.size() != n || t->macro.size() != m) {
      throw InputError("chunk token has state width " + std::to_string(t->state.size()) +
                       " and macro width " + std::to_string(t->macro.size()) + ", codec expects " +
                       std::to_string(n) + " and " + std::to_string(m));
    }
  }
}

VecX sign_of(const VecX& v) {
  return v.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

}  // namespace

CodecParams init_codec(const CodecShape& shape, double beta, const NormStats& norm, uint64_t seed) {
  check_shape(shape);
  if (!(beta >= 0.0)) throw InputError("codec: beta must be >= 0");
  const int w = shape.token_width();
  const int h = shape.hidden;
  const int d = shape.latent_dim;
  const int n = shape.dims.n;
  CodecParams p;
  p.shape = shape;
  p.beta = beta;
  p.norm = norm;
  auto& ps = p.params;
  p.enc_in_w = ps.add("enc_in_w", h, w);
  p.enc_in_b = ps.add("enc_in_b", h, 1);
  p.mask = ps.add("mask", h, 1);
  p.enc_self = ps.add("enc_self", h, h);
  p.enc_cross = ps.add("enc_cross", h, h);
  p.enc_mix_b = ps.add("enc_mix_b", h, 1);
  p.enc_out_w = ps.add("enc_out_w", d, h);
  p.enc_out_b = ps.add("enc_out_b", d, 1);
  p.dec_code_w = ps.add("dec_code_w", h, d);
  p.dec_state_w = ps.add("dec_state_w", h, n);
  p.dec_in_b = ps.add("dec_in_b", h, 1);
  p.dec_self = ps.add("dec_self", h, h);
  p.dec_cross = ps.add("dec_cross", h, h);
  p.dec_mix_b = ps.add("dec_mix_b", h, 1);
  p.dec_out_w = ps.add("dec_out_w", w, h);
  p.dec_out_b = ps.add("dec_out_b", w, 1);
  p.codebook = ps.add("codebook", shape.codebook_size, d);

  Rng rng(seed, 0x636f646563ULL);
  auto fan = [](int in) { return 1.0 / std::sqrt(static_cast<double>(in)); };
  ps.fill_normal(p.enc_in_w, rng, fan(w));
  ps.fill_normal(p.mask, rng, 0.1);
  ps.fill_normal(p.enc_self, rng, fan(h));
  ps.fill_normal(p.enc_cross, rng, 0.5 * fan(h));
  ps.fill_normal(p.enc_out_w, rng, fan(h));
  ps.fill_normal(p.dec_code_w, rng, fan(d + n));
  ps.fill_normal(p.dec_state_w, rng, fan(d + n));
  ps.fill_normal(p.dec_self, rng, fan(h));
  ps.fill_normal(p.dec_cross, rng, 0.5 * fan(h));
  ps.fill_normal(p.dec_out_w, rng, fan(h));
  ps.fill_normal(p.codebook, rng, 0.5);
  return p;
}

NormalizedChunk normalize_chunk(const TokenChunk& chunk, const NormStats& norm) {
  NormalizedChunk out;
  out.x1 = to_eigen(norm.token_vector(chunk.first));
  out.x2 = to_eigen(norm.token_vector(chunk.second));
  out.state = to_eigen(norm.apply_state(chunk.first.state));
  return out;
}

std::vector<NormalizedChunk> normalize_chunks(std::span<const TokenChunk> chunks,
                                              const NormStats& norm) {
  std::vector<NormalizedChunk> out;
  out.reserve(chunks.size());
  for (const auto& c : chunks) out.push_back(normalize_chunk(c, norm));
  return out;
}

EncodedPair encode_normalized(const VecX& x1, const VecX& x2, bool masked, const CodecParams& p) {
  const Eigen::Index w = p.shape.token_width();
  if (x1.size() != w || x2.size() != w) throw InputError("encode: token width mismatch");
  EncCache k = enc_forward(p, x1, x2, masked);
  return {std::move(k.z1), std::move(k.z2)};
}

EncodedPair encode(const TokenChunk& chunk, bool masked, const CodecParams& p) {
  check_chunk(chunk, p.shape);
  NormalizedChunk nc = normalize_chunk(chunk, p.norm);
  return encode_normalized(nc.x1, nc.x2, masked, p);
}

Quantized quantize(const VecX& embedding, const ConstMatMap& codebook) {
  if (embedding.size() != codebook.cols()) throw InputError("quantize: width mismatch");
  Quantized q;
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < codebook.rows(); ++k) {
    const double d2 = (codebook.row(k).transpose() - embedding).squaredNorm();
    if (d2 < best) {
      best = d2;
      q.index = static_cast<int>(k);
    }
  }
  q.vector = codebook.row(q.index).transpose();
  q.distance = std::sqrt(best);
  return q;
}

FirstDecode decode_first(const VecX& state_norm, int code, const CodecParams& p) {
  if (code < 0 || code >= p.shape.codebook_size) throw InputError("decode: code out of range");
  if (state_norm.size() != p.shape.dims.n) throw InputError("decode: state width mismatch");
  auto F = p.params.mat(p.dec_code_w);
  auto G = p.params.mat(p.dec_state_w);
  auto P = p.params.mat(p.dec_self);
  auto O = p.params.mat(p.dec_out_w);
  FirstDecode out;
  out.fused = F * p.codebook_mat().row(code).transpose() + G * state_norm + p.params.vec(p.dec_in_b);
  const VecX y = (P * out.fused + p.params.vec(p.dec_mix_b)).array().tanh();
  out.token = O * y + p.params.vec(p.dec_out_b);
  return out;
}

VecX decode_second(const VecX& state_norm, const FirstDecode& first, int code, const CodecParams& p) {
  if (code < 0 || code >= p.shape.codebook_size) throw InputError("decode: code out of range");
  auto F = p.params.mat(p.dec_code_w);
  auto G = p.params.mat(p.dec_state_w);
  auto P = p.params.mat(p.dec_self);
  auto Q = p.params.mat(p.dec_cross);
  auto O = p.params.mat(p.dec_out_w);
  const VecX g2 = F * p.codebook_mat().row(code).transpose() + G * state_norm + p.params.vec(p.dec_in_b);
  const VecX y = (P * g2 + Q * first.fused + p.params.vec(p.dec_mix_b)).array().tanh();
  return O * y + p.params.vec(p.dec_out_b);
}

DecodedPair decode_normalized(const VecX& state_norm, const VecX& q1, const VecX& q2,
                              const CodecParams& p) {
  const Eigen::Index d = p.shape.latent_dim;
  if (q1.size() != d || q2.size() != d) throw InputError("decode: code width mismatch");
  if (state_norm.size() != p.shape.dims.n) throw InputError("decode: state width mismatch");
  DecCache k = dec_forward(p, state_norm, q1, q2);
  return {std::move(k.o1), std::move(k.o2)};
}

Vec macro_from_token(const VecX& token, const CodecParams& p) {
  const int n = p.shape.dims.n;
  const int m = p.shape.dims.macro_width();
  Vec raw = p.norm.invert_macro(std::span<const double>(token.data() + 1 + n, m));
  for (double& v : raw) v = std::clamp(v, -1.0, 1.0);
  return raw;
}

std::pair<MacroToken, MacroToken> decode(std::span<const double> state, int code1, int code2,
                                         const CodecParams& p) {
  const int n = p.shape.dims.n;
  if (static_cast<int>(state.size()) != n) throw InputError("decode: state width mismatch");
  const VecX s = to_eigen(p.norm.apply_state(state));
  const FirstDecode first = decode_first(s, code1, p);
  const VecX second = decode_second(s, first, code2, p);
  auto to_token = [&](const VecX& x) {
    MacroToken t;
    t.rtg = p.norm.invert_rtg(x[0]);
    t.state = p.norm.invert_state(std::span<const double>(x.data() + 1, n));
    t.macro = macro_from_token(x, p);
    return t;
  };
  return {to_token(first.token), to_token(second)};
}

std::pair<int, int> chunk_codes(const TokenChunk& chunk, const CodecParams& p, bool masked) {
  EncodedPair z = encode(chunk, masked, p);
  const auto cb = p.codebook_mat();
  return {quantize(z.first, cb).index, quantize(z.second, cb).index};
}

LossResult codec_loss(std::span<const NormalizedChunk> batch, const CodecParams& p,
                      const LossOptions& opts, const FrozenContext* frozen, bool want_grad) {
  if (batch.empty()) throw InputError("codec_loss: empty batch");
  const std::size_t B = batch.size();
  if (frozen && frozen->codes.size() != 2 * B) throw InputError("codec_loss: frozen context size");
  const Eigen::Index w = p.shape.token_width();
  const double scale = 1.0 / static_cast<double>(2 * B);
  const bool align = opts.masked && opts.alignment;
  const auto cb = p.codebook_mat();

  LossResult res;
  if (want_grad) res.grad = p.params.zeros_like();
  res.codes.resize(2 * B);
  res.quant_embed.resize(2 * B);
  double rec_sum = 0.0, cb_sum = 0.0, commit_sum = 0.0, align_sum = 0.0;

  for (std::size_t b = 0; b < B; ++b) {
    const NormalizedChunk& ch = batch[b];
    if (ch.x1.size() != w || ch.x2.size() != w) throw InputError("codec_loss: token width mismatch");
    const EncCache qk = enc_forward(p, ch.x1, ch.x2, opts.masked);
    EncCache fk;
    if (opts.masked) fk = enc_forward(p, ch.x1, ch.x2, false);
    const EncCache& full = opts.masked ? fk : qk;

    VecX q[2], cb_target[2], commit_target[2];
    int code[2];
    const VecX* zq[2] = {&qk.z1, &qk.z2};
    const VecX* ze[2] = {&full.z1, &full.z2};
    for (int i = 0; i < 2; ++i) {
      const std::size_t j = 2 * b + i;
      const Quantized nearest = quantize(*zq[i], cb);
      res.codes[j] = nearest.index;
      res.quant_embed[j] = *zq[i];
      if (frozen) {
        code[i] = frozen->codes[j];
        q[i] = *zq[i] + (frozen->code_vecs[j] - frozen->quant_embed[j]);
        cb_target[i] = frozen->full_embed[j];
        commit_target[i] = frozen->code_vecs[j];
      } else {
        code[i] = nearest.index;
        q[i] = nearest.vector;
        cb_target[i] = *ze[i];
        commit_target[i] = nearest.vector;
      }
      if (opts.identity_quantizer) q[i] = *zq[i];
    }

    const DecCache dk = dec_forward(p, ch.state, q[0], q[1]);
    const VecX r1 = dk.o1 - ch.x1;
    const VecX r2 = dk.o2 - ch.x2;
    rec_sum += r1.squaredNorm() + r2.squaredNorm();

    VecX dzq[2] = {VecX::Zero(zq[0]->size()), VecX::Zero(zq[0]->size())};
    VecX dze[2] = {VecX::Zero(zq[0]->size()), VecX::Zero(zq[0]->size())};
    if (want_grad && opts.reconstruction) {
      auto [dq1, dq2] = dec_backward(p, dk, ch.state, q[0], q[1], 2.0 * scale * r1,
                                     2.0 * scale * r2, res.grad);
      // Straight-through: the quantizer is the identity on the backward pass.
      dzq[0] += dq1;
      dzq[1] += dq2;
    }
    for (int i = 0; i < 2; ++i) {
      const VecX e = cb.row(code[i]).transpose();
      const VecX dcb = e - cb_target[i];
      cb_sum += dcb.squaredNorm();
      const VecX dc = *zq[i] - commit_target[i];
      commit_sum += p.beta * dc.squaredNorm();
      VecX da;
      if (align) {
        da = *zq[i] - *ze[i];
        align_sum += opts.align == AlignNorm::kL2 ? da.squaredNorm() : da.lpNorm<1>();
      }
      if (!want_grad) continue;
      if (opts.codebook) res.grad.mat(p.codebook).row(code[i]) += (2.0 * scale * dcb).transpose();
      if (opts.commitment) dzq[i] += 2.0 * scale * p.beta * dc;
      if (align && opts.alignment) {
        const VecX g = opts.align == AlignNorm::kL2 ? VecX(2.0 * scale * da) : VecX(scale * sign_of(da));
        dzq[i] += g;
        dze[i] -= g;
      }
    }
    if (want_grad) {
      enc_backward(p, qk, ch.x1, ch.x2, opts.masked, dzq[0], dzq[1], res.grad);
      if (opts.masked) enc_backward(p, fk, ch.x1, ch.x2, false, dze[0], dze[1], res.grad);
    }
  }

  res.terms.reconstruction = rec_sum * scale;
  res.terms.codebook = cb_sum * scale;
  res.terms.commitment = commit_sum * scale;
  res.terms.alignment = align_sum * scale;
  res.recon_mse = rec_sum * scale / static_cast<double>(w);
  res.loss = (opts.reconstruction ? res.terms.reconstruction : 0.0) +
             (opts.codebook ? res.terms.codebook : 0.0) +
             (opts.commitment ? res.terms.commitment : 0.0) +
             (align ? res.terms.alignment : 0.0);
  return res;
}

LossResult codec_loss(std::span<const TokenChunk> batch, const CodecParams& p,
                      const LossOptions& opts) {
  for (const auto& c : batch) check_chunk(c, p.shape);
  const auto norm = normalize_chunks(batch, p.norm);
  return codec_loss(norm, p, opts);
}

FrozenContext capture_frozen(std::span<const NormalizedChunk> batch, const CodecParams& p,
                             const LossOptions& opts) {
  FrozenContext f;
  const auto cb = p.codebook_mat();
  for (const auto& ch : batch) {
    const EncCache qk = enc_forward(p, ch.x1, ch.x2, opts.masked);
    const EncCache fk = opts.masked ? enc_forward(p, ch.x1, ch.x2, false) : qk;
    for (int i = 0; i < 2; ++i) {
      const VecX& zq = i == 0 ? qk.z1 : qk.z2;
      const Quantized qz = quantize(zq, cb);
      f.codes.push_back(qz.index);
      f.code_vecs.push_back(qz.vector);
      f.quant_embed.push_back(zq);
      f.full_embed.push_back(i == 0 ? fk.z1 : fk.z2);
    }
  }
  return f;
}

double reconstruction_mse(std::span<const NormalizedChunk> chunks, const CodecParams& p,
                          const LossOptions& opts) {
  if (chunks.empty()) return 0.0;
  double total = 0.0;
  const std::size_t step = 512;
  for (std::size_t i = 0; i < chunks.size(); i += step) {
    const auto part = chunks.subspan(i, std::min(step, chunks.size() - i));
    total += codec_loss(part, p, opts, nullptr, false).recon_mse * static_cast<double>(part.size());
  }
  return total / static_cast<double>(chunks.size());
}

CodecTrainResult train_codec(std::span<const TokenChunk> chunks, const NormStats& norm, Dims dims,
                             const CodecTrainConfig& cfg) {
  if (chunks.empty()) throw InputError("train_codec: empty dataset");
  if (!(cfg.lr > 0.0)) throw ConfigError("codec lr must be > 0");
  if (!(cfg.beta >= 0.0)) throw ConfigError("codec beta must be >= 0");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ConfigError("codec batch/epochs invalid");
  CodecShape shape{dims, cfg.latent_dim, cfg.codebook_size, cfg.hidden};
  for (const auto& c : chunks) check_chunk(c, shape);

  CodecTrainResult out;
  CodecParams& p = out.params;
  p = init_codec(shape, cfg.beta, norm, cfg.seed);
  const auto data = normalize_chunks(chunks, norm);
  Rng rng(cfg.seed, 0x747261696eULL);

  // Codebook starts on embeddings of random training tokens.
  {
    auto cbm = p.params.mat(p.codebook);
    for (int k = 0; k < shape.codebook_size; ++k) {
      const auto& ch = data[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(data.size())))];
      const EncodedPair z = encode_normalized(ch.x1, ch.x2, cfg.loss.masked, p);
      const VecX& pick = rng.uniform() < 0.5 ? z.first : z.second;
      for (int j = 0; j < shape.latent_dim; ++j) cbm(k, j) = pick[j] + 0.01 * rng.normal();
    }
  }
  out.report.initial_recon_mse = reconstruction_mse(data, p, cfg.loss);

  Adam adam(p.params.values().size(), cfg.lr);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  std::vector<NormalizedChunk> batch;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    std::vector<int> usage(static_cast<std::size_t>(shape.codebook_size), 0);
    double loss_sum = 0.0, mse_sum = 0.0;
    std::vector<VecX> last_embeds;
    for (std::size_t start = 0; start < order.size(); start += B) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + B); ++i) batch.push_back(data[order[i]]);
      LossResult r = codec_loss(batch, p, cfg.loss);
      if (!std::isfinite(r.loss) || !all_finite(r.grad.values())) {
        throw NumericError("codec training diverged at epoch " + std::to_string(epoch) +
                           ", batch starting " + std::to_string(start) +
                           ": loss=" + format_double(r.loss));
      }
      for (int c : r.codes) ++usage[static_cast<std::size_t>(c)];
      loss_sum += r.loss * static_cast<double>(batch.size());
      mse_sum += r.recon_mse * static_cast<double>(batch.size());
      adam.step(p.params.values(), r.grad.values());
      last_embeds = std::move(r.quant_embed);
    }
    CodecEpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / static_cast<double>(data.size());
    st.recon_mse = mse_sum / static_cast<double>(data.size());
    st.codes_used = static_cast<int>(std::count_if(usage.begin(), usage.end(), [](int u) { return u > 0; }));
    out.report.usage = usage;
    // Dead codes move onto a random embedding from the last batch.
    if (epoch + 1 < cfg.epochs) {
      auto cbm = p.params.mat(p.codebook);
      for (int k = 0; k < shape.codebook_size; ++k) {
        if (usage[static_cast<std::size_t>(k)] > 0) continue;
        const VecX& pick = last_embeds[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(last_embeds.size())))];
        cbm.row(k) = pick.transpose();
        ++st.dead_reset;
      }
    }
    out.report.epochs.push_back(st);
  }
  out.report.final_recon_mse = reconstruction_mse(data, p, cfg.loss);
  if (!std::isfinite(out.report.final_recon_mse)) throw NumericError("codec training produced non-finite params");
  return out;
}

CodecTrainResult train_codec(const Dataset& data, const CodecTrainConfig& cfg) {
  return train_codec(data.chunks, data.norm, data.dims, cfg);
}

GradCheckReport grad_check(const CodecParams& p, std::span<const TokenChunk> batch,
                           const LossOptions& opts, const GradCheckOptions& gc) {
  if (batch.empty()) throw InputError("grad_check: empty batch");
  for (const auto& c : batch) check_chunk(c, p.shape);
  const auto data = normalize_chunks(batch, p.norm);
  const FrozenContext frozen = capture_frozen(data, p, opts);
  LossResult base = codec_loss(data, p, opts, &frozen, true);
  if (gc.corrupt) gc.corrupt(p, base.grad);

  GradCheckReport rep;
  CodecParams probe = p;
  auto& vals = probe.params.values();
  for (const auto& blk : p.params.blocks()) {
    GradCheckBlock out{blk.name, 0.0, 0, 0};
    for (std::size_t i = blk.offset; i < blk.offset + blk.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + gc.step;
      const LossResult up = codec_loss(data, probe, opts, &frozen, false);
      vals[i] = orig - gc.step;
      const LossResult dn = codec_loss(data, probe, opts, &frozen, false);
      vals[i] = orig;
      if (up.codes != frozen.codes || dn.codes != frozen.codes) {
        ++out.skipped_boundary;
        continue;
      }
      const double numeric = (up.loss - dn.loss) / (2.0 * gc.step);
      const double analytic = base.grad.values()[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), gc.abs_floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(numeric - analytic) / denom);
      ++out.checked;
    }
    if (out.max_rel_error >= rep.max_rel_error) {
      if (out.max_rel_error > rep.max_rel_error || rep.worst_block.empty()) rep.worst_block = out.name;
      rep.max_rel_error = out.max_rel_error;
    }
    rep.blocks.push_back(out);
  }
  rep.pass = rep.max_rel_error < gc.tolerance;
  return rep;
}

void save_codec(const CodecParams& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write codec checkpoint " + path.string());
  write_codec(p, out);
  if (!out) throw InputError("failed writing codec checkpoint " + path.string());
}

void write_codec(const CodecParams& p, std::ostream& out) {
  const auto& s = p.shape;
  out << "LMAPCODEC1 " << s.dims.n << ' ' << s.dims.l << ' ' << s.dims.L << ' ' << s.latent_dim
      << ' ' << s.codebook_size << ' ' << format_double(p.beta) << '\n';
  out << "hidden " << s.hidden << '\n';
  write_named_vector(out, "norm_state_mean", p.norm.state_mean);
  write_named_vector(out, "norm_state_std", p.norm.state_std);
  write_named_vector(out, "norm_action_scale", p.norm.action_scale);
  write_named_vector(out, "norm_rtg_scale", std::span<const double>(&p.norm.rtg_scale, 1));
  write_blocks(out, p.params);
}

CodecParams load_codec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open codec checkpoint " + path.string());
  const std::string src = path.string();
  std::string magic, beta_text, key;
  CodecShape s;
  if (!(in >> magic) || magic != "LMAPCODEC1") throw ParseError(src + ": not a codec checkpoint");
  if (!(in >> s.dims.n >> s.dims.l >> s.dims.L >> s.latent_dim >> s.codebook_size >> beta_text)) {
    throw ParseError(src + ": malformed header");
  }
  if (!(in >> key >> s.hidden) || key != "hidden") throw ParseError(src + ": missing hidden width");
  NormStats norm;
  norm.state_mean = read_named_vector(in, "norm_state_mean", src);
  norm.state_std = read_named_vector(in, "norm_state_std", src);
  norm.action_scale = read_named_vector(in, "norm_action_scale", src);
  const Vec rs = read_named_vector(in, "norm_rtg_scale", src);
  if (rs.size() != 1) throw ParseError(src + ": bad rtg scale");
  norm.rtg_scale = rs[0];
  CodecParams p = init_codec(s, parse_double(beta_text), norm, 0);
  read_blocks(in, p.params, src);
  if (!all_finite(p.params.values())) throw ParseError(src + ": non-finite parameters");
  return p;
}

}  // namespace lmap
