#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "lmap/nn.hpp"
#include "lmap/trajectory.hpp"

namespace lmap {

// State-conditioned VQ autoencoder over two-token chunks.
//
// Encoder, per chunk position i in {1, 2}:
//   u_i = W_in x_i + b_in           (masked path: R column replaced by `mask`)
//   v_1 = tanh(A u_1 + c),  v_2 = tanh(A u_2 + C u_1 + c)
//   z_i = E v_i + e_b
// Decoder, conditioned on the first token's state s:
//   g_i = F q_i + G s + f
//   y_1 = tanh(P g_1 + p),  y_2 = tanh(P g_2 + Q g_1 + p)
//   x_i = O y_i + o
// Both mixers are causal: position 1 never sees position 2.

struct CodecShape {
  Dims dims;
  int latent_dim = 16;     // d
  int codebook_size = 32;  // K
  int hidden = 32;

  int token_width() const { return dims.token_width(); }
};

enum class AlignNorm { kL2, kL1 };

struct LossOptions {
  // Quantize the return-masked embedding and align it to the full one.
  // When false: plain VQ-VAE on the full input, no alignment term.
  bool masked = true;
  AlignNorm align = AlignNorm::kL2;
  bool reconstruction = true;
  bool codebook = true;
  bool commitment = true;
  bool alignment = true;
  // Feed the pre-quantization embedding to the decoder (test hook for the
  // straight-through rule).
  bool identity_quantizer = false;
};

struct CodecParams {
  CodecShape shape;
  double beta = 0.25;
  NormStats norm;
  ParamSet params;

  int enc_in_w = -1, enc_in_b = -1, mask = -1, enc_self = -1, enc_cross = -1, enc_mix_b = -1,
      enc_out_w = -1, enc_out_b = -1;
  int dec_code_w = -1, dec_state_w = -1, dec_in_b = -1, dec_self = -1, dec_cross = -1,
      dec_mix_b = -1, dec_out_w = -1, dec_out_b = -1;
  int codebook = -1;

  ConstMatMap codebook_mat() const { return params.mat(codebook); }
};

CodecParams init_codec(const CodecShape& shape, double beta, const NormStats& norm, uint64_t seed);

struct EncodedPair {
  VecX first;
  VecX second;
};

// Normalized-space entry points; x1/x2 are [R, s, m] token vectors.
EncodedPair encode_normalized(const VecX& x1, const VecX& x2, bool masked, const CodecParams& p);
// Raw chunk in environment units.
EncodedPair encode(const TokenChunk& chunk, bool masked, const CodecParams& p);

struct Quantized {
  int index = 0;
  VecX vector;
  double distance = 0.0;
};

// Nearest codebook row under Euclidean distance, ties to the lowest index.
Quantized quantize(const VecX& embedding, const ConstMatMap& codebook);

// Causal decoding split so a planner can rank first-position decodes
// without committing to a successor code.
struct FirstDecode {
  VecX fused;  // g_1
  VecX token;  // normalized x_1
};
FirstDecode decode_first(const VecX& state_norm, int code, const CodecParams& p);
VecX decode_second(const VecX& state_norm, const FirstDecode& first, int code, const CodecParams& p);

struct DecodedPair {
  VecX first;
  VecX second;
};
DecodedPair decode_normalized(const VecX& state_norm, const VecX& q1, const VecX& q2,
                              const CodecParams& p);

// Raw-unit decode of (s, z, z'): de-normalized tokens, macros clamped to [-1, 1].
std::pair<MacroToken, MacroToken> decode(std::span<const double> state, int code1, int code2,
                                         const CodecParams& p);
// De-normalizes and clamps a normalized macro slice of a decoded token.
Vec macro_from_token(const VecX& token, const CodecParams& p);

// Codes assigned to a raw chunk through the quantization path.
std::pair<int, int> chunk_codes(const TokenChunk& chunk, const CodecParams& p, bool masked = true);

struct NormalizedChunk {
  VecX x1, x2;
  VecX state;  // normalized s of the first token
};
NormalizedChunk normalize_chunk(const TokenChunk& chunk, const NormStats& norm);
std::vector<NormalizedChunk> normalize_chunks(std::span<const TokenChunk> chunks, const NormStats& norm);

// Stop-gradient operands and code assignments frozen at a parameter point.
// Evaluating the loss against a frozen context gives a smooth surrogate whose
// true gradient at that point equals the straight-through gradient.
struct FrozenContext {
  std::vector<int> codes;        // 2 per chunk
  std::vector<VecX> code_vecs;   // e at the frozen point
  std::vector<VecX> full_embed;  // z_e(x)
  std::vector<VecX> quant_embed; // embedding that was quantized
};

struct LossTerms {
  double reconstruction = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
  double alignment = 0.0;
};

struct LossResult {
  double loss = 0.0;
  LossTerms terms;
  ParamSet grad;
  std::vector<int> codes;
  std::vector<VecX> quant_embed;
  double recon_mse = 0.0;  // per component, normalized units
};

LossResult codec_loss(std::span<const NormalizedChunk> batch, const CodecParams& p,
                      const LossOptions& opts, const FrozenContext* frozen = nullptr,
                      bool want_grad = true);
LossResult codec_loss(std::span<const TokenChunk> batch, const CodecParams& p,
                      const LossOptions& opts = {});
FrozenContext capture_frozen(std::span<const NormalizedChunk> batch, const CodecParams& p,
                             const LossOptions& opts);

struct CodecTrainConfig {
  double lr = 1e-3;
  int batch_size = 64;
  int epochs = 30;
  double beta = 0.25;
  uint64_t seed = 0;
  int codebook_size = 32;
  int latent_dim = 16;
  int hidden = 32;
  LossOptions loss;
};

struct CodecEpochStats {
  int epoch = 0;
  double loss = 0.0;
  double recon_mse = 0.0;
  int codes_used = 0;
  int dead_reset = 0;
};

struct CodecTrainReport {
  std::vector<CodecEpochStats> epochs;
  std::vector<int> usage;  // code histogram of the final epoch
  double initial_recon_mse = 0.0;
  double final_recon_mse = 0.0;
};

struct CodecTrainResult {
  CodecParams params;
  CodecTrainReport report;
};

// Throws NumericError when the loss turns non-finite.
CodecTrainResult train_codec(std::span<const TokenChunk> chunks, const NormStats& norm, Dims dims,
                             const CodecTrainConfig& cfg);
CodecTrainResult train_codec(const Dataset& data, const CodecTrainConfig& cfg);

// Reconstruction MSE per component over a corpus, quantization path, no grads.
double reconstruction_mse(std::span<const NormalizedChunk> chunks, const CodecParams& p,
                          const LossOptions& opts);

struct GradCheckBlock {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_boundary = 0;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  bool pass = false;
  std::string worst_block;
  double max_rel_error = 0.0;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error uses max(|analytic|, |numeric|, floor) as denominator.
  double abs_floor = 1e-6;
  // Test hook: mutate the analytic gradient before comparison.
  std::function<void(const CodecParams&, ParamSet&)> corrupt;
};

GradCheckReport grad_check(const CodecParams& p, std::span<const TokenChunk> batch,
                           const LossOptions& opts = {}, const GradCheckOptions& gc = {});

void write_codec(const CodecParams& p, std::ostream& out);
void save_codec(const CodecParams& p, const std::filesystem::path& path);
CodecParams load_codec(const std::filesystem::path& path);

}  // namespace lmap
