#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lmap/common.hpp"

namespace lmap {

struct Dims {
  int n = 0;  // state dimension
  int l = 0;  // primitive action dimension
  int L = 1;  // macro length

  int macro_width() const { return l * L; }
  int token_width() const { return 1 + n + l * L; }
  bool operator==(const Dims&) const = default;
};

struct EpisodeRaw {
  std::vector<Vec> states;
  std::vector<Vec> actions;
  Vec rewards;
  bool terminated = false;

  std::size_t length() const { return rewards.size(); }
  // Throws InputError on ragged lengths, wrong widths or non-finite values.
  void validate(int n, int l) const;
  bool operator==(const EpisodeRaw&) const = default;
};

// x_t = (R_t, s_t, m_t) with m_t the flattened actions a_t .. a_{t+L-1}.
struct MacroToken {
  double rtg = 0.0;
  Vec state;
  Vec macro;
};

struct TokenChunk {
  MacroToken first;
  MacroToken second;
};

struct NormStats {
  Vec state_mean;
  Vec state_std;
  Vec action_scale;
  double rtg_scale = 1.0;

  Vec apply_state(std::span<const double> s) const;
  Vec invert_state(std::span<const double> s) const;
  // Macros are flattened: component j uses action_scale[j % l].
  Vec apply_macro(std::span<const double> m) const;
  Vec invert_macro(std::span<const double> m) const;
  double apply_rtg(double r) const { return r / rtg_scale; }
  double invert_rtg(double r) const { return r * rtg_scale; }

  // Normalized token vector [R, s, m] of width 1 + n + l*L.
  Vec token_vector(const MacroToken& token) const;

  bool operator==(const NormStats&) const = default;
};

inline constexpr double kStdFloor = 1e-6;

// R_t = r_t + gamma * R_{t+1}, R_{T} = 0 past the final step.
Vec compute_rtg(std::span<const double> rewards, double gamma);

// floor(T/L) tokens starting at step `offset` (0 for the canonical
// segmentation); the trailing remainder is dropped.
std::vector<MacroToken> segment_episode(const EpisodeRaw& ep, int L, double gamma,
                                        int offset = 0);

// Non-overlapping consecutive pairs; an odd trailing token is dropped.
std::vector<TokenChunk> make_chunks(std::span<const MacroToken> tokens);

NormStats fit_normalization(std::span<const EpisodeRaw> episodes, double gamma);

struct Dataset {
  Dims dims;
  double gamma = 0.99;
  NormStats norm;
  std::vector<EpisodeRaw> episodes;
  // Free-form `key=value` pairs echoed into the file as `# envcfg ...`.
  std::string envcfg;

  // Derived on build/load.
  std::vector<TokenChunk> chunks;
  std::vector<std::size_t> chunk_episode;  // source episode per chunk
};

// Segments every episode (at every start offset in [0, L) when
// `all_offsets` is set) and pairs tokens into chunks. Fits norm stats.
Dataset build_dataset(std::vector<EpisodeRaw> episodes, Dims dims, double gamma,
                      bool all_offsets = true, std::string envcfg = {});

enum class FileFormat { kText, kBinary };

void save_dataset(const Dataset& data, const std::filesystem::path& path,
                  FileFormat format = FileFormat::kText);
Dataset load_dataset(const std::filesystem::path& path, bool all_offsets = true);

void save_norm(const NormStats& norm, const std::filesystem::path& path);
NormStats load_norm(const std::filesystem::path& path);
std::filesystem::path norm_sidecar(const std::filesystem::path& path);

}  // namespace lmap
