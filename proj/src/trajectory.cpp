#include "lmap/trajectory.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lmap {

void EpisodeRaw::validate(int n, int l) const {
  const std::size_t T = rewards.size();
  if (states.size() != T || actions.size() != T) {
    throw InputError("episode has ragged lengths: states=" + std::to_string(states.size()) +
                     " actions=" + std::to_string(actions.size()) +
                     " rewards=" + std::to_string(T));
  }
  for (std::size_t t = 0; t < T; ++t) {
    if (static_cast<int>(states[t].size()) != n || static_cast<int>(actions[t].size()) != l) {
      throw InputError("episode step " + std::to_string(t) + " has wrong state/action width");
    }
    if (!all_finite(states[t]) || !all_finite(actions[t]) || !std::isfinite(rewards[t])) {
      throw InputError("episode step " + std::to_string(t) + " has non-finite values");
    }
  }
}

Vec NormStats::apply_state(std::span<const double> s) const {
  Vec out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - state_mean[i]) / state_std[i];
  return out;
}

Vec NormStats::invert_state(std::span<const double> s) const {
  Vec out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] * state_std[i] + state_mean[i];
  return out;
}

Vec NormStats::apply_macro(std::span<const double> m) const {
  const std::size_t l = action_scale.size();
  Vec out(m.size());
  for (std::size_t j = 0; j < m.size(); ++j) out[j] = m[j] / action_scale[j % l];
  return out;
}

Vec NormStats::invert_macro(std::span<const double> m) const {
  const std::size_t l = action_scale.size();
  Vec out(m.size());
  for (std::size_t j = 0; j < m.size(); ++j) out[j] = m[j] * action_scale[j % l];
  return out;
}

Vec NormStats::token_vector(const MacroToken& token) const {
  Vec x;
  x.reserve(1 + token.state.size() + token.macro.size());
  x.push_back(apply_rtg(token.rtg));
  for (double v : apply_state(token.state)) x.push_back(v);
  for (double v : apply_macro(token.macro)) x.push_back(v);
  return x;
}

Vec compute_rtg(std::span<const double> rewards, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw InputError("gamma must lie in (0, 1], got " + format_double(gamma));
  }
  if (!all_finite(rewards)) throw InputError("non-finite reward");
  Vec rtg(rewards.size(), 0.0);
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    rtg[i] = acc;
  }
  return rtg;
}

std::vector<MacroToken> segment_episode(const EpisodeRaw& ep, int L, double gamma, int offset) {
  if (L < 1) throw InputError("macro length must be >= 1");
  if (offset < 0) throw InputError("negative segmentation offset");
  const int T = static_cast<int>(ep.length());
  std::vector<MacroToken> tokens;
  if (T - offset < L) {
    if (offset == 0) {
      log_warning("episode of length " + std::to_string(T) + " shorter than macro length " +
                  std::to_string(L) + "; no tokens");
    }
    return tokens;
  }
  const Vec rtg = compute_rtg(ep.rewards, gamma);
  const int count = (T - offset) / L;
  tokens.reserve(count);
  for (int k = 0; k < count; ++k) {
    const int t = offset + k * L;
    MacroToken tok;
    tok.rtg = rtg[t];
    tok.state = ep.states[t];
    for (int j = 0; j < L; ++j) {
      const Vec& a = ep.actions[t + j];
      tok.macro.insert(tok.macro.end(), a.begin(), a.end());
    }
    tokens.push_back(std::move(tok));
  }
  return tokens;
}

std::vector<TokenChunk> make_chunks(std::span<const MacroToken> tokens) {
  std::vector<TokenChunk> chunks;
  chunks.reserve(tokens.size() / 2);
  for (std::size_t i = 0; i + 1 < tokens.size(); i += 2) {
    chunks.push_back(TokenChunk{tokens[i], tokens[i + 1]});
  }
  return chunks;
}

NormStats fit_normalization(std::span<const EpisodeRaw> episodes, double gamma) {
  if (episodes.empty()) throw InputError("cannot fit normalization on an empty corpus");
  std::size_t n = 0, l = 0, steps = 0;
  for (const auto& ep : episodes) {
    if (ep.length() == 0) continue;
    n = ep.states[0].size();
    l = ep.actions[0].size();
    break;
  }
  if (n == 0) throw InputError("cannot fit normalization: corpus has no steps");

  NormStats norm;
  norm.state_mean.assign(n, 0.0);
  norm.state_std.assign(n, 0.0);
  norm.action_scale.assign(l, 0.0);
  double max_rtg = 0.0;
  for (const auto& ep : episodes) {
    for (std::size_t t = 0; t < ep.length(); ++t) {
      for (std::size_t i = 0; i < n; ++i) norm.state_mean[i] += ep.states[t][i];
      for (std::size_t j = 0; j < l; ++j) {
        norm.action_scale[j] = std::max(norm.action_scale[j], std::abs(ep.actions[t][j]));
      }
      ++steps;
    }
    for (double r : compute_rtg(ep.rewards, gamma)) max_rtg = std::max(max_rtg, std::abs(r));
  }
  for (auto& m : norm.state_mean) m /= static_cast<double>(steps);
  for (const auto& ep : episodes) {
    for (std::size_t t = 0; t < ep.length(); ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        const double dv = ep.states[t][i] - norm.state_mean[i];
        norm.state_std[i] += dv * dv;
      }
    }
  }
  for (auto& s : norm.state_std) s = std::max(kStdFloor, std::sqrt(s / static_cast<double>(steps)));
  for (auto& a : norm.action_scale) a = std::max(kStdFloor, a);
  norm.rtg_scale = std::max(1.0, max_rtg);
  return norm;
}

Dataset build_dataset(std::vector<EpisodeRaw> episodes, Dims dims, double gamma,
                      bool all_offsets, std::string envcfg) {
  Dataset data;
  data.dims = dims;
  data.gamma = gamma;
  data.envcfg = std::move(envcfg);
  for (const auto& ep : episodes) ep.validate(dims.n, dims.l);
  data.episodes = std::move(episodes);
  data.norm = fit_normalization(data.episodes, gamma);
  const int offsets = all_offsets ? dims.L : 1;
  for (std::size_t e = 0; e < data.episodes.size(); ++e) {
    for (int off = 0; off < offsets; ++off) {
      const auto tokens = segment_episode(data.episodes[e], dims.L, gamma, off);
      for (auto& c : make_chunks(tokens)) {
        data.chunks.push_back(std::move(c));
        data.chunk_episode.push_back(e);
      }
    }
  }
  return data;
}

std::filesystem::path norm_sidecar(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".norm");
}

namespace {

constexpr char kBinaryMagic[4] = {'L', 'M', 'B', '1'};

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string_view value_of(std::string_view field, std::string_view key, int line_no) {
  if (field.size() <= key.size() + 1 || field.substr(0, key.size()) != key ||
      field[key.size()] != '=') {
    throw ParseError("line " + std::to_string(line_no) + ": expected '" + std::string(key) +
                     "=<value>', got '" + std::string(field) + "'");
  }
  return field.substr(key.size() + 1);
}

int parse_int(std::string_view text, int line_no) {
  try {
    const double v = parse_double(text);
    if (v != std::floor(v)) throw ParseError("");
    return static_cast<int>(v);
  } catch (const ParseError&) {
    throw ParseError("line " + std::to_string(line_no) + ": expected integer, got '" +
                     std::string(text) + "'");
  }
}

void write_text(const Dataset& data, std::ostream& out) {
  out << "LMAP1 n=" << data.dims.n << " l=" << data.dims.l << " L=" << data.dims.L
      << " gamma=" << format_double(data.gamma) << '\n';
  if (!data.envcfg.empty()) out << "# envcfg " << data.envcfg << '\n';
  for (const auto& ep : data.episodes) {
    out << "EP T=" << ep.length() << '\n';
    for (std::size_t t = 0; t < ep.length(); ++t) {
      for (std::size_t i = 0; i < ep.states[t].size(); ++i) {
        if (i) out << ' ';
        out << format_double(ep.states[t][i]);
      }
      out << " |";
      for (double a : ep.actions[t]) out << ' ' << format_double(a);
      out << " | " << format_double(ep.rewards[t]) << '\n';
    }
    out << "END terminated=" << (ep.terminated ? 1 : 0) << '\n';
  }
}

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "binary format is little-endian");
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T))) throw ParseError(std::string("truncated binary file reading ") + what);
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

void write_binary(const Dataset& data, std::ostream& out) {
  out.write(kBinaryMagic, 4);
  put<int32_t>(out, data.dims.n);
  put<int32_t>(out, data.dims.l);
  put<int32_t>(out, data.dims.L);
  put<float>(out, static_cast<float>(data.gamma));
  put<uint32_t>(out, static_cast<uint32_t>(data.envcfg.size()));
  out.write(data.envcfg.data(), static_cast<std::streamsize>(data.envcfg.size()));
  put<uint32_t>(out, static_cast<uint32_t>(data.episodes.size()));
  for (const auto& ep : data.episodes) {
    put<uint32_t>(out, static_cast<uint32_t>(ep.length()));
    put<uint8_t>(out, ep.terminated ? 1 : 0);
    for (std::size_t t = 0; t < ep.length(); ++t) {
      for (double v : ep.states[t]) put<float>(out, static_cast<float>(v));
      for (double v : ep.actions[t]) put<float>(out, static_cast<float>(v));
      put<float>(out, static_cast<float>(ep.rewards[t]));
    }
  }
}

struct RawCorpus {
  Dims dims;
  double gamma = 0.99;
  std::string envcfg;
  std::vector<EpisodeRaw> episodes;
};

RawCorpus read_binary(std::istream& in) {
  RawCorpus c;
  c.dims.n = get<int32_t>(in, "header");
  c.dims.l = get<int32_t>(in, "header");
  c.dims.L = get<int32_t>(in, "header");
  c.gamma = get<float>(in, "header");
  if (c.dims.n < 1 || c.dims.l < 1 || c.dims.L < 1) throw ParseError("malformed binary header dims");
  const uint32_t cfg_len = get<uint32_t>(in, "header");
  c.envcfg.resize(cfg_len);
  if (cfg_len && !in.read(c.envcfg.data(), cfg_len)) throw ParseError("truncated binary header");
  const uint32_t count = get<uint32_t>(in, "episode count");
  for (uint32_t e = 0; e < count; ++e) {
    EpisodeRaw ep;
    const uint32_t T = get<uint32_t>(in, "episode header");
    ep.terminated = get<uint8_t>(in, "episode header") != 0;
    for (uint32_t t = 0; t < T; ++t) {
      const std::string what = "record " + std::to_string(t) + " of episode " + std::to_string(e);
      Vec s(c.dims.n), a(c.dims.l);
      for (auto& v : s) v = get<float>(in, what.c_str());
      for (auto& v : a) v = get<float>(in, what.c_str());
      ep.states.push_back(std::move(s));
      ep.actions.push_back(std::move(a));
      ep.rewards.push_back(get<float>(in, what.c_str()));
    }
    c.episodes.push_back(std::move(ep));
  }
  return c;
}

RawCorpus read_text(std::istream& in) {
  RawCorpus c;
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (!have_header && std::getline(in, line)) {
    ++line_no;
    const auto f = split_ws(line);
    if (f.empty()) continue;
    if (f[0] != "LMAP1" || f.size() != 5) {
      throw ParseError("line " + std::to_string(line_no) + ": malformed header, expected " +
                       "'LMAP1 n=<int> l=<int> L=<int> gamma=<dec>'");
    }
    c.dims.n = parse_int(value_of(f[1], "n", line_no), line_no);
    c.dims.l = parse_int(value_of(f[2], "l", line_no), line_no);
    c.dims.L = parse_int(value_of(f[3], "L", line_no), line_no);
    c.gamma = parse_double(value_of(f[4], "gamma", line_no));
    if (c.dims.n < 1 || c.dims.l < 1 || c.dims.L < 1) {
      throw ParseError("line " + std::to_string(line_no) + ": header dims must be positive");
    }
    have_header = true;
  }
  if (!have_header) throw ParseError("missing header: file is empty");

  EpisodeRaw* open = nullptr;
  std::size_t expected = 0;
  std::size_t record = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view view(line);
    const auto f = split_ws(view);
    if (f.empty()) continue;
    if (f[0][0] == '#') {
      if (f.size() >= 2 && f[1] == "envcfg") {
        const auto pos = view.find("envcfg");
        std::string rest(view.substr(pos + 6));
        rest.erase(0, rest.find_first_not_of(" \t"));
        while (!rest.empty() && (rest.back() == '\r' || rest.back() == ' ')) rest.pop_back();
        c.envcfg = rest;
      }
      continue;
    }
    const std::string where = "line " + std::to_string(line_no);
    if (f[0] == "EP") {
      if (open) throw ParseError(where + ": EP before END of episode " + std::to_string(c.episodes.size() - 1));
      if (f.size() != 2) throw ParseError(where + ": malformed episode header");
      const int T = parse_int(value_of(f[1], "T", line_no), line_no);
      if (T < 1) throw ParseError(where + ": episode length must be positive");
      c.episodes.emplace_back();
      open = &c.episodes.back();
      expected = static_cast<std::size_t>(T);
      record = 0;
      continue;
    }
    if (f[0] == "END") {
      if (!open) throw ParseError(where + ": END without EP");
      if (record != expected) {
        throw ParseError(where + ": episode " + std::to_string(c.episodes.size() - 1) + " has " +
                         std::to_string(record) + " records, header says T=" +
                         std::to_string(expected));
      }
      if (f.size() != 2) throw ParseError(where + ": malformed END line");
      const int term = parse_int(value_of(f[1], "terminated", line_no), line_no);
      if (term != 0 && term != 1) throw ParseError(where + ": terminated must be 0 or 1");
      open->terminated = term == 1;
      open = nullptr;
      continue;
    }
    if (!open) throw ParseError(where + ": record outside an episode block");
    const std::string rec = where + " (record " + std::to_string(record) + " of episode " +
                            std::to_string(c.episodes.size() - 1) + ")";
    if (record >= expected) throw ParseError(rec + ": more records than T=" + std::to_string(expected));
    std::vector<std::vector<std::string_view>> groups(1);
    for (auto tok : f) {
      if (tok == "|") {
        groups.emplace_back();
      } else {
        groups.back().push_back(tok);
      }
    }
    if (groups.size() != 3) throw ParseError(rec + ": expected 3 '|'-separated fields");
    if (static_cast<int>(groups[0].size()) != c.dims.n) {
      throw ParseError(rec + ": expected " + std::to_string(c.dims.n) + " state values, got " +
                       std::to_string(groups[0].size()));
    }
    if (static_cast<int>(groups[1].size()) != c.dims.l) {
      throw ParseError(rec + ": expected " + std::to_string(c.dims.l) + " action values, got " +
                       std::to_string(groups[1].size()));
    }
    if (groups[2].size() != 1) throw ParseError(rec + ": expected exactly one reward value");
    Vec s, a;
    try {
      for (auto tok : groups[0]) s.push_back(parse_double(tok));
      for (auto tok : groups[1]) a.push_back(parse_double(tok));
      open->rewards.push_back(parse_double(groups[2][0]));
    } catch (const ParseError& e) {
      throw ParseError(rec + ": " + e.what());
    }
    open->states.push_back(std::move(s));
    open->actions.push_back(std::move(a));
    ++record;
  }
  if (open) {
    throw ParseError("truncated file: episode " + std::to_string(c.episodes.size() - 1) +
                     " ended after " + std::to_string(record) + " of " + std::to_string(expected) +
                     " records (no END line)");
  }
  return c;
}

void write_vec_line(std::ostream& out, std::string_view name, std::span<const double> v) {
  out << name;
  for (double x : v) out << ' ' << format_double(x);
  out << '\n';
}

}  // namespace

void save_norm(const NormStats& norm, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "LMAPNORM1 n=" << norm.state_mean.size() << " l=" << norm.action_scale.size() << '\n';
  write_vec_line(out, "state_mean", norm.state_mean);
  write_vec_line(out, "state_std", norm.state_std);
  write_vec_line(out, "action_scale", norm.action_scale);
  out << "rtg_scale " << format_double(norm.rtg_scale) << '\n';
}

NormStats load_norm(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("LMAPNORM1", 0) != 0) {
    throw ParseError(path.string() + ": missing LMAPNORM1 header");
  }
  NormStats norm;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto f = split_ws(line);
    if (f.empty()) continue;
    Vec values;
    for (std::size_t i = 1; i < f.size(); ++i) values.push_back(parse_double(f[i]));
    if (f[0] == "state_mean") {
      norm.state_mean = values;
    } else if (f[0] == "state_std") {
      norm.state_std = values;
    } else if (f[0] == "action_scale") {
      norm.action_scale = values;
    } else if (f[0] == "rtg_scale" && values.size() == 1) {
      norm.rtg_scale = values[0];
    } else {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": unknown field");
    }
  }
  if (norm.state_mean.size() != norm.state_std.size() || norm.action_scale.empty()) {
    throw ParseError(path.string() + ": incomplete normalization record");
  }
  return norm;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path, FileFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  if (format == FileFormat::kText) {
    write_text(data, out);
  } else {
    write_binary(data, out);
  }
  if (!out) throw InputError("write failed for " + path.string());
  save_norm(data.norm, norm_sidecar(path));
}

Dataset load_dataset(const std::filesystem::path& path, bool all_offsets) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  const bool binary = in.gcount() == 4 && std::memcmp(magic, kBinaryMagic, 4) == 0;
  if (!binary) {
    in.clear();
    in.seekg(0);
  }
  RawCorpus raw = binary ? read_binary(in) : read_text(in);
  for (std::size_t e = 0; e < raw.episodes.size(); ++e) {
    try {
      raw.episodes[e].validate(raw.dims.n, raw.dims.l);
    } catch (const InputError& err) {
      throw ParseError("episode " + std::to_string(e) + ": " + err.what());
    }
  }
  if (raw.episodes.empty()) throw ParseError(path.string() + ": no episodes");
  Dataset data = build_dataset(std::move(raw.episodes), raw.dims, raw.gamma, all_offsets,
                               std::move(raw.envcfg));
  if (std::filesystem::exists(norm_sidecar(path))) data.norm = load_norm(norm_sidecar(path));
  return data;
}

}  // namespace lmap
