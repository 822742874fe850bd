#include "lmap/prior.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace lmap {

namespace {

// Keeps logits finite when a smoothed probability is exactly zero.
constexpr double kLogFloor = -690.0;

double safe_log(double p) { return p > 0.0 ? std::max(std::log(p), kLogFloor) : kLogFloor; }

std::string read_magic(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open prior checkpoint " + path.string());
  std::string magic;
  in >> magic;
  return magic;
}

void write_norm(std::ostream& out, const NormStats& norm) {
  write_named_vector(out, "norm_state_mean", norm.state_mean);
  write_named_vector(out, "norm_state_std", norm.state_std);
}

NormStats read_norm(std::istream& in, const std::string& src) {
  NormStats norm;
  norm.state_mean = read_named_vector(in, "norm_state_mean", src);
  norm.state_std = read_named_vector(in, "norm_state_std", src);
  return norm;
}

}  // namespace

void PriorModel::check_query(std::span<const double> state, std::span<const int> prefix) const {
  if (static_cast<int>(state.size()) != state_dim()) {
    throw InputError("prior: state width " + std::to_string(state.size()) + ", expected " +
                     std::to_string(state_dim()));
  }
  for (int z : prefix) {
    if (z < 0 || z >= codebook_size()) {
      throw InputError("prior: code " + std::to_string(z) + " out of range [0, " +
                       std::to_string(codebook_size()) + ")");
    }
  }
}

Vec softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw InputError("softmax temperature must be > 0");
  Vec p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp((v - mx) / temperature);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

Vec sample_probabilities(std::span<const double> logits, const SampleConfig& cfg) {
  if (!(cfg.temperature > 0.0)) throw InputError("sampling temperature must be > 0");
  const int K = static_cast<int>(logits.size());
  const int k = cfg.top_k <= 0 ? K : std::min(cfg.top_k, K);
  std::vector<int> idx(static_cast<std::size_t>(K));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  Vec kept(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) kept[i] = logits[idx[i]];
  const Vec pk = softmax(kept, cfg.temperature);
  Vec p(static_cast<std::size_t>(K), 0.0);
  for (int i = 0; i < k; ++i) p[idx[i]] = pk[i];
  return p;
}

int sample_code(std::span<const double> logits, const SampleConfig& cfg, Rng& rng) {
  const Vec p = sample_probabilities(logits, cfg);
  double u = rng.uniform();
  int last = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last = static_cast<int>(i);
    if (u < p[i]) return last;
    u -= p[i];
  }
  return last;
}

std::vector<CodeSequence> encode_code_sequences(const Dataset& data, const CodecParams& codec) {
  std::vector<CodeSequence> out;
  out.reserve(data.chunks.size());
  for (const auto& ch : data.chunks) {
    auto [a, b] = chunk_codes(ch, codec);
    out.push_back({ch.first.state, {a, b}});
  }
  return out;
}

void PriorModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write prior checkpoint " + path.string());
  write(out);
  if (!out) throw InputError("failed writing prior checkpoint " + path.string());
}

// ---- tabular ----

TabularPrior::TabularPrior(int state_dim, int K, NormStats norm, double smoothing, int bins,
                           double lo, double hi)
    : n_(state_dim), K_(K), norm_(std::move(norm)), lambda_(smoothing), bins_(bins), lo_(lo), hi_(hi) {
  if (K_ < 1 || n_ < 1 || bins_ < 1 || !(hi_ > lo_)) throw InputError("tabular prior: bad shape");
  if (!(lambda_ >= 0.0)) throw InputError("tabular prior: smoothing must be >= 0");
  if (norm_.state_mean.size() != static_cast<std::size_t>(n_)) {
    norm_.state_mean.assign(static_cast<std::size_t>(n_), 0.0);
    norm_.state_std.assign(static_cast<std::size_t>(n_), 1.0);
  }
}

uint64_t TabularPrior::bucket(std::span<const double> state) const {
  const Vec s = norm_.apply_state(state);
  uint64_t key = 0;
  const double width = (hi_ - lo_) / bins_;
  for (double v : s) {
    int b = static_cast<int>(std::floor((v - lo_) / width));
    b = std::clamp(b, 0, bins_ - 1);
    key = key * static_cast<uint64_t>(bins_) + static_cast<uint64_t>(b);
  }
  return key;
}

void TabularPrior::observe(const CodeSequence& seq) {
  check_query(seq.state, seq.codes);
  if (seq.codes.empty()) return;
  const uint64_t b = bucket(seq.state);
  auto& f = first_[b];
  if (f.empty()) f.assign(static_cast<std::size_t>(K_), 0.0);
  f[seq.codes[0]] += 1.0;
  for (std::size_t i = 1; i < seq.codes.size(); ++i) {
    auto& row = next_[b * static_cast<uint64_t>(K_) + static_cast<uint64_t>(seq.codes[i - 1])];
    if (row.empty()) row.assign(static_cast<std::size_t>(K_), 0.0);
    row[seq.codes[i]] += 1.0;
  }
}

Vec TabularPrior::row_probs(const Vec* counts) const {
  const double Kd = static_cast<double>(K_);
  double total = lambda_ * Kd;
  if (counts) total += std::accumulate(counts->begin(), counts->end(), 0.0);
  Vec p(static_cast<std::size_t>(K_), 1.0 / Kd);
  if (total <= 0.0) return p;
  for (int k = 0; k < K_; ++k) p[k] = ((counts ? (*counts)[k] : 0.0) + lambda_) / total;
  return p;
}

Vec TabularPrior::probabilities(std::span<const double> state, std::span<const int> prefix) const {
  check_query(state, prefix);
  const uint64_t b = bucket(state);
  const Vec* counts = nullptr;
  if (prefix.empty()) {
    auto it = first_.find(b);
    if (it != first_.end()) counts = &it->second;
  } else {
    // First-order: only the most recent code matters.
    auto it = next_.find(b * static_cast<uint64_t>(K_) + static_cast<uint64_t>(prefix.back()));
    if (it != next_.end()) counts = &it->second;
  }
  return row_probs(counts);
}

Vec TabularPrior::logits(std::span<const double> state, std::span<const int> prefix) const {
  Vec p = probabilities(state, prefix);
  for (double& v : p) v = safe_log(v);
  return p;
}

Vec TabularPrior::first_counts(uint64_t b) const {
  auto it = first_.find(b);
  return it == first_.end() ? Vec(static_cast<std::size_t>(K_), 0.0) : it->second;
}

Vec TabularPrior::successor_counts(uint64_t b, int code) const {
  auto it = next_.find(b * static_cast<uint64_t>(K_) + static_cast<uint64_t>(code));
  return it == next_.end() ? Vec(static_cast<std::size_t>(K_), 0.0) : it->second;
}

void TabularPrior::write(std::ostream& out) const {
  out << "LMAPTAB1 " << n_ << ' ' << K_ << ' ' << bins_ << ' ' << format_double(lo_) << ' '
      << format_double(hi_) << ' ' << format_double(lambda_) << '\n';
  write_norm(out, norm_);
  // Sorted for a stable file layout.
  std::map<uint64_t, const Vec*> f;
  for (const auto& [k, v] : first_) f[k] = &v;
  std::map<uint64_t, const Vec*> s;
  for (const auto& [k, v] : next_) s[k] = &v;
  out << "first " << f.size() << '\n';
  for (const auto& [k, v] : f) {
    out << k;
    for (double c : *v) out << ' ' << format_double(c);
    out << '\n';
  }
  out << "next " << s.size() << '\n';
  for (const auto& [k, v] : s) {
    out << k / static_cast<uint64_t>(K_) << ' ' << k % static_cast<uint64_t>(K_);
    for (double c : *v) out << ' ' << format_double(c);
    out << '\n';
  }
}

TabularPrior TabularPrior::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  const std::string src = path.string();
  std::string magic, lo, hi, lam, key;
  int n = 0, K = 0, bins = 0;
  if (!(in >> magic) || magic != "LMAPTAB1") throw ParseError(src + ": not a tabular prior");
  if (!(in >> n >> K >> bins >> lo >> hi >> lam)) throw ParseError(src + ": malformed header");
  NormStats norm = read_norm(in, src);
  TabularPrior t(n, K, norm, parse_double(lam), bins, parse_double(lo), parse_double(hi));
  auto read_row = [&](Vec& row) {
    row.assign(static_cast<std::size_t>(K), 0.0);
    for (double& c : row) {
      std::string tok;
      if (!(in >> tok)) throw ParseError(src + ": truncated count row");
      c = parse_double(tok);
    }
  };
  std::size_t rows = 0;
  if (!(in >> key >> rows) || key != "first") throw ParseError(src + ": expected 'first'");
  for (std::size_t i = 0; i < rows; ++i) {
    uint64_t b = 0;
    if (!(in >> b)) throw ParseError(src + ": truncated first table");
    read_row(t.first_[b]);
  }
  if (!(in >> key >> rows) || key != "next") throw ParseError(src + ": expected 'next'");
  for (std::size_t i = 0; i < rows; ++i) {
    uint64_t b = 0;
    int z = 0;
    if (!(in >> b >> z) || z < 0 || z >= K) throw ParseError(src + ": bad successor row");
    read_row(t.next_[b * static_cast<uint64_t>(K) + static_cast<uint64_t>(z)]);
  }
  return t;
}

TabularPrior fit_tabular(std::span<const CodeSequence> data, int state_dim, int K,
                         const NormStats& norm, double smoothing) {
  TabularPrior t(state_dim, K, norm, smoothing);
  if (data.empty()) {
    log_warning("fit_tabular: empty code dataset, using the uniform model");
    return t;
  }
  for (const auto& seq : data) t.observe(seq);
  return t;
}

// ---- neural ----

NeuralPrior::NeuralPrior(int state_dim, int K, NormStats norm, const NeuralPriorConfig& cfg)
    : n_(state_dim), K_(K), norm_(std::move(norm)), cfg_(cfg) {
  if (K_ < 1 || n_ < 1 || cfg.embed_dim < 1 || cfg.hidden < 1) throw InputError("neural prior: bad shape");
  if (norm_.state_mean.size() != static_cast<std::size_t>(n_)) {
    norm_.state_mean.assign(static_cast<std::size_t>(n_), 0.0);
    norm_.state_std.assign(static_cast<std::size_t>(n_), 1.0);
  }
  const int e = cfg.embed_dim, h = cfg.hidden;
  state_w_ = params_.add("state_w", e, n_);
  state_b_ = params_.add("state_b", e, 1);
  bos_ = params_.add("bos", e, 1);
  embed_ = params_.add("embed", K_, e);
  mix_self_ = params_.add("mix_self", h, e);
  mix_ctx_ = params_.add("mix_ctx", h, e);
  mix_b_ = params_.add("mix_b", h, 1);
  head_w_ = params_.add("head_w", K_, h);
  head_b_ = params_.add("head_b", K_, 1);
  Rng rng(cfg.seed, 0x7072696f72ULL);
  const double se = 1.0 / std::sqrt(static_cast<double>(e));
  params_.fill_normal(state_w_, rng, 1.0 / std::sqrt(static_cast<double>(n_)));
  params_.fill_normal(bos_, rng, 0.5);
  params_.fill_normal(embed_, rng, 0.5);
  params_.fill_normal(mix_self_, rng, se);
  params_.fill_normal(mix_ctx_, rng, se);
}

VecX NeuralPrior::state_feature(std::span<const double> state) const {
  const VecX s = to_eigen(norm_.apply_state(state));
  return params_.mat(state_w_) * s + params_.vec(state_b_);
}

Vec NeuralPrior::logits(std::span<const double> state, std::span<const int> prefix) const {
  check_query(state, prefix);
  const VecX sf = state_feature(state);
  const auto emb = params_.mat(embed_);
  VecX sum = VecX::Zero(sf.size());
  VecX last = params_.vec(bos_) + sf;
  for (int z : prefix) {
    sum += last;
    last = emb.row(z).transpose() + sf;
  }
  VecX a = params_.mat(mix_self_) * last + params_.vec(mix_b_);
  if (!prefix.empty()) a += params_.mat(mix_ctx_) * (sum / static_cast<double>(prefix.size()));
  const VecX h = a.array().tanh();
  return to_vec(params_.mat(head_w_) * h + params_.vec(head_b_));
}

double NeuralPrior::loss(std::span<const CodeSequence> batch, ParamSet* grad) const {
  if (batch.empty()) throw InputError("prior loss: empty batch");
  std::size_t count = 0;
  for (const auto& seq : batch) {
    check_query(seq.state, seq.codes);
    count += seq.codes.size();
  }
  if (count == 0) throw InputError("prior loss: no codes");
  const double scale = 1.0 / static_cast<double>(count);
  const auto A = params_.mat(mix_self_);
  const auto C = params_.mat(mix_ctx_);
  const auto H = params_.mat(head_w_);
  const auto emb = params_.mat(embed_);
  double total = 0.0;
  for (const auto& seq : batch) {
    const VecX s = to_eigen(norm_.apply_state(seq.state));
    const VecX sf = params_.mat(state_w_) * s + params_.vec(state_b_);
    const std::size_t T = seq.codes.size();
    // Tokens t_0 = bos + sf, t_j = Emb[z_j] + sf for j = 1..T-1.
    std::vector<VecX> tok(T);
    tok[0] = params_.vec(bos_) + sf;
    for (std::size_t j = 1; j < T; ++j) tok[j] = emb.row(seq.codes[j - 1]).transpose() + sf;
    std::vector<VecX> dtok(T, VecX::Zero(sf.size()));
    VecX sum = VecX::Zero(sf.size());
    for (std::size_t j = 0; j < T; ++j) {
      VecX ctx = VecX::Zero(sf.size());
      if (j > 0) ctx = sum / static_cast<double>(j);
      const VecX a = A * tok[j] + C * ctx + params_.vec(mix_b_);
      const VecX h = a.array().tanh();
      const VecX lg = H * h + params_.vec(head_b_);
      const double mx = lg.maxCoeff();
      const double lse = mx + std::log((lg.array() - mx).exp().sum());
      const int target = seq.codes[j];
      total += lse - lg[target];
      if (grad) {
        VecX dl = (lg.array() - lse).exp();
        dl[target] -= 1.0;
        dl *= scale;
        grad->mat(head_w_).noalias() += dl * h.transpose();
        grad->vec(head_b_) += dl;
        const VecX da = ((H.transpose() * dl).array() * (1.0 - h.array().square())).matrix();
        grad->mat(mix_self_).noalias() += da * tok[j].transpose();
        grad->mat(mix_ctx_).noalias() += da * ctx.transpose();
        grad->vec(mix_b_) += da;
        dtok[j] += A.transpose() * da;
        if (j > 0) {
          const VecX dctx = C.transpose() * da / static_cast<double>(j);
          for (std::size_t i = 0; i < j; ++i) dtok[i] += dctx;
        }
      }
      sum += tok[j];
    }
    if (grad) {
      VecX dsf = VecX::Zero(sf.size());
      for (std::size_t j = 0; j < T; ++j) {
        dsf += dtok[j];
        if (j == 0) {
          grad->vec(bos_) += dtok[j];
        } else {
          grad->mat(embed_).row(seq.codes[j - 1]) += dtok[j].transpose();
        }
      }
      grad->mat(state_w_).noalias() += dsf * s.transpose();
      grad->vec(state_b_) += dsf;
    }
  }
  return total * scale;
}

void NeuralPrior::write(std::ostream& out) const {
  out << "LMAPPRIOR1 " << n_ << ' ' << K_ << ' ' << cfg_.embed_dim << ' ' << cfg_.hidden << '\n';
  write_norm(out, norm_);
  write_blocks(out, params_);
}

NeuralPrior NeuralPrior::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  const std::string src = path.string();
  std::string magic;
  int n = 0, K = 0;
  NeuralPriorConfig cfg;
  if (!(in >> magic) || magic != "LMAPPRIOR1") throw ParseError(src + ": not a neural prior");
  if (!(in >> n >> K >> cfg.embed_dim >> cfg.hidden)) throw ParseError(src + ": malformed header");
  NormStats norm = read_norm(in, src);
  NeuralPrior p(n, K, norm, cfg);
  read_blocks(in, p.params_, src);
  if (!all_finite(p.params_.values())) throw ParseError(src + ": non-finite parameters");
  return p;
}

NeuralPriorTrainResult train_neural_prior(std::span<const CodeSequence> data, int state_dim, int K,
                                          const NormStats& norm, const NeuralPriorConfig& cfg) {
  if (data.empty()) throw InputError("train_neural_prior: empty code dataset");
  if (!(cfg.lr > 0.0) || cfg.batch_size < 1 || cfg.epochs < 0) throw ConfigError("prior training config invalid");
  NeuralPriorTrainResult out{NeuralPrior(state_dim, K, norm, cfg), {}};
  NeuralPrior& model = out.model;
  out.report.uniform_cross_entropy = std::log(static_cast<double>(K));
  Adam adam(model.params().values().size(), cfg.lr);
  Rng rng(cfg.seed, 0x7074726eULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  std::vector<CodeSequence> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double ce_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + B); ++i) batch.push_back(data[order[i]]);
      ParamSet g = model.params().zeros_like();
      const double ce = model.loss(batch, &g);
      if (!std::isfinite(ce) || !all_finite(g.values())) {
        throw NumericError("prior training diverged at epoch " + std::to_string(epoch) +
                           ": cross-entropy=" + format_double(ce));
      }
      ce_sum += ce * static_cast<double>(batch.size());
      seen += batch.size();
      adam.step(model.params().values(), g.values());
    }
    out.report.perplexity.push_back(std::exp(ce_sum / static_cast<double>(seen)));
  }
  double total = 0.0;
  const std::size_t step = 1024;
  for (std::size_t i = 0; i < data.size(); i += step) {
    const auto part = data.subspan(i, std::min(step, data.size() - i));
    total += model.loss(part, nullptr) * static_cast<double>(part.size());
  }
  out.report.final_cross_entropy = total / static_cast<double>(data.size());
  return out;
}

std::unique_ptr<PriorModel> load_prior(const std::filesystem::path& path) {
  const std::string magic = read_magic(path);
  if (magic == "LMAPTAB1") return std::make_unique<TabularPrior>(TabularPrior::load(path));
  if (magic == "LMAPPRIOR1") return std::make_unique<NeuralPrior>(NeuralPrior::load(path));
  throw ParseError(path.string() + ": unknown prior checkpoint magic '" + magic + "'");
}

}  // namespace lmap
