#include "neuromhe/neuro.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

namespace neuromhe {

namespace {

Vector relu(const Vector& z) { return z.cwiseMax(0.0); }

Vector relu_mask(const Vector& z) { return (z.array() > 0.0).cast<double>().matrix(); }

double sigmoid(double x) {
  const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return std::clamp(s, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

template <class M>
void fill_uniform(M& m, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = d(rng);
}

void check_layout(const Vector& raw, const WeightLayout& l) {
  if (raw.size() != l.size()) throw ConfigError("raw network output has wrong length");
}

}  // namespace

MlpParams MlpParams::zeros(int input, int h1, int h2, int output) {
  if (input <= 0 || h1 <= 0 || h2 <= 0 || output <= 0) throw ConfigError("network dimensions must be positive");
  return {Matrix::Zero(h1, input), Vector::Zero(h1), Matrix::Zero(h2, h1),
          Vector::Zero(h2),        Matrix::Zero(output, h2), Vector::Zero(output)};
}

MlpParams MlpParams::init_uniform(int input, int h1, int h2, int output, std::uint64_t seed, double output_scale) {
  MlpParams p = zeros(input, h1, h2, output);
  std::mt19937_64 rng(seed);
  const double s1 = 1.0 / std::sqrt(input), s2 = 1.0 / std::sqrt(h1), so = 1.0 / std::sqrt(h2);
  fill_uniform(p.A1, s1, rng);
  fill_uniform(p.b1, s1, rng);
  fill_uniform(p.A2, s2, rng);
  fill_uniform(p.b2, s2, rng);
  fill_uniform(p.Ao, so, rng);
  fill_uniform(p.bo, so, rng);
  p.Ao *= output_scale;
  p.bo *= output_scale;
  return p;
}

int MlpParams::size() const {
  return static_cast<int>(A1.size() + b1.size() + A2.size() + b2.size() + Ao.size() + bo.size());
}

Vector MlpParams::flatten() const {
  Vector v(size());
  Eigen::Index o = 0;
  auto put = [&](const auto& m) {
    v.segment(o, m.size()) = m.reshaped();
    o += m.size();
  };
  put(A1);
  put(b1);
  put(A2);
  put(b2);
  put(Ao);
  put(bo);
  return v;
}

void MlpParams::unflatten(const Vector& v) {
  if (v.size() != size()) throw ConfigError("flat parameter vector has wrong length");
  Eigen::Index o = 0;
  auto get = [&](auto& m) {
    m.reshaped() = v.segment(o, m.size());
    o += m.size();
  };
  get(A1);
  get(b1);
  get(A2);
  get(b2);
  get(Ao);
  get(bo);
}

void MlpParams::validate() const {
  if (b1.size() != A1.rows() || A2.cols() != A1.rows() || b2.size() != A2.rows() || Ao.cols() != A2.rows() ||
      bo.size() != Ao.rows() || A1.size() == 0) {
    throw ConfigError("inconsistent network parameter shapes");
  }
  if (!flatten().allFinite()) throw ConfigError("non-finite network parameters");
}

Standardizer Standardizer::fit(const VectorSeq& samples, double min_scale) {
  if (samples.empty()) throw ConfigError("cannot fit a standardizer without samples");
  const Eigen::Index n = samples.front().size();
  Standardizer s{Vector::Zero(n), Vector::Zero(n)};
  for (const auto& y : samples) s.mean += y;
  s.mean /= static_cast<double>(samples.size());
  for (const auto& y : samples) s.scale += (y - s.mean).cwiseAbs2();
  s.scale = (s.scale / static_cast<double>(samples.size())).cwiseSqrt().cwiseMax(min_scale);
  return s;
}

Vector Standardizer::apply(const Vector& y) const {
  if (y.size() != mean.size()) throw ConfigError("standardizer dimension mismatch");
  return (y - mean).cwiseQuotient(scale);
}

Vector mlp_forward(const MlpParams& p, const Vector& y, MlpCache* cache) {
  if (y.size() != p.input_dim()) throw ConfigError("network input has wrong dimension");
  Vector z1 = p.A1 * y + p.b1;
  Vector a1 = relu(z1);
  Vector z2 = p.A2 * a1 + p.b2;
  Vector a2 = relu(z2);
  Vector out = p.Ao * a2 + p.bo;
  if (cache) *cache = {y, std::move(z1), std::move(a1), std::move(z2), std::move(a2), out};
  return out;
}

MlpParams mlp_backward(const MlpParams& p, const MlpCache& c, const Vector& upstream) {
  if (upstream.size() != p.output_dim()) throw ConfigError("upstream gradient has wrong dimension");
  MlpParams g;
  g.bo = upstream;
  g.Ao = upstream * c.a2.transpose();
  const Vector d2 = (p.Ao.transpose() * upstream).cwiseProduct(relu_mask(c.z2));
  g.b2 = d2;
  g.A2 = d2 * c.a1.transpose();
  const Vector d1 = (p.A2.transpose() * d2).cwiseProduct(relu_mask(c.z1));
  g.b1 = d1;
  g.A1 = d1 * c.input.transpose();
  return g;
}

WeightSpec map_to_weights(const Vector& raw, const WeightLayout& l, double floor, double r_fixed, double r_floor) {
  check_layout(raw, l);
  if (!(floor > 0.0)) throw ConfigError("positivity floor must be positive");
  if (r_floor < 0.0) r_floor = floor;
  if (r_floor < floor) throw ConfigError("measurement floor must not be below the positivity floor");
  auto sq = [floor](double v) { return floor + v * v; };
  WeightSpec w;
  w.P.resize(l.nx);
  w.R.resize(l.ny);
  w.Q.resize(l.nw);
  for (int i = 0; i < l.nx; ++i) w.P[i] = sq(raw[l.p(i)]);
  w.R[0] = r_fixed;
  for (int j = 1; j < l.ny; ++j) w.R[j] = r_floor + raw[l.r(j)] * raw[l.r(j)];
  for (int i = 0; i < l.nw; ++i) w.Q[i] = sq(raw[l.q(i)]);
  w.gamma1 = sigmoid(raw[l.gamma1()]);
  w.gamma2 = sigmoid(raw[l.gamma2()]);
  return w;
}

Vector weights_jacobian(const Vector& raw, const WeightLayout& l) {
  check_layout(raw, l);
  Vector d = 2.0 * raw;
  const double g1 = sigmoid(raw[l.gamma1()]), g2 = sigmoid(raw[l.gamma2()]);
  d[l.gamma1()] = g1 * (1.0 - g1);
  d[l.gamma2()] = g2 * (1.0 - g2);
  return d;
}

Vector weights_to_raw(const WeightSpec& w, double floor, double r_floor) {
  const WeightLayout l = w.layout();
  if (r_floor < 0.0) r_floor = floor;
  Vector raw(l.size());
  auto root = [](double v, double f) { return std::sqrt(std::max(v - f, 0.0)); };
  for (int i = 0; i < l.nx; ++i) raw[l.p(i)] = root(w.P[i], floor);
  for (int j = 1; j < l.ny; ++j) raw[l.r(j)] = root(w.R[j], r_floor);
  for (int i = 0; i < l.nw; ++i) raw[l.q(i)] = root(w.Q[i], floor);
  raw[l.gamma1()] = std::log(w.gamma1 / (1.0 - w.gamma1));
  raw[l.gamma2()] = std::log(w.gamma2 / (1.0 - w.gamma2));
  return raw;
}

namespace {

void write_block(std::ostream& os, const char* name, const Matrix& m) {
  os << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
    os << '\n';
  }
}

void write_row(std::ostream& os, const char* name, const Vector& v) {
  os << name << ' ' << v.size();
  for (Eigen::Index i = 0; i < v.size(); ++i) os << ' ' << v[i];
  os << '\n';
}

template <class T>
T read_token(std::istream& is, const char* what) {
  T v;
  if (!(is >> v)) throw ParseError(std::string("checkpoint: cannot read ") + what, 0, 0);
  return v;
}

void expect_word(std::istream& is, const std::string& word) {
  const auto got = read_token<std::string>(is, word.c_str());
  if (got != word) throw ParseError("checkpoint: expected '" + word + "' but found '" + got + "'", 0, 0);
}

Matrix read_block(std::istream& is, const char* name, Eigen::Index rows, Eigen::Index cols) {
  expect_word(is, name);
  const auto r = read_token<Eigen::Index>(is, name), c = read_token<Eigen::Index>(is, name);
  if (r != rows || c != cols) throw ParseError(std::string("checkpoint: block ") + name + " has unexpected shape", 0, 0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = read_token<double>(is, name);
  return m;
}

Vector read_row(std::istream& is, const char* name, Eigen::Index n) {
  expect_word(is, name);
  if (read_token<Eigen::Index>(is, name) != n) throw ParseError(std::string("checkpoint: ") + name + " has wrong length", 0, 0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = read_token<double>(is, name);
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  ck.params.validate();
  const auto& p = ck.params;
  os << std::setprecision(17);
  os << "neuromhe-mlp 2\n";
  os << "policy " << (ck.fixed ? "fixed" : "neural") << '\n';
  os << "map " << ck.floor << ' ' << ck.r_fixed << ' ' << ck.r_floor << '\n';
  os << "seed " << ck.seed << '\n';
  os << "dims " << p.input_dim() << ' ' << p.hidden1() << ' ' << p.hidden2() << ' ' << p.output_dim() << '\n';
  os << "standardizer " << (ck.standardizer ? 1 : 0) << '\n';
  if (ck.standardizer) {
    write_row(os, "mean", ck.standardizer->mean);
    write_row(os, "scale", ck.standardizer->scale);
  }
  write_block(os, "A1", p.A1);
  write_block(os, "b1", p.b1);
  write_block(os, "A2", p.A2);
  write_block(os, "b2", p.b2);
  write_block(os, "Ao", p.Ao);
  write_block(os, "bo", p.bo);
}

Checkpoint read_checkpoint(std::istream& is) {
  expect_word(is, "neuromhe-mlp");
  const int version = read_token<int>(is, "version");
  if (version != 1 && version != 2) throw ParseError("checkpoint: unsupported version", 0, 0);
  Checkpoint ck;
  if (version == 2) {
    expect_word(is, "policy");
    const auto kind = read_token<std::string>(is, "policy");
    if (kind != "neural" && kind != "fixed") throw ParseError("checkpoint: unknown policy '" + kind + "'", 0, 0);
    ck.fixed = kind == "fixed";
    expect_word(is, "map");
    ck.floor = read_token<double>(is, "map");
    ck.r_fixed = read_token<double>(is, "map");
    ck.r_floor = read_token<double>(is, "map");
  }
  expect_word(is, "seed");
  ck.seed = read_token<std::uint64_t>(is, "seed");
  expect_word(is, "dims");
  const int in = read_token<int>(is, "dims"), h1 = read_token<int>(is, "dims"), h2 = read_token<int>(is, "dims"),
            out = read_token<int>(is, "dims");
  if (in <= 0 || h1 <= 0 || h2 <= 0 || out <= 0) throw ParseError("checkpoint: invalid dimensions", 0, 0);
  expect_word(is, "standardizer");
  if (read_token<int>(is, "standardizer") == 1) {
    Standardizer s;
    s.mean = read_row(is, "mean", in);
    s.scale = read_row(is, "scale", in);
    ck.standardizer = s;
  }
  auto& p = ck.params;
  p.A1 = read_block(is, "A1", h1, in);
  p.b1 = read_block(is, "b1", h1, 1);
  p.A2 = read_block(is, "A2", h2, h1);
  p.b2 = read_block(is, "b2", h2, 1);
  p.Ao = read_block(is, "Ao", out, h2);
  p.bo = read_block(is, "bo", out, 1);
  p.validate();
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);
  write_checkpoint(os, ck);
  if (!os) throw Error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open checkpoint: " + path);
  return read_checkpoint(is);
}

}  // namespace neuromhe
