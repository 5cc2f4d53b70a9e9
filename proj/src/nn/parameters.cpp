#include "inv2a/nn/parameters.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

namespace inv2a::nn {

void ParameterSet::add(std::string name, Var param) { items_.emplace_back(std::move(name), std::move(param)); }

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : items_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void ParameterSet::set_requires_grad(bool on) {
  for (auto& [_, v] : items_) v.set_requires_grad(on);
}

void ParameterSet::zero_grad() {
  for (auto& [_, v] : items_) v.zero_grad();
}

std::vector<Var> ParameterSet::vars() const {
  std::vector<Var> out;
  out.reserve(items_.size());
  for (const auto& [_, v] : items_) out.push_back(v);
  return out;
}

std::vector<Matrix> ParameterSet::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(items_.size());
  for (const auto& [_, v] : items_) out.push_back(v.value());
  return out;
}

bool ParameterSet::bit_identical(const std::vector<Matrix>& snap) const {
  if (snap.size() != items_.size()) return false;
  for (std::size_t i = 0; i < snap.size(); ++i) {
    const Matrix& a = items_[i].second.value();
    const Matrix& b = snap[i];
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) != 0) return false;
  }
  return true;
}

std::map<std::string, Matrix> ParameterSet::to_map() const {
  std::map<std::string, Matrix> out;
  for (const auto& [name, v] : items_) out.emplace(name, v.value());
  return out;
}

void ParameterSet::load_map(const std::map<std::string, Matrix>& tensors) {
  for (auto& [name, v] : items_) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("missing tensor '" + name + "'");
    if (it->second.rows() != v.rows() || it->second.cols() != v.cols()) {
      throw DimensionError("tensor '" + name + "' has unexpected shape");
    }
    v.mutable_value() = it->second;
  }
}

namespace {

constexpr std::array<char, 8> kMagic{'I', 'N', 'V', '2', 'A', 'T', 'E', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                 static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw FormatError("tensor container truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensors(const std::filesystem::path& path, const std::map<std::string, Matrix>& tensors) {
  static_assert(sizeof(double) == 8);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

std::map<std::string, Matrix> read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError(path.string() + " is not a tensor container");
  if (get_u32(in) != kVersion) throw FormatError("unsupported tensor container version");
  const std::uint32_t count = get_u32(in);
  std::map<std::string, Matrix> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get_u32(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rows = get_u32(in);
    const auto cols = get_u32(in);
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw FormatError("tensor container truncated in '" + name + "'");
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

AdamW::AdamW(std::vector<Var> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::step() {
  ++t_;
  double scale = 1.0;
  if (config_.clip_norm > 0) {
    double sq = 0.0;
    for (const auto& p : params_) {
      if (p.grad().size() != 0) sq += p.grad().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.grad().size() == 0) continue;
    const Matrix g = p.grad() * scale;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    Matrix& w = p.mutable_value();
    w *= (1.0 - config_.lr * config_.weight_decay);
    w.array() -= config_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
  zero_grad();
}

}  // namespace inv2a::nn
