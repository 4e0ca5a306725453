#include "vsla/params.hpp"

#include <cstring>
#include <stdexcept>

namespace vsla {

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kIfa: return "ifa";
    case ParamGroup::kCfaa: return "cfaa";
    case ParamGroup::kPbp: return "pbp";
    case ParamGroup::kHead: return "head";
    case ParamGroup::kPrompts: return "prompts";
    case ParamGroup::kTextBackbone: return "text_backbone";
  }
  return "unknown";
}

std::optional<ParamGroup> parse_group(std::string_view name) {
  for (auto g : kAllGroups)
    if (group_name(g) == name) return g;
  return std::nullopt;
}

bool GroupMask::empty() const {
  for (bool b : bits_)
    if (b) return false;
  return true;
}

void ParamStore::add(ParamSpec spec, Matrix init) {
  if (init.rows() != spec.rows || init.cols() != spec.cols)
    throw std::invalid_argument("parameter '" + spec.name + "' initialised with wrong shape");
  if (has(spec.name)) throw std::invalid_argument("duplicate parameter '" + spec.name + "'");
  index_[spec.name] = params_.size();
  params_.push_back(Parameter{std::move(spec), std::move(init)});
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return params_[it->second];
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return params_[it->second];
}

std::int64_t ParamStore::count(ParamGroup g) const {
  std::int64_t n = 0;
  for (const auto& p : params_)
    if (p.spec.group == g) n += p.spec.count();
  return n;
}

std::uint64_t ParamStore::group_hash(ParamGroup g) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) {
    if (p.spec.group != g) continue;
    mix(p.spec.name.data(), p.spec.name.size());
    mix(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(double));
  }
  return h;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.spec.name != b.spec.name || a.spec.group != b.spec.group ||
        a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
      return false;
    if (std::memcmp(a.value.data(), b.value.data(),
                    static_cast<std::size_t>(a.value.size()) * sizeof(double)) != 0)
      return false;
  }
  return true;
}

std::int64_t count_params(const ParamLayout& layout, ParamGroup g) {
  std::int64_t n = 0;
  for (const auto& s : layout)
    if (s.group == g) n += s.count();
  return n;
}

Var TapeBinding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Parameter& p = store_.at(name);
  Var v = trainable_.contains(p.spec.group) ? tape_.leaf(p.value) : tape_.constant(p.value);
  bound_.emplace(name, v);
  return v;
}

std::map<std::string, Matrix> TapeBinding::gradients() const {
  std::map<std::string, Matrix> out;
  for (const auto& [name, v] : bound_)
    if (tape_.requires_grad(v)) out.emplace(name, tape_.grad(v));
  return out;
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace vsla
