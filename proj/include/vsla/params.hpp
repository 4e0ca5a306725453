#pragma once

#include "vsla/tape.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace vsla {

/// Named parameter groups; checkpoints and trainability masks work per group.
enum class ParamGroup : int {
  kBackbone = 0,
  kIfa,
  kCfaa,
  kPbp,
  kHead,
  kPrompts,
  kTextBackbone,
};

inline constexpr std::array<ParamGroup, 7> kAllGroups = {
    ParamGroup::kBackbone, ParamGroup::kIfa,     ParamGroup::kCfaa,        ParamGroup::kPbp,
    ParamGroup::kHead,     ParamGroup::kPrompts, ParamGroup::kTextBackbone};

std::string_view group_name(ParamGroup g);
std::optional<ParamGroup> parse_group(std::string_view name);

struct ParamSpec {
  std::string name;
  ParamGroup group;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  std::int64_t count() const { return static_cast<std::int64_t>(rows) * cols; }
};

using ParamLayout = std::vector<ParamSpec>;

/// Set of trainable groups.
class GroupMask {
 public:
  GroupMask() = default;
  GroupMask(std::initializer_list<ParamGroup> groups) {
    for (auto g : groups) set(g);
  }
  void set(ParamGroup g, bool on = true) { bits_[static_cast<int>(g)] = on; }
  bool contains(ParamGroup g) const { return bits_[static_cast<int>(g)]; }
  bool empty() const;
  bool operator==(const GroupMask&) const = default;

 private:
  std::array<bool, kAllGroups.size()> bits_{};
};

struct Parameter {
  ParamSpec spec;
  Matrix value;
};

/// Ordered collection of named parameters.
class ParamStore {
 public:
  void add(ParamSpec spec, Matrix init);
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter>& params() { return params_; }

  std::int64_t count(ParamGroup g) const;

  /// FNV-1a over the raw bytes of every parameter in the group, in order.
  std::uint64_t group_hash(ParamGroup g) const;

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

std::int64_t count_params(const ParamLayout& layout, ParamGroup g);

/// Creates tape leaves (trainable groups) or constants (frozen groups) for
/// parameters on first use, and collects their gradients after backward.
class TapeBinding {
 public:
  TapeBinding(Tape& tape, const ParamStore& store, GroupMask trainable)
      : tape_(tape), store_(store), trainable_(trainable) {}

  Var operator()(const std::string& name);
  Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

  /// Gradients for every trainable parameter touched by the forward pass.
  std::map<std::string, Matrix> gradients() const;

 private:
  Tape& tape_;
  const ParamStore& store_;
  GroupMask trainable_;
  std::map<std::string, Var> bound_;
};

/// Fills a matrix with N(0, std^2) draws.
Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

}  // namespace vsla
