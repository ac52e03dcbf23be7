#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace hgt::cholec {

inline constexpr int kNumTools = 6;
inline constexpr int kNumVerbs = 10;
inline constexpr int kNumTargets = 15;
inline constexpr int kNumTriplets = 100;
inline constexpr int kNumComponents = kNumTools + kNumVerbs + kNumTargets;

/// Component indices of one action-triplet class.
struct TripletClass {
  int tool;
  int verb;
  int target;
};

const std::array<std::string_view, kNumTools>& tool_names();
const std::array<std::string_view, kNumVerbs>& verb_names();
const std::array<std::string_view, kNumTargets>& target_names();

/// The 100 triplet classes in dataset id order.
const std::array<TripletClass, kNumTriplets>& triplet_classes();

/// "tool/verb/target".
std::string triplet_name(int triplet_id);

/// Column order: tools, verbs, targets, then triplets.
std::vector<std::string> triplet_vocabulary();

inline int tool_column(int tool) { return tool; }
inline int verb_column(int verb) { return kNumTools + verb; }
inline int target_column(int target) { return kNumTools + kNumVerbs + target; }
inline int triplet_column(int triplet_id) { return kNumComponents + triplet_id; }

}  // namespace hgt::cholec
