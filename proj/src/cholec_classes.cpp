#include "hgt/cholec_classes.hpp"

namespace hgt::cholec {

const std::array<std::string_view, kNumTools>& tool_names() {
  static const std::array<std::string_view, kNumTools> names = {
      "grasper", "bipolar", "hook", "scissors", "clip-applier", "irrigator"};
  return names;
}

const std::array<std::string_view, kNumVerbs>& verb_names() {
  static const std::array<std::string_view, kNumVerbs> names = {
      "grasp", "retract", "dissect", "coagulate", "clip", "cut", "aspirate", "irrigate", "pack", "null-verb"};
  return names;
}

const std::array<std::string_view, kNumTargets>& target_names() {
  static const std::array<std::string_view, kNumTargets> names = {
      "gallbladder", "cystic-plate", "cystic-duct", "cystic-artery", "cystic-pedicle",
      "blood-vessel", "fluid", "abdominal-wall-cavity", "liver", "adhesion",
      "omentum", "peritoneum", "gut", "specimen-bag", "null-target"};
  return names;
}

const std::array<TripletClass, kNumTriplets>& triplet_classes() {
  static const std::array<TripletClass, kNumTriplets> table = {{
      {0, 2, 1},  //  0 grasper/dissect/cystic-plate
      {0, 2, 0},  //  1 grasper/dissect/gallbladder
      {0, 2, 10},  //  2 grasper/dissect/omentum
      {0, 0, 3},  //  3 grasper/grasp/cystic-artery
      {0, 0, 2},  //  4 grasper/grasp/cystic-duct
      {0, 0, 4},  //  5 grasper/grasp/cystic-pedicle
      {0, 0, 1},  //  6 grasper/grasp/cystic-plate
      {0, 0, 0},  //  7 grasper/grasp/gallbladder
      {0, 0, 12},  //  8 grasper/grasp/gut
      {0, 0, 8},  //  9 grasper/grasp/liver
      {0, 0, 10},  // 10 grasper/grasp/omentum
      {0, 0, 11},  // 11 grasper/grasp/peritoneum
      {0, 0, 13},  // 12 grasper/grasp/specimen-bag
      {0, 8, 0},  // 13 grasper/pack/gallbladder
      {0, 1, 2},  // 14 grasper/retract/cystic-duct
      {0, 1, 4},  // 15 grasper/retract/cystic-pedicle
      {0, 1, 1},  // 16 grasper/retract/cystic-plate
      {0, 1, 0},  // 17 grasper/retract/gallbladder
      {0, 1, 12},  // 18 grasper/retract/gut
      {0, 1, 8},  // 19 grasper/retract/liver
      {0, 1, 10},  // 20 grasper/retract/omentum
      {0, 1, 11},  // 21 grasper/retract/peritoneum
      {1, 3, 7},  // 22 bipolar/coagulate/abdominal-wall-cavity
      {1, 3, 5},  // 23 bipolar/coagulate/blood-vessel
      {1, 3, 3},  // 24 bipolar/coagulate/cystic-artery
      {1, 3, 2},  // 25 bipolar/coagulate/cystic-duct
      {1, 3, 4},  // 26 bipolar/coagulate/cystic-pedicle
      {1, 3, 1},  // 27 bipolar/coagulate/cystic-plate
      {1, 3, 0},  // 28 bipolar/coagulate/gallbladder
      {1, 3, 8},  // 29 bipolar/coagulate/liver
      {1, 3, 10},  // 30 bipolar/coagulate/omentum
      {1, 3, 11},  // 31 bipolar/coagulate/peritoneum
      {1, 2, 9},  // 32 bipolar/dissect/adhesion
      {1, 2, 3},  // 33 bipolar/dissect/cystic-artery
      {1, 2, 2},  // 34 bipolar/dissect/cystic-duct
      {1, 2, 1},  // 35 bipolar/dissect/cystic-plate
      {1, 2, 0},  // 36 bipolar/dissect/gallbladder
      {1, 2, 10},  // 37 bipolar/dissect/omentum
      {1, 0, 1},  // 38 bipolar/grasp/cystic-plate
      {1, 0, 8},  // 39 bipolar/grasp/liver
      {1, 0, 13},  // 40 bipolar/grasp/specimen-bag
      {1, 1, 2},  // 41 bipolar/retract/cystic-duct
      {1, 1, 4},  // 42 bipolar/retract/cystic-pedicle
      {1, 1, 0},  // 43 bipolar/retract/gallbladder
      {1, 1, 8},  // 44 bipolar/retract/liver
      {1, 1, 10},  // 45 bipolar/retract/omentum
      {2, 3, 5},  // 46 hook/coagulate/blood-vessel
      {2, 3, 3},  // 47 hook/coagulate/cystic-artery
      {2, 3, 2},  // 48 hook/coagulate/cystic-duct
      {2, 3, 4},  // 49 hook/coagulate/cystic-pedicle
      {2, 3, 1},  // 50 hook/coagulate/cystic-plate
      {2, 3, 0},  // 51 hook/coagulate/gallbladder
      {2, 3, 8},  // 52 hook/coagulate/liver
      {2, 3, 10},  // 53 hook/coagulate/omentum
      {2, 5, 5},  // 54 hook/cut/blood-vessel
      {2, 5, 11},  // 55 hook/cut/peritoneum
      {2, 2, 5},  // 56 hook/dissect/blood-vessel
      {2, 2, 3},  // 57 hook/dissect/cystic-artery
      {2, 2, 2},  // 58 hook/dissect/cystic-duct
      {2, 2, 1},  // 59 hook/dissect/cystic-plate
      {2, 2, 0},  // 60 hook/dissect/gallbladder
      {2, 2, 10},  // 61 hook/dissect/omentum
      {2, 2, 11},  // 62 hook/dissect/peritoneum
      {2, 1, 0},  // 63 hook/retract/gallbladder
      {2, 1, 8},  // 64 hook/retract/liver
      {3, 3, 10},  // 65 scissors/coagulate/omentum
      {3, 5, 9},  // 66 scissors/cut/adhesion
      {3, 5, 5},  // 67 scissors/cut/blood-vessel
      {3, 5, 3},  // 68 scissors/cut/cystic-artery
      {3, 5, 2},  // 69 scissors/cut/cystic-duct
      {3, 5, 1},  // 70 scissors/cut/cystic-plate
      {3, 5, 8},  // 71 scissors/cut/liver
      {3, 5, 10},  // 72 scissors/cut/omentum
      {3, 5, 11},  // 73 scissors/cut/peritoneum
      {3, 2, 1},  // 74 scissors/dissect/cystic-plate
      {3, 2, 0},  // 75 scissors/dissect/gallbladder
      {3, 2, 10},  // 76 scissors/dissect/omentum
      {4, 4, 5},  // 77 clip-applier/clip/blood-vessel
      {4, 4, 3},  // 78 clip-applier/clip/cystic-artery
      {4, 4, 2},  // 79 clip-applier/clip/cystic-duct
      {4, 4, 4},  // 80 clip-applier/clip/cystic-pedicle
      {4, 4, 1},  // 81 clip-applier/clip/cystic-plate
      {5, 6, 6},  // 82 irrigator/aspirate/fluid
      {5, 2, 2},  // 83 irrigator/dissect/cystic-duct
      {5, 2, 4},  // 84 irrigator/dissect/cystic-pedicle
      {5, 2, 1},  // 85 irrigator/dissect/cystic-plate
      {5, 2, 0},  // 86 irrigator/dissect/gallbladder
      {5, 2, 10},  // 87 irrigator/dissect/omentum
      {5, 7, 7},  // 88 irrigator/irrigate/abdominal-wall-cavity
      {5, 7, 4},  // 89 irrigator/irrigate/cystic-pedicle
      {5, 7, 8},  // 90 irrigator/irrigate/liver
      {5, 1, 0},  // 91 irrigator/retract/gallbladder
      {5, 1, 8},  // 92 irrigator/retract/liver
      {5, 1, 10},  // 93 irrigator/retract/omentum
      {0, 9, 14},  // 94 grasper/null-verb/null-target
      {1, 9, 14},  // 95 bipolar/null-verb/null-target
      {2, 9, 14},  // 96 hook/null-verb/null-target
      {3, 9, 14},  // 97 scissors/null-verb/null-target
      {4, 9, 14},  // 98 clip-applier/null-verb/null-target
      {5, 9, 14},  // 99 irrigator/null-verb/null-target
  }};
  return table;
}

std::string triplet_name(int triplet_id) {
  const auto& c = triplet_classes().at(static_cast<std::size_t>(triplet_id));
  std::string name(tool_names()[c.tool]);
  name += '/';
  name += verb_names()[c.verb];
  name += '/';
  name += target_names()[c.target];
  return name;
}

std::vector<std::string> triplet_vocabulary() {
  std::vector<std::string> vocab;
  vocab.reserve(kNumComponents + kNumTriplets);
  for (auto n : tool_names()) vocab.emplace_back(n);
  for (auto n : verb_names()) vocab.emplace_back(n);
  for (auto n : target_names()) vocab.emplace_back(n);
  for (int k = 0; k < kNumTriplets; ++k) vocab.push_back(triplet_name(k));
  return vocab;
}

}  // namespace hgt::cholec
