#pragma once

// Element-wise merge of per-task shared-span masks into the final shared
// mask: Logical OR (a bit is pruned only if every task prunes it) or
// Majority Vote (kept when more than half the tasks keep it; ties on even K
// keep by default). Pure functions on immutable inputs.

#include <stdexcept>
#include <string>
#include <vector>

#include "disparse/model.hpp"

namespace disparse {

struct ArbiterKind {
  enum Kind { Or, Majority } kind = Or;
  bool tie_keep = true;  // majority only; reachable only for even K
};

inline const char* arbiter_name(const ArbiterKind& a) {
  return a.kind == ArbiterKind::Or ? "or" : "majority";
}
inline ArbiterKind arbiter_from(const std::string& s, bool tie_keep = true) {
  if (s == "or") return ArbiterKind{ArbiterKind::Or, tie_keep};
  if (s == "majority") return ArbiterKind{ArbiterKind::Majority, tie_keep};
  throw std::invalid_argument("unknown arbiter kind: " + s);
}

inline Mask merge(const std::vector<Mask>& masks, const ArbiterKind& kind) {
  if (masks.empty()) throw std::invalid_argument("merge: need at least one mask");
  std::size_t k = masks.size();
  if (kind.kind == ArbiterKind::Majority && k < 3)
    throw std::invalid_argument("merge: majority vote requires K >= 3 tasks, got " +
                                std::to_string(k));
  std::size_t len = masks[0].size();
  for (const auto& m : masks)
    if (m.size() != len)
      throw std::invalid_argument("merge: mask length mismatch (" + std::to_string(m.size()) +
                                  " vs " + std::to_string(len) + ")");

  Mask out = masks[0];
  if (kind.kind == ArbiterKind::Or) {
    for (std::size_t j = 0; j < len; ++j) {
      std::uint8_t bit = 0;
      for (const auto& m : masks) bit |= m.bits[j];
      out.bits[j] = bit;
    }
  } else {
    for (std::size_t j = 0; j < len; ++j) {
      std::size_t votes = 0;
      for (const auto& m : masks) votes += m.bits[j];
      bool keep = 2 * votes > k || (kind.tie_keep && 2 * votes == k);
      out.bits[j] = keep ? 1 : 0;
    }
  }
  return out;
}

// Concatenate the shared mask with every task's private mask into one
// full-model mask under the canonical [shared | task1 | task2 | ...] layout.
// Task order follows the given list; layer offsets are rebased.
inline Mask assemble_full_mask(const Mask& shared,
                               const std::vector<std::pair<std::string, Mask>>& per_task) {
  Mask full;
  full.partition_ref = "full";
  auto append = [&](const Mask& m) {
    std::size_t base = full.bits.size();
    for (const auto& lr : m.layout.layers) {
      LayerRange r = lr;
      r.begin += base;
      r.end += base;
      full.layout.layers.push_back(r);
    }
    full.bits.insert(full.bits.end(), m.bits.begin(), m.bits.end());
  };
  append(shared);
  for (const auto& [task, m] : per_task) append(m);
  full.layout.size = full.bits.size();
  full.validate();
  return full;
}

// Inverse of assemble_full_mask given the span sizes.
inline std::pair<Mask, std::vector<std::pair<std::string, Mask>>> split_full_mask(
    const Mask& full, const Mask& shared_template,
    const std::vector<std::pair<std::string, Mask>>& task_templates) {
  std::size_t expected = shared_template.size();
  for (const auto& [id, m] : task_templates) expected += m.size();
  if (full.size() != expected)
    throw std::invalid_argument("split_full_mask: span sizes do not cover the full mask");

  std::size_t cursor = 0;
  auto take = [&](const Mask& tmpl) {
    Mask m = tmpl;
    std::copy_n(full.bits.begin() + cursor, tmpl.size(), m.bits.begin());
    cursor += tmpl.size();
    return m;
  };
  Mask shared = take(shared_template);
  std::vector<std::pair<std::string, Mask>> tasks;
  for (const auto& [id, tmpl] : task_templates) tasks.emplace_back(id, take(tmpl));
  return {shared, tasks};
}

}  // namespace disparse
