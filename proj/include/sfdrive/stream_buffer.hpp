#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfdrive/qformer.hpp"

// Fixed-capacity streaming memory over aggregated frame tokens, feeding the
// slow path. Three eviction policies once full: merge the oldest two slots
// into their mean (propagative fusion), drop the oldest (FIFO), or clear
// everything (hard reset).
namespace sfd::buf {

enum class EvictionPolicy { PMF, FIFO, HardReset };

const char* policy_name(EvictionPolicy p);
EvictionPolicy policy_from_name(const std::string& s);

class StreamBuffer {
 public:
  StreamBuffer() = default;
  StreamBuffer(std::size_t capacity, EvictionPolicy policy);

  void push(const qf::FeatureTokens& f);
  // Slots oldest-first; copies of the handles, the buffer is not mutated.
  std::vector<qf::FeatureTokens> snapshot() const { return slots_; }

  std::size_t size() const { return slots_.size(); }
  std::size_t capacity() const { return capacity_; }
  EvictionPolicy policy() const { return policy_; }
  std::uint64_t merge_count() const { return merges_; }
  bool last_push_merged() const { return last_merged_; }

  void clear();
  // BPTT window boundary: keep slot values, cut their graph history.
  void detach_all();

  // One JSON line: policy, per-slot frame index and L2 norm, merge counter.
  std::string debug_json() const;

 private:
  std::size_t capacity_ = 0;
  EvictionPolicy policy_ = EvictionPolicy::PMF;
  std::vector<qf::FeatureTokens> slots_;
  std::uint64_t merges_ = 0;
  bool last_merged_ = false;
};

}  // namespace sfd::buf
