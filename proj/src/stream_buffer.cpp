#include "sfdrive/stream_buffer.hpp"

#include <json.hpp>

#include <cmath>

namespace sfd::buf {

const char* policy_name(EvictionPolicy p) {
  switch (p) {
    case EvictionPolicy::PMF: return "pmf";
    case EvictionPolicy::FIFO: return "fifo";
    case EvictionPolicy::HardReset: return "hard_reset";
  }
  SFD_FAIL("unknown eviction policy");
}

EvictionPolicy policy_from_name(const std::string& s) {
  if (s == "pmf") return EvictionPolicy::PMF;
  if (s == "fifo") return EvictionPolicy::FIFO;
  if (s == "hard_reset") return EvictionPolicy::HardReset;
  SFD_FAIL("unknown eviction policy: " << s);
}

StreamBuffer::StreamBuffer(std::size_t capacity, EvictionPolicy policy)
    : capacity_(capacity), policy_(policy) {
  SFD_CHECK(capacity > 0, "stream buffer: capacity must be positive");
  SFD_CHECK(policy != EvictionPolicy::PMF || capacity >= 2,
            "stream buffer: pmf eviction merges the two oldest slots and "
            "needs capacity >= 2, got " << capacity);
}

void StreamBuffer::push(const qf::FeatureTokens& f) {
  SFD_CHECK(capacity_ > 0, "stream buffer: not configured");
  SFD_CHECK(f.tokens.defined() && f.tokens.ndim() == 2,
            "stream buffer: slot must be a 2D token block");
  if (!slots_.empty())
    SFD_CHECK(f.tokens.shape() == slots_.front().tokens.shape(),
              "stream buffer: slot shape " << f.tokens.shape_str()
                                           << " != existing "
                                           << slots_.front().tokens.shape_str());
  last_merged_ = false;
  if (slots_.size() == capacity_) {
    switch (policy_) {
      case EvictionPolicy::PMF: {
        // fold the to-be-evicted frame into its neighbor: mean of the two
        // oldest slots, tagged with the newer frame index
        qf::FeatureTokens merged;
        merged.tokens =
            ad::mul_scalar(ad::add(slots_[0].tokens, slots_[1].tokens), 0.5);
        merged.frame_index = slots_[1].frame_index;
        slots_[0] = merged;
        slots_.erase(slots_.begin() + 1);
        ++merges_;
        last_merged_ = true;
        break;
      }
      case EvictionPolicy::FIFO:
        slots_.erase(slots_.begin());
        break;
      case EvictionPolicy::HardReset:
        slots_.clear();
        break;
    }
  }
  slots_.push_back(f);
  SFD_CHECK(slots_.size() <= capacity_, "stream buffer: capacity exceeded");
}

void StreamBuffer::clear() {
  slots_.clear();
  last_merged_ = false;
}

void StreamBuffer::detach_all() {
  for (auto& s : slots_) s.tokens = s.tokens.detached();
}

std::string StreamBuffer::debug_json() const {
  nlohmann::json j;
  j["policy"] = policy_name(policy_);
  j["capacity"] = capacity_;
  j["merges"] = merges_;
  j["last_push_merged"] = last_merged_;
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& s : slots_) {
    double sq = 0.0;
    for (std::size_t i = 0; i < s.tokens.size(); ++i)
      sq += s.tokens.data()[i] * s.tokens.data()[i];
    slots.push_back({{"frame", s.frame_index}, {"l2", std::sqrt(sq)}});
  }
  j["slots"] = slots;
  return j.dump();
}

}  // namespace sfd::buf
