#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dapper/packet.hpp"

namespace dapper {

/// Bidirectional identity of a connection: (ip_a, port_a) is the endpoint
/// that compares greater under the orientation rule.
struct CanonicalKey {
  std::uint32_t ip_a = 0;
  std::uint32_t ip_b = 0;
  std::uint16_t port_a = 0;
  std::uint16_t port_b = 0;

  std::array<std::uint8_t, 12> bytes() const noexcept;

  friend bool operator==(const CanonicalKey&, const CanonicalKey&) = default;
};

enum class Direction { forward, reverse };

/// Forward when the packet travels a -> b, reverse otherwise.
std::pair<CanonicalKey, Direction> canonicalize(std::uint32_t src_ip, std::uint32_t dst_ip,
                                                std::uint16_t src_port,
                                                std::uint16_t dst_port) noexcept;

inline std::pair<CanonicalKey, Direction> canonicalize(const PacketRecord& p) noexcept {
  return canonicalize(p.src_ip, p.dst_ip, p.src_port, p.dst_port);
}

/// IEEE CRC-32 over the 12-byte canonical key.
std::uint32_t key_crc32(const CanonicalKey& key) noexcept;

/// CRC-32 masked to log2(table_size) bits. table_size must be a power of
/// two, at least 2.
std::size_t hash_index(const CanonicalKey& key, std::size_t table_size);

constexpr bool is_power_of_two(std::size_t n) noexcept { return n >= 2 && (n & (n - 1)) == 0; }

/// 1 - (1 - 1/N)^(k-1): chance that a new flow shares its index with one
/// of k-1 others.
double expected_collision_probability(std::size_t flows, std::size_t table_size);

enum class TableMode { software, hardware_emu };

struct TableAccounting {
  std::size_t flows_tracked = 0;
  std::size_t phase1_bytes = 0;
  std::size_t phase2_bytes = 0;
  std::size_t evictions = 0;
  std::size_t collisions_detected = 0;
};

struct TableConfig {
  TableMode mode = TableMode::software;
  std::size_t table_size = std::size_t{1} << 18;
  // 0: unbounded (software mode only).
  std::size_t max_flows = 0;
};

/// Per-flow storage in one of two modes. Software mode chains distinct keys
/// within a bucket. Hardware-emulation mode keeps one payload per index and
/// never stores or compares keys.
template <class Payload>
class FlowTable {
 public:
  struct Slot {
    std::size_t index = 0;
    std::optional<CanonicalKey> stored_key;
    Timestamp update_time = 0;
    bool sanity_ok = true;
    Payload payload{};
  };

  struct Lookup {
    Slot* slot = nullptr;
    bool fresh = false;
  };

  explicit FlowTable(TableConfig cfg) : cfg_(cfg) {
    if (!is_power_of_two(cfg_.table_size)) {
      throw std::invalid_argument("flow table size must be a power of two >= 2");
    }
    if (cfg_.mode == TableMode::software) {
      buckets_.resize(cfg_.table_size);
    } else {
      hw_slots_.resize(cfg_.table_size);
    }
  }

  const TableConfig& config() const noexcept { return cfg_; }
  TableMode mode() const noexcept { return cfg_.mode; }

  Lookup lookup_or_insert(const CanonicalKey& key, Timestamp now) {
    const std::size_t idx = hash_index(key, cfg_.table_size);
    if (cfg_.mode == TableMode::hardware_emu) {
      auto& cell = hw_slots_[idx];
      Lookup out;
      if (!cell) {
        cell = std::make_unique<Slot>();
        cell->index = idx;
        ++tracked_;
        out.fresh = true;
      }
      cell->update_time = now;
      out.slot = cell.get();
      return out;
    }
    auto& chain = buckets_[idx];
    for (auto& s : chain) {
      if (s.stored_key == key) {
        s.update_time = now;
        return {&s, false};
      }
    }
    if (cfg_.max_flows != 0 && tracked_ >= cfg_.max_flows) evict_coldest();
    if (!chain.empty()) ++chained_collisions_;
    auto& s = chain.emplace_back();
    s.index = idx;
    s.stored_key = key;
    s.update_time = now;
    ++tracked_;
    return {&s, true};
  }

  Slot* find(const CanonicalKey& key) {
    const std::size_t idx = hash_index(key, cfg_.table_size);
    if (cfg_.mode == TableMode::hardware_emu) {
      auto& cell = hw_slots_[idx];
      return cell ? cell.get() : nullptr;
    }
    for (auto& s : buckets_[idx]) {
      if (s.stored_key == key) return &s;
    }
    return nullptr;
  }

  /// Reinitializes a hardware slot in place (a first-packet SYN landing on
  /// an occupied index overwrites it, as the data-plane init table does).
  void reset_slot(Slot& s, Timestamp now) {
    const std::size_t idx = s.index;
    s = Slot{};
    s.index = idx;
    s.update_time = now;
  }

  bool erase(const CanonicalKey& key) {
    const std::size_t idx = hash_index(key, cfg_.table_size);
    if (cfg_.mode == TableMode::hardware_emu) {
      if (!hw_slots_[idx]) return false;
      hw_slots_[idx].reset();
      --tracked_;
      return true;
    }
    auto& chain = buckets_[idx];
    for (auto it = chain.begin(); it != chain.end(); ++it) {
      if (it->stored_key == key) {
        chain.erase(it);
        --tracked_;
        return true;
      }
    }
    return false;
  }

  template <class Fn>
  void for_each(Fn&& fn) {
    if (cfg_.mode == TableMode::hardware_emu) {
      for (auto& cell : hw_slots_) {
        if (cell) fn(*cell);
      }
    } else {
      for (auto& chain : buckets_) {
        for (auto& s : chain) fn(s);
      }
    }
  }

  /// Installs a hook called with each evicted slot before it is dropped.
  template <class Fn>
  void on_evict(Fn&& fn) {
    evict_hook_ = std::forward<Fn>(fn);
  }

  std::size_t size() const noexcept { return tracked_; }
  std::size_t evictions() const noexcept { return evictions_; }
  std::size_t chained_collisions() const noexcept { return chained_collisions_; }

 private:
  void evict_coldest() {
    Slot* coldest = nullptr;
    for_each([&](Slot& s) {
      if (!coldest || s.update_time < coldest->update_time) coldest = &s;
    });
    if (!coldest) return;
    if (evict_hook_) evict_hook_(*coldest);
    const CanonicalKey key = *coldest->stored_key;
    erase(key);
    ++evictions_;
  }

  TableConfig cfg_;
  std::vector<std::list<Slot>> buckets_;
  std::vector<std::unique_ptr<Slot>> hw_slots_;
  std::size_t tracked_ = 0;
  std::size_t evictions_ = 0;
  std::size_t chained_collisions_ = 0;
  std::function<void(Slot&)> evict_hook_;
};

}  // namespace dapper
