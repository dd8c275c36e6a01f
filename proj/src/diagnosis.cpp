#include "dapper/diagnosis.hpp"

#include <algorithm>
#include <cmath>

namespace dapper {

std::string_view to_string(Label l) noexcept {
  switch (l) {
    case Label::sender: return "sender";
    case Label::receiver: return "receiver";
    case Label::network: return "network";
  }
  return "?";
}

std::string_view to_string(Category c) noexcept {
  switch (c) {
    case Category::none: return "none";
    case Category::sender: return "sender";
    case Category::receiver: return "receiver";
    case Category::network: return "network";
    case Category::sender_network: return "sender+network";
    case Category::receiver_network: return "receiver+network";
  }
  return "?";
}

std::optional<Category> category_from_string(std::string_view s) noexcept {
  for (std::size_t i = 0; i < kCategoryCount; ++i) {
    const auto c = static_cast<Category>(i);
    if (to_string(c) == s) return c;
  }
  if (s == "sender-network") return Category::sender_network;
  if (s == "receiver-network") return Category::receiver_network;
  return std::nullopt;
}

bool LabelSet::has(Label l) const noexcept {
  switch (l) {
    case Label::sender: return sender;
    case Label::receiver: return receiver;
    case Label::network: return network;
  }
  return false;
}

void LabelSet::set(Label l, bool v) noexcept {
  switch (l) {
    case Label::sender: sender = v; break;
    case Label::receiver: receiver = v; break;
    case Label::network: network = v; break;
  }
}

LabelSet labels_of(Category c) noexcept {
  LabelSet s;
  switch (c) {
    case Category::none: break;
    case Category::sender: s.sender = true; break;
    case Category::receiver: s.receiver = true; break;
    case Category::network: s.network = true; break;
    case Category::sender_network: s.sender = s.network = true; break;
    case Category::receiver_network: s.receiver = s.network = true; break;
  }
  return s;
}

Category category_for(LabelSet labels, double sender_weight, double receiver_weight) noexcept {
  if (labels.sender && labels.receiver) {
    if (sender_weight > receiver_weight) {
      labels.receiver = false;
    } else {
      labels.sender = false;
    }
  }
  if (labels.sender) return labels.network ? Category::sender_network : Category::sender;
  if (labels.receiver) return labels.network ? Category::receiver_network : Category::receiver;
  if (labels.network) return Category::network;
  return Category::none;
}

SlowStartResult detect_slow_start(std::span<const std::uint64_t> rounds,
                                  const DiagnosisConfig& cfg) {
  SlowStartResult out;
  const std::size_t need = std::size_t{cfg.growth_rounds} + 1;
  if (cfg.growth_rounds == 0 || rounds.size() < need) {
    out.insufficient = true;
    return out;
  }
  const auto tail = rounds.subspan(rounds.size() - need);
  for (std::size_t i = 0; i + 1 < tail.size(); ++i) {
    if (tail[i] == 0) return out;
    const double ratio = static_cast<double>(tail[i + 1]) / static_cast<double>(tail[i]);
    if (ratio < cfg.growth_ratio) return out;
  }
  out.detected = true;
  return out;
}

void add_window_sample(WindowSnapshot& w, std::uint64_t flight, std::uint64_t cwnd,
                       std::uint64_t rwnd, bool post_loss, bool restart,
                       const DiagnosisConfig& cfg) {
  ++w.samples;
  const auto f = static_cast<double>(flight);
  const auto c = static_cast<double>(cwnd);
  const auto r = static_cast<double>(rwnd);
  w.flight.add(f);
  w.cwnd.add(c);
  w.rwnd.add(r);
  if (post_loss && cwnd < rwnd && f >= cfg.binding_slack * c) ++w.network_binding;
  if (rwnd <= cwnd && f >= cfg.binding_slack * r) ++w.receiver_binding;
  if (!post_loss && !restart && f < cfg.binding_slack * std::min(c, r)) ++w.underuse;
}

namespace {

constexpr std::uint64_t kSubMssMinPackets = 2;

void cite(Verdict& v, std::string id, std::optional<Label> label, double value, double bound,
          std::string cmp) {
  if (label) v.labels.set(*label);
  v.evidence.push_back({std::move(id), label, value, bound, std::move(cmp)});
}

}  // namespace

Verdict classify_window(const WindowSnapshot& w, const DiagnosisConfig& cfg) {
  Verdict v;
  v.start = w.start;
  v.end = w.end;
  if (w.samples == 0 && w.losses.empty()) {
    v.indeterminate = true;
    return v;
  }
  const auto share = [&](std::uint64_t n) {
    return w.samples == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(w.samples);
  };

  // Network.
  if (w.samples > 0 && share(w.network_binding) >= cfg.binding_fraction) {
    cite(v, "network.h1.cwnd_bound", Label::network, share(w.network_binding),
         cfg.binding_fraction, "flight >= slack*cwnd, cwnd < rwnd after loss");
  }
  for (const auto& loss : w.losses) {
    if (loss.kind == LossKind::timeout) {
      cite(v, "network.h1.loss", Label::network, static_cast<double>(loss.cwnd_after),
           static_cast<double>(loss.rwnd), "timeout collapses cwnd");
      break;
    }
    if (loss.rwnd > 0 && loss.cwnd_after < loss.rwnd) {
      cite(v, "network.h1.loss", Label::network, static_cast<double>(loss.cwnd_after),
           static_cast<double>(loss.rwnd), "cwnd after loss < rwnd");
      break;
    }
  }
  if (w.rtt.count > 0 && w.min_rtt > 0) {
    const double baseline =
        std::max(cfg.expected_rtt ? static_cast<double>(*cfg.expected_rtt) : 0.0,
                 cfg.rtt_inflation_factor * static_cast<double>(w.min_rtt));
    if (w.rtt.mean > baseline) {
      cite(v, "network.h2.rtt", Label::network, w.rtt.mean, baseline, "mean rtt > baseline");
    }
  }

  // Receiver.
  if (w.samples > 0 && share(w.receiver_binding) >= cfg.binding_fraction) {
    cite(v, "receiver.h1.rwnd_bound", Label::receiver, share(w.receiver_binding),
         cfg.binding_fraction, "flight >= slack*rwnd, rwnd <= cwnd");
  }
  if (w.dequeued.count > 0 && w.dequeued.mean > 1.0 + cfg.delayed_ack_epsilon) {
    cite(v, "receiver.h2.delayed_ack", Label::receiver, w.dequeued.mean,
         1.0 + cfg.delayed_ack_epsilon, "mean samples freed per ack > 1");
  }

  // Sender.
  const SlowStartResult ss = detect_slow_start(w.round_flights, cfg);
  if (ss.detected) {
    cite(v, "sender.h1.slow_start", std::nullopt, cfg.growth_ratio, cfg.growth_ratio,
         "exponential round growth");
  } else if (ss.insufficient) {
    cite(v, "sender.h1.insufficient_data", std::nullopt,
         static_cast<double>(w.round_flights.size()), cfg.growth_rounds + 1.0, "rounds seen");
  }
  bool backlogged = false;
  bool non_backlogged = false;
  double last_ratio = 0.0;
  for (const auto& [f1, f2] : w.completed_losses) {
    if (f1 == 0) continue;
    last_ratio = static_cast<double>(f2) / static_cast<double>(f1);
    if (std::abs(last_ratio - cfg.multiplicative_decrease) <= cfg.loss_ratio_tolerance) {
      backlogged = true;
    } else if (std::abs(last_ratio - 1.0) <= cfg.loss_ratio_tolerance) {
      non_backlogged = true;
    }
  }
  if (backlogged) {
    cite(v, "sender.h4.backlogged", std::nullopt, last_ratio, cfg.multiplicative_decrease,
         "f2/f1 ~ C");
  }
  if (!ss.detected) {
    if (w.samples > 0 && !backlogged && share(w.underuse) >= cfg.underuse_fraction) {
      cite(v, "sender.h2.underuse", Label::sender, share(w.underuse), cfg.underuse_fraction,
           "flight < slack*min(cwnd, rwnd)");
    }
    if (w.data_packets > 0 && w.sub_mss_packets >= kSubMssMinPackets) {
      const double frac =
          static_cast<double>(w.sub_mss_packets) / static_cast<double>(w.data_packets);
      if (frac >= cfg.sub_mss_fraction) {
        cite(v, "sender.h3.sub_mss", Label::sender, frac, cfg.sub_mss_fraction,
             "sub-mss share >= bound");
      }
    }
    if (w.reaction.count > 0 && w.reaction.mean > static_cast<double>(cfg.reaction_threshold)) {
      cite(v, "sender.h3.reaction", Label::sender, w.reaction.mean,
           static_cast<double>(cfg.reaction_threshold), "mean reaction > threshold");
    }
    // Supporting evidence only: strengthens a sender label but does not set one.
    if (non_backlogged) {
      const std::optional<Label> l =
          v.labels.has(Label::sender) ? std::optional<Label>(Label::sender) : std::nullopt;
      cite(v, "sender.h4.non_backlogged", l, last_ratio, 1.0, "f2/f1 ~ 1");
    }
  }

  double sw = 0;
  double rw = 0;
  for (const auto& e : v.evidence) {
    if (e.label == Label::sender) sw += 1;
    if (e.label == Label::receiver) rw += 1;
  }
  v.category = category_for(v.labels, sw, rw);
  return v;
}

FractionReport aggregate_report(std::span<const Verdict> verdicts, const DiagnosisConfig& cfg) {
  FractionReport r;
  double total = 0.0;
  std::size_t classified = 0;
  for (const auto& v : verdicts) {
    if (v.indeterminate) {
      ++r.indeterminate_windows;
      continue;
    }
    ++classified;
    total += static_cast<double>(std::max<Duration>(v.end - v.start, 0));
  }
  r.classified_windows = classified;
  if (classified == 0) return r;
  r.empty = false;
  const bool by_count = total <= 0.0;
  r.classified_time = by_count ? 0.0 : total / static_cast<double>(kSecond);
  const double denom = by_count ? static_cast<double>(classified) : total;
  for (const auto& v : verdicts) {
    if (v.indeterminate) continue;
    const double w =
        (by_count ? 1.0 : static_cast<double>(std::max<Duration>(v.end - v.start, 0))) / denom;
    r.fractions[static_cast<std::size_t>(v.category)] += w;
    if (std::any_of(v.evidence.begin(), v.evidence.end(),
                    [](const Evidence& e) { return e.heuristic == "network.h1.loss"; })) {
      ++r.network_loss_windows;
    }
    const LabelSet ls = labels_of(v.category);
    for (std::size_t i = 0; i < kLabelCount; ++i) {
      if (ls.has(static_cast<Label>(i))) r.label_fractions[i] += w;
    }
  }
  for (std::size_t i = 0; i < kLabelCount; ++i) {
    if (r.label_fractions[i] >= cfg.dominant_fraction) r.dominant.set(static_cast<Label>(i));
  }
  if (cfg.dominant_loss_windows > 0 && r.network_loss_windows >= cfg.dominant_loss_windows) {
    r.dominant.set(Label::network);
  }
  r.dominant_category =
      category_for(r.dominant, r.label_fractions[static_cast<std::size_t>(Label::sender)],
                   r.label_fractions[static_cast<std::size_t>(Label::receiver)]);
  return r;
}

Duration WindowTracker::window_length(const FlowState& state) const noexcept {
  const auto scaled = static_cast<Duration>(cfg_.window_srtt_multiple *
                                            static_cast<double>(state.rtt.srtt));
  return std::max(cfg_.min_window, scaled);
}

std::optional<Verdict> WindowTracker::observe(const FlowState& state, const PacketRecord& pkt,
                                              std::span<const UpdateEvent> events) {
  if (!open_) {
    win_ = WindowSnapshot{};
    win_.start = pkt.timestamp;
    open_ = true;
  }
  for (const UpdateEvent e : events) {
    switch (e) {
      case UpdateEvent::NewSegment:
        ++win_.data_packets;
        if (state.flight_known && state.rwnd_known && state.inferred_cwnd > 0) {
          add_window_sample(win_, state.flight_size, state.inferred_cwnd,
                            state.last_effective_rwnd, state.in_post_loss_epoch(),
                            state.slow_start_restart_rounds > 0, cfg_);
        }
        break;
      case UpdateEvent::SubMssSegment: ++win_.sub_mss_packets; break;
      case UpdateEvent::ReactionSample:
        win_.reaction.add(static_cast<double>(state.last_reaction));
        break;
      case UpdateEvent::RttSample:
        win_.rtt.add(static_cast<double>(state.last_rtt));
        win_.dequeued.add(static_cast<double>(state.last_dequeued));
        break;
      case UpdateEvent::NewAck:
      case UpdateEvent::DupAck:
      case UpdateEvent::StaleAck:
      case UpdateEvent::WindowUpdate: ++win_.acks; break;
      case UpdateEvent::CwndDecrease:
      case UpdateEvent::CwndReset:
        if (!state.losses.empty()) {
          win_.losses.push_back(
              {state.losses.back().kind, state.inferred_cwnd, state.last_effective_rwnd});
        }
        break;
      case UpdateEvent::LossEpochComplete:
        if (!state.losses.empty()) {
          win_.completed_losses.emplace_back(state.losses.back().flight_before,
                                             state.losses.back().flight_after);
        }
        break;
      default: break;
    }
  }
  if (pkt.timestamp - win_.start >= window_length(state)) return close(state, pkt.timestamp);
  return std::nullopt;
}

std::optional<Verdict> WindowTracker::flush(const FlowState& state) {
  if (!open_) return std::nullopt;
  return close(state, state.update_time);
}

std::optional<Verdict> WindowTracker::close(const FlowState& state, Timestamp end) {
  open_ = false;
  win_.end = end;
  win_.min_rtt = state.min_rtt;
  win_.round_flights.assign(state.round_flights.begin(), state.round_flights.end());
  win_.restart = state.slow_start_restart_rounds > 0;
  return classify_window(win_, cfg_);
}

nlohmann::json to_json(const Evidence& e) {
  nlohmann::json j = {{"heuristic", e.heuristic},
                      {"value", e.value},
                      {"bound", e.bound},
                      {"comparison", e.comparison}};
  j["label"] = e.label ? nlohmann::json(std::string(to_string(*e.label))) : nlohmann::json();
  return j;
}

nlohmann::json to_json(const Verdict& v) {
  nlohmann::json labels = nlohmann::json::array();
  for (std::size_t i = 0; i < kLabelCount; ++i) {
    if (v.labels.has(static_cast<Label>(i))) labels.push_back(to_string(static_cast<Label>(i)));
  }
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& e : v.evidence) ev.push_back(to_json(e));
  return {{"start", v.start},
          {"end", v.end},
          {"indeterminate", v.indeterminate},
          {"labels", labels},
          {"category", to_string(v.category)},
          {"evidence", ev}};
}

nlohmann::json to_json(const FractionReport& r) {
  nlohmann::json fr = nlohmann::json::object();
  for (std::size_t i = 0; i < kCategoryCount; ++i) {
    fr[std::string(to_string(static_cast<Category>(i)))] = r.fractions[i];
  }
  nlohmann::json lf = nlohmann::json::object();
  nlohmann::json dom = nlohmann::json::array();
  for (std::size_t i = 0; i < kLabelCount; ++i) {
    const auto l = static_cast<Label>(i);
    lf[std::string(to_string(l))] = r.label_fractions[i];
    if (r.dominant.has(l)) dom.push_back(to_string(l));
  }
  return {{"empty", r.empty},
          {"classified_windows", r.classified_windows},
          {"indeterminate_windows", r.indeterminate_windows},
          {"classified_seconds", r.classified_time},
          {"network_loss_windows", r.network_loss_windows},
          {"fractions", fr},
          {"label_fractions", lf},
          {"dominant_labels", dom},
          {"dominant_category", to_string(r.dominant_category)}};
}

}  // namespace dapper
