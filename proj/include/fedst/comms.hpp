#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedst/errors.hpp"

namespace fedst::comms {

enum class Phase {
  fedavg_down,
  fedavg_up,
  encode_up,
  embed_down,
  grad_up,
  sl_forward,
  sl_backward,
  fmtl_exchange,
  raw_pool,  // centralized data pooling; exempt from the isolation audit
};

enum class PayloadKind { parameters, encoding, embedding, gradient, raw_data };

std::string to_string(Phase p);
std::string to_string(PayloadKind k);

struct Message {
  int round = 0;
  std::string src;
  std::string dst;
  Phase phase = Phase::encode_up;
  PayloadKind kind = PayloadKind::encoding;
  std::uint64_t payload_bytes = 0;
};

// Append-only record of simulated traffic. Byte totals are exact integer
// sums and independent of recording order.
class CommLedger {
 public:
  void record(const Message& msg);
  void close() { closed_ = true; }
  bool closed() const { return closed_; }

  std::uint64_t total() const { return total_; }
  std::uint64_t total(Phase p) const;
  std::uint64_t total_kind(PayloadKind k) const;
  std::map<Phase, std::uint64_t> totals_by_phase() const;
  std::size_t message_count() const { return messages_.size(); }
  const std::vector<Message>& messages() const { return messages_; }

  void save_csv(const std::string& path) const;

 private:
  std::vector<Message> messages_;
  std::map<Phase, std::uint64_t> by_phase_;
  std::map<PayloadKind, std::uint64_t> by_kind_;
  std::uint64_t total_ = 0;
  bool closed_ = false;
};

enum class GnTrainMode { sl, at };

// Per-round traffic of the server-side graph model: split learning moves
// 4|V|S per round; alternating training averages (2+2Rs)/Rs * |V|S over the
// Rs server rounds of one global round.
double per_round_gn_cost(GnTrainMode mode, double n_nodes, double hidden_bytes,
                         double server_rounds);

struct CostParams {
  double num_nodes = 0;
  double node_weights_bytes = 0;
  double hidden_state_bytes = 0;  // S
  double server_rounds = 0;       // Rs
  double rounds = 0;              // R
  double nonself_directed_edges = 0;
};

// Analytic training-traffic totals per strategy, in bytes. Centralized and
// local training have no formula.
double analytic_total(const std::string& strategy, const CostParams& p);

struct ReconcileEntry {
  std::string phase;
  std::uint64_t simulated = 0;
  std::uint64_t expected = 0;
  bool exact = false;
};

struct ReconcileReport {
  std::string strategy;
  std::vector<ReconcileEntry> entries;
  std::uint64_t simulated_total = 0;
  std::optional<double> analytic_formula_total;  // absent when no formula
  bool all_exact = false;
};

// Compares simulated per-phase totals against the message-level expectation
// for the strategy, using the actual per-node payload sizes. For at/sl
// strategies the expectation mirrors the analytic formula term by term.
ReconcileReport reconcile(const CommLedger& ledger, const std::string& strategy,
                          const CostParams& p);

}  // namespace fedst::comms
