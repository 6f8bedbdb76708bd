#include <doctest.h>

#include <cmath>

#include "fedst/federation.hpp"
#include "testutil.hpp"

using namespace fedst;
using fed::Strategy;
using fed::TrainingConfig;
using num::Tape;
using num::Tensor;
using num::Var;

namespace {

struct Fixture {
  graph::SensorGraph graph;
  data::SeriesDataset series;
  data::WindowedDataset windows;
};

graph::SensorGraph ring_graph(std::size_t n) {
  std::vector<std::vector<double>> adj(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    adj[i][i] = 1.0;
    adj[i][(i + 1) % n] = 0.6;
    adj[(i + 1) % n][i] = 0.6;
  }
  std::vector<std::pair<double, double>> coords;
  for (std::size_t i = 0; i < n; ++i) {
    coords.emplace_back(static_cast<double>(i), 0.0);
  }
  return graph::SensorGraph::from_adjacency(adj, {}, coords);
}

Fixture make_fixture(std::size_t n_nodes, std::size_t length, std::uint64_t seed) {
  Fixture f;
  f.graph = ring_graph(n_nodes);
  data::SynthesisOptions opts;
  opts.seed = seed;
  f.series = data::synthesize(f.graph, length, opts);
  f.windows = data::make_windowed(f.series, data::WindowLayout{});
  return f;
}

TrainingConfig small_config(Strategy s, std::uint64_t seed = 1) {
  TrainingConfig cfg;
  cfg.strategy = s;
  cfg.seed = seed;
  cfg.global_rounds = 2;
  cfg.client_rounds = 1;
  cfg.server_rounds = 2;
  cfg.batch_size = 64;
  cfg.model.enc_hidden = 6;
  cfg.model.gn_embed = 6;
  cfg.gn_mlp_hidden = {8};
  cfg.forward_chunk = 128;
  return cfg;
}

temporal::NodeModel random_model(std::size_t enc, std::size_t gn,
                                 std::uint64_t seed) {
  temporal::ModelConfig mc;
  mc.enc_hidden = enc;
  mc.gn_embed = gn;
  temporal::NodeModel m;
  Rng rng(seed);
  m.init(mc, rng);
  return m;
}

}  // namespace

TEST_CASE("fedavg hand cases") {
  temporal::NodeModel a = random_model(3, 2, 1);
  temporal::NodeModel b = random_model(3, 2, 2);

  SUBCASE("identical models average to themselves") {
    temporal::NodeModel avg = fed::fedavg({&a, &a, &a}, {5, 5, 5});
    const std::vector<double> fa = temporal::flatten(a);
    const std::vector<double> fv = temporal::flatten(avg);
    for (std::size_t k = 0; k < fa.size(); ++k) {
      // weights 5/15 are rounded thirds; identity holds to the last ulp
      CHECK(fv[k] == doctest::Approx(fa[k]).epsilon(1e-15));
    }
    // with power-of-two weights the mean is exact
    temporal::NodeModel avg2 = fed::fedavg({&a, &a}, {4, 4});
    CHECK(temporal::flatten(avg2) == fa);
  }
  SUBCASE("single client is the identity") {
    temporal::NodeModel avg = fed::fedavg({&b}, {17});
    CHECK(temporal::flatten(avg) == temporal::flatten(b));
  }
  SUBCASE("weighted mean") {
    temporal::NodeModel ca = a, cb = a;
    std::vector<double> fa(temporal::flatten(a).size(), 1.0);
    std::vector<double> fb(fa.size(), 3.0);
    temporal::unflatten(ca, fa);
    temporal::unflatten(cb, fb);
    temporal::NodeModel avg = fed::fedavg({&ca, &cb}, {1, 3});
    for (double v : temporal::flatten(avg)) CHECK(v == doctest::Approx(2.5));
  }
  SUBCASE("brute-force weighted mean on random sets is exact") {
    testutil::Rng rng(3);
    std::vector<temporal::NodeModel> models;
    std::vector<std::size_t> counts;
    for (int i = 0; i < 4; ++i) {
      models.push_back(random_model(3, 2, 10 + i));
      counts.push_back(1 + rng.next_u64() % 9);
    }
    std::vector<const temporal::NodeModel*> ptrs;
    for (auto& m : models) ptrs.push_back(&m);
    temporal::NodeModel avg = fed::fedavg(ptrs, counts);

    const std::size_t len = temporal::flatten(models[0]).size();
    double total = 0;
    for (std::size_t c : counts) total += static_cast<double>(c);
    std::vector<double> expect(len, 0.0);
    for (std::size_t i = 0; i < models.size(); ++i) {
      const std::vector<double> flat = temporal::flatten(models[i]);
      for (std::size_t k = 0; k < len; ++k) {
        expect[k] += static_cast<double>(counts[i]) / total * flat[k];
      }
    }
    CHECK(temporal::flatten(avg) == expect);  // bitwise: same reduction order
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(fed::fedavg({}, {}), ContractError);
    temporal::NodeModel wide = random_model(4, 2, 5);
    CHECK_THROWS_AS(fed::fedavg({&a, &wide}, {1, 1}), DimensionError);
    CHECK_THROWS_AS(fed::fedavg({&a}, {0}), ContractError);
  }
}

TEST_CASE("client_update: a zero-loss landscape leaves parameters fixed") {
  // all-zero data and all-zero parameters: predictions 0, targets 0,
  // gradient 0, so SGD must not move anything
  Fixture f = make_fixture(2, 80, 4);
  for (data::NodeShards& shards : f.windows.nodes) {
    for (data::NodeSplit* sp : {&shards.train, &shards.val, &shards.test}) {
      std::fill(sp->x.values().begin(), sp->x.values().end(), 0.0);
      std::fill(sp->y.values().begin(), sp->y.values().end(), 0.0);
    }
  }
  TrainingConfig cfg = small_config(Strategy::local);
  cfg.optimizer = num::OptimKind::sgd;
  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
  for (num::Tensor* p : fs.nodes[0].model.params()) {
    std::fill(p->values().begin(), p->values().end(), 0.0);
  }
  const std::vector<double> before = temporal::flatten(fs.nodes[0].model);
  Rng rng(0);
  const double loss = fed::client_update(fs.nodes[0], cfg, rng);
  CHECK(loss == 0.0);
  CHECK(temporal::flatten(fs.nodes[0].model) == before);
}

TEST_CASE("client_update with R_c=1 and SGD equals one manual gradient step") {
  Fixture f = make_fixture(2, 40, 5);  // 17 windows -> one batch of <=64
  TrainingConfig cfg = small_config(Strategy::local);
  cfg.optimizer = num::OptimKind::sgd;
  cfg.client_lr = 0.05;
  cfg.batch_size = 64;

  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
  temporal::NodeModel manual = fs.nodes[0].model;

  Rng rng(0);
  fed::client_update(fs.nodes[0], cfg, rng);

  // manual: one full-batch forward/backward/step
  const data::NodeSplit& tr = f.windows.nodes[0].train;
  Tape tape;
  temporal::NodeModelVars vars = temporal::bind(tape, manual);
  Var x = tape.constant(tr.x);
  Var y = tape.constant(tr.y);
  Var hg = tape.constant(Tensor({tr.count(), cfg.model.gn_embed}));
  Var h = temporal::encode(tape, vars, x, 12);
  Var state = num::concat_last({h, hg});
  Var last = num::slice_last(x, 11, 1);
  Var pred = temporal::decode(tape, vars, last, state, 12);
  Var loss = temporal::node_loss(pred, y);
  for (num::Tensor* p : manual.params()) {
    p->ensure_grad();
    p->zero_grad();
  }
  tape.backward(loss);
  for (num::Tensor* p : manual.params()) {
    for (std::size_t k = 0; k < p->numel(); ++k) {
      (*p)[k] -= cfg.client_lr * p->grad()[k];
    }
  }
  CHECK(temporal::flatten(fs.nodes[0].model) == temporal::flatten(manual));
}

TEST_CASE("client_update descends on average") {
  int improved = 0;
  for (int seed = 0; seed < 5; ++seed) {
    Fixture f = make_fixture(2, 100, 40 + seed);
    TrainingConfig cfg = small_config(Strategy::local, seed);
    cfg.client_lr = 1e-2;
    fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
    Rng rng(0);
    const double first = fed::client_update(fs.nodes[0], cfg, rng);
    Rng rng2(0);
    const double second = fed::client_update(fs.nodes[0], cfg, rng2);
    if (second < first) ++improved;
  }
  CHECK(improved >= 4);
}

TEST_CASE("client_encode caches, uploads, and is pure") {
  Fixture f = make_fixture(3, 60, 6);
  TrainingConfig cfg = small_config(Strategy::at_fedavg);
  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);

  comms::CommLedger ledger;
  fed::client_encode(fs.nodes[1], cfg, ledger, 1);
  CHECK(fs.nodes[1].encodings_fresh);
  CHECK(ledger.message_count() == 1);
  CHECK(ledger.messages()[0].phase == comms::Phase::encode_up);
  CHECK(ledger.total() ==
        fs.nodes[1].sample_count() * cfg.model.enc_hidden * sizeof(double));

  // bitwise equal to a direct encode of the full shard
  const data::NodeSplit& tr = f.windows.nodes[1].train;
  Tape tape;
  temporal::NodeModelVars vars = temporal::bind_const(tape, fs.nodes[1].model);
  Var h = temporal::encode(tape, vars, tape.constant(tr.x), 12);
  CHECK(fs.nodes[1].h_c.values() == tape.value(h).values());

  const Tensor first = fs.nodes[1].h_c;
  fed::client_encode(fs.nodes[1], cfg, ledger, 1);
  CHECK(fs.nodes[1].h_c.values() == first.values());
}

TEST_CASE("client_backward: gradient against finite differences and ledger") {
  Fixture f = make_fixture(2, 50, 7);
  TrainingConfig cfg = small_config(Strategy::at_fedavg);
  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
  comms::CommLedger ledger;
  fed::client_encode(fs.nodes[0], cfg, ledger, 1);

  const std::size_t count = fs.nodes[0].sample_count();
  testutil::Rng rng(8);
  Tensor h_g = testutil::random_tensor({count, cfg.model.gn_embed}, rng, 0.3);

  const std::size_t msgs_before = ledger.message_count();
  fed::ClientBackwardResult res =
      fed::client_backward(fs.nodes[0], h_g, 0, count, cfg, ledger, 1);
  CHECK(ledger.message_count() == msgs_before + 2);
  CHECK(ledger.total(comms::Phase::embed_down) ==
        count * cfg.model.gn_embed * sizeof(double));
  CHECK(ledger.total(comms::Phase::grad_up) ==
        count * cfg.model.gn_embed * sizeof(double));

  // node parameters untouched by contract; check grad against FD
  const data::NodeSplit& tr = f.windows.nodes[0].train;
  auto eval = [&]() {
    Tape tape;
    temporal::NodeModelVars vars = temporal::bind_const(tape, fs.nodes[0].model);
    Var hc = tape.constant(fs.nodes[0].h_c);
    Var state = num::concat_last({hc, tape.constant(h_g)});
    Var x = tape.constant(tr.x);
    Var last = num::slice_last(x, 11, 1);
    Var pred = temporal::decode(tape, vars, last, state, 12);
    return tape.value(temporal::node_loss(pred, tape.constant(tr.y)))[0];
  };
  std::vector<double> flat_grad(res.grad_h_g.values());
  Rng probe(9);
  const double err = testutil::fd_check(h_g, flat_grad, eval,
                                        testutil::probe_coords(h_g.numel(), 8, probe));
  CHECK(err < 1e-4);
}

TEST_CASE("client_backward leaves node parameters bitwise unchanged") {
  Fixture f = make_fixture(2, 50, 17);
  TrainingConfig cfg = small_config(Strategy::at_fedavg);
  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
  comms::CommLedger ledger;
  fed::client_encode(fs.nodes[0], cfg, ledger, 1);
  const std::vector<double> before = temporal::flatten(fs.nodes[0].model);
  Tensor h_g({fs.nodes[0].sample_count(), cfg.model.gn_embed});
  fed::client_backward(fs.nodes[0], h_g, 0, fs.nodes[0].sample_count(), cfg,
                       ledger, 1);
  CHECK(temporal::flatten(fs.nodes[0].model) == before);
}

TEST_CASE("server_train_gn: protocol order, freezing, and traffic") {
  Fixture f = make_fixture(3, 60, 9);
  TrainingConfig cfg = small_config(Strategy::at_fedavg);
  cfg.server_rounds = 2;
  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
  comms::CommLedger ledger;

  SUBCASE("training before encoding is a protocol error") {
    CHECK_THROWS_AS(fed::server_train_gn(fs, cfg, ledger, 1), ProtocolError);
  }

  SUBCASE("node models are frozen; traffic is 2 V S per server round") {
    for (fed::NodeState& node : fs.nodes) fed::client_encode(node, cfg, ledger, 1);
    const std::uint64_t encode_bytes = ledger.total();
    std::vector<std::vector<double>> before;
    for (fed::NodeState& node : fs.nodes) before.push_back(temporal::flatten(node.model));
    const std::vector<double> gn_before = [&] {
      std::vector<double> flat;
      for (auto& [name, t] : std::as_const(fs.server.gn).named_params()) {
        flat.insert(flat.end(), t->values().begin(), t->values().end());
      }
      return flat;
    }();

    fed::server_train_gn(fs, cfg, ledger, 1);

    for (std::size_t i = 0; i < fs.nodes.size(); ++i) {
      CHECK(temporal::flatten(fs.nodes[i].model) == before[i]);
    }
    // GN moved
    std::vector<double> gn_after;
    for (auto& [name, t] : std::as_const(fs.server.gn).named_params()) {
      gn_after.insert(gn_after.end(), t->values().begin(), t->values().end());
    }
    CHECK(gn_after != gn_before);

    const std::uint64_t s_bytes =
        fs.nodes[0].sample_count() * cfg.model.gn_embed * sizeof(double);
    CHECK(ledger.total(comms::Phase::embed_down) ==
          2 * fs.nodes.size() * s_bytes);  // Rs=2 rounds
    CHECK(ledger.total(comms::Phase::grad_up) == 2 * fs.nodes.size() * s_bytes);
    CHECK(ledger.total() - encode_bytes ==
          2 * 2 * fs.nodes.size() * s_bytes);
  }
}

TEST_CASE("gn gradient accumulation equals combined-loss backward") {
  Fixture f = make_fixture(3, 50, 10);
  TrainingConfig cfg = small_config(Strategy::at_fedavg);
  cfg.server_rounds = 1;
  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
  comms::CommLedger ledger;
  for (fed::NodeState& node : fs.nodes) fed::client_encode(node, cfg, ledger, 1);

  // route 1: the production path's accumulated GN gradient. Use SGD with a
  // known lr so the gradient is recoverable from the parameter delta.
  TrainingConfig sgd_cfg = cfg;
  sgd_cfg.optimizer = num::OptimKind::sgd;
  sgd_cfg.server_lr = 1.0;
  fed::FederationState fs2 = fed::init_federation(sgd_cfg, f.windows, f.graph);
  for (fed::NodeState& node : fs2.nodes) fed::client_encode(node, cfg, ledger, 1);
  std::vector<double> theta_before;
  for (num::Tensor* t : fs2.server.gn.params()) {
    theta_before.insert(theta_before.end(), t->values().begin(), t->values().end());
  }
  fed::server_train_gn(fs2, sgd_cfg, ledger, 1);
  std::vector<double> accumulated;  // -delta = gradient under lr=1 SGD
  {
    std::size_t off = 0;
    for (num::Tensor* t : fs2.server.gn.params()) {
      for (std::size_t k = 0; k < t->numel(); ++k, ++off) {
        accumulated.push_back(theta_before[off] - (*t)[k]);
      }
    }
  }

  // route 2: single backward of sum_i loss_i on a fresh combined tape
  fed::FederationState fs3 = fed::init_federation(sgd_cfg, f.windows, f.graph);
  comms::CommLedger l3;
  for (fed::NodeState& node : fs3.nodes) fed::client_encode(node, cfg, l3, 1);
  const std::size_t n = fs3.nodes.size();
  const std::size_t count = fs3.nodes[0].sample_count();
  Tape tape;
  spatial::GnVars gnv = spatial::bind(tape, fs3.server.gn);
  Tensor h_all({count * n, cfg.model.enc_hidden});
  for (std::size_t b = 0; b < count; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < cfg.model.enc_hidden; ++j) {
        h_all.at(b * n + i, j) = fs3.nodes[i].h_c.at(b, j);
      }
    }
  }
  Var emb = spatial::gn_forward(tape, gnv, tape.constant(h_all), fs3.topology, count);
  std::vector<Var> losses;
  for (std::size_t i = 0; i < n; ++i) {
    const data::NodeSplit& tr = f.windows.nodes[i].train;
    std::vector<std::int64_t> rows(count);
    for (std::size_t b = 0; b < count; ++b) {
      rows[b] = static_cast<std::int64_t>(b * n + i);
    }
    Var h_g_i = num::gather_rows(emb, rows);
    temporal::NodeModelVars vars = temporal::bind_const(tape, fs3.nodes[i].model);
    Var hc = tape.constant(fs3.nodes[i].h_c);
    Var state = num::concat_last({hc, h_g_i});
    Var x = tape.constant(tr.x);
    Var last = num::slice_last(x, 11, 1);
    Var pred = temporal::decode(tape, vars, last, state, 12);
    losses.push_back(temporal::node_loss(pred, tape.constant(tr.y)));
  }
  Var total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = num::add(total, losses[i]);
  for (num::Tensor* t : fs3.server.gn.params()) {
    t->ensure_grad();
    t->zero_grad();
  }
  tape.backward(total);
  std::vector<double> combined;
  for (num::Tensor* t : fs3.server.gn.params()) {
    combined.insert(combined.end(), t->grad().begin(), t->grad().end());
  }

  REQUIRE(accumulated.size() == combined.size());
  for (std::size_t k = 0; k < combined.size(); ++k) {
    CHECK(std::abs(accumulated[k] - combined[k]) < 1e-10);
  }
}

TEST_CASE("fmtl regularizer") {
  SUBCASE("identical weights vanish") {
    std::vector<std::vector<double>> w{{1.0, 2.0}, {1.0, 2.0}};
    std::vector<std::vector<double>> adj{{1, 1}, {1, 1}};
    CHECK(fed::fmtl_regularizer_value(w, adj, 0.1) == 0.0);
  }
  SUBCASE("hand case: orthogonal unit weights") {
    std::vector<std::vector<double>> w{{1.0, 0.0}, {0.0, 1.0}};
    std::vector<std::vector<double>> adj{{0, 1}, {1, 0}};
    CHECK(fed::fmtl_regularizer_value(w, adj, 0.1) == doctest::Approx(0.2));
    CHECK(fed::fmtl_regularizer_value(w, adj, 0.0) == 0.0);
  }
  SUBCASE("matches the trace form on random instances") {
    testutil::Rng rng(11);
    for (int rep = 0; rep < 10; ++rep) {
      const std::size_t n = 5, p = 7;
      std::vector<std::vector<double>> w(n, std::vector<double>(p));
      std::vector<std::vector<double>> adj(n, std::vector<double>(n, 0.0));
      for (auto& row : w) {
        for (double& v : row) v = rng.normal();
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
          if (rng.uniform() < 0.6) adj[i][j] = adj[j][i] = rng.uniform(0.1, 1.0);
        }
      }
      const double lambda1 = 0.1;
      const double direct = fed::fmtl_regularizer_value(w, adj, lambda1);

      // trace form: lambda * tr(W Omega W^T), Omega = (D - A)/n,
      // lambda = lambda1 * n
      std::vector<std::vector<double>> omega(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) deg += adj[i][j];
        for (std::size_t j = 0; j < n; ++j) omega[i][j] = -adj[i][j] / n;
        omega[i][i] += deg / n;
      }
      double trace = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0.0;
          for (std::size_t k = 0; k < p; ++k) dot += w[i][k] * w[j][k];
          trace += omega[i][j] * dot;
        }
      }
      const double via_trace = lambda1 * n * trace;
      CHECK(std::abs(direct - via_trace) < 1e-10);
      CHECK(via_trace > -1e-12);  // PSD Laplacian keeps it non-negative
    }
  }
  SUBCASE("differentiable form flows gradients into every connected node") {
    Tape tape;
    Tensor w0({2}, {1.0, 0.0});
    Tensor w1({2}, {0.0, 1.0});
    w0.set_requires_grad(true);
    w1.set_requires_grad(true);
    std::vector<Var> vars{tape.leaf(w0), tape.leaf(w1)};
    std::vector<std::vector<double>> adj{{0, 1}, {1, 0}};
    Var reg = fed::fmtl_regularizer(tape, vars, adj, 0.1);
    CHECK(tape.value(reg)[0] == doctest::Approx(0.2));
    tape.backward(reg);
    // d/dw0 [0.1(<w0,w0-w1> + <w1,w1-w0>)] = 0.1(2 w0 - w1 - w1)
    CHECK(w0.grad()[0] == doctest::Approx(0.1 * 2.0));
    CHECK(w0.grad()[1] == doctest::Approx(0.1 * (-2.0)));
    CHECK(w1.grad()[0] == doctest::Approx(-0.2));
    CHECK(w1.grad()[1] == doctest::Approx(0.2));
  }
}

TEST_CASE("run_strategy executes every strategy and honors isolation") {
  Fixture f = make_fixture(4, 60, 12);
  for (Strategy s :
       {Strategy::local, Strategy::fedavg_only, Strategy::fmtl, Strategy::sl,
        Strategy::sl_fedavg, Strategy::at_no_fedavg, Strategy::at_fedavg,
        Strategy::centralized}) {
    CAPTURE(fed::to_string(s));
    TrainingConfig cfg = small_config(s);
    fed::RunResult r = fed::run_strategy(cfg, f.windows, f.graph);
    CHECK(r.rounds_run == cfg.global_rounds);
    CHECK(std::isfinite(r.final_val_rmse));
    CHECK(std::isfinite(r.final_test_rmse));
    if (s == Strategy::centralized) {
      CHECK(!fed::isolation_ok(r.ledger));
      CHECK(!fed::strategy_is_federated(s));
    } else {
      CHECK(fed::isolation_ok(r.ledger));
    }
    if (s == Strategy::local) CHECK(r.ledger.total() == 0);

    // ledger reconciles exactly against the message-level expectations
    comms::ReconcileReport rep =
        comms::reconcile(r.ledger, fed::to_string(s), r.cost_params());
    CHECK(rep.all_exact);
  }
}

TEST_CASE("fedavg_only with identical shards keeps node models identical") {
  // same data everywhere + same init -> updates coincide, averaging is a
  // no-op, and models stay bitwise equal round after round
  Fixture f = make_fixture(3, 60, 13);
  for (std::size_t i = 1; i < f.windows.nodes.size(); ++i) {
    f.windows.nodes[i] = f.windows.nodes[0];
  }
  TrainingConfig cfg = small_config(Strategy::fedavg_only);
  cfg.global_rounds = 3;
  fed::RunResult r = fed::run_strategy(cfg, f.windows, f.graph);
  const std::vector<double> first = temporal::flatten(r.state->nodes[0].model);
  for (const fed::NodeState& node : r.state->nodes) {
    CHECK(temporal::flatten(node.model) == first);
  }
}

TEST_CASE("seeded runs are bitwise reproducible") {
  Fixture f = make_fixture(3, 60, 14);
  TrainingConfig cfg = small_config(Strategy::at_fedavg, 77);
  fed::RunResult a = fed::run_strategy(cfg, f.windows, f.graph);
  fed::RunResult b = fed::run_strategy(cfg, f.windows, f.graph);
  CHECK(a.final_val_rmse == b.final_val_rmse);
  CHECK(a.final_test_rmse == b.final_test_rmse);
  CHECK(temporal::flatten(a.state->nodes[0].model) ==
        temporal::flatten(b.state->nodes[0].model));
  CHECK(a.ledger.total() == b.ledger.total());

  TrainingConfig other = cfg;
  other.seed = 78;
  fed::RunResult c = fed::run_strategy(other, f.windows, f.graph);
  CHECK(a.final_val_rmse != c.final_val_rmse);
}

TEST_CASE("single-node at_fedavg phase 1 equals plain local updates") {
  Fixture f = make_fixture(1, 60, 15);
  TrainingConfig cfg = small_config(Strategy::at_fedavg);
  cfg.server_rounds = 1;

  fed::FederationState a = fed::init_federation(cfg, f.windows, f.graph);
  fed::FederationState b = fed::init_federation(cfg, f.windows, f.graph);
  comms::CommLedger ledger_a, ledger_b;

  for (int round = 1; round <= 3; ++round) {
    // A: the full alternating round with the fedavg wrap
    {
      Rng rng(0);
      fed::client_update(a.nodes[0], cfg, rng);
      temporal::NodeModel agg =
          fed::fedavg({&a.nodes[0].model}, {a.nodes[0].sample_count()});
      a.server.aggregated = agg;
      a.nodes[0].model = agg;
      a.nodes[0].optimizer = std::make_unique<num::Optimizer>(
          a.nodes[0].model.params(),
          num::OptimConfig{cfg.optimizer, cfg.client_lr, 0.9, 0.999, 1e-8});
      fed::client_encode(a.nodes[0], cfg, ledger_a, round);
      fed::server_train_gn(a, cfg, ledger_a, round);
      fed::push_embeddings(a, cfg, ledger_a, round);
    }
    // B: plain local training, same optimizer-reset cadence, embeddings
    // mirrored from A's server
    {
      Rng rng(0);
      fed::client_update(b.nodes[0], cfg, rng);
      b.nodes[0].optimizer = std::make_unique<num::Optimizer>(
          b.nodes[0].model.params(),
          num::OptimConfig{cfg.optimizer, cfg.client_lr, 0.9, 0.999, 1e-8});
      fed::client_encode(b.nodes[0], cfg, ledger_b, round);
      fed::server_train_gn(b, cfg, ledger_b, round);
      fed::push_embeddings(b, cfg, ledger_b, round);
    }
    CHECK(temporal::flatten(a.nodes[0].model) ==
          temporal::flatten(b.nodes[0].model));
    CHECK(a.nodes[0].h_g.values() == b.nodes[0].h_g.values());
  }
}

TEST_CASE("phase isolation: client updates never move the GN") {
  Fixture f = make_fixture(3, 60, 16);
  TrainingConfig cfg = small_config(Strategy::at_fedavg);
  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
  std::vector<double> gn_before;
  for (num::Tensor* t : fs.server.gn.params()) {
    gn_before.insert(gn_before.end(), t->values().begin(), t->values().end());
  }
  Rng rng(0);
  for (fed::NodeState& node : fs.nodes) fed::client_update(node, cfg, rng);
  std::vector<double> gn_after;
  for (num::Tensor* t : fs.server.gn.params()) {
    gn_after.insert(gn_after.end(), t->values().begin(), t->values().end());
  }
  CHECK(gn_before == gn_after);
}

TEST_CASE("at_fedavg improves validation RMSE on a small synthetic run") {
  Fixture f = make_fixture(5, 220, 18);
  TrainingConfig cfg = small_config(Strategy::at_fedavg, 3);
  cfg.global_rounds = 4;
  cfg.server_rounds = 2;
  fed::RunResult r = fed::run_strategy(cfg, f.windows, f.graph);
  CHECK(r.rounds.back().val_rmse < r.rounds.front().val_rmse);
}

TEST_CASE("evaluate_rmse input checks") {
  Fixture f = make_fixture(2, 60, 19);
  TrainingConfig cfg = small_config(Strategy::local);
  fed::FederationState fs = fed::init_federation(cfg, f.windows, f.graph);
  std::vector<const temporal::NodeModel*> models{&fs.nodes[0].model};
  CHECK_THROWS_AS(fed::evaluate_rmse(models, nullptr, f.windows, fs.topology,
                                     fed::Split::val, cfg),
                  DimensionError);
}
