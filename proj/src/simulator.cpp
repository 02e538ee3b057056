#include "spark/simulator.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>

#include "spark/distillation.hpp"
#include "spark/errors.hpp"
#include "spark/kernel.hpp"
#include "spark/rng.hpp"
#include "spark/topology.hpp"
#include "spark/wire.hpp"

namespace spark::sim {

namespace {

[[noreturn]] void rethrow_with_context(const std::exception_ptr& ep, const std::string& ctx) {
  try {
    std::rethrow_exception(ep);
  } catch (const ResourceError& e) {
    throw ResourceError(ctx + ": " + e.what());
  } catch (const DivergenceError& e) {
    throw DivergenceError(ctx + ": " + e.what());
  } catch (const ProtocolError& e) {
    throw ProtocolError(ctx + ": " + e.what());
  } catch (const ContractViolation& e) {
    throw ContractViolation(ctx + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(ctx + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ctx + ": " + e.what());
  }
}

Matrix rows_of(const Matrix& src, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace

void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& body,
                  const std::function<std::string(std::size_t)>& context) {
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        body(i);
      } catch (...) {
        rethrow_with_context(std::current_exception(), context(i));
      }
    }
    return;
  }

  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  const auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t extra = std::min(workers, count) - 1;
  pool.reserve(extra);
  for (std::size_t t = 0; t < extra; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < count; ++i) {
    if (errors[i]) rethrow_with_context(errors[i], context(i));
  }
}

EvalResult evaluate(const model::WeightVector& weights, const data::Dataset& holdout) {
  if (holdout.size() == 0) throw ContractViolation("evaluate: empty holdout");
  const Matrix logits = model::forward(weights, holdout.images);
  const auto pred = model::predict(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == holdout.labels[i] ? 1 : 0;
  return {static_cast<double>(hits) / static_cast<double>(holdout.size()),
          model::cross_entropy(logits, holdout.labels)};
}

model::WeightVector average_weights(std::span<const model::WeightVector> weights) {
  if (weights.empty()) throw ContractViolation("average_weights: no clients");
  Vector sum = Vector::Zero(weights.front().values().size());
  for (const auto& w : weights) sum += w.values();
  sum /= static_cast<double>(weights.size());
  return model::WeightVector(weights.front().architecture(), std::move(sum));
}

Workload load_workload(const RunConfig& cfg) {
  cfg.validate();
  Workload w;
  const auto data_seed = derive_seed(cfg.seed, {tag("data")});
  if (cfg.source == DataSource::synthetic) {
    w.train = data::synth_gaussians(cfg.arch.num_classes, cfg.synth_per_class, cfg.arch.input_dim, cfg.synth_spread,
                                    data_seed, 0);
    w.holdout = data::synth_gaussians(cfg.arch.num_classes, cfg.synth_test_per_class, cfg.arch.input_dim,
                                      cfg.synth_spread, data_seed, 1);
    w.holdout.name = "synthetic-holdout";
  } else {
    w.train = data::load_idx(cfg.train_images, cfg.train_labels, cfg.arch.num_classes);
    w.holdout = data::load_idx(cfg.test_images, cfg.test_labels, cfg.arch.num_classes);
    if (cfg.train_subset > 0 && cfg.train_subset < w.train.size()) {
      std::vector<std::size_t> first(cfg.train_subset);
      std::iota(first.begin(), first.end(), std::size_t{0});
      w.train = w.train.subset(first);
    }
  }
  if (w.train.input_dim() != cfg.arch.input_dim || w.holdout.input_dim() != cfg.arch.input_dim) {
    throw ConfigError("model.input_dim is " + std::to_string(cfg.arch.input_dim) + " but the data has " +
                      std::to_string(w.train.input_dim()) + " features");
  }
  if (w.train.size() < cfg.clients) {
    throw ConfigError("only " + std::to_string(w.train.size()) + " training samples for " +
                      std::to_string(cfg.clients) + " clients");
  }
  w.partition = data::dirichlet_partition(w.train, cfg.clients, cfg.dirichlet_alpha,
                                          derive_seed(cfg.seed, {tag("partition")}));
  return w;
}

Simulator::Simulator(RunConfig cfg) : Simulator(cfg, load_workload(cfg)) {}

Simulator::Simulator(RunConfig cfg, Workload workload)
    : cfg_(std::move(cfg)),
      work_(std::move(workload)),
      projector_([this] {
        cfg_.validate();
        return proj::ProjectionSpec::make(cfg_.effective_projection_seed(), cfg_.projection_k, cfg_.effective_mode(),
                                          cfg_.projection_allocation, cfg_.arch.layers());
      }()) {
  if (work_.partition.clients.size() != cfg_.clients) {
    throw ConfigError("workload is partitioned for " + std::to_string(work_.partition.clients.size()) +
                      " clients, config has " + std::to_string(cfg_.clients));
  }
  if (work_.train.num_classes != cfg_.arch.num_classes || work_.train.input_dim() != cfg_.arch.input_dim) {
    throw ConfigError("workload shape does not match model.input_dim / model.num_classes");
  }
  if (work_.holdout.size() == 0) throw ConfigError("holdout set is empty");
  init_clients();

  if (cfg_.diag_grad_norm) {
    Rng rng(derive_seed(cfg_.seed, {tag("probe")}));
    const auto n = std::min(cfg_.probe_size, work_.train.size());
    const auto rows = sample_without_replacement(work_.train.size(), n, rng);
    probe_inputs_ = rows_of(work_.train.images, rows);
    std::vector<int> labels;
    for (const auto r : rows) labels.push_back(work_.train.labels[r]);
    probe_targets_ = model::one_hot(labels, cfg_.arch.num_classes);
  }
}

void Simulator::init_clients() {
  clients_.clear();
  clients_.reserve(cfg_.clients);
  const auto dim = cfg_.arch.parameter_count();
  for (std::size_t i = 0; i < cfg_.clients; ++i) {
    Rng rng(cfg_.shared_init ? derive_seed(cfg_.seed, {tag("init")}) : derive_seed(cfg_.seed, {tag("init"), i}));
    ClientState c;
    c.weights = model::WeightVector::glorot(cfg_.arch, rng);
    c.momentum = optim::MomentumState::zeros(dim, cfg_.effective_mu());
    clients_.push_back(std::move(c));
  }
}

std::vector<std::size_t> Simulator::next_batch(std::size_t client) {
  auto& st = clients_[client];
  const auto& shard = work_.partition.clients[client];
  const std::size_t b = std::min(cfg_.batch_size, shard.size());
  if (st.cursor + b > shard.size()) {
    ++st.epoch;
    st.cursor = 0;
  }
  std::vector<std::size_t> perm(shard.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(cfg_.seed, {tag("batch"), client, st.epoch}));
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::size_t> out(perm.begin() + static_cast<std::ptrdiff_t>(st.cursor),
                               perm.begin() + static_cast<std::ptrdiff_t>(st.cursor + b));
  st.cursor += b;
  return out;
}

model::WeightVector Simulator::averaged_weights() const {
  std::vector<model::WeightVector> ws;
  ws.reserve(clients_.size());
  for (const auto& c : clients_) ws.push_back(c.weights);
  return average_weights(ws);
}

struct Simulator::Outgoing {
  kernel::PeerBatch self;  // full batch at full precision
  kernel::PeerBatch sent;  // what neighbors decode
  std::uint64_t message_bytes = 0;
  double train_loss = 0.0;
};

const RoundMetrics& Simulator::step() {
  if (finished()) throw ContractViolation("step: all " + std::to_string(cfg_.rounds) + " rounds are done");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t r = rounds_done();
  const std::size_t round = r + 1;
  const std::size_t m = cfg_.clients;
  const auto ctx = [round](std::size_t i) {
    return "round " + std::to_string(round) + ", client " + std::to_string(i);
  };

  const auto graph = topo::generate(m, cfg_.degree, cfg_.static_topology ? 0 : r, cfg_.seed);
  if (!cfg_.graph_dump_dir.empty()) {
    std::filesystem::create_directories(cfg_.graph_dump_dir);
    char name[32];
    std::snprintf(name, sizeof(name), "round_%04zu.edges", round);
    std::ofstream os(std::filesystem::path(cfg_.graph_dump_dir) / name);
    graph.write_edge_list(os);
  }

  trace_.assign(m, ClientTrace{});
  for (std::size_t i = 0; i < m; ++i) trace_[i].batch = next_batch(i);

  // Map: local logits, Jacobian sketch and the encoded message.
  std::vector<Outgoing> out(m);
  parallel_for(
      m, cfg_.workers,
      [&](std::size_t i) {
        const auto& shard = work_.partition.clients[i];
        std::vector<std::size_t> rows;
        rows.reserve(trace_[i].batch.size());
        for (const auto s : trace_[i].batch) rows.push_back(shard[s]);
        const Matrix x = rows_of(work_.train.images, rows);
        std::vector<int> labels;
        for (const auto s : rows) labels.push_back(work_.train.labels[s]);

        const auto& w = clients_[i].weights;
        Matrix logits = model::forward(w, x);
        const auto cid = static_cast<ClientId>(i);
        auto sketch = projector_.compress(model::jacobian(w, x, cid));

        auto& o = out[i];
        o.train_loss = model::cross_entropy(logits, labels);

        const auto keep = proj::choose_rows(sketch.sample_count, cfg_.sample_fraction,
                                            derive_seed(cfg_.seed, {tag("rows"), r, i}));
        auto subset = proj::take_rows(sketch, keep);
        subset.codec = cfg_.codec;
        const auto frame = proj::encode_wire(subset, cfg_.codec);
        o.sent.sketch = proj::decode_wire(frame);
        Matrix sent_logits = rows_of(logits, keep);
        if (cfg_.codec != proj::Codec::f64) sent_logits = sent_logits.cast<float>().cast<double>();
        o.sent.logits = std::move(sent_logits);
        for (const auto k : keep) o.sent.labels.push_back(labels[k]);
        o.message_bytes = frame.size() + proj::logits_bytes(keep.size(), cfg_.arch.num_classes, cfg_.codec);

        o.self.sketch = std::move(sketch);
        o.self.logits = std::move(logits);
        o.self.labels = std::move(labels);
      },
      ctx);

  // Reduce: aggregate, evolve, back-project, apply.
  const distill::DistillSchedule sched{cfg_.alpha_init,          cfg_.alpha_final, cfg_.tau_init, cfg_.tau_final,
                                       cfg_.effective_warm_rounds(), cfg_.rounds};
  parallel_for(
      m, cfg_.workers,
      [&](std::size_t i) {
        const auto& nbrs = topo::neighbors(graph, static_cast<ClientId>(i));
        std::vector<kernel::PeerBatch> received;
        received.reserve(nbrs.size());
        for (const auto j : nbrs) received.push_back(out[j].sent);

        auto agg = kernel::aggregate(out[i].self, received);
        kernel::split_validation(agg, cfg_.val_fraction, derive_seed(cfg_.seed, {tag("val"), r, i}));

        const Matrix hard = model::one_hot(agg.gather_labels(agg.train_rows), cfg_.arch.num_classes);
        const Matrix f0_train = agg.gather_logits(agg.train_rows);
        const Matrix f0_val = agg.gather_logits(agg.val_rows);
        const auto val_labels = agg.gather_labels(agg.val_rows);
        const Matrix target =
            cfg_.distillation_active() ? distill::build_target(hard, f0_train, sched, round).rows : hard;

        const auto kmat = kernel::build_kernel(agg, cfg_.kernel_cap_bytes);
        const auto evo = kernel::evolve(kmat, f0_train, f0_val, target, val_labels,
                                        {cfg_.eta, cfg_.t_evolve, false});
        if (evo.t_star == 0) throw DivergenceError("kernel evolution diverged on the first step; lower eta");

        auto& tr = trace_[i];
        tr.delta = projector_.back_project_flat(kernel::compressed_update(agg, evo, cfg_.eta));
        tr.step = optim::momentum_step(clients_[i].momentum, clients_[i].weights, tr.delta);
        tr.t_star = evo.t_star;
        tr.truncated = evo.truncated;
        tr.aggregated_samples = agg.sample_count();
        if (!clients_[i].weights.values().allFinite()) throw DivergenceError("weights became non-finite");
      },
      ctx);

  RoundMetrics met;
  met.round = round;
  met.components = graph.component_count();
  met.client_bytes.assign(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto deg = topo::neighbors(graph, static_cast<ClientId>(i)).size();
    met.client_bytes[i] = out[i].message_bytes * deg;
    met.bytes_sent += met.client_bytes[i];
    met.messages += deg;
    met.train_loss += out[i].train_loss / static_cast<double>(m);
    met.mean_t_star += static_cast<double>(trace_[i].t_star) / static_cast<double>(m);
    met.truncated += trace_[i].truncated ? 1 : 0;
  }

  const auto avg = averaged_weights();
  const auto agg_eval = evaluate(avg, work_.holdout);
  met.agg_accuracy = agg_eval.accuracy;
  met.agg_loss = agg_eval.loss;
  for (const auto& c : clients_) met.client_accuracy += evaluate(c.weights, work_.holdout).accuracy;
  met.client_accuracy /= static_cast<double>(m);
  if (cfg_.diag_grad_norm) {
    met.grad_norm_sq = model::loss_gradient(avg, probe_inputs_, probe_targets_).squaredNorm();
  }
  if (cfg_.diag_step_norm) {
    double s = 0.0;
    for (const auto& tr : trace_) s += tr.step.norm();
    met.step_norm = s / static_cast<double>(m);
  }
  met.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  history_.push_back(std::move(met));
  return history_.back();
}

void Simulator::run(const std::function<void(const RoundMetrics&)>& on_round) {
  while (!finished()) {
    const auto& met = step();
    if (on_round) on_round(met);
  }
}

}  // namespace spark::sim
