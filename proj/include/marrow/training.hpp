#pragma once

// Gradient-cached training step shared by the retriever and the reranker.
//
// Every input sequence gets its own tape and is run forward in parallel. A
// small loss tape takes the per-sequence outputs (embeddings or scores) as
// leaves; its gradients are pushed back through each sequence tape via the
// surrogate <output, dL/doutput>. Parameter gradients are reduced in
// sequence-index order, so the step is bit-identical for any thread count.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "marrow/error.hpp"
#include "marrow/model.hpp"
#include "marrow/parallel.hpp"

namespace marrow {

enum class OutputKind { embedding, score };

template <typename T>
struct StepResult {
  T loss = T(0);
  std::vector<std::vector<T>> grads;  // one per trainable tensor, trainable_tensors() order
};

/// Builds the loss from per-sequence outputs placed as leaves on `tape`.
template <typename T>
using LossFn = std::function<Var<T>(Tape<T>&, std::span<const Var<T>>)>;

template <typename T>
StepResult<T> cached_step(const ModelWeights<T>& weights, const std::type_identity_t<LoraAdapters<T>>* lora,
                          Trainable mode, const std::vector<TokenSequence>& inputs, OutputKind kind,
                          const LossFn<T>& loss_fn) {
  struct Graph {
    Tape<T> tape;
    BoundModel<T> model;
    Var<T> output;
  };
  const std::size_t n = inputs.size();
  std::vector<std::unique_ptr<Graph>> graphs(n);
  parallel_for(n, [&](std::size_t i) {
    auto g = std::make_unique<Graph>();
    g->model = bind(g->tape, weights, lora, mode);
    g->output = kind == OutputKind::embedding ? encode(g->model, inputs[i]) : score(g->model, inputs[i]);
    graphs[i] = std::move(g);
  });

  Tape<T> loss_tape;
  std::vector<Tensor<T>> outputs;
  outputs.reserve(n);
  for (auto& g : graphs) outputs.push_back(g->output.tensor());
  std::vector<Var<T>> leaves;
  for (auto& o : outputs) leaves.push_back(loss_tape.leaf(o, true));
  Var<T> loss = loss_fn(loss_tape, leaves);
  StepResult<T> result;
  result.loss = loss.value()[0];
  if (!std::isfinite(static_cast<double>(result.loss))) {
    throw NumericError("training loss is not finite (" + std::to_string(static_cast<double>(result.loss)) + ")");
  }
  loss_tape.backward(loss);

  std::vector<std::size_t> sizes;
  for (const auto& v : graphs.empty() ? std::vector<Var<T>>{} : graphs[0]->model.trainable) sizes.push_back(v.size());
  result.grads.resize(sizes.size());
  for (std::size_t p = 0; p < sizes.size(); ++p) result.grads[p].assign(sizes[p], T(0));
  if (sizes.empty()) return result;

  parallel_for(n, [&](std::size_t i) {
    Graph& g = *graphs[i];
    auto upstream = loss_tape.grad_tensor(leaves[i]);
    Var<T> surrogate = dot(g.output, g.tape.constant(std::move(upstream)));
    g.tape.backward(surrogate);
  });
  // Reduce over sequences in index order; parallel over parameter tensors.
  parallel_for(sizes.size(), [&](std::size_t p) {
    auto& acc = result.grads[p];
    for (std::size_t i = 0; i < n; ++i) {
      const Var<T> leaf = graphs[i]->model.trainable[p];
      const auto& node = graphs[i]->tape.node(leaf.id);
      if (node.grad.empty()) continue;
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += node.grad[j];
    }
  });
  return result;
}

/// −mean_i log softmax(row_i / τ)[positive_i] over a [B×C] similarity matrix.
template <typename T>
Var<T> contrastive_loss(Var<T> sim, std::span<const std::size_t> positives, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("temperature must be positive, got " + std::to_string(temperature));
  detail::require_matrix(sim, "contrastive_loss");
  if (positives.size() != sim.shape()[0]) {
    throw DimensionError("contrastive_loss: " + std::to_string(positives.size()) + " positive indices for " +
                         std::to_string(sim.shape()[0]) + " rows");
  }
  for (std::size_t p : positives) {
    if (p >= sim.shape()[1]) throw ContractError("contrastive_loss: positive index out of range");
  }
  Var<T> logp = log_softmax_rows(scale(sim, static_cast<T>(1.0 / temperature)));
  return scale(mean(pick(logp, positives)), T(-1));
}

}  // namespace marrow
