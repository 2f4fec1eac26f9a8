#pragma once

// Memetic evolutionary search over genomes: uniform initialisation, per-block
// mutation, hill-climbing local search, compete, insert/remove-worst and
// tournament selection, against a pluggable fitness oracle.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "evonas/search_space.hpp"

namespace evonas {

struct Individual {
  Genome genome;
  double fitness = 0.0;
  std::size_t birth_generation = 0;
};

struct Population {
  std::vector<Individual> members;
  std::size_t capacity = 0;
};

struct SearchConfig {
  SpaceConfig space;
  std::size_t population_size = 100;  // S
  std::size_t generations = 2000;     // G
  double mutation_p = 0.1;
  std::size_t neighbors = 5;       // k_n
  std::size_t local_steps = 2;     // L
  std::size_t tournament_size = 10;  // k_t
  // Cap on oracle calls (cache hits are free); unset = unlimited.
  std::optional<std::size_t> eval_budget;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

using FitnessFn = std::function<double(const Genome&)>;

// The oracle threw; carries the offending genome.
class OracleError : public std::runtime_error {
 public:
  OracleError(const Genome& genome, const std::string& what);
  const Genome& genome() const { return genome_; }

 private:
  Genome genome_;
};

class BudgetExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Evaluation {
  Genome genome;
  double fitness = 0.0;
};

// Memoised oracle keyed by the genome's text encoding. Only cache misses
// count as calls and against the budget.
class FitnessEvaluator {
 public:
  explicit FitnessEvaluator(FitnessFn fn, std::optional<std::size_t> budget = std::nullopt);

  // Throws BudgetExhausted when a new genome would exceed the budget, and
  // OracleError when the oracle fails.
  double operator()(const Genome& g);
  bool cached(const Genome& g) const;
  std::size_t calls() const { return evaluated_.size(); }
  std::optional<std::size_t> budget() const { return budget_; }
  bool exhausted() const { return budget_ && calls() >= *budget_; }
  // Every distinct genome in first-evaluation order.
  const std::vector<Evaluation>& evaluated() const { return evaluated_; }

 private:
  FitnessFn fn_;
  std::optional<std::size_t> budget_;
  std::map<std::string, double> cache_;
  std::vector<Evaluation> evaluated_;
};

// S uniform genomes, each evaluated.
Population initialize(const SearchConfig& config, FitnessEvaluator& oracle, Rng& rng);

// Per position, with probability p, a uniform draw over the other choices.
Genome mutate(const Genome& g, const SpaceConfig& space, double p, Rng& rng);

// One position replaced by a different choice.
Genome random_neighbor(const Genome& g, const SpaceConfig& space, Rng& rng);

// Up to `steps` rounds: draw k_n distinct one-position neighbours, evaluate
// them and move to the best one when strictly fitter. Stops at the first
// round without improvement.
Evaluation local_search(const Evaluation& start, const SpaceConfig& space, FitnessEvaluator& oracle,
                        std::size_t neighbors, std::size_t steps, Rng& rng);

// Higher fitness wins; ties go to b (the locally searched candidate).
const Individual& compete(const Individual& a, const Individual& b);

// Best of k_t members drawn without replacement; ties go to the earliest
// birth generation, then the lowest index. Returns the member index.
std::size_t tournament_select(const Population& pop, std::size_t k_t, Rng& rng);

// Index of the member removed on insertion: lowest fitness, oldest first.
std::size_t worst_index(const Population& pop);

struct GenerationLog {
  std::size_t generation = 0;
  std::size_t evals_used = 0;  // cumulative oracle calls, initialisation included
  double best_fitness = 0.0;   // best ever evaluated
  double mean_fitness = 0.0;   // population mean after the generation
  std::size_t population_size = 0;
  Genome best_genome;
};

struct SearchResult {
  Individual best;
  std::vector<GenerationLog> history;
  Population population;
  std::size_t initial_evaluations = 0;
  std::size_t total_evaluations = 0;
  bool budget_exhausted = false;
  std::vector<Evaluation> evaluated;  // every oracle call, in order
};

// Seeded from config.seed; stops early (flagged) when config.eval_budget runs
// out. Throws OracleError when the oracle fails.
SearchResult evolve(const SearchConfig& config, const FitnessFn& fitness);

struct RandomSearchResult {
  Individual best;
  std::vector<double> best_so_far;  // after each sample
};

// `budget` uniform samples; the best one (earliest on ties).
RandomSearchResult random_search_baseline(const SpaceConfig& space, FitnessEvaluator& oracle, std::size_t budget,
                                          Rng& rng);

// Fraction of positions that equal `target`'s: a closed-form landscape whose
// unique optimum is `target`.
FitnessFn match_count_oracle(Genome target);

// Mann-Whitney U of x against y, normal approximation with tie correction.
struct RankSumResult {
  double u = 0.0;       // pairs with x < y, ties counted 1/2
  double z = 0.0;
  double p_less = 1.0;  // one-sided: x stochastically smaller than y
};
RankSumResult rank_sum_test(const std::vector<double>& x, const std::vector<double>& y);

// generation,evals_used,best_fitness,mean_fitness,best_genome
void write_history_csv(const std::filesystem::path& path, const std::vector<GenerationLog>& history);

}  // namespace evonas
