#include "evonas/evosearch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "evonas/checkpoint.hpp"
#include "evonas/errors.hpp"

namespace evonas {

void SearchConfig::validate() const {
  if (space.length() == 0) throw ConfigError("search space has no positions");
  if (population_size < 2) throw ConfigError("population_size must be >= 2");
  if (tournament_size < 1 || tournament_size > population_size)
    throw ConfigError("tournament_size must be in [1, population_size]");
  if (!(mutation_p >= 0.0 && mutation_p <= 1.0)) throw ConfigError("mutation_p must be in [0, 1]");
  if (eval_budget && *eval_budget < population_size)
    throw ConfigError("eval_budget must cover the initial population");
}

OracleError::OracleError(const Genome& genome, const std::string& what)
    : std::runtime_error("fitness oracle failed on " + encode(genome) + ": " + what), genome_(genome) {}

FitnessEvaluator::FitnessEvaluator(FitnessFn fn, std::optional<std::size_t> budget)
    : fn_(std::move(fn)), budget_(budget) {
  if (!fn_) throw ContractError("FitnessEvaluator needs an oracle");
}

bool FitnessEvaluator::cached(const Genome& g) const { return cache_.count(encode(g)) > 0; }

double FitnessEvaluator::operator()(const Genome& g) {
  std::string key = encode(g);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  if (exhausted()) throw BudgetExhausted("evaluation budget of " + std::to_string(*budget_) + " used up");
  double f;
  try {
    f = fn_(g);
  } catch (const std::exception& e) {
    throw OracleError(g, e.what());
  }
  if (!std::isfinite(f)) throw OracleError(g, "non-finite fitness");
  cache_.emplace(std::move(key), f);
  evaluated_.push_back({g, f});
  return f;
}

Population initialize(const SearchConfig& config, FitnessEvaluator& oracle, Rng& rng) {
  config.validate();
  Population pop;
  pop.capacity = config.population_size;
  pop.members.reserve(config.population_size);
  for (std::size_t i = 0; i < config.population_size; ++i) {
    Genome g = uniform_sample(config.space, rng);
    const double f = oracle(g);
    pop.members.push_back({std::move(g), f, 0});
  }
  return pop;
}

namespace {

// Uniform over the n-1 choices other than `current`.
std::size_t other_choice(std::size_t current, std::size_t n, Rng& rng) {
  std::size_t c = std::uniform_int_distribution<std::size_t>(0, n - 2)(rng);
  return c >= current ? c + 1 : c;
}

}  // namespace

Genome mutate(const Genome& g, const SpaceConfig& space, double p, Rng& rng) {
  Genome out = g;
  const std::size_t n = space.choices_per_position();
  std::bernoulli_distribution flip(p);
  for (std::size_t i = 0; i < g.length(); ++i)
    if (flip(rng)) set_choice(out, i, other_choice(choice_index(g, i), n, rng));
  return out;
}

Genome random_neighbor(const Genome& g, const SpaceConfig& space, Rng& rng) {
  Genome out = g;
  const std::size_t i = std::uniform_int_distribution<std::size_t>(0, g.length() - 1)(rng);
  set_choice(out, i, other_choice(choice_index(g, i), space.choices_per_position(), rng));
  return out;
}

Evaluation local_search(const Evaluation& start, const SpaceConfig& space, FitnessEvaluator& oracle,
                        std::size_t neighbors, std::size_t steps, Rng& rng) {
  Evaluation current = start;
  const std::size_t n_choices = space.choices_per_position();
  const std::size_t neighbourhood = current.genome.length() * (n_choices - 1);
  const std::size_t k = std::min(neighbors, neighbourhood);
  for (std::size_t step = 0; step < steps && k > 0; ++step) {
    // Distinct neighbours as (position, choice) pairs.
    std::set<std::pair<std::size_t, std::size_t>> drawn;
    std::optional<Evaluation> best;
    while (drawn.size() < k) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, current.genome.length() - 1)(rng);
      const std::size_t c = other_choice(choice_index(current.genome, i), n_choices, rng);
      if (!drawn.emplace(i, c).second) continue;
      Genome cand = current.genome;
      set_choice(cand, i, c);
      const double f = oracle(cand);
      if (!best || f > best->fitness) best = Evaluation{std::move(cand), f};
    }
    if (!(best->fitness > current.fitness)) break;
    current = std::move(*best);
  }
  return current;
}

const Individual& compete(const Individual& a, const Individual& b) { return a.fitness > b.fitness ? a : b; }

namespace {

// a ranks above b: fitter, then older, then earlier in the population.
bool ranks_above(const Population& pop, std::size_t a, std::size_t b) {
  const Individual& x = pop.members[a];
  const Individual& y = pop.members[b];
  if (x.fitness != y.fitness) return x.fitness > y.fitness;
  if (x.birth_generation != y.birth_generation) return x.birth_generation < y.birth_generation;
  return a < b;
}

}  // namespace

std::size_t tournament_select(const Population& pop, std::size_t k_t, Rng& rng) {
  const std::size_t n = pop.members.size();
  if (k_t < 1 || k_t > n) throw ContractError("tournament size must be in [1, population size]");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first k_t entries are a uniform subset.
  for (std::size_t i = 0; i < k_t; ++i)
    std::swap(idx[i], idx[std::uniform_int_distribution<std::size_t>(i, n - 1)(rng)]);
  std::size_t best = idx[0];
  for (std::size_t i = 1; i < k_t; ++i)
    if (ranks_above(pop, idx[i], best)) best = idx[i];
  return best;
}

std::size_t worst_index(const Population& pop) {
  if (pop.members.empty()) throw ContractError("empty population");
  std::size_t worst = 0;
  for (std::size_t i = 1; i < pop.members.size(); ++i) {
    const Individual& x = pop.members[i];
    const Individual& w = pop.members[worst];
    if (x.fitness < w.fitness || (x.fitness == w.fitness && x.birth_generation < w.birth_generation)) worst = i;
  }
  return worst;
}

namespace {

// Running argmax over the evaluator's history (earliest wins ties).
class BestTracker {
 public:
  const Evaluation& update(const FitnessEvaluator& oracle) {
    const auto& all = oracle.evaluated();
    for (; scanned_ < all.size(); ++scanned_)
      if (!best_ || all[scanned_].fitness > all[*best_].fitness) best_ = scanned_;
    return all.at(*best_);
  }

 private:
  std::size_t scanned_ = 0;
  std::optional<std::size_t> best_;
};

double mean_fitness(const Population& pop) {
  double s = 0.0;
  for (const Individual& m : pop.members) s += m.fitness;
  return s / static_cast<double>(pop.members.size());
}

}  // namespace

SearchResult evolve(const SearchConfig& config, const FitnessFn& fitness) {
  config.validate();
  FitnessEvaluator oracle(fitness, config.eval_budget);
  Rng rng(config.seed);
  SearchResult result;
  result.population = initialize(config, oracle, rng);
  result.initial_evaluations = oracle.calls();
  Population& pop = result.population;

  BestTracker tracker;
  auto log_row = [&](std::size_t gen) {
    const Evaluation& best = tracker.update(oracle);
    result.history.push_back({gen, oracle.calls(), best.fitness, mean_fitness(pop), pop.members.size(), best.genome});
  };
  std::size_t parent = std::uniform_int_distribution<std::size_t>(0, pop.members.size() - 1)(rng);
  std::size_t gen = 1;
  try {
    for (; gen <= config.generations; ++gen) {
      if (oracle.exhausted()) throw BudgetExhausted("budget used up");
      const Genome mutant_genome = mutate(pop.members[parent].genome, config.space, config.mutation_p, rng);
      const Individual mutant{mutant_genome, oracle(mutant_genome), gen};
      const Evaluation searched = local_search({mutant.genome, mutant.fitness}, config.space, oracle,
                                               config.neighbors, config.local_steps, rng);
      Individual winner = compete(mutant, Individual{searched.genome, searched.fitness, gen});
      winner.fitness = oracle(winner.genome);  // cached: both were evaluated above
      pop.members.push_back(std::move(winner));
      pop.members.erase(pop.members.begin() + static_cast<std::ptrdiff_t>(worst_index(pop)));
      parent = tournament_select(pop, config.tournament_size, rng);
      log_row(gen);
    }
  } catch (const BudgetExhausted&) {
    result.budget_exhausted = true;
    // The interrupted generation still spent evaluations; log them.
    const std::size_t logged = result.history.empty() ? result.initial_evaluations : result.history.back().evals_used;
    if (oracle.calls() > logged) log_row(gen);
  }
  const Evaluation& best = tracker.update(oracle);
  result.best = {best.genome, best.fitness, 0};
  result.total_evaluations = oracle.calls();
  result.evaluated = oracle.evaluated();
  return result;
}

RandomSearchResult random_search_baseline(const SpaceConfig& space, FitnessEvaluator& oracle, std::size_t budget,
                                          Rng& rng) {
  if (budget == 0) throw ContractError("random search needs a budget of at least 1");
  RandomSearchResult r;
  for (std::size_t i = 0; i < budget; ++i) {
    Genome g = uniform_sample(space, rng);
    const double f = oracle(g);
    if (i == 0 || f > r.best.fitness) r.best = {std::move(g), f, i};
    r.best_so_far.push_back(r.best.fitness);
  }
  return r;
}

FitnessFn match_count_oracle(Genome target) {
  return [target = std::move(target)](const Genome& g) {
    if (g.mode != target.mode || g.length() != target.length())
      throw ContractError("genome does not fit the match-count landscape");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < g.length(); ++i) hits += choice_index(g, i) == choice_index(target, i);
    return static_cast<double>(hits) / static_cast<double>(g.length());
  };
}

RankSumResult rank_sum_test(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.empty() || y.empty()) throw EmptyInputError("rank_sum_test needs two non-empty samples");
  const double n1 = static_cast<double>(x.size()), n2 = static_cast<double>(y.size());
  std::vector<std::pair<double, int>> all;
  for (double v : x) all.emplace_back(v, 0);
  for (double v : y) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end());
  const double n = n1 + n2;
  double rank_sum_x = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second == 0) rank_sum_x += midrank;
    i = j;
  }
  // Pairs with x > y (ties 1/2), then flipped to count x < y.
  const double u_greater = rank_sum_x - n1 * (n1 + 1.0) / 2.0;
  RankSumResult r;
  r.u = n1 * n2 - u_greater;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var <= 0.0) return r;  // all values tied: no evidence either way
  r.z = (r.u - n1 * n2 / 2.0) / std::sqrt(var);
  r.p_less = 0.5 * std::erfc(r.z / std::sqrt(2.0));
  return r;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<GenerationLog>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "generation,evals_used,best_fitness,mean_fitness,best_genome\n";
  for (const GenerationLog& row : history)
    out << row.generation << ',' << row.evals_used << ',' << row.best_fitness << ',' << row.mean_fitness << ",\""
        << encode(row.best_genome) << "\"\n";
  write_file_atomic(path, out.str());
}

}  // namespace evonas
