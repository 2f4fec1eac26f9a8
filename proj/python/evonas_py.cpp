// Python bindings. JSON-shaped results cross the boundary as strings and are
// decoded in the package's __init__.py.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "evonas/audio.hpp"
#include "evonas/errors.hpp"
#include "evonas/evosearch.hpp"
#include "evonas/pipeline.hpp"
#include "evonas/search_space.hpp"
#include "evonas/verifier.hpp"

namespace py = pybind11;
using namespace evonas;

namespace {

SpaceConfig make_space(const std::string& mode, std::size_t blocks) {
  const auto m = mode_from_name(mode);
  if (!m) throw ConfigError("unknown mode " + mode);
  return SpaceConfig{*m, blocks};
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed,
                             std::optional<std::string> out) {
  ExperimentConfig cfg = ExperimentConfig::load(path);
  if (seed) cfg.apply_seed(*seed);
  if (out) cfg.out = *out;
  cfg.validate();
  return cfg;
}

std::string record_json(const StageRecord& r) {
  return nlohmann::json{{"name", r.name},
                        {"version", r.version},
                        {"dir", r.dir},
                        {"checksums", r.checksums},
                        {"inputs", r.inputs},
                        {"wall_clock_seconds", r.wall_clock_seconds},
                        {"summary", r.summary}}
      .dump();
}

}  // namespace

PYBIND11_MODULE(_evonas, m) {
  m.doc() = "Memetic neural architecture search for speaker verification";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);
  py::register_exception<OracleError>(m, "OracleError", PyExc_RuntimeError);

  m.def(
      "canonical_genome", [](const std::string& text) { return encode(decode(text)); },
      "Parse a genome and return its canonical text form.", py::arg("text"));
  m.def(
      "validate_genome",
      [](const std::string& text, const std::string& mode, std::size_t blocks) {
        return validate(decode(text), make_space(mode, blocks));
      },
      "Problems with a genome for the given space (empty when valid).", py::arg("text"),
      py::arg("mode") = "autovector", py::arg("blocks") = 24);
  m.def(
      "space_size", [](std::size_t blocks, std::uint64_t n_op) { return space_size(blocks, n_op).str(); },
      "Number of architectures as a decimal string.", py::arg("blocks"), py::arg("n_op") = 6);
  m.def(
      "sample_genome",
      [](const std::string& mode, std::size_t blocks, std::uint64_t seed) {
        Rng rng(seed);
        return encode(uniform_sample(make_space(mode, blocks), rng));
      },
      py::arg("mode") = "autovector", py::arg("blocks") = 24, py::arg("seed") = 0);

  m.def(
      "mfcc",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> samples, int sample_rate,
         std::size_t target_frames) -> std::optional<py::array_t<double>> {
        Waveform w{std::vector<double>(samples.data(), samples.data() + samples.size()), sample_rate};
        FeatureOptions opt;
        opt.target_frames = target_frames;
        const auto f = extract_features(w, opt);
        if (!f) return std::nullopt;
        py::array_t<double> out({f->rows(), f->frames()});
        std::copy(f->data().begin(), f->data().end(), out.mutable_data());
        return out;
      },
      "40 x T mean-normalised MFCCs of a 16 kHz waveform, None when shorter than one frame.", py::arg("samples"),
      py::arg("sample_rate") = kSampleRate, py::arg("target_frames") = kTargetFrames);

  m.def(
      "compute_eer",
      [](const std::vector<double>& scores, const std::vector<bool>& targets) {
        if (scores.size() != targets.size()) throw ContractError("scores and targets differ in length");
        ScoreSet s;
        for (std::size_t i = 0; i < scores.size(); ++i) s.push_back({scores[i], targets[i]});
        return compute_eer(s);
      },
      py::arg("scores"), py::arg("targets"));

  m.def(
      "rank_sum_test",
      [](const std::vector<double>& x, const std::vector<double>& y) {
        const RankSumResult r = rank_sum_test(x, y);
        return py::dict(py::arg("u") = r.u, py::arg("z") = r.z, py::arg("p_less") = r.p_less);
      },
      "One-sided Mann-Whitney test that x is stochastically smaller than y.", py::arg("x"), py::arg("y"));

  m.def(
      "evolve",
      [](const std::function<double(const std::string&)>& fitness, const std::string& mode, std::size_t blocks,
         std::size_t population_size, std::size_t generations, double mutation_p, std::size_t neighbors,
         std::size_t local_steps, std::size_t tournament_size, std::optional<std::size_t> eval_budget,
         std::uint64_t seed) {
        SearchConfig c;
        c.space = make_space(mode, blocks);
        c.population_size = population_size;
        c.generations = generations;
        c.mutation_p = mutation_p;
        c.neighbors = neighbors;
        c.local_steps = local_steps;
        c.tournament_size = tournament_size;
        c.eval_budget = eval_budget;
        c.seed = seed;
        const SearchResult r = evolve(c, [&](const Genome& g) { return fitness(encode(g)); });
        py::list history;
        for (const GenerationLog& h : r.history)
          history.append(py::dict(py::arg("generation") = h.generation, py::arg("evals_used") = h.evals_used,
                                  py::arg("best_fitness") = h.best_fitness, py::arg("mean_fitness") = h.mean_fitness));
        return py::dict(py::arg("genome") = encode(r.best.genome), py::arg("fitness") = r.best.fitness,
                        py::arg("total_evaluations") = r.total_evaluations,
                        py::arg("budget_exhausted") = r.budget_exhausted, py::arg("history") = history);
      },
      "Memetic search maximising fitness(genome_text).", py::arg("fitness"), py::arg("mode") = "autovector",
      py::arg("blocks") = 24, py::arg("population_size") = 100, py::arg("generations") = 2000,
      py::arg("mutation_p") = 0.1, py::arg("neighbors") = 5, py::arg("local_steps") = 2,
      py::arg("tournament_size") = 10, py::arg("eval_budget") = py::none(), py::arg("seed") = 0);

  m.def(
      "match_count_fitness",
      [](const std::string& target, const std::string& genome) { return match_count_oracle(decode(target))(decode(genome)); },
      "Fraction of positions equal to target's.", py::arg("target"), py::arg("genome"));

  m.def(
      "load_config",
      [](const std::string& path, std::optional<std::uint64_t> seed, std::optional<std::string> out) {
        return load_config(path, seed, out).to_json().dump();
      },
      py::arg("path"), py::arg("seed") = py::none(), py::arg("out") = py::none());

  m.def(
      "run_stage",
      [](const std::string& stage, const std::string& config, std::optional<std::uint64_t> seed,
         std::optional<std::string> out, bool resume, std::optional<std::string> genome) {
        const ExperimentConfig cfg = load_config(config, seed, out);
        py::gil_scoped_release release;
        if (stage == "gen-data") return record_json(cmd_gen_data(cfg));
        if (stage == "extract-features") return record_json(cmd_extract_features(cfg));
        if (stage == "train-hypernet") return record_json(cmd_train_hypernet(cfg, resume));
        if (stage == "search") return record_json(cmd_search(cfg));
        if (stage == "retrain")
          return record_json(cmd_retrain(cfg, genome ? std::optional<Genome>(decode(*genome)) : std::nullopt));
        if (stage == "evaluate") return record_json(cmd_evaluate(cfg));
        if (stage == "report") return record_json(cmd_report(cfg));
        throw ConfigError("unknown stage " + stage);
      },
      py::arg("stage"), py::arg("config"), py::arg("seed") = py::none(), py::arg("out") = py::none(),
      py::arg("resume") = false, py::arg("genome") = py::none());

  m.attr("__version__") = EVONAS_VERSION;
}
