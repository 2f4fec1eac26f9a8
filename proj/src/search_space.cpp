#include "evonas/search_space.hpp"

#include <algorithm>
#include <charconv>

#include "evonas/errors.hpp"

namespace evonas {

namespace {

constexpr std::array<std::string_view, kNumOps> kOpNames = {"maxpool", "identity", "conv1x1",
                                                             "conv3x3", "conv5x5", "conv7x7"};
constexpr std::array<std::string_view, 4> kWindowNames = {"ctx0", "ctx1", "ctx2", "ctx3"};

std::vector<BlockGene> make_all_genes() {
  std::vector<BlockGene> genes;
  for (OpKind op : kAllOps) genes.push_back({{op}});
  for (std::size_t i = 0; i < kNumOps; ++i)
    for (std::size_t j = i + 1; j < kNumOps; ++j) genes.push_back(BlockGene{{kAllOps[i], kAllOps[j]}}.canonical());
  return genes;
}

}  // namespace

std::string_view op_name(OpKind op) { return kOpNames[static_cast<std::size_t>(op)]; }

std::optional<OpKind> op_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumOps; ++i)
    if (kOpNames[i] == name) return kAllOps[i];
  return std::nullopt;
}

std::size_t conv_kernel(OpKind op) {
  switch (op) {
    case OpKind::Conv1x1: return 1;
    case OpKind::Conv3x3: return 3;
    case OpKind::Conv5x5: return 5;
    case OpKind::Conv7x7: return 7;
    default: return 0;
  }
}

BlockGene BlockGene::canonical() const {
  BlockGene g = *this;
  std::sort(g.ops.begin(), g.ops.end(), [](OpKind a, OpKind b) { return op_name(a) < op_name(b); });
  return g;
}

bool BlockGene::operator==(const BlockGene& other) const { return canonical().ops == other.canonical().ops; }

std::string_view window_name(ContextWindow w) { return kWindowNames[static_cast<std::size_t>(w)]; }

std::optional<ContextWindow> window_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kWindowNames.size(); ++i)
    if (kWindowNames[i] == name) return kAllWindows[i];
  return std::nullopt;
}

std::vector<int> window_offsets(ContextWindow w) {
  const int c = static_cast<int>(w);
  if (c == 0) return {0};
  return {-c, 0, c};
}

std::string_view mode_name(SpaceMode mode) { return mode == SpaceMode::AutoVector ? "autovector" : "tdnn"; }

std::optional<SpaceMode> mode_from_name(std::string_view name) {
  if (name == "autovector") return SpaceMode::AutoVector;
  if (name == "tdnn") return SpaceMode::TdnnXVector;
  return std::nullopt;
}

std::size_t SpaceConfig::choices_per_position() const {
  return mode == SpaceMode::AutoVector ? combos_per_block(kNumOps) : kAllWindows.size();
}

bool Genome::operator==(const Genome& other) const {
  return mode == other.mode && blocks == other.blocks && windows == other.windows;
}

std::uint64_t combos_per_block(std::uint64_t n_op) { return n_op + n_op * (n_op - 1) / 2; }

BigInt space_size(std::size_t n_blocks, std::uint64_t n_op) {
  return boost::multiprecision::pow(BigInt(combos_per_block(n_op)), static_cast<unsigned>(n_blocks));
}

BigInt space_size(const SpaceConfig& config) {
  return boost::multiprecision::pow(BigInt(config.choices_per_position()), static_cast<unsigned>(config.length()));
}

const std::vector<BlockGene>& all_block_genes() {
  static const std::vector<BlockGene> genes = make_all_genes();
  return genes;
}

std::size_t gene_index(const BlockGene& gene) {
  const auto& genes = all_block_genes();
  auto it = std::find(genes.begin(), genes.end(), gene);
  if (it == genes.end()) throw ContractError("block gene is not one of the valid combinations");
  return static_cast<std::size_t>(it - genes.begin());
}

std::size_t choice_index(const Genome& g, std::size_t i) {
  if (g.mode == SpaceMode::AutoVector) return gene_index(g.blocks.at(i));
  return static_cast<std::size_t>(g.windows.at(i));
}

void set_choice(Genome& g, std::size_t i, std::size_t choice) {
  if (g.mode == SpaceMode::AutoVector)
    g.blocks.at(i) = all_block_genes().at(choice);
  else
    g.windows.at(i) = kAllWindows.at(choice);
}

Genome uniform_sample(const SpaceConfig& config, Rng& rng) {
  Genome g;
  g.mode = config.mode;
  std::uniform_int_distribution<std::size_t> pick(0, config.choices_per_position() - 1);
  if (config.mode == SpaceMode::AutoVector) {
    g.blocks.resize(config.n_blocks);
  } else {
    g.windows.resize(kTdnnLayers);
  }
  for (std::size_t i = 0; i < config.length(); ++i) set_choice(g, i, pick(rng));
  return g;
}

std::vector<std::string> validate(const Genome& g, const SpaceConfig& config) {
  std::vector<std::string> problems;
  if (g.mode != config.mode) {
    problems.push_back("mode mismatch: genome is " + std::string(mode_name(g.mode)) + ", space is " +
                       std::string(mode_name(config.mode)));
    return problems;
  }
  if (g.length() != config.length())
    problems.push_back("wrong length: expected " + std::to_string(config.length()) + ", got " +
                       std::to_string(g.length()));
  if (g.mode == SpaceMode::AutoVector) {
    if (!g.windows.empty()) problems.push_back("choice-block genome carries TDNN windows");
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
      const auto& ops = g.blocks[i].ops;
      if (ops.empty() || ops.size() > 2)
        problems.push_back("block " + std::to_string(i) + " has " + std::to_string(ops.size()) +
                           " ops, expected 1 or 2");
      else if (ops.size() == 2 && ops[0] == ops[1])
        problems.push_back("non-distinct ops at block " + std::to_string(i));
      for (OpKind op : ops)
        if (static_cast<std::size_t>(op) >= kNumOps) problems.push_back("unknown op at block " + std::to_string(i));
    }
  } else {
    if (!g.blocks.empty()) problems.push_back("TDNN genome carries choice blocks");
    for (std::size_t i = 0; i < g.windows.size(); ++i)
      if (static_cast<std::size_t>(g.windows[i]) >= kAllWindows.size())
        problems.push_back("unknown context window at layer " + std::to_string(i));
  }
  return problems;
}

bool is_valid(const Genome& g, const SpaceConfig& config) { return validate(g, config).empty(); }

std::string encode(const Genome& g) {
  std::string out;
  for (std::size_t i = 0; i < g.length(); ++i) {
    if (i) out += ';';
    if (g.mode == SpaceMode::AutoVector) {
      out += 'B' + std::to_string(i) + ":{";
      const BlockGene gene = g.blocks[i].canonical();
      for (std::size_t k = 0; k < gene.ops.size(); ++k) {
        if (k) out += ',';
        out += op_name(gene.ops[k]);
      }
      out += '}';
    } else {
      out += 'L' + std::to_string(i) + ":{" + std::string(window_name(g.windows[i])) + '}';
    }
  }
  return out;
}

Genome decode(std::string_view text) {
  if (text.empty()) throw ParseError("empty genome text", 0);
  Genome g;
  const char tag = text[0];
  if (tag == 'B')
    g.mode = SpaceMode::AutoVector;
  else if (tag == 'L')
    g.mode = SpaceMode::TdnnXVector;
  else
    throw ParseError("genome segments must start with 'B' or 'L'", 0);

  std::size_t pos = 0;
  auto expect = [&](char c) {
    if (pos >= text.size() || text[pos] != c) throw ParseError(std::string("expected '") + c + "'", pos);
    ++pos;
  };
  for (std::size_t index = 0;; ++index) {
    expect(tag);
    std::size_t value = 0;
    auto [end, ec] = std::from_chars(text.data() + pos, text.data() + text.size(), value);
    if (ec != std::errc() || end == text.data() + pos) throw ParseError("expected segment index", pos);
    if (value != index)
      throw ParseError("segment index " + std::to_string(value) + " out of order, expected " + std::to_string(index),
                       pos);
    pos = static_cast<std::size_t>(end - text.data());
    expect(':');
    expect('{');
    const std::size_t close = text.find('}', pos);
    if (close == std::string_view::npos) throw ParseError("unterminated '{'", pos);
    std::string_view body = text.substr(pos, close - pos);
    if (g.mode == SpaceMode::AutoVector) {
      BlockGene gene;
      std::size_t start = 0;
      while (true) {
        const std::size_t comma = body.find(',', start);
        const std::string_view name = body.substr(start, comma == std::string_view::npos ? body.npos : comma - start);
        auto op = op_from_name(name);
        if (!op) throw ParseError("unknown op '" + std::string(name) + "'", pos + start);
        gene.ops.push_back(*op);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
      g.blocks.push_back(gene.canonical());
    } else {
      auto w = window_from_name(body);
      if (!w) throw ParseError("unknown context window '" + std::string(body) + "'", pos);
      g.windows.push_back(*w);
    }
    pos = close + 1;
    if (pos == text.size()) break;
    expect(';');
  }
  return g;
}

Genome uniform_genome(const SpaceConfig& config, const BlockGene& gene) {
  Genome g;
  g.mode = SpaceMode::AutoVector;
  g.blocks.assign(config.n_blocks, gene.canonical());
  return g;
}

}  // namespace evonas
