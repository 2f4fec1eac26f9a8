#pragma once

// Architecture genomes for the two searchable topologies:
//  * choice-block mode: every block applies one or two distinct operations
//    out of six, giving 21 combinations per block;
//  * TDNN mode: each of the five frame-level layers picks a splice window.

#include <array>
#include <boost/multiprecision/cpp_int.hpp>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace evonas {

using Rng = std::mt19937_64;
using BigInt = boost::multiprecision::cpp_int;

enum class OpKind : std::uint8_t { MaxPool, Identity, Conv1x1, Conv3x3, Conv5x5, Conv7x7 };

inline constexpr std::array<OpKind, 6> kAllOps = {OpKind::MaxPool, OpKind::Identity, OpKind::Conv1x1,
                                                   OpKind::Conv3x3, OpKind::Conv5x5, OpKind::Conv7x7};
inline constexpr std::size_t kNumOps = kAllOps.size();

std::string_view op_name(OpKind op);
std::optional<OpKind> op_from_name(std::string_view name);
// Kernel size of a convolution op, 0 for MaxPool/Identity.
std::size_t conv_kernel(OpKind op);

struct BlockGene {
  std::vector<OpKind> ops;

  // Ops sorted by name, the order used in the text encoding.
  BlockGene canonical() const;
  bool operator==(const BlockGene& other) const;
};

// Splice offsets {0} or {-c, 0, +c}.
enum class ContextWindow : std::uint8_t { Frame = 0, Pm1 = 1, Pm2 = 2, Pm3 = 3 };
inline constexpr std::array<ContextWindow, 4> kAllWindows = {ContextWindow::Frame, ContextWindow::Pm1,
                                                            ContextWindow::Pm2, ContextWindow::Pm3};
inline constexpr std::size_t kTdnnLayers = 5;

std::string_view window_name(ContextWindow w);
std::optional<ContextWindow> window_from_name(std::string_view name);
std::vector<int> window_offsets(ContextWindow w);

enum class SpaceMode : std::uint8_t { AutoVector, TdnnXVector };
std::string_view mode_name(SpaceMode mode);
std::optional<SpaceMode> mode_from_name(std::string_view name);

struct SpaceConfig {
  SpaceMode mode = SpaceMode::AutoVector;
  std::size_t n_blocks = 24;  // choice-block mode only

  // Genes per genome: n_blocks, or kTdnnLayers in TDNN mode.
  std::size_t length() const { return mode == SpaceMode::AutoVector ? n_blocks : kTdnnLayers; }
  // Alternatives per position: 21 or 4.
  std::size_t choices_per_position() const;
};

struct Genome {
  SpaceMode mode = SpaceMode::AutoVector;
  std::vector<BlockGene> blocks;       // choice-block mode
  std::vector<ContextWindow> windows;  // TDNN mode

  std::size_t length() const { return mode == SpaceMode::AutoVector ? blocks.size() : windows.size(); }
  bool operator==(const Genome& other) const;
};

// n_op + n_op(n_op-1)/2.
std::uint64_t combos_per_block(std::uint64_t n_op);
BigInt space_size(std::size_t n_blocks, std::uint64_t n_op);
BigInt space_size(const SpaceConfig& config);

// The 21 valid genes: singles in OpKind order, then pairs (i<j) in OpKind order.
const std::vector<BlockGene>& all_block_genes();
std::size_t gene_index(const BlockGene& gene);

// Index of the gene/window at position `i` among choices_per_position().
std::size_t choice_index(const Genome& g, std::size_t i);
void set_choice(Genome& g, std::size_t i, std::size_t choice);

Genome uniform_sample(const SpaceConfig& config, Rng& rng);

// Empty when valid; otherwise one human-readable line per problem.
std::vector<std::string> validate(const Genome& g, const SpaceConfig& config);
bool is_valid(const Genome& g, const SpaceConfig& config);

// "B0:{conv3x3};B1:{identity,maxpool}" or "L0:{ctx2};...;L4:{ctx0}".
std::string encode(const Genome& g);
Genome decode(std::string_view text);

Genome uniform_genome(const SpaceConfig& config, const BlockGene& gene);

}  // namespace evonas
