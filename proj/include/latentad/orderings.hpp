#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentad/errors.hpp"

namespace latentad {

// h x w grid of codebook indices.
struct LatentGrid {
    int height = 0;
    int width = 0;
    std::vector<int> indices;

    LatentGrid() = default;
    LatentGrid(int h, int w, int fill = 0)
        : height(h), width(w), indices(static_cast<size_t>(h) * w, fill) {}

    int& at(int r, int c) { return indices[static_cast<size_t>(r) * width + c]; }
    int at(int r, int c) const { return indices[static_cast<size_t>(r) * width + c]; }

    bool operator==(const LatentGrid& other) const = default;
};

enum class OrderingClass { Raster, SCurve, Hilbert, Random };

std::string to_string(OrderingClass cls);
OrderingClass ordering_class_from_string(const std::string& name);

// Bijection between grid cells and sequence positions. The symmetry index
// enumerates the dihedral group D4: bit 0 = horizontal flip, bit 1 = vertical
// flip, bit 2 = 90-degree rotation applied after the flips.
struct Ordering {
    OrderingClass cls = OrderingClass::Raster;
    int symmetry = 0;
    int height = 0;
    int width = 0;
    std::optional<uint64_t> seed;

    // permutation[i] = flat index (r * width + c) of the cell visited at step i.
    std::vector<int> permutation;

    size_t length() const { return permutation.size(); }
    int cell_row(size_t i) const { return permutation[i] / width; }
    int cell_col(size_t i) const { return permutation[i] % width; }

    // position_of[flat cell index] = sequence position.
    std::vector<int> inverse() const;

    nlohmann::json descriptor() const;
    static Ordering from_descriptor(const nlohmann::json& j);

    bool operator==(const Ordering& other) const = default;
};

// Token sequence produced by flattening a grid through an ordering.
struct TokenSequence {
    std::vector<int> tokens;
    Ordering ordering;
};

// Build an ordering. `seed` is required iff cls == Random. Hilbert orderings
// on grids without an exact power-of-two curve fall back to a generalized
// rectangle-capable construction unless `allow_generalized_hilbert` is false,
// in which case an unsupported-grid error is thrown.
Ordering make_ordering(OrderingClass cls, int symmetry, int height, int width,
                       std::optional<uint64_t> seed = std::nullopt,
                       bool allow_generalized_hilbert = true);

TokenSequence to_sequence(const LatentGrid& grid, const Ordering& ordering);
LatentGrid from_sequence(const TokenSequence& seq);

// "raster:3" or "random:0:12345" -> (class, symmetry, optional seed).
struct OrderingSpec {
    OrderingClass cls;
    int symmetry;
    std::optional<uint64_t> seed;
};
OrderingSpec parse_ordering_spec(const std::string& text);
std::string ordering_spec_to_string(const OrderingSpec& spec);

} // namespace latentad
