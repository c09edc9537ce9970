#include "latentad/orderings.hpp"

#include <algorithm>
#include <utility>

#include "latentad/rng.hpp"

namespace latentad {

std::string to_string(OrderingClass cls) {
    switch (cls) {
        case OrderingClass::Raster: return "raster";
        case OrderingClass::SCurve: return "s_curve";
        case OrderingClass::Hilbert: return "hilbert";
        case OrderingClass::Random: return "random";
    }
    return "raster";
}

OrderingClass ordering_class_from_string(const std::string& name) {
    if (name == "raster") return OrderingClass::Raster;
    if (name == "s_curve" || name == "scurve") return OrderingClass::SCurve;
    if (name == "hilbert") return OrderingClass::Hilbert;
    if (name == "random") return OrderingClass::Random;
    throw ConfigError("unknown ordering class: " + name);
}

namespace {

using Cell = std::pair<int, int>; // (row, col)

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Classic Hilbert curve on an n x n grid, n a power of two. Standard
// distance-to-coordinate bit manipulation.
void hilbert_d2xy(int n, int d, int& x, int& y) {
    int t = d;
    x = 0;
    y = 0;
    for (int s = 1; s < n; s *= 2) {
        const int rx = 1 & (t / 2);
        const int ry = 1 & (t ^ rx);
        if (ry == 0) {
            if (rx == 1) {
                x = s - 1 - x;
                y = s - 1 - y;
            }
            std::swap(x, y);
        }
        x += s * rx;
        y += s * ry;
        t /= 4;
    }
}

// Generalized Hilbert ("gilbert") curve for arbitrary rectangles; produces
// unit steps whenever at least one side is even.
void gilbert2d(int x, int y, int ax, int ay, int bx, int by, std::vector<Cell>& out) {
    const int w = std::abs(ax + ay);
    const int h = std::abs(bx + by);
    const int dax = (ax > 0) - (ax < 0);
    const int day = (ay > 0) - (ay < 0);
    const int dbx = (bx > 0) - (bx < 0);
    const int dby = (by > 0) - (by < 0);

    if (h == 1) {
        for (int i = 0; i < w; ++i) {
            out.emplace_back(y, x);
            x += dax;
            y += day;
        }
        return;
    }
    if (w == 1) {
        for (int i = 0; i < h; ++i) {
            out.emplace_back(y, x);
            x += dbx;
            y += dby;
        }
        return;
    }

    int ax2 = ax / 2, ay2 = ay / 2;
    int bx2 = bx / 2, by2 = by / 2;
    const int w2 = std::abs(ax2 + ay2);
    const int h2 = std::abs(bx2 + by2);

    if (2 * w > 3 * h) {
        if ((w2 % 2) && (w > 2)) {
            ax2 += dax;
            ay2 += day;
        }
        gilbert2d(x, y, ax2, ay2, bx, by, out);
        gilbert2d(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by, out);
    } else {
        if ((h2 % 2) && (h > 2)) {
            bx2 += dbx;
            by2 += dby;
        }
        gilbert2d(x, y, bx2, by2, ax2, ay2, out);
        gilbert2d(x + bx2, y + by2, ax, ay, bx - bx2, by - by2, out);
        gilbert2d(x + (ax - dax) + (bx2 - dbx), y + (ay - day) + (by2 - dby), -bx2, -by2,
                  -(ax - ax2), -(ay - ay2), out);
    }
}

std::vector<Cell> base_path(OrderingClass cls, int h, int w, std::optional<uint64_t> seed,
                            bool allow_generalized_hilbert) {
    std::vector<Cell> path;
    path.reserve(static_cast<size_t>(h) * w);
    switch (cls) {
        case OrderingClass::Raster:
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) path.emplace_back(r, c);
            break;
        case OrderingClass::SCurve:
            for (int r = 0; r < h; ++r) {
                if (r % 2 == 0)
                    for (int c = 0; c < w; ++c) path.emplace_back(r, c);
                else
                    for (int c = w - 1; c >= 0; --c) path.emplace_back(r, c);
            }
            break;
        case OrderingClass::Hilbert:
            if (h == w && is_pow2(h)) {
                for (int d = 0; d < h * w; ++d) {
                    int x = 0, y = 0;
                    hilbert_d2xy(h, d, x, y);
                    path.emplace_back(y, x);
                }
            } else if (allow_generalized_hilbert) {
                if (w >= h)
                    gilbert2d(0, 0, w, 0, 0, h, path);
                else
                    gilbert2d(0, 0, 0, h, w, 0, path);
            } else {
                throw ConfigError("hilbert ordering unsupported on " + std::to_string(h) + "x" +
                                  std::to_string(w) +
                                  " grid with the generalized construction disabled");
            }
            break;
        case OrderingClass::Random: {
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) path.emplace_back(r, c);
            Rng rng(*seed);
            rng.shuffle(path);
            break;
        }
    }
    return path;
}

} // namespace

Ordering make_ordering(OrderingClass cls, int symmetry, int height, int width,
                       std::optional<uint64_t> seed, bool allow_generalized_hilbert) {
    if (height < 1 || width < 1) throw InputError("ordering grid dimensions must be >= 1");
    if (symmetry < 0 || symmetry > 7) throw ConfigError("ordering symmetry must be in [0,8)");
    if (cls == OrderingClass::Random && !seed)
        throw ConfigError("random ordering requires a seed");
    if (cls != OrderingClass::Random) seed.reset();

    const bool hflip = symmetry & 1;
    const bool vflip = symmetry & 2;
    const bool rot90 = symmetry & 4;

    // The scan runs in a transformed frame: flips in the original frame
    // followed by an optional 90-degree rotation (which swaps dimensions).
    const int frame_h = rot90 ? width : height;
    const int frame_w = rot90 ? height : width;
    const auto path = base_path(cls, frame_h, frame_w, seed, allow_generalized_hilbert);

    Ordering ordering;
    ordering.cls = cls;
    ordering.symmetry = symmetry;
    ordering.height = height;
    ordering.width = width;
    ordering.seed = seed;
    ordering.permutation.reserve(path.size());
    for (const auto& [fr, fc] : path) {
        int r, c;
        if (rot90) {
            // Inverse of (r,c) -> (c, height-1-r).
            r = height - 1 - fc;
            c = fr;
        } else {
            r = fr;
            c = fc;
        }
        if (vflip) r = height - 1 - r;
        if (hflip) c = width - 1 - c;
        ordering.permutation.push_back(r * width + c);
    }
    return ordering;
}

std::vector<int> Ordering::inverse() const {
    std::vector<int> pos(permutation.size(), -1);
    for (size_t i = 0; i < permutation.size(); ++i) pos[permutation[i]] = static_cast<int>(i);
    return pos;
}

nlohmann::json Ordering::descriptor() const {
    nlohmann::json j{{"class", to_string(cls)},
                     {"symmetry", symmetry},
                     {"height", height},
                     {"width", width}};
    if (seed) j["seed"] = *seed;
    return j;
}

Ordering Ordering::from_descriptor(const nlohmann::json& j) {
    std::optional<uint64_t> seed;
    if (j.contains("seed")) seed = j.at("seed").get<uint64_t>();
    return make_ordering(ordering_class_from_string(j.at("class")), j.at("symmetry"),
                         j.at("height"), j.at("width"), seed);
}

TokenSequence to_sequence(const LatentGrid& grid, const Ordering& ordering) {
    if (grid.height != ordering.height || grid.width != ordering.width)
        throw InputError("to_sequence: grid dimensions do not match ordering");
    TokenSequence seq;
    seq.ordering = ordering;
    seq.tokens.reserve(ordering.length());
    for (int flat : ordering.permutation) seq.tokens.push_back(grid.indices[flat]);
    return seq;
}

LatentGrid from_sequence(const TokenSequence& seq) {
    const Ordering& ordering = seq.ordering;
    if (seq.tokens.size() != ordering.length())
        throw InputError("from_sequence: token count does not match ordering length");
    LatentGrid grid(ordering.height, ordering.width);
    for (size_t i = 0; i < seq.tokens.size(); ++i)
        grid.indices[ordering.permutation[i]] = seq.tokens[i];
    return grid;
}

OrderingSpec parse_ordering_spec(const std::string& text) {
    const auto first = text.find(':');
    if (first == std::string::npos)
        throw ConfigError("ordering spec must look like class:symmetry[:seed], got: " + text);
    OrderingSpec spec;
    spec.cls = ordering_class_from_string(text.substr(0, first));
    const auto second = text.find(':', first + 1);
    const std::string sym_text = second == std::string::npos
                                     ? text.substr(first + 1)
                                     : text.substr(first + 1, second - first - 1);
    try {
        spec.symmetry = std::stoi(sym_text);
    } catch (const std::exception&) {
        throw ConfigError("bad symmetry in ordering spec: " + text);
    }
    if (second != std::string::npos) spec.seed = std::stoull(text.substr(second + 1));
    if (spec.cls == OrderingClass::Random && !spec.seed)
        throw ConfigError("random ordering spec needs a seed: " + text);
    return spec;
}

std::string ordering_spec_to_string(const OrderingSpec& spec) {
    std::string out = to_string(spec.cls) + ":" + std::to_string(spec.symmetry);
    if (spec.seed) out += ":" + std::to_string(*spec.seed);
    return out;
}

} // namespace latentad
