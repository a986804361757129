#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mhc/tensor.hpp"

namespace mhc {

struct WavelengthTable {
    std::vector<double> nanometers;   // one per band, strictly increasing, in (0, 20000)
    void validate() const;
    int64_t bands() const { return static_cast<int64_t>(nanometers.size()); }
};

// H x W x C reflectance cube, band-interleaved by pixel, with a label mask
// (0 = unlabeled, 1..K = classes).
struct HsiCube {
    int64_t height = 0;
    int64_t width = 0;
    int64_t bands = 0;
    WavelengthTable wavelengths;
    std::vector<float> reflectance;   // [pixel * C + band]
    std::vector<uint16_t> labels;     // H*W entries
    uint16_t class_count = 0;
    std::vector<std::string> class_names;

    int64_t pixel_count() const { return height * width; }
    Tensor reflectance_tensor() const;              // [L, C] doubles, constant
    std::vector<int32_t> zero_based_labels() const; // -1 where unlabeled
    void validate() const;
};

// HSIC binary container, little-endian, strict (no trailing bytes):
//   "HSIC" | version u16 | H u32 | W u32 | C u32 | C*f32 wavelengths(nm)
//   | H*W*C f32 reflectance | H*W u16 labels | K u16 | K * (u16 len, bytes) names
HsiCube read_container(const std::string& path);
void write_container(const HsiCube& cube, const std::string& path);

struct SplitSpec {
    double fraction = 0.10;                   // per-class training fraction
    std::vector<int64_t> per_class_counts;    // optional explicit per-class counts (index = class-1)
    uint64_t seed = 0;
};

struct SplitMasks {
    std::vector<uint8_t> train;
    std::vector<uint8_t> test;
};

// Per class c: max(1, round(fraction * N_c)) training pixels by seeded shuffle,
// remainder test. Labeled pixels are partitioned, unlabeled pixels are in
// neither mask.
SplitMasks stratified_split(const std::vector<uint16_t>& labels, uint16_t class_count,
                            const SplitSpec& spec);

// Voronoi-labeled synthetic scene: K spatial regions, each with a distinct
// smooth spectrum (Gaussian bumps over 400-2500nm) plus i.i.d. noise.
// Wavelengths evenly spaced over 400-2500nm; needs C >= 8 so every physical
// stream is non-empty.
HsiCube synth_cube(int64_t h, int64_t w, int64_t k, int64_t c, uint64_t seed,
                   double noise_sigma = 0.01);

void write_pgm(const std::string& path, int64_t width, int64_t height,
               const std::vector<uint8_t>& gray);
void write_ppm(const std::string& path, int64_t width, int64_t height,
               const std::vector<uint8_t>& rgb);

// fixed class palette; 0 (unlabeled) is black
std::array<uint8_t, 3> class_color(int64_t cls);

} // namespace mhc
