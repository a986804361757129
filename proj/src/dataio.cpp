#include "mhc/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "mhc/rng.hpp"

namespace mhc {

namespace {

constexpr char kMagic[4] = {'H', 'S', 'I', 'C'};
constexpr uint16_t kVersion = 1;

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw DataError("cannot open " + path);
    }

    void read(void* dst, size_t n, const char* what) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in_.gcount()) != n) {
            throw FormatError(path_ + ": truncated payload at offset " + std::to_string(offset_) +
                              ": expected " + std::to_string(n) + " bytes for " + what);
        }
        offset_ += n;
    }

    template <class T>
    T get(const char* what) {
        T v;
        read(&v, sizeof(T), what);
        return v;
    }

    size_t offset() const { return offset_; }

    void expect_eof() {
        char c;
        in_.read(&c, 1);
        if (!in_.eof()) {
            throw FormatError(path_ + ": trailing bytes at offset " + std::to_string(offset_));
        }
    }

private:
    std::string path_;
    std::ifstream in_;
    size_t offset_ = 0;
};

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw DataError("cannot open " + path + " for writing");
    }

    void write(const void* src, size_t n) {
        out_.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(n));
    }

    template <class T>
    void put(T v) {
        write(&v, sizeof(T));
    }

    void close() {
        out_.close();
        if (!out_) throw DataError("write failed: " + path_);
    }

private:
    std::string path_;
    std::ofstream out_;
};

} // namespace

void WavelengthTable::validate() const {
    for (size_t i = 0; i < nanometers.size(); ++i) {
        double v = nanometers[i];
        if (!(v > 0.0 && v < 20000.0)) {
            throw DataError("wavelength " + std::to_string(v) + " nm at band " +
                            std::to_string(i) + " outside (0, 20000)");
        }
        if (i > 0 && !(v > nanometers[i - 1])) {
            throw DataError("wavelengths not strictly increasing at band " + std::to_string(i) +
                            ": " + std::to_string(nanometers[i - 1]) + " then " +
                            std::to_string(v));
        }
    }
}

Tensor HsiCube::reflectance_tensor() const {
    std::vector<double> d(reflectance.begin(), reflectance.end());
    return Tensor::from_data({pixel_count(), bands}, std::move(d));
}

std::vector<int32_t> HsiCube::zero_based_labels() const {
    std::vector<int32_t> out(labels.size());
    for (size_t i = 0; i < labels.size(); ++i)
        out[i] = labels[i] == 0 ? -1 : static_cast<int32_t>(labels[i]) - 1;
    return out;
}

void HsiCube::validate() const {
    if (height <= 0 || width <= 0 || bands <= 0)
        throw DataError("cube extents must be positive");
    if (wavelengths.bands() != bands)
        throw DataError("wavelength table has " + std::to_string(wavelengths.bands()) +
                        " entries for " + std::to_string(bands) + " bands");
    wavelengths.validate();
    if (static_cast<int64_t>(reflectance.size()) != pixel_count() * bands)
        throw DataError("reflectance payload size mismatch");
    if (static_cast<int64_t>(labels.size()) != pixel_count())
        throw DataError("label mask size mismatch");
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] > class_count)
            throw DataError("label " + std::to_string(labels[i]) + " at pixel " +
                            std::to_string(i) + " exceeds class count " +
                            std::to_string(class_count));
    }
    if (class_names.size() != class_count)
        throw DataError("class name table size mismatch");
}

HsiCube read_container(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(path + ": bad magic at offset 0 (expected \"HSIC\")");
    uint16_t version = r.get<uint16_t>("version");
    if (version != kVersion)
        throw FormatError(path + ": unsupported version " + std::to_string(version));

    HsiCube cube;
    cube.height = r.get<uint32_t>("height");
    cube.width = r.get<uint32_t>("width");
    cube.bands = r.get<uint32_t>("band count");
    if (cube.height == 0 || cube.width == 0 || cube.bands == 0)
        throw FormatError(path + ": zero extent in header");

    size_t wl_offset = r.offset();
    cube.wavelengths.nanometers.resize(static_cast<size_t>(cube.bands));
    for (int64_t i = 0; i < cube.bands; ++i)
        cube.wavelengths.nanometers[static_cast<size_t>(i)] = r.get<float>("wavelength table");
    try {
        cube.wavelengths.validate();
    } catch (const DataError& e) {
        throw FormatError(path + ": invalid wavelength table at offset " +
                          std::to_string(wl_offset) + ": " + e.what());
    }

    cube.reflectance.resize(static_cast<size_t>(cube.pixel_count() * cube.bands));
    r.read(cube.reflectance.data(), cube.reflectance.size() * sizeof(float), "reflectance");

    cube.labels.resize(static_cast<size_t>(cube.pixel_count()));
    r.read(cube.labels.data(), cube.labels.size() * sizeof(uint16_t), "labels");

    cube.class_count = r.get<uint16_t>("class count");
    cube.class_names.resize(cube.class_count);
    for (uint16_t i = 0; i < cube.class_count; ++i) {
        uint16_t len = r.get<uint16_t>("class name length");
        std::string name(len, '\0');
        if (len) r.read(name.data(), len, "class name");
        cube.class_names[i] = std::move(name);
    }
    r.expect_eof();
    cube.validate();
    return cube;
}

void write_container(const HsiCube& cube, const std::string& path) {
    cube.validate();
    Writer w(path);
    w.write(kMagic, 4);
    w.put<uint16_t>(kVersion);
    w.put<uint32_t>(static_cast<uint32_t>(cube.height));
    w.put<uint32_t>(static_cast<uint32_t>(cube.width));
    w.put<uint32_t>(static_cast<uint32_t>(cube.bands));
    for (double nm : cube.wavelengths.nanometers) w.put<float>(static_cast<float>(nm));
    w.write(cube.reflectance.data(), cube.reflectance.size() * sizeof(float));
    w.write(cube.labels.data(), cube.labels.size() * sizeof(uint16_t));
    w.put<uint16_t>(cube.class_count);
    for (const auto& name : cube.class_names) {
        w.put<uint16_t>(static_cast<uint16_t>(name.size()));
        w.write(name.data(), name.size());
    }
    w.close();
}

SplitMasks stratified_split(const std::vector<uint16_t>& labels, uint16_t class_count,
                            const SplitSpec& spec) {
    if (spec.per_class_counts.empty()) {
        if (!(spec.fraction > 0.0 && spec.fraction <= 1.0))
            throw ConfigError("split fraction must be in (0,1], got " +
                              std::to_string(spec.fraction));
    } else if (spec.per_class_counts.size() != class_count) {
        throw ConfigError("per-class counts: expected " + std::to_string(class_count) +
                          " entries, got " + std::to_string(spec.per_class_counts.size()));
    }

    std::vector<std::vector<int64_t>> by_class(class_count);
    for (size_t i = 0; i < labels.size(); ++i) {
        uint16_t lab = labels[i];
        if (lab == 0) continue;
        if (lab > class_count)
            throw DataError("label " + std::to_string(lab) + " exceeds class count");
        by_class[lab - 1].push_back(static_cast<int64_t>(i));
    }
    for (uint16_t c = 0; c < class_count; ++c) {
        if (by_class[c].empty())
            throw DataError("class " + std::to_string(c + 1) + " has no labeled pixels");
    }

    SplitMasks masks;
    masks.train.assign(labels.size(), 0);
    masks.test.assign(labels.size(), 0);
    Rng rng(spec.seed);
    int64_t test_total = 0;
    for (uint16_t c = 0; c < class_count; ++c) {
        auto& idx = by_class[c];
        rng.shuffle(idx);
        int64_t n = static_cast<int64_t>(idx.size());
        int64_t n_train;
        if (!spec.per_class_counts.empty()) {
            n_train = spec.per_class_counts[c];
            if (n_train < 1 || n_train > n)
                throw ConfigError("class " + std::to_string(c + 1) + ": requested " +
                                  std::to_string(n_train) + " training samples of " +
                                  std::to_string(n));
        } else {
            n_train = std::max<int64_t>(1, std::llround(spec.fraction * static_cast<double>(n)));
            n_train = std::min(n_train, n);
        }
        for (int64_t i = 0; i < n; ++i) {
            if (i < n_train) {
                masks.train[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
            } else {
                masks.test[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
                ++test_total;
            }
        }
    }
    if (test_total == 0)
        throw ConfigError("split leaves no test pixels; need test data (lower the fraction)");
    return masks;
}

HsiCube synth_cube(int64_t h, int64_t w, int64_t k, int64_t c, uint64_t seed,
                   double noise_sigma) {
    if (h < 1 || w < 1) throw ConfigError("synth_cube: extents must be positive");
    if (k < 1 || k > h * w) throw ConfigError("synth_cube: need 1 <= K <= H*W");
    if (k > 65535) throw ConfigError("synth_cube: class count exceeds label range");
    if (c < 8)
        throw ConfigError("synth_cube: need C >= 8 so all four spectrum groups are non-empty");

    HsiCube cube;
    cube.height = h;
    cube.width = w;
    cube.bands = c;
    cube.class_count = static_cast<uint16_t>(k);
    cube.wavelengths.nanometers.resize(static_cast<size_t>(c));
    for (int64_t i = 0; i < c; ++i) {
        cube.wavelengths.nanometers[static_cast<size_t>(i)] =
            400.0 + 2100.0 * static_cast<double>(i) / static_cast<double>(c - 1);
    }

    Rng rng(seed);

    // Voronoi regions around k distinct seed pixels
    std::vector<int64_t> cells(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) cells[static_cast<size_t>(i)] = i;
    rng.shuffle(cells);
    std::vector<std::pair<int64_t, int64_t>> centers;
    for (int64_t i = 0; i < k; ++i)
        centers.emplace_back(cells[static_cast<size_t>(i)] / w, cells[static_cast<size_t>(i)] % w);

    cube.labels.resize(static_cast<size_t>(h * w));
    for (int64_t r = 0; r < h; ++r)
        for (int64_t col = 0; col < w; ++col) {
            int64_t best = 0;
            int64_t best_d = -1;
            for (int64_t ci = 0; ci < k; ++ci) {
                int64_t dr = r - centers[static_cast<size_t>(ci)].first;
                int64_t dc = col - centers[static_cast<size_t>(ci)].second;
                int64_t d = dr * dr + dc * dc;
                if (best_d < 0 || d < best_d) {
                    best_d = d;
                    best = ci;
                }
            }
            cube.labels[static_cast<size_t>(r * w + col)] = static_cast<uint16_t>(best + 1);
        }

    // class spectra: three Gaussian bumps each over a flat base
    struct Bump {
        double mu, sigma, amp;
    };
    std::vector<std::array<Bump, 3>> spectra(static_cast<size_t>(k));
    for (int64_t ci = 0; ci < k; ++ci)
        for (auto& b : spectra[static_cast<size_t>(ci)]) {
            b.mu = rng.uniform(450.0, 2450.0);
            b.sigma = rng.uniform(60.0, 220.0);
            b.amp = rng.uniform(0.4, 1.0);
        }

    auto spectrum_at = [&](int64_t cls, double nm) {
        double v = 0.25;
        for (const auto& b : spectra[static_cast<size_t>(cls)]) {
            double t = (nm - b.mu) / b.sigma;
            v += 0.5 * b.amp * std::exp(-0.5 * t * t);
        }
        return v;
    };

    cube.reflectance.resize(static_cast<size_t>(h * w * c));
    for (int64_t l = 0; l < h * w; ++l) {
        int64_t cls = cube.labels[static_cast<size_t>(l)] - 1;
        for (int64_t b = 0; b < c; ++b) {
            double v = spectrum_at(cls, cube.wavelengths.nanometers[static_cast<size_t>(b)]);
            if (noise_sigma > 0.0) v += noise_sigma * rng.normal();
            cube.reflectance[static_cast<size_t>(l * c + b)] = static_cast<float>(v);
        }
    }

    cube.class_names.resize(static_cast<size_t>(k));
    for (int64_t ci = 0; ci < k; ++ci)
        cube.class_names[static_cast<size_t>(ci)] = "class_" + std::to_string(ci + 1);
    return cube;
}

void write_pgm(const std::string& path, int64_t width, int64_t height,
               const std::vector<uint8_t>& gray) {
    if (static_cast<int64_t>(gray.size()) != width * height)
        throw ContractError("write_pgm: payload size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(gray.data()),
              static_cast<std::streamsize>(gray.size()));
    if (!out) throw DataError("write failed: " + path);
}

void write_ppm(const std::string& path, int64_t width, int64_t height,
               const std::vector<uint8_t>& rgb) {
    if (static_cast<int64_t>(rgb.size()) != width * height * 3)
        throw ContractError("write_ppm: payload size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()),
              static_cast<std::streamsize>(rgb.size()));
    if (!out) throw DataError("write failed: " + path);
}

std::array<uint8_t, 3> class_color(int64_t cls) {
    static const std::array<uint8_t, 3> table[] = {
        {0, 0, 0},       // unlabeled
        {230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
        {245, 130, 48},  {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
        {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
        {170, 110, 40},  {255, 250, 200}, {128, 0, 0},    {170, 255, 195},
        {128, 128, 0},   {255, 215, 180}, {0, 0, 128},    {128, 128, 128},
    };
    constexpr int64_t n = static_cast<int64_t>(sizeof(table) / sizeof(table[0]));
    if (cls <= 0) return table[0];
    return table[1 + (cls - 1) % (n - 1)];
}

} // namespace mhc
