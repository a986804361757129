#include "mhc/streams.hpp"

#include <cmath>

namespace mhc {

std::vector<StreamSpec> split_bands(const WavelengthTable& wavelengths,
                                    const StreamRanges& rg) {
    wavelengths.validate();
    int64_t c = wavelengths.bands();
    if (c < 1) throw ConfigError("split_bands: empty wavelength table");

    StreamSpec full{"FULL", {}};
    StreamSpec vis{"VIS", {}}, nir{"NIR", {}}, swir1{"SWIR1", {}}, swir2{"SWIR2", {}};
    for (int64_t i = 0; i < c; ++i) {
        double nm = wavelengths.nanometers[static_cast<size_t>(i)];
        full.band_indices.push_back(i);
        // thresholds only: a band below vis_lo is nearest to VIS, one above
        // swir2_hi is nearest to SWIR2
        if (nm < rg.nir_lo) {
            vis.band_indices.push_back(i);
        } else if (nm < rg.swir1_lo) {
            nir.band_indices.push_back(i);
        } else if (nm < rg.swir2_lo) {
            swir1.band_indices.push_back(i);
        } else {
            swir2.band_indices.push_back(i);
        }
    }
    for (const auto* s : {&vis, &nir, &swir1, &swir2}) {
        if (s->band_indices.empty()) {
            throw ConfigError("stream " + s->name +
                              " has no bands for this sensor; supply explicit band_indices "
                              "instead of the wavelength ranges");
        }
    }
    return {full, vis, nir, swir1, swir2};
}

std::vector<StreamSpec> explicit_streams(const std::vector<std::vector<int64_t>>& groups,
                                         int64_t bands) {
    StreamSpec full{"FULL", {}};
    for (int64_t i = 0; i < bands; ++i) full.band_indices.push_back(i);
    std::vector<StreamSpec> specs{full};
    for (size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].empty()) throw ConfigError("explicit stream group " + std::to_string(g) +
                                                 " is empty");
        for (int64_t idx : groups[g]) {
            if (idx < 0 || idx >= bands)
                throw ConfigError("explicit stream group " + std::to_string(g) +
                                  " references band " + std::to_string(idx) + " outside [0," +
                                  std::to_string(bands) + ")");
        }
        specs.push_back({"G" + std::to_string(g + 1), groups[g]});
    }
    return specs;
}

std::vector<StreamSpec> duplicate_streams(int64_t bands, int64_t n) {
    if (n < 1) throw ConfigError("duplicate_streams: need n >= 1");
    std::vector<int64_t> all;
    for (int64_t i = 0; i < bands; ++i) all.push_back(i);
    std::vector<StreamSpec> specs;
    specs.push_back({"FULL", all});
    for (int64_t s = 1; s < n; ++s) specs.push_back({"DUP" + std::to_string(s), all});
    return specs;
}

Tensor positional_encoding(int64_t h, int64_t w, int64_t d) {
    if (d % 4 != 0)
        throw ConfigError("positional encoding needs D divisible by 4, got " + std::to_string(d));
    int64_t half = d / 2;
    int64_t pairs = half / 2;
    std::vector<double> out(static_cast<size_t>(h * w * d));
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            double* p = out.data() + (r * w + c) * d;
            for (int64_t i = 0; i < pairs; ++i) {
                double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                                     static_cast<double>(half));
                p[2 * i] = std::sin(static_cast<double>(r) * omega);
                p[2 * i + 1] = std::cos(static_cast<double>(r) * omega);
                p[half + 2 * i] = std::sin(static_cast<double>(c) * omega);
                p[half + 2 * i + 1] = std::cos(static_cast<double>(c) * omega);
            }
        }
    }
    return Tensor::from_data({h * w, d}, std::move(out));
}

StreamEmbedding make_stream_embedding(const std::vector<StreamSpec>& specs, int64_t d,
                                      int64_t h, int64_t w, ParameterRegistry& reg, Rng& rng,
                                      const std::string& prefix, bool tie_init) {
    StreamEmbedding emb;
    for (size_t s = 0; s < specs.size(); ++s) {
        int64_t ce = static_cast<int64_t>(specs[s].band_indices.size());
        Tensor wgt;
        if (tie_init && s > 0) {
            wgt = Tensor::from_data({ce, d}, emb.weights[0].data());
            reg.add(prefix + ".embed." + specs[s].name + ".w", wgt);
        } else {
            wgt = randn({ce, d}, rng, 1.0 / std::sqrt(static_cast<double>(ce)));
            reg.add(prefix + ".embed." + specs[s].name + ".w", wgt);
        }
        emb.weights.push_back(wgt);
        emb.biases.push_back(reg.create(prefix + ".embed." + specs[s].name + ".b", {d}));
    }
    emb.positional = positional_encoding(h, w, d);
    return emb;
}

Tensor embed_streams(const HsiCube& cube, const std::vector<StreamSpec>& specs,
                     const StreamEmbedding& emb) {
    if (specs.size() != emb.weights.size() || specs.size() != emb.biases.size())
        throw DimensionError("embed_streams: spec/embedding head count mismatch");
    Tensor pixels = cube.reflectance_tensor();   // [L, C]
    std::vector<Tensor> streams;
    for (size_t s = 0; s < specs.size(); ++s) {
        int64_t ce = static_cast<int64_t>(specs[s].band_indices.size());
        if (emb.weights[s].shape()[0] != ce) {
            throw DimensionError("embed_streams: stream " + specs[s].name + " has " +
                                 std::to_string(ce) + " bands but weight expects " +
                                 std::to_string(emb.weights[s].shape()[0]));
        }
        Tensor x = gather_cols(pixels, specs[s].band_indices);
        Tensor y = add(matmul(x, emb.weights[s]), emb.biases[s]);
        if (s == 0) y = add(y, emb.positional);
        streams.push_back(y);
    }
    return stack_streams(streams);
}

} // namespace mhc
