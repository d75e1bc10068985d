#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "semdiff/data.hpp"
#include "semdiff/errors.hpp"

namespace semdiff {

namespace {

constexpr int64_t kSpleen = 2;
constexpr int64_t kKidneyRight = 3;
constexpr int64_t kKidneyLeft = 4;
constexpr int64_t kLiver = 7;
constexpr int64_t kStomach = 8;
constexpr int64_t kAorta = 9;

// Sum of three sinusoids; the total amplitude stays below this bound so that
// region means of neighbouring bands stay at least 0.1 apart.
constexpr double kNoiseAmplitude = 0.009;

class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}
    // Portable uniform in [0, 1); std distributions differ across libraries.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int64_t integer(int64_t lo, int64_t hi) {  // inclusive
        return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo + 1));
    }

private:
    std::mt19937_64 engine_;
};

struct Ellipse {
    double cx, cy, rx, ry;
    // <= 1 inside. Evaluated at pixel centres.
    double value(int64_t r, int64_t c) const {
        const double dx = (static_cast<double>(c) + 0.5 - cx) / rx;
        const double dy = (static_cast<double>(r) + 0.5 - cy) / ry;
        return dx * dx + dy * dy;
    }
};

double band_center(int64_t label) {
    for (const auto& band : toy_intensity_bands()) {
        if (band.label == label) return band.center;
    }
    throw DataError("class " + std::to_string(label) + " has no toy intensity band");
}

// Places an organ ellipse fully inside the body with a one-pixel gap to the
// body boundary and to every organ already drawn.
bool try_place(Rng& rng, const Ellipse& body, LabelMap& mask, int64_t label, double rx, double ry) {
    const int64_t size = mask.rows();
    for (int attempt = 0; attempt < 200; ++attempt) {
        Ellipse organ{rng.uniform(body.cx - body.rx * 0.7, body.cx + body.rx * 0.7),
                      rng.uniform(body.cy - body.ry * 0.7, body.cy + body.ry * 0.7), rx, ry};
        const double grown = (1.0 + 1.5 / std::min(rx, ry));
        bool ok = true;
        int64_t pixels = 0;
        for (int64_t r = 0; r < size && ok; ++r) {
            for (int64_t c = 0; c < size && ok; ++c) {
                const double v = organ.value(r, c);
                if (v <= grown * grown) {
                    if (body.value(r, c) > 1.0 || mask(r, c) != LabelSchema::kBody) ok = false;
                    // keep a pixel of body between this organ and the body edge
                    if (r == 0 || c == 0 || r == size - 1 || c == size - 1) ok = false;
                }
                if (v <= 1.0) ++pixels;
            }
        }
        if (!ok || pixels == 0) continue;
        for (int64_t r = 0; r < size; ++r) {
            for (int64_t c = 0; c < size; ++c) {
                if (organ.value(r, c) <= 1.0) mask(r, c) = static_cast<uint8_t>(label);
            }
        }
        return true;
    }
    return false;
}

}  // namespace

const std::vector<IntensityBand>& toy_intensity_bands() {
    static const std::vector<IntensityBand> kBands{
        {LabelSchema::kBackground, 0.0}, {LabelSchema::kBody, 0.20}, {kStomach, 0.34}, {kLiver, 0.46},
        {kSpleen, 0.58},                 {kKidneyRight, 0.70},        {kKidneyLeft, 0.82}, {kAorta, 0.94},
    };
    return kBands;
}

std::string SliceRecord::stem() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04lld", static_cast<long long>(slice_index));
    return subject_id + "_" + buf;
}

std::vector<SliceRecord> generate_toy_dataset(const ToyOptions& options) {
    if (options.size < 32) {
        throw ParameterError("toy dataset size must be >= 32, got " + std::to_string(options.size));
    }
    if (options.subjects < 1 || options.slices_per_subject < 1) {
        throw ParameterError("toy dataset needs at least one subject and one slice");
    }
    const int64_t size = options.size;
    const double s = static_cast<double>(size);
    const auto test_subjects = static_cast<int64_t>(std::ceil(options.test_fraction * static_cast<double>(options.subjects)));

    Rng rng(options.seed);
    std::vector<SliceRecord> records;
    records.reserve(static_cast<std::size_t>(options.subjects * options.slices_per_subject));

    for (int64_t subject = 0; subject < options.subjects; ++subject) {
        char id[32];
        std::snprintf(id, sizeof id, "toy%03lld", static_cast<long long>(subject));
        const double cx = s / 2.0 + rng.uniform(-0.03, 0.03) * s;
        const double cy = s / 2.0 + rng.uniform(-0.03, 0.03) * s;
        const double ax = rng.uniform(0.38, 0.45) * s;
        const double ay = rng.uniform(0.30, 0.37) * s;
        const Split split = subject >= options.subjects - test_subjects ? Split::Test : Split::Train;

        for (int64_t slice = 0; slice < options.slices_per_subject; ++slice) {
            const double pos = options.slices_per_subject == 1
                                   ? 0.5
                                   : static_cast<double>(slice) / static_cast<double>(options.slices_per_subject - 1);
            const double scale = 1.0 - 0.12 * std::abs(pos - 0.5) + rng.uniform(-0.02, 0.02);
            const Ellipse body{cx, cy, ax * scale, ay * scale};

            LabelMap mask(size, size, 0);
            for (int64_t r = 0; r < size; ++r) {
                for (int64_t c = 0; c < size; ++c) {
                    if (body.value(r, c) <= 1.0) mask(r, c) = static_cast<uint8_t>(LabelSchema::kBody);
                }
            }

            // Liver is always present and is the largest organ; 1-4 smaller ones follow.
            double liver_scale = 1.0;
            while (!try_place(rng, body, mask, kLiver, rng.uniform(0.13, 0.16) * s * liver_scale,
                              rng.uniform(0.10, 0.13) * s * liver_scale)) {
                liver_scale *= 0.9;
                if (liver_scale < 0.2) throw DataError("toy generator could not place an organ");
            }
            std::vector<int64_t> palette{kSpleen, kKidneyRight, kKidneyLeft, kStomach, kAorta};
            const int64_t extra = rng.integer(1, 4);
            int64_t placed = 0;
            for (int64_t k = 0; k < extra; ++k) {
                const auto pick = static_cast<std::size_t>(rng.integer(0, static_cast<int64_t>(palette.size()) - 1));
                const int64_t label = palette[pick];
                palette.erase(palette.begin() + static_cast<std::ptrdiff_t>(pick));
                const double radius = label == kAorta ? rng.uniform(0.045, 0.055) : rng.uniform(0.055, 0.08);
                double shrink = 1.0;
                bool ok = false;
                // The first extra organ is mandatory, the rest are best effort.
                for (int tries = 0; tries < (placed == 0 ? 8 : 1) && !ok; ++tries, shrink *= 0.85) {
                    ok = try_place(rng, body, mask, label, std::max(1.5, radius * s * shrink),
                                   std::max(1.5, radius * s * shrink * rng.uniform(0.8, 1.2)));
                }
                if (ok) ++placed;
            }

            // Smooth, low-frequency intensity texture.
            double fx[3], fy[3], phase[3];
            for (int k = 0; k < 3; ++k) {
                fx[k] = rng.uniform(0.5, 2.0) * 2.0 * M_PI / s;
                fy[k] = rng.uniform(0.5, 2.0) * 2.0 * M_PI / s;
                phase[k] = rng.uniform(0.0, 2.0 * M_PI);
            }
            Image image(size, size, 0.0f);
            for (int64_t r = 0; r < size; ++r) {
                for (int64_t c = 0; c < size; ++c) {
                    const int64_t label = mask(r, c);
                    if (label == LabelSchema::kBackground) continue;
                    double noise = 0.0;
                    for (int k = 0; k < 3; ++k) {
                        noise += std::sin(fx[k] * static_cast<double>(c) + fy[k] * static_cast<double>(r) + phase[k]);
                    }
                    noise *= kNoiseAmplitude / 3.0;
                    image(r, c) = static_cast<float>(std::clamp(band_center(label) + noise, 0.0, 1.0));
                }
            }

            SliceRecord rec;
            rec.image = std::move(image);
            rec.mask = std::move(mask);
            rec.subject_id = id;
            rec.slice_index = slice;
            rec.split = split;
            records.push_back(std::move(rec));
        }
    }
    return records;
}

}  // namespace semdiff
