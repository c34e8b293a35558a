#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>
#include <string>

#include "strokesight/eeg_io.hpp"
#include "strokesight/montage.hpp"

namespace strokesight::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("strokesight_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// 32-channel recording whose samples come from f(channel, t_seconds).
inline Recording make_recording(double fs, double seconds, const std::function<double(std::size_t, double)>& f,
                                LabelSet labels = {})
{
    Recording rec;
    rec.patient_id = "P1";
    rec.recording_id = "P1_R1";
    rec.sample_rate_hz = fs;
    rec.channel_names = montage::canonical_names();
    rec.n_samples = static_cast<std::size_t>(std::llround(fs * seconds));
    rec.labels = labels;
    rec.samples.resize(rec.channel_names.size() * rec.n_samples);
    for (std::size_t c = 0; c < rec.channel_names.size(); ++c)
        for (std::size_t t = 0; t < rec.n_samples; ++t)
            rec.samples[c * rec.n_samples + t] = static_cast<float>(f(c, static_cast<double>(t) / fs));
    return rec;
}

inline Recording noise_recording(double fs, double seconds, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 10.0);
    return make_recording(fs, seconds, [&](std::size_t, double) { return n(rng); });
}

inline LabelSet stroke_label(StrokeType t, Lateralization l, Severity s)
{
    LabelSet out;
    out.stroke_type = t;
    out.lateralization = l;
    out.severity = s;
    return out;
}

} // namespace strokesight::testing
