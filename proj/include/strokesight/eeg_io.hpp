#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "strokesight/error.hpp"
#include "strokesight/fft.hpp"
#include "strokesight/montage.hpp"

namespace strokesight {

// ---------------------------------------------------------------------------
// Labels

enum class StrokeType { Healthy = 0, Ischemic = 1, Hemorrhagic = 2 };
enum class Lateralization { Left = 0, Right = 1 };
enum class Severity { Small = 0, Large = 1 };

inline constexpr int kStrokeTypeCount = 3;

inline const char* to_string(StrokeType t)
{
    switch (t) {
    case StrokeType::Healthy: return "healthy";
    case StrokeType::Ischemic: return "ischemic";
    case StrokeType::Hemorrhagic: return "hemorrhagic";
    }
    return "?";
}
inline const char* to_string(Lateralization l) { return l == Lateralization::Left ? "left" : "right"; }
inline const char* to_string(Severity s) { return s == Severity::Large ? "large" : "small"; }

inline StrokeType parse_stroke_type(const std::string& s)
{
    if (s == "healthy") return StrokeType::Healthy;
    if (s == "ischemic") return StrokeType::Ischemic;
    if (s == "hemorrhagic") return StrokeType::Hemorrhagic;
    fail(ErrorKind::MalformedInput, "unknown stroke_type '" + s + "'");
}
inline Lateralization parse_lateralization(const std::string& s)
{
    if (s == "left") return Lateralization::Left;
    if (s == "right") return Lateralization::Right;
    fail(ErrorKind::MalformedInput, "unknown lateralization '" + s + "'");
}
inline Severity parse_severity(const std::string& s)
{
    if (s == "large") return Severity::Large;
    if (s == "small") return Severity::Small;
    fail(ErrorKind::MalformedInput, "unknown severity '" + s + "'");
}

struct LabelSet {
    StrokeType stroke_type = StrokeType::Healthy;
    std::optional<Lateralization> lateralization;
    std::optional<Severity> severity;

    bool is_stroke() const { return stroke_type != StrokeType::Healthy; }

    /// Lateralization and severity are present iff the patient had a stroke.
    void validate() const
    {
        const bool has_extra = lateralization.has_value() && severity.has_value();
        const bool has_none = !lateralization.has_value() && !severity.has_value();
        if (is_stroke() && !has_extra)
            fail(ErrorKind::MalformedInput, "stroke label requires lateralization and severity");
        if (!is_stroke() && !has_none)
            fail(ErrorKind::MalformedInput, "healthy label must not carry lateralization/severity");
    }

    bool operator==(const LabelSet&) const = default;
};

inline nlohmann::json to_json(const LabelSet& l)
{
    nlohmann::json j;
    j["stroke_type"] = to_string(l.stroke_type);
    j["lateralization"] = l.lateralization ? nlohmann::json(to_string(*l.lateralization)) : nlohmann::json(nullptr);
    j["severity"] = l.severity ? nlohmann::json(to_string(*l.severity)) : nlohmann::json(nullptr);
    return j;
}

inline LabelSet label_set_from_json(const nlohmann::json& j)
{
    LabelSet l;
    l.stroke_type = parse_stroke_type(j.at("stroke_type").get<std::string>());
    if (j.contains("lateralization") && !j["lateralization"].is_null())
        l.lateralization = parse_lateralization(j["lateralization"].get<std::string>());
    if (j.contains("severity") && !j["severity"].is_null())
        l.severity = parse_severity(j["severity"].get<std::string>());
    l.validate();
    return l;
}

// ---------------------------------------------------------------------------
// Recording

struct Recording {
    std::string patient_id;
    std::string recording_id;
    double sample_rate_hz = 256.0;
    std::vector<std::string> channel_names;
    std::size_t n_samples = 0;
    /// Channel-major microvolts: samples[c * n_samples + t].
    std::vector<float> samples;
    LabelSet labels;
    /// Set only by subset_channels.
    bool is_subset = false;
    /// Samples at each edge invalidated by filtering transients.
    std::size_t edge_samples = 0;

    std::size_t n_channels() const { return channel_names.size(); }
    double duration_s() const { return static_cast<double>(n_samples) / sample_rate_hz; }

    std::span<const float> channel(std::size_t c) const
    {
        return {samples.data() + c * n_samples, n_samples};
    }
    std::span<float> channel(std::size_t c) { return {samples.data() + c * n_samples, n_samples}; }
};

inline constexpr double kMinDurationS = 60.0;

inline void validate_recording(const Recording& rec, bool allow_subset = false)
{
    if (!(rec.sample_rate_hz > 0.0) || !std::isfinite(rec.sample_rate_hz))
        fail(ErrorKind::MalformedInput, "sample_rate_hz must be positive");
    if (!allow_subset && rec.n_channels() != montage::kChannelCount)
        fail(ErrorKind::ChannelCount, "expected " + std::to_string(montage::kChannelCount) +
                                          " channels, got " + std::to_string(rec.n_channels()));
    if (rec.n_channels() == 0) fail(ErrorKind::ChannelCount, "recording has no channels");
    if (rec.samples.size() != rec.n_channels() * rec.n_samples)
        fail(ErrorKind::MalformedInput, "sample buffer size does not match channels x n_samples");
    for (std::size_t i = 0; i < rec.samples.size(); ++i) {
        if (!std::isfinite(rec.samples[i])) {
            fail(ErrorKind::NonFinite, "non-finite sample at channel " +
                                           std::to_string(i / std::max<std::size_t>(rec.n_samples, 1)) +
                                           ", index " + std::to_string(i % std::max<std::size_t>(rec.n_samples, 1)));
        }
    }
    if (rec.duration_s() < kMinDurationS)
        fail(ErrorKind::TooShort, "recording shorter than 60 s");
    rec.labels.validate();
}

/// Reorders channels into the canonical montage order. Every canonical
/// channel must be present exactly once.
inline void normalize_channel_order(Recording& rec)
{
    std::vector<std::size_t> source(montage::kChannelCount, SIZE_MAX);
    for (std::size_t c = 0; c < rec.channel_names.size(); ++c) {
        const auto idx = montage::canonical_index(rec.channel_names[c]);
        if (!idx) fail(ErrorKind::UnknownChannel, "unknown channel '" + rec.channel_names[c] + "'");
        if (source[*idx] != SIZE_MAX)
            fail(ErrorKind::MalformedInput, "duplicate channel '" + rec.channel_names[c] + "'");
        source[*idx] = c;
    }
    bool identity = true;
    for (std::size_t i = 0; i < source.size(); ++i) identity = identity && source[i] == i;
    if (identity) return;
    std::vector<float> reordered(rec.samples.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
        std::copy_n(rec.samples.begin() + static_cast<std::ptrdiff_t>(source[i] * rec.n_samples), rec.n_samples,
                    reordered.begin() + static_cast<std::ptrdiff_t>(i * rec.n_samples));
    }
    rec.samples = std::move(reordered);
    rec.channel_names = montage::canonical_names();
}

inline nlohmann::json manifest_json(const Recording& rec)
{
    nlohmann::json j;
    j["patient_id"] = rec.patient_id;
    j["recording_id"] = rec.recording_id;
    j["sample_rate_hz"] = rec.sample_rate_hz;
    j["channel_names"] = rec.channel_names;
    j["n_samples"] = rec.n_samples;
    j["labels"] = to_json(rec.labels);
    return j;
}

namespace detail {

inline std::uint32_t to_le(std::uint32_t v)
{
    if constexpr (std::endian::native == std::endian::big)
        return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
    return v;
}

} // namespace detail

/// Little-endian float32, channel-major.
inline std::string encode_samples(std::span<const float> samples)
{
    std::string out(samples.size() * 4, '\0');
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::uint32_t v = detail::to_le(std::bit_cast<std::uint32_t>(samples[i]));
        std::memcpy(out.data() + 4 * i, &v, 4);
    }
    return out;
}

inline std::vector<float> decode_samples(std::string_view bytes)
{
    if (bytes.size() % 4 != 0) fail(ErrorKind::MalformedInput, "sample payload is not a multiple of 4 bytes");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + 4 * i, 4);
        out[i] = std::bit_cast<float>(detail::to_le(v));
    }
    return out;
}

/// Builds and validates a Recording from a manifest plus raw payload, the
/// in-memory form of the on-disk container.
inline Recording recording_from_container(const nlohmann::json& manifest, std::string_view payload)
{
    Recording rec;
    try {
        rec.patient_id = manifest.at("patient_id").get<std::string>();
        rec.recording_id = manifest.at("recording_id").get<std::string>();
        rec.sample_rate_hz = manifest.at("sample_rate_hz").get<double>();
        rec.channel_names = manifest.at("channel_names").get<std::vector<std::string>>();
        rec.n_samples = manifest.at("n_samples").get<std::size_t>();
        rec.labels = label_set_from_json(manifest.at("labels"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedInput, std::string("malformed manifest: ") + e.what());
    }
    if (rec.channel_names.size() != montage::kChannelCount)
        fail(ErrorKind::ChannelCount, "expected " + std::to_string(montage::kChannelCount) + " channels, got " +
                                          std::to_string(rec.channel_names.size()));
    rec.samples = decode_samples(payload);
    if (rec.samples.size() != rec.channel_names.size() * rec.n_samples)
        fail(ErrorKind::MalformedInput, "payload holds " + std::to_string(rec.samples.size()) +
                                            " samples, manifest declares " +
                                            std::to_string(rec.channel_names.size() * rec.n_samples));
    validate_recording(rec);
    normalize_channel_order(rec);
    return rec;
}

inline std::string read_file(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, std::string_view data)
{
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + p.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

/// Writes `<dir>/<recording_id>.json` and `<dir>/<recording_id>.f32`.
inline std::filesystem::path write_recording(const Recording& rec, const std::filesystem::path& dir)
{
    const auto base = dir / rec.recording_id;
    write_file(base.string() + ".f32", encode_samples(rec.samples));
    write_file(base.string() + ".json", manifest_json(rec).dump(2));
    return base.string() + ".json";
}

/// Accepts either the `.json` manifest path or the extension-less stem.
inline Recording load_recording(const std::filesystem::path& path)
{
    std::filesystem::path manifest_path = path;
    if (manifest_path.extension() != ".json") manifest_path += ".json";
    auto payload_path = manifest_path;
    payload_path.replace_extension(".f32");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::MalformedInput, "malformed header " + manifest_path.string() + ": " + e.what());
    }
    return recording_from_container(manifest, read_file(payload_path));
}

/// Keeps only `keep` (in the given order) and flags the result as a subset.
inline Recording subset_channels(const Recording& rec, const std::vector<std::string>& keep)
{
    if (keep.empty()) fail(ErrorKind::InvalidArgument, "channel subset must be non-empty");
    Recording out;
    out.patient_id = rec.patient_id;
    out.recording_id = rec.recording_id;
    out.sample_rate_hz = rec.sample_rate_hz;
    out.n_samples = rec.n_samples;
    out.labels = rec.labels;
    out.edge_samples = rec.edge_samples;
    out.is_subset = true;
    out.samples.reserve(keep.size() * rec.n_samples);
    for (const auto& name : keep) {
        const auto it = std::find(rec.channel_names.begin(), rec.channel_names.end(), name);
        if (it == rec.channel_names.end()) fail(ErrorKind::UnknownChannel, "unknown channel '" + name + "'");
        const auto src = rec.channel(static_cast<std::size_t>(it - rec.channel_names.begin()));
        out.samples.insert(out.samples.end(), src.begin(), src.end());
        out.channel_names.push_back(name);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cohort manifests and patient-wise splits

enum class Split { Train = 0, Validation = 1, Test = 2 };

inline const char* to_string(Split s)
{
    switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s)
{
    if (s == "train") return Split::Train;
    if (s == "validation" || s == "val") return Split::Validation;
    if (s == "test") return Split::Test;
    fail(ErrorKind::InvalidArgument, "unknown split '" + s + "'");
}

struct CohortEntry {
    std::string patient_id;
    std::vector<std::string> recording_ids;
    StrokeType stroke_type = StrokeType::Healthy;
    Split split = Split::Train;
};

struct CohortManifest {
    std::vector<CohortEntry> entries;
    std::uint64_t seed = 0;

    std::optional<Split> split_of(const std::string& patient_id) const
    {
        for (const auto& e : entries)
            if (e.patient_id == patient_id) return e.split;
        return std::nullopt;
    }

    std::size_t count(Split s) const
    {
        return static_cast<std::size_t>(
            std::count_if(entries.begin(), entries.end(), [&](const CohortEntry& e) { return e.split == s; }));
    }

    /// No patient in two splits; no recording owned by two patients.
    void validate() const
    {
        std::map<std::string, Split> patient_split;
        std::map<std::string, std::string> recording_owner;
        for (const auto& e : entries) {
            auto [it, inserted] = patient_split.emplace(e.patient_id, e.split);
            if (!inserted && it->second != e.split)
                fail(ErrorKind::MalformedInput, "patient " + e.patient_id + " appears in more than one split");
            for (const auto& r : e.recording_ids) {
                auto [rit, rins] = recording_owner.emplace(r, e.patient_id);
                if (!rins && rit->second != e.patient_id)
                    fail(ErrorKind::MalformedInput, "recording " + r + " belongs to more than one patient");
            }
        }
    }
};

inline nlohmann::json to_json(const CohortManifest& m)
{
    nlohmann::json j;
    j["seed"] = m.seed;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : m.entries) {
        j["entries"].push_back({{"patient_id", e.patient_id},
                                {"recording_ids", e.recording_ids},
                                {"stroke_type", to_string(e.stroke_type)},
                                {"split", to_string(e.split)}});
    }
    return j;
}

inline CohortManifest cohort_from_json(const nlohmann::json& j)
{
    CohortManifest m;
    try {
        m.seed = j.value("seed", std::uint64_t{0});
        for (const auto& e : j.at("entries")) {
            CohortEntry entry;
            entry.patient_id = e.at("patient_id").get<std::string>();
            entry.recording_ids = e.at("recording_ids").get<std::vector<std::string>>();
            entry.stroke_type = parse_stroke_type(e.at("stroke_type").get<std::string>());
            entry.split = parse_split(e.value("split", std::string("train")));
            m.entries.push_back(std::move(entry));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedInput, std::string("malformed cohort manifest: ") + e.what());
    }
    m.validate();
    return m;
}

struct SplitRatios {
    double train = 24.0 / 36.0;
    double validation = 6.0 / 36.0;
    double test = 6.0 / 36.0;
};

/// Stratified patient-wise split. Split totals are floor(N * ratio) for
/// validation/test with the remainder going to train; per-class counts are
/// the floors of n_c * ratio topped up by largest fractional remainder, with
/// at least one patient of every class in every split.
inline CohortManifest make_splits(const CohortManifest& draft, SplitRatios ratios, std::uint64_t seed)
{
    const double sum = ratios.train + ratios.validation + ratios.test;
    if (std::abs(sum - 1.0) > 1e-9 || ratios.train < 0 || ratios.validation < 0 || ratios.test < 0)
        fail(ErrorKind::InvalidArgument, "split ratios must be non-negative and sum to 1");
    draft.validate();

    std::map<StrokeType, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < draft.entries.size(); ++i) by_class[draft.entries[i].stroke_type].push_back(i);
    for (auto& [cls, idx] : by_class) {
        if (idx.size() < 3)
            fail(ErrorKind::Infeasible, std::string("class ") + to_string(cls) + " has " +
                                            std::to_string(idx.size()) + " patients; need one per split");
        std::sort(idx.begin(), idx.end(),
                  [&](std::size_t a, std::size_t b) { return draft.entries[a].patient_id < draft.entries[b].patient_id; });
    }

    const std::size_t total = draft.entries.size();
    const std::array<double, 2> held_ratio = {ratios.validation, ratios.test};
    std::map<StrokeType, std::array<std::size_t, 2>> held;  // [validation, test]
    for (std::size_t s = 0; s < 2; ++s) {
        const auto target = static_cast<std::size_t>(std::floor(static_cast<double>(total) * held_ratio[s] + 1e-9));
        std::vector<std::pair<double, StrokeType>> fractions;
        std::size_t assigned = 0;
        for (auto& [cls, idx] : by_class) {
            const double ideal = static_cast<double>(idx.size()) * held_ratio[s];
            auto base = static_cast<std::size_t>(std::floor(ideal + 1e-9));
            base = std::max<std::size_t>(base, 1);
            held[cls][s] = base;
            assigned += base;
            fractions.emplace_back(ideal - std::floor(ideal + 1e-9), cls);
        }
        // Largest remainder first; stable on class order for ties.
        std::stable_sort(fractions.begin(), fractions.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (std::size_t k = 0; assigned < target && k < fractions.size(); ++k) {
            const auto cls = fractions[k].second;
            const std::size_t cap = by_class[cls].size() - 1 - held[cls][1 - s];
            const double ideal = static_cast<double>(by_class[cls].size()) * held_ratio[s];
            if (held[cls][s] + 1 <= cap && static_cast<double>(held[cls][s]) <= ideal + 1e-9) {
                ++held[cls][s];
                ++assigned;
            }
        }
        // Per-class minimums can overshoot the total; trim only where the class
        // stays within one patient of its ideal share.
        for (auto k = fractions.size(); assigned > target && k-- > 0;) {
            const auto cls = fractions[k].second;
            const double ideal = static_cast<double>(by_class[cls].size()) * held_ratio[s];
            if (held[cls][s] > 1 && static_cast<double>(held[cls][s]) - 1.0 >= ideal - 1.0 + 1e-9) {
                --held[cls][s];
                --assigned;
            }
        }
    }

    CohortManifest out;
    out.seed = seed;
    std::mt19937_64 rng(seed);
    for (auto& [cls, idx] : by_class) {
        auto order = idx;
        std::shuffle(order.begin(), order.end(), rng);
        const auto [n_val, n_test] = held[cls];
        if (n_val + n_test >= order.size())
            fail(ErrorKind::Infeasible, std::string("class ") + to_string(cls) + " cannot fill all splits");
        for (std::size_t k = 0; k < order.size(); ++k) {
            CohortEntry e = draft.entries[order[k]];
            e.split = k < n_val ? Split::Validation : (k < n_val + n_test ? Split::Test : Split::Train);
            out.entries.push_back(std::move(e));
        }
    }
    std::sort(out.entries.begin(), out.entries.end(),
              [](const CohortEntry& a, const CohortEntry& b) { return a.patient_id < b.patient_id; });
    out.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic cohorts

/// Power multiplier applied over [low_hz, high_hz) on the lesioned
/// hemisphere's channels.
struct BandEffect {
    double low_hz;
    double high_hz;
    double multiplier;
};

struct EffectRecipe {
    std::vector<BandEffect> bands;
    /// Effective multiplier is 1 + (m - 1) * scale for the patient's severity.
    double large_scale = 1.0;
    double small_scale = 0.4;
};

struct SyntheticCohortSpec {
    std::map<StrokeType, std::size_t> n_patients_per_class;
    std::size_t recordings_per_patient = 1;
    double sample_rate_hz = 256.0;
    double duration_s = 180.0;
    std::map<StrokeType, EffectRecipe> effect_recipes;
    /// White-noise floor added to the 1/f background, in uV^2/Hz.
    double noise_floor = 0.05;
    /// Background level A in S(f) = A / (f + 1).
    double background_level = 20.0;
    /// Log-normal sigma of the per-patient overall gain.
    double patient_gain_sigma = 0.15;
    /// Log-normal sigma of the per-channel gain.
    double channel_gain_sigma = 0.05;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (duration_s < 180.0) fail(ErrorKind::InvalidArgument, "synthetic duration must be >= 180 s");
        if (!(sample_rate_hz > 0.0)) fail(ErrorKind::InvalidArgument, "sample rate must be positive");
        if (recordings_per_patient == 0) fail(ErrorKind::InvalidArgument, "recordings_per_patient must be >= 1");
        if (noise_floor < 0 || background_level <= 0) fail(ErrorKind::InvalidArgument, "invalid noise levels");
        for (const auto& [cls, recipe] : effect_recipes) {
            for (const auto& b : recipe.bands) {
                if (!(b.multiplier > 0.0)) fail(ErrorKind::InvalidArgument, "effect multipliers must be > 0");
                if (!(b.high_hz > b.low_hz)) fail(ErrorKind::InvalidArgument, "effect band must have high > low");
            }
            if (recipe.large_scale < 0 || recipe.small_scale < 0)
                fail(ErrorKind::InvalidArgument, "severity scales must be >= 0");
        }
    }
};

/// Mild signatures: hemorrhagic raises delta on the lesioned side, ischemic
/// raises theta with a smaller delta component.
inline std::map<StrokeType, EffectRecipe> default_recipes()
{
    return {
        {StrokeType::Hemorrhagic, {{{0.5, 4.0, 3.0}}, 1.0, 0.4}},
        {StrokeType::Ischemic, {{{0.5, 4.0, 1.5}, {4.0, 8.0, 2.0}}, 1.0, 0.4}},
    };
}

/// Well-separated signatures used for end-to-end verification.
inline std::map<StrokeType, EffectRecipe> strong_recipes()
{
    return {
        {StrokeType::Hemorrhagic, {{{0.5, 4.0, 16.0}}, 1.0, 0.3}},
        {StrokeType::Ischemic, {{{0.5, 4.0, 2.0}, {4.0, 8.0, 16.0}}, 1.0, 0.3}},
    };
}

inline double effective_multiplier(const EffectRecipe& recipe, const BandEffect& band, Severity severity)
{
    const double scale = severity == Severity::Large ? recipe.large_scale : recipe.small_scale;
    return std::max(1e-6, 1.0 + (band.multiplier - 1.0) * scale);
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace detail

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0)
{
    return detail::splitmix64(detail::splitmix64(seed ^ detail::splitmix64(a)) + b);
}

inline std::string patient_name(std::size_t index)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "P%03zu", index + 1);
    return buf;
}

/// One-sided target PSD for a channel: 1/f background, noise floor, and the
/// class signature when the channel lies on the lesioned hemisphere.
inline double synthetic_psd(double f, const SyntheticCohortSpec& spec, const LabelSet& labels,
                            montage::Hemisphere hemi)
{
    double s = spec.background_level / (f + 1.0);
    if (labels.is_stroke()) {
        const auto lesion = *labels.lateralization == Lateralization::Left ? montage::Hemisphere::Left
                                                                          : montage::Hemisphere::Right;
        if (hemi == lesion) {
            if (auto it = spec.effect_recipes.find(labels.stroke_type); it != spec.effect_recipes.end()) {
                for (const auto& band : it->second.bands) {
                    if (f >= band.low_hz && f < band.high_hz)
                        s *= effective_multiplier(it->second, band, *labels.severity);
                }
            }
        }
    }
    return s + spec.noise_floor;
}

/// Per class, patients alternate lateralization and severity so small
/// cohorts stay balanced. Deterministic in spec.seed.
inline std::vector<Recording> generate_synthetic_cohort(const SyntheticCohortSpec& spec)
{
    spec.validate();
    const auto n = static_cast<std::size_t>(std::llround(spec.duration_s * spec.sample_rate_hz));
    const auto names = montage::canonical_names();
    std::vector<Recording> out;
    std::size_t patient_index = 0;
    for (const auto& [cls, count] : spec.n_patients_per_class) {
        for (std::size_t k = 0; k < count; ++k, ++patient_index) {
            LabelSet labels;
            labels.stroke_type = cls;
            if (cls != StrokeType::Healthy) {
                labels.lateralization = (k % 2 == 0) ? Lateralization::Left : Lateralization::Right;
                labels.severity = ((k / 2) % 2 == 0) ? Severity::Large : Severity::Small;
            }
            std::mt19937_64 patient_rng(derive_seed(spec.seed, patient_index));
            std::normal_distribution<double> normal(0.0, 1.0);
            const double patient_gain = std::exp(spec.patient_gain_sigma * normal(patient_rng));

            for (std::size_t r = 0; r < spec.recordings_per_patient; ++r) {
                Recording rec;
                rec.patient_id = patient_name(patient_index);
                rec.recording_id = rec.patient_id + "_R" + std::to_string(r + 1);
                rec.sample_rate_hz = spec.sample_rate_hz;
                rec.channel_names = names;
                rec.n_samples = n;
                rec.labels = labels;
                rec.samples.resize(names.size() * n);
                std::mt19937_64 rng(derive_seed(spec.seed, patient_index, r + 1));
                std::vector<std::complex<double>> spectrum(n / 2 + 1);
                const double df = spec.sample_rate_hz / static_cast<double>(n);
                for (std::size_t c = 0; c < names.size(); ++c) {
                    const double gain = patient_gain * std::exp(spec.channel_gain_sigma * normal(rng));
                    const auto hemi = montage::hemisphere_of(names[c]);
                    for (std::size_t b = 0; b < spectrum.size(); ++b) {
                        const double g1 = normal(rng);
                        const double g2 = normal(rng);
                        if (b == 0 || (n % 2 == 0 && b == n / 2)) {
                            spectrum[b] = {};
                            continue;
                        }
                        const double s = gain * synthetic_psd(static_cast<double>(b) * df, spec, labels, hemi);
                        // E[2|X|^2 / (fs N)] = S for the one-sided density.
                        const double sigma = std::sqrt(s * spec.sample_rate_hz * static_cast<double>(n) / 4.0);
                        spectrum[b] = {sigma * g1, sigma * g2};
                    }
                    const auto x = fft::irfft(spectrum, n);
                    auto dst = rec.channel(c);
                    for (std::size_t t = 0; t < n; ++t) dst[t] = static_cast<float>(x[t]);
                }
                out.push_back(std::move(rec));
            }
        }
    }
    return out;
}

/// Draft manifest (all train) listing every patient of a generated cohort.
inline CohortManifest draft_manifest(const std::vector<Recording>& recordings)
{
    CohortManifest m;
    std::map<std::string, std::size_t> index;
    for (const auto& r : recordings) {
        auto [it, inserted] = index.emplace(r.patient_id, m.entries.size());
        if (inserted) m.entries.push_back({r.patient_id, {}, r.labels.stroke_type, Split::Train});
        m.entries[it->second].recording_ids.push_back(r.recording_id);
    }
    return m;
}

} // namespace strokesight
