#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "strokesight/eeg_io.hpp"
#include "strokesight/error.hpp"
#include "strokesight/fft.hpp"

namespace strokesight::dsp {

// ---------------------------------------------------------------------------
// FIR band-pass design

struct FirSpec {
    double low_cut_hz = 0.5;
    double high_cut_hz = 60.0;
    /// Upper bound on each edge's transition band.
    double transition_width_hz = 2.0;
    double max_passband_ripple = 0.01;
    /// Stop-band magnitude bound used when verifying a design.
    double max_stopband_gain = 0.01;
};

/// Transition bands are centred on the cut-offs. The low edge cannot reach
/// below 0 Hz, so its width is capped at low_cut (stop band [0, low_cut/2]).
struct FirEdges {
    double low_stop, low_pass, high_pass, high_stop;
};

inline FirEdges fir_edges(const FirSpec& spec)
{
    const double tw_low = std::min(spec.transition_width_hz, spec.low_cut_hz);
    const double tw_high = spec.transition_width_hz;
    return {spec.low_cut_hz - tw_low / 2, spec.low_cut_hz + tw_low / 2, spec.high_cut_hz - tw_high / 2,
            spec.high_cut_hz + tw_high / 2};
}

/// Zero-phase amplitude response of a symmetric odd-length FIR at `f_hz`.
inline double fir_amplitude(std::span<const double> h, double f_hz, double sample_rate_hz)
{
    const std::size_t mid = h.size() / 2;
    const double w = 2.0 * std::numbers::pi * f_hz / sample_rate_hz;
    double a = h[mid];
    for (std::size_t k = 1; k <= mid; ++k) a += 2.0 * h[mid + k] * std::cos(w * static_cast<double>(k));
    return a;
}

inline std::vector<double> hamming(std::size_t n)
{
    std::vector<double> w(n, 1.0);
    if (n == 1) return w;
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
    return w;
}

namespace detail {

inline std::vector<double> windowed_lowpass(std::size_t n, double cutoff_hz, double fs, std::span<const double> window)
{
    std::vector<double> h(n);
    const double mid = static_cast<double>(n - 1) / 2.0;
    const double fc = cutoff_hz / fs;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) - mid;
        const double sinc = t == 0.0 ? 2.0 * fc : std::sin(2.0 * std::numbers::pi * fc * t) / (std::numbers::pi * t);
        h[i] = sinc * window[i];
        sum += h[i];
    }
    for (auto& v : h) v /= sum;  // unit DC gain
    return h;
}

inline bool meets_spec(std::span<const double> h, const FirSpec& spec, const FirEdges& e, double fs)
{
    const double nyq = fs / 2.0;
    const double df = std::min(0.05, (e.low_pass - e.low_stop) / 8.0);
    for (double f = 0.0; f <= e.low_stop; f += df)
        if (std::abs(fir_amplitude(h, f, fs)) >= spec.max_stopband_gain) return false;
    for (double f = e.low_pass; f <= e.high_pass; f += df)
        if (std::abs(fir_amplitude(h, f, fs) - 1.0) >= spec.max_passband_ripple) return false;
    for (double f = e.high_stop; f <= nyq; f += df)
        if (std::abs(fir_amplitude(h, f, fs)) >= spec.max_stopband_gain) return false;
    return true;
}

} // namespace detail

/// Hamming-windowed linear-phase (type I) band-pass, built as the difference
/// of two unit-DC-gain low-pass prototypes so the DC gain is exactly zero.
/// The length starts at the Hamming rule N = 3.3 fs / transition and grows
/// in steps of two until a dense response check passes.
inline std::vector<double> design_fir(const FirSpec& spec, double sample_rate_hz)
{
    const double nyq = sample_rate_hz / 2.0;
    if (!(spec.low_cut_hz > 0.0) || !(spec.low_cut_hz < spec.high_cut_hz) || !(spec.high_cut_hz < nyq))
        fail(ErrorKind::Infeasible, "band-pass requires 0 < low_cut < high_cut < Nyquist (" + std::to_string(nyq) + " Hz)");
    if (!(spec.transition_width_hz > 0.0)) fail(ErrorKind::Infeasible, "transition width must be positive");
    const FirEdges edges = fir_edges(spec);
    if (edges.high_stop > nyq)
        fail(ErrorKind::Infeasible, "high cut-off transition band extends past Nyquist");

    const double narrowest = std::min(edges.low_pass - edges.low_stop, edges.high_stop - edges.high_pass);
    auto n = static_cast<std::size_t>(std::ceil(3.3 * sample_rate_hz / narrowest));
    if (n % 2 == 0) ++n;
    for (int attempt = 0; attempt < 200; ++attempt, n += 2) {
        const auto w = hamming(n);
        const auto hi = detail::windowed_lowpass(n, spec.high_cut_hz, sample_rate_hz, w);
        const auto lo = detail::windowed_lowpass(n, spec.low_cut_hz, sample_rate_hz, w);
        std::vector<double> h(n);
        for (std::size_t i = 0; i < n; ++i) h[i] = hi[i] - lo[i];
        // Exact symmetry regardless of rounding in the sinc evaluation.
        for (std::size_t i = 0; i < n / 2; ++i) {
            const double avg = 0.5 * (h[i] + h[n - 1 - i]);
            h[i] = h[n - 1 - i] = avg;
        }
        if (detail::meets_spec(h, spec, edges, sample_rate_hz)) return h;
    }
    fail(ErrorKind::Infeasible, "no FIR length meets the requested ripple/transition at this sample rate");
}

/// design_fir memoized on (spec, rate); designs are pure so sharing is safe.
inline const std::vector<double>& cached_fir(const FirSpec& spec, double sample_rate_hz)
{
    using Key = std::array<double, 6>;
    static std::mutex mutex;
    static std::map<Key, std::vector<double>> cache;
    const Key key = {spec.low_cut_hz, spec.high_cut_hz, spec.transition_width_hz, spec.max_passband_ripple,
                     spec.max_stopband_gain, sample_rate_hz};
    std::lock_guard lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
    return cache.emplace(key, design_fir(spec, sample_rate_hz)).first->second;
}

/// Convolves every channel with `coeffs` and removes the (N-1)/2 group delay
/// so the output is aligned with the input. Output length equals input
/// length; the first and last (N-1)/2 samples are flagged via edge_samples.
inline Recording filter_signal(const Recording& rec, std::span<const double> coeffs)
{
    if (coeffs.empty() || coeffs.size() % 2 == 0) fail(ErrorKind::InvalidArgument, "FIR length must be odd");
    if (coeffs.size() >= rec.n_samples) fail(ErrorKind::TooShort, "signal shorter than filter");
    Recording out = rec;
    const std::size_t delay = (coeffs.size() - 1) / 2;
    std::vector<double> x(rec.n_samples);
    for (std::size_t c = 0; c < rec.n_channels(); ++c) {
        const auto src = rec.channel(c);
        std::copy(src.begin(), src.end(), x.begin());
        const auto y = fft::convolve(x, coeffs);
        auto dst = out.channel(c);
        for (std::size_t t = 0; t < rec.n_samples; ++t) dst[t] = static_cast<float>(y[t + delay]);
    }
    out.edge_samples = std::max(rec.edge_samples, delay);
    return out;
}

/// Second-order IIR notch (Q = 30 by default) applied forward and backward.
struct NotchSpec {
    double freq_hz = 50.0;
    double quality = 30.0;
};

inline Recording notch_filter(const Recording& rec, NotchSpec spec = {})
{
    const double nyq = rec.sample_rate_hz / 2.0;
    if (!(spec.freq_hz > 0.0 && spec.freq_hz < nyq)) fail(ErrorKind::Infeasible, "notch frequency must be below Nyquist");
    const double w0 = spec.freq_hz / nyq;
    const double bw = w0 / spec.quality;
    const double beta = std::tan(bw * std::numbers::pi / 2.0);
    const double gain = 1.0 / (1.0 + beta);
    const double c = std::cos(w0 * std::numbers::pi);
    const std::array<double, 3> b = {gain, -2.0 * gain * c, gain};
    const std::array<double, 3> a = {1.0, -2.0 * gain * c, 2.0 * gain - 1.0};
    auto run = [&](std::vector<double>& x) {
        double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
        for (auto& v : x) {
            const double y = b[0] * v + b[1] * x1 + b[2] * x2 - a[1] * y1 - a[2] * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            v = y;
        }
    };
    Recording out = rec;
    std::vector<double> x(rec.n_samples);
    for (std::size_t ch = 0; ch < rec.n_channels(); ++ch) {
        const auto src = rec.channel(ch);
        std::copy(src.begin(), src.end(), x.begin());
        run(x);
        std::reverse(x.begin(), x.end());
        run(x);
        std::reverse(x.begin(), x.end());
        auto dst = out.channel(ch);
        for (std::size_t t = 0; t < x.size(); ++t) dst[t] = static_cast<float>(x[t]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Segmentation

inline constexpr double kAnalysisDurationS = 180.0;
inline constexpr double kSegmentDurationS = 60.0;
inline constexpr std::size_t kSegmentsPerRecording = 3;

struct Segment {
    std::size_t index = 0;
    std::size_t n_channels = 0;
    std::size_t n_samples = 0;
    /// Channel-major.
    std::vector<double> data;
    /// Sample index where zero padding begins; nullopt when fully real data.
    std::optional<std::size_t> padded_from;

    std::span<const double> channel(std::size_t c) const { return {data.data() + c * n_samples, n_samples}; }
};

/// Truncates (or zero-pads) to 180 s and cuts three contiguous 60 s segments.
inline std::vector<Segment> segment_recording(const Recording& rec)
{
    if (rec.duration_s() < kSegmentDurationS) fail(ErrorKind::TooShort, "recording shorter than 60 s");
    const auto seg_len = static_cast<std::size_t>(std::llround(kSegmentDurationS * rec.sample_rate_hz));
    const std::size_t available = rec.n_samples;
    std::vector<Segment> out;
    for (std::size_t s = 0; s < kSegmentsPerRecording; ++s) {
        Segment seg;
        seg.index = s;
        seg.n_channels = rec.n_channels();
        seg.n_samples = seg_len;
        seg.data.assign(seg.n_channels * seg_len, 0.0);
        const std::size_t start = s * seg_len;
        const std::size_t real = start >= available ? 0 : std::min(seg_len, available - start);
        if (real < seg_len) seg.padded_from = real;
        for (std::size_t c = 0; c < rec.n_channels(); ++c) {
            const auto src = rec.channel(c);
            for (std::size_t t = 0; t < real; ++t) seg.data[c * seg_len + t] = src[start + t];
        }
        out.push_back(std::move(seg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Welch PSD

struct WelchConfig {
    double window_len_s = 4.0;
    double overlap_fraction = 0.5;
};

struct SpectrumEstimate {
    std::vector<double> freqs_hz;
    std::size_t n_channels = 0;
    /// Row-major [channels x freqs], one-sided density (units^2 / Hz).
    std::vector<double> psd;
    /// Number of averaged windows.
    std::size_t n_windows = 0;

    std::span<const double> channel(std::size_t c) const { return {psd.data() + c * freqs_hz.size(), freqs_hz.size()}; }
};

/// Averages K modified periodograms of Hamming-windowed frames:
///   S(f) = (1/K) sum_k |F{w x_k}(f)|^2 / U,   U = (1/L) sum w^2,
/// rescaled by 1/(fs L) and folded to one side so that sum(S) * df equals
/// the signal power.
inline SpectrumEstimate welch_psd(std::span<const double> data, std::size_t n_channels, std::size_t n_samples,
                                  const WelchConfig& cfg, double sample_rate_hz)
{
    if (!(cfg.overlap_fraction >= 0.0 && cfg.overlap_fraction < 1.0))
        fail(ErrorKind::InvalidArgument, "overlap fraction must lie in [0, 1)");
    const auto len = static_cast<std::size_t>(std::llround(cfg.window_len_s * sample_rate_hz));
    if (len < 2) fail(ErrorKind::InvalidArgument, "Welch window must span at least two samples");
    if (n_samples < len) fail(ErrorKind::TooShort, "segment shorter than the Welch window");
    if (data.size() != n_channels * n_samples) fail(ErrorKind::InvalidArgument, "segment buffer size mismatch");
    const auto overlap = static_cast<std::size_t>(std::llround(cfg.overlap_fraction * static_cast<double>(len)));
    const std::size_t hop = std::max<std::size_t>(1, len - overlap);
    const std::size_t k_windows = 1 + (n_samples - len) / hop;

    const auto w = hamming(len);
    double u = 0.0;
    for (double v : w) u += v * v;
    u /= static_cast<double>(len);
    const double scale = 1.0 / (u * static_cast<double>(len) * sample_rate_hz * static_cast<double>(k_windows));

    SpectrumEstimate est;
    const std::size_t n_freq = len / 2 + 1;
    est.freqs_hz.resize(n_freq);
    for (std::size_t k = 0; k < n_freq; ++k) est.freqs_hz[k] = static_cast<double>(k) * sample_rate_hz / static_cast<double>(len);
    est.n_channels = n_channels;
    est.n_windows = k_windows;
    est.psd.assign(n_channels * n_freq, 0.0);

    std::vector<double> frame(len);
    for (std::size_t c = 0; c < n_channels; ++c) {
        double* row = est.psd.data() + c * n_freq;
        for (std::size_t k = 0; k < k_windows; ++k) {
            const double* x = data.data() + c * n_samples + k * hop;
            for (std::size_t i = 0; i < len; ++i) frame[i] = w[i] * x[i];
            const auto spec = fft::rfft(frame);
            for (std::size_t b = 0; b < n_freq; ++b) row[b] += std::norm(spec[b]);
        }
        for (std::size_t b = 0; b < n_freq; ++b) {
            const bool folded = b != 0 && !(len % 2 == 0 && b == len / 2);
            row[b] *= scale * (folded ? 2.0 : 1.0);
        }
    }
    return est;
}

inline SpectrumEstimate welch_psd(const Segment& seg, const WelchConfig& cfg, double sample_rate_hz)
{
    return welch_psd(seg.data, seg.n_channels, seg.n_samples, cfg, sample_rate_hz);
}

// ---------------------------------------------------------------------------
// Sub-band integration

struct BandScheme {
    std::vector<double> edges_hz = {0.5, 2.0, 4.0, 6.0, 8.0, 10.0, 13.0, 20.0, 30.0, 38.0, 45.0};

    std::size_t n_bands() const { return edges_hz.size() - 1; }

    void validate() const
    {
        if (edges_hz.size() != 11) fail(ErrorKind::InvalidArgument, "band scheme needs 11 edges (10 bands)");
        if (edges_hz.front() != 0.5 || edges_hz.back() != 45.0)
            fail(ErrorKind::InvalidArgument, "band scheme must cover 0.5-45 Hz");
        for (std::size_t i = 1; i < edges_hz.size(); ++i)
            if (!(edges_hz[i] > edges_hz[i - 1])) fail(ErrorKind::InvalidArgument, "band edges must increase strictly");
    }
};

/// Canonical band -> [first, last] sub-band index (inclusive) in the default scheme.
struct CanonicalBand {
    std::string_view name;
    std::size_t first;
    std::size_t last;
};

inline constexpr std::array<CanonicalBand, 5> kCanonicalBands = {{
    {"delta", 0, 1},
    {"theta", 2, 3},
    {"alpha", 4, 5},
    {"beta", 6, 7},
    {"gamma", 8, 9},
}};

struct BandPowers {
    std::size_t n_channels = 0;
    std::size_t n_bands = 0;
    /// Row-major [channels x bands].
    std::vector<double> values;

    double at(std::size_t c, std::size_t b) const { return values[c * n_bands + b]; }
    double& at(std::size_t c, std::size_t b) { return values[c * n_bands + b]; }
};

namespace detail {

inline double interp(std::span<const double> fx, std::span<const double> fy, double f)
{
    const auto it = std::upper_bound(fx.begin(), fx.end(), f);
    if (it == fx.begin()) return fy.front();
    if (it == fx.end()) return fy.back();
    const auto i = static_cast<std::size_t>(it - fx.begin());
    const double t = (f - fx[i - 1]) / (fx[i] - fx[i - 1]);
    return fy[i - 1] + t * (fy[i] - fy[i - 1]);
}

/// Trapezoid of the piecewise-linear PSD between lo and hi.
inline double integrate(std::span<const double> fx, std::span<const double> fy, double lo, double hi)
{
    double total = 0.0;
    double prev_f = lo;
    double prev_v = interp(fx, fy, lo);
    for (std::size_t i = 0; i < fx.size(); ++i) {
        if (fx[i] <= lo) continue;
        if (fx[i] >= hi) break;
        total += 0.5 * (prev_v + fy[i]) * (fx[i] - prev_f);
        prev_f = fx[i];
        prev_v = fy[i];
    }
    const double end_v = interp(fx, fy, hi);
    total += 0.5 * (prev_v + end_v) * (hi - prev_f);
    return total;
}

} // namespace detail

inline BandPowers band_powers(const SpectrumEstimate& spec, const BandScheme& bands)
{
    if (spec.freqs_hz.empty() || bands.edges_hz.front() < spec.freqs_hz.front() ||
        bands.edges_hz.back() > spec.freqs_hz.back())
        fail(ErrorKind::InvalidArgument, "band edges fall outside the spectrum's frequency range");
    BandPowers out;
    out.n_channels = spec.n_channels;
    out.n_bands = bands.n_bands();
    out.values.resize(out.n_channels * out.n_bands);
    for (std::size_t c = 0; c < spec.n_channels; ++c) {
        const auto row = spec.channel(c);
        for (std::size_t b = 0; b < out.n_bands; ++b)
            out.at(c, b) = detail::integrate(spec.freqs_hz, row, bands.edges_hz[b], bands.edges_hz[b + 1]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Features and standardization

struct Standardizer {
    std::size_t n_channels = 0;
    std::size_t n_bands = 0;
    std::vector<double> mean;
    std::vector<double> std;
    Split fitted_on = Split::Train;
    std::string id;

    static constexpr double kStdFloor = 1e-8;

    bool fitted() const { return !mean.empty(); }
};

struct SegmentFeatures {
    std::string patient_id;
    std::string recording_id;
    std::size_t segment_index = 0;
    std::size_t n_channels = 0;
    std::size_t n_bands = 0;
    /// Row-major [channels x bands].
    std::vector<double> matrix;
    LabelSet labels;
    bool is_subset = false;
    bool padded = false;

    double at(std::size_t c, std::size_t b) const { return matrix[c * n_bands + b]; }
};

/// log10(1 + p) per cell, then (x - mean) / std when a fitted standardizer is given.
inline std::vector<double> log_powers(const BandPowers& powers)
{
    std::vector<double> out(powers.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double p = powers.values[i];
        if (p < 0.0 || std::isnan(p)) fail(ErrorKind::InvalidArgument, "band power must be non-negative");
        out[i] = std::log10(1.0 + p);
    }
    return out;
}

inline void apply_standardizer(std::vector<double>& values, const Standardizer& std_)
{
    if (values.size() != std_.mean.size()) fail(ErrorKind::InvalidArgument, "standardizer shape mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = (values[i] - std_.mean[i]) / std_.std[i];
}

inline SegmentFeatures featurize(const BandPowers& powers, const Standardizer* std_ = nullptr)
{
    SegmentFeatures f;
    f.n_channels = powers.n_channels;
    f.n_bands = powers.n_bands;
    f.matrix = log_powers(powers);
    if (std_ && std_->fitted()) apply_standardizer(f.matrix, *std_);
    return f;
}

/// Per-cell mean and population standard deviation over `split` features.
/// Fitting is only allowed on the training split.
inline Standardizer fit_standardizer(std::span<const std::vector<double>> log_features, std::size_t n_channels,
                                     std::size_t n_bands, Split split, std::string id = "train")
{
    if (split != Split::Train) fail(ErrorKind::InvalidArgument, "standardizer may only be fitted on the training split");
    if (log_features.empty()) fail(ErrorKind::InvalidArgument, "no features to fit");
    Standardizer s;
    s.n_channels = n_channels;
    s.n_bands = n_bands;
    s.fitted_on = Split::Train;
    s.id = std::move(id);
    const std::size_t cells = n_channels * n_bands;
    s.mean.assign(cells, 0.0);
    s.std.assign(cells, 0.0);
    for (const auto& f : log_features) {
        if (f.size() != cells) fail(ErrorKind::InvalidArgument, "feature shape mismatch");
        for (std::size_t i = 0; i < cells; ++i) s.mean[i] += f[i];
    }
    const double n = static_cast<double>(log_features.size());
    for (auto& m : s.mean) m /= n;
    for (const auto& f : log_features)
        for (std::size_t i = 0; i < cells; ++i) s.std[i] += (f[i] - s.mean[i]) * (f[i] - s.mean[i]);
    for (auto& v : s.std) v = std::max(std::sqrt(v / n), Standardizer::kStdFloor);
    return s;
}

inline nlohmann::json to_json(const Standardizer& s)
{
    return {{"id", s.id}, {"fitted_on", to_string(s.fitted_on)}, {"n_channels", s.n_channels},
            {"n_bands", s.n_bands}, {"mean", s.mean}, {"std", s.std}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j)
{
    Standardizer s;
    s.id = j.at("id").get<std::string>();
    s.fitted_on = parse_split(j.at("fitted_on").get<std::string>());
    if (s.fitted_on != Split::Train) fail(ErrorKind::MalformedInput, "standardizer not fitted on train");
    s.n_channels = j.at("n_channels").get<std::size_t>();
    s.n_bands = j.at("n_bands").get<std::size_t>();
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    if (s.mean.size() != s.n_channels * s.n_bands || s.std.size() != s.mean.size())
        fail(ErrorKind::MalformedInput, "standardizer shape mismatch");
    return s;
}

/// Maps a channel-subset feature matrix onto the full canonical montage;
/// missing channels take the per-band mean over the retained channels.
inline std::vector<double> expand_subset(std::span<const double> matrix, const std::vector<std::string>& channels,
                                         std::size_t n_bands)
{
    std::vector<double> band_mean(n_bands, 0.0);
    for (std::size_t c = 0; c < channels.size(); ++c)
        for (std::size_t b = 0; b < n_bands; ++b) band_mean[b] += matrix[c * n_bands + b];
    for (auto& v : band_mean) v /= static_cast<double>(channels.size());
    std::vector<double> out(montage::kChannelCount * n_bands);
    for (std::size_t i = 0; i < montage::kChannelCount; ++i) {
        const auto it = std::find(channels.begin(), channels.end(), montage::kCanonicalChannels[i]);
        for (std::size_t b = 0; b < n_bands; ++b) {
            out[i * n_bands + b] = it == channels.end()
                                       ? band_mean[b]
                                       : matrix[static_cast<std::size_t>(it - channels.begin()) * n_bands + b];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Whole-recording pipeline

struct PreprocessConfig {
    FirSpec fir;
    bool notch_50hz = false;
    WelchConfig welch;
    BandScheme bands;
};

/// Per-segment products of one recording.
struct RecordingFeatures {
    std::string patient_id;
    std::string recording_id;
    double sample_rate_hz = 0.0;
    std::vector<std::string> channel_names;
    LabelSet labels;
    BandScheme bands;
    bool is_subset = false;
    std::string standardizer_id;
    struct Item {
        std::size_t index = 0;
        bool padded = false;
        BandPowers powers;
        /// log10(1 + p), not standardized.
        std::vector<double> log_features;
    };
    std::vector<Item> segments;

    /// Standardized model input for segment `s` (32 x 10).
    SegmentFeatures segment_features(std::size_t s, const Standardizer* std_) const
    {
        SegmentFeatures f;
        f.patient_id = patient_id;
        f.recording_id = recording_id;
        f.segment_index = segments[s].index;
        f.n_bands = bands.n_bands();
        f.labels = labels;
        f.padded = segments[s].padded;
        f.is_subset = is_subset;
        if (is_subset) {
            f.matrix = expand_subset(segments[s].log_features, channel_names, f.n_bands);
        } else {
            f.matrix = segments[s].log_features;
        }
        f.n_channels = f.matrix.size() / f.n_bands;
        if (std_ && std_->fitted()) apply_standardizer(f.matrix, *std_);
        return f;
    }
};

inline RecordingFeatures preprocess_recording(const Recording& rec, const PreprocessConfig& cfg)
{
    validate_recording(rec, rec.is_subset);
    cfg.bands.validate();
    const auto& coeffs = cached_fir(cfg.fir, rec.sample_rate_hz);
    Recording filtered = filter_signal(rec, coeffs);
    if (cfg.notch_50hz) filtered = notch_filter(filtered);
    RecordingFeatures out;
    out.patient_id = rec.patient_id;
    out.recording_id = rec.recording_id;
    out.sample_rate_hz = rec.sample_rate_hz;
    out.channel_names = rec.channel_names;
    out.labels = rec.labels;
    out.bands = cfg.bands;
    out.is_subset = rec.is_subset;
    for (const auto& seg : segment_recording(filtered)) {
        RecordingFeatures::Item item;
        item.index = seg.index;
        item.padded = seg.padded_from.has_value();
        item.powers = band_powers(welch_psd(seg, cfg.welch, rec.sample_rate_hz), cfg.bands);
        item.log_features = log_powers(item.powers);
        out.segments.push_back(std::move(item));
    }
    return out;
}

inline nlohmann::json to_json(const RecordingFeatures& f)
{
    nlohmann::json j;
    j["patient_id"] = f.patient_id;
    j["recording_id"] = f.recording_id;
    j["sample_rate_hz"] = f.sample_rate_hz;
    j["channel_names"] = f.channel_names;
    j["labels"] = to_json(f.labels);
    j["band_edges_hz"] = f.bands.edges_hz;
    j["is_subset"] = f.is_subset;
    j["standardizer_id"] = f.standardizer_id.empty() ? nlohmann::json(nullptr) : nlohmann::json(f.standardizer_id);
    j["segments"] = nlohmann::json::array();
    for (const auto& s : f.segments) {
        nlohmann::json powers = nlohmann::json::array();
        nlohmann::json logs = nlohmann::json::array();
        for (std::size_t c = 0; c < s.powers.n_channels; ++c) {
            powers.push_back(std::vector<double>(s.powers.values.begin() + static_cast<std::ptrdiff_t>(c * s.powers.n_bands),
                                                 s.powers.values.begin() + static_cast<std::ptrdiff_t>((c + 1) * s.powers.n_bands)));
            logs.push_back(std::vector<double>(s.log_features.begin() + static_cast<std::ptrdiff_t>(c * s.powers.n_bands),
                                               s.log_features.begin() + static_cast<std::ptrdiff_t>((c + 1) * s.powers.n_bands)));
        }
        j["segments"].push_back({{"index", s.index}, {"padded", s.padded}, {"powers", powers}, {"log_features", logs}});
    }
    return j;
}

inline RecordingFeatures recording_features_from_json(const nlohmann::json& j)
{
    RecordingFeatures f;
    try {
        f.patient_id = j.at("patient_id").get<std::string>();
        f.recording_id = j.at("recording_id").get<std::string>();
        f.sample_rate_hz = j.at("sample_rate_hz").get<double>();
        f.channel_names = j.at("channel_names").get<std::vector<std::string>>();
        f.labels = label_set_from_json(j.at("labels"));
        f.bands.edges_hz = j.at("band_edges_hz").get<std::vector<double>>();
        f.is_subset = j.value("is_subset", false);
        if (j.contains("standardizer_id") && !j["standardizer_id"].is_null())
            f.standardizer_id = j["standardizer_id"].get<std::string>();
        for (const auto& s : j.at("segments")) {
            RecordingFeatures::Item item;
            item.index = s.at("index").get<std::size_t>();
            item.padded = s.at("padded").get<bool>();
            const auto powers = s.at("powers").get<std::vector<std::vector<double>>>();
            const auto logs = s.at("log_features").get<std::vector<std::vector<double>>>();
            item.powers.n_channels = powers.size();
            item.powers.n_bands = powers.empty() ? 0 : powers.front().size();
            for (const auto& row : powers) item.powers.values.insert(item.powers.values.end(), row.begin(), row.end());
            for (const auto& row : logs) item.log_features.insert(item.log_features.end(), row.begin(), row.end());
            f.segments.push_back(std::move(item));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedInput, std::string("malformed feature cache: ") + e.what());
    }
    return f;
}

} // namespace strokesight::dsp
