#include <gtest/gtest.h>

#include <complex>
#include <numbers>

#include "strokesight/dsp.hpp"
#include "test_util.hpp"

using namespace strokesight;
using namespace strokesight::dsp;
using strokesight::testing::make_recording;

namespace {

constexpr double kPi = std::numbers::pi;

// Independent frequency-response oracle: |sum_n h[n] e^{-i w n}| evaluated
// directly, without assuming symmetry.
double dtft_magnitude(const std::vector<double>& h, double f, double fs)
{
    std::complex<double> acc{};
    const double w = 2.0 * kPi * f / fs;
    for (std::size_t n = 0; n < h.size(); ++n) acc += h[n] * std::polar(1.0, -w * static_cast<double>(n));
    return std::abs(acc);
}

struct MeasuredResponse {
    double max_ripple = 0.0;
    double low_transition = 0.0;
    double high_transition = 0.0;
};

// Walks a dense grid and measures, per edge, the distance between the last
// point of the stop band (|H| < 0.01 from the band end) and the first point
// of the continuous pass region (||H| - 1| < 0.01).
MeasuredResponse measure(const std::vector<double>& h, const FirSpec& spec, double fs)
{
    const double step = 0.01;
    std::vector<double> f, mag;
    for (double v = 0.0; v <= fs / 2.0 + 1e-12; v += step) {
        f.push_back(v);
        mag.push_back(dtft_magnitude(h, v, fs));
    }
    const std::size_t n = f.size();
    auto in_pass = [&](std::size_t i) { return std::abs(mag[i] - 1.0) < spec.max_passband_ripple; };
    auto in_stop = [&](std::size_t i) { return mag[i] < spec.max_stopband_gain; };

    const auto centre = static_cast<std::size_t>(std::llround((spec.low_cut_hz + spec.high_cut_hz) / 2.0 / step));
    std::size_t pass_lo = centre, pass_hi = centre;
    while (pass_lo > 0 && in_pass(pass_lo - 1)) --pass_lo;
    while (pass_hi + 1 < n && in_pass(pass_hi + 1)) ++pass_hi;
    std::size_t stop_lo = 0;
    while (stop_lo + 1 < n && in_stop(stop_lo + 1)) ++stop_lo;
    std::size_t stop_hi = n - 1;
    while (stop_hi > 0 && in_stop(stop_hi - 1)) --stop_hi;

    MeasuredResponse r;
    for (std::size_t i = pass_lo; i <= pass_hi; ++i) r.max_ripple = std::max(r.max_ripple, std::abs(mag[i] - 1.0));
    r.low_transition = f[pass_lo] - f[stop_lo];
    r.high_transition = f[stop_hi] - f[pass_hi];
    return r;
}

} // namespace

// ---------------------------------------------------------------------------
// FIR design

TEST(DesignFir, CoefficientsAreSymmetricAndOddLength)
{
    for (double fs : {128.0, 256.0, 512.0}) {
        const auto h = design_fir({}, fs);
        ASSERT_EQ(h.size() % 2, 1u);
        for (std::size_t i = 0; i < h.size() / 2; ++i) ASSERT_EQ(h[i], h[h.size() - 1 - i]);
    }
}

TEST(DesignFir, ResponseAtReferenceFrequencies)
{
    const double fs = 256.0;
    const FirSpec spec;
    const auto h = design_fir(spec, fs);
    const double mid = dtft_magnitude(h, 30.0, fs);
    EXPECT_GE(mid, 0.99);
    EXPECT_LE(mid, 1.01);
    EXPECT_LT(dtft_magnitude(h, 0.05, fs), 0.01);
    EXPECT_LT(dtft_magnitude(h, spec.high_cut_hz + 2.0 * spec.transition_width_hz, fs), 0.01);
}

TEST(DesignFir, MeetsRippleAndTransitionAtAllRates)
{
    const FirSpec spec;
    for (double fs : {128.0, 256.0, 512.0}) {
        const auto h = design_fir(spec, fs);
        const auto r = measure(h, spec, fs);
        EXPECT_LT(r.max_ripple, 0.01) << fs;
        EXPECT_LE(r.low_transition, 2.0) << fs;
        EXPECT_LE(r.high_transition, 2.0) << fs;
    }
}

TEST(DesignFir, InfeasibleSpecsRejected)
{
    FirSpec spec;
    spec.low_cut_hz = 64.0;  // at Nyquist for 128 Hz
    EXPECT_THROW(design_fir(spec, 128.0), Error);
    spec = {};
    spec.high_cut_hz = 63.5;  // transition band crosses Nyquist
    EXPECT_THROW(design_fir(spec, 128.0), Error);
    spec = {};
    spec.transition_width_hz = 0.0;
    EXPECT_THROW(design_fir(spec, 256.0), Error);
}

// ---------------------------------------------------------------------------
// Filtering

TEST(FilterSignal, DcIsRemovedAwayFromEdges)
{
    const double fs = 128.0;
    const auto rec = make_recording(fs, 60.0, [](std::size_t, double) { return 25.0; });
    const auto h = design_fir({}, fs);
    const auto out = filter_signal(rec, h);
    ASSERT_EQ(out.n_samples, rec.n_samples);
    EXPECT_EQ(out.edge_samples, (h.size() - 1) / 2);
    double worst = 0.0;
    for (std::size_t t = out.edge_samples; t + out.edge_samples < out.n_samples; ++t)
        worst = std::max(worst, std::abs(static_cast<double>(out.channel(3)[t])));
    EXPECT_LT(worst, 0.01 * 25.0);
}

TEST(FilterSignal, TenHertzSinePassesWithinOnePercent)
{
    const double fs = 256.0;
    const auto rec = make_recording(fs, 60.0, [](std::size_t, double t) { return std::sin(2 * kPi * 10.0 * t); });
    const auto h = design_fir({}, fs);
    const auto out = filter_signal(rec, h);
    double peak = 0.0, err = 0.0;
    for (std::size_t t = out.edge_samples; t + out.edge_samples < out.n_samples; ++t) {
        peak = std::max(peak, std::abs(static_cast<double>(out.channel(0)[t])));
        // Group-delay compensation keeps the sine in phase with the input.
        err = std::max(err, static_cast<double>(std::abs(out.channel(0)[t] - rec.channel(0)[t])));
    }
    EXPECT_NEAR(peak, 1.0, 0.01);
    EXPECT_LT(err, 0.01);
}

TEST(FilterSignal, ImpulseReproducesCoefficients)
{
    const double fs = 128.0;
    const auto h = design_fir({}, fs);
    const std::size_t n0 = 4000;
    auto rec = make_recording(fs, 60.0, [](std::size_t, double) { return 0.0; });
    rec.channel(7)[n0] = 1.0f;
    const auto out = filter_signal(rec, h);
    const std::size_t mid = (h.size() - 1) / 2;
    for (std::size_t k = 0; k < h.size(); ++k)
        ASSERT_NEAR(out.channel(7)[n0 - mid + k], h[k], 1e-7 + 1e-6 * std::abs(h[k]));
}

TEST(FilterSignal, SignalShorterThanFilterRejected)
{
    auto rec = make_recording(128.0, 60.0, [](std::size_t, double) { return 0.0; });
    rec.n_samples = 100;
    rec.samples.resize(32 * 100);
    try {
        filter_signal(rec, design_fir({}, 128.0));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::TooShort);
    }
}

TEST(NotchFilter, SuppressesFiftyHertzKeepsTen)
{
    const double fs = 256.0;
    const auto rec = make_recording(fs, 60.0, [](std::size_t c, double t) {
        return c == 0 ? std::sin(2 * kPi * 50.0 * t) : std::sin(2 * kPi * 10.0 * t);
    });
    const auto out = notch_filter(rec);
    double p50 = 0, p10 = 0;
    for (std::size_t t = 2000; t + 2000 < out.n_samples; ++t) {
        p50 = std::max(p50, std::abs(static_cast<double>(out.channel(0)[t])));
        p10 = std::max(p10, std::abs(static_cast<double>(out.channel(1)[t])));
    }
    EXPECT_LT(p50, 0.01);
    EXPECT_NEAR(p10, 1.0, 0.01);
}

// ---------------------------------------------------------------------------
// Segmentation

TEST(Segment, LongRecordingTruncatedToThreeMinutes)
{
    const auto rec = make_recording(128.0, 200.0, [](std::size_t, double t) { return t; });
    const auto segs = segment_recording(rec);
    ASSERT_EQ(segs.size(), 3u);
    for (const auto& s : segs) {
        EXPECT_EQ(s.n_samples, 60u * 128u);
        EXPECT_FALSE(s.padded_from.has_value());
    }
    // Last sample of the third segment is t = 180 s - 1 sample.
    EXPECT_NEAR(segs[2].channel(0).back(), 180.0 - 1.0 / 128.0, 1e-3);
}

TEST(Segment, ExactlyThreeMinutesHasNoPadding)
{
    const auto segs = segment_recording(make_recording(128.0, 180.0, [](std::size_t, double) { return 1.0; }));
    for (const auto& s : segs) EXPECT_FALSE(s.padded_from.has_value());
}

TEST(Segment, ShortRecordingPadsLastSegment)
{
    const auto segs = segment_recording(make_recording(128.0, 170.0, [](std::size_t, double) { return 1.0; }));
    ASSERT_EQ(segs.size(), 3u);
    EXPECT_FALSE(segs[0].padded_from.has_value());
    EXPECT_FALSE(segs[1].padded_from.has_value());
    ASSERT_TRUE(segs[2].padded_from.has_value());
    EXPECT_EQ(*segs[2].padded_from, 50u * 128u);  // final 10 s are zeros
    EXPECT_EQ(segs[2].channel(0)[50 * 128 - 1], 1.0);
    EXPECT_EQ(segs[2].channel(0)[50 * 128], 0.0);
}

TEST(Segment, UnderSixtySecondsRejected)
{
    auto rec = make_recording(128.0, 60.0, [](std::size_t, double) { return 1.0; });
    rec.n_samples -= 1;
    rec.samples.resize(32 * rec.n_samples);
    EXPECT_THROW(segment_recording(rec), Error);
}

TEST(Segment, ConcatenationReproducesSignal)
{
    const auto rec = strokesight::testing::noise_recording(128.0, 180.0, 4);
    const auto segs = segment_recording(rec);
    for (std::size_t c : {0u, 13u, 31u}) {
        std::vector<double> joined;
        for (const auto& s : segs) joined.insert(joined.end(), s.channel(c).begin(), s.channel(c).end());
        ASSERT_EQ(joined.size(), rec.n_samples);
        for (std::size_t t = 0; t < joined.size(); ++t) ASSERT_EQ(joined[t], static_cast<double>(rec.channel(c)[t]));
    }
}

// ---------------------------------------------------------------------------
// Welch

namespace {

// Direct modified periodogram: O(L^2) DFT of the Hamming-windowed frame,
// |F|^2 / U scaled by 1/(fs L) and folded to one side.
std::vector<double> direct_periodogram(const std::vector<double>& x, double fs)
{
    const std::size_t len = x.size();
    std::vector<double> w(len);
    double u = 0.0;
    for (std::size_t n = 0; n < len; ++n) {
        w[n] = 0.54 - 0.46 * std::cos(2 * kPi * static_cast<double>(n) / static_cast<double>(len - 1));
        u += w[n] * w[n];
    }
    u /= static_cast<double>(len);
    std::vector<double> out(len / 2 + 1);
    for (std::size_t k = 0; k < out.size(); ++k) {
        std::complex<double> acc{};
        for (std::size_t n = 0; n < len; ++n)
            acc += w[n] * x[n] * std::polar(1.0, -2 * kPi * static_cast<double>(k * n % len) / static_cast<double>(len));
        const double fold = (k == 0 || k == len / 2) ? 1.0 : 2.0;
        out[k] = fold * std::norm(acc) / u / (fs * static_cast<double>(len));
    }
    return out;
}

} // namespace

TEST(Welch, SingleWindowEqualsDirectPeriodogram)
{
    const double fs = 64.0;
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 3.0);
    std::vector<double> x(256);
    for (auto& v : x) v = n(rng);
    const auto est = welch_psd(x, 1, x.size(), {4.0, 0.0}, fs);
    ASSERT_EQ(est.n_windows, 1u);
    const auto oracle = direct_periodogram(x, fs);
    ASSERT_EQ(est.freqs_hz.size(), oracle.size());
    for (std::size_t k = 0; k < oracle.size(); ++k)
        EXPECT_LT(std::abs(est.psd[k] - oracle[k]) / std::abs(oracle[k]), 1e-10) << k;
}

TEST(Welch, WhiteNoiseIntegratesToVariance)
{
    const double fs = 128.0, sigma = 2.5;
    std::mt19937_64 rng(99);
    std::normal_distribution<double> n(0.0, sigma);
    double mean_power = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(60 * 128);
        for (auto& v : x) v = n(rng);
        const auto est = welch_psd(x, 1, x.size(), {}, fs);
        const double df = est.freqs_hz[1] - est.freqs_hz[0];
        double integral = 0.0;
        for (double p : est.psd) integral += p * df;
        mean_power += integral / 100.0;
    }
    EXPECT_NEAR(mean_power, sigma * sigma, 0.1 * sigma * sigma);
}

TEST(Welch, SinePeakAtTenHertz)
{
    const double fs = 256.0;
    std::vector<double> x(60 * 256);
    for (std::size_t t = 0; t < x.size(); ++t) x[t] = std::sin(2 * kPi * 10.0 * static_cast<double>(t) / fs);
    const auto est = welch_psd(x, 1, x.size(), {}, fs);
    const auto peak = std::max_element(est.psd.begin(), est.psd.end()) - est.psd.begin();
    EXPECT_DOUBLE_EQ(est.freqs_hz[static_cast<std::size_t>(peak)], 10.0);
    EXPECT_EQ(est.n_windows, 29u);  // 60 s, 4 s windows, 2 s hop
}

TEST(Welch, RejectsShortSegmentAndBadOverlap)
{
    std::vector<double> x(100, 0.0);
    EXPECT_THROW(welch_psd(x, 1, x.size(), {}, 128.0), Error);
    std::vector<double> y(1024, 0.0);
    EXPECT_THROW(welch_psd(y, 1, y.size(), {4.0, 1.0}, 128.0), Error);
}

// ---------------------------------------------------------------------------
// Band powers

namespace {

SpectrumEstimate constant_spectrum(double value, std::size_t channels = 2)
{
    SpectrumEstimate s;
    for (int k = 0; k <= 256; ++k) s.freqs_hz.push_back(k * 0.25);
    s.n_channels = channels;
    s.psd.assign(channels * s.freqs_hz.size(), value);
    return s;
}

} // namespace

TEST(BandPowers, ConstantPsdGivesBandwidths)
{
    const BandScheme scheme;
    const auto p = band_powers(constant_spectrum(1.0), scheme);
    for (std::size_t b = 0; b < 10; ++b)
        EXPECT_NEAR(p.at(1, b), scheme.edges_hz[b + 1] - scheme.edges_hz[b], 1e-12);
}

TEST(BandPowers, ZeroPsdGivesZeros)
{
    const auto p = band_powers(constant_spectrum(0.0), {});
    for (double v : p.values) EXPECT_EQ(v, 0.0);
}

TEST(BandPowers, NonAlignedEdgesUseInterpolation)
{
    BandScheme scheme;
    scheme.edges_hz = {0.5, 1.1, 4.0, 6.0, 8.0, 10.0, 13.0, 20.0, 30.0, 38.0, 45.0};
    const auto p = band_powers(constant_spectrum(2.0), scheme);
    EXPECT_NEAR(p.at(0, 0), 2.0 * 0.6, 1e-12);
    EXPECT_NEAR(p.at(0, 1), 2.0 * 2.9, 1e-12);
}

TEST(BandPowers, LinearInPsd)
{
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    auto s = constant_spectrum(0.0, 3);
    for (auto& v : s.psd) v = u(rng);
    const auto base = band_powers(s, {});
    for (double a : {0.0, 0.5, 3.0}) {
        auto scaled = s;
        for (auto& v : scaled.psd) v *= a;
        const auto p = band_powers(scaled, {});
        for (std::size_t i = 0; i < p.values.size(); ++i) EXPECT_NEAR(p.values[i], a * base.values[i], 1e-12);
    }
}

TEST(BandPowers, DeltaOnlySignalConcentratesInFirstTwoBands)
{
    const double fs = 128.0;
    std::vector<double> x(60 * 128);
    for (std::size_t t = 0; t < x.size(); ++t) {
        const double s = static_cast<double>(t) / fs;
        x[t] = std::sin(2 * kPi * 1.5 * s) + 0.7 * std::sin(2 * kPi * 3.0 * s + 0.3);
    }
    const auto p = band_powers(welch_psd(x, 1, x.size(), {}, fs), {});
    double total = 0.0;
    for (double v : p.values) total += v;
    EXPECT_GT((p.at(0, 0) + p.at(0, 1)) / total, 0.9);
}

TEST(BandScheme, Validation)
{
    BandScheme s;
    EXPECT_NO_THROW(s.validate());
    s.edges_hz[3] = s.edges_hz[2];
    EXPECT_THROW(s.validate(), Error);
    s = {};
    s.edges_hz.pop_back();
    EXPECT_THROW(s.validate(), Error);
}

// ---------------------------------------------------------------------------
// Features

TEST(Featurize, LogTransformClosedForms)
{
    BandPowers p;
    p.n_channels = 1;
    p.n_bands = 2;
    p.values = {0.0, 9.0};
    const auto f = featurize(p);
    EXPECT_EQ(f.matrix[0], 0.0);
    EXPECT_DOUBLE_EQ(f.matrix[1], 1.0);
}

TEST(Featurize, NegativePowerRejected)
{
    BandPowers p;
    p.n_channels = 1;
    p.n_bands = 1;
    p.values = {-1e-3};
    EXPECT_THROW(featurize(p), Error);
}

TEST(Standardizer, TrainFeaturesHaveZeroMeanUnitStd)
{
    std::mt19937_64 rng(6);
    std::lognormal_distribution<double> ln(2.0, 1.0);
    std::vector<std::vector<double>> feats;
    for (int i = 0; i < 40; ++i) {
        BandPowers p;
        p.n_channels = 32;
        p.n_bands = 10;
        p.values.resize(320);
        for (auto& v : p.values) v = ln(rng);
        feats.push_back(log_powers(p));
    }
    const auto s = fit_standardizer(feats, 32, 10, Split::Train);
    std::vector<double> mean(320, 0.0), sq(320, 0.0);
    for (auto f : feats) {
        apply_standardizer(f, s);
        for (std::size_t i = 0; i < 320; ++i) {
            mean[i] += f[i] / 40.0;
            sq[i] += f[i] * f[i] / 40.0;
        }
    }
    for (std::size_t i = 0; i < 320; ++i) {
        EXPECT_NEAR(mean[i], 0.0, 1e-9);
        EXPECT_NEAR(std::sqrt(sq[i] - mean[i] * mean[i]), 1.0, 1e-9);
    }
}

TEST(Standardizer, RefusesNonTrainSplitsAndFloorsStd)
{
    std::vector<std::vector<double>> feats = {{1.0, 2.0}, {1.0, 3.0}};
    EXPECT_THROW(fit_standardizer(feats, 1, 2, Split::Validation), Error);
    EXPECT_THROW(fit_standardizer(feats, 1, 2, Split::Test), Error);
    const auto s = fit_standardizer(feats, 1, 2, Split::Train);
    EXPECT_EQ(s.std[0], Standardizer::kStdFloor);
    EXPECT_EQ(s.fitted_on, Split::Train);
}

TEST(ExpandSubset, MissingChannelsTakeRetainedMean)
{
    const std::vector<std::string> keep = {"C3", "C4"};
    const std::vector<double> m = {1.0, 2.0, 3.0, 6.0};  // 2 channels x 2 bands
    const auto full = expand_subset(m, keep, 2);
    ASSERT_EQ(full.size(), 64u);
    const auto c3 = *montage::canonical_index("C3");
    EXPECT_EQ(full[c3 * 2 + 1], 2.0);
    EXPECT_EQ(full[0], 2.0);  // Fp1 missing: mean(1, 3)
    EXPECT_EQ(full[1], 4.0);
}

TEST(Preprocess, RecordingProducesThreeSegmentsOfFeatures)
{
    const auto rec = strokesight::testing::noise_recording(128.0, 180.0, 12);
    const auto feats = preprocess_recording(rec, {});
    ASSERT_EQ(feats.segments.size(), 3u);
    const auto f = feats.segment_features(1, nullptr);
    EXPECT_EQ(f.n_channels, 32u);
    EXPECT_EQ(f.n_bands, 10u);
    for (double v : f.matrix) EXPECT_TRUE(std::isfinite(v));
    const auto round = recording_features_from_json(to_json(feats));
    EXPECT_EQ(round.segments[2].log_features, feats.segments[2].log_features);
}
