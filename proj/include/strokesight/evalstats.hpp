#pragma once

// Diagnostic-accuracy metrics and paired tests: F1, accuracy, rank-based AUC,
// patient-level percentile bootstrap, McNemar, DeLong, ECE and
// Benjamini-Hochberg.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "strokesight/eeg_io.hpp"
#include "strokesight/error.hpp"

namespace strokesight::stats {

struct PredictionRecord {
    std::string patient_id;
    int truth = 0;
    int pred = 0;
    std::vector<double> probs;
    bool low_confidence = false;
};

inline std::size_t infer_classes(std::span<const int> a, std::span<const int> b)
{
    int mx = -1;
    for (int v : a) mx = std::max(mx, v);
    for (int v : b) mx = std::max(mx, v);
    return static_cast<std::size_t>(mx + 1);
}

// ---------------------------------------------------------------------------
// F1 and accuracy

struct F1Report {
    double macro = 0.0;
    // nullopt for classes absent from both truth and prediction.
    std::vector<std::optional<double>> per_class;
    std::vector<std::string> warnings;
};

inline F1Report f1_report(std::span<const int> truth, std::span<const int> pred, std::size_t n_classes = 0)
{
    if (truth.empty()) fail(ErrorKind::InvalidArgument, "f1: empty input");
    if (truth.size() != pred.size()) fail(ErrorKind::InvalidArgument, "f1: truth/prediction length mismatch");
    if (n_classes == 0) n_classes = infer_classes(truth, pred);
    std::vector<double> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto t = static_cast<std::size_t>(truth[i]), p = static_cast<std::size_t>(pred[i]);
        if (truth[i] < 0 || pred[i] < 0 || t >= n_classes || p >= n_classes)
            fail(ErrorKind::InvalidArgument, "f1: label out of range");
        if (t == p) {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn[t] += 1;
        }
    }
    F1Report r;
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < n_classes; ++k) {
        if (tp[k] + fp[k] + fn[k] == 0) {
            r.per_class.push_back(std::nullopt);
            r.warnings.push_back("class " + std::to_string(k) + " absent from truth and prediction; excluded");
            continue;
        }
        const double f1 = 2 * tp[k] / (2 * tp[k] + fp[k] + fn[k]);
        r.per_class.push_back(f1);
        total += f1;
        ++used;
    }
    r.macro = total / static_cast<double>(used);
    return r;
}

inline double macro_f1(std::span<const int> truth, std::span<const int> pred, std::size_t n_classes = 0)
{
    return f1_report(truth, pred, n_classes).macro;
}

inline double accuracy(std::span<const int> truth, std::span<const int> pred)
{
    if (truth.empty()) fail(ErrorKind::InvalidArgument, "accuracy: empty input");
    if (truth.size() != pred.size()) fail(ErrorKind::InvalidArgument, "accuracy: length mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
    return static_cast<double>(hit) / static_cast<double>(truth.size());
}

inline std::pair<std::vector<int>, std::vector<int>> labels_of(std::span<const PredictionRecord> recs)
{
    std::vector<int> t, p;
    for (const auto& r : recs) {
        t.push_back(r.truth);
        p.push_back(r.pred);
    }
    return {t, p};
}

inline double macro_f1(std::span<const PredictionRecord> recs, std::size_t n_classes = 0)
{
    const auto [t, p] = labels_of(recs);
    return macro_f1(t, p, n_classes);
}

inline double accuracy(std::span<const PredictionRecord> recs)
{
    const auto [t, p] = labels_of(recs);
    return accuracy(t, p);
}

// ---------------------------------------------------------------------------
// ROC AUC via the Mann-Whitney statistic with midranks.

inline std::vector<double> midranks(std::span<const double> x)
{
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = rank;
        i = j + 1;
    }
    return r;
}

// labels: 1 = positive, 0 = negative.
inline double roc_auc_binary(std::span<const double> scores, std::span<const int> labels)
{
    if (scores.size() != labels.size()) fail(ErrorKind::InvalidArgument, "roc_auc: length mismatch");
    const auto ranks = midranks(scores);
    double n_pos = 0, rank_sum = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            n_pos += 1;
            rank_sum += ranks[i];
        } else if (labels[i] != 0) {
            fail(ErrorKind::InvalidArgument, "roc_auc: binary labels must be 0 or 1");
        }
    }
    const double n_neg = static_cast<double>(labels.size()) - n_pos;
    if (n_pos == 0 || n_neg == 0) fail(ErrorKind::Degenerate, "roc_auc: needs both positive and negative samples");
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

enum class AucAggregation { Binary, OvrMacro, OvrMicro };

// scores: row-major [n x K] probability matrix. For Binary, K may be 1
// (score of class 1) or 2 (column 1 is used).
inline double roc_auc(std::span<const double> scores, std::size_t n_cols, std::span<const int> labels, AucAggregation agg)
{
    if (n_cols == 0 || scores.size() != n_cols * labels.size())
        fail(ErrorKind::InvalidArgument, "roc_auc: score matrix does not match label count");
    const std::size_t n = labels.size();
    if (agg == AucAggregation::Binary) {
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) s[i] = scores[i * n_cols + (n_cols == 1 ? 0 : 1)];
        return roc_auc_binary(s, labels);
    }
    std::vector<double> col(n);
    std::vector<int> ind(n);
    if (agg == AucAggregation::OvrMacro) {
        double total = 0.0;
        for (std::size_t k = 0; k < n_cols; ++k) {
            for (std::size_t i = 0; i < n; ++i) {
                col[i] = scores[i * n_cols + k];
                ind[i] = labels[i] == static_cast<int>(k);
            }
            total += roc_auc_binary(col, ind);
        }
        return total / static_cast<double>(n_cols);
    }
    std::vector<double> flat(scores.begin(), scores.end());
    std::vector<int> flat_ind(n * n_cols);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n_cols; ++k) flat_ind[i * n_cols + k] = labels[i] == static_cast<int>(k);
    return roc_auc_binary(flat, flat_ind);
}

// ---------------------------------------------------------------------------
// Patient-level percentile bootstrap

struct BootstrapCI {
    double point = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    std::size_t n_resamples = 0;
    std::size_t n_redrawn = 0;
};

using Metric = std::function<std::optional<double>(std::span<const PredictionRecord>)>;

// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q)
{
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    if (i + 1 >= sorted.size()) return sorted.back();
    return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

// Resamples patients (all their records together) with replacement.
// Resample b draws from its own sub-seed, so results do not depend on the
// order resamples are evaluated in. Undefined resamples are redrawn.
inline BootstrapCI bootstrap_ci(std::span<const PredictionRecord> recs, const Metric& metric,
                                std::size_t n_resamples = 10000, std::uint64_t seed = 0, double level = 0.95)
{
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::size_t>> by_patient;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        auto& v = by_patient[recs[i].patient_id];
        if (v.empty()) order.push_back(recs[i].patient_id);
        v.push_back(i);
    }
    if (order.empty()) fail(ErrorKind::InvalidArgument, "bootstrap: no records");
    const auto point = metric(recs);
    if (!point) fail(ErrorKind::Degenerate, "bootstrap: metric undefined on the full sample");
    BootstrapCI ci;
    ci.point = *point;
    ci.n_resamples = n_resamples;
    std::vector<double> stats;
    stats.reserve(n_resamples);
    std::vector<PredictionRecord> sample;
    constexpr std::size_t kMaxRedraws = 1000;
    for (std::size_t b = 0; b < n_resamples; ++b) {
        std::optional<double> v;
        for (std::size_t attempt = 0; !v; ++attempt) {
            if (attempt == kMaxRedraws)
                fail(ErrorKind::Degenerate, "bootstrap: metric undefined on " + std::to_string(kMaxRedraws) +
                                                " consecutive resamples");
            if (attempt) ++ci.n_redrawn;
            std::mt19937_64 rng(derive_seed(seed, b, attempt));
            std::uniform_int_distribution<std::size_t> pick(0, order.size() - 1);
            sample.clear();
            for (std::size_t k = 0; k < order.size(); ++k)
                for (std::size_t i : by_patient[order[pick(rng)]]) sample.push_back(recs[i]);
            v = metric(sample);
        }
        stats.push_back(*v);
    }
    std::sort(stats.begin(), stats.end());
    const double alpha = (1.0 - level) / 2.0;
    ci.lo = std::min(quantile_sorted(stats, alpha), ci.point);
    ci.hi = std::max(quantile_sorted(stats, 1.0 - alpha), ci.point);
    return ci;
}

// ---------------------------------------------------------------------------
// McNemar

struct McNemarResult {
    double p_value = 1.0;
    double statistic = 0.0;  // chi-square statistic, 0 for the exact branch
    bool exact = true;
    std::string note;
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Two-sided exact binomial p for the smaller discordant count under Bin(n, 1/2).
inline double binomial_two_sided(std::size_t b, std::size_t c)
{
    const std::size_t n = b + c, k = std::min(b, c);
    double term = std::exp(-static_cast<double>(n) * std::log(2.0));  // C(n,0) / 2^n
    double tail = 0.0;
    for (std::size_t i = 0; i <= k; ++i) {
        tail += term;
        term *= static_cast<double>(n - i) / static_cast<double>(i + 1);
    }
    return std::min(1.0, 2.0 * tail);
}

// b = A correct & B wrong, c = A wrong & B correct.
inline McNemarResult mcnemar(std::size_t b, std::size_t c)
{
    McNemarResult r;
    if (b + c == 0) {
        r.note = "no discordant pairs";
        return r;
    }
    if (b + c < 25) {
        r.p_value = binomial_two_sided(b, c);
        return r;
    }
    r.exact = false;
    const double d = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
    r.statistic = std::max(d, 0.0) * std::max(d, 0.0) / static_cast<double>(b + c);
    r.p_value = std::erfc(std::sqrt(r.statistic / 2.0));
    return r;
}

inline McNemarResult mcnemar(std::span<const std::pair<bool, bool>> pairs)
{
    std::size_t b = 0, c = 0;
    for (const auto& [a_ok, b_ok] : pairs) {
        b += a_ok && !b_ok;
        c += !a_ok && b_ok;
    }
    return mcnemar(b, c);
}

// ---------------------------------------------------------------------------
// DeLong test for two correlated AUCs

struct DeLongResult {
    double auc_a = 0.0;
    double auc_b = 0.0;
    double delta = 0.0;  // auc_a - auc_b
    double variance = 0.0;
    double z = 0.0;
    double p_value = 1.0;
};

inline double delong_kernel(double pos, double neg) { return pos > neg ? 1.0 : (pos == neg ? 0.5 : 0.0); }

struct StructuralComponents {
    std::vector<double> v10;  // one per positive
    std::vector<double> v01;  // one per negative
    double auc = 0.0;
};

inline StructuralComponents structural_components(std::span<const double> scores, std::span<const int> labels)
{
    // Midrank form: V10_i = (R_i - R^pos_i) / n, V01_j = 1 - (R_j - R^neg_j) / m,
    // where R is the rank in the pooled sample and R^pos / R^neg the rank
    // within the class.
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(scores[i]);
    const auto pooled = midranks(scores);
    const auto rp = midranks(pos), rn = midranks(neg);
    const auto m = static_cast<double>(pos.size()), n = static_cast<double>(neg.size());
    StructuralComponents sc;
    std::size_t ip = 0, in = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            sc.v10.push_back((pooled[i] - rp[ip++]) / n);
        } else {
            sc.v01.push_back(1.0 - (pooled[i] - rn[in++]) / m);
        }
    }
    sc.auc = std::accumulate(sc.v10.begin(), sc.v10.end(), 0.0) / m;
    return sc;
}

inline DeLongResult delong(std::span<const double> a, std::span<const double> b, std::span<const int> labels)
{
    if (a.size() != labels.size() || b.size() != labels.size())
        fail(ErrorKind::InvalidArgument, "delong: scores and labels must be paired");
    std::size_t m = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) fail(ErrorKind::InvalidArgument, "delong: labels must be 0 or 1");
        m += l == 1;
    }
    const std::size_t n = labels.size() - m;
    if (m < 2 || n < 2) fail(ErrorKind::Degenerate, "delong: needs at least two positives and two negatives");
    auto all_tied = [](std::span<const double> s) {
        return std::all_of(s.begin(), s.end(), [&](double v) { return v == s[0]; });
    };
    if (all_tied(a) && all_tied(b))
        fail(ErrorKind::Degenerate, "delong: all scores tied in both classifiers; variance undefined");

    const auto ca = structural_components(a, labels), cb = structural_components(b, labels);
    auto cov = [](const std::vector<double>& x, const std::vector<double>& y) {
        const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
        return s / static_cast<double>(x.size() - 1);
    };
    const double s10 = cov(ca.v10, ca.v10) + cov(cb.v10, cb.v10) - 2 * cov(ca.v10, cb.v10);
    const double s01 = cov(ca.v01, ca.v01) + cov(cb.v01, cb.v01) - 2 * cov(ca.v01, cb.v01);

    DeLongResult r;
    r.auc_a = ca.auc;
    r.auc_b = cb.auc;
    r.delta = ca.auc - cb.auc;
    r.variance = std::max(0.0, s10 / static_cast<double>(m) + s01 / static_cast<double>(n));
    if (r.variance == 0.0) {
        // Zero variance: identical behaviour gives no evidence, a nonzero
        // difference with no spread is certain.
        r.z = r.delta == 0.0 ? 0.0 : std::copysign(INFINITY, r.delta);
        r.p_value = r.delta == 0.0 ? 1.0 : 0.0;
        return r;
    }
    r.z = r.delta / std::sqrt(r.variance);
    r.p_value = 2.0 * normal_cdf(-std::abs(r.z));
    return r;
}

// ---------------------------------------------------------------------------
// Expected calibration error

struct CalibrationReport {
    std::size_t n_bins = 15;
    std::vector<std::size_t> counts;
    std::vector<double> accuracy;    // NaN for empty bins
    std::vector<double> confidence;  // NaN for empty bins
    double ece = 0.0;
};

// Bins are right-closed: (m/M, (m+1)/M], with confidence 0 in the first bin.
inline std::size_t calibration_bin(double conf, std::size_t n_bins)
{
    const double scaled = conf * static_cast<double>(n_bins);
    auto idx = static_cast<std::ptrdiff_t>(std::ceil(scaled - 1e-9)) - 1;
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(n_bins) - 1));
}

inline CalibrationReport ece(std::span<const double> confidence, std::span<const int> correct, std::size_t n_bins = 15)
{
    if (confidence.empty()) fail(ErrorKind::InvalidArgument, "ece: empty input");
    if (confidence.size() != correct.size()) fail(ErrorKind::InvalidArgument, "ece: length mismatch");
    if (n_bins == 0) fail(ErrorKind::InvalidArgument, "ece: need at least one bin");
    CalibrationReport r;
    r.n_bins = n_bins;
    r.counts.assign(n_bins, 0);
    std::vector<double> hit(n_bins, 0.0), conf(n_bins, 0.0);
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        if (!(confidence[i] >= 0.0 && confidence[i] <= 1.0))
            fail(ErrorKind::InvalidArgument, "ece: confidence outside [0,1]");
        const auto m = calibration_bin(confidence[i], n_bins);
        ++r.counts[m];
        hit[m] += correct[i] ? 1.0 : 0.0;
        conf[m] += confidence[i];
    }
    const auto total = static_cast<double>(confidence.size());
    for (std::size_t m = 0; m < n_bins; ++m) {
        if (r.counts[m] == 0) {
            r.accuracy.push_back(NAN);
            r.confidence.push_back(NAN);
            continue;
        }
        const auto c = static_cast<double>(r.counts[m]);
        r.accuracy.push_back(hit[m] / c);
        r.confidence.push_back(conf[m] / c);
        r.ece += c / total * std::abs(hit[m] / c - conf[m] / c);
    }
    return r;
}

// Confidence = max class probability; correct = prediction matches truth.
inline CalibrationReport ece(std::span<const PredictionRecord> recs, std::size_t n_bins = 15)
{
    std::vector<double> conf;
    std::vector<int> ok;
    for (const auto& r : recs) {
        if (r.probs.empty()) fail(ErrorKind::InvalidArgument, "ece: record without probabilities");
        conf.push_back(*std::max_element(r.probs.begin(), r.probs.end()));
        ok.push_back(r.pred == r.truth);
    }
    return ece(conf, ok, n_bins);
}

// ---------------------------------------------------------------------------
// Benjamini-Hochberg

struct FdrResult {
    std::vector<double> q_values;
    std::vector<bool> rejected;
};

inline FdrResult benjamini_hochberg(std::span<const double> p, double alpha = 0.05)
{
    const std::size_t n = p.size();
    FdrResult r;
    r.q_values.assign(n, 1.0);
    r.rejected.assign(n, false);
    if (n == 0) return r;
    for (double v : p)
        if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::InvalidArgument, "benjamini_hochberg: p-value outside [0,1]");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    double running = 1.0;
    for (std::size_t k = n; k-- > 0;) {
        const std::size_t i = order[k];
        running = std::min(running, p[i] * static_cast<double>(n) / static_cast<double>(k + 1));
        r.q_values[i] = running;
    }
    for (std::size_t i = 0; i < n; ++i) r.rejected[i] = r.q_values[i] <= alpha;
    return r;
}

} // namespace strokesight::stats
