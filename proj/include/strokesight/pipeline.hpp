#pragma once

// End-to-end glue: the on-disk cohort layout, preprocessing, training of the
// three task heads, patient-level predictions, the stream the threshold agent
// sees, and the evaluation report.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "strokesight/dqn.hpp"
#include "strokesight/dsp.hpp"
#include "strokesight/eeg_io.hpp"
#include "strokesight/error.hpp"
#include "strokesight/evalstats.hpp"
#include "strokesight/grutcn.hpp"

namespace strokesight::pipeline {

namespace fs = std::filesystem;
using model::Task;
using ordered_json = nlohmann::ordered_json;

/// Where every artifact lives under one working directory.
struct Layout {
    fs::path root;

    fs::path recordings() const { return root / "recordings"; }
    fs::path features() const { return root / "features"; }
    fs::path model() const { return root / "model"; }
    fs::path policy() const { return root / "policy" / "policy"; }
    fs::path reports() const { return root / "reports"; }
    fs::path cohort() const { return root / "cohort.json"; }
};

// ---------------------------------------------------------------------------
// Synthetic cohort on disk

struct SynthConfig {
    std::size_t patients = 36;
    std::uint64_t seed = 0;
    double duration_s = 180.0;
    double sample_rate_hz = 256.0;
    bool strong = true;
};

/// Even split over the three classes; the remainder goes to healthy first.
inline std::map<StrokeType, std::size_t> class_counts(std::size_t patients)
{
    std::map<StrokeType, std::size_t> n;
    const std::size_t base = patients / 3, rem = patients % 3;
    n[StrokeType::Healthy] = base + (rem > 0);
    n[StrokeType::Ischemic] = base + (rem > 1);
    n[StrokeType::Hemorrhagic] = base;
    return n;
}

inline CohortManifest synthesize(const Layout& out, const SynthConfig& cfg)
{
    if (cfg.patients < 9) fail(ErrorKind::Infeasible, "need at least 9 patients so every split holds every class");
    SyntheticCohortSpec spec;
    spec.n_patients_per_class = class_counts(cfg.patients);
    spec.effect_recipes = cfg.strong ? strong_recipes() : default_recipes();
    spec.duration_s = cfg.duration_s;
    spec.sample_rate_hz = cfg.sample_rate_hz;
    spec.seed = derive_seed(cfg.seed, 0x73796e7468ULL);
    const auto recordings = generate_synthetic_cohort(spec);
    auto manifest = make_splits(draft_manifest(recordings), {}, derive_seed(cfg.seed, 0x73706c6974ULL));
    fs::create_directories(out.recordings());
    for (const auto& r : recordings) write_recording(r, out.recordings());
    write_file(out.cohort(), to_json(manifest).dump(2));
    return manifest;
}

inline CohortManifest load_manifest(const Layout& in)
{
    if (!fs::exists(in.cohort())) fail(ErrorKind::NotFound, "no cohort manifest at " + in.cohort().string());
    try {
        return cohort_from_json(nlohmann::json::parse(read_file(in.cohort())));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::MalformedInput, std::string("cohort manifest: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Preprocessing

struct PreprocessOptions {
    double high_pass_hz = 0.5;
    bool notch_50hz = true;
    double window_s = 4.0;
};

inline dsp::PreprocessConfig preprocess_config(const PreprocessOptions& o)
{
    if (!(o.window_s > 0.0 && o.window_s <= dsp::kSegmentDurationS))
        fail(ErrorKind::Infeasible, "Welch window must lie in (0, 60] s");
    if (!(o.high_pass_hz > 0.0)) fail(ErrorKind::Infeasible, "high-pass cut-off must be > 0 Hz");
    dsp::PreprocessConfig cfg;
    cfg.fir.low_cut_hz = o.high_pass_hz;
    cfg.notch_50hz = o.notch_50hz;
    cfg.welch.window_len_s = o.window_s;
    return cfg;
}

inline nlohmann::json to_json(const PreprocessOptions& o)
{
    return {{"high_pass_hz", o.high_pass_hz}, {"notch_50hz", o.notch_50hz}, {"window_s", o.window_s}};
}

inline fs::path feature_path(const Layout& l, const std::string& recording_id)
{
    return l.features() / (recording_id + ".json");
}

/// Preprocesses every recording listed in the manifest of `in` and writes one
/// feature cache per recording under `out`.
inline std::vector<dsp::RecordingFeatures> preprocess_cohort(const Layout& in, const Layout& out, const PreprocessOptions& opts)
{
    const auto manifest = load_manifest(in);
    const auto cfg = preprocess_config(opts);
    fs::create_directories(out.features());
    std::vector<dsp::RecordingFeatures> all;
    for (const auto& e : manifest.entries)
        for (const auto& rid : e.recording_ids) {
            auto f = dsp::preprocess_recording(load_recording(in.recordings() / rid), cfg);
            write_file(feature_path(out, rid), dsp::to_json(f).dump());
            all.push_back(std::move(f));
        }
    if (in.cohort() != out.cohort()) write_file(out.cohort(), to_json(manifest).dump(2));
    return all;
}

/// Manifest plus the feature caches of all its recordings, in manifest order.
struct Cohort {
    CohortManifest manifest;
    std::vector<dsp::RecordingFeatures> features;

    Split split_of(const dsp::RecordingFeatures& f) const
    {
        const auto s = manifest.split_of(f.patient_id);
        if (!s) fail(ErrorKind::NotFound, "patient " + f.patient_id + " is not in the cohort manifest");
        return *s;
    }
};

inline Cohort load_cohort(const Layout& in)
{
    Cohort c;
    c.manifest = load_manifest(in);
    for (const auto& e : c.manifest.entries)
        for (const auto& rid : e.recording_ids) {
            const auto p = feature_path(in, rid);
            if (!fs::exists(p)) fail(ErrorKind::NotFound, "no feature cache for " + rid + "; run preprocess first");
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(read_file(p));
            } catch (const nlohmann::json::parse_error& err) {
                fail(ErrorKind::MalformedInput, "feature cache " + p.string() + ": " + err.what());
            }
            c.features.push_back(dsp::recording_features_from_json(j));
        }
    return c;
}

// ---------------------------------------------------------------------------
// Training

inline dsp::Standardizer fit_train_standardizer(const Cohort& c)
{
    std::vector<std::vector<double>> rows;
    std::size_t nch = 0, nb = 0;
    for (const auto& f : c.features) {
        if (c.split_of(f) != Split::Train) continue;
        for (std::size_t s = 0; s < f.segments.size(); ++s) {
            auto sf = f.segment_features(s, nullptr);
            nch = sf.n_channels;
            nb = sf.n_bands;
            rows.push_back(std::move(sf.matrix));
        }
    }
    return dsp::fit_standardizer(rows, nch, nb, Split::Train, "train");
}

/// Segment-level samples of one split. Binary tasks keep stroke patients only.
inline std::vector<model::Sample> task_samples(const Cohort& c, Split split, Task task, const dsp::Standardizer& std_)
{
    std::vector<model::Sample> out;
    for (const auto& f : c.features) {
        if (c.split_of(f) != split) continue;
        const auto label = model::task_label(task, f.labels);
        if (!label) continue;
        for (std::size_t s = 0; s < f.segments.size(); ++s)
            out.push_back({f.patient_id, f.segment_features(s, &std_).matrix, *label});
    }
    return out;
}

struct TrainedBundle {
    model::ModelBundle bundle;
    std::map<Task, std::vector<model::EpochRecord>> history;
};

inline std::uint64_t task_seed(std::uint64_t seed, Task t)
{
    return derive_seed(seed, 0x7461736bULL, static_cast<std::uint64_t>(t) + 1);
}

inline TrainedBundle train_bundle(const Cohort& c, const model::TrainConfig& cfg, const model::Architecture& arch = {})
{
    if (c.features.empty()) fail(ErrorKind::InvalidArgument, "train: cohort has no features");
    TrainedBundle out;
    out.bundle.standardizer = fit_train_standardizer(c);
    out.bundle.bands = c.features.front().bands;
    for (Task t : model::kTasks) {
        auto tc = cfg;
        tc.seed = task_seed(cfg.seed, t);
        const auto train = task_samples(c, Split::Train, t, out.bundle.standardizer);
        const auto val = task_samples(c, Split::Validation, t, out.bundle.standardizer);
        auto r = model::train_task(t, train, val, tc, arch);
        out.bundle.meta[t] = {r.epochs_run, r.best_epoch, r.best_val_f1, tc.seed};
        out.bundle.models.emplace(t, std::move(r.model));
        out.history[t] = std::move(r.history);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Inference

struct TaskOutput {
    std::vector<model::Inference> segments;
    model::PatientPrediction patient;
};

struct RecordingOutput {
    std::string patient_id;
    std::string recording_id;
    LabelSet labels;
    std::map<Task, TaskOutput> tasks;
};

inline std::vector<double> model_input(const model::ModelBundle& b, const dsp::RecordingFeatures& f)
{
    if (f.segments.empty()) fail(ErrorKind::InvalidArgument, "recording " + f.recording_id + " has no segments");
    if (f.bands.edges_hz != b.bands.edges_hz) fail(ErrorKind::Conflict, "feature band scheme differs from the model's");
    std::vector<double> x;
    for (std::size_t s = 0; s < f.segments.size(); ++s) {
        const auto sf = f.segment_features(s, &b.standardizer);
        x.insert(x.end(), sf.matrix.begin(), sf.matrix.end());
    }
    return x;
}

inline RecordingOutput run_models(const model::ModelBundle& b, const dsp::RecordingFeatures& f)
{
    RecordingOutput out{f.patient_id, f.recording_id, f.labels, {}};
    const auto x = model_input(b, f);
    for (const auto& [task, m] : b.models) {
        TaskOutput t;
        t.segments = model::infer(m, x, f.segments.size());
        std::vector<std::vector<double>> probs;
        for (const auto& s : t.segments) probs.push_back(s.probs);
        t.patient = model::predict_patient(probs);
        out.tasks.emplace(task, std::move(t));
    }
    return out;
}

/// Stroke-type head outputs as the threshold agent's stream, one item per segment.
inline dqn::Stream threshold_stream(std::span<const RecordingOutput> outs)
{
    dqn::Stream s;
    for (const auto& o : outs) {
        const auto it = o.tasks.find(Task::StrokeType);
        if (it == o.tasks.end()) fail(ErrorKind::NotFound, "bundle has no stroke-type head");
        for (const auto& seg : it->second.segments) {
            dqn::StreamItem item;
            item.patient_id = o.patient_id;
            item.obs.embedding = seg.embedding;
            std::copy_n(seg.probs.begin(), dqn::kClasses, item.obs.probs.begin());
            item.label = static_cast<int>(o.labels.stroke_type);
            s.push_back(std::move(item));
        }
    }
    return s;
}

/// Patient-level records for a task: segments of all a patient's recordings
/// are pooled and aggregated by majority vote.
inline std::vector<stats::PredictionRecord> patient_records(std::span<const RecordingOutput> outs, Task task)
{
    std::map<std::string, std::pair<int, std::vector<std::vector<double>>>> by_patient;
    for (const auto& o : outs) {
        const auto label = model::task_label(task, o.labels);
        if (!label) continue;
        auto& slot = by_patient[o.patient_id];
        slot.first = *label;
        for (const auto& s : o.tasks.at(task).segments) slot.second.push_back(s.probs);
    }
    std::vector<stats::PredictionRecord> out;
    for (const auto& [pid, v] : by_patient) {
        const auto p = model::predict_patient(v.second);
        out.push_back({pid, v.first, p.label, p.probs, false});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear reference model for the paired tests

/// Multinomial logistic regression on the flattened standardized features,
/// fitted by full-batch gradient descent with an L2 penalty.
struct LinearBaseline {
    std::size_t n_in = 0;
    std::size_t k = 0;
    std::vector<double> W;  // [k x n_in]
    std::vector<double> b;

    std::vector<double> probs(std::span<const double> x) const
    {
        std::vector<double> z(k);
        for (std::size_t c = 0; c < k; ++c) {
            z[c] = b[c];
            for (std::size_t i = 0; i < n_in; ++i) z[c] += W[c * n_in + i] * x[i];
        }
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (auto& v : z) sum += (v = std::exp(v - mx));
        for (auto& v : z) v /= sum;
        return z;
    }
};

inline LinearBaseline fit_baseline(std::span<const model::Sample> train, std::size_t n_classes, double l2 = 1e-2,
                                   double lr = 0.5, std::size_t iterations = 300)
{
    if (train.empty()) fail(ErrorKind::InvalidArgument, "baseline: no training samples");
    LinearBaseline m;
    m.n_in = train.front().features.size();
    m.k = n_classes;
    m.W.assign(m.k * m.n_in, 0.0);
    m.b.assign(m.k, 0.0);
    const double n = static_cast<double>(train.size());
    std::vector<double> gW(m.W.size()), gb(m.k);
    for (std::size_t it = 0; it < iterations; ++it) {
        std::fill(gW.begin(), gW.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (const auto& s : train) {
            const auto p = m.probs(s.features);
            for (std::size_t c = 0; c < m.k; ++c) {
                const double d = (p[c] - (s.label == static_cast<int>(c) ? 1.0 : 0.0)) / n;
                gb[c] += d;
                for (std::size_t i = 0; i < m.n_in; ++i) gW[c * m.n_in + i] += d * s.features[i];
            }
        }
        for (std::size_t i = 0; i < m.W.size(); ++i) m.W[i] -= lr * (gW[i] + l2 * m.W[i]);
        for (std::size_t c = 0; c < m.k; ++c) m.b[c] -= lr * gb[c];
    }
    return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct AdaptiveComparison {
    dqn::Thresholds static_tau{};
    dqn::Thresholds policy_tau{};
    dqn::Thresholds final_tau{};
    std::vector<stats::PredictionRecord> static_records;
    std::vector<stats::PredictionRecord> dqn_records;
    double static_accuracy = 0.0;  // segment level
    double dqn_accuracy = 0.0;
    double static_ece = 0.0;  // segment level, confidence = max probability
    double dqn_ece = 0.0;
};

struct Evaluation {
    Split split = Split::Test;
    std::map<Task, std::vector<stats::PredictionRecord>> records;
    std::map<Task, std::vector<stats::PredictionRecord>> baseline;
    std::optional<AdaptiveComparison> adaptive;
};

inline std::vector<RecordingOutput> run_split(const Cohort& c, const model::ModelBundle& b, Split split)
{
    std::vector<RecordingOutput> outs;
    for (const auto& f : c.features)
        if (c.split_of(f) == split) outs.push_back(run_models(b, f));
    if (outs.empty()) fail(ErrorKind::NotFound, std::string("split ") + to_string(split) + " has no recordings");
    return outs;
}

inline AdaptiveComparison compare_thresholds(const dqn::Stream& stream, const dqn::Thresholds& static_tau,
                                             const dqn::Policy& policy)
{
    AdaptiveComparison a;
    a.static_tau = static_tau;
    a.policy_tau = policy.tau;
    const auto st = dqn::static_decisions(stream, static_tau);
    const auto ep = dqn::evaluate_policy(policy, stream);
    a.final_tau = ep.final_tau;
    a.static_records = dqn::patient_records(stream, st);
    a.dqn_records = dqn::patient_records(stream, ep.decisions);
    a.static_accuracy = dqn::segment_accuracy(stream, st);
    a.dqn_accuracy = dqn::segment_accuracy(stream, ep.decisions);
    a.static_ece = dqn::decided_ece(stream, st).ece;
    a.dqn_ece = dqn::decided_ece(stream, ep.decisions).ece;
    return a;
}

/// Patient-level records of the network and the linear reference on `split`;
/// the stroke-type records carry the static-threshold decisions.
inline Evaluation evaluate_split(const Cohort& c, const model::ModelBundle& b, Split split,
                                 const dqn::Policy* policy = nullptr,
                                 const dqn::Thresholds& static_tau = dqn::uniform_thresholds())
{
    Evaluation ev;
    ev.split = split;
    const auto outs = run_split(c, b, split);
    for (Task t : model::kTasks) {
        if (!b.models.count(t)) continue;
        if (t == Task::StrokeType) {
            const auto stream = threshold_stream(outs);
            ev.records[t] = dqn::patient_records(stream, dqn::static_decisions(stream, static_tau));
            if (policy) ev.adaptive = compare_thresholds(stream, static_tau, *policy);
        } else {
            ev.records[t] = patient_records(outs, t);
        }
        const auto base = fit_baseline(task_samples(c, Split::Train, t, b.standardizer), model::n_classes(t));
        std::map<std::string, std::pair<int, std::vector<std::vector<double>>>> by_patient;
        for (const auto& s : task_samples(c, split, t, b.standardizer)) {
            auto& slot = by_patient[s.patient_id];
            slot.first = s.label;
            slot.second.push_back(base.probs(s.features));
        }
        for (const auto& [pid, v] : by_patient) {
            const auto p = model::predict_patient(v.second);
            ev.baseline[t].push_back({pid, v.first, p.label, p.probs, false});
        }
    }
    return ev;
}

struct ReportOptions {
    std::size_t bootstrap = 2000;
    std::uint64_t seed = 0;
    std::size_t ece_bins = 15;
};

namespace detail {

inline ordered_json ci_json(const stats::BootstrapCI& ci)
{
    return {{"point", ci.point}, {"lo", ci.lo}, {"hi", ci.hi}};
}

inline std::vector<double> flat_probs(std::span<const stats::PredictionRecord> recs)
{
    std::vector<double> out;
    for (const auto& r : recs) out.insert(out.end(), r.probs.begin(), r.probs.end());
    return out;
}

inline std::optional<double> auc_of(std::span<const stats::PredictionRecord> recs, std::size_t k, stats::AucAggregation agg)
{
    const auto [truth, pred] = stats::labels_of(recs);
    for (std::size_t c = 0; c < k; ++c)
        if (std::find(truth.begin(), truth.end(), static_cast<int>(c)) == truth.end()) return std::nullopt;
    return stats::roc_auc(flat_probs(recs), k, truth, agg);
}

/// Score used for the AUC comparison: class 1 for binary tasks, hemorrhagic
/// versus the rest for stroke type.
inline std::vector<double> comparison_score(std::span<const stats::PredictionRecord> recs, Task t)
{
    std::vector<double> s;
    const std::size_t col = t == Task::StrokeType ? static_cast<std::size_t>(StrokeType::Hemorrhagic) : 1;
    for (const auto& r : recs) s.push_back(r.probs.at(col));
    return s;
}

inline std::vector<int> comparison_truth(std::span<const stats::PredictionRecord> recs, Task t)
{
    std::vector<int> y;
    const int pos = t == Task::StrokeType ? static_cast<int>(StrokeType::Hemorrhagic) : 1;
    for (const auto& r : recs) y.push_back(r.truth == pos);
    return y;
}

/// McNemar on per-patient correctness; b counts patients only `a` gets right.
inline ordered_json paired_mcnemar(std::span<const stats::PredictionRecord> a, std::span<const stats::PredictionRecord> b)
{
    if (a.size() != b.size()) fail(ErrorKind::InvalidArgument, "paired test: record sets differ in size");
    std::size_t nb = 0, nc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].patient_id != b[i].patient_id) fail(ErrorKind::InvalidArgument, "paired test: patients not aligned");
        const bool ok_a = a[i].pred == a[i].truth, ok_b = b[i].pred == b[i].truth;
        nb += ok_a && !ok_b;
        nc += !ok_a && ok_b;
    }
    const auto r = stats::mcnemar(nb, nc);
    return {{"b", nb}, {"c", nc}, {"exact", r.exact}, {"p", r.p_value}, {"q", nullptr}};
}

} // namespace detail

/// Report JSON. Key order is fixed and macro-F1, the primary endpoint, comes
/// first; every p-value gets a Benjamini-Hochberg q-value over the whole report.
inline ordered_json report_json(const Evaluation& ev, const ReportOptions& opt = {})
{
    using stats::PredictionRecord;
    using Recs = std::span<const PredictionRecord>;
    ordered_json j;
    j["primary_endpoint"] = "macro_f1";
    j["macro_f1"] = ordered_json::object();
    for (const auto& [t, recs] : ev.records) j["macro_f1"][model::to_string(t)] = stats::macro_f1(recs, model::n_classes(t));
    j["split"] = to_string(ev.split);
    j["bootstrap"] = {{"resamples", opt.bootstrap}, {"level", 0.95}, {"seed", opt.seed}};

    std::vector<double> p_values;
    j["tasks"] = ordered_json::object();
    for (const auto& [t, recs] : ev.records) {
        const std::size_t k = model::n_classes(t);
        const auto seed = [&](std::uint64_t m) { return derive_seed(opt.seed, static_cast<std::uint64_t>(t) + 1, m); };
        auto ci = [&](const stats::Metric& m, std::uint64_t tag) { return detail::ci_json(stats::bootstrap_ci(recs, m, opt.bootstrap, seed(tag))); };
        ordered_json tj;
        tj["macro_f1"] = ci([k](Recs r) { return std::optional(stats::macro_f1(r, k)); }, 1);
        tj["accuracy"] = ci([](Recs r) { return std::optional(stats::accuracy(r)); }, 2);
        tj["per_class_f1"] = ordered_json::object();
        const auto [truth, pred] = stats::labels_of(recs);
        const auto full = stats::f1_report(truth, pred, k);
        for (std::size_t c = 0; c < k; ++c) {
            const auto name = model::class_name(t, static_cast<int>(c));
            if (!full.per_class[c]) {
                tj["per_class_f1"][name] = nullptr;
                continue;
            }
            tj["per_class_f1"][name] = ci(
                [k, c](Recs r) {
                    const auto [tt, pp] = stats::labels_of(r);
                    return stats::f1_report(tt, pp, k).per_class[c];
                },
                10 + c);
        }
        const bool auc_defined = detail::auc_of(recs, k, stats::AucAggregation::OvrMacro).has_value();
        for (auto [key, agg, tag] : {std::tuple{"auc_macro", stats::AucAggregation::OvrMacro, 3},
                                     std::tuple{"auc_micro", stats::AucAggregation::OvrMicro, 4}}) {
            if (!auc_defined) {
                tj[key] = nullptr;
                continue;
            }
            tj[key] = ci([k, agg](Recs r) { return detail::auc_of(r, k, agg); }, static_cast<std::uint64_t>(tag));
        }
        tj["ece"] = ci([b = opt.ece_bins](Recs r) { return std::optional(stats::ece(r, b).ece); }, 5);
        tj["n_patients"] = recs.size();

        ordered_json tests;
        const auto& base = ev.baseline.at(t);
        tj["baseline"] = {{"model", "linear_band_power"}, {"macro_f1", stats::macro_f1(base, k)}, {"accuracy", stats::accuracy(base)}};
        tests["mcnemar_vs_baseline"] = detail::paired_mcnemar(recs, base);
        p_values.push_back(tests["mcnemar_vs_baseline"]["p"].get<double>());
        const auto y = detail::comparison_truth(recs, t);
        const bool both = std::count(y.begin(), y.end(), 1) >= 2 && std::count(y.begin(), y.end(), 0) >= 2;
        if (both) {
            const auto dl = stats::delong(detail::comparison_score(recs, t), detail::comparison_score(base, t), y);
            tests["delong_vs_baseline"] = {{"score", t == Task::StrokeType ? "hemorrhagic_vs_rest" : "class_1"},
                                           {"auc_model", dl.auc_a}, {"auc_baseline", dl.auc_b}, {"z", dl.z},
                                           {"p", dl.p_value}, {"q", nullptr}};
            p_values.push_back(dl.p_value);
        } else {
            tests["delong_vs_baseline"] = nullptr;
        }
        tj["tests"] = tests;
        j["tasks"][model::to_string(t)] = tj;
    }

    if (ev.adaptive) {
        const auto& a = *ev.adaptive;
        auto side = [&](const std::vector<PredictionRecord>& r, double acc, double e) {
            return ordered_json{{"macro_f1", stats::macro_f1(r, dqn::kClasses)},
                                {"patient_accuracy", stats::accuracy(r)},
                                {"segment_accuracy", acc},
                                {"segment_ece", e}};
        };
        ordered_json aj;
        aj["static"] = side(a.static_records, a.static_accuracy, a.static_ece);
        aj["static"]["tau"] = a.static_tau;
        aj["dqn"] = side(a.dqn_records, a.dqn_accuracy, a.dqn_ece);
        aj["dqn"]["tau_start"] = a.policy_tau;
        aj["dqn"]["tau_end"] = a.final_tau;
        aj["mcnemar_static_vs_dqn"] = detail::paired_mcnemar(a.static_records, a.dqn_records);
        p_values.push_back(aj["mcnemar_static_vs_dqn"]["p"].get<double>());
        j["adaptive"] = aj;
    }

    // Fill q-values in the order the p-values were produced.
    const auto fdr = stats::benjamini_hochberg(p_values);
    std::size_t qi = 0;
    for (auto& [name, tj] : j["tasks"].items()) {
        (void)name;
        auto& tests = tj["tests"];
        tests["mcnemar_vs_baseline"]["q"] = fdr.q_values[qi++];
        if (!tests["delong_vs_baseline"].is_null()) tests["delong_vs_baseline"]["q"] = fdr.q_values[qi++];
    }
    if (j.contains("adaptive")) j["adaptive"]["mcnemar_static_vs_dqn"]["q"] = fdr.q_values[qi++];
    return j;
}

/// Patient-level predictions, one row per patient and task.
inline std::string predictions_csv(const Evaluation& ev)
{
    std::ostringstream os;
    os.precision(10);
    os << "patient_id,task,truth,pred,p0,p1,p2,low_conf\n";
    auto rows = [&](const std::string& task, const std::vector<stats::PredictionRecord>& recs) {
        for (const auto& r : recs) {
            os << r.patient_id << ',' << task << ',' << r.truth << ',' << r.pred;
            for (std::size_t c = 0; c < 3; ++c) {
                os << ',';
                if (c < r.probs.size()) os << r.probs[c];
            }
            os << ',' << (r.low_confidence ? 1 : 0) << '\n';
        }
    };
    for (const auto& [t, recs] : ev.records) rows(model::to_string(t), recs);
    if (ev.adaptive) rows("stroke_type_dqn", ev.adaptive->dqn_records);
    return os.str();
}

// ---------------------------------------------------------------------------
// Single-recording prediction, shared by the HTTP API and library callers

enum class Mode { Static, Dqn };

inline const char* to_string(Mode m) { return m == Mode::Static ? "static" : "dqn"; }

inline Mode parse_mode(std::string_view s)
{
    if (s == "static") return Mode::Static;
    if (s == "dqn") return Mode::Dqn;
    fail(ErrorKind::InvalidArgument, "mode must be 'static' or 'dqn'");
}

/// Segment and patient-level predictions for one recording. Only the
/// stroke-type head is thresholded; the mode changes thresholds and labels,
/// never probabilities.
inline ordered_json predict_json(const model::ModelBundle& b, const dsp::RecordingFeatures& f, Mode mode,
                                 const dqn::Thresholds& static_tau, const dqn::Policy* policy)
{
    if (mode == Mode::Dqn && !policy) fail(ErrorKind::Conflict, "no threshold policy is active");
    const auto out = run_models(b, f);
    ordered_json j;
    j["recording_id"] = f.recording_id;
    j["patient_id"] = f.patient_id;
    j["mode"] = to_string(mode);
    j["tasks"] = ordered_json::object();
    for (const auto& [task, t] : out.tasks) {
        std::vector<dqn::Decision> decisions;
        std::vector<dqn::Thresholds> taus;
        if (task == Task::StrokeType) {
            const std::vector<RecordingOutput> one = {out};
            const auto stream = threshold_stream(one);
            if (mode == Mode::Static) {
                decisions = dqn::static_decisions(stream, static_tau);
                taus.assign(stream.size(), static_tau);
            } else {
                const auto ep = dqn::evaluate_policy(*policy, stream);
                decisions = ep.decisions;
                taus = ep.taus;
            }
        } else {
            for (const auto& s : t.segments) decisions.push_back({s.label, false});
        }
        std::vector<int> labels;
        std::vector<std::vector<double>> probs;
        bool low = false;
        ordered_json segs = ordered_json::array();
        for (std::size_t i = 0; i < t.segments.size(); ++i) {
            labels.push_back(decisions[i].label);
            probs.push_back(t.segments[i].probs);
            low = low || decisions[i].low_confidence;
            ordered_json sj = {{"index", f.segments[i].index},
                               {"label", model::class_name(task, decisions[i].label)},
                               {"probs", t.segments[i].probs},
                               {"low_confidence", decisions[i].low_confidence}};
            if (task == Task::StrokeType) sj["thresholds"] = taus[i];
            segs.push_back(std::move(sj));
        }
        const auto p = model::aggregate_votes(labels, probs);
        ordered_json tj = {{"label", model::class_name(task, p.label)},
                           {"label_index", p.label},
                           {"probs", p.probs},
                           {"low_confidence", low},
                           {"votes", p.votes},
                           {"segments", segs}};
        j["tasks"][model::to_string(task)] = tj;
    }
    if (mode == Mode::Static) {
        j["thresholds"] = static_tau;
    } else {
        j["thresholds"] = policy->tau;
    }
    return j;
}

} // namespace strokesight::pipeline
