#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "strokesight/pipeline.hpp"
#include "test_util.hpp"

using namespace strokesight;
using namespace strokesight::pipeline;
using strokesight::testing::TempDir;

namespace {

std::map<std::string, std::string> read_tree(const fs::path& root)
{
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
    return files;
}

// A small trained cohort shared by the report tests: 12 patients, a few
// epochs and a two-episode policy keep it around a second.
struct Trained {
    TempDir dir{"pipeline"};
    Layout layout{dir.path()};
    Cohort cohort;
    TrainedBundle trained;
    dqn::Policy policy;

    Trained()
    {
        synthesize(layout, {12, 5});
        preprocess_cohort(layout, layout, {});
        cohort = load_cohort(layout);
        model::TrainConfig tc;
        tc.max_epochs = 3;
        tc.patience = 2;
        tc.seed = 5;
        trained = train_bundle(cohort, tc);
        dqn::AgentConfig ac;
        ac.lr = 1e-3;
        ac.seed = 5;
        policy = dqn::train_agent(threshold_stream(run_split(cohort, trained.bundle, Split::Validation)), {}, ac, 2).policy;
    }
};

const Trained& shared()
{
    static const Trained t;
    return t;
}

double binom_two_sided(std::size_t b, std::size_t c)
{
    const std::size_t n = b + c, k = std::min(b, c);
    double tail = 0.0, coef = 1.0;
    for (std::size_t i = 0; i <= k; ++i) {
        if (i > 0) coef = coef * static_cast<double>(n - i + 1) / static_cast<double>(i);
        tail += coef;
    }
    return std::min(1.0, 2.0 * tail / std::pow(2.0, static_cast<double>(n)));
}

void expect_ci(const nlohmann::ordered_json& ci, const std::string& where)
{
    if (ci.is_null()) return;
    const double lo = ci.at("lo"), point = ci.at("point"), hi = ci.at("hi");
    EXPECT_LE(lo, point + 1e-12) << where;
    EXPECT_LE(point, hi + 1e-12) << where;
    EXPECT_GE(lo, 0.0) << where;
}

} // namespace

TEST(ClassCounts, BalancedAndExhaustive)
{
    for (std::size_t n = 9; n <= 200; ++n) {
        const auto c = class_counts(n);
        const auto h = c.at(StrokeType::Healthy), i = c.at(StrokeType::Ischemic), m = c.at(StrokeType::Hemorrhagic);
        EXPECT_EQ(h + i + m, n);
        EXPECT_GE(h, i);
        EXPECT_GE(i, m);
        EXPECT_LE(h - m, 1u);
    }
}

TEST(Synthesize, SameSeedIsByteIdentical)
{
    TempDir a("synth_a"), b("synth_b"), c("synth_c");
    synthesize({a.path()}, {9, 3});
    synthesize({b.path()}, {9, 3});
    synthesize({c.path()}, {9, 4});
    const auto ta = read_tree(a.path());
    EXPECT_EQ(ta.size(), 9u * 2 + 1);
    EXPECT_EQ(ta, read_tree(b.path()));
    EXPECT_NE(ta, read_tree(c.path()));
}

TEST(Synthesize, EverySplitHoldsEveryClass)
{
    TempDir d("synth_split");
    const auto m = synthesize({d.path()}, {15, 8});
    std::set<std::pair<Split, StrokeType>> seen;
    std::set<std::string> ids;
    for (const auto& e : m.entries) {
        seen.insert({e.split, e.stroke_type});
        EXPECT_TRUE(ids.insert(e.patient_id).second);
    }
    EXPECT_EQ(seen.size(), 9u);
}

TEST(Synthesize, TooFewPatientsIsInfeasible)
{
    TempDir d("synth_small");
    try {
        synthesize({d.path()}, {8, 0});
        FAIL() << "expected Infeasible";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Infeasible);
    }
}

TEST(Preprocess, RejectsImpossibleOptions)
{
    for (const PreprocessOptions o : {PreprocessOptions{0.5, true, 0.0}, PreprocessOptions{0.5, true, 61.0},
                                      PreprocessOptions{0.0, true, 4.0}}) {
        try {
            preprocess_config(o);
            FAIL() << "expected Infeasible";
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::Infeasible);
        }
    }
}

TEST(Preprocess, MissingCacheIsNotFound)
{
    TempDir d("nocache");
    synthesize({d.path()}, {9, 1});
    try {
        load_cohort({d.path()});
        FAIL() << "expected NotFound";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NotFound);
    }
}

TEST(TaskSamples, BinaryTasksUseStrokePatientsOnly)
{
    const auto& t = shared();
    for (Task task : {Task::Lateralization, Task::Severity})
        for (const auto& s : task_samples(t.cohort, Split::Train, task, t.trained.bundle.standardizer))
            for (const auto& e : t.cohort.manifest.entries)
                if (e.patient_id == s.patient_id) {
                    EXPECT_NE(e.stroke_type, StrokeType::Healthy);
                }
    std::set<std::string> all;
    for (const auto& s : task_samples(t.cohort, Split::Train, Task::StrokeType, t.trained.bundle.standardizer)) all.insert(s.patient_id);
    EXPECT_EQ(all.size(), t.cohort.manifest.count(Split::Train));
}

TEST(Baseline, ConvergesToPenalizedOptimum)
{
    // Stationarity of the L2-penalized softmax loss, gradient computed here.
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<model::Sample> data;
    for (int i = 0; i < 60; ++i) {
        const int y = i % 3;
        data.push_back({"p", {n(rng) + y, n(rng) - y, n(rng)}, y});
    }
    const double l2 = 1e-2;
    const auto m = fit_baseline(data, 3, l2, 0.5, 20000);
    double gnorm = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> g(4, 0.0);
        for (const auto& s : data) {
            const auto p = m.probs(s.features);
            const double d = p[c] - (s.label == static_cast<int>(c));
            for (std::size_t i = 0; i < 3; ++i) g[i] += d * s.features[i] / 60.0;
            g[3] += d / 60.0;
        }
        for (std::size_t i = 0; i < 3; ++i) g[i] += l2 * m.W[c * 3 + i];
        for (double v : g) gnorm += v * v;
    }
    EXPECT_LT(std::sqrt(gnorm), 1e-8);
    for (const auto& s : data) {
        const auto p = m.probs(s.features);
        EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
    }
}

TEST(Report, SchemaAndPrimaryEndpointFirst)
{
    const auto& t = shared();
    const auto ev = evaluate_split(t.cohort, t.trained.bundle, Split::Test, &t.policy);
    const auto j = report_json(ev, {200, 1, 15});
    auto it = j.begin();
    EXPECT_EQ(it.key(), "primary_endpoint");
    EXPECT_EQ(*it, "macro_f1");
    EXPECT_EQ((++it).key(), "macro_f1");
    std::size_t stroke_patients = 0, test_patients = 0;
    for (const auto& e : t.cohort.manifest.entries)
        if (e.split == Split::Test) {
            ++test_patients;
            stroke_patients += e.stroke_type != StrokeType::Healthy;
        }
    for (Task task : model::kTasks) {
        const auto& tj = j.at("tasks").at(model::to_string(task));
        EXPECT_EQ(tj.begin().key(), "macro_f1");
        EXPECT_DOUBLE_EQ(j.at("macro_f1").at(model::to_string(task)).get<double>(), tj.at("macro_f1").at("point").get<double>());
        for (const auto* key : {"macro_f1", "accuracy", "auc_macro", "auc_micro", "ece"}) expect_ci(tj.at(key), key);
        for (const auto& [name, ci] : tj.at("per_class_f1").items()) expect_ci(ci, name);
        EXPECT_EQ(tj.at("n_patients").get<std::size_t>(), task == Task::StrokeType ? test_patients : stroke_patients);
    }
    ASSERT_TRUE(j.contains("adaptive"));
    EXPECT_EQ(j.at("adaptive").at("static").at("tau"), nlohmann::ordered_json(dqn::uniform_thresholds()));
}

TEST(Report, QValuesMatchBruteForceBH)
{
    const auto& t = shared();
    const auto ev = evaluate_split(t.cohort, t.trained.bundle, Split::Test, &t.policy);
    const auto j = report_json(ev, {100, 2, 15});
    std::vector<std::pair<double, double>> pq;
    for (const auto& [name, tj] : j.at("tasks").items()) {
        const auto& tests = tj.at("tests");
        pq.emplace_back(tests.at("mcnemar_vs_baseline").at("p"), tests.at("mcnemar_vs_baseline").at("q"));
        if (!tests.at("delong_vs_baseline").is_null())
            pq.emplace_back(tests.at("delong_vs_baseline").at("p"), tests.at("delong_vs_baseline").at("q"));
    }
    pq.emplace_back(j.at("adaptive").at("mcnemar_static_vs_dqn").at("p"), j.at("adaptive").at("mcnemar_static_vs_dqn").at("q"));
    const double m = static_cast<double>(pq.size());
    for (const auto& [p, q] : pq) {
        // q_i = min over p_j >= p_i of p_j * m / rank(p_j), capped at 1.
        double oracle = 1.0;
        for (const auto& [pj, qj] : pq) {
            if (pj < p) continue;
            double rank = 0.0;
            for (const auto& [pk, qk] : pq) rank += pk <= pj;
            oracle = std::min(oracle, pj * m / rank);
        }
        EXPECT_NEAR(q, oracle, 1e-12);
        EXPECT_GE(q, p - 1e-15);
    }
}

TEST(Report, McNemarCountsAndExactP)
{
    const auto& t = shared();
    const auto ev = evaluate_split(t.cohort, t.trained.bundle, Split::Test);
    const auto j = report_json(ev, {50, 0, 15});
    for (Task task : model::kTasks) {
        const auto& a = ev.records.at(task);
        const auto& b = ev.baseline.at(task);
        std::size_t nb = 0, nc = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            nb += a[i].pred == a[i].truth && b[i].pred != b[i].truth;
            nc += a[i].pred != a[i].truth && b[i].pred == b[i].truth;
        }
        const auto& mc = j.at("tasks").at(model::to_string(task)).at("tests").at("mcnemar_vs_baseline");
        EXPECT_EQ(mc.at("b").get<std::size_t>(), nb);
        EXPECT_EQ(mc.at("c").get<std::size_t>(), nc);
        if (mc.at("exact").get<bool>()) {
            EXPECT_NEAR(mc.at("p").get<double>(), binom_two_sided(nb, nc), 1e-12);
        }
    }
    EXPECT_FALSE(j.contains("adaptive"));
}

TEST(Report, DeterministicForFixedSeed)
{
    const auto& t = shared();
    const auto ev = evaluate_split(t.cohort, t.trained.bundle, Split::Test, &t.policy);
    EXPECT_EQ(report_json(ev, {200, 9, 15}).dump(), report_json(ev, {200, 9, 15}).dump());
    const auto ev2 = evaluate_split(t.cohort, t.trained.bundle, Split::Test, &t.policy);
    EXPECT_EQ(report_json(ev, {200, 9, 15}).dump(), report_json(ev2, {200, 9, 15}).dump());
}

TEST(Report, StaticRecordsFollowThresholds)
{
    // With the strictest thresholds every segment falls back to argmax.
    const auto& t = shared();
    const auto outs = run_split(t.cohort, t.trained.bundle, Split::Test);
    const auto stream = threshold_stream(outs);
    const auto ev = evaluate_split(t.cohort, t.trained.bundle, Split::Test, nullptr, {0.9, 0.9, 0.9});
    const auto expect = dqn::patient_records(stream, dqn::static_decisions(stream, {0.9, 0.9, 0.9}));
    ASSERT_EQ(ev.records.at(Task::StrokeType).size(), expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) {
        EXPECT_EQ(ev.records.at(Task::StrokeType)[i].patient_id, expect[i].patient_id);
        EXPECT_EQ(ev.records.at(Task::StrokeType)[i].pred, expect[i].pred);
    }
}

TEST(PredictionsCsv, OneRowPerPatientAndTask)
{
    const auto& t = shared();
    const auto ev = evaluate_split(t.cohort, t.trained.bundle, Split::Test, &t.policy);
    std::istringstream in(predictions_csv(ev));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "patient_id,task,truth,pred,p0,p1,p2,low_conf");
    std::size_t rows = 0, expected = ev.adaptive->dqn_records.size();
    for (const auto& [task, recs] : ev.records) expected += recs.size();
    while (std::getline(in, line)) {
        ++rows;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        if (line.back() == ',') cells.emplace_back();
        ASSERT_EQ(cells.size(), 8u) << line;
        double sum = 0.0;
        for (std::size_t k = 4; k < 7; ++k)
            if (!cells[k].empty()) sum += std::stod(cells[k]);
        EXPECT_NEAR(sum, 1.0, 1e-8) << line;
    }
    EXPECT_EQ(rows, expected);
}

TEST(History, OneRowPerEpoch)
{
    const auto& t = shared();
    for (const auto& [task, h] : t.trained.history) {
        const auto& meta = t.trained.bundle.meta.at(task);
        EXPECT_EQ(h.size(), meta.epochs_run);
        EXPECT_GE(meta.best_epoch, 1u);
        EXPECT_LE(meta.best_epoch, meta.epochs_run);
        double best = 0.0;
        for (const auto& r : h) best = std::max(best, r.val_macro_f1);
        EXPECT_DOUBLE_EQ(meta.best_val_f1, best);
    }
}

TEST(PredictJson, DqnModeNeedsPolicy)
{
    const auto& t = shared();
    try {
        predict_json(t.trained.bundle, t.cohort.features.front(), Mode::Dqn, dqn::uniform_thresholds(), nullptr);
        FAIL() << "expected Conflict";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Conflict);
    }
    // The first segment sees the policy's starting point moved by at most one action.
    const auto j = predict_json(t.trained.bundle, t.cohort.features.front(), Mode::Dqn, dqn::uniform_thresholds(), &t.policy);
    const auto first = j.at("tasks").at("stroke_type").at("segments").at(0).at("thresholds").get<dqn::Thresholds>();
    int moved = 0;
    for (std::size_t c = 0; c < dqn::kClasses; ++c) {
        EXPECT_LE(std::abs(first[c] - t.policy.tau[c]), dqn::kDelta + 1e-12);
        moved += std::abs(first[c] - t.policy.tau[c]) > 1e-12;
    }
    EXPECT_LE(moved, 1);
}
