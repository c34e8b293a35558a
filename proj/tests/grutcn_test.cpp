#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "strokesight/grutcn.hpp"
#include "test_util.hpp"

using namespace strokesight;
using namespace strokesight::model;

namespace {

Architecture small_arch()
{
    Architecture a;
    a.input_dim = 3;
    a.seq_len = 8;
    a.hidden = 5;
    return a;
}

std::vector<double> random_input(std::size_t n, std::mt19937_64& rng)
{
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> x(n);
    for (auto& v : x) v = nd(rng);
    return x;
}

void zero_all(TaskModel& m)
{
    for (auto* p : m.parameters()) std::fill(p->value.begin(), p->value.end(), 0.0);
}

// Two classes whose features differ by a mean shift in a few cells.
std::vector<Sample> separable(std::size_t n, std::uint64_t seed, Task task = Task::StrokeType)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<Sample> out;
    const int k = static_cast<int>(n_classes(task));
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.patient_id = "P" + std::to_string(i);
        s.label = static_cast<int>(i % static_cast<std::size_t>(k));
        s.features.resize(320);
        for (auto& v : s.features) v = nd(rng);
        // Class c raises band c over the first 16 channels.
        for (std::size_t ch = 0; ch < 16; ++ch) s.features[ch * 10 + static_cast<std::size_t>(s.label)] += 2.5;
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace

TEST(GruTcn, ZeroParametersGiveUniformTypeProbabilities)
{
    auto m = make_model(Task::StrokeType, {}, 1);
    zero_all(m);
    std::mt19937_64 rng(2);
    const auto r = infer_one(m, random_input(320, rng));
    for (double p : r.probs) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
    auto b = make_model(Task::Severity, {}, 1);
    zero_all(b);
    const auto rb = infer_one(b, random_input(320, rng));
    EXPECT_EQ(rb.probs[1], 0.5);
}

TEST(GruTcn, ZeroWeightCellHalvesState)
{
    auto m = make_model(Task::StrokeType, small_arch(), 3);
    zero_all(m);
    Graph g(false);
    const auto p = bind(g, m.gru1);
    auto x = g.constant({2, 3}, {1, 2, 3, -4, 5, 6});
    auto h = g.constant({2, 5}, {1, -2, 0.5, 4, -8, 0.1, 0.2, 0.3, 0.4, 0.5});
    auto h1 = gru_cell(p, x, h);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(h1.value()[i], 0.5 * h.value()[i]);
}

TEST(GruTcn, StateIsConvexCombination)
{
    // h' = (1-z) h + z h~ with z in (0,1), |h~| < 1.
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 100; ++rep) {
        auto m = make_model(Task::StrokeType, small_arch(), static_cast<std::uint64_t>(rep));
        for (auto* par : m.parameters())
            for (auto& v : par->value) v *= 3.0;
        Graph g(false);
        const auto p = bind(g, m.gru1);
        auto h = g.constant({1, 5}, random_input(5, rng));
        for (int t = 0; t < 10; ++t) {
            auto x = g.constant({1, 3}, random_input(3, rng));
            double prev = 0;
            for (double v : h.value()) prev = std::max(prev, std::abs(v));
            h = gru_cell(p, x, h);
            double cur = 0;
            for (double v : h.value()) cur = std::max(cur, std::abs(v));
            EXPECT_LE(cur, std::max(prev, 1.0) + 1e-15);
        }
    }
}

TEST(GruTcn, OutputShapesAndSimplex)
{
    auto m = make_model(Task::StrokeType, {}, 5);
    std::mt19937_64 rng(5);
    const auto r = infer(m, random_input(3 * 320, rng), 3);
    ASSERT_EQ(r.size(), 3u);
    for (const auto& s : r) {
        EXPECT_EQ(s.embedding.size(), 64u);
        ASSERT_EQ(s.probs.size(), 3u);
        EXPECT_NEAR(s.probs[0] + s.probs[1] + s.probs[2], 1.0, 1e-12);
    }
}

TEST(GruTcn, BandPermutationChangesOutput)
{
    auto m = make_model(Task::StrokeType, {}, 6);
    std::mt19937_64 rng(6);
    const auto x = random_input(320, rng);
    auto perm = x;
    for (std::size_t ch = 0; ch < 32; ++ch) std::reverse(perm.begin() + static_cast<long>(ch * 10), perm.begin() + static_cast<long>(ch * 10 + 10));
    const auto a = infer_one(m, x), b = infer_one(m, perm);
    double diff = 0;
    for (std::size_t k = 0; k < 3; ++k) diff += std::abs(a.probs[k] - b.probs[k]);
    EXPECT_GT(diff, 1e-6);
}

TEST(GruTcn, WrongInputShapeRejected)
{
    auto m = make_model(Task::StrokeType, {}, 1);
    std::vector<double> x(310, 0.0);
    EXPECT_THROW(infer(m, x, 1), Error);
}

TEST(GruTcn, BatchedAndSingleInferenceAgree)
{
    auto m = make_model(Task::Lateralization, {}, 8);
    std::mt19937_64 rng(8);
    const auto x = random_input(4 * 320, rng);
    const auto batch = infer(m, x, 4);
    for (std::size_t i = 0; i < 4; ++i) {
        const auto one = infer_one(m, std::span<const double>(x).subspan(i * 320, 320));
        for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(one.probs[k], batch[i].probs[k], 1e-13);
    }
}

// ---------------------------------------------------------------------------
// Gradient checks against central differences

namespace {

ad::GradCheckReport check_model(Task task, std::uint64_t seed)
{
    const auto arch = small_arch();
    auto m = make_model(task, arch, seed);
    std::mt19937_64 rng(seed + 1000);
    const auto x = random_input(4 * arch.seq_len * arch.input_dim, rng);
    std::vector<int> y(4);
    for (auto& v : y) v = static_cast<int>(rng() % n_classes(task));
    auto build = [&](Graph& g) {
        auto out = forward(g, m, g.constant({4, arch.seq_len, arch.input_dim}, x));
        return task_loss(out.logits, task, y);
    };
    return ad::grad_check(build, m.parameters());
}

} // namespace

TEST(GruTcnGradients, FullModelAllParameters)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto rep = check_model(Task::StrokeType, seed);
        EXPECT_LT(rep.max_rel_error, 1e-4) << seed;
        EXPECT_EQ(rep.checked + rep.skipped_kinks, make_model(Task::StrokeType, small_arch(), 0).n_parameters());
    }
    const auto bin = check_model(Task::Severity, 11);
    EXPECT_LT(bin.max_rel_error, 1e-4);
}

TEST(GruTcnGradients, GruCellAlone)
{
    auto m = make_model(Task::StrokeType, small_arch(), 21);
    std::mt19937_64 rng(21);
    const auto x = random_input(3 * 3, rng), h0 = random_input(3 * 5, rng);
    auto build = [&](Graph& g) {
        const auto p = bind(g, m.gru1);
        auto h = gru_cell(p, g.constant({3, 3}, x), g.constant({3, 5}, h0));
        h = gru_cell(p, g.constant({3, 3}, x), h);
        return ad::sum(ad::mul(h, h));
    };
    const auto rep = ad::grad_check(build, {&m.gru1.W_z, &m.gru1.W_r, &m.gru1.W_h, &m.gru1.U_z, &m.gru1.U_r,
                                            &m.gru1.U_h, &m.gru1.b_z, &m.gru1.b_r, &m.gru1.b_h});
    EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(GruTcnGradients, TcnResidualBlockAlone)
{
    auto m = make_model(Task::StrokeType, small_arch(), 22);
    std::mt19937_64 rng(22);
    const auto x = random_input(2 * 8 * 5, rng);
    auto& blk = m.tcn[1];
    auto build = [&](Graph& g) { return ad::sum(ad::tanh(tcn_block(g, blk, g.constant({2, 8, 5}, x)))); };
    const auto rep = ad::grad_check(build, {&blk.w1, &blk.b1, &blk.w2, &blk.b2});
    EXPECT_LT(rep.max_rel_error, 1e-4);
    EXPECT_GT(rep.checked, 0u);
}

// ---------------------------------------------------------------------------
// Patient aggregation

TEST(PredictPatient, MajorityVote)
{
    const std::vector<std::vector<double>> s = {{0.6, 0.3, 0.1}, {0.5, 0.4, 0.1}, {0.1, 0.8, 0.1}};
    EXPECT_EQ(predict_patient(s).label, 0);
}

TEST(PredictPatient, TieBrokenByMeanProbability)
{
    const std::vector<std::vector<double>> s = {{0.9, 0.1}, {0.3, 0.7}};  // mean 0.6 / 0.4
    const auto p = predict_patient(s);
    EXPECT_EQ(p.label, 0);
    EXPECT_NEAR(p.probs[0], 0.6, 1e-15);
}

TEST(PredictPatient, SingleSegment)
{
    const std::vector<std::vector<double>> s = {{0.2, 0.3, 0.5}};
    EXPECT_EQ(predict_patient(s).label, 2);
}

// ---------------------------------------------------------------------------
// Training

TEST(TrainTask, SeparableFeaturesReachLowLoss)
{
    const auto train = separable(48, 1), val = separable(24, 2);
    TrainConfig cfg;
    cfg.max_epochs = 40;
    cfg.patience = 40;
    cfg.seed = 3;
    const auto r = train_task(Task::StrokeType, train, val, cfg);
    double best_loss = 1e9;
    for (const auto& h : r.history) best_loss = std::min(best_loss, h.train_loss);
    EXPECT_LE(best_loss, 0.05);
    EXPECT_GE(r.best_val_f1, 0.9);
}

TEST(TrainTask, PatienceOneWithFrozenScoreStopsAfterTwoEpochs)
{
    const auto train = separable(8, 4), val = separable(6, 5);
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.weight_decay = 0.0;
    cfg.patience = 1;
    const auto r = train_task(Task::StrokeType, train, val, cfg);
    EXPECT_EQ(r.epochs_run, 2u);
    EXPECT_EQ(r.best_epoch, 1u);
}

TEST(TrainTask, IdenticalSeedsGiveIdenticalHistory)
{
    const auto train = separable(16, 6, Task::Lateralization), val = separable(8, 7, Task::Lateralization);
    TrainConfig cfg;
    cfg.max_epochs = 4;
    cfg.seed = 9;
    const auto a = train_task(Task::Lateralization, train, val, cfg);
    const auto b = train_task(Task::Lateralization, train, val, cfg);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
        EXPECT_EQ(a.history[i].val_macro_f1, b.history[i].val_macro_f1);
    }
}

TEST(TrainTask, RestoredModelScoresTheBestEpoch)
{
    const auto train = separable(24, 8), val = separable(12, 9);
    TrainConfig cfg;
    cfg.max_epochs = 15;
    cfg.patience = 3;
    cfg.seed = 1;
    const auto r = train_task(Task::StrokeType, train, val, cfg);
    for (const auto& h : r.history) EXPECT_LE(h.val_macro_f1, r.best_val_f1);
    EXPECT_EQ(segment_macro_f1(r.model, val), r.best_val_f1);
    EXPECT_EQ(r.history[r.best_epoch - 1].val_macro_f1, r.best_val_f1);
}

TEST(TrainTask, EmptySplitsAndBadLabelsRejected)
{
    const auto train = separable(4, 1);
    EXPECT_THROW(train_task(Task::StrokeType, train, {}, {}), Error);
    auto bad = train;
    bad[0].label = 2;
    EXPECT_THROW(train_task(Task::Severity, bad, bad, {}), Error);
}

TEST(TrainTask, HistoryCsvHasHeaderAndRows)
{
    std::vector<EpochRecord> h = {{1, 0.5, 0.25}, {2, 0.4, 0.5}};
    const auto csv = history_csv(h);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_macro_f1");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

// ---------------------------------------------------------------------------
// Bundles

TEST(ModelBundle, TasksAreIndependentAndRoundTrip)
{
    ModelBundle b;
    for (Task t : kTasks) b.models[t] = make_model(t, {}, static_cast<std::uint64_t>(t) + 1);
    std::mt19937_64 rng(10);
    const auto x = random_input(320, rng);
    const auto before = infer_one(b.at(Task::StrokeType), x);
    b.models[Task::Lateralization].head_W.value[0] += 1.0;
    b.models[Task::Severity].gru1.W_z.value[3] -= 0.5;
    const auto after = infer_one(b.at(Task::StrokeType), x);
    EXPECT_EQ(before.probs, after.probs);

    strokesight::testing::TempDir dir("bundle");
    b.standardizer.n_channels = 32;
    b.standardizer.n_bands = 10;
    b.standardizer.mean.assign(320, 0.0);
    b.standardizer.std.assign(320, 1.0);
    b.standardizer.id = "std-test";
    save_bundle(b, dir.path());
    const auto loaded = load_bundle(dir.path());
    for (Task t : kTasks) EXPECT_EQ(infer_one(loaded.at(t), x).probs, infer_one(b.at(t), x).probs);
    EXPECT_EQ(loaded.standardizer.id, "std-test");
}

TEST(Latency, SingleSegmentInferenceIsFast)
{
    auto m = make_model(Task::StrokeType, {}, 12);
    std::mt19937_64 rng(12);
    const auto x = random_input(320, rng);
    std::vector<double> ms;
    for (int i = 0; i < 50; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        infer_one(m, x);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    EXPECT_LT(ms[ms.size() / 2], 50.0);
}
