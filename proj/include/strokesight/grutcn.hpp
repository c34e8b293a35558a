#pragma once

// GRU-TCN segment classifier. Input is one segment's feature matrix read as a
// sequence over channels (T = 32 in canonical montage order) of band vectors
// (F = 10). Two stacked GRU layers, two residual dilated-conv blocks over the
// same axis, global average pooling, then a task head.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "strokesight/autodiff.hpp"
#include "strokesight/dsp.hpp"
#include "strokesight/eeg_io.hpp"
#include "strokesight/error.hpp"
#include "strokesight/evalstats.hpp"

namespace strokesight::model {

using ad::Graph;
using ad::Parameter;
using ad::ParamRefs;
using ad::Var;

enum class Task { StrokeType, Lateralization, Severity };

inline constexpr std::array<Task, 3> kTasks = {Task::StrokeType, Task::Lateralization, Task::Severity};

inline const char* to_string(Task t)
{
    switch (t) {
    case Task::StrokeType: return "stroke_type";
    case Task::Lateralization: return "lateralization";
    case Task::Severity: return "severity";
    }
    return "?";
}

inline Task parse_task(std::string_view s)
{
    for (Task t : kTasks)
        if (s == to_string(t)) return t;
    fail(ErrorKind::InvalidArgument, "unknown task '" + std::string(s) + "'");
}

// Number of classes in the task's label space.
inline std::size_t n_classes(Task t) { return t == Task::StrokeType ? 3 : 2; }

// Width of the head: softmax over 3 for stroke type, one sigmoid logit otherwise.
inline std::size_t n_outputs(Task t) { return t == Task::StrokeType ? 3 : 1; }

// Binary tasks only apply to stroke patients.
inline std::optional<int> task_label(Task t, const LabelSet& l)
{
    switch (t) {
    case Task::StrokeType: return static_cast<int>(l.stroke_type);
    case Task::Lateralization:
        if (!l.lateralization) return std::nullopt;
        return static_cast<int>(*l.lateralization);
    case Task::Severity:
        if (!l.severity) return std::nullopt;
        return static_cast<int>(*l.severity);
    }
    return std::nullopt;
}

inline std::string class_name(Task t, int k)
{
    switch (t) {
    case Task::StrokeType: return to_string(static_cast<StrokeType>(k));
    case Task::Lateralization: return to_string(static_cast<Lateralization>(k));
    case Task::Severity: return to_string(static_cast<Severity>(k));
    }
    return "?";
}

struct Architecture {
    std::size_t input_dim = 10;
    std::size_t seq_len = 32;
    std::size_t hidden = 64;
    std::size_t kernel = 3;
    std::vector<std::size_t> dilations = {1, 2};
};

inline nlohmann::json to_json(const Architecture& a)
{
    return {{"input_dim", a.input_dim}, {"seq_len", a.seq_len}, {"hidden", a.hidden}, {"kernel", a.kernel},
            {"dilations", a.dilations}};
}

inline Architecture architecture_from_json(const nlohmann::json& j)
{
    Architecture a;
    a.input_dim = j.at("input_dim").get<std::size_t>();
    a.seq_len = j.at("seq_len").get<std::size_t>();
    a.hidden = j.at("hidden").get<std::size_t>();
    a.kernel = j.at("kernel").get<std::size_t>();
    a.dilations = j.at("dilations").get<std::vector<std::size_t>>();
    return a;
}

struct GruLayer {
    Parameter W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h;
};

struct TcnBlock {
    std::size_t dilation = 1;
    Parameter w1, b1, w2, b2;
};

struct TaskModel {
    Task task = Task::StrokeType;
    Architecture arch;
    GruLayer gru1, gru2;
    std::vector<TcnBlock> tcn;
    Parameter head_W, head_b;

    ParamRefs parameters()
    {
        ParamRefs out;
        for (auto* g : {&gru1, &gru2})
            for (auto* p : {&g->W_z, &g->W_r, &g->W_h, &g->U_z, &g->U_r, &g->U_h, &g->b_z, &g->b_r, &g->b_h}) out.push_back(p);
        for (auto& b : tcn)
            for (auto* p : {&b.w1, &b.b1, &b.w2, &b.b2}) out.push_back(p);
        out.push_back(&head_W);
        out.push_back(&head_b);
        return out;
    }
    std::size_t n_parameters()
    {
        std::size_t n = 0;
        for (auto* p : parameters()) n += p->size();
        return n;
    }
};

namespace detail {

inline GruLayer make_gru(const std::string& prefix, std::size_t in, std::size_t h, std::mt19937_64& rng)
{
    GruLayer g;
    auto mk = [&](const char* name, ad::Shape s, std::size_t fan_in) {
        Parameter p(prefix + "." + name, std::move(s));
        ad::init_uniform(p, fan_in, rng);
        return p;
    };
    g.W_z = mk("W_z", {in, h}, in);
    g.W_r = mk("W_r", {in, h}, in);
    g.W_h = mk("W_h", {in, h}, in);
    g.U_z = mk("U_z", {h, h}, h);
    g.U_r = mk("U_r", {h, h}, h);
    g.U_h = mk("U_h", {h, h}, h);
    g.b_z = mk("b_z", {h}, h);
    g.b_r = mk("b_r", {h}, h);
    g.b_h = mk("b_h", {h}, h);
    return g;
}

} // namespace detail

inline TaskModel make_model(Task task, const Architecture& arch, std::uint64_t seed)
{
    if (arch.input_dim == 0 || arch.seq_len == 0 || arch.hidden == 0 || arch.kernel == 0 || arch.dilations.empty())
        fail(ErrorKind::InvalidArgument, "architecture dimensions must be positive");
    std::mt19937_64 rng(seed);
    TaskModel m;
    m.task = task;
    m.arch = arch;
    const std::size_t H = arch.hidden, K = arch.kernel;
    m.gru1 = detail::make_gru("gru1", arch.input_dim, H, rng);
    m.gru2 = detail::make_gru("gru2", H, H, rng);
    for (std::size_t i = 0; i < arch.dilations.size(); ++i) {
        TcnBlock b;
        b.dilation = arch.dilations[i];
        const std::string pre = "tcn" + std::to_string(i + 1);
        b.w1 = Parameter(pre + ".w1", {K, H, H});
        b.b1 = Parameter(pre + ".b1", {H});
        b.w2 = Parameter(pre + ".w2", {K, H, H});
        b.b2 = Parameter(pre + ".b2", {H});
        for (auto* p : {&b.w1, &b.b1, &b.w2, &b.b2}) ad::init_uniform(*p, K * H, rng);
        m.tcn.push_back(std::move(b));
    }
    m.head_W = Parameter("head.W", {H, n_outputs(task)});
    m.head_b = Parameter("head.b", {n_outputs(task)});
    ad::init_uniform(m.head_W, H, rng);
    ad::init_uniform(m.head_b, H, rng);
    return m;
}

// GRU parameters bound into one graph (each parameter enters the tape once).
struct GruVars {
    Var W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h;
};

inline GruVars bind(Graph& g, GruLayer& p)
{
    return {g.param(p.W_z), g.param(p.W_r), g.param(p.W_h), g.param(p.U_z), g.param(p.U_r),
            g.param(p.U_h), g.param(p.b_z), g.param(p.b_r), g.param(p.b_h)};
}

// One GRU step on x_t [B, F] and h [B, H]:
//   z = sig(x W_z + h U_z + b_z), r = sig(x W_r + h U_r + b_r)
//   h~ = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) h + z h~
inline Var gru_cell(const GruVars& p, Var x, Var h)
{
    auto z = ad::sigmoid(ad::add_bias(ad::matmul(x, p.W_z), p.b_z) + ad::matmul(h, p.U_z));
    auto r = ad::sigmoid(ad::add_bias(ad::matmul(x, p.W_r), p.b_r) + ad::matmul(h, p.U_r));
    auto cand = ad::tanh(ad::add_bias(ad::matmul(x, p.W_h), p.b_h) + ad::matmul(r * h, p.U_h));
    return h + z * (cand - h);
}

// x: [B, T, F] -> hidden states [B, T, H], starting from h = 0.
inline Var gru_layer(Graph& g, GruLayer& layer, Var x)
{
    const std::size_t B = x.shape()[0], T = x.shape()[1], F = x.shape()[2], H = layer.U_z.shape[0];
    const auto p = bind(g, layer);
    Var h = g.constant({B, H}, std::vector<double>(B * H, 0.0));
    std::vector<Var> states;
    states.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        h = gru_cell(p, ad::reshape(ad::slice(x, 1, t, t + 1), {B, F}), h);
        states.push_back(ad::reshape(h, {B, 1, H}));
    }
    return ad::concat(states, 1);
}

// relu(x + relu(conv2(relu(conv1(x))))), kernel centred so length is kept.
inline Var tcn_block(Graph& g, TcnBlock& b, Var x)
{
    const std::size_t k = b.w1.shape[0];
    const std::size_t offset = (k - 1) * b.dilation / 2;
    auto c1 = ad::relu(ad::dilated_conv1d(x, g.param(b.w1), g.param(b.b1), b.dilation, offset));
    auto c2 = ad::relu(ad::dilated_conv1d(c1, g.param(b.w2), g.param(b.b2), b.dilation, offset));
    return ad::relu(x + c2);
}

struct ForwardOut {
    Var embedding;  // [B, H]
    Var logits;     // [B, 3] or [B, 1]
    Var probs;      // softmax or sigmoid of logits
};

inline ForwardOut forward(Graph& g, TaskModel& m, Var x)
{
    if (x.shape().size() != 3 || x.shape()[1] != m.arch.seq_len || x.shape()[2] != m.arch.input_dim)
        fail(ErrorKind::InvalidArgument, "forward: expected input [B," + std::to_string(m.arch.seq_len) + "," +
                                             std::to_string(m.arch.input_dim) + "], got " + ad::shape_string(x.shape()));
    auto h = gru_layer(g, m.gru2, gru_layer(g, m.gru1, x));
    for (auto& b : m.tcn) h = tcn_block(g, b, h);
    ForwardOut out;
    out.embedding = ad::mean_over_axis(h, 1);
    out.logits = ad::add_bias(ad::matmul(out.embedding, g.param(m.head_W)), g.param(m.head_b));
    out.probs = n_outputs(m.task) == 1 ? ad::sigmoid(out.logits) : ad::softmax(out.logits);
    return out;
}

inline Var task_loss(Var logits, Task task, std::span<const int> labels)
{
    if (n_outputs(task) == 1) {
        std::vector<double> t(labels.begin(), labels.end());
        return ad::sigmoid_bce(logits, t);
    }
    return ad::softmax_cross_entropy(logits, labels);
}

// Class-probability vector from head output (binary heads give P(class 1)).
inline std::vector<double> class_probs(Task task, std::span<const double> head)
{
    if (n_outputs(task) == 1) return {1.0 - head[0], head[0]};
    return {head.begin(), head.end()};
}

inline int argmax(std::span<const double> p)
{
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

struct Inference {
    std::vector<double> embedding;
    std::vector<double> probs;  // class probabilities (length n_classes)
    int label = 0;
};

// Batched inference on flattened [n, T*F] features; no tape is kept.
inline std::vector<Inference> infer(const TaskModel& model, std::span<const double> features, std::size_t n)
{
    auto& m = const_cast<TaskModel&>(model);  // inference graph never writes parameters
    const std::size_t per = m.arch.seq_len * m.arch.input_dim;
    if (features.size() != n * per) fail(ErrorKind::InvalidArgument, "infer: feature size does not match batch");
    std::vector<Inference> out;
    out.reserve(n);
    if (n == 0) return out;
    Graph g(false);
    auto x = g.constant({n, m.arch.seq_len, m.arch.input_dim}, {features.begin(), features.end()});
    const auto f = forward(g, m, x);
    const std::size_t H = m.arch.hidden, O = n_outputs(m.task);
    for (std::size_t i = 0; i < n; ++i) {
        Inference r;
        r.embedding.assign(f.embedding.value().begin() + static_cast<std::ptrdiff_t>(i * H),
                           f.embedding.value().begin() + static_cast<std::ptrdiff_t>((i + 1) * H));
        r.probs = class_probs(m.task, f.probs.value().subspan(i * O, O));
        r.label = argmax(r.probs);
        out.push_back(std::move(r));
    }
    return out;
}

inline Inference infer_one(const TaskModel& model, std::span<const double> features)
{
    return infer(model, features, 1).front();
}

// ---------------------------------------------------------------------------
// Patient aggregation

struct PatientPrediction {
    int label = 0;
    std::vector<double> probs;  // mean of segment probability vectors
    std::vector<std::size_t> votes;
};

// Majority vote over per-segment labels; ties go to the class with the higher
// mean probability, then the lower index.
inline PatientPrediction aggregate_votes(std::span<const int> labels, std::span<const std::vector<double>> segment_probs)
{
    if (segment_probs.empty()) fail(ErrorKind::InvalidArgument, "predict_patient: no segments");
    if (labels.size() != segment_probs.size()) fail(ErrorKind::InvalidArgument, "aggregate_votes: label/prob count mismatch");
    const std::size_t k = segment_probs[0].size();
    PatientPrediction p;
    p.probs.assign(k, 0.0);
    p.votes.assign(k, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto& s = segment_probs[i];
        if (s.size() != k) fail(ErrorKind::InvalidArgument, "predict_patient: inconsistent class counts");
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) fail(ErrorKind::InvalidArgument, "aggregate_votes: label out of range");
        ++p.votes[static_cast<std::size_t>(labels[i])];
        for (std::size_t c = 0; c < k; ++c) p.probs[c] += s[c] / static_cast<double>(segment_probs.size());
    }
    const auto top = *std::max_element(p.votes.begin(), p.votes.end());
    int best = -1;
    for (std::size_t c = 0; c < k; ++c) {
        if (p.votes[c] != top) continue;
        if (best < 0 || p.probs[c] > p.probs[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    }
    p.label = best;
    return p;
}

inline PatientPrediction predict_patient(std::span<const std::vector<double>> segment_probs)
{
    std::vector<int> labels;
    for (const auto& s : segment_probs) labels.push_back(argmax(s));
    return aggregate_votes(labels, segment_probs);
}

// ---------------------------------------------------------------------------
// Training

struct Sample {
    std::string patient_id;
    std::vector<double> features;  // T*F, row-major
    int label = 0;
};

struct TrainConfig {
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::size_t patience = 20;
    std::size_t max_epochs = 300;
    /// Validation cross-entropy drop that counts as improvement at equal macro-F1.
    double min_loss_delta = 1e-3;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (batch_size < 1) fail(ErrorKind::InvalidArgument, "batch_size must be >= 1");
        if (patience < 1) fail(ErrorKind::InvalidArgument, "patience must be >= 1");
        if (max_epochs < 1) fail(ErrorKind::InvalidArgument, "max_epochs must be >= 1");
        if (!(min_loss_delta >= 0)) fail(ErrorKind::InvalidArgument, "min_loss_delta must be >= 0");
        if (!(lr >= 0)) fail(ErrorKind::InvalidArgument, "lr must be >= 0");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_macro_f1 = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    TaskModel model;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_f1 = -1.0;
    double best_val_loss = 0.0;
    std::size_t epochs_run = 0;
};

inline double segment_macro_f1(const TaskModel& m, std::span<const Sample> data)
{
    std::vector<double> x;
    std::vector<int> truth;
    for (const auto& s : data) {
        x.insert(x.end(), s.features.begin(), s.features.end());
        truth.push_back(s.label);
    }
    const auto inf = infer(m, x, data.size());
    std::vector<int> pred;
    for (const auto& r : inf) pred.push_back(r.label);
    return stats::macro_f1(truth, pred, n_classes(m.task));
}

struct SegmentScore {
    double macro_f1 = 0.0;
    double loss = 0.0;  // mean cross-entropy
};

inline SegmentScore segment_score(const TaskModel& m, std::span<const Sample> data)
{
    std::vector<double> x;
    std::vector<int> truth, pred;
    for (const auto& s : data) {
        x.insert(x.end(), s.features.begin(), s.features.end());
        truth.push_back(s.label);
    }
    SegmentScore r;
    for (const auto& inf : infer(m, x, data.size())) {
        pred.push_back(inf.label);
        r.loss -= std::log(std::max(inf.probs[static_cast<std::size_t>(truth[pred.size() - 1])], 1e-300));
    }
    r.loss /= static_cast<double>(data.size());
    r.macro_f1 = stats::macro_f1(truth, pred, n_classes(m.task));
    return r;
}

inline std::vector<double> snapshot(TaskModel& m)
{
    std::vector<double> v;
    for (auto* p : m.parameters()) v.insert(v.end(), p->value.begin(), p->value.end());
    return v;
}

inline void restore(TaskModel& m, std::span<const double> v)
{
    std::size_t off = 0;
    for (auto* p : m.parameters()) {
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(off), p->size(), p->value.begin());
        off += p->size();
    }
}

// Adam on mean cross-entropy; validation macro-F1 after every epoch; the
// best epoch's parameters are restored; training stops once `patience`
// epochs pass without improvement. An epoch improves on the best when its
// macro-F1 is higher, or equal with validation cross-entropy lower by more
// than min_loss_delta.
inline TrainResult train_task(Task task, std::span<const Sample> train, std::span<const Sample> val,
                              const TrainConfig& cfg, const Architecture& arch = {})
{
    cfg.validate();
    if (train.empty() || val.empty()) fail(ErrorKind::InvalidArgument, "train_task: train and validation sets must be non-empty");
    const std::size_t per = arch.seq_len * arch.input_dim;
    for (auto set : {train, val})
        for (const auto& s : set) {
            if (s.features.size() != per) fail(ErrorKind::InvalidArgument, "train_task: sample feature size mismatch");
            if (s.label < 0 || static_cast<std::size_t>(s.label) >= n_classes(task))
                fail(ErrorKind::InvalidArgument, "train_task: label out of range for " + std::string(to_string(task)));
        }

    TrainResult res;
    res.model = make_model(task, arch, derive_seed(cfg.seed, 0x6d6f64656cULL));
    auto params = res.model.parameters();
    ad::AdamState adam;
    ad::AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;

    std::vector<double> best_params = snapshot(res.model);
    std::size_t since_best = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(cfg.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t bs = std::min(cfg.batch_size, order.size() - start);
            std::vector<double> x;
            x.reserve(bs * per);
            std::vector<int> y;
            for (std::size_t i = 0; i < bs; ++i) {
                const auto& s = train[order[start + i]];
                x.insert(x.end(), s.features.begin(), s.features.end());
                y.push_back(s.label);
            }
            ad::zero_grads(params);
            Graph g;
            auto out = forward(g, res.model, g.constant({bs, arch.seq_len, arch.input_dim}, std::move(x)));
            auto loss = task_loss(out.logits, task, y);
            if (!std::isfinite(loss.item()))
                fail(ErrorKind::Divergence, std::string(to_string(task)) + ": loss became non-finite at epoch " +
                                                std::to_string(epoch));
            g.backward(loss);
            ad::adam_step(params, adam, acfg);
            loss_sum += loss.item() * static_cast<double>(bs);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(train.size());
        const auto score = segment_score(res.model, val);
        rec.val_macro_f1 = score.macro_f1;
        rec.val_loss = score.loss;
        res.history.push_back(rec);
        res.epochs_run = epoch;
        const bool better = rec.val_macro_f1 > res.best_val_f1 ||
                            (rec.val_macro_f1 == res.best_val_f1 && rec.val_loss < res.best_val_loss - cfg.min_loss_delta);
        if (better) {
            res.best_val_f1 = rec.val_macro_f1;
            res.best_val_loss = rec.val_loss;
            res.best_epoch = epoch;
            best_params = snapshot(res.model);
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    restore(res.model, best_params);
    return res;
}

inline std::string history_csv(std::span<const EpochRecord> h)
{
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,val_macro_f1\n";
    for (const auto& r : h) os << r.epoch << ',' << r.train_loss << ',' << r.val_macro_f1 << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Bundle of the three task models plus the feature standardizer.

struct TaskMeta {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_val_f1 = 0.0;
    std::uint64_t seed = 0;
};

struct ModelBundle {
    std::map<Task, TaskModel> models;
    std::map<Task, TaskMeta> meta;
    dsp::Standardizer standardizer;
    dsp::BandScheme bands;

    const TaskModel& at(Task t) const
    {
        auto it = models.find(t);
        if (it == models.end()) fail(ErrorKind::NotFound, std::string("bundle has no model for ") + to_string(t));
        return it->second;
    }
};

inline void save_bundle(ModelBundle& b, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["format"] = "strokesight-bundle-v1";
    j["standardizer"] = dsp::to_json(b.standardizer);
    j["bands"] = b.bands.edges_hz;
    for (auto& [task, m] : b.models) {
        const auto& meta = b.meta[task];
        j["tasks"][to_string(task)] = {{"architecture", to_json(m.arch)},
                                       {"checkpoint", to_string(task)},
                                       {"epochs_run", meta.epochs_run},
                                       {"best_epoch", meta.best_epoch},
                                       {"best_val_macro_f1", meta.best_val_f1},
                                       {"seed", meta.seed}};
        ad::save_checkpoint(dir / to_string(task), m.parameters());
    }
    write_file(dir / "bundle.json", j.dump(2));
}

inline ModelBundle load_bundle(const std::filesystem::path& dir)
{
    ModelBundle b;
    try {
        const auto j = nlohmann::json::parse(read_file(dir / "bundle.json"));
        b.standardizer = dsp::standardizer_from_json(j.at("standardizer"));
        b.bands.edges_hz = j.at("bands").get<std::vector<double>>();
        for (const auto& [name, t] : j.at("tasks").items()) {
            const Task task = parse_task(name);
            auto m = make_model(task, architecture_from_json(t.at("architecture")), 0);
            ad::load_checkpoint(dir / t.at("checkpoint").get<std::string>(), m.parameters());
            b.models[task] = std::move(m);
            b.meta[task] = {t.at("epochs_run").get<std::size_t>(), t.at("best_epoch").get<std::size_t>(),
                            t.at("best_val_macro_f1").get<double>(), t.at("seed").get<std::uint64_t>()};
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedInput, "bundle " + dir.string() + ": " + e.what());
    }
    return b;
}

} // namespace strokesight::model
