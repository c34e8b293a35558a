#pragma once

// DQN agent that nudges per-class decision thresholds of the stroke-type head.
// One action per sample: lower, keep or raise the threshold of the sample's
// argmax class. Thresholds persist along a stream and reset per episode.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "strokesight/autodiff.hpp"
#include "strokesight/eeg_io.hpp"
#include "strokesight/error.hpp"
#include "strokesight/evalstats.hpp"
#include "strokesight/grutcn.hpp"

namespace strokesight::dqn {

using ad::Graph;
using ad::Parameter;
using ad::ParamRefs;
using ad::Var;

inline constexpr double kTauMin = 0.2;
inline constexpr double kTauMax = 0.9;
inline constexpr double kDelta = 0.02;
inline constexpr double kTauStart = 0.5;
inline constexpr std::size_t kClasses = 3;
inline constexpr std::size_t kActions = 3;  // 0: -delta, 1: keep, 2: +delta

using Thresholds = std::array<double, kClasses>;

inline Thresholds uniform_thresholds(double v = kTauStart) { return {v, v, v}; }

// ---------------------------------------------------------------------------
// Decision rule

struct Decision {
    int label = 0;
    bool low_confidence = false;
};

// Highest-probability class among those with p_k >= tau_k. When none passes,
// plain argmax with the low-confidence flag. Ties go to the lowest index.
inline Decision decide(std::span<const double> probs, std::span<const double> tau)
{
    if (probs.size() != tau.size() || probs.empty())
        fail(ErrorKind::InvalidArgument, "decide: probs and thresholds differ in length");
    int best = -1, fallback = 0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        if (probs[k] > probs[static_cast<std::size_t>(fallback)]) fallback = static_cast<int>(k);
        if (probs[k] >= tau[k] && (best < 0 || probs[k] > probs[static_cast<std::size_t>(best)])) best = static_cast<int>(k);
    }
    if (best >= 0) return {best, false};
    return {fallback, true};
}

inline double action_delta(int action)
{
    switch (action) {
    case 0: return -kDelta;
    case 1: return 0.0;
    case 2: return kDelta;
    }
    fail(ErrorKind::InvalidArgument, "action must be 0, 1 or 2");
}

inline Thresholds apply_action(Thresholds tau, int action, int target)
{
    if (target < 0 || static_cast<std::size_t>(target) >= kClasses) fail(ErrorKind::InvalidArgument, "apply_action: bad target class");
    auto& t = tau[static_cast<std::size_t>(target)];
    t = std::clamp(t + action_delta(action), kTauMin, kTauMax);
    // Keep the grid exact so repeated steps do not drift.
    t = std::round(t / kDelta) * kDelta;
    return tau;
}

// ---------------------------------------------------------------------------
// Rewards

struct RewardScheme {
    double r_correct = 2.0;
    double r_wrong = -2.0;
    double step_cost = 0.1;

    std::string name() const
    {
        std::ostringstream os;
        os << (r_correct >= 0 ? "+" : "") << r_correct << "/" << (r_wrong >= 0 ? "+" : "") << r_wrong;
        return os.str();
    }
    void validate() const
    {
        if (!(step_cost >= 0.0)) fail(ErrorKind::InvalidArgument, "reward scheme: step cost must be >= 0");
        if (!std::isfinite(r_correct) || !std::isfinite(r_wrong)) fail(ErrorKind::InvalidArgument, "reward scheme: non-finite reward");
    }
    bool operator==(const RewardScheme&) const = default;
};

inline double reward(const RewardScheme& s, bool correct, int action)
{
    return (correct ? s.r_correct : s.r_wrong) - (action != 1 ? s.step_cost : 0.0);
}

inline std::vector<RewardScheme> paper_schemes()
{
    return {{2, -2, 0.1}, {1, 0, 0.1}, {1, -1, 0.1}, {3, -1, 0.1}, {0.25, -2.5, 0.1}};
}

inline RewardScheme parse_scheme(const std::string& text)
{
    const auto slash = text.find('/');
    if (slash == std::string::npos) fail(ErrorKind::InvalidArgument, "reward scheme must look like +2/-2, got '" + text + "'");
    RewardScheme s;
    try {
        s.r_correct = std::stod(text.substr(0, slash));
        s.r_wrong = std::stod(text.substr(slash + 1));
    } catch (const std::exception&) {
        fail(ErrorKind::InvalidArgument, "reward scheme must look like +2/-2, got '" + text + "'");
    }
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Configuration

enum class Variant { Vanilla, Double, Dueling };

inline const char* to_string(Variant v)
{
    switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::Double: return "double";
    case Variant::Dueling: return "dueling";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s)
{
    if (s == "vanilla") return Variant::Vanilla;
    if (s == "double") return Variant::Double;
    if (s == "dueling") return Variant::Dueling;
    fail(ErrorKind::InvalidArgument, "unknown DQN variant '" + s + "'");
}

struct AgentConfig {
    double lr = 1e-4;
    double gamma = 0.99;
    std::size_t replay_capacity = 10000;
    std::size_t minibatch = 64;
    std::size_t target_update_every = 500;
    double eps_start = 1.0;
    double eps_end = 0.05;
    std::size_t eps_decay_steps = 20000;
    std::vector<std::size_t> hidden = {128, 64};
    Variant variant = Variant::Vanilla;
    double grad_clip = 10.0;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (!(lr > 0.0)) fail(ErrorKind::InvalidArgument, "agent: lr must be > 0");
        if (!(gamma >= 0.0 && gamma <= 1.0)) fail(ErrorKind::InvalidArgument, "agent: gamma must lie in [0, 1]");
        if (minibatch == 0 || replay_capacity < minibatch) fail(ErrorKind::InvalidArgument, "agent: replay capacity must be >= minibatch > 0");
        if (target_update_every == 0) fail(ErrorKind::InvalidArgument, "agent: target_update_every must be > 0");
        if (!(eps_end >= 0.0 && eps_end <= eps_start && eps_start <= 1.0)) fail(ErrorKind::InvalidArgument, "agent: need 0 <= eps_end <= eps_start <= 1");
        if (hidden.empty()) fail(ErrorKind::InvalidArgument, "agent: at least one hidden layer");
        if (!(grad_clip > 0.0)) fail(ErrorKind::InvalidArgument, "agent: grad_clip must be > 0");
    }

    // Linear anneal from eps_start to eps_end over eps_decay_steps.
    double epsilon(std::size_t step) const
    {
        if (eps_decay_steps == 0 || step >= eps_decay_steps) return eps_end;
        const double f = static_cast<double>(step) / static_cast<double>(eps_decay_steps);
        return eps_start + f * (eps_end - eps_start);
    }
};

inline nlohmann::json to_json(const AgentConfig& c)
{
    return {{"lr", c.lr},
            {"gamma", c.gamma},
            {"replay_capacity", c.replay_capacity},
            {"minibatch", c.minibatch},
            {"target_update_every", c.target_update_every},
            {"eps_start", c.eps_start},
            {"eps_end", c.eps_end},
            {"eps_decay_steps", c.eps_decay_steps},
            {"hidden", c.hidden},
            {"variant", to_string(c.variant)},
            {"grad_clip", c.grad_clip},
            {"seed", c.seed}};
}

inline AgentConfig agent_config_from_json(const nlohmann::json& j)
{
    AgentConfig c;
    c.lr = j.value("lr", c.lr);
    c.gamma = j.value("gamma", c.gamma);
    c.replay_capacity = j.value("replay_capacity", c.replay_capacity);
    c.minibatch = j.value("minibatch", c.minibatch);
    c.target_update_every = j.value("target_update_every", c.target_update_every);
    c.eps_start = j.value("eps_start", c.eps_start);
    c.eps_end = j.value("eps_end", c.eps_end);
    c.eps_decay_steps = j.value("eps_decay_steps", c.eps_decay_steps);
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Replay buffer: fixed-capacity ring with FIFO eviction.

struct Transition {
    std::vector<double> s;
    int a = 1;
    double r = 0.0;
    std::vector<double> s2;
    bool terminal = false;
};

class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity)
    {
        if (capacity == 0) fail(ErrorKind::InvalidArgument, "replay buffer capacity must be > 0");
        items_.reserve(std::min<std::size_t>(capacity, 1 << 16));
    }

    void push(Transition t)
    {
        if (items_.size() < capacity_) {
            items_.push_back(std::move(t));
        } else {
            items_[head_] = std::move(t);
            head_ = (head_ + 1) % capacity_;
        }
        ++pushed_;
    }

    std::size_t size() const { return items_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::uint64_t pushed() const { return pushed_; }

    // i = 0 is the oldest retained transition.
    const Transition& at(std::size_t i) const { return items_[(head_ + i) % items_.size()]; }

    // Uniform with replacement.
    std::vector<std::size_t> sample_indices(std::size_t n, std::mt19937_64& rng) const
    {
        if (items_.empty()) fail(ErrorKind::InvalidArgument, "sample from an empty replay buffer");
        std::uniform_int_distribution<std::size_t> u(0, items_.size() - 1);
        std::vector<std::size_t> idx(n);
        for (auto& i : idx) i = u(rng);
        return idx;
    }

private:
    std::size_t capacity_;
    std::vector<Transition> items_;
    std::size_t head_ = 0;
    std::uint64_t pushed_ = 0;
};

// ---------------------------------------------------------------------------
// Q-network

struct QNet {
    std::size_t input_dim = 0;
    std::size_t n_actions = kActions;
    Variant variant = Variant::Vanilla;
    std::vector<Parameter> W, b;  // hidden layers, then the action (advantage) head
    Parameter Wv, bv;             // dueling value head

    ParamRefs parameters()
    {
        ParamRefs out;
        for (std::size_t i = 0; i < W.size(); ++i) {
            out.push_back(&W[i]);
            out.push_back(&b[i]);
        }
        if (variant == Variant::Dueling) {
            out.push_back(&Wv);
            out.push_back(&bv);
        }
        return out;
    }
};

inline QNet make_qnet(std::size_t input_dim, std::size_t n_actions, const AgentConfig& cfg, std::uint64_t seed)
{
    QNet q;
    q.input_dim = input_dim;
    q.n_actions = n_actions;
    q.variant = cfg.variant;
    std::mt19937_64 rng(seed);
    std::size_t in = input_dim;
    auto layer = [&](const std::string& tag, std::size_t out) {
        Parameter w("q." + tag + ".W", {in, out}), bias("q." + tag + ".b", {out});
        ad::init_uniform(w, in, rng);
        ad::init_uniform(bias, in, rng);
        q.W.push_back(std::move(w));
        q.b.push_back(std::move(bias));
    };
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
        layer("h" + std::to_string(i), cfg.hidden[i]);
        in = cfg.hidden[i];
    }
    layer(cfg.variant == Variant::Dueling ? "adv" : "out", n_actions);
    if (cfg.variant == Variant::Dueling) {
        q.Wv = Parameter("q.value.W", {in, 1});
        q.bv = Parameter("q.value.b", {1});
        ad::init_uniform(q.Wv, in, rng);
        ad::init_uniform(q.bv, in, rng);
    }
    return q;
}

// x: [B, input_dim] -> Q: [B, n_actions].
inline Var q_forward(Graph& g, QNet& q, Var x)
{
    Var h = x;
    const std::size_t L = q.W.size();
    for (std::size_t i = 0; i + 1 < L; ++i) h = ad::relu(ad::add_bias(ad::matmul(h, g.param(q.W[i])), g.param(q.b[i])));
    Var head = ad::add_bias(ad::matmul(h, g.param(q.W[L - 1])), g.param(q.b[L - 1]));
    if (q.variant != Variant::Dueling) return head;
    // Q = V 1^T + A (I - J/n): advantages centred per row.
    const std::size_t n = q.n_actions;
    std::vector<double> centre(n * n), ones(n, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) centre[i * n + j] = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
    Var v = ad::add_bias(ad::matmul(h, g.param(q.Wv)), g.param(q.bv));
    return ad::matmul(head, g.constant({n, n}, centre)) + ad::matmul(v, g.constant({1, n}, ones));
}

// Row-major [n, n_actions] Q-values without recording a tape.
inline std::vector<double> q_values(const QNet& q, std::span<const double> states, std::size_t n)
{
    if (states.size() != n * q.input_dim) fail(ErrorKind::InvalidArgument, "q_values: state size mismatch");
    Graph g(false);
    auto x = g.constant({n, q.input_dim}, std::vector<double>(states.begin(), states.end()));
    auto out = q_forward(g, const_cast<QNet&>(q), x);
    return {out.value().begin(), out.value().end()};
}

inline int greedy_action(std::span<const double> qrow)
{
    return static_cast<int>(std::max_element(qrow.begin(), qrow.end()) - qrow.begin());
}

// Bootstrapped targets r + gamma * Q_target(s', a*). Vanilla and dueling take
// a* from the target net; double DQN picks a* with the online net.
inline std::vector<double> td_targets(const std::vector<const Transition*>& batch, const QNet& online, const QNet& target,
                                      Variant variant, double gamma)
{
    const std::size_t n = batch.size(), d = target.input_dim, A = target.n_actions;
    std::vector<double> s2(n * d);
    for (std::size_t i = 0; i < n; ++i) std::copy(batch[i]->s2.begin(), batch[i]->s2.end(), s2.begin() + static_cast<long>(i * d));
    const auto qt = q_values(target, s2, n);
    std::vector<double> qo;
    if (variant == Variant::Double) qo = q_values(online, s2, n);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto* t = batch[i];
        if (t->terminal) {
            y[i] = t->r;
            continue;
        }
        std::span<const double> row(qt.data() + i * A, A);
        double next;
        if (variant == Variant::Double) {
            const int a = greedy_action(std::span<const double>(qo.data() + i * A, A));
            next = row[static_cast<std::size_t>(a)];
        } else {
            next = *std::max_element(row.begin(), row.end());
        }
        y[i] = t->r + gamma * next;
    }
    return y;
}

// Mean squared TD error of the online net on a batch against fixed targets.
inline double td_loss(QNet& online, const std::vector<const Transition*>& batch, std::span<const double> targets)
{
    Graph g(false);
    const std::size_t n = batch.size(), d = online.input_dim;
    std::vector<double> s(n * d);
    std::vector<int> a(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(batch[i]->s.begin(), batch[i]->s.end(), s.begin() + static_cast<long>(i * d));
        a[i] = batch[i]->a;
    }
    auto q = ad::pick(q_forward(g, online, g.constant({n, d}, s)), a);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += (q.value()[i] - targets[i]) * (q.value()[i] - targets[i]);
    return loss / static_cast<double>(n);
}

// One-step tabular Q-learning, the scalar form of the update the network
// approximates.
inline double tabular_q_update(double q, double r, double max_next, double alpha, double gamma, bool terminal)
{
    const double target = terminal ? r : r + gamma * max_next;
    return q + alpha * (target - q);
}

// ---------------------------------------------------------------------------
// Agent

class Agent {
public:
    Agent(std::size_t input_dim, AgentConfig cfg)
        : cfg_(std::move(cfg)), replay_(cfg_.replay_capacity), rng_(derive_seed(cfg_.seed, 0x61676e74))
    {
        cfg_.validate();
        online_ = make_qnet(input_dim, kActions, cfg_, derive_seed(cfg_.seed, 0x716e6574));
        target_ = online_;
        adam_.lr = cfg_.lr;
        adam_.weight_decay = 0.0;
    }

    Agent(QNet net, AgentConfig cfg)
        : cfg_(std::move(cfg)), online_(std::move(net)), replay_(cfg_.replay_capacity), rng_(derive_seed(cfg_.seed, 0x61676e74))
    {
        cfg_.validate();
        cfg_.variant = online_.variant;
        target_ = online_;
        adam_.lr = cfg_.lr;
        adam_.weight_decay = 0.0;
    }

    const AgentConfig& config() const { return cfg_; }
    QNet& online() { return online_; }
    const QNet& online() const { return online_; }
    QNet& target() { return target_; }
    const ReplayBuffer& replay() const { return replay_; }
    std::size_t steps() const { return steps_; }
    std::size_t updates() const { return updates_; }
    double epsilon() const { return cfg_.epsilon(steps_); }
    std::mt19937_64& rng() { return rng_; }

    std::vector<double> q(std::span<const double> state) const { return q_values(online_, state, 1); }

    int act(std::span<const double> state, bool explore)
    {
        if (explore) {
            std::uniform_real_distribution<double> u(0.0, 1.0);
            if (u(rng_) < epsilon()) return static_cast<int>(rng_() % kActions);
        }
        const auto qs = q(state);
        return greedy_action(qs);
    }

    // Stores the transition, advances the schedule and, once the buffer
    // holds a minibatch, takes one gradient step. Returns the TD loss or NaN
    // when no update happened.
    double observe(Transition t, bool learn = true)
    {
        replay_.push(std::move(t));
        ++steps_;
        double loss = std::nan("");
        if (learn && replay_.size() >= cfg_.minibatch) {
            const auto idx = replay_.sample_indices(cfg_.minibatch, rng_);
            std::vector<const Transition*> batch;
            for (auto i : idx) batch.push_back(&replay_.at(i));
            loss = update(batch);
        }
        if (steps_ % cfg_.target_update_every == 0) sync_target();
        return loss;
    }

    // Gradient step on the squared TD error of a batch. Returns the loss
    // before the step.
    double update(const std::vector<const Transition*>& batch)
    {
        const auto y = td_targets(batch, online_, target_, cfg_.variant, cfg_.gamma);
        const std::size_t n = batch.size(), d = online_.input_dim;
        std::vector<double> s(n * d);
        std::vector<int> a(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (batch[i]->s.size() != d) fail(ErrorKind::InvalidArgument, "transition state has the wrong size");
            std::copy(batch[i]->s.begin(), batch[i]->s.end(), s.begin() + static_cast<long>(i * d));
            a[i] = batch[i]->a;
        }
        Graph g;
        auto qsa = ad::pick(q_forward(g, online_, g.constant({n, d}, std::move(s))), a);
        auto diff = qsa - g.constant({n}, y);
        auto loss = ad::mean(diff * diff);
        const double value = loss.item();
        if (!std::isfinite(value)) fail(ErrorKind::Divergence, "DQN TD loss is not finite (Q values diverged)");
        const auto params = online_.parameters();
        ad::zero_grads(params);
        g.backward(loss);
        ad::clip_grad_norm(params, cfg_.grad_clip);
        ad::adam_step(params, opt_, adam_);
        ++updates_;
        return value;
    }

    void sync_target() { target_ = online_; }

private:
    AgentConfig cfg_;
    QNet online_, target_;
    ReplayBuffer replay_;
    std::mt19937_64 rng_;
    ad::AdamConfig adam_;
    ad::AdamState opt_;
    std::size_t steps_ = 0, updates_ = 0;
};

// ---------------------------------------------------------------------------
// Threshold environment

struct Observation {
    std::vector<double> embedding;
    Thresholds probs{};
};

inline double top2_margin(const Thresholds& p)
{
    auto s = p;
    std::sort(s.begin(), s.end(), std::greater<>());
    return s[0] - s[1];
}

// (embedding, probs, margin, tau). Thresholds enter rescaled from [0.2, 0.9]
// to [-1, 1] so that single steps are visible to the network.
inline std::vector<double> state_vector(const Observation& o, const Thresholds& tau)
{
    std::vector<double> s(o.embedding);
    s.insert(s.end(), o.probs.begin(), o.probs.end());
    s.push_back(top2_margin(o.probs));
    for (double t : tau) s.push_back((2.0 * t - (kTauMin + kTauMax)) / (kTauMax - kTauMin));
    return s;
}

inline std::size_t state_dim(std::size_t embedding_dim) { return embedding_dim + kClasses + 1 + kClasses; }

struct StreamItem {
    std::string patient_id;
    Observation obs;
    int label = 0;
};

using Stream = std::vector<StreamItem>;

inline void validate_stream(const Stream& s)
{
    if (s.empty()) fail(ErrorKind::InvalidArgument, "threshold stream is empty");
    const auto d = s.front().obs.embedding.size();
    for (const auto& it : s) {
        if (it.obs.embedding.size() != d) fail(ErrorKind::InvalidArgument, "stream embeddings differ in length");
        double sum = 0.0;
        for (double p : it.obs.probs) {
            if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::InvalidArgument, "stream probabilities must lie in [0, 1]");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) fail(ErrorKind::InvalidArgument, "stream probabilities must sum to 1");
        if (it.label < 0 || static_cast<std::size_t>(it.label) >= kClasses) fail(ErrorKind::InvalidArgument, "stream label out of range");
    }
}

// Synthetic classifier outputs for exercising the threshold agent. Each
// patient has a true class; segment logits are Gaussian with the true class
// raised by `separation`, then `inflation` is added to the logit of
// `inflated_class` so that class is systematically over-predicted. The
// embedding is a fixed random projection of the clean logits plus noise,
// passed through relu like a pooled network feature.
struct SyntheticStreamSpec {
    std::size_t patients = 300;
    std::size_t segments_per_patient = 3;
    std::size_t embedding_dim = 64;
    double separation = 2.0;
    double logit_noise = 0.8;
    double inflation = 1.5;
    int inflated_class = 1;
    double embedding_noise = 0.3;
    std::uint64_t seed = 0;
    std::uint64_t projection_seed = 0x70726f6a;  // shared by train and test streams
};

inline Stream synthetic_stream(const SyntheticStreamSpec& spec)
{
    if (spec.patients == 0 || spec.segments_per_patient == 0) fail(ErrorKind::InvalidArgument, "synthetic stream: empty");
    if (spec.inflated_class < 0 || static_cast<std::size_t>(spec.inflated_class) >= kClasses)
        fail(ErrorKind::InvalidArgument, "synthetic stream: inflated class out of range");
    std::normal_distribution<double> nd(0.0, 1.0);
    std::mt19937_64 prng(spec.projection_seed);
    std::vector<double> proj(spec.embedding_dim * kClasses);
    for (auto& v : proj) v = nd(prng) / std::sqrt(static_cast<double>(kClasses));
    std::mt19937_64 rng(spec.seed);
    Stream out;
    out.reserve(spec.patients * spec.segments_per_patient);
    for (std::size_t p = 0; p < spec.patients; ++p) {
        const int c = static_cast<int>(p % kClasses);
        for (std::size_t k = 0; k < spec.segments_per_patient; ++k) {
            std::array<double, kClasses> l{};
            for (std::size_t j = 0; j < kClasses; ++j)
                l[j] = spec.logit_noise * nd(rng) + (static_cast<int>(j) == c ? spec.separation : 0.0);
            StreamItem it;
            it.patient_id = "S" + std::to_string(spec.seed) + "-" + std::to_string(p);
            it.label = c;
            it.obs.embedding.resize(spec.embedding_dim);
            for (std::size_t e = 0; e < spec.embedding_dim; ++e) {
                double v = spec.embedding_noise * nd(rng);
                for (std::size_t j = 0; j < kClasses; ++j) v += proj[e * kClasses + j] * l[j];
                it.obs.embedding[e] = std::max(0.0, v);
            }
            l[static_cast<std::size_t>(spec.inflated_class)] += spec.inflation;
            const double m = *std::max_element(l.begin(), l.end());
            double z = 0.0;
            for (auto& v : l) z += (v = std::exp(v - m));
            for (std::size_t j = 0; j < kClasses; ++j) it.obs.probs[j] = l[j] / z;
            out.push_back(std::move(it));
        }
    }
    return out;
}

struct EpisodeResult {
    std::vector<int> actions;
    std::vector<double> rewards;
    std::vector<Decision> decisions;
    std::vector<Thresholds> taus;  // thresholds used for each decision
    double episode_return = 0.0;
    Thresholds final_tau{};
    std::size_t transitions = 0;
};

// Walks the stream in the given order. With explore the agent acts
// epsilon-greedily; with learn every transition goes to replay and triggers
// an update.
inline EpisodeResult run_episode(Agent& agent, const Stream& stream, std::span<const std::size_t> order, Thresholds tau0,
                                 const RewardScheme& scheme, bool explore, bool learn)
{
    if (stream.empty() || order.empty()) fail(ErrorKind::InvalidArgument, "run_episode: empty stream");
    EpisodeResult r;
    Thresholds tau = tau0;
    auto s = state_vector(stream[order[0]].obs, tau);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& item = stream[order[i]];
        const int a = agent.act(s, explore);
        const int target = model::argmax(item.obs.probs);
        tau = apply_action(tau, a, target);
        const auto d = decide(item.obs.probs, tau);
        const double rw = reward(scheme, d.label == item.label, a);
        const bool last = i + 1 == order.size();
        auto s2 = last ? state_vector(item.obs, tau) : state_vector(stream[order[i + 1]].obs, tau);
        r.actions.push_back(a);
        r.rewards.push_back(rw);
        r.decisions.push_back(d);
        r.taus.push_back(tau);
        r.episode_return += rw;
        if (learn) {
            agent.observe({s, a, rw, s2, last});
            ++r.transitions;
        }
        s = std::move(s2);
    }
    r.final_tau = tau;
    return r;
}

inline EpisodeResult run_episode(Agent& agent, const Stream& stream, Thresholds tau0, const RewardScheme& scheme, bool explore, bool learn)
{
    std::vector<std::size_t> order(stream.size());
    std::iota(order.begin(), order.end(), 0);
    return run_episode(agent, stream, order, tau0, scheme, explore, learn);
}

struct Policy {
    QNet net;
    AgentConfig config;
    RewardScheme scheme;
    Thresholds tau = uniform_thresholds();  // operating point at the end of training
    std::size_t embedding_dim = 0;
};

struct TrainAgentResult {
    Policy policy;
    std::vector<double> returns;  // one per training episode
    std::size_t steps = 0;
};

// Offline training over shuffled passes of the stream.
inline TrainAgentResult train_agent(const Stream& stream, const RewardScheme& scheme, const AgentConfig& cfg, std::size_t episodes)
{
    validate_stream(stream);
    scheme.validate();
    if (episodes == 0) fail(ErrorKind::InvalidArgument, "train_agent: need at least one episode");
    const std::size_t emb = stream.front().obs.embedding.size();
    Agent agent(state_dim(emb), cfg);
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x73687566));
    std::vector<std::size_t> order(stream.size());
    std::iota(order.begin(), order.end(), 0);
    TrainAgentResult out;
    for (std::size_t e = 0; e < episodes; ++e) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const auto ep = run_episode(agent, stream, order, uniform_thresholds(), scheme, true, true);
        out.returns.push_back(ep.episode_return);
    }
    // The deployed operating point is where the greedy policy ends up on the
    // training stream.
    const auto greedy = run_episode(agent, stream, uniform_thresholds(), scheme, false, false);
    out.policy = {agent.online(), cfg, scheme, greedy.final_tau, emb};
    out.steps = agent.steps();
    return out;
}

// Greedy roll-out of a frozen policy with thresholds persisting along the stream.
inline EpisodeResult evaluate_policy(const Policy& policy, const Stream& stream, std::optional<Thresholds> tau0 = std::nullopt)
{
    validate_stream(stream);
    if (stream.front().obs.embedding.size() != policy.embedding_dim)
        fail(ErrorKind::InvalidArgument, "policy embedding size does not match the stream");
    Agent agent(policy.net, policy.config);
    return run_episode(agent, stream, tau0.value_or(policy.tau), policy.scheme, false, false);
}

// ---------------------------------------------------------------------------
// Scoring helpers

inline std::vector<Decision> static_decisions(const Stream& stream, const Thresholds& tau)
{
    std::vector<Decision> out;
    out.reserve(stream.size());
    for (const auto& it : stream) out.push_back(decide(it.obs.probs, tau));
    return out;
}

// Patient-level records: majority vote over decided segment labels.
inline std::vector<stats::PredictionRecord> patient_records(const Stream& stream, std::span<const Decision> decisions)
{
    if (decisions.size() != stream.size()) fail(ErrorKind::InvalidArgument, "patient_records: one decision per stream item");
    std::map<std::string, std::vector<std::size_t>> by_patient;
    for (std::size_t i = 0; i < stream.size(); ++i) by_patient[stream[i].patient_id].push_back(i);
    std::vector<stats::PredictionRecord> out;
    for (const auto& [pid, idx] : by_patient) {
        std::vector<int> labels;
        std::vector<std::vector<double>> probs;
        bool low = false;
        for (auto i : idx) {
            labels.push_back(decisions[i].label);
            probs.emplace_back(stream[i].obs.probs.begin(), stream[i].obs.probs.end());
            low = low || decisions[i].low_confidence;
        }
        const auto p = model::aggregate_votes(labels, probs);
        out.push_back({pid, stream[idx.front()].label, p.label, p.probs, low});
    }
    return out;
}

inline double patient_macro_f1(const Stream& stream, std::span<const Decision> decisions)
{
    return stats::macro_f1(patient_records(stream, decisions), kClasses);
}

inline double segment_accuracy(const Stream& stream, std::span<const Decision> decisions)
{
    std::size_t ok = 0;
    for (std::size_t i = 0; i < stream.size(); ++i) ok += decisions[i].label == stream[i].label;
    return static_cast<double>(ok) / static_cast<double>(stream.size());
}

// Patient-wise macro-F1 of thresholded decisions with the patient grouping
// precomputed, for scoring many threshold settings on one stream. Agrees with
// patient_macro_f1 exactly.
class PatientScorer {
public:
    explicit PatientScorer(const Stream& stream) : stream_(&stream)
    {
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < stream.size(); ++i) {
            auto [it, fresh] = index.emplace(stream[i].patient_id, groups_.size());
            if (fresh) {
                groups_.emplace_back();
                truth_.push_back(stream[i].label);
                mean_.push_back({0.0, 0.0, 0.0});
            }
            groups_[it->second].push_back(i);
        }
        for (std::size_t p = 0; p < groups_.size(); ++p)
            for (auto i : groups_[p])
                for (std::size_t k = 0; k < kClasses; ++k) mean_[p][k] += stream[i].obs.probs[k] / static_cast<double>(groups_[p].size());
    }

    std::size_t patients() const { return groups_.size(); }

    double macro_f1(std::span<const Decision> decisions) const
    {
        std::array<double, kClasses> tp{}, fp{}, fn{};
        for (std::size_t p = 0; p < groups_.size(); ++p) {
            std::array<int, kClasses> votes{};
            for (auto i : groups_[p]) ++votes[static_cast<std::size_t>(decisions[i].label)];
            std::size_t best = 0;
            for (std::size_t k = 1; k < kClasses; ++k)
                if (votes[k] > votes[best] || (votes[k] == votes[best] && mean_[p][k] > mean_[p][best])) best = k;
            const auto t = static_cast<std::size_t>(truth_[p]);
            if (best == t) {
                tp[t] += 1;
            } else {
                fp[best] += 1;
                fn[t] += 1;
            }
        }
        double total = 0.0;
        std::size_t used = 0;
        for (std::size_t k = 0; k < kClasses; ++k) {
            if (tp[k] + fp[k] + fn[k] == 0) continue;
            total += 2 * tp[k] / (2 * tp[k] + fp[k] + fn[k]);
            ++used;
        }
        return total / static_cast<double>(used);
    }

    double macro_f1(const Thresholds& tau) const
    {
        thread_local std::vector<Decision> d;
        d.resize(stream_->size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = decide((*stream_)[i].obs.probs, tau);
        return macro_f1(d);
    }

private:
    const Stream* stream_;
    std::vector<std::vector<std::size_t>> groups_;
    std::vector<int> truth_;
    std::vector<std::array<double, kClasses>> mean_;
};

struct StaticSearch {
    Thresholds tau{};
    double macro_f1 = 0.0;
};

// Exhaustive search over the threshold grid {0.2, 0.22, ..., 0.9}^3.
inline StaticSearch best_static_thresholds(const Stream& stream)
{
    validate_stream(stream);
    const PatientScorer scorer(stream);
    const int n = static_cast<int>(std::lround((kTauMax - kTauMin) / kDelta)) + 1;
    StaticSearch best{uniform_thresholds(), -1.0};
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                const Thresholds tau{kTauMin + i * kDelta, kTauMin + j * kDelta, kTauMin + k * kDelta};
                const auto f = scorer.macro_f1(tau);
                if (f > best.macro_f1 + 1e-12) best = {tau, f};
            }
    return best;
}

// Segment-level calibration of thresholded decisions: confidence stays the
// maximum class probability, correctness is that of the decided label.
inline stats::CalibrationReport decided_ece(const Stream& stream, std::span<const Decision> decisions, std::size_t bins = 15)
{
    if (decisions.size() != stream.size()) fail(ErrorKind::InvalidArgument, "decided_ece: one decision per stream item");
    std::vector<double> conf;
    std::vector<int> correct;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        const auto& p = stream[i].obs.probs;
        conf.push_back(*std::max_element(p.begin(), p.end()));
        correct.push_back(decisions[i].label == stream[i].label);
    }
    return stats::ece(conf, correct, bins);
}

// ---------------------------------------------------------------------------
// Reward ablation

struct AblationRow {
    RewardScheme scheme;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double final_return = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<std::string> warnings;
};

inline AblationResult ablate_rewards(std::vector<RewardScheme> schemes, const Stream& train, const Stream& eval,
                                     const AgentConfig& cfg, std::size_t episodes)
{
    if (schemes.empty()) fail(ErrorKind::InvalidArgument, "ablate_rewards: no reward schemes given");
    AblationResult out;
    std::vector<RewardScheme> unique;
    for (const auto& s : schemes) {
        if (std::find(unique.begin(), unique.end(), s) != unique.end()) {
            out.warnings.push_back("duplicate reward scheme " + s.name() + " ignored");
            continue;
        }
        unique.push_back(s);
    }
    for (const auto& s : unique) {
        const auto trained = train_agent(train, s, cfg, episodes);
        const auto ev = evaluate_policy(trained.policy, eval);
        out.rows.push_back({s, segment_accuracy(eval, ev.decisions), patient_macro_f1(eval, ev.decisions),
                            trained.returns.empty() ? 0.0 : trained.returns.back()});
    }
    return out;
}

inline std::string ablation_csv(const AblationResult& r)
{
    std::ostringstream os;
    os << "scheme,r_correct,r_wrong,step_cost,accuracy,macro_f1,final_return\n";
    os.precision(10);
    for (const auto& row : r.rows)
        os << row.scheme.name() << "," << row.scheme.r_correct << "," << row.scheme.r_wrong << "," << row.scheme.step_cost << ","
           << row.accuracy << "," << row.macro_f1 << "," << row.final_return << "\n";
    return os.str();
}

// Mean and standard error across seeds for each episode.
inline std::string learning_curve_csv(const std::vector<std::vector<double>>& returns_per_seed)
{
    if (returns_per_seed.empty()) fail(ErrorKind::InvalidArgument, "learning curve: no runs");
    const std::size_t n = returns_per_seed.front().size();
    std::ostringstream os;
    os << "episode,return,sem\n";
    os.precision(10);
    for (std::size_t e = 0; e < n; ++e) {
        double mean = 0.0;
        for (const auto& r : returns_per_seed) mean += r.at(e);
        mean /= static_cast<double>(returns_per_seed.size());
        double var = 0.0;
        for (const auto& r : returns_per_seed) var += (r[e] - mean) * (r[e] - mean);
        const double k = static_cast<double>(returns_per_seed.size());
        const double sem = k > 1 ? std::sqrt(var / (k - 1.0) / k) : 0.0;
        os << e + 1 << "," << mean << "," << sem << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Policy files: <stem>.bin/.json checkpoint of the Q-net plus <stem>.policy.json.

inline void save_policy(Policy& p, const std::filesystem::path& stem)
{
    if (!stem.parent_path().empty()) std::filesystem::create_directories(stem.parent_path());
    ad::save_checkpoint(stem, p.net.parameters());
    nlohmann::json j = {{"tau", p.tau},
                        {"scheme", {{"r_correct", p.scheme.r_correct}, {"r_wrong", p.scheme.r_wrong}, {"step_cost", p.scheme.step_cost}}},
                        {"config", to_json(p.config)},
                        {"seed", p.config.seed},
                        {"embedding_dim", p.embedding_dim},
                        {"input_dim", p.net.input_dim}};
    write_file(stem.string() + ".policy.json", j.dump(2));
}

inline Policy load_policy(const std::filesystem::path& stem)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(stem.string() + ".policy.json"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedInput, std::string("policy file: ") + e.what());
    }
    Policy p;
    try {
        p.config = agent_config_from_json(j.at("config"));
        p.tau = j.at("tau").get<Thresholds>();
        const auto& s = j.at("scheme");
        p.scheme = {s.at("r_correct").get<double>(), s.at("r_wrong").get<double>(), s.at("step_cost").get<double>()};
        p.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedInput, std::string("policy file: ") + e.what());
    }
    for (double t : p.tau)
        if (!(t >= kTauMin - 1e-12 && t <= kTauMax + 1e-12)) fail(ErrorKind::MalformedInput, "policy file: threshold outside [0.2, 0.9]");
    p.net = make_qnet(state_dim(p.embedding_dim), kActions, p.config, 0);
    ad::load_checkpoint(stem, p.net.parameters());
    return p;
}

} // namespace strokesight::dqn
