// strokesight command line: batch entry points over the library.
//
// Options resolve as flags > STROKESIGHT_<NAME> environment > config file.
// The config file is JSON or TOML; top-level keys feed the global options and
// a table named after the subcommand feeds that subcommand.

#include <CLI11.hpp>

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "png_export.hpp"
#include "strokesight/pipeline.hpp"
#include "strokesight/service.hpp"  // pulls in httplib; keep after the Eigen users

namespace fs = std::filesystem;
using namespace strokesight;
using ordered_json = nlohmann::ordered_json;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    std::string out = "run";
    bool json = false;
    std::string config;
};

struct SynthArgs {
    std::size_t patients = 120;
    double duration = 180.0;
    double sample_rate = 256.0;
    std::string recipes = "strong";
};

struct PreprocessArgs {
    double high_pass = 0.5;
    bool notch = true;
    double window = 4.0;
};

struct TrainArgs {
    double lr = 1e-3;
    std::size_t batch_size = 16;
    std::size_t patience = 20;
    std::size_t max_epochs = 300;
    std::size_t hidden = 64;
};

struct DqnArgs {
    std::size_t episodes = 200;
    double lr = 1e-4;
    std::string scheme = "+2/-2";
    std::string variant = "vanilla";
    std::size_t seeds = 1;
    std::string stream = "pipeline";
};

struct AblateArgs {
    std::vector<std::string> schemes;
    std::size_t episodes = 50;
    double lr = 1e-3;
    std::string stream = "pipeline";
};

struct EvalArgs {
    std::string split = "test";
    std::size_t bootstrap = 2000;
    std::vector<double> tau = {dqn::kTauStart, dqn::kTauStart, dqn::kTauStart};
    bool no_policy = false;
};

struct TopoArgs {
    std::string recording;
    std::string feature;
    std::string band = "alpha";
    std::size_t segment = 0;
    bool png = false;
};

struct ServeArgs {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string data_dir;
    std::string model;
    std::string policy;
};

struct Args {
    Globals g;
    SynthArgs synth;
    PreprocessArgs prep;
    TrainArgs train;
    DqnArgs dqn;
    AblateArgs ablate;
    EvalArgs eval;
    TopoArgs topo;
    ServeArgs serve;
};

std::unique_ptr<CLI::App> build_app(Args& a)
{
    auto app = std::make_unique<CLI::App>("EEG stroke assessment: synthetic cohorts, training, adaptive thresholds, evaluation", "strokesight");
    app->require_subcommand(1);
    app->fallthrough();
    app->add_option("--seed", a.g.seed, "Master seed")->capture_default_str();
    app->add_option("--out", a.g.out, "Working directory for all artifacts")->capture_default_str();
    app->add_flag("--json", a.g.json, "Machine-readable stdout");
    app->add_option("--config", a.g.config, "JSON or TOML config file");

    auto* s = app->add_subcommand("synth", "Generate a synthetic cohort");
    s->add_option("--patients", a.synth.patients)->capture_default_str();
    s->add_option("--duration", a.synth.duration, "Recording length in seconds")->capture_default_str();
    s->add_option("--sample-rate", a.synth.sample_rate)->capture_default_str();
    s->add_option("--recipes", a.synth.recipes)->check(CLI::IsMember({"strong", "default"}))->capture_default_str();

    auto* p = app->add_subcommand("preprocess", "Filter, segment and extract band powers");
    p->add_option("--high-pass", a.prep.high_pass, "High-pass cut-off in Hz")->capture_default_str();
    p->add_option("--notch", a.prep.notch, "50 Hz notch on/off")->capture_default_str();
    p->add_option("--window", a.prep.window, "Welch window in seconds")->capture_default_str();

    auto* t = app->add_subcommand("train", "Train the three task networks");
    t->add_option("--lr", a.train.lr)->capture_default_str();
    t->add_option("--batch-size", a.train.batch_size)->capture_default_str();
    t->add_option("--patience", a.train.patience)->capture_default_str();
    t->add_option("--max-epochs", a.train.max_epochs)->capture_default_str();
    t->add_option("--hidden", a.train.hidden)->capture_default_str();

    auto* d = app->add_subcommand("dqn-train", "Train the threshold policy");
    d->add_option("--episodes", a.dqn.episodes)->capture_default_str();
    d->add_option("--lr", a.dqn.lr)->capture_default_str();
    d->add_option("--scheme", a.dqn.scheme, "Reward scheme such as +2/-2")->capture_default_str();
    d->add_option("--variant", a.dqn.variant)->check(CLI::IsMember({"vanilla", "double", "dueling"}))->capture_default_str();
    d->add_option("--seeds", a.dqn.seeds, "Independent runs for the learning curve")->capture_default_str();
    d->add_option("--stream", a.dqn.stream)->check(CLI::IsMember({"pipeline", "synthetic"}))->capture_default_str();

    auto* r = app->add_subcommand("ablate-rewards", "Compare reward schemes");
    r->add_option("--schemes", a.ablate.schemes, "Schemes such as +2/-2; default is the standard five")->delimiter(',');
    r->add_option("--episodes", a.ablate.episodes)->capture_default_str();
    r->add_option("--lr", a.ablate.lr)->capture_default_str();
    r->add_option("--stream", a.ablate.stream)->check(CLI::IsMember({"pipeline", "synthetic"}))->capture_default_str();

    auto* e = app->add_subcommand("eval", "Evaluate on a split and write the report");
    e->add_option("--split", a.eval.split)->check(CLI::IsMember({"train", "validation", "test"}))->capture_default_str();
    e->add_option("--bootstrap", a.eval.bootstrap)->capture_default_str();
    e->add_option("--tau", a.eval.tau, "Static thresholds, three values")->expected(3)->delimiter(',');
    e->add_flag("--no-policy", a.eval.no_policy, "Skip the adaptive comparison");

    auto* o = app->add_subcommand("topo", "Scalp topography of one segment");
    o->add_option("--recording", a.topo.recording, "Recording id; preprocessed with defaults if no cache exists");
    o->add_option("--feature", a.topo.feature, "Feature cache id");
    o->add_option("--band", a.topo.band, "Band name, sub-band index 0-9, or all")->capture_default_str();
    o->add_option("--segment", a.topo.segment)->capture_default_str();
    o->add_flag("--png", a.topo.png, "Also write a PNG");

    auto* v = app->add_subcommand("serve", "Run the HTTP API");
    v->add_option("--host", a.serve.host)->capture_default_str();
    v->add_option("--port", a.serve.port)->capture_default_str();
    v->add_option("--data-dir", a.serve.data_dir, "Defaults to --out");
    v->add_option("--model", a.serve.model, "Bundle directory; defaults to <out>/model when present");
    v->add_option("--policy", a.serve.policy, "Policy stem; defaults to <out>/policy/policy when present");
    return app;
}

// -- config precedence -------------------------------------------------------

using Section = std::map<std::string, std::vector<std::string>>;
using ConfigTable = std::map<std::string, Section>;  // "" holds top-level keys

std::string normalize_key(std::string k)
{
    for (auto& ch : k)
        if (ch == '_') ch = '-';
    return k;
}

std::vector<std::string> json_tokens(const nlohmann::json& v)
{
    if (v.is_array()) {
        std::vector<std::string> out;
        for (const auto& x : v) {
            const auto t = json_tokens(x);
            out.insert(out.end(), t.begin(), t.end());
        }
        return out;
    }
    if (v.is_string()) return {v.get<std::string>()};
    return {v.dump()};
}

ConfigTable load_config(const fs::path& path)
{
    if (!fs::exists(path)) fail(ErrorKind::NotFound, "config file " + path.string() + " does not exist");
    ConfigTable table;
    if (path.extension() == ".json") {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::parse_error& e) {
            fail(ErrorKind::MalformedInput, std::string("config file: ") + e.what());
        }
        if (!j.is_object()) fail(ErrorKind::MalformedInput, "config file must hold an object");
        for (const auto& [k, v] : j.items()) {
            if (v.is_object()) {
                for (const auto& [k2, v2] : v.items()) table[k][normalize_key(k2)] = json_tokens(v2);
            } else {
                table[""][normalize_key(k)] = json_tokens(v);
            }
        }
        return table;
    }
    std::ifstream in(path);
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_config(in);
    } catch (const CLI::ParseError& e) {
        fail(ErrorKind::MalformedInput, std::string("config file: ") + e.what());
    }
    for (const auto& it : items) {
        if (it.name == "++" || it.name == "--") continue;  // section markers
        if (it.parents.size() > 1) fail(ErrorKind::MalformedInput, "config file: nesting deeper than one table at " + it.fullname());
        table[it.parents.empty() ? "" : it.parents.front()][normalize_key(it.name)] = it.inputs;
    }
    return table;
}

std::string env_name(const std::string& long_name)
{
    std::string e = "STROKESIGHT_";
    for (char ch : long_name) e += ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return e;
}

bool truthy(const std::string& v)
{
    std::string l;
    for (char ch : v) l += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return l == "1" || l == "true" || l == "yes" || l == "on";
}

// Arguments that supply every option the command line left unset.
std::vector<std::string> fill_unset(CLI::App& app, const ConfigTable& cfg)
{
    std::vector<std::string> extra;
    auto visit = [&](CLI::App& a, const std::string& section) {
        const auto sec = cfg.find(section);
        for (CLI::Option* opt : a.get_options()) {
            if (opt->count() > 0 || opt->get_lnames().empty()) continue;
            const std::string name = opt->get_lnames().front();
            if (name == "help" || name == "config") continue;
            std::optional<std::vector<std::string>> value;
            if (const char* env = std::getenv(env_name(name).c_str())) {
                value = std::vector<std::string>{env};
            } else if (sec != cfg.end()) {
                if (const auto it = sec->second.find(name); it != sec->second.end()) value = it->second;
            }
            if (!value) continue;
            if (opt->get_expected_min() == 0) {
                if (!value->empty() && truthy(value->front())) extra.push_back("--" + name);
                continue;
            }
            extra.push_back("--" + name);
            extra.insert(extra.end(), value->begin(), value->end());
        }
    };
    visit(app, "");
    for (CLI::App* sub : app.get_subcommands()) visit(*sub, sub->get_name());
    return extra;
}

void parse_args(CLI::App& app, const std::vector<std::string>& args)
{
    std::vector<char*> argv;
    for (const auto& s : args) argv.push_back(const_cast<char*>(s.c_str()));
    app.parse(static_cast<int>(argv.size()), argv.data());
}

// -- output --------------------------------------------------------------------

void emit(const Globals& g, const ordered_json& j)
{
    if (g.json) {
        std::cout << j.dump(2) << "\n";
        return;
    }
    for (const auto& [k, v] : j.items()) std::cout << k << ": " << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
}

void write_text(const fs::path& p, const std::string& text)
{
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    write_file(p, text);
}

// -- subcommands ---------------------------------------------------------------

ordered_json run_synth(const Args& a)
{
    const pipeline::Layout L{a.g.out};
    pipeline::SynthConfig cfg{a.synth.patients, a.g.seed, a.synth.duration, a.synth.sample_rate, a.synth.recipes == "strong"};
    const auto m = pipeline::synthesize(L, cfg);
    std::map<std::string, std::size_t> per_split;
    std::size_t recordings = 0;
    for (const auto& e : m.entries) {
        ++per_split[to_string(e.split)];
        recordings += e.recording_ids.size();
    }
    return {{"patients", m.entries.size()}, {"recordings", recordings}, {"splits", per_split}, {"cohort", L.cohort().string()}};
}

ordered_json run_preprocess(const Args& a)
{
    const pipeline::Layout L{a.g.out};
    const pipeline::PreprocessOptions opts{a.prep.high_pass, a.prep.notch, a.prep.window};
    const auto all = pipeline::preprocess_cohort(L, L, opts);
    write_text(L.features() / "options.json", pipeline::to_json(opts).dump(2));
    std::size_t segments = 0;
    for (const auto& f : all) segments += f.segments.size();
    return {{"recordings", all.size()}, {"segments", segments}, {"features", L.features().string()}};
}

ordered_json run_train(const Args& a)
{
    const pipeline::Layout L{a.g.out};
    const auto c = pipeline::load_cohort(L);
    model::TrainConfig cfg;
    cfg.lr = a.train.lr;
    cfg.batch_size = a.train.batch_size;
    cfg.patience = a.train.patience;
    cfg.max_epochs = a.train.max_epochs;
    cfg.seed = a.g.seed;
    cfg.validate();
    model::Architecture arch;
    arch.hidden = a.train.hidden;
    auto trained = pipeline::train_bundle(c, cfg, arch);
    model::save_bundle(trained.bundle, L.model());
    ordered_json tasks;
    for (const auto& [t, h] : trained.history) {
        write_text(L.model() / (std::string("history_") + model::to_string(t) + ".csv"), model::history_csv(h));
        const auto& m = trained.bundle.meta.at(t);
        tasks[model::to_string(t)] = {{"epochs_run", m.epochs_run}, {"best_epoch", m.best_epoch}, {"val_macro_f1", m.best_val_f1}};
    }
    return {{"model", L.model().string()}, {"tasks", tasks}};
}

dqn::Stream pipeline_stream(const pipeline::Layout& L, Split split)
{
    const auto c = pipeline::load_cohort(L);
    const auto b = model::load_bundle(L.model());
    const auto outs = pipeline::run_split(c, b, split);
    return pipeline::threshold_stream(outs);
}

dqn::Stream synthetic(std::uint64_t seed, std::uint64_t salt)
{
    dqn::SyntheticStreamSpec spec;
    spec.seed = derive_seed(seed, salt);
    return dqn::synthetic_stream(spec);
}

constexpr std::uint64_t kTrainStream = 0x747261696e;
constexpr std::uint64_t kEvalStream = 0x6576616c;

ordered_json run_dqn(const Args& a)
{
    const pipeline::Layout L{a.g.out};
    if (a.dqn.seeds == 0) fail(ErrorKind::InvalidArgument, "--seeds must be >= 1");
    const auto stream = a.dqn.stream == "pipeline" ? pipeline_stream(L, Split::Validation) : synthetic(a.g.seed, kTrainStream);
    const auto scheme = dqn::parse_scheme(a.dqn.scheme);
    dqn::AgentConfig cfg;
    cfg.lr = a.dqn.lr;
    cfg.variant = dqn::parse_variant(a.dqn.variant);
    cfg.validate();
    std::vector<std::vector<double>> returns;
    std::optional<dqn::TrainAgentResult> first;
    for (std::size_t i = 0; i < a.dqn.seeds; ++i) {
        cfg.seed = derive_seed(a.g.seed, 0x647171, i);
        auto r = dqn::train_agent(stream, scheme, cfg, a.dqn.episodes);
        returns.push_back(r.returns);
        if (!first) first = std::move(r);
    }
    dqn::save_policy(first->policy, L.policy());
    write_text(L.policy().parent_path() / "learning_curve.csv", dqn::learning_curve_csv(returns));
    return {{"policy", L.policy().string()},
            {"stream_items", stream.size()},
            {"steps", first->steps},
            {"tau", first->policy.tau},
            {"final_return", first->returns.back()}};
}

ordered_json run_ablate(const Args& a)
{
    const pipeline::Layout L{a.g.out};
    std::vector<dqn::RewardScheme> schemes;
    for (const auto& s : a.ablate.schemes) schemes.push_back(dqn::parse_scheme(s));
    if (schemes.empty()) schemes = dqn::paper_schemes();
    const bool pipe = a.ablate.stream == "pipeline";
    const auto train = pipe ? pipeline_stream(L, Split::Validation) : synthetic(a.g.seed, kTrainStream);
    const auto eval = pipe ? pipeline_stream(L, Split::Test) : synthetic(a.g.seed, kEvalStream);
    dqn::AgentConfig cfg;
    cfg.lr = a.ablate.lr;
    cfg.seed = derive_seed(a.g.seed, 0x616226c);
    cfg.validate();
    const auto res = dqn::ablate_rewards(schemes, train, eval, cfg, a.ablate.episodes);
    const auto path = L.reports() / "ablation.csv";
    write_text(path, dqn::ablation_csv(res));
    ordered_json rows = ordered_json::array();
    for (const auto& row : res.rows)
        rows.push_back({{"scheme", row.scheme.name()}, {"accuracy", row.accuracy}, {"macro_f1", row.macro_f1}, {"final_return", row.final_return}});
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    return {{"ablation", path.string()}, {"rows", rows}, {"warnings", res.warnings}};
}

ordered_json run_eval(const Args& a)
{
    const pipeline::Layout L{a.g.out};
    if (a.eval.tau.size() != dqn::kClasses) fail(ErrorKind::InvalidArgument, "--tau needs exactly 3 values");
    dqn::Thresholds tau{};
    std::copy(a.eval.tau.begin(), a.eval.tau.end(), tau.begin());
    for (double t : tau)
        if (!(t >= dqn::kTauMin && t <= dqn::kTauMax)) fail(ErrorKind::OutOfRange, "thresholds must lie in [0.2, 0.9]");
    const auto c = pipeline::load_cohort(L);
    const auto b = model::load_bundle(L.model());
    std::optional<dqn::Policy> policy;
    if (!a.eval.no_policy && fs::exists(L.policy().string() + ".policy.json")) policy = dqn::load_policy(L.policy());
    const auto split = parse_split(a.eval.split);
    const auto ev = pipeline::evaluate_split(c, b, split, policy ? &*policy : nullptr, tau);
    pipeline::ReportOptions ro;
    ro.bootstrap = a.eval.bootstrap;
    ro.seed = a.g.seed;
    const auto report = pipeline::report_json(ev, ro);
    const std::string name = to_string(split);
    write_text(L.reports() / (name + ".json"), report.dump(2));
    write_text(L.reports() / (name + "_predictions.csv"), pipeline::predictions_csv(ev));
    if (a.g.json) return report;
    ordered_json summary;
    summary["report"] = (L.reports() / (name + ".json")).string();
    for (const auto& [task, f1] : report.at("macro_f1").items()) summary["macro_f1." + task] = f1;
    return summary;
}

ordered_json run_topo(const Args& a)
{
    const pipeline::Layout L{a.g.out};
    if (a.topo.recording.empty() == a.topo.feature.empty()) fail(ErrorKind::InvalidArgument, "give exactly one of --recording or --feature");
    const std::string id = a.topo.feature.empty() ? a.topo.recording : a.topo.feature;
    const auto cache = pipeline::feature_path(L, id);
    dsp::RecordingFeatures f;
    if (fs::exists(cache)) {
        f = dsp::recording_features_from_json(nlohmann::json::parse(read_file(cache)));
    } else if (!a.topo.recording.empty()) {
        const auto stem = L.recordings() / a.topo.recording;
        if (!fs::exists(stem.string() + ".json")) fail(ErrorKind::NotFound, "recording " + a.topo.recording + " does not exist");
        f = dsp::preprocess_recording(load_recording(stem), pipeline::preprocess_config({}));
    } else {
        fail(ErrorKind::NotFound, "feature cache " + id + " does not exist");
    }
    if (a.topo.segment >= f.segments.size()) fail(ErrorKind::NotFound, "segment " + std::to_string(a.topo.segment) + " does not exist");
    const auto grid = topo::render_band(f.segments[a.topo.segment].powers, f.channel_names, a.topo.band);
    const auto stem = L.root / "topo" / (id + "_" + a.topo.band + "_s" + std::to_string(a.topo.segment));
    write_text(stem.string() + ".json", topo::to_json(grid).dump());
    ordered_json out = {{"json", stem.string() + ".json"}};
    if (a.topo.png) {
        tools::write_png(grid, stem.string() + ".png");
        out["png"] = stem.string() + ".png";
    }
    const auto [row, col] = grid.argmax_cell();
    out["argmax"] = {{"row", row}, {"col", col}, {"x", grid.x_of(col)}, {"y", grid.y_of(row)}};
    return out;
}

void run_serve(const Args& a)
{
    const pipeline::Layout L{a.g.out};
    service::Options o;
    o.host = a.serve.host;
    o.port = a.serve.port;
    o.data_dir = a.serve.data_dir.empty() ? L.root : fs::path(a.serve.data_dir);
    o.model = a.serve.model;
    o.policy = a.serve.policy;
    if (o.model.empty() && fs::exists(L.model() / "bundle.json")) o.model = L.model();
    if (o.policy.empty() && !o.model.empty() && fs::exists(L.policy().string() + ".policy.json")) o.policy = L.policy();
    service::Service svc(o);
    std::cerr << "listening on " << o.host << ":" << o.port << "\n";
    service::serve(svc);
}

int report_error(const std::string& kind, const std::string& message, int code)
{
    std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << "\n";
    return code;
}

} // namespace

int main(int argc, char** argv)
{
    const std::vector<std::string> args(argv, argv + argc);
    Args a;
    auto app = build_app(a);
    try {
        parse_args(*app, args);
        std::string config = a.g.config;
        if (config.empty())
            if (const char* env = std::getenv("STROKESIGHT_CONFIG")) config = env;
        const ConfigTable table = config.empty() ? ConfigTable{} : load_config(config);
        if (const auto extra = fill_unset(*app, table); !extra.empty()) {
            auto full = args;
            full.insert(full.end(), extra.begin(), extra.end());
            a = Args{};
            app = build_app(a);
            parse_args(*app, full);
        }
    } catch (const CLI::CallForHelp& e) {
        return app->exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app->exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("usage", e.what(), 2);
    } catch (const Error& e) {
        return report_error(to_string(e.kind()), e.what(), 2);
    }

    try {
        const std::string cmd = app->get_subcommands().front()->get_name();
        if (cmd == "serve") {
            run_serve(a);
            return 0;
        }
        ordered_json out;
        if (cmd == "synth") out = run_synth(a);
        else if (cmd == "preprocess") out = run_preprocess(a);
        else if (cmd == "train") out = run_train(a);
        else if (cmd == "dqn-train") out = run_dqn(a);
        else if (cmd == "ablate-rewards") out = run_ablate(a);
        else if (cmd == "eval") out = run_eval(a);
        else if (cmd == "topo") out = run_topo(a);
        emit(a.g, out);
        return 0;
    } catch (const Error& e) {
        return report_error(to_string(e.kind()), e.what(), 1);
    } catch (const nlohmann::json::exception& e) {
        return report_error("malformed_input", e.what(), 1);
    } catch (const std::exception& e) {
        return report_error("internal", e.what(), 1);
    }
}
