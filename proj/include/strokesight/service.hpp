#pragma once

// HTTP API over the pipeline. Handlers are plain member functions returning a
// status plus JSON body so they can be called without a socket; bind() wires
// them into an httplib server.
//
// Shared state: uploaded recordings, feature caches, the active model/policy
// snapshot and the static thresholds. Snapshots are immutable and swapped
// whole under a mutex, so a request that copies the pointer once sees exactly
// one snapshot.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "strokesight/dqn.hpp"
#include "strokesight/dsp.hpp"
#include "strokesight/eeg_io.hpp"
#include "strokesight/error.hpp"
#include "strokesight/grutcn.hpp"
#include "strokesight/pipeline.hpp"
#include "strokesight/topo.hpp"

// Last: it pulls in <resolv.h>, whose _res macro collides with Eigen
// parameter names.
#include "httplib.h"

namespace strokesight::service {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

struct Options {
    std::string host = "127.0.0.1";
    int port = 8080;
    fs::path data_dir = ".";
    fs::path model;   // bundle directory; empty = none
    fs::path policy;  // policy stem; empty = none
};

/// Fills unset fields from STROKESIGHT_PORT, STROKESIGHT_DATA_DIR,
/// STROKESIGHT_MODEL and STROKESIGHT_POLICY.
inline Options apply_env(Options o)
{
    if (const char* v = std::getenv("STROKESIGHT_PORT")) o.port = std::stoi(v);
    if (const char* v = std::getenv("STROKESIGHT_DATA_DIR")) o.data_dir = v;
    if (const char* v = std::getenv("STROKESIGHT_MODEL")) o.model = v;
    if (const char* v = std::getenv("STROKESIGHT_POLICY")) o.policy = v;
    return o;
}

struct Response {
    int status = 200;
    ordered_json body;
};

inline int status_of(ErrorKind k)
{
    switch (k) {
    case ErrorKind::NotFound: return 404;
    case ErrorKind::Conflict: return 409;
    case ErrorKind::Infeasible:
    case ErrorKind::OutOfRange: return 422;
    case ErrorKind::Io:
    case ErrorKind::Divergence:
    case ErrorKind::SingularSystem: return 500;
    default: return 400;
    }
}

inline Response error_response(int status, const std::string& kind, const std::string& message)
{
    return {status, {{"error", kind}, {"message", message}}};
}

inline Response error_response(const Error& e)
{
    return error_response(status_of(e.kind()), to_string(e.kind()), e.what());
}

/// An activated model and optional threshold policy. Never mutated after
/// publication.
struct Snapshot {
    std::uint64_t version = 0;
    std::string model_id;
    std::shared_ptr<const model::ModelBundle> bundle;
    std::shared_ptr<const dqn::Policy> policy;
};

struct AuditEntry {
    std::size_t seq = 0;
    dqn::Thresholds previous{};
    dqn::Thresholds tau{};
    std::string reason;
};

/// Stable 64-bit FNV-1a, used to name feature caches.
inline std::uint64_t fnv1a(std::string_view s)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string feature_id_for(const std::string& recording_id, const pipeline::PreprocessOptions& o)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(pipeline::to_json(o).dump())));
    return recording_id + "-" + std::string(buf, 8);
}

class Service {
public:
    explicit Service(Options opts) : opts_(std::move(opts))
    {
        fs::create_directories(recordings_dir());
        fs::create_directories(features_dir());
        if (!opts_.model.empty()) activate(opts_.model, opts_.policy);
    }

    const Options& options() const { return opts_; }
    fs::path recordings_dir() const { return opts_.data_dir / "recordings"; }
    fs::path features_dir() const { return opts_.data_dir / "features"; }

    // -- snapshots ---------------------------------------------------------

    std::shared_ptr<const Snapshot> snapshot() const
    {
        std::lock_guard lock(snapshot_mutex_);
        return snapshot_;
    }

    std::uint64_t activate(std::shared_ptr<const model::ModelBundle> bundle, std::shared_ptr<const dqn::Policy> policy,
                           std::string id)
    {
        if (!bundle) fail(ErrorKind::InvalidArgument, "activate: no bundle");
        auto s = std::make_shared<Snapshot>();
        s->bundle = std::move(bundle);
        s->policy = std::move(policy);
        s->model_id = std::move(id);
        std::lock_guard lock(snapshot_mutex_);
        s->version = ++versions_;
        snapshot_ = std::move(s);
        return snapshot_->version;
    }

    std::uint64_t activate(const fs::path& model_dir, const fs::path& policy_stem)
    {
        if (!fs::exists(model_dir / "bundle.json")) fail(ErrorKind::NotFound, "no model bundle in " + model_dir.string());
        if (!policy_stem.empty() && !fs::exists(policy_stem.string() + ".policy.json"))
            fail(ErrorKind::NotFound, "no threshold policy at " + policy_stem.string());
        auto bundle = std::make_shared<const model::ModelBundle>(model::load_bundle(model_dir));
        std::shared_ptr<const dqn::Policy> policy;
        if (!policy_stem.empty()) policy = std::make_shared<const dqn::Policy>(dqn::load_policy(policy_stem));
        return activate(std::move(bundle), std::move(policy), model_dir.string());
    }

    // -- recordings --------------------------------------------------------

    Response post_recording(const nlohmann::json& manifest, std::string_view payload)
    {
        auto rec = recording_from_container(manifest, payload);
        const auto id = rec.recording_id;
        if (id.empty() || id.find_first_of("/\\") != std::string::npos || id.front() == '.')
            fail(ErrorKind::InvalidArgument, "recording_id must be a plain file name");
        auto lock = lock_recording(id);
        const auto stem = recordings_dir() / id;
        if (fs::exists(stem.string() + ".json")) {
            if (read_file(stem.string() + ".f32") == encode_samples(rec.samples) &&
                nlohmann::json::parse(read_file(stem.string() + ".json")) == manifest_json(rec))
                return {200, {{"id", id}, {"created", false}}};
            fail(ErrorKind::Conflict, "recording " + id + " already exists with different content");
        }
        write_recording(rec, recordings_dir());
        {
            std::unique_lock g(state_mutex_);
            recordings_[id] = std::make_shared<const Recording>(std::move(rec));
        }
        return {201, {{"id", id}, {"created", true}}};
    }

    Response get_recording(const std::string& id)
    {
        const auto rec = recording(id);
        ordered_json j = manifest_json(*rec);
        j["duration_s"] = rec->duration_s();
        return {200, j};
    }

    // -- preprocessing -----------------------------------------------------

    Response preprocess(const std::string& recording_id, const pipeline::PreprocessOptions& o)
    {
        const auto fid = feature_id_for(recording_id, o);
        auto lock = lock_recording(recording_id);
        if (auto f = cached_features(fid)) return {200, preprocess_summary(fid, *f, o, true)};
        const auto rec = recording(recording_id);
        const auto cfg = pipeline::preprocess_config(o);
        auto f = std::make_shared<const dsp::RecordingFeatures>(dsp::preprocess_recording(*rec, cfg));
        write_file(features_dir() / (fid + ".json"), dsp::to_json(*f).dump());
        {
            std::unique_lock g(state_mutex_);
            features_[fid] = f;
        }
        return {200, preprocess_summary(fid, *f, o, false)};
    }

    // -- prediction --------------------------------------------------------

    Response predict(const std::string& feature_id, pipeline::Mode mode)
    {
        const auto snap = snapshot();
        if (!snap) fail(ErrorKind::Conflict, "no model is active");
        const auto f = features(feature_id);
        auto j = pipeline::predict_json(*snap->bundle, *f, mode, static_thresholds(), snap->policy.get());
        j["feature_id"] = feature_id;
        j["model_version"] = snap->version;
        j["model_id"] = snap->model_id;
        return {200, j};
    }

    // -- topography --------------------------------------------------------

    Response topomap(const std::string& feature_id, const std::string& band, std::size_t segment)
    {
        const auto f = features(feature_id);
        if (segment >= f->segments.size())
            fail(ErrorKind::NotFound, "segment " + std::to_string(segment) + " does not exist");
        const auto grid = topo::render_band(f->segments[segment].powers, f->channel_names, band);
        ordered_json j = topo::to_json(grid);
        j["feature_id"] = feature_id;
        j["segment"] = segment;
        return {200, j};
    }

    // -- thresholds --------------------------------------------------------

    dqn::Thresholds static_thresholds() const
    {
        std::shared_lock g(state_mutex_);
        return static_tau_;
    }

    Response get_thresholds() const
    {
        const auto snap = snapshot();
        std::shared_lock g(state_mutex_);
        ordered_json j;
        j["static"] = static_tau_;
        j["source"] = audit_.empty() ? "default" : "manual";
        j["policy"] = snap && snap->policy ? ordered_json(snap->policy->tau) : ordered_json(nullptr);
        j["bounds"] = {dqn::kTauMin, dqn::kTauMax};
        j["audit"] = ordered_json::array();
        for (const auto& a : audit_)
            j["audit"].push_back({{"seq", a.seq}, {"previous", a.previous}, {"tau", a.tau}, {"reason", a.reason}});
        return {200, j};
    }

    Response put_thresholds(const std::vector<double>& tau, const std::string& reason)
    {
        if (tau.size() != dqn::kClasses) fail(ErrorKind::InvalidArgument, "tau must hold exactly 3 values");
        for (double t : tau)
            if (!(t >= dqn::kTauMin && t <= dqn::kTauMax))
                fail(ErrorKind::OutOfRange, "thresholds must lie in [0.2, 0.9]");
        AuditEntry e;
        std::copy(tau.begin(), tau.end(), e.tau.begin());
        e.reason = reason;
        {
            std::unique_lock g(state_mutex_);
            e.previous = static_tau_;
            e.seq = audit_.size() + 1;
            static_tau_ = e.tau;
            audit_.push_back(e);
        }
        std::ofstream log(opts_.data_dir / "thresholds_audit.jsonl", std::ios::app);
        log << nlohmann::json{{"seq", e.seq}, {"previous", e.previous}, {"tau", e.tau}, {"reason", e.reason}}.dump() << '\n';
        return get_thresholds();
    }

    // -- reports -----------------------------------------------------------

    Response report(const std::string& split) const
    {
        const auto s = parse_split(split);
        const auto p = opts_.data_dir / "reports" / (std::string(to_string(s)) + ".json");
        if (!fs::exists(p)) fail(ErrorKind::NotFound, "no report for split " + split + "; run eval first");
        return {200, ordered_json::parse(read_file(p))};
    }

    Response model_info() const
    {
        const auto snap = snapshot();
        if (!snap) return {200, {{"active", false}}};
        ordered_json tasks = ordered_json::object();
        for (const auto& [t, meta] : snap->bundle->meta)
            tasks[model::to_string(t)] = {{"epochs_run", meta.epochs_run}, {"best_epoch", meta.best_epoch},
                                          {"best_val_macro_f1", meta.best_val_f1}, {"seed", meta.seed}};
        return {200, {{"active", true}, {"version", snap->version}, {"model_id", snap->model_id},
                      {"policy", static_cast<bool>(snap->policy)}, {"tasks", tasks}}};
    }

    // -- HTTP wiring -------------------------------------------------------

    void bind(httplib::Server& srv)
    {
        srv.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"status":"ok"})", "application/json");
        });
        srv.Post("/recordings", [this](const httplib::Request& req, httplib::Response& res) {
            run(res, [&] {
                if (!req.is_multipart_form_data() || !req.has_file("manifest") || !req.has_file("samples"))
                    fail(ErrorKind::MalformedInput, "expected multipart form with 'manifest' and 'samples' parts");
                return post_recording(parse_body(req.get_file_value("manifest").content),
                                      req.get_file_value("samples").content);
            });
        });
        srv.Get(R"(/recordings/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            run(res, [&] { return get_recording(req.matches[1].str()); });
        });
        srv.Post("/preprocess", [this](const httplib::Request& req, httplib::Response& res) {
            run(res, [&] {
                const auto j = parse_body(req.body);
                pipeline::PreprocessOptions o;
                o.high_pass_hz = j.value("high_pass_hz", o.high_pass_hz);
                o.notch_50hz = j.value("notch_50hz", o.notch_50hz);
                o.window_s = j.value("window_s", o.window_s);
                return preprocess(required_string(j, "recording_id"), o);
            });
        });
        srv.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
            run(res, [&] {
                const auto j = parse_body(req.body);
                return predict(required_string(j, "feature_id"), pipeline::parse_mode(j.value("mode", "static")));
            });
        });
        srv.Get("/topomap", [this](const httplib::Request& req, httplib::Response& res) {
            run(res, [&] {
                if (!req.has_param("feature_id") || !req.has_param("band"))
                    fail(ErrorKind::InvalidArgument, "topomap needs feature_id and band");
                std::size_t segment = 0;
                if (req.has_param("segment")) segment = parse_index(req.get_param_value("segment"));
                return topomap(req.get_param_value("feature_id"), req.get_param_value("band"), segment);
            });
        });
        srv.Get("/thresholds", [this](const httplib::Request&, httplib::Response& res) {
            run(res, [&] { return get_thresholds(); });
        });
        srv.Put("/thresholds", [this](const httplib::Request& req, httplib::Response& res) {
            run(res, [&] {
                const auto j = parse_body(req.body);
                if (!j.contains("tau") || !j["tau"].is_array()) fail(ErrorKind::InvalidArgument, "body needs a 'tau' array");
                std::vector<double> tau;
                for (const auto& v : j["tau"]) {
                    if (!v.is_number()) fail(ErrorKind::InvalidArgument, "tau entries must be numbers");
                    tau.push_back(v.get<double>());
                }
                return put_thresholds(tau, j.value("reason", ""));
            });
        });
        srv.Get(R"(/report/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            run(res, [&] { return report(req.matches[1].str()); });
        });
        srv.Get("/model", [this](const httplib::Request&, httplib::Response& res) {
            run(res, [&] { return model_info(); });
        });
        srv.Post("/model/activate", [this](const httplib::Request& req, httplib::Response& res) {
            run(res, [&] {
                const auto j = parse_body(req.body);
                activate(fs::path(required_string(j, "model")), fs::path(j.value("policy", "")));
                return model_info();
            });
        });
    }

private:
    template <class F>
    static void run(httplib::Response& res, F&& handler)
    {
        Response r;
        try {
            r = handler();
        } catch (const Error& e) {
            r = error_response(e);
        } catch (const nlohmann::json::exception& e) {
            r = error_response(400, "malformed_input", e.what());
        } catch (const std::exception& e) {
            r = error_response(500, "internal", e.what());
        }
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    }

    static nlohmann::json parse_body(const std::string& body)
    {
        try {
            auto j = nlohmann::json::parse(body);
            if (!j.is_object()) fail(ErrorKind::MalformedInput, "request body must be a JSON object");
            return j;
        } catch (const nlohmann::json::parse_error& e) {
            fail(ErrorKind::MalformedInput, std::string("request body is not JSON: ") + e.what());
        }
    }

    static std::string required_string(const nlohmann::json& j, const char* key)
    {
        if (!j.contains(key) || !j[key].is_string()) fail(ErrorKind::InvalidArgument, std::string("missing string field '") + key + "'");
        return j[key].get<std::string>();
    }

    static std::size_t parse_index(const std::string& s)
    {
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
            fail(ErrorKind::InvalidArgument, "segment must be a non-negative integer");
        return std::stoul(s);
    }

    std::unique_lock<std::mutex> lock_recording(const std::string& id)
    {
        std::shared_ptr<std::mutex> m;
        {
            std::lock_guard g(locks_mutex_);
            auto& slot = recording_locks_[id];
            if (!slot) slot = std::make_shared<std::mutex>();
            m = slot;
        }
        // The map keeps the mutex alive for the lifetime of the service.
        return std::unique_lock<std::mutex>(*m);
    }

    std::shared_ptr<const Recording> recording(const std::string& id)
    {
        {
            std::shared_lock g(state_mutex_);
            if (auto it = recordings_.find(id); it != recordings_.end()) return it->second;
        }
        const auto stem = recordings_dir() / id;
        if (id.find_first_of("/\\") != std::string::npos || !fs::exists(stem.string() + ".json"))
            fail(ErrorKind::NotFound, "unknown recording " + id);
        auto rec = std::make_shared<const Recording>(load_recording(stem));
        std::unique_lock g(state_mutex_);
        return recordings_.emplace(id, std::move(rec)).first->second;
    }

    std::shared_ptr<const dsp::RecordingFeatures> cached_features(const std::string& fid)
    {
        {
            std::shared_lock g(state_mutex_);
            if (auto it = features_.find(fid); it != features_.end()) return it->second;
        }
        const auto p = features_dir() / (fid + ".json");
        if (fid.find_first_of("/\\") != std::string::npos || !fs::exists(p)) return nullptr;
        auto f = std::make_shared<const dsp::RecordingFeatures>(dsp::recording_features_from_json(nlohmann::json::parse(read_file(p))));
        std::unique_lock g(state_mutex_);
        return features_.emplace(fid, std::move(f)).first->second;
    }

    std::shared_ptr<const dsp::RecordingFeatures> features(const std::string& fid)
    {
        auto f = cached_features(fid);
        if (!f) fail(ErrorKind::NotFound, "unknown feature id " + fid);
        return f;
    }

    static ordered_json preprocess_summary(const std::string& fid, const dsp::RecordingFeatures& f,
                                           const pipeline::PreprocessOptions& o, bool cached)
    {
        ordered_json j;
        j["feature_id"] = fid;
        j["recording_id"] = f.recording_id;
        j["cached"] = cached;
        j["options"] = pipeline::to_json(o);
        j["n_segments"] = f.segments.size();
        j["padded"] = ordered_json::array();
        for (const auto& s : f.segments) j["padded"].push_back(s.padded);
        // Mean log10(1 + power) per sub-band across channels and segments.
        const std::size_t nb = f.bands.n_bands();
        std::vector<double> mean(nb, 0.0);
        std::size_t n = 0;
        for (const auto& s : f.segments)
            for (std::size_t c = 0; c < s.powers.n_channels; ++c, ++n)
                for (std::size_t b = 0; b < nb; ++b) mean[b] += s.log_features[c * nb + b];
        for (auto& v : mean) v /= static_cast<double>(std::max<std::size_t>(n, 1));
        j["band_edges_hz"] = f.bands.edges_hz;
        j["mean_log_power"] = mean;
        return j;
    }

    Options opts_;
    mutable std::mutex snapshot_mutex_;
    std::shared_ptr<const Snapshot> snapshot_;
    std::uint64_t versions_ = 0;

    mutable std::shared_mutex state_mutex_;
    std::map<std::string, std::shared_ptr<const Recording>> recordings_;
    std::map<std::string, std::shared_ptr<const dsp::RecordingFeatures>> features_;
    dqn::Thresholds static_tau_ = dqn::uniform_thresholds();
    std::vector<AuditEntry> audit_;

    std::mutex locks_mutex_;
    std::map<std::string, std::shared_ptr<std::mutex>> recording_locks_;
};

/// Blocking server loop.
inline void serve(Service& svc)
{
    httplib::Server srv;
    svc.bind(srv);
    if (!srv.listen(svc.options().host, svc.options().port))
        fail(ErrorKind::Io, "cannot listen on " + svc.options().host + ":" + std::to_string(svc.options().port));
}

} // namespace strokesight::service
