// Library walkthrough on a small synthetic cohort: generate, preprocess,
// train briefly, evaluate, then render one topography and one prediction.
//
//   quickstart [workdir]

#include <iostream>

#include "strokesight/pipeline.hpp"
#include "strokesight/topo.hpp"

using namespace strokesight;

int main(int argc, char** argv)
{
    const pipeline::Layout L{argc > 1 ? argv[1] : "quickstart_run"};
    try {
        const auto manifest = pipeline::synthesize(L, {30, 1});
        std::cout << "cohort: " << manifest.entries.size() << " patients in " << L.root << "\n";

        pipeline::preprocess_cohort(L, L, {});
        const auto cohort = pipeline::load_cohort(L);

        model::TrainConfig tc;
        tc.max_epochs = 60;
        tc.patience = 15;
        tc.seed = 1;
        auto trained = pipeline::train_bundle(cohort, tc);
        for (const auto& [task, meta] : trained.bundle.meta)
            std::cout << model::to_string(task) << ": " << meta.epochs_run << " epochs, validation macro-F1 " << meta.best_val_f1 << "\n";

        const auto ev = pipeline::evaluate_split(cohort, trained.bundle, Split::Test);
        const auto report = pipeline::report_json(ev, {500, 1, 15});
        std::cout << "test macro-F1: " << report.at("macro_f1").dump() << "\n";

        // Alpha-band map of the first hemorrhagic test recording.
        for (const auto& f : cohort.features) {
            if (cohort.split_of(f) != Split::Test || f.labels.stroke_type != StrokeType::Hemorrhagic) continue;
            const auto grid = topo::render_band(f.segments.front().powers, f.channel_names, "alpha");
            const auto [row, col] = grid.argmax_cell();
            std::cout << f.recording_id << " alpha peak at x=" << grid.x_of(col) << " y=" << grid.y_of(row) << "\n";
            const auto pred = pipeline::predict_json(trained.bundle, f, pipeline::Mode::Static, dqn::uniform_thresholds(), nullptr);
            for (const auto& [task, tj] : pred.at("tasks").items())
                std::cout << "  " << task << ": " << tj.at("label").get<std::string>() << "\n";
            break;
        }
    } catch (const Error& e) {
        std::cerr << to_string(e.kind()) << ": " << e.what() << "\n";
        return 1;
    }
}
