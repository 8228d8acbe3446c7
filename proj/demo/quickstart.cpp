// Library walkthrough: render a small dual-view set, train a model for a few
// epochs, evaluate it and roundtrip a checkpoint.
//
//   ./quickstart [output_dir]

#include <cstdio>
#include <filesystem>

#include "dvgaze/experiment.hpp"

using namespace dvgaze;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
    const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "dvgaze_quickstart";

    // A gaze of 10 deg down and 20 deg to the side as a camera-frame vector.
    const geom::Vec3 g = geom::angles_to_vector({geom::deg2rad(10.0), geom::deg2rad(20.0)}).direction;
    std::printf("gaze vector (%.4f, %.4f, %.4f)\n", g.x(), g.y(), g.z());

    ExperimentConfig c = parse_config_text(R"({
      "rig": {"preset": "medium"},
      "render": {"out_height": 32, "out_width": 32},
      "model": {"stage_channels": [8, 16, 32], "num_dic_blocks": 3, "primary_stride": 2,
                "feature_dim": 32, "encoding_length": 4, "input_height": 32, "input_width": 32},
      "train": {"epochs": 3}
    })");

    // Two cameras 30 deg apart; every sample holds both rectified crops.
    const auto train_set = generate_samples(c.generation(300, 1));
    const auto test_set = generate_samples(c.generation(100, 2));
    const DatasetStats st = compute_stats(train_set);
    std::printf("rendered %zu + %zu samples, max nose row deviation %.4f px\n", train_set.size(), test_set.size(),
                st.max_epipolar_row_deviation_px);

    GazeNet net(c.model, Variant::from_name("dvgaze"), c.seed);
    std::printf("dvgaze: %zu parameters\n", net.parameters().scalar_count());
    const TrainResult res = train(net, train_set, c.train, [](const EpochRecord& r) {
        std::printf("  epoch %d  gaze loss %.4f  consistency %.4f  val %.2f deg\n", r.epoch, r.gaze_loss,
                    r.consistency_loss, r.val_error);
    });

    const Metrics m = evaluate(net, test_set);
    std::printf("test error: left %.2f  right %.2f  average %.2f  oracle %.2f deg\n", m.error_left, m.error_right,
                m.error_avg, m.error_oracle);

    fs::create_directories(out);
    const fs::path ckpt = out / "model.ckpt";
    save_checkpoint(ckpt, make_checkpoint(net, c.train, res.history));
    const GazeNet again = restore_model(load_checkpoint(ckpt));
    const Metrics m2 = evaluate(again, test_set);
    std::printf("reloaded %s: average %.2f deg (%s)\n", ckpt.string().c_str(), m2.error_avg,
                m2.error_avg == m.error_avg ? "identical" : "MISMATCH");
    return m2.error_avg == m.error_avg ? 0 : 1;
}
