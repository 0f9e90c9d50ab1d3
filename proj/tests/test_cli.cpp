#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string cli = PATCHFORGE_CLI_PATH;

int run(const std::string& args) {
    const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string work_dir() {
    static const std::string dir = [] {
        fs::path p = fs::temp_directory_path() / "patchforge_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p.string();
    }();
    return dir;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

int count_files(const std::string& dir, const std::string& ext) {
    int n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ext) ++n;
    return n;
}

}  // namespace

TEST_CASE("gen-data writes images, labels, manifest, and a config snapshot") {
    const std::string out = work_dir() + "/data";
    CHECK(run("gen-data --count 20 --seed 7 --image-size 64 --out " + out) == 0);
    CHECK(count_files(out, ".png") == 20);
    CHECK(fs::exists(out + "/labels.txt"));
    CHECK(fs::exists(out + "/manifest.txt"));
    CHECK(fs::exists(out + "/config_resolved.txt"));
}

TEST_CASE("gen-data is byte-reproducible for a fixed seed") {
    const std::string a = work_dir() + "/repro_a";
    const std::string b = work_dir() + "/repro_b";
    CHECK(run("gen-data --count 5 --seed 42 --image-size 64 --out " + a) == 0);
    CHECK(run("gen-data --count 5 --seed 42 --image-size 64 --out " + b) == 0);
    CHECK(slurp(a + "/labels.txt") == slurp(b + "/labels.txt"));
    CHECK(slurp(a + "/img_00003.png") == slurp(b + "/img_00003.png"));
}

TEST_CASE("usage errors exit 1, runtime failures exit 2") {
    CHECK(run("gen-data --no-such-flag --out " + work_dir() + "/x") == 1);
    CHECK(run("definitely-not-a-subcommand") == 1);
    CHECK(run("--help") == 0);
    // report on a directory without evaluation CSVs is a runtime failure
    const std::string empty = work_dir() + "/empty";
    fs::create_directories(empty);
    CHECK(run("report " + empty) == 2);
    // train on a missing dataset directory is a runtime failure
    CHECK(run("train --data " + work_dir() + "/missing --out " + work_dir() + "/w") == 2);
}

TEST_CASE("end-to-end: train, eval at three thresholds, attack, heatmap, report") {
    const std::string data = work_dir() + "/e2e_data";
    const std::string val = work_dir() + "/e2e_val";
    const std::string model = work_dir() + "/e2e_model";
    const std::string evals = work_dir() + "/e2e_eval";
    const std::string atk = work_dir() + "/e2e_attack";
    const std::string heat = work_dir() + "/e2e_heat";

    REQUIRE(run("gen-data --count 16 --seed 11 --image-size 64 --out " + data) == 0);
    REQUIRE(run("gen-data --count 6 --seed 12 --image-size 64 --out " + val) == 0);

    REQUIRE(run("train --data " + data + " --out " + model + " --epochs 3 --batch 8 --grid 4 --seed 2") == 0);
    CHECK(fs::exists(model + "/weights.pft"));
    CHECK(fs::exists(model + "/loss_history.csv"));
    CHECK(fs::exists(model + "/config_resolved.txt"));

    REQUIRE(run("eval --weights " + model + "/weights.pft --data " + val + " --out " + evals +
                " --conf 0.001 0.1 0.5 --label baseline") == 0);
    CHECK(fs::exists(evals + "/baseline_conf0.001.csv"));
    CHECK(fs::exists(evals + "/baseline_conf0.1.csv"));
    CHECK(fs::exists(evals + "/baseline_conf0.5.csv"));

    REQUIRE(run("attack --weights " + model + "/weights.pft --data " + data + " --val-data " + val + " --out " + atk +
                " --steps 1 --iters 2 --restarts 1 --batch 2 --patch-size 12 --placement topleft --fixed-scale 12"
                " --seed 3") == 0);
    CHECK(fs::exists(atk + "/best_patch.pft"));
    CHECK(fs::exists(atk + "/best_patch.png"));
    CHECK(fs::exists(atk + "/history_restart0.csv"));
    CHECK(fs::exists(atk + "/config_resolved.txt"));

    REQUIRE(run("heatmap --weights " + model + "/weights.pft --image " + val + "/img_00000.png --patch " + atk +
                "/best_patch.pft --placement topleft --fixed-scale 12 --out " + heat) == 0);
    CHECK(fs::exists(heat + "/heatmap.png"));
    CHECK(fs::exists(heat + "/heatmap.csv"));
    CHECK(fs::exists(heat + "/patched.png"));

    CHECK(run("report " + evals) == 0);
}

TEST_CASE("eval with the dpatch unclipped workflow labels reports separately") {
    // reuse the end-to-end artifacts; a second method label lands beside baseline
    const std::string data = work_dir() + "/e2e_data";
    const std::string val = work_dir() + "/e2e_val";
    const std::string model = work_dir() + "/e2e_model";
    const std::string evals = work_dir() + "/e2e_eval";
    const std::string atk2 = work_dir() + "/e2e_dpatch";
    REQUIRE(fs::exists(model + "/weights.pft"));

    REQUIRE(run("attack --weights " + model + "/weights.pft --data " + data + " --val-data " + val + " --out " + atk2 +
                " --method dpatch --no-clip --steps 1 --iters 2 --restarts 1 --batch 2 --patch-size 12"
                " --placement topleft --fixed-scale 12 --seed 4") == 0);
    REQUIRE(run("eval --weights " + model + "/weights.pft --data " + val + " --out " + evals + " --patch " + atk2 +
                "/best_patch.pft --placement topleft --fixed-scale 12 --conf 0.1 --label dpatch") == 0);
    CHECK(fs::exists(evals + "/dpatch_conf0.1.csv"));
    CHECK(run("report " + evals) == 0);
}
