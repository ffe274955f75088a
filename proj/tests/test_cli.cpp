#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "cgp/binary_io.hpp"
#include "cgp/data.hpp"
#include "doctest.h"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace cgp;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run(const fs::path& dir, const std::string& args, const std::string& env = "") {
    const auto log = dir / "cli.log";
    const std::string cmd = "cd '" + dir.string() + "' && " + env + " '" CGP_CLI_PATH "' " + args + " > '" +
                            log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    auto bytes = io::read_file(log.string());
    r.output.assign(bytes.begin(), bytes.end());
    return r;
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) { return io::read_file(p.string()); }

const std::string kTiny =
    "--quiet --set stage1_epochs=1 --set stage2_epochs=1 --set vit.patch_size=8 --set vit.embed_dim=16 "
    "--set vit.depth=1 --set cnn.channels=4,8";

}  // namespace

TEST_CASE("generate-data") {
    testing::TempDir dir;
    SUBCASE("defaults give five domains of 500") {
        auto r = run(dir.path(), "generate-data --out d.bin");
        REQUIRE(r.code == 0);
        auto ds = data::read_dataset((dir.path() / "d.bin").string());
        CHECK(ds.size() == 2500);
        for (int d = 0; d < 5; ++d) CHECK(ds.indices_of_domain(d).size() == 500);
    }
    SUBCASE("same seed, same bytes") {
        REQUIRE(run(dir.path(), "generate-data --out a.bin --seed 7 --per-domain 20").code == 0);
        REQUIRE(run(dir.path(), "generate-data --out b.bin --seed 7 --per-domain 20").code == 0);
        CHECK(bytes_of(dir.path() / "a.bin") == bytes_of(dir.path() / "b.bin"));
    }
    SUBCASE("range and usage errors exit 1") {
        auto r = run(dir.path(), "generate-data --out x.bin --rho-train 1.5");
        CHECK(r.code == 1);
        CHECK(r.output.find("rho-train") != std::string::npos);
        CHECK_FALSE(fs::exists(dir.path() / "x.bin"));
        CHECK(run(dir.path(), "generate-data").code == 1);
        CHECK(run(dir.path(), "").code == 1);
        CHECK(run(dir.path(), "--help").code == 0);
    }
    SUBCASE("output root from the environment") {
        auto r = run(dir.path(), "generate-data --out sub/d.bin --per-domain 2", "CGP_OUTPUT_ROOT=root");
        CHECK(r.code == 0);
        CHECK(fs::exists(dir.path() / "root" / "sub" / "d.bin"));
    }
}

TEST_CASE("train, evaluate and visualize") {
    testing::TempDir dir;
    const auto& d = dir.path();
    REQUIRE(run(d, "generate-data --out d.bin --per-domain 16 --seed 2").code == 0);

    auto train = run(d, "train --dataset d.bin --seeds 1..2 --output-dir a " + kTiny);
    REQUIRE_MESSAGE(train.code == 0, train.output);
    const auto run_dir = d / "a" / "erm+cgp";
    for (const char* f : {"config.resolved", "reports.csv", "reports.jsonl", "aggregate.txt"})
        CHECK(fs::exists(run_dir / f));
    for (const char* seed : {"seed_1", "seed_2"})
        for (const char* f : {"config.resolved", "cnn.ckpt", "vit.ckpt", "trace.csv", "report.csv", "report.jsonl"})
            CHECK(fs::exists(run_dir / seed / f));
    auto resolved = bytes_of(run_dir / "config.resolved");
    CHECK(std::string(resolved.begin(), resolved.end()).rfind("# fingerprint ", 0) == 0);

    SUBCASE("identical flags give identical bytes") {
        REQUIRE(run(d, "train --dataset d.bin --seeds 1..2 --output-dir b " + kTiny).code == 0);
        for (const char* f : {"seed_1/cnn.ckpt", "seed_1/vit.ckpt", "seed_2/trace.csv", "reports.csv"})
            CHECK(bytes_of(run_dir / f) == bytes_of(d / "b" / "erm+cgp" / f));
    }
    SUBCASE("baseline writes no ViT checkpoint") {
        REQUIRE(run(d, "train --dataset d.bin --cgp off --objective groupdro --output-dir c " + kTiny).code == 0);
        CHECK(fs::exists(d / "c" / "groupdro" / "seed_1" / "cnn.ckpt"));
        CHECK_FALSE(fs::exists(d / "c" / "groupdro" / "seed_1" / "vit.ckpt"));
    }
    SUBCASE("config file with flag override") {
        const std::string text = "objective = vrex\nseeds = 3\noutput_dir = f\n";
        io::write_file((d / "exp.cfg").string(), std::vector<std::uint8_t>(text.begin(), text.end()));
        REQUIRE(run(d, "train --config exp.cfg --dataset d.bin --objective irm " + kTiny).code == 0);
        CHECK(fs::exists(d / "f" / "irm+cgp" / "seed_3" / "trace.csv"));
    }
    SUBCASE("train errors") {
        CHECK(run(d, "train --dataset d.bin --objective dro " + kTiny).code == 1);
        CHECK(run(d, "train --dataset d.bin --set bogus=1").code == 1);
        auto missing = run(d, "train --dataset missing.bin " + kTiny);
        CHECK(missing.code == 2);
        CHECK(missing.output.find("missing.bin") != std::string::npos);
    }
    SUBCASE("evaluate is deterministic and ViT-free") {
        const auto ckpt = (run_dir / "seed_1" / "cnn.ckpt").string();
        REQUIRE(run(d, "evaluate --checkpoint '" + ckpt + "' --dataset d.bin --out e1").code == 0);
        REQUIRE(run(d, "evaluate --checkpoint '" + ckpt + "' --dataset d.bin --out e2").code == 0);
        CHECK(bytes_of(d / "e1" / "report.jsonl") == bytes_of(d / "e2" / "report.jsonl"));
        auto missing = run(d, "evaluate --checkpoint nope.ckpt --dataset d.bin");
        CHECK(missing.code == 2);
        CHECK(missing.output.find("nope.ckpt") != std::string::npos);
        const auto vit_ckpt = (run_dir / "seed_1" / "vit.ckpt").string();
        CHECK(run(d, "evaluate --checkpoint '" + vit_ckpt + "' --dataset d.bin").code == 2);
    }
    SUBCASE("visualize") {
        const auto s = run_dir / "seed_1";
        const auto args = "visualize --checkpoint '" + (s / "cnn.ckpt").string() + "' --vit-checkpoint '" +
                          (s / "vit.ckpt").string() + "' --dataset d.bin --heads 4";
        REQUIRE(run(d, args + " --n 1 --out v1").code == 0);
        std::size_t montages = 0;
        for (const auto& e : fs::directory_iterator(d / "v1")) {
            const auto name = e.path().filename().string();
            if (name.find("_montage.ppm") != std::string::npos) {
                ++montages;
                CHECK((name.rfind("train_", 0) == 0 || name.rfind("id_", 0) == 0 || name.rfind("ood_", 0) == 0));
            }
        }
        CHECK(montages == 3);
        CHECK(fs::exists(d / "v1" / "train_0_montage.ppm"));
        REQUIRE(run(d, args + " --n 0 --out v0").code == 0);
        CHECK_FALSE(fs::exists(d / "v0"));
    }
}

TEST_CASE("gradcheck") {
    testing::TempDir dir;
    auto ok = run(dir.path(), "gradcheck --scope eq3");
    CHECK(ok.code == 0);
    CHECK(ok.output.find("eq3:adaptive_weight_derivative") != std::string::npos);
    CHECK(ok.output.find("ops:") == std::string::npos);
    auto bad = run(dir.path(), "gradcheck --scope ops --fault matmul");
    CHECK(bad.code == 2);
    CHECK(bad.output.find("FAIL ops:matmul") != std::string::npos);
    CHECK(run(dir.path(), "gradcheck --scope nonsense").code == 1);
}
