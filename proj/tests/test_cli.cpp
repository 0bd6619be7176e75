#include "doctest.h"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "support/phantom.hpp"
#include "support/tempdir.hpp"
#include "volseg/cli.hpp"
#include "volseg/dataio.hpp"

using namespace volseg;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::size_t files_in(const fs::path& dir)
{
    if (!fs::is_directory(dir))
        return 0;
    return static_cast<std::size_t>(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}));
}

// Three training subjects and one test subject; tumors carry label 2 inside a lung band labelled 1.
fs::path write_dataset(const testutil::TempDir& dir, const std::string& variant)
{
    phantom::Params p;
    p.extent = {8, 16, 16};
    p.decoys = 0;
    const auto set = phantom::make_set(p, 5, 4);
    nlohmann::json doc;
    doc["variant"] = variant;
    for (std::size_t i = 0; i < set.size(); ++i) {
        LabelMask m(3, p.extent, 3);
        for (std::size_t s = 0; s < m.size(); ++s) {
            const std::size_t z = s / p.extent.plane();
            if (set[i].mask[s] == 1)
                m[s] = 2;
            else if (z >= 2 && z < 6 && (s % p.extent.width) < 12)
                m[s] = 1;
        }
        const std::string id = "m" + std::to_string(i);
        write_volume(set[i].image, dir / ("raw/" + id + "_img.npy"));
        write_mask(m, dir / ("raw/" + id + "_mask.npy"));
        nlohmann::json e{{"image_path", "raw/" + id + "_img.npy"},
                         {"mask_path", "raw/" + id + "_mask.npy"},
                         {"batch_tag", i == 1 ? "dark" : "bright"},
                         {"subject_id", id}};
        if (i == 3)
            e["split"] = "test";
        doc["entries"].push_back(e);
    }
    std::ofstream(dir / "manifest.json") << doc.dump(2);
    return dir / "manifest.json";
}

} // namespace

TEST_CASE("help and usage errors")
{
    const auto help = run({"--help"});
    CHECK(help.code == exit_ok);
    CHECK(help.out.find("prepare") != std::string::npos);
    CHECK(run({"train", "--help"}).code == exit_ok);
    CHECK(run({"--bogus"}).code == exit_usage);
    CHECK(run({"train"}).code == exit_usage);
    CHECK(run({}).code == exit_usage);
}

TEST_CASE("errors surface with a message and a non-zero exit")
{
    testutil::TempDir dir("clierr");
    std::ofstream(dir / "bad.json") << "{ not json";
    const auto r = run({"prepare", "--manifest", (dir / "bad.json").string(), "--out", (dir / "o").string()});
    CHECK(r.code != exit_ok);
    CHECK_FALSE(r.err.empty());

    const auto m = run({"predict", "--checkpoint", (dir / "bad.json").string(), "--images", dir.path().string(),
                        "--out", (dir / "p").string()});
    CHECK(m.code == exit_failure);
}

TEST_CASE("end-to-end 3D workflow")
{
    testutil::TempDir dir("cli3d");
    const auto manifest = write_dataset(dir, "tumor_3d");
    const auto data = dir / "data";

    const auto prep = run({"--seed", "3", "prepare", "--manifest", manifest.string(), "--out", data.string(),
                           "--augment-factor", "2"});
    INFO(prep.err);
    REQUIRE(prep.code == exit_ok);
    CHECK(files_in(data / "images") == 6);
    CHECK(files_in(data / "masks") == 6);
    CHECK(files_in(data / "test/images") == 1);
    CHECK(fs::exists(data / "provenance.json"));

    const auto ckpt = dir / "net.vsck";
    const auto tr = run({"--seed", "3", "train", "--data", data.string(), "--out", ckpt.string(), "--epochs", "2",
                         "--batch-size", "2", "--depth", "1", "--filters", "2"});
    INFO(tr.err);
    REQUIRE(tr.code == exit_ok);
    CHECK(fs::exists(ckpt));
    std::ifstream curve(ckpt.string() + ".loss.csv");
    std::string header;
    std::getline(curve, header);
    CHECK(header == "epoch,lr,loss");

    const auto bad_depth = run({"train", "--data", data.string(), "--out", (dir / "x.vsck").string(), "--epochs", "1",
                                "--depth", "5"});
    CHECK(bad_depth.code == exit_usage);
    CHECK(bad_depth.err.find("--depth") != std::string::npos);

    const auto pr = run({"predict", "--checkpoint", ckpt.string(), "--images", (data / "test/images").string(),
                         "--out", (dir / "pred").string()});
    INFO(pr.err);
    REQUIRE(pr.code == exit_ok);
    CHECK(files_in(dir / "pred") == 1);

    const auto serial = run({"predict", "--checkpoint", ckpt.string(), "--images", (data / "images").string(), "--out",
                             (dir / "serial").string()});
    const auto pooled = run({"--threads", "3", "predict", "--checkpoint", ckpt.string(), "--images",
                             (data / "images").string(), "--out", (dir / "pooled").string()});
    REQUIRE(serial.code == exit_ok);
    REQUIRE(pooled.code == exit_ok);
    CHECK(files_in(dir / "pooled") == 6);
    for (const auto& f : fs::directory_iterator(dir / "serial"))
        CHECK(read_mask(f.path(), 2) == read_mask(dir / "pooled" / f.path().filename(), 2));

    const auto po = run({"postprocess", "--masks", (dir / "pred").string(), "--images",
                         (data / "test/images").string(), "--out", (dir / "post").string()});
    INFO(po.err);
    REQUIRE(po.code == exit_ok);
    CHECK(files_in(dir / "post") == 1);

    const auto ev = run({"evaluate", "--pred", (dir / "pred").string(), "--post", (dir / "post").string(), "--truth",
                         (data / "test/masks").string(), "--out", (dir / "metrics.csv").string(), "--unit", "stack"});
    INFO(ev.err);
    REQUIRE(ev.code == exit_ok);
    std::ifstream csv(dir / "metrics.csv");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(csv, line))
        ++rows;
    CHECK(rows == 3);
}

TEST_CASE("2D preparation keeps only slices with labels")
{
    testutil::TempDir dir("cli2d");
    const auto manifest = write_dataset(dir, "lung_tumor_2d");
    const auto data = dir / "data";
    const auto prep = run({"prepare", "--manifest", manifest.string(), "--out", data.string(), "--no-augment"});
    INFO(prep.err);
    REQUIRE(prep.code == exit_ok);
    const auto prov = nlohmann::json::parse(std::ifstream(data / "provenance.json"));
    CHECK(prov["num_classes"] == 3);
    CHECK(files_in(data / "images") >= 12);
    CHECK(files_in(data / "images") == files_in(data / "masks"));
}
