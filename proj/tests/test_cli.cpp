#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "difflab/config.hpp"
#include "difflab/serialize.hpp"
#include "difflab/synthdata.hpp"

using namespace difflab;

// The runner binary is exercised as a subprocess: every case goes through the
// real argv parsing, config loading, artifact checks, and exit-status logic.

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("difflab_cli_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

int run_cli(const std::string& args, const std::string& stderr_file = "/dev/null") {
    const std::string cmd = std::string(DIFFLAB_CLI_PATH) + " " + args +
                            " >/dev/null 2>" + stderr_file;
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& body) {
    std::ofstream f(path, std::ios::binary);
    f << body;
}

// one shared tiny pipeline: dataset, classifier, denoiser, embeddings; built
// once because the subprocess runs dominate this suite's wall clock
struct Pipeline {
    TempDir dir;
    std::string data, cls, den, emb;

    Pipeline() {
        data = dir.file("data");
        cls = dir.file("cls");
        den = dir.file("den");
        emb = dir.file("emb");
        write_file(dir.file("gen.ini"),
                   "[run]\nseed = 5\n[data]\nn = 32\n");
        write_file(dir.file("cls.ini"),
                   "[run]\nseed = 5\n"
                   "[data]\ndir = " + data + "\nattribute = stripe\n"
                   "[train]\nepochs = 60\nbatch = 8\n");
        write_file(dir.file("den.ini"),
                   "[run]\nseed = 5\n"
                   "[data]\ndir = " + data + "\nattribute = combo\n"
                   "[denoiser]\nhidden = 48\nblocks = 1\n"
                   "[schedule]\nsteps = 100\nbeta_min = 0.001\nbeta_max = 0.03\n"
                   "[train]\nepochs = 10\nbatch = 8\n");
        write_file(dir.file("emb.ini"),
                   "[run]\nseed = 5\n"
                   "[data]\ndir = " + data + "\nattribute = stripe\n"
                   "[artifacts]\ndenoiser = " + den + "/denoiser.bin\n"
                   "classifier = " + cls + "/classifier.bin\n"
                   "[edit]\nsteps = 8\nn_tokens = 2\n"
                   "[train]\niters = 3\nbatch = 6\n");
        REQUIRE(run_cli("gen-data --config " + dir.file("gen.ini") + " --out " + data) == 0);
        REQUIRE(run_cli("train-classifier --config " + dir.file("cls.ini") + " --out " + cls) == 0);
        REQUIRE(run_cli("train-denoiser --config " + dir.file("den.ini") + " --out " + den) == 0);
        REQUIRE(run_cli("learn-embedding --config " + dir.file("emb.ini") + " --out " + emb) == 0);
    }

    std::string edit_config(const std::string& extra) const {
        return "[run]\nseed = 5\n"
               "[data]\ndir = " + data + "\n"
               "[artifacts]\ndenoiser = " + den + "/denoiser.bin\n"
               "classifier = " + cls + "/classifier.bin\n"
               "embedding = " + emb + "/embedding_c1.bin\n" + extra;
    }
};

Pipeline& pipeline() {
    static Pipeline p;
    return p;
}

}  // namespace

TEST_CASE("data generation writes a reloadable fingerprinted dataset") {
    Pipeline& p = pipeline();
    CHECK(std::filesystem::exists(p.data + "/labels.csv"));
    CHECK(std::filesystem::exists(p.data + "/dataset.meta"));
    CHECK(std::filesystem::exists(p.data + "/preview.pgm"));
    CHECK(std::filesystem::exists(p.data + "/img_00031.pgm"));
    CHECK(std::filesystem::exists(p.data + "/run.ini"));

    ShapesDataset ds = load_shapes(p.data);
    CHECK(ds.size() == 32);
    CHECK(ds.seed == 5);
    Config meta = Config::load(p.data + "/dataset.meta");
    CHECK(meta.get_str("dataset", "fingerprint") ==
          fingerprint_hex(shapes_fingerprint(ds)));
}

TEST_CASE("run manifest lists the command, real inputs, and real outputs") {
    Pipeline& p = pipeline();
    Config manifest = Config::load(p.emb + "/run.ini");
    CHECK(manifest.get_str("run", "command") == "learn-embedding");
    CHECK(manifest.get_int("run", "seed") == 5);
    // every declared output exists (the manifest is written last)
    for (const std::string& key : manifest.keys("outputs")) {
        CHECK(std::filesystem::exists(manifest.get_str("outputs", key)));
    }
    // input fingerprints are 16 hex digits
    for (const std::string& key : manifest.keys("inputs")) {
        if (key.size() > 11 && key.substr(key.size() - 11) == "fingerprint") {
            CHECK(manifest.get_str("inputs", key).size() == 16);
        }
    }
    CHECK(manifest.has("run", "wall_seconds"));
    CHECK(manifest.has("metrics", "heldout_success"));
    // per-class embedding artifacts with their own provenance manifests
    CHECK(std::filesystem::exists(p.emb + "/embedding_c0.bin.meta"));
    CHECK(std::filesystem::exists(p.emb + "/embedding_c1.bin.meta"));
}

TEST_CASE("rerunning a verb from the same seed is byte-identical") {
    Pipeline& p = pipeline();
    const std::string cfg = p.dir.file("edit.ini");
    write_file(cfg, p.edit_config("[edit]\nlambdas = 0,7\nsteps = 8\nn_images = 4\n"));
    const std::string a = p.dir.file("edit_a");
    const std::string b = p.dir.file("edit_b");
    REQUIRE(run_cli("edit --config " + cfg + " --out " + a) == 0);
    REQUIRE(run_cli("edit --config " + cfg + " --out " + b) == 0);
    const std::string va = slurp(a + "/verdicts.csv");
    CHECK(!va.empty());
    CHECK(va == slurp(b + "/verdicts.csv"));
    CHECK(slurp(a + "/edited_multi_l7.pgm") == slurp(b + "/edited_multi_l7.pgm"));

    // a second embedding run from the same seed reproduces the loss curve too
    const std::string emb2 = p.dir.file("emb2");
    REQUIRE(run_cli("learn-embedding --config " + p.dir.file("emb.ini") +
                    " --out " + emb2) == 0);
    CHECK(slurp(p.emb + "/losses.csv") == slurp(emb2 + "/losses.csv"));
    CHECK(slurp(p.emb + "/embedding_c1.bin") == slurp(emb2 + "/embedding_c1.bin"));
}

TEST_CASE("zero guidance rows are marked reconstruction in the verdict table") {
    Pipeline& p = pipeline();
    const std::string out = p.dir.file("edit_a");  // produced above
    std::ifstream f(out + "/verdicts.csv");
    REQUIRE(f.good());
    std::string line;
    std::getline(f, line);
    CHECK(line == "image,lambda,mode,verdict,predicted,target,success");
    int recon = 0;
    int edits = 0;
    while (std::getline(f, line)) {
        if (line.find(",0,multi,") != std::string::npos) {
            CHECK(line.find("reconstruction") != std::string::npos);
            ++recon;
        }
        if (line.find(",7,multi,edit,") != std::string::npos) ++edits;
    }
    CHECK(recon == 4);
    CHECK(edits == 4);
    Config manifest = Config::load(out + "/run.ini");
    CHECK(manifest.get_real("metrics", "recon_mse") >= 0.0);
    CHECK(manifest.has("metrics", "edit_success_l7"));
}

TEST_CASE("the seed flag overrides the config seed") {
    Pipeline& p = pipeline();
    const std::string other = p.dir.file("data11");
    REQUIRE(run_cli("gen-data --config " + p.dir.file("gen.ini") + " --seed 11 --out " +
                    other) == 0);
    Config a = Config::load(p.data + "/dataset.meta");
    Config b = Config::load(other + "/dataset.meta");
    CHECK(b.get_int("dataset", "seed") == 11);
    CHECK(a.get_str("dataset", "fingerprint") != b.get_str("dataset", "fingerprint"));

    // explicit --seed equal to the config seed reproduces the run exactly
    const std::string same = p.dir.file("data5");
    REQUIRE(run_cli("gen-data --config " + p.dir.file("gen.ini") + " --seed 5 --out " +
                    same) == 0);
    CHECK(slurp(same + "/labels.csv") == slurp(p.data + "/labels.csv"));
    CHECK(slurp(same + "/dataset.meta") == slurp(p.data + "/dataset.meta"));
}

TEST_CASE("missing artifacts fail with the offending path in the message") {
    Pipeline& p = pipeline();
    const std::string cfg = p.dir.file("edit_missing.ini");
    write_file(cfg, "[run]\nseed = 5\n"
                    "[data]\ndir = " + p.data + "\n"
                    "[artifacts]\ndenoiser = " + p.den + "/denoiser.bin\n"
                    "embedding = " + p.emb + "/embedding_c9.bin\n");
    const std::string log = p.dir.file("missing_err.txt");
    CHECK(run_cli("edit --config " + cfg + " --out " + p.dir.file("edit_m"), log) != 0);
    const std::string err = slurp(log);
    CHECK(err.find("embedding_c9.bin") != std::string::npos);

    CHECK(run_cli("gen-data --config " + p.dir.file("nope.ini") + " --out " +
                  p.dir.file("x"), log) != 0);
    CHECK(slurp(log).find("nope.ini") != std::string::npos);
}

TEST_CASE("a tampered dataset manifest is refused") {
    Pipeline& p = pipeline();
    const std::string copy = p.dir.file("data_tampered");
    std::filesystem::copy(p.data, copy);
    std::string meta = slurp(copy + "/dataset.meta");
    const std::size_t pos = meta.find("seed = 5");
    REQUIRE(pos != std::string::npos);
    meta.replace(pos, 8, "seed = 6");
    write_file(copy + "/dataset.meta", meta);

    const std::string cfg = p.dir.file("cls_tampered.ini");
    write_file(cfg, "[run]\nseed = 5\n[data]\ndir = " + copy +
                    "\nattribute = stripe\n[train]\nepochs = 2\nbatch = 8\n");
    const std::string log = p.dir.file("tamper_err.txt");
    CHECK(run_cli("train-classifier --config " + cfg + " --out " +
                  p.dir.file("cls_t"), log) != 0);
    CHECK(slurp(log).find("refusing") != std::string::npos);
}

TEST_CASE("models trained against another dataset are refused") {
    Pipeline& p = pipeline();
    const std::string other = p.dir.file("data11");  // generated above, seed 11
    REQUIRE(std::filesystem::exists(other + "/dataset.meta"));
    const std::string cfg = p.dir.file("emb_mismatch.ini");
    write_file(cfg, "[run]\nseed = 5\n"
                    "[data]\ndir = " + other + "\nattribute = stripe\n"
                    "[artifacts]\ndenoiser = " + p.den + "/denoiser.bin\n"
                    "classifier = " + p.cls + "/classifier.bin\n"
                    "[train]\niters = 1\nbatch = 4\n");
    const std::string log = p.dir.file("mismatch_err.txt");
    CHECK(run_cli("learn-embedding --config " + cfg + " --out " +
                  p.dir.file("emb_mm"), log) != 0);
    const std::string err = slurp(log);
    CHECK(err.find("fingerprint mismatch") != std::string::npos);
    CHECK(err.find("refusing silent reuse") != std::string::npos);
}

TEST_CASE("divergent training exits nonzero and leaves no manifest") {
    Pipeline& p = pipeline();
    const std::string cfg = p.dir.file("den_bad.ini");
    write_file(cfg, "[run]\nseed = 5\n[data]\ndir = " + p.data +
                    "\n[schedule]\nsteps = 100\n"
                    "[train]\nepochs = 3\nbatch = 8\nlr = 1e200\n");
    const std::string out = p.dir.file("den_bad");
    const std::string log = p.dir.file("nan_err.txt");
    CHECK(run_cli("train-denoiser --config " + cfg + " --out " + out, log) != 0);
    CHECK(slurp(log).find("diverged") != std::string::npos);
    CHECK_FALSE(std::filesystem::exists(out + "/run.ini"));
}

TEST_CASE("diagnose writes geometry and gap reports from saved artifacts") {
    Pipeline& p = pipeline();
    const std::string cfg = p.dir.file("diag.ini");
    write_file(cfg, "[run]\nseed = 5\n"
                    "[data]\ndir = " + p.data + "\nattribute = stripe\n"
                    "[artifacts]\nclassifier = " + p.cls + "/classifier.bin\n"
                    "denoiser = " + p.den + "/denoiser.bin\n"
                    "embeddings = " + p.emb + "\n"
                    "[edit]\nsteps = 8\n"
                    "[diagnose]\nn_probe = 6\nn_images = 8\n");
    const std::string out = p.dir.file("diag");
    REQUIRE(run_cli("diagnose --config " + cfg + " --out " + out) == 0);
    Config summary = Config::load(out + "/collapse.txt");
    CHECK(summary.get_int("collapse", "classes") == 2);
    Config gap = Config::load(out + "/jensen_gap.txt");
    CHECK(gap.get_real("jensen_gap", "bound") >= 0.0);
    const std::string table = slurp(out + "/generated_alignment.csv");
    CHECK(table.find("class,cos_single,cos_multi") == 0);
    Config manifest = Config::load(out + "/run.ini");
    CHECK(manifest.has("metrics", "collapse_ratio"));
    CHECK(manifest.has("metrics", "generated_min_cos_multi"));
}

TEST_CASE("the config echo alone reproduces a run") {
    Pipeline& p = pipeline();
    // rerun gen-data from the copied config inside the first run directory
    const std::string out = p.dir.file("data_echo");
    REQUIRE(run_cli("gen-data --config " + p.data + "/config.ini --out " + out) == 0);
    CHECK(slurp(out + "/labels.csv") == slurp(p.data + "/labels.csv"));
}
