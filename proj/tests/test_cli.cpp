#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dualpath/cli.hpp"
#include "dualpath/trainer.hpp"

using namespace dualpath;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string replaced(std::string text, const std::string& from, const std::string& to) {
  const auto at = text.find(from);
  REQUIRE(at != std::string::npos);
  return text.replace(at, from.size(), to);
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

struct Workspace {
  fs::path root;
  fs::path corpus_cfg, stage1_cfg, stage2_cfg;

  explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / "dualpath_cli_tests" / name) {
    fs::remove_all(root);
    fs::create_directories(root);
    corpus_cfg = root / "corpus.cfg";
    std::ofstream(corpus_cfg) << "colors=4\nshapes=3\ncounts=3\nbackgrounds=2\ntrain_groups=8\nval_groups=4\n"
                                 "test_groups=4\nimage_size=16\nseed=3\n";
    const std::string model =
        "lr=0.01\nbatch_size=8\nembed_dim=16\nword_embed_dim=4\nimage_channels=4,8\ntext_channels=4,8\n"
        "text_length=16\nimage_size=16\ndropout=0.2\n";
    stage1_cfg = root / "stage1.cfg";
    std::ofstream(stage1_cfg) << "stage=1\nepochs=2\n" << model;
    stage2_cfg = root / "stage2.cfg";
    std::ofstream(stage2_cfg) << "stage=2\nepochs=2\n" << model;
  }

  fs::path out() const { return root / "out"; }
  std::string o() const { return out().string(); }

  void prepare() {
    REQUIRE(run({"gen-corpus", "--out", o(), "--config", corpus_cfg.string()}).code == 0);
    REQUIRE(run({"build-vocab", "--out", o()}).code == 0);
  }
};

}  // namespace

TEST_CASE("full pipeline emits every artifact under one directory") {
  Workspace ws("pipeline");
  ws.prepare();
  CHECK(fs::exists(ws.out() / "corpus" / "captions.tsv"));
  CHECK(fs::exists(ws.out() / "vocab.tsv"));

  Result s1 = run({"train", "--stage", "1", "--out", ws.o(), "--config", ws.stage1_cfg.string()});
  INFO(s1.err);
  REQUIRE(s1.code == 0);
  for (const char* f : {"checkpoint.bin", "train_log.tsv", "config.txt"}) CHECK(fs::exists(ws.out() / "stage1" / f));
  CHECK(count_lines(slurp(ws.out() / "stage1" / "train_log.tsv")) == 3);

  Result s2 = run({"train", "--stage", "2", "--out", ws.o(), "--config", ws.stage2_cfg.string()});
  INFO(s2.err);
  REQUIRE(s2.code == 0);
  CHECK(fs::exists(ws.out() / "stage2" / "checkpoint.bin"));

  REQUIRE(run({"eval", "--out", ws.o(), "--split", "val"}).code == 0);
  for (const char* f : {"report.tsv", "report.txt", "histogram.tsv"}) CHECK(fs::exists(ws.out() / "eval" / "val" / f));
  const std::string report = slurp(ws.out() / "eval" / "val" / "report.tsv");
  CHECK(report.find("R@1\timage_to_text") != std::string::npos);

  REQUIRE(run({"embed", "--out", ws.o(), "--split", "val"}).code == 0);
  CHECK(fs::exists(ws.out() / "embed" / "val.bank"));
  REQUIRE(run({"eval", "--out", ws.o(), "--split", "val", "--overwrite", "--bank",
               (ws.out() / "embed" / "val.bank").string()})
              .code == 0);
  CHECK(slurp(ws.out() / "eval" / "val" / "report.tsv") == report);

  REQUIRE(run({"probe-words", "--out", ws.o(), "--split", "test"}).code == 0);
  CHECK(fs::exists(ws.out() / "probe" / "test" / "word_importance.tsv"));
  CHECK(fs::exists(ws.out() / "probe" / "test" / "summary.txt"));
}

TEST_CASE("compare-losses writes a joint report") {
  Workspace ws("compare");
  ws.prepare();
  Result r = run({"compare-losses", "--out", ws.o(), "--config", ws.stage1_cfg.string(), "--config",
                  ws.stage2_cfg.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const std::string joint = slurp(ws.out() / "compare" / "report.tsv");
  for (const char* v : {"rank_only\tR@1\timage_to_text", "instance_only\tS\tboth", "full\tR@1\ttext_to_image"})
    CHECK(joint.find(v) != std::string::npos);
  // full and instance-only share their first stage.
  CHECK(slurp(ws.out() / "compare" / "full" / "stage1" / "checkpoint.bin") ==
        slurp(ws.out() / "compare" / "instance_only" / "stage1" / "checkpoint.bin"));
}

TEST_CASE("outputs are not overwritten without the flag") {
  Workspace ws("overwrite");
  ws.prepare();
  Result again = run({"gen-corpus", "--out", ws.o(), "--config", ws.corpus_cfg.string()});
  CHECK(again.code != 0);
  CHECK(count_lines(again.err) == 1);
  CHECK(again.err.find("--overwrite") != std::string::npos);
  CHECK(run({"gen-corpus", "--out", ws.o(), "--config", ws.corpus_cfg.string(), "--overwrite"}).code == 0);
  CHECK(run({"build-vocab", "--out", ws.o()}).code != 0);
}

TEST_CASE("stage 2 refuses a checkpoint with another model config") {
  Workspace ws("mismatch");
  ws.prepare();
  REQUIRE(run({"train", "--stage", "1", "--out", ws.o(), "--config", ws.stage1_cfg.string()}).code == 0);
  const fs::path wide = ws.root / "wide.cfg";
  std::ofstream(wide) << replaced(slurp(ws.stage2_cfg), "\nembed_dim=16", "\nembed_dim=32");
  Result r = run({"train", "--stage", "2", "--out", ws.o(), "--config", wide.string()});
  CHECK(r.code != 0);
  CHECK(count_lines(r.err) == 1);
  CHECK(r.err.find("config mismatch") != std::string::npos);
  CHECK_FALSE(fs::exists(ws.out() / "stage2"));

  Result clash = run({"train", "--stage", "1", "--out", ws.o(), "--config", ws.stage2_cfg.string(), "--overwrite"});
  CHECK(clash.code != 0);
}

TEST_CASE("resume through the command line equals an uninterrupted run") {
  Workspace a("resume_a"), b("resume_b");
  a.prepare();
  b.prepare();
  const fs::path four = a.root / "four.cfg";
  std::ofstream(four) << replaced(slurp(a.stage1_cfg), "epochs=2", "epochs=4");
  REQUIRE(run({"train", "--stage", "1", "--out", a.o(), "--config", four.string()}).code == 0);

  REQUIRE(run({"train", "--stage", "1", "--out", b.o(), "--config", b.stage1_cfg.string()}).code == 0);
  Result resumed = run({"train", "--stage", "1", "--out", b.o(), "--config", four.string(), "--checkpoint",
                        (b.out() / "stage1" / "checkpoint.bin").string(), "--overwrite"});
  INFO(resumed.err);
  REQUIRE(resumed.code == 0);
  CHECK(slurp(a.out() / "stage1" / "checkpoint.bin") == slurp(b.out() / "stage1" / "checkpoint.bin"));
  CHECK(TrainLog::read(a.out() / "stage1" / "train_log.tsv") == TrainLog::read(b.out() / "stage1" / "train_log.tsv"));
}

TEST_CASE("usage errors are single lines") {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"frobnicate"}, {"train", "--out", "/tmp/x"}, {"eval"}, {"train", "--stage", "3", "--out", "/tmp/x"}}) {
    Result r = run(args);
    CHECK(r.code != 0);
    CHECK(count_lines(r.err) == 1);
  }
  Result missing = run({"eval", "--out", (fs::temp_directory_path() / "dualpath_cli_tests" / "nothing").string()});
  CHECK(missing.code != 0);
  CHECK(count_lines(missing.err) == 1);
}
