#include "dualpath/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <unordered_set>

#include "dualpath/errors.hpp"
#include "dualpath/retrieval.hpp"
#include "dualpath/trainer.hpp"

namespace dualpath::cli {

namespace fs = std::filesystem;

namespace {

// Fixed layout under --out.
struct Workspace {
  fs::path root;

  fs::path corpus() const { return root / "corpus"; }
  fs::path vocab() const { return root / "vocab.tsv"; }
  fs::path stage(int s) const { return root / ("stage" + std::to_string(s)); }
  fs::path eval(Split s) const { return root / "eval" / std::string(split_name(s)); }
  fs::path bank(Split s) const { return root / "embed" / (std::string(split_name(s)) + ".bank"); }
  fs::path probe(Split s) const { return root / "probe" / std::string(split_name(s)); }
  fs::path compare() const { return root / "compare"; }
};

constexpr const char* kConfigFile = "config.txt";

struct Options {
  std::string out;
  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  int stage = 0;
  std::string checkpoint;
  std::string split;
  std::string strategy;
  bool overwrite = false;
  std::string data;
  std::string vocab;
  std::string embeddings;
  std::string bank;
  std::string allowlist;
};

// Refuses to clobber an existing output unless --overwrite was given.
void claim(const fs::path& path, bool overwrite) {
  if (!fs::exists(path)) return;
  if (!overwrite) throw UsageError("refusing to overwrite " + path.string() + " (pass --overwrite)");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw DataError(std::string(what) + " not found: " + path.string());
}

Split split_or(const Options& o, Split fallback) { return o.split.empty() ? fallback : parse_split(o.split); }

fs::path data_dir(const Options& o, const Workspace& ws) { return o.data.empty() ? ws.corpus() : fs::path(o.data); }
fs::path vocab_path(const Options& o, const Workspace& ws) { return o.vocab.empty() ? ws.vocab() : fs::path(o.vocab); }

Dataset load_data(const Options& o, const Workspace& ws) {
  const fs::path dir = data_dir(o, ws);
  require_file(dir, "corpus directory");
  return load_dataset(dir);
}

Vocabulary load_vocab(const Options& o, const Workspace& ws) {
  const fs::path path = vocab_path(o, ws);
  require_file(path, "vocabulary");
  Vocabulary vocab = load_vocabulary(path);
  if (!o.embeddings.empty()) {
    require_file(o.embeddings, "embedding table");
    vocab.attach_embeddings(load_embedding_table(o.embeddings));
  }
  return vocab;
}

// Config from the file (if any) with command-line overrides applied.
TrainConfig load_train_config(const std::optional<std::string>& file, int stage, const Options& o) {
  KeyValues kv;
  if (file) kv = KeyValues::read(*file);
  if (stage != 0) {
    if (kv.contains("stage") && kv.get_int("stage", 0) != stage) {
      throw ConfigError("--stage " + std::to_string(stage) + " disagrees with stage=" + *kv.get("stage") + " in " +
                        *file);
    }
    kv.set("stage", stage);
  }
  if (o.seed) kv.set("seed", std::to_string(*o.seed));
  if (!o.strategy.empty()) kv.set("strategy", o.strategy);
  TrainConfig config = TrainConfig::from_key_values(kv);
  config.validate();
  return config;
}

fs::path default_checkpoint(const Workspace& ws) {
  const fs::path s2 = ws.stage(2) / kCheckpointFileName;
  return fs::exists(s2) ? s2 : ws.stage(1) / kCheckpointFileName;
}

Model load_model(const Options& o, const Workspace& ws, const Dataset& data, const Vocabulary& vocab) {
  const fs::path path = o.checkpoint.empty() ? default_checkpoint(ws) : fs::path(o.checkpoint);
  require_file(path, "checkpoint");
  Checkpoint<float> ckpt = load_checkpoint<float>(path);
  if (ckpt.model.config().vocab_size != vocab.size()) {
    throw ConfigError("config mismatch: checkpoint expects " + std::to_string(ckpt.model.config().vocab_size) +
                      " vocabulary words, vocabulary has " + std::to_string(vocab.size()));
  }
  if (ckpt.model.config().num_classes != static_cast<int>(data.train.size())) {
    throw ConfigError("config mismatch: checkpoint expects " + std::to_string(ckpt.model.config().num_classes) +
                      " training groups, corpus has " + std::to_string(data.train.size()));
  }
  return std::move(ckpt.model);
}

void progress_line(std::ostream& out, const std::string& tag, const TrainState& s, int epochs) {
  const EpochRecord& r = s.log.records.back();
  char buf[200];
  std::snprintf(buf, sizeof buf, "%s epoch %d/%d err_img %.4f err_text %.4f rank %.4f loss %.4f (%.2fs)", tag.c_str(),
                r.epoch, epochs, r.err_img, r.err_text, r.rank_loss, r.total_loss, r.seconds);
  out << buf << '\n';
}

// Trains one stage and writes checkpoint, log and config into `dir`.
void run_stage(TrainState& state, const Dataset& data, const Vocabulary& vocab, const TrainConfig& config,
               const fs::path& dir, const std::string& tag, std::ostream& out) {
  fs::create_directories(dir);
  config.to_key_values().write(dir / kConfigFile);
  auto persist = [&](const TrainState& s) {
    save_checkpoint(const_cast<Model&>(s.model), make_meta(config, s.epochs_done), dir / kCheckpointFileName);
    s.log.write(dir / kLogFileName);
  };
  train(state, data, vocab, config, [&](const TrainState& s) {
    progress_line(out, tag, s, config.epochs);
    if (config.checkpoint_every > 0 && s.epochs_done % config.checkpoint_every == 0) persist(s);
  });
  persist(state);
}

void write_report(const RetrievalReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "report.tsv", report_tsv(report));
  write_text(dir / "report.txt", report_table(report));
  write_text(dir / "histogram.tsv", histogram_tsv(report.histogram));
}

// ---- commands ----

int cmd_gen_corpus(const Options& o, std::ostream& out) {
  const Workspace ws{o.out};
  CorpusSpec spec;
  if (!o.configs.empty()) spec = CorpusSpec::from_key_values(KeyValues::read(o.configs.front()));
  if (o.seed) spec.seed = *o.seed;
  const fs::path dir = data_dir(o, ws);
  claim(dir, o.overwrite);
  const Dataset data = generate_corpus(spec);
  if (fs::exists(dir)) fs::remove_all(dir);
  save_dataset(data, dir);
  out << "wrote " << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
      << " train/val/test groups to " << dir.string() << '\n';
  return 0;
}

int cmd_build_vocab(const Options& o, std::ostream& out) {
  const Workspace ws{o.out};
  const Dataset data = load_data(o, ws);
  std::optional<std::unordered_set<std::string>> allow;
  if (!o.allowlist.empty()) {
    std::ifstream in(o.allowlist);
    if (!in) throw DataError("cannot read allowlist " + o.allowlist);
    allow.emplace();
    for (std::string w; in >> w;) allow->insert(w);
  }
  const fs::path path = vocab_path(o, ws);
  claim(path, o.overwrite);
  const std::vector<std::string> captions = data.captions(Split::train);
  const Vocabulary vocab = build_vocabulary(captions, allow);
  fs::create_directories(fs::absolute(path).parent_path());
  save_vocabulary(vocab, path);
  out << "wrote " << vocab.size() << " words to " << path.string() << '\n';
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  const Workspace ws{o.out};
  if (o.stage != 1 && o.stage != 2) throw UsageError("train needs --stage 1 or --stage 2");
  if (o.configs.size() > 1) throw UsageError("train takes a single --config");
  const std::optional<std::string> file = o.configs.empty() ? std::nullopt : std::optional(o.configs.front());
  const TrainConfig config = load_train_config(file, o.stage, o);
  const Dataset data = load_data(o, ws);
  const Vocabulary vocab = load_vocab(o, ws);
  const ModelConfig model_config = model_config_for(config, data, vocab);

  std::optional<TrainState> state;
  fs::path ckpt_path = o.checkpoint;
  if (ckpt_path.empty() && o.stage == 2) ckpt_path = ws.stage(1) / kCheckpointFileName;
  if (!ckpt_path.empty()) {
    require_file(ckpt_path, "checkpoint");
    Checkpoint<float> ckpt = load_checkpoint<float>(ckpt_path);
    check_checkpoint(ckpt, config, model_config);
    TrainLog log;
    int done = 0;
    if (ckpt.meta.stage == config.stage) {
      done = ckpt.meta.epochs_done;
      const fs::path log_path = ckpt_path.parent_path() / kLogFileName;
      if (fs::exists(log_path)) log = TrainLog::read(log_path);
      if (static_cast<int>(log.records.size()) < done) throw DataError("train log shorter than checkpoint progress");
      log.records.resize(static_cast<std::size_t>(done));
    }
    state.emplace(TrainState{std::move(ckpt.model), std::move(log), done, false});
  } else {
    state.emplace(TrainState{init_model(config, data, vocab), {}, 0, false});
  }

  const fs::path dir = ws.stage(config.stage);
  claim(dir / kCheckpointFileName, o.overwrite);
  claim(dir / kLogFileName, o.overwrite);
  run_stage(*state, data, vocab, config, dir, "stage " + std::to_string(config.stage), out);
  out << "stage " << config.stage << ": " << state->epochs_done << " epochs"
      << (state->stopped_early ? " (stopped by patience)" : "") << ", checkpoint " << (dir / kCheckpointFileName).string()
      << '\n';
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const Workspace ws{o.out};
  const Split split = split_or(o, Split::val);
  FeatureBank bank;
  if (!o.bank.empty()) {
    require_file(o.bank, "feature bank");
    bank = load_bank(o.bank);
  } else {
    const Dataset data = load_data(o, ws);
    const Vocabulary vocab = load_vocab(o, ws);
    Model model = load_model(o, ws, data, vocab);
    bank = extract_features(model, data.split(split), vocab);
  }
  const fs::path dir = ws.eval(split);
  claim(dir / "report.tsv", o.overwrite);
  const RetrievalReport report = retrieval_metrics(bank);
  write_report(report, dir);
  out << report_table(report);
  return 0;
}

int cmd_embed(const Options& o, std::ostream& out) {
  const Workspace ws{o.out};
  const Split split = split_or(o, Split::val);
  const Dataset data = load_data(o, ws);
  const Vocabulary vocab = load_vocab(o, ws);
  Model model = load_model(o, ws, data, vocab);
  const fs::path path = ws.bank(split);
  claim(path, o.overwrite);
  const FeatureBank bank = extract_features(model, data.split(split), vocab);
  fs::create_directories(path.parent_path());
  save_bank(bank, path);
  out << "wrote " << bank.images.rows() << " image and " << bank.texts.rows() << " caption features to "
      << path.string() << '\n';
  return 0;
}

int cmd_probe_words(const Options& o, std::ostream& out) {
  const Workspace ws{o.out};
  const Split split = split_or(o, Split::test);
  const Dataset data = load_data(o, ws);
  const Vocabulary vocab = load_vocab(o, ws);
  Model model = load_model(o, ws, data, vocab);
  const fs::path dir = ws.probe(split);
  claim(dir / "word_importance.tsv", o.overwrite);

  std::unordered_set<std::string> colors;
  for (const auto& synonyms : attribute_grammar().colors) colors.insert(synonyms.begin(), synonyms.end());

  std::string rows = "group_id\tcaption\trank\tword\tdrop\n";
  int probed = 0, color_wins = 0;
  char buf[64];
  for (const ImageTextGroup& group : data.split(split)) {
    for (const std::string& caption : group.captions) {
      const std::vector<WordDrop> drops = word_importance(model, group.image, caption, vocab);
      std::optional<double> color, article;
      for (std::size_t r = 0; r < drops.size(); ++r) {
        std::snprintf(buf, sizeof buf, "%.6f", drops[r].drop);
        rows += std::to_string(group.group_id) + "\t" + caption + "\t" + std::to_string(r + 1) + "\t" +
                drops[r].word + "\t" + buf + "\n";
        if (colors.count(drops[r].word) && !color) color = drops[r].drop;
        if (drops[r].word == "a" && !article) article = drops[r].drop;
      }
      if (color && article) {
        ++probed;
        color_wins += *color > *article;
      }
    }
  }
  fs::create_directories(dir);
  write_text(dir / "word_importance.tsv", rows);
  const double fraction = probed ? double(color_wins) / probed : 0.0;
  KeyValues summary;
  summary.set("captions_probed", probed);
  summary.set("color_beats_article", fraction);
  summary.write(dir / "summary.txt");
  std::snprintf(buf, sizeof buf, "%.3f", fraction);
  out << "color word outweighs the article in " << color_wins << "/" << probed << " captions (" << buf << ")\n";
  return 0;
}

struct Variant {
  const char* name;
  LossWeights stage1;
  LossWeights stage2;
};

int cmd_compare_losses(const Options& o, std::ostream& out) {
  const Workspace ws{o.out};
  if (o.configs.size() > 2) throw UsageError("compare-losses takes at most two --config files (stage 1, stage 2)");
  const Split split = split_or(o, Split::val);
  auto file = [&](std::size_t i) { return i < o.configs.size() ? std::optional(o.configs[i]) : std::nullopt; };
  const TrainConfig base1 = load_train_config(file(0), 1, o);
  const TrainConfig base2 = load_train_config(file(1), 2, o);
  const Dataset data = load_data(o, ws);
  const Vocabulary vocab = load_vocab(o, ws);
  const ModelConfig model_config = model_config_for(base1, data, vocab);
  if (model_config.hash() != model_config_for(base2, data, vocab).hash()) {
    throw ConfigError("config mismatch: stage 1 and stage 2 configs describe different models");
  }
  const fs::path root = ws.compare();
  claim(root / "report.tsv", o.overwrite);

  const std::vector<Variant> variants{{"rank_only", {1, 0, 0}, {1, 0, 0}},
                                      {"instance_only", LossWeights::stage1(), {0, 1, 1}},
                                      {"full", LossWeights::stage1(), LossWeights::stage2()}};
  // Shared initialization; stage-1 runs with identical settings are reused.
  const Model init = init_model(base1, data, vocab);
  std::vector<std::pair<LossWeights, TrainState>> stage1_runs;

  std::string joint = "variant\tmetric\tdirection\tvalue\n";
  std::string table;
  for (const Variant& v : variants) {
    TrainConfig c1 = base1;
    c1.weights = v.stage1;
    TrainConfig c2 = base2;
    c2.weights = v.stage2;
    const fs::path dir = root / v.name;

    TrainState* s1 = nullptr;
    for (auto& [w, s] : stage1_runs) {
      if (w == v.stage1) s1 = &s;
    }
    if (!s1) {
      stage1_runs.emplace_back(v.stage1, TrainState{init, {}, 0, false});
      s1 = &stage1_runs.back().second;
      run_stage(*s1, data, vocab, c1, dir / "stage1", std::string(v.name) + " stage 1", out);
    } else {
      fs::create_directories(dir / "stage1");
      c1.to_key_values().write(dir / "stage1" / kConfigFile);
      save_checkpoint(s1->model, make_meta(c1, s1->epochs_done), dir / "stage1" / kCheckpointFileName);
      s1->log.write(dir / "stage1" / kLogFileName);
    }
    TrainState s2{s1->model, {}, 0, false};
    run_stage(s2, data, vocab, c2, dir / "stage2", std::string(v.name) + " stage 2", out);

    const RetrievalReport report = retrieval_metrics(extract_features(s2.model, data.split(split), vocab));
    write_report(report, dir);
    std::istringstream rows(report_tsv(report));
    std::string line;
    std::getline(rows, line);
    while (std::getline(rows, line)) joint += std::string(v.name) + "\t" + line + "\n";
    table += std::string("== ") + v.name + " ==\n" + report_table(report);
  }
  write_text(root / "report.tsv", joint);
  write_text(root / "report.txt", table);
  out << table;
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"dual-path image-text embedding"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--out", o.out, "workspace directory")->required();
    cmd->add_option("--data", o.data, "corpus directory (default <out>/corpus)");
    cmd->add_flag("--overwrite", o.overwrite, "replace existing outputs");
  };
  auto model_inputs = [&](CLI::App* cmd) {
    cmd->add_option("--vocab", o.vocab, "vocabulary file (default <out>/vocab.tsv)");
    cmd->add_option("--embeddings", o.embeddings, "word-vector table aligned with the vocabulary");
  };
  auto split_option = [&](CLI::App* cmd) {
    cmd->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  };

  CLI::App* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  common(gen);
  gen->add_option("--config", o.configs, "corpus spec key-value file")->expected(0, 1);
  gen->add_option("--seed", o.seed, "generation seed");

  CLI::App* vocab = app.add_subcommand("build-vocab", "build the vocabulary from training captions");
  common(vocab);
  vocab->add_option("--vocab", o.vocab, "output file (default <out>/vocab.tsv)");
  vocab->add_option("--allowlist", o.allowlist, "keep only these words (one per line)");

  CLI::App* train_cmd = app.add_subcommand("train", "run training stage 1 or 2");
  common(train_cmd);
  model_inputs(train_cmd);
  train_cmd->add_option("--stage", o.stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  train_cmd->add_option("--config", o.configs, "training config")->expected(0, 1);
  train_cmd->add_option("--seed", o.seed, "seed for initialization and sampling");
  train_cmd->add_option("--checkpoint", o.checkpoint, "resume or stage-2 starting point");
  train_cmd->add_option("--strategy", o.strategy, "negative sampling")->check(CLI::IsMember({"random", "hardest"}));

  CLI::App* eval = app.add_subcommand("eval", "retrieval metrics on a split");
  common(eval);
  model_inputs(eval);
  split_option(eval);
  eval->add_option("--checkpoint", o.checkpoint, "model (default: latest stage under <out>)");
  eval->add_option("--bank", o.bank, "evaluate a saved feature bank instead of a model");

  CLI::App* embed = app.add_subcommand("embed", "write a feature bank for a split");
  common(embed);
  model_inputs(embed);
  split_option(embed);
  embed->add_option("--checkpoint", o.checkpoint, "model (default: latest stage under <out>)");

  CLI::App* probe = app.add_subcommand("probe-words", "word-deletion importance probe");
  common(probe);
  model_inputs(probe);
  split_option(probe);
  probe->add_option("--checkpoint", o.checkpoint, "model (default: latest stage under <out>)");

  CLI::App* compare = app.add_subcommand("compare-losses", "rank-only vs instance-only vs full objective");
  common(compare);
  model_inputs(compare);
  split_option(compare);
  compare->add_option("--config", o.configs, "stage 1 config, then stage 2 config")->expected(0, 2);
  compare->add_option("--seed", o.seed, "seed shared by all variants");
  compare->add_option("--strategy", o.strategy, "negative sampling")->check(CLI::IsMember({"random", "hardest"}));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string what = e.what();
    if (auto nl = what.find('\n'); nl != std::string::npos) what.erase(nl);
    err << "error: " << what << '\n';
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(o, out);
    if (vocab->parsed()) return cmd_build_vocab(o, out);
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (embed->parsed()) return cmd_embed(o, out);
    if (probe->parsed()) return cmd_probe_words(o, out);
    if (compare->parsed()) return cmd_compare_losses(o, out);
  } catch (const std::exception& e) {
    std::string what = e.what();
    for (char& c : what) {
      if (c == '\n') c = ' ';
    }
    err << "error: " << what << '\n';
    return 1;
  }
  return 1;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace dualpath::cli
