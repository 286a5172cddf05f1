#include "ftex/cli.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ftex/error.hpp"
#include "ftex/image.hpp"

namespace ftex {

namespace fs = std::filesystem;

MapperWeights load_weights(const std::string& checkpoint, const Config& cfg, const BackboneSet& bb) {
  const MapperShape shape = mapper_shape(cfg.training, bb);
  if (checkpoint.empty()) return MapperWeights::init(shape, cfg.training.seed);
  std::error_code ec;
  if (!fs::is_regular_file(checkpoint, ec)) throw ConfigError("cannot read checkpoint " + checkpoint);
  MapperWeights w = load_mapper(checkpoint);
  if (!(w.shape() == shape)) throw ConfigError("checkpoint " + checkpoint + " does not match the configured mapper shape");
  return w;
}

namespace {

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream o(p, std::ios::binary);
  o << text;
  if (!o) throw Error("cannot write " + p.string());
}

fs::path sibling(const fs::path& out, const std::string& suffix, const std::string& ext) {
  return out.parent_path() / (out.stem().string() + suffix + ext);
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// Every section except training.steps must agree to continue a run.
void check_resume_config(const std::string& stored_text, const Config& cfg) {
  if (stored_text.empty()) return;
  Config stored = Config::parse(stored_text, "checkpoint config");
  stored.training.steps = cfg.training.steps;
  if (!(stored.backbones == cfg.backbones) || !(stored.grouping == cfg.grouping) || !(stored.training == cfg.training)) {
    throw ConfigError("checkpoint was written under a different backbones/grouping/training config");
  }
}

struct Options {
  std::string config;
  bool print_config = false;

  std::string image, latent, out, preview, text, patch_upper, patch_lower, checkpoint, csv, dataset;
  bool recover_flag = false;
  bool resume = false;
  std::size_t count = 24;
  std::uint64_t seed = 0;
  std::optional<std::size_t> steps;
};

int cmd_invert(const Options& o, const Config& cfg, std::ostream& out) {
  const BackboneSet bb = load_backbones(cfg.backbones);
  Image img = read_png(o.image);
  const std::size_t n = bb.generator->image_size();
  if (img.height() != n || img.width() != n) img = resize_area(img, n, n);
  const LatentCode w = bb.inverter->invert(img, cfg.grouping);
  ensure_parent(o.out);
  save_latent(w, o.out);
  out << "latent: " << o.out << '\n';
  if (!o.preview.empty()) {
    ensure_parent(o.preview);
    write_png(bb.generator->generate(w), o.preview);
    out << "preview: " << o.preview << '\n';
  }
  return kExitOk;
}

int cmd_edit(const Options& o, const Config& cfg, std::ostream& out) {
  if (o.image.empty() == o.latent.empty()) throw ConfigError("give exactly one of --image or --latent");
  EditCondition c;
  if (!o.text.empty()) c.set_prompt(o.text);
  if (!o.patch_upper.empty()) c.patch_upper = read_png(o.patch_upper);
  if (!o.patch_lower.empty()) c.patch_lower = read_png(o.patch_lower);
  if (c.empty()) throw ConfigError("at least one condition required (--text, --patch-upper or --patch-lower)");
  c.validate();

  const BackboneSet bb = load_backbones(cfg.backbones);
  const MapperWeights weights = load_weights(o.checkpoint, cfg, bb);
  const std::size_t n = bb.generator->image_size();
  Image input;
  LatentCode w;
  if (!o.image.empty()) {
    input = read_png(o.image);
    if (input.height() != n || input.width() != n) input = resize_area(input, n, n);
    w = bb.inverter->invert(input, cfg.grouping);
  } else {
    w = load_latent(o.latent, cfg.grouping);
    input = bb.generator->generate(w);
  }
  const EditResult r = edit(w, c, weights, bb);
  const fs::path dst = o.out;
  ensure_parent(dst);
  write_png(r.image, dst);
  save_latent(r.latent, sibling(dst, "", ".ftw"));
  out << "edited: " << dst.string() << '\n' << "latent: " << sibling(dst, "", ".ftw").string() << '\n';
  if (o.recover_flag) {
    const RecoveryResult rec = recover(r.latent, input, r.image, bb, cfg.recovery);
    const fs::path rp = sibling(dst, "_recovered", ".png");
    write_png(rec.image, rp);
    char buf[96];
    std::snprintf(buf, sizeof buf, "recovery objective: %.9g -> %.9g\n", rec.initial_objective, rec.final_objective);
    out << "recovered: " << rp.string() << '\n' << buf;
  }
  return kExitOk;
}

int cmd_train(const Options& o, Config cfg, std::ostream& out, std::ostream& err) {
  if (!o.dataset.empty()) cfg.training.dataset = o.dataset;
  if (o.steps) cfg.training.steps = *o.steps;
  if (cfg.training.dataset.empty()) throw ConfigError("training.dataset is not set");
  const BackboneSet bb = load_backbones(cfg.backbones);
  const fs::path dir = cfg.training.output_dir;
  fs::create_directories(dir);
  const fs::path latest = dir / "latest.ftm";
  const fs::path log_path = dir / "train.log";

  TrainState st;
  std::vector<std::string> kept;
  if (o.resume) {
    std::error_code ec;
    if (!fs::is_regular_file(latest, ec)) throw ConfigError("nothing to resume: " + latest.string() + " is missing");
    std::string stored;
    st = load_checkpoint(latest, &stored);
    check_resume_config(stored, cfg);
    std::ifstream in(log_path);
    for (std::string line; std::getline(in, line);) {
      std::size_t step = 0;
      LossReport::parse_log_line(line, &step);
      if (step < st.step) kept.push_back(line);
    }
    out << "resuming at step " << st.step << '\n';
  } else {
    st = init_training(cfg.training, bb);
  }

  const Dataset data = ingest_dataset(cfg.training.dataset, IngestOptions{cfg.training.align, cfg.training.seed, true}, bb,
                                      cfg.grouping, cfg.training.vocabulary, [&](const std::string& m) { err << m << '\n'; });
  out << "dataset: " << data.train.size() << " train, " << data.test.size() << " test, " << data.index.dropped.size()
      << " dropped\n";

  std::ofstream log(log_path, std::ios::trunc);
  for (const auto& line : kept) log << line << '\n';
  log.flush();
  const std::string config_text = cfg.dump();
  auto checkpoint = [&] {
    save_checkpoint(st, config_text, dir / ("checkpoint_" + std::to_string(st.step) + ".ftm"));
    save_checkpoint(st, config_text, latest);
  };
  train(st, data, bb, cfg.training, cfg.training.steps, [&](std::size_t step, const LossReport& r) {
    const std::string line = r.log_line(step);
    log << line << '\n';
    log.flush();
    out << line << '\n';
    if (st.step % cfg.training.checkpoint_every == 0) checkpoint();
  });
  if (st.step % cfg.training.checkpoint_every != 0 || st.step == 0) checkpoint();
  out << "checkpoint: " << latest.string() << '\n';
  return kExitOk;
}

int cmd_eval(const Options& o, Config cfg, std::ostream& out, std::ostream& err) {
  if (!o.checkpoint.empty()) cfg.evaluation.checkpoint = o.checkpoint;
  if (!o.dataset.empty()) cfg.evaluation.dataset = o.dataset;
  const std::string root = cfg.evaluation.dataset.empty() ? cfg.training.dataset : cfg.evaluation.dataset;
  if (root.empty()) throw ConfigError("evaluation.dataset and training.dataset are both unset");
  const BackboneSet bb = load_backbones(cfg.backbones);
  const MapperWeights weights = load_weights(cfg.evaluation.checkpoint, cfg, bb);
  const Dataset data = ingest_dataset(root, IngestOptions{cfg.training.align, cfg.training.seed, true}, bb, cfg.grouping,
                                      cfg.training.vocabulary, [&](const std::string& m) { err << m << '\n'; });
  const EvalReport rep = evaluate(weights, data, bb, cfg.training, cfg.evaluation);
  if (o.out.empty()) {
    out << rep.to_text();
  } else {
    write_file(o.out, rep.to_text());
    out << "report: " << o.out << '\n';
  }
  if (!o.csv.empty()) write_file(o.csv, rep.to_csv());
  return kExitOk;
}

int cmd_serve(const Config& cfg, std::ostream& out, std::ostream& err) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  Service service(cfg.service_context());
  const int port = service.start();
  out << "listening on " << parse_listen(cfg.service.listen).first << ':' << port << std::endl;
  try {
    BackboneSet bb = load_backbones(cfg.backbones);
    MapperWeights w = load_weights(cfg.service.checkpoint, cfg, bb);
    service.set_backbones(std::move(bb), std::move(w));
    out << "ready" << std::endl;
  } catch (...) {
    service.stop();
    throw;
  }
  int sig = 0;
  sigwait(&set, &sig);
  err << "stopping on signal " << sig << '\n';
  service.stop();
  return kExitOk;
}

int cmd_synth(const Options& o, const Config& cfg, std::ostream& out) {
  const BackboneSet bb = load_backbones(cfg.backbones);
  synth_dataset(o.out, o.count, o.seed, bb, cfg.training.vocabulary);
  out << "wrote " << o.count << " samples to " << o.out << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app("Text and texture guided garment editing in a style-based generator's latent space", "fashiontex");
  app.option_defaults()->always_capture_default();
  app.add_option("--config", o.config, "Config file (falls back to $FASHIONTEX_CONFIG)");
  app.add_flag("--print-config", o.print_config, "Print the effective config and exit");
  app.require_subcommand(0, 1);

  auto* invert = app.add_subcommand("invert", "Invert an image into a latent file");
  invert->add_option("--image", o.image, "Input PNG")->required()->check(CLI::ExistingFile);
  invert->add_option("--out", o.out, "Output latent file")->required();
  invert->add_option("--preview", o.preview, "Also write the reconstruction PNG");

  auto* edit_cmd = app.add_subcommand("edit", "Edit garments by prompt and texture patches");
  edit_cmd->add_option("--image", o.image, "Input PNG")->check(CLI::ExistingFile);
  edit_cmd->add_option("--latent", o.latent, "Input latent file")->check(CLI::ExistingFile);
  edit_cmd->add_option("--text", o.text, "Prompt \"<upper>, <lower>\"");
  edit_cmd->add_option("--patch-upper", o.patch_upper, "Upper garment texture PNG")->check(CLI::ExistingFile);
  edit_cmd->add_option("--patch-lower", o.patch_lower, "Lower garment texture PNG")->check(CLI::ExistingFile);
  edit_cmd->add_option("--checkpoint", o.checkpoint, "Mapper checkpoint (default: untrained mapper)")->check(CLI::ExistingFile);
  edit_cmd->add_flag("--recover", o.recover_flag, "Also run identity recovery");
  edit_cmd->add_option("--out", o.out, "Edited PNG; the latent and recovered image are written alongside")->required();

  auto* train_cmd = app.add_subcommand("train", "Train the mapper");
  train_cmd->add_flag("--resume", o.resume, "Continue from <output_dir>/latest.ftm");
  train_cmd->add_option("--dataset", o.dataset, "Override training.dataset");
  train_cmd->add_option("--steps", o.steps, "Override training.steps");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Override evaluation.checkpoint")->check(CLI::ExistingFile);
  eval_cmd->add_option("--dataset", o.dataset, "Override the dataset root");
  eval_cmd->add_option("--out", o.out, "Write the report here instead of stdout");
  eval_cmd->add_option("--csv", o.csv, "Write per-sample rows as CSV");

  auto* serve = app.add_subcommand("serve", "Run the session HTTP API");

  auto* synth = app.add_subcommand("synth-data", "Write a synthetic dataset from the toy generator");
  synth->add_option("--out", o.out, "Dataset directory")->required();
  synth->add_option("--count", o.count, "Number of images")->check(CLI::Range(std::size_t{2}, std::size_t{100000}));
  synth->add_option("--seed", o.seed, "Sampling seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUser;
  }

  try {
    const Config cfg = load_config(o.config);
    if (o.print_config) {
      out << cfg.dump();
      return kExitOk;
    }
    if (invert->parsed()) return cmd_invert(o, cfg, out);
    if (edit_cmd->parsed()) return cmd_edit(o, cfg, out);
    if (train_cmd->parsed()) return cmd_train(o, cfg, out, err);
    if (eval_cmd->parsed()) return cmd_eval(o, cfg, out, err);
    if (serve->parsed()) return cmd_serve(cfg, out, err);
    if (synth->parsed()) return cmd_synth(o, cfg, out);
    err << app.help();
    return kExitUser;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInternal;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace ftex
