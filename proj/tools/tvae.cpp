// tvae: command-line driver for synthesizing data, training, evaluation,
// latent analysis, semi-supervised sweeps and ablations.

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "json_config.hpp"
#include "ptst/analysis.hpp"
#include "ptst/checkpoint.hpp"
#include "ptst/data.hpp"
#include "ptst/objective.hpp"
#include "ptst/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit codes.
constexpr int kConfigError = 2;
constexpr int kIoError = 3;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Exclusive ownership of an output directory for the duration of a run.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".tvae.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw std::runtime_error("output directory " + dir.string() + " is in use by another run (remove " +
                               path_.string() + " if that run is gone)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd_, pid.data(), pid.size());
  }
  ~OutputLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os || !(os << text)) throw std::runtime_error("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("TVAE_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("TVAE_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

// Records the command's options plus the expanded configuration.
void write_resolved_config(const fs::path& out, const CLI::App& root, const json& resolved) {
  json j = tvae_cli::JsonConfig::options_json(&root, true);
  j["resolved"] = resolved;
  write_json(out / "config.resolved.json", j);
}

// ---------------------------------------------------------------------------
// shared training flags

struct TrainFlags {
  std::string objective = "tvae";
  std::string preset = "VII";
  double labels_fraction = 1.0;
  int epochs = 40;
  double lr = 1e-4;
  int batch_size = 64;
  int micro_batch = 0;
  double weight_decay = 4e-5;
  bool decoupled_wd = false;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  double gamma1 = 0.1;
  double margin = 0.0;
  std::string prior = "uniform";
  int latent_dim = 256;
  int decoder_seq_len = 0;
  double dropout = 0.0;
  bool no_eval_per_epoch = false;
  bool quiet = false;

  void add(CLI::App* app) {
    app->add_option("--objective", objective, "ptst (classifier only) or tvae")
        ->check(CLI::IsMember({"ptst", "tvae"}))
        ->capture_default_str();
    app->add_option("--preset", preset, "ablation preset: I..VII, {dkl,cos}-{fixed,learnable}[-part|-full]")
        ->capture_default_str();
    app->add_option("--labels-fraction", labels_fraction, "fraction of training labels kept, in (0, 1]")
        ->capture_default_str();
    app->add_option("--epochs", epochs)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--lr", lr, "initial learning rate (linear decay to 0)")->capture_default_str();
    app->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--micro-batch", micro_batch, "records per forward pass (0 = whole batch)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    app->add_option("--weight-decay", weight_decay)->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_flag("--decoupled-weight-decay", decoupled_wd, "decoupled instead of L2 weight decay");
    app->add_option("--seed", seed, "random seed (default: $TVAE_SEED, else 0)");
    app->add_flag("--deterministic", deterministic, "assemble batches synchronously on the training thread");
    app->add_option("--gamma1", gamma1, "weight of both cross-entropy terms")->capture_default_str();
    app->add_option("--margin", margin, "cosine margin for negative classes")
        ->check(CLI::Range(-1.0, 1.0))
        ->capture_default_str();
    app->add_option("--prior", prior, "class prior for the categorical KL")
        ->check(CLI::IsMember({"uniform", "empirical"}))
        ->capture_default_str();
    app->add_option("--latent-dim", latent_dim)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--decoder-seq-len", decoder_seq_len, "decoder length before upsampling (0 = input length)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    app->add_option("--dropout", dropout)->check(CLI::Range(0.0, 0.99))->capture_default_str();
    app->add_flag("--no-eval-per-epoch", no_eval_per_epoch, "skip evaluation after each epoch");
    app->add_flag("-q,--quiet", quiet, "no per-epoch progress");
  }

  ptst::TrainConfig train_config() const {
    ptst::TrainConfig c;
    c.objective = ptst::objective_kind_from_string(objective);
    c.preset = preset;
    c.labelled_fraction = labels_fraction;
    c.epochs = epochs;
    c.lr = lr;
    c.batch_size = batch_size;
    c.micro_batch_size = micro_batch;
    c.weight_decay = weight_decay;
    c.decoupled_weight_decay = decoupled_wd;
    c.seed = resolve_seed(seed);
    c.deterministic = deterministic;
    c.eval_every_epoch = !no_eval_per_epoch;
    if (c.objective == ptst::ObjectiveKind::tvae) {
      auto o = ptst::preset(preset).objective;
      o.gamma1 = gamma1;
      o.margin = margin;
      o.prior_y = prior == "uniform" ? ptst::PriorY::uniform : ptst::PriorY::empirical;
      c.objective_override = o;
    }
    c.validate();
    return c;
  }

  ptst::ModelConfig model_config() const {
    ptst::ModelConfig m;
    m.latent_dim = latent_dim;
    m.decoder.seq_len = decoder_seq_len;
    m.dropout = dropout;
    return m;
  }

  ptst::TrainHooks hooks(const ptst::Dataset* eval_ds) const {
    ptst::TrainHooks h;
    h.eval_ds = eval_ds;
    if (!quiet)
      h.on_epoch = [](const ptst::EpochRecord& e) {
        std::cerr << "epoch " << std::setw(3) << e.epoch << "  loss " << std::fixed << std::setprecision(4)
                  << e.mean_total << "  lr " << std::scientific << std::setprecision(2) << e.lr_last << std::fixed;
        if (e.eval)
          for (const auto& head : e.eval->heads)
            std::cerr << "  " << head.head << " OA " << std::setprecision(2) << head.metrics.oa;
        std::cerr << "  (" << std::setprecision(1) << e.seconds << "s)\n";
      };
    return h;
  }
};

// ---------------------------------------------------------------------------
// output helpers

json metrics_json(const ptst::Evaluation& e) {
  json heads = json::object();
  for (const auto& h : e.heads)
    heads[h.head] = {{"oa", h.metrics.oa},
                     {"precision", h.metrics.precision},
                     {"recall", h.metrics.recall},
                     {"f1", h.metrics.f1},
                     {"n", h.confusion.total()}};
  return {{"n_records", e.n_records}, {"heads", heads}};
}

void write_evaluation(const fs::path& out, const ptst::Evaluation& e, const std::vector<std::string>& class_names,
                      bool plots, json extra = json::object()) {
  json j = metrics_json(e);
  for (auto& [k, v] : extra.items()) j[k] = v;
  write_json(out / "metrics.json", j);
  for (const auto& h : e.heads) {
    ptst::write_confusion_csv(h.confusion, class_names, out / ("confusion_" + h.head + ".csv"));
    if (plots) write_text(out / ("confusion_" + h.head + ".svg"), ptst::confusion_svg(h.confusion, class_names));
  }
}

void print_evaluation(const ptst::Evaluation& e) {
  std::cout << std::fixed << std::setprecision(2);
  std::cout << "head   O.A.   Prec.  Recall  F1     (n=" << e.n_records << ")\n";
  for (const auto& h : e.heads)
    std::cout << std::left << std::setw(5) << h.head << std::right << std::setw(7) << h.metrics.oa << std::setw(7)
              << h.metrics.precision << std::setw(8) << h.metrics.recall << std::setw(7) << h.metrics.f1 << "\n";
}

json param_json(const ptst::ParamReport& r) {
  json groups = json::object();
  for (const auto& [g, n] : r.groups) groups[g] = n;
  return {{"total", r.total}, {"groups", groups}};
}

void print_params(const ptst::ParamReport& r, std::ostream& os) {
  os << "trainable parameters: " << r.total << "\n";
  for (const auto& [g, n] : r.groups) os << "  " << std::left << std::setw(8) << g << std::right << n << "\n";
}

ptst::Dataset load(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("no such dataset: " + path);
  return ptst::read_dataset(path);
}

// ---------------------------------------------------------------------------
// commands

struct SynthesizeCmd {
  int classes = 5;
  int parcels = 2000;
  int timesteps = 64;
  int bands = 4;
  int min_pixels = 8;
  int max_pixels = 32;
  double noise = 0.02;
  double phase_jitter = 0.0;
  double amplitude_jitter = 0.0;
  double test_fraction = 0.2;
  std::optional<std::uint64_t> seed;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--classes", classes)->capture_default_str();
    app->add_option("--parcels", parcels, "total parcels (train + test)")->capture_default_str();
    app->add_option("--timesteps", timesteps, "series length after 5-day median filtering")->capture_default_str();
    app->add_option("--bands", bands)->capture_default_str();
    app->add_option("--min-pixels", min_pixels)->capture_default_str();
    app->add_option("--max-pixels", max_pixels)->capture_default_str();
    app->add_option("--noise", noise, "per-pixel reflectance noise sigma")->capture_default_str();
    app->add_option("--phase-jitter", phase_jitter, "per-parcel timing shift sigma (timesteps)")
        ->capture_default_str();
    app->add_option("--amplitude-jitter", amplitude_jitter, "per-parcel relative amplitude sigma")
        ->capture_default_str();
    app->add_option("--test-fraction", test_fraction, "stratified share of parcels held out")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    app->add_option("--seed", seed, "random seed (default: $TVAE_SEED, else 0)");
    app->add_option("--out", out, "output directory")->required();
  }

  int run(const CLI::App& root) const {
    ptst::SyntheticConfig c;
    c.K = classes;
    c.n_parcels = parcels;
    c.T = timesteps;
    c.B = bands;
    c.min_pixels = min_pixels;
    c.max_pixels = max_pixels;
    c.noise_sigma = noise;
    c.phase_jitter = phase_jitter;
    c.amplitude_jitter = amplitude_jitter;
    c.seed = resolve_seed(seed);
    c.validate();
    OutputLock lock(out);
    const auto ds = ptst::generate_synthetic(c);
    auto [train, test] = ptst::split_dataset(ds, 1.0 - test_fraction, c.seed);
    ptst::write_dataset(train, fs::path(out) / "train.sits");
    ptst::write_dataset(test, fs::path(out) / "test.sits");
    write_resolved_config(out, root, {{"seed", c.seed}, {"train_records", train.size()}, {"test_records", test.size()}});
    std::cout << "wrote " << train.size() << " train and " << test.size() << " test parcels (K=" << ds.K
              << ", T=" << ds.T << ", F=" << ds.F << ") to " << out << "\n";
    return 0;
  }
};

struct TrainCmd {
  std::string train_path, test_path, out;
  bool plots = false;
  TrainFlags flags;

  void add(CLI::App* app) {
    app->add_option("--train", train_path, "training .sits file")->required();
    app->add_option("--test", test_path, "held-out .sits file for metrics (default: training data)");
    app->add_option("--out", out, "output directory")->required();
    app->add_flag("--plots", plots, "write SVG confusion heatmaps");
    flags.add(app);
  }

  int run(const CLI::App& root) const {
    const auto tc = flags.train_config();
    const auto mc = flags.model_config();
    const auto train = load(train_path);
    std::optional<ptst::Dataset> test;
    if (!test_path.empty()) test = load(test_path);
    OutputLock lock(out);

    const auto result = ptst::train(train, tc, mc, flags.hooks(test ? &*test : nullptr));
    const fs::path o(out);
    ptst::save_checkpoint(result.checkpoint, o / "model.ckpt");
    ptst::write_run_jsonl(result.record, o / "run.jsonl");
    const auto eval = ptst::evaluate(result.checkpoint, test ? *test : train);
    const auto params = ptst::param_count(result.checkpoint.model);
    write_evaluation(o, eval, train.class_names, plots,
                     {{"evaluated_on", test ? test_path : train_path}, {"parameters", param_json(params)}});
    write_resolved_config(o, root,
                          {{"train", tc}, {"model", result.checkpoint.model}, {"objective", result.checkpoint.objective}});
    if (!flags.quiet) print_params(params, std::cerr);
    print_evaluation(eval);
    return 0;
  }
};

std::vector<std::string> available_heads(const ptst::Checkpoint& ckpt) {
  std::vector<std::string> h = {"Y"};
  if (ckpt.has_z_head()) h.push_back("Z");
  if (ckpt.has_latent()) h.push_back("Cos");
  return h;
}

ptst::Evaluation select_heads(const ptst::Evaluation& e, const ptst::Checkpoint& ckpt,
                              const std::vector<std::string>& wanted) {
  if (wanted.empty()) return e;
  const auto have = available_heads(ckpt);
  ptst::Evaluation out;
  out.n_records = e.n_records;
  for (const auto& w : wanted) {
    if (w != "Y" && w != "Z" && w != "Cos") throw UsageError("unknown head '" + w + "' (expected Y, Z or Cos)");
    if (std::find(have.begin(), have.end(), w) == have.end())
      throw UsageError("unsupported mode: head " + w + " is not available for this " +
                       ptst::to_string(ckpt.objective_kind) + " checkpoint");
    out.heads.push_back(*e.find(w));
  }
  return out;
}

struct EvaluateCmd {
  std::string checkpoint, data, out, absent = "exclude";
  std::vector<std::string> heads;
  bool plots = false;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint)->required();
    app->add_option("--data", data, ".sits file to evaluate on")->required();
    app->add_option("--out", out, "output directory")->required();
    app->add_option("--heads", heads, "subset of Y, Z, Cos (default: all available)")->delimiter(',');
    app->add_option("--absent-classes", absent, "macro-mean treatment of classes never seen nor predicted")
        ->check(CLI::IsMember({"exclude", "zero"}))
        ->capture_default_str();
    app->add_flag("--plots", plots, "write SVG confusion heatmaps");
  }

  ptst::AbsentClassRule rule() const {
    return absent == "zero" ? ptst::AbsentClassRule::zero : ptst::AbsentClassRule::exclude;
  }

  int run(const CLI::App& root) const {
    const auto ckpt = ptst::load_checkpoint(checkpoint);
    const auto ds = load(data);
    const auto eval = select_heads(ptst::evaluate(ckpt, ds, rule()), ckpt, heads);
    OutputLock lock(out);
    write_evaluation(out, eval, ds.class_names, plots, {{"checkpoint", checkpoint}, {"data", data}});
    write_resolved_config(out, root, {{"model", ckpt.model}, {"objective_kind", ptst::to_string(ckpt.objective_kind)}});
    print_evaluation(eval);
    return 0;
  }
};

struct AnalyzeCmd {
  EvaluateCmd eval;
  int components = 8;
  bool csv = false;

  void add(CLI::App* app) {
    eval.add(app);
    app->add_option("--components", components, "principal components in the variance report")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app->add_flag("--csv", csv, "also write latents.csv");
  }

  int run(const CLI::App& root) const {
    const auto ckpt = ptst::load_checkpoint(eval.checkpoint);
    const auto ds = load(eval.data);
    const auto evaluation = select_heads(ptst::evaluate(ckpt, ds, eval.rule()), ckpt, eval.heads);
    const auto dump = ptst::export_latents(ckpt, ds);
    const auto ratios = ptst::pca_variance_ratios(dump.z.cast<double>(), components);
    const auto params = ptst::param_count(ckpt.model);

    OutputLock lock(eval.out);
    const fs::path o(eval.out);
    ptst::write_latent_dump(dump, o / "latents.bin");
    if (csv) ptst::write_latent_csv(dump, o / "latents.csv");
    std::ostringstream report;
    report << "component,ratio,cumulative\n";
    double cum = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
      cum += ratios[i];
      report << i + 1 << ',' << ratios[i] << ',' << cum << '\n';
    }
    write_text(o / "pca_variance.csv", report.str());
    if (eval.plots) write_text(o / "pca_variance.svg", ptst::variance_ratio_svg(ratios));
    write_evaluation(o, evaluation, ds.class_names, eval.plots,
                     {{"pca_variance_ratios", ratios}, {"parameters", param_json(params)}});
    write_resolved_config(o, root, {{"model", ckpt.model}});

    print_evaluation(evaluation);
    print_params(params, std::cout);
    std::cout << "PCA variance ratios:\n" << report.str();
    return 0;
  }
};

struct SweepCmd {
  std::string train_path, test_path, out;
  std::vector<double> fractions = {0.8, 0.6, 0.4, 0.2};
  TrainFlags flags;

  void add(CLI::App* app) {
    app->add_option("--train", train_path)->required();
    app->add_option("--test", test_path)->required();
    app->add_option("--out", out)->required();
    app->add_option("--fractions", fractions, "labelled fractions")->delimiter(',')->capture_default_str();
    flags.add(app);
  }

  int run(const CLI::App& root) const {
    auto tc = flags.train_config();
    const auto train = load(train_path);
    const auto test = load(test_path);
    OutputLock lock(out);
    const auto rows = ptst::semi_supervised_sweep(train, test, fractions, tc, flags.model_config());
    ptst::write_sweep_csv(rows, fs::path(out) / "sweep.csv");
    json table = json::array();
    for (const auto& r : rows)
      table.push_back({{"fraction", r.fraction},
                       {"head", r.head},
                       {"oa", r.metrics.oa},
                       {"precision", r.metrics.precision},
                       {"recall", r.metrics.recall},
                       {"f1", r.metrics.f1}});
    write_json(fs::path(out) / "metrics.json", {{"sweep", table}});
    write_resolved_config(out, root, {{"train", tc}, {"fractions", fractions}});
    std::cout << "fraction head   O.A.    F1\n" << std::fixed << std::setprecision(2);
    for (const auto& r : rows)
      std::cout << std::setw(8) << r.fraction << " " << std::left << std::setw(5) << r.head << std::right
                << std::setw(7) << r.metrics.oa << std::setw(7) << r.metrics.f1 << "\n";
    return 0;
  }
};

struct AblateCmd {
  std::string train_path, test_path, out;
  std::vector<std::string> presets = {"I", "II", "III", "IV", "V", "VI", "VII"};
  TrainFlags flags;

  void add(CLI::App* app) {
    app->add_option("--train", train_path)->required();
    app->add_option("--test", test_path)->required();
    app->add_option("--out", out)->required();
    app->add_option("--presets", presets, "presets to run")->delimiter(',')->capture_default_str();
    flags.add(app);
  }

  int run(const CLI::App& root) const {
    for (const auto& p : presets) (void)ptst::preset(p);
    const auto train = load(train_path);
    const auto test = load(test_path);
    OutputLock lock(out);
    std::ostringstream csv;
    csv << "preset,head,oa,precision,recall,f1\n";
    json table = json::array();
    for (const auto& p : presets) {
      TrainFlags f = flags;
      f.objective = "tvae";
      f.preset = p;
      auto tc = f.train_config();
      tc.eval_every_epoch = false;
      const auto result = ptst::train(train, tc, f.model_config());
      const auto eval = ptst::evaluate(result.checkpoint, test);
      std::cout << "preset " << p << "\n";
      print_evaluation(eval);
      for (const auto& h : eval.heads) {
        csv << p << ',' << h.head << ',' << h.metrics.oa << ',' << h.metrics.precision << ',' << h.metrics.recall
            << ',' << h.metrics.f1 << '\n';
        table.push_back({{"preset", p},
                         {"head", h.head},
                         {"oa", h.metrics.oa},
                         {"precision", h.metrics.precision},
                         {"recall", h.metrics.recall},
                         {"f1", h.metrics.f1}});
      }
    }
    write_text(fs::path(out) / "ablation.csv", csv.str());
    write_json(fs::path(out) / "metrics.json", {{"ablation", table}});
    write_resolved_config(out, root, {{"presets", presets}});
    return 0;
  }
};

// Picks the config parser from the --config file extension.
bool wants_json_config(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    std::string value;
    if (a == "--config" && i + 1 < argc) value = argv[i + 1];
    if (a.rfind("--config=", 0) == 0) value = a.substr(9);
    if (!value.empty()) return fs::path(value).extension() == ".json";
  }
  return false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PTST / TV-PTST satellite time-series classification experiments", "tvae"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "read options from a TOML/INI or JSON file (flags take precedence)");
  if (wants_json_config(argc, argv)) app.config_formatter(std::make_shared<tvae_cli::JsonConfig>());

  SynthesizeCmd synth;
  TrainCmd train;
  EvaluateCmd evaluate;
  AnalyzeCmd analyze;
  SweepCmd sweep;
  AblateCmd ablate;
  synth.add(app.add_subcommand("synthesize", "generate a synthetic parcel dataset (train/test split)"));
  train.add(app.add_subcommand("train", "train a PTST classifier or a TV-PTST model"));
  evaluate.add(app.add_subcommand("evaluate", "per-head metrics and confusion matrices"));
  analyze.add(app.add_subcommand("analyze", "metrics plus latent export, PCA variance and parameter report"));
  sweep.add(app.add_subcommand("sweep", "semi-supervised sweep over labelled fractions"));
  ablate.add(app.add_subcommand("ablate", "train and evaluate a list of presets"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "synthesize") return synth.run(app);
    if (cmd == "train") return train.run(app);
    if (cmd == "evaluate") return evaluate.run(app);
    if (cmd == "analyze") return analyze.run(app);
    if (cmd == "sweep") return sweep.run(app);
    if (cmd == "ablate") return ablate.run(app);
  } catch (const ptst::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
