#include "clipn/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "clipn/detect.hpp"
#include "clipn/encoder.hpp"
#include "clipn/losses.hpp"
#include "clipn/metric.hpp"
#include "clipn/store.hpp"

namespace clipn::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr std::size_t kDensityPoints = 201;
constexpr double kGradTolerance = 1e-5;

struct Scoring {
  std::string methods = "msp,maxlogit,energy,react,odin,ctw,atd";
  std::optional<double> tau;
  double energy_T = 1.0;
  double odin_T = 1000.0;
  double odin_eps = 0.0014;
  double react_pct = 90.0;
  std::string atd_compare = "original";
};

struct Options {
  fs::path out = ".";
  std::uint64_t seed = 42;
  bool seed_given = false;

  SynthConfig synth;

  fs::path manifest;
  std::optional<fs::path> checkpoint;
  std::string mode = "learnable";
  std::size_t prompt_tokens = kDefaultPromptTokens;
  double lr = 0.1;
  std::size_t epochs = 50;

  Scoring scoring;
  std::optional<double> kde_bandwidth;
  std::optional<fs::path> input;

  double eps = 1e-4;
};

NoTextMode parse_mode(const std::string& s) {
  if (s == "learnable") return NoTextMode::Learnable;
  if (s == "handcrafted") return NoTextMode::Handcrafted;
  throw Error(ErrorCode::Precondition, "unknown mode: " + s);
}

std::string mode_name(NoTextMode m) { return m == NoTextMode::Learnable ? "learnable" : "handcrafted"; }

AtdCompare parse_compare(const std::string& s) {
  if (s == "original") return AtdCompare::Original;
  if (s == "rescaled") return AtdCompare::Rescaled;
  throw Error(ErrorCode::Precondition, "unknown ATD comparison: " + s);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << text;
  os.close();
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

void write_json(const fs::path& path, const ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) {
    throw Error(ErrorCode::IoError, "cannot create output directory " + out.string());
  }
}

std::size_t worker_count() {
  std::size_t n = std::max(1U, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CLIPN_THREADS")) {
    std::size_t cap = 0;
    const std::string_view s(env);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), cap);
    if (ec != std::errc() || p != s.data() + s.size() || cap == 0) {
      throw Error(ErrorCode::Precondition, "CLIPN_THREADS must be a positive integer");
    }
    n = std::min(n, cap);
  }
  return n;
}

ordered_json scoring_echo(const Scoring& s) {
  ordered_json j;
  j["methods"] = s.methods;
  j["tau"] = s.tau ? ordered_json(*s.tau) : ordered_json(nullptr);
  j["energy_T"] = s.energy_T;
  j["odin_T"] = s.odin_T;
  j["odin_eps"] = s.odin_eps;
  j["react_clamp_pct"] = s.react_pct;
  j["atd_compare"] = s.atd_compare;
  return j;
}

// A missing manifest is a flag mistake; an unreadable one is a data problem.
Manifest open_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::Precondition, "manifest not found: " + path.string());
  return load_manifest(path);
}

// Everything score and eval need once the manifest is loaded.
struct Scene {
  Manifest manifest;
  ClassTextBank bank;
  std::vector<Method> methods;
  DetectOptions detect;
  NoTextMode mode = NoTextMode::Learnable;
};

Scene load_scene(const Options& o) {
  Scene sc;
  sc.methods = parse_methods(o.scoring.methods);
  sc.detect.energy_T = o.scoring.energy_T;
  sc.detect.odin_T = o.scoring.odin_T;
  sc.detect.odin_epsilon = o.scoring.odin_eps;
  sc.detect.atd_compare = parse_compare(o.scoring.atd_compare);
  if (!(o.scoring.react_pct >= 0.0 && o.scoring.react_pct <= 100.0)) {
    throw Error(ErrorCode::Precondition, "--react-clamp-pct must lie in [0, 100]");
  }

  sc.manifest = open_manifest(o.manifest);
  const Manifest& m = sc.manifest;
  const Vocabulary vocab = m.vocab();
  const EncoderParams std_params = load_checkpoint(m.resolve(m.encoder)).params;

  // Without a trained "no" encoder fall back to the handcrafted negation pool
  // through a copy of the standard encoder.
  Checkpoint no_ckpt{std_params, NoTextMode::Handcrafted};
  if (o.checkpoint) {
    no_ckpt = load_checkpoint(*o.checkpoint);
  } else if (m.no_encoder) {
    no_ckpt = load_checkpoint(m.resolve(*m.no_encoder));
  }
  sc.mode = no_ckpt.mode;

  BankSpec spec;
  spec.class_names = m.id_class_names;
  spec.standard_pool = m.effective_standard_pool();
  spec.negation_pool = m.effective_negation_pool();
  spec.mode = no_ckpt.mode;
  sc.bank = build_bank(spec, vocab, std_params, no_ckpt.params);
  if (m.tau) sc.bank.tau = *m.tau;
  if (o.scoring.tau) sc.bank.tau = *o.scoring.tau;
  if (!(sc.bank.tau > 0.0)) throw Error(ErrorCode::NonPositiveTau, "tau must be > 0");

  const LabeledEmbeddings train = load_labeled(m.resolve(m.train));
  sc.detect.react_clamp = activation_percentile(train.features, o.scoring.react_pct);
  return sc;
}

EmbeddingMatrix load_features(const fs::path& path) {
  const auto sections = read_embeddings(path);
  for (const auto& s : sections) {
    if (s.name == "features") return s.matrix;
  }
  return sections.front().matrix;
}

std::string score_csv(const std::vector<DetectionResult>& results, std::size_t n_methods) {
  std::ostringstream os;
  os << "sample_index,method,idness,is_id,p_unknown\n";
  for (std::size_t k = 0; k < results.size(); ++k) {
    const DetectionResult& r = results[k];
    os << k / n_methods << ',' << to_string(r.method) << ',' << format_double(r.idness) << ',';
    if (r.is_id) os << (*r.is_id ? 1 : 0);
    os << ',';
    if (r.p_unknown) os << format_double(*r.p_unknown);
    os << '\n';
  }
  return os.str();
}

std::vector<double> idness_of(const std::vector<DetectionResult>& results, std::size_t n_methods,
                              std::size_t method_index) {
  std::vector<double> out;
  out.reserve(results.size() / n_methods);
  for (std::size_t k = method_index; k < results.size(); k += n_methods) out.push_back(results[k].idness);
  return out;
}

// Per image: the largest standard similarity and the "no" similarity of the
// same class, the two quantities whose densities are compared.
void similarity_series(const EmbeddingMatrix& features, const ClassTextBank& bank, std::vector<double>& max_std,
                       std::vector<double>& no_at_max) {
  const Matrix s = similarity_matrix(features, bank.text);
  const Matrix s_no = similarity_matrix(features, bank.no_text);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const auto row = s.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    max_std.push_back(row[best]);
    no_at_max.push_back(s_no(i, best));
  }
}

// ---------------------------------------------------------------------------

void cmd_synth(const Options& o) {
  SynthConfig cfg = o.synth;
  cfg.seed = o.seed;
  cfg.validate();
  prepare_out(o.out);
  const SynthData data = synth_generate(cfg);

  save_labeled(data.train, o.out / "train.clpn");
  save_labeled(data.id_test, o.out / "id_test.clpn");
  save_labeled(data.ood_test, o.out / "ood_test.clpn");
  save_checkpoint({data.text_encoder, NoTextMode::Learnable}, o.out / "encoder.clpn");

  Manifest m;
  m.id_class_names = data.id_class_names;
  m.ood_label = "ood";
  m.train = "train.clpn";
  m.id_test = "id_test.clpn";
  m.ood_test = "ood_test.clpn";
  m.encoder = "encoder.clpn";
  m.vocabulary = data.vocab.words();
  m.seed = cfg.seed;
  save_manifest(m, o.out / "manifest.json");

  ordered_json echo;
  echo["subcommand"] = "synth";
  echo["out"] = o.out.generic_string();
  echo["seed"] = cfg.seed;
  echo["c_id"] = cfg.c_id;
  echo["c_ood"] = cfg.c_ood;
  echo["dim"] = cfg.dim;
  echo["n_per_class"] = cfg.n_per_class;
  echo["spread"] = cfg.intra_spread;
  write_json(o.out / "config.json", echo);
}

void cmd_train(const Options& o) {
  if (!(o.lr >= 0.0)) throw Error(ErrorCode::Precondition, "--lr must be >= 0");
  if (o.epochs == 0) throw Error(ErrorCode::Precondition, "--epochs must be >= 1");
  const NoTextMode mode = parse_mode(o.mode);
  const Manifest m = open_manifest(o.manifest);
  const std::uint64_t seed = o.seed_given ? o.seed : m.seed;
  prepare_out(o.out);

  const Vocabulary vocab = m.vocab();
  const EncoderParams std_params = load_checkpoint(m.resolve(m.encoder)).params;
  const LabeledEmbeddings train_split = load_labeled(m.resolve(m.train));
  const auto batches = make_batches(train_split, m.id_class_names, vocab, m.effective_standard_pool(),
                                    m.effective_negation_pool(), mode, seed);
  if (batches.empty()) throw Error(ErrorCode::BatchTooSmall, "training split yields no mini-batch");

  EncoderParams no_params = init_no_encoder(std_params, negative_keyword_tokens(vocab), o.prompt_tokens);
  if (mode == NoTextMode::Handcrafted) no_params.trainable.no_prompt_tokens = false;
  if (m.tau) no_params.log_tau = std::log(*m.tau);

  const TrainResult result = clipn::train(batches, std_params, no_params, {.lr = o.lr, .epochs = o.epochs, .seed = seed});
  save_checkpoint({result.params, mode}, o.out / "no_encoder.clpn");

  std::ostringstream csv;
  csv << "epoch,itbo,tso,total\n";
  for (const EpochLoss& e : result.trace) {
    csv << e.epoch << ',' << format_double(e.itbo) << ',' << format_double(e.tso) << ','
        << format_double(e.total) << '\n';
  }
  write_text(o.out / "loss.csv", csv.str());

  ordered_json echo;
  echo["subcommand"] = "train";
  echo["manifest"] = o.manifest.generic_string();
  echo["out"] = o.out.generic_string();
  echo["seed"] = seed;
  echo["mode"] = mode_name(mode);
  echo["prompt_tokens"] = o.prompt_tokens;
  echo["lr"] = o.lr;
  echo["epochs"] = o.epochs;
  echo["tau_init"] = no_params.tau();
  echo["tau_final"] = result.params.tau();
  echo["steps"] = result.steps;
  echo["clamped"] = result.clamped;
  write_json(o.out / "config.json", echo);
  std::cout << "final loss " << format_double(result.trace.back().total) << "\n";
}

ordered_json scene_echo(const std::string& sub, const Options& o, const Scene& sc) {
  ordered_json echo;
  echo["subcommand"] = sub;
  echo["manifest"] = o.manifest.generic_string();
  echo["checkpoint"] = o.checkpoint ? ordered_json(o.checkpoint->generic_string()) : ordered_json(nullptr);
  echo["out"] = o.out.generic_string();
  echo["seed"] = o.seed_given ? o.seed : sc.manifest.seed;
  echo["no_text_mode"] = mode_name(sc.mode);
  echo["scoring"] = scoring_echo(o.scoring);
  echo["effective_tau"] = sc.bank.tau;
  echo["effective_react_clamp"] = sc.detect.react_clamp;
  return echo;
}

void cmd_score(const Options& o) {
  const Scene sc = load_scene(o);
  prepare_out(o.out);
  const std::size_t threads = worker_count();
  const Manifest& m = sc.manifest;

  std::vector<std::pair<std::string, fs::path>> splits;
  if (o.input) {
    splits.emplace_back("scores.csv", *o.input);
  } else {
    splits.emplace_back("scores_id_test.csv", m.resolve(m.id_test));
    splits.emplace_back("scores_ood_test.csv", m.resolve(m.ood_test));
  }
  for (const auto& [name, path] : splits) {
    const EmbeddingMatrix features = load_features(path);
    const auto results = score_batch(features, sc.bank, sc.methods, sc.detect, threads);
    write_text(o.out / name, score_csv(results, sc.methods.size()));
  }

  ordered_json echo = scene_echo("score", o, sc);
  echo["input"] = o.input ? ordered_json(o.input->generic_string()) : ordered_json(nullptr);
  write_json(o.out / "config.json", echo);
}

void cmd_eval(const Options& o) {
  if (o.kde_bandwidth && !(*o.kde_bandwidth > 0.0)) {
    throw Error(ErrorCode::NonPositiveBandwidth, "--kde-bandwidth must be > 0");
  }
  const Scene sc = load_scene(o);
  prepare_out(o.out);
  const std::size_t threads = worker_count();
  const Manifest& m = sc.manifest;
  const std::uint64_t seed = o.seed_given ? o.seed : m.seed;

  const EmbeddingMatrix id_features = load_labeled(m.resolve(m.id_test)).features;
  const EmbeddingMatrix ood_features = load_labeled(m.resolve(m.ood_test)).features;
  const std::size_t k = sc.methods.size();
  const auto id_results = score_batch(id_features, sc.bank, sc.methods, sc.detect, threads);
  const auto ood_results = score_batch(ood_features, sc.bank, sc.methods, sc.detect, threads);

  ordered_json records = ordered_json::array();
  std::ostringstream csv;
  std::ostringstream roc;
  csv << "method,auroc,fpr95,n_id,n_ood,seed\n";
  roc << "method,threshold,tpr,fpr\n";
  for (std::size_t j = 0; j < k; ++j) {
    const auto id_scores = idness_of(id_results, k, j);
    const auto ood_scores = idness_of(ood_results, k, j);
    const double a = auroc(id_scores, ood_scores);
    const double f = fpr_at_tpr(id_scores, ood_scores, 0.95);
    const std::string name(to_string(sc.methods[j]));
    ordered_json r;
    r["method"] = name;
    r["auroc"] = a;
    r["fpr95"] = f;
    r["n_id"] = id_scores.size();
    r["n_ood"] = ood_scores.size();
    r["seed"] = seed;
    records.push_back(r);
    csv << name << ',' << format_double(a) << ',' << format_double(f) << ',' << id_scores.size() << ','
        << ood_scores.size() << ',' << seed << '\n';
    for (const RocPoint& p : roc_curve(id_scores, ood_scores)) {
      roc << name << ',' << format_double(p.threshold) << ',' << format_double(p.tpr) << ','
          << format_double(p.fpr) << '\n';
    }
  }
  write_json(o.out / "metrics.json", records);
  write_text(o.out / "metrics.csv", csv.str());
  write_text(o.out / "roc.csv", roc.str());

  std::vector<std::pair<std::string, std::vector<double>>> series(4);
  series[0].first = "id_std";
  series[1].first = "id_no";
  series[2].first = "ood_std";
  series[3].first = "ood_no";
  similarity_series(id_features, sc.bank, series[0].second, series[1].second);
  similarity_series(ood_features, sc.bank, series[2].second, series[3].second);
  std::ostringstream dens;
  dens << "series,bandwidth,x,density\n";
  for (const auto& [label, samples] : series) {
    const double h = o.kde_bandwidth ? *o.kde_bandwidth : silverman_bandwidth(samples);
    const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
    const auto grid = linspace(*lo - 3.0 * h, *hi + 3.0 * h, kDensityPoints);
    const DensityCurve curve = kde(samples, h, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      dens << label << ',' << format_double(h) << ',' << format_double(curve.grid[i]) << ','
           << format_double(curve.density[i]) << '\n';
    }
  }
  write_text(o.out / "similarity_density.csv", dens.str());

  ordered_json echo = scene_echo("eval", o, sc);
  echo["seed"] = seed;
  echo["kde_bandwidth"] = o.kde_bandwidth ? ordered_json(*o.kde_bandwidth) : ordered_json("silverman");
  write_json(o.out / "config.json", echo);
}

int cmd_gradcheck(const Options& o, bool out_given) {
  const TrainingFixture fx = random_fixture(o.seed);
  const double err = grad_check(fx.batch, fx.std_params, fx.no_params, o.eps);
  std::cout << "max relative error " << format_double(err) << "\n";
  if (out_given) {
    prepare_out(o.out);
    ordered_json echo;
    echo["subcommand"] = "gradcheck";
    echo["seed"] = o.seed;
    echo["eps"] = o.eps;
    echo["max_relative_error"] = err;
    echo["tolerance"] = kGradTolerance;
    write_json(o.out / "config.json", echo);
  }
  return err < kGradTolerance ? kExitOk : kExitCheckFailed;
}

void add_scoring_flags(CLI::App* sub, Scoring& s) {
  sub->add_option("--methods", s.methods, "comma separated detection methods");
  sub->add_option("--tau", s.tau, "temperature override");
  sub->add_option("--energy-T", s.energy_T, "energy temperature");
  sub->add_option("--odin-T", s.odin_T, "ODIN temperature");
  sub->add_option("--odin-eps", s.odin_eps, "ODIN perturbation size");
  sub->add_option("--react-clamp-pct", s.react_pct, "ReAct clamp percentile of training activations");
  sub->add_option("--atd-compare", s.atd_compare, "original|rescaled")
      ->check(CLI::IsMember({"original", "rescaled"}));
}

}  // namespace

int exit_code_for(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::Precondition:
    case ErrorCode::BadManifest:
    case ErrorCode::NonPositiveTau:
    case ErrorCode::NonPositiveT:
    case ErrorCode::NonPositiveBandwidth:
    case ErrorCode::EmptyClassName:
    case ErrorCode::DuplicateClass:
      return kExitConfig;
    default:
      return kExitData;
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return ec == std::errc() ? std::string(buf, p) : std::string("nan");
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"CLIPN out-of-distribution detection toolkit", "clipn"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark");
  synth->add_option("--seed", o.seed);
  synth->add_option("--out", o.out)->required();
  synth->add_option("--c-id", o.synth.c_id);
  synth->add_option("--c-ood", o.synth.c_ood);
  synth->add_option("--dim", o.synth.dim);
  synth->add_option("--n-per-class", o.synth.n_per_class);
  synth->add_option("--spread", o.synth.intra_spread);

  auto* train_cmd = app.add_subcommand("train", "train the \"no\" text encoder");
  train_cmd->add_option("--manifest", o.manifest)->required();
  train_cmd->add_option("--out", o.out)->required();
  train_cmd->add_option("--seed", o.seed);
  train_cmd->add_option("--lr", o.lr);
  train_cmd->add_option("--epochs", o.epochs);
  train_cmd->add_option("--mode", o.mode)->check(CLI::IsMember({"learnable", "handcrafted"}));
  train_cmd->add_option("--prompt-tokens", o.prompt_tokens);

  auto* score_cmd = app.add_subcommand("score", "write per-sample scores");
  score_cmd->add_option("--manifest", o.manifest)->required();
  score_cmd->add_option("--out", o.out)->required();
  score_cmd->add_option("--seed", o.seed);
  score_cmd->add_option("--checkpoint", o.checkpoint);
  score_cmd->add_option("--input", o.input, "embedding file to score instead of the test splits");
  add_scoring_flags(score_cmd, o.scoring);

  auto* eval_cmd = app.add_subcommand("eval", "AUROC / FPR95 per method");
  eval_cmd->add_option("--manifest", o.manifest)->required();
  eval_cmd->add_option("--out", o.out)->required();
  eval_cmd->add_option("--seed", o.seed);
  eval_cmd->add_option("--checkpoint", o.checkpoint);
  eval_cmd->add_option("--kde-bandwidth", o.kde_bandwidth);
  add_scoring_flags(eval_cmd, o.scoring);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the loss gradient");
  grad_cmd->add_option("--seed", o.seed);
  grad_cmd->add_option("--eps", o.eps);
  grad_cmd->add_option("--out", o.out);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "clipn: " << e.what() << "\n";
    return kExitConfig;
  }

  auto* active = app.get_subcommands().front();
  o.seed_given = active->count("--seed") > 0;
  try {
    if (active == synth) {
      cmd_synth(o);
    } else if (active == train_cmd) {
      cmd_train(o);
    } else if (active == score_cmd) {
      cmd_score(o);
    } else if (active == eval_cmd) {
      cmd_eval(o);
    } else {
      return cmd_gradcheck(o, grad_cmd->count("--out") > 0);
    }
  } catch (const Error& e) {
    std::cerr << "clipn: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "clipn: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace clipn::cli
