// promptreg: batch registration, synthetic data, evaluation, sweeps and the
// interactive service.
//
// Exit codes: 0 success, 1 the run failed (every prompt failed, I/O during a
// run, remote segmenter down), 2 bad configuration or arguments.

#include <cmath>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "CLI11.hpp"

#include "promptreg/promptreg.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace promptreg;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

bool is_config_error(Errc c) {
  return c == Errc::ConfigError || c == Errc::SpecError || c == Errc::NoKindsEnabled;
}

double parse_real(const std::string& s) {
  if (s == "inf" || s == "+inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw Error(Errc::ConfigError, "not a number: '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::detail::write_file(path, text);
}

// ---- register -------------------------------------------------------------------

struct RegisterArgs {
  std::string config;
  std::optional<int> num_prompts;
  std::optional<std::string> sigma;
  std::optional<double> epsilon;
  std::optional<int> marg_j;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> segmenter;
  std::optional<std::string> out;
  std::optional<std::string> policy;
  std::optional<int> threads;
  bool no_overlays = false;
};

int cmd_register(const RegisterArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.num_prompts) cfg.num_prompts = *a.num_prompts;
  if (a.sigma) cfg.aux.sigma = parse_real(*a.sigma);
  if (a.epsilon) cfg.aux.epsilon = *a.epsilon;
  if (a.marg_j) cfg.marg.num_transforms = *a.marg_j;
  if (a.seed) cfg.seed = *a.seed;
  if (a.segmenter) cfg.segmenter = *a.segmenter;
  if (a.out) cfg.output_dir = *a.out;
  if (a.policy) cfg.prompt_policy = parse_prompt_policy(*a.policy);
  if (a.threads) cfg.threads = *a.threads;
  if (a.no_overlays) cfg.overlays = false;
  cfg.validate();

  RunInputs in;
  try {
    in = load_inputs(cfg);
  } catch (const Error& e) {
    if (e.code() == Errc::IoError || e.code() == Errc::FormatError) throw Error(Errc::ConfigError, e.what());
    throw;
  }
  const auto seg = make_segmenter(cfg.segmenter);
  const auto r = run_register(in, cfg, *seg);
  write_outputs(cfg.output_dir, in, r, cfg.overlays);

  const auto d = r.report.pair_dice();
  const auto t = r.report.pair_tre();
  std::printf("pairs %zu/%zu  dice %.4f +- %.4f  tre %.3f +- %.3f  loss %.5g -> %.5g (%zu it)\n", r.report.pairs.size(),
              r.report.pairs.size() + r.report.failures.size(), d.mean, d.std, t.mean, t.std,
              r.report.loss_trace.front(), r.report.loss_trace.back(), r.report.loss_trace.size() - 1);
  if (!r.report.labels.empty()) {
    std::printf("labels %zu  dice %.4f (initial %.4f)  tre %.3f\n", r.report.labels.size(), r.report.label_dice().mean,
                r.report.initial_label_dice().mean, r.report.label_tre().mean);
  }
  for (const auto& f : r.report.failures) std::fprintf(stderr, "prompt %s failed: %s\n", f.tag.c_str(), f.message.c_str());
  std::printf("wrote %s\n", cfg.output_dir.string().c_str());
  return 0;
}

// ---- synth ----------------------------------------------------------------------

struct SynthArgs {
  std::vector<std::int64_t> dims{64, 64};
  int blobs = 3;
  std::string warp = "smooth";
  double magnitude = 4.0;
  std::vector<double> offset;
  int tissue = 4;
  bool occlude = false;
  std::uint64_t seed = 0;
  std::string out = "synth";
};

int cmd_synth(const SynthArgs& a) {
  SyntheticSpec spec;
  spec.dims = a.dims;
  spec.blobs = a.blobs;
  spec.warp = parse_warp_kind(a.warp);
  spec.magnitude = a.magnitude;
  spec.offset = a.offset;
  spec.tissue_regions = a.tissue;
  spec.occlude = a.occlude;
  spec.seed = a.seed;
  const auto p = gen_synthetic_pair(spec);

  const fs::path dir = a.out;
  fs::create_directories(dir);
  const std::string ext = a.dims.size() == 2 ? ".pgm" : ".raw";
  io::save_image(dir / ("moving" + ext), p.moving);
  io::save_image(dir / ("fixed" + ext), p.fixed);
  io::save_labels(dir / ("moving_labels" + ext), p.moving_labels);
  io::save_labels(dir / ("fixed_labels" + ext), p.fixed_labels);
  save_field(dir / "truth.ddf", p.truth);

  RunConfig cfg;
  cfg.moving = "moving" + ext;
  cfg.fixed = "fixed" + ext;
  cfg.moving_labels = "moving_labels" + ext;
  cfg.fixed_labels = "fixed_labels" + ext;
  cfg.output_dir = "out";
  cfg.seed = a.seed;
  io::detail::write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");

  json meta = {{"dims", a.dims}, {"blobs", a.blobs}, {"warp", to_string(spec.warp)}, {"magnitude", a.magnitude},
               {"tissue_regions", a.tissue}, {"occlude", a.occlude}, {"seed", a.seed},
               {"max_displacement", p.truth.max_norm()}};
  if (p.occluded_label) meta["occluded_label"] = *p.occluded_label;
  io::detail::write_file(dir / "spec.json", meta.dump(2) + "\n");
  std::printf("wrote %s\n", dir.string().c_str());
  return 0;
}

// ---- eval -----------------------------------------------------------------------

struct EvalArgs {
  std::string field;
  std::string moving_labels;
  std::string fixed_labels;
  std::optional<std::string> truth;
  std::string out = "-";
};

int cmd_eval(const EvalArgs& a) {
  DeformationField field;
  LabelMap ml, fl;
  std::optional<DeformationField> truth;
  try {
    field = load_field(a.field);
    ml = io::load_labels(a.moving_labels);
    fl = io::load_labels(a.fixed_labels);
    if (a.truth) truth = load_field(*a.truth);
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, e.what());
  }
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  const auto zero = DeformationField(field.fixed_shape(), field.control_spacing());
  const auto after = evaluate_labels(ml, fl, field);
  const auto before = evaluate_labels(ml, fl, zero);
  json labels = json::array();
  std::vector<double> d, t, d0;
  for (std::size_t i = 0; i < after.size(); ++i) {
    labels.push_back({{"label", after[i].label}, {"dice", num(after[i].dice)}, {"tre", num(after[i].tre)},
                      {"initial_dice", num(before[i].dice)}, {"initial_tre", num(before[i].tre)}});
    d.push_back(after[i].dice);
    t.push_back(after[i].tre);
    d0.push_back(before[i].dice);
  }
  auto stats = [&](const Stats& s) { return json{{"mean", num(s.mean)}, {"std", num(s.std)}, {"n", s.n}}; };
  json out = {{"labels", labels},
              {"summary", {{"dice", stats(summarize(d))}, {"tre", stats(summarize(t))}, {"initial_dice", stats(summarize(d0))}}},
              {"max_displacement", field.max_norm()}};
  if (truth) {
    if (!truth->fixed_shape().same_extent(field.fixed_shape())) throw Error(Errc::ShapeMismatch, "truth and field grids differ");
    const auto u = field.dense();
    const auto g = truth->dense();
    const auto nd = static_cast<std::size_t>(field.ndim());
    std::vector<double> err;
    for (std::size_t v = 0; v < u.size() / nd; ++v) {
      double s = 0.0;
      for (std::size_t k = 0; k < nd; ++k) s += (u[v * nd + k] - g[v * nd + k]) * (u[v * nd + k] - g[v * nd + k]);
      err.push_back(std::sqrt(s));
    }
    out["field_error"] = {{"mean", summarize(err).mean}, {"max", *std::max_element(err.begin(), err.end())}};
  }
  write_text(a.out, out.dump(2) + "\n");
  return 0;
}

// ---- sweep ----------------------------------------------------------------------

struct SweepArgs {
  std::string param = "k";
  std::string values;
  int pairs = 20;
  std::vector<std::int64_t> dims{64, 64};
  int blobs = 3;
  std::string warp = "smooth";
  double magnitude = 4.0;
  int tissue = 4;
  double occlusion = 0.0;
  std::uint64_t seed = 1;
  std::optional<std::string> config;
  std::string policy = "random-anywhere";
  std::string out = "-";
};

int cmd_sweep(const SweepArgs& a) {
  RunConfig cfg;
  if (a.config) cfg = load_config(*a.config);
  cfg.prompt_policy = parse_prompt_policy(a.policy);
  const auto seg = make_segmenter(cfg.segmenter);

  SuiteSpec suite;
  suite.pairs = a.pairs;
  suite.base.dims = a.dims;
  suite.base.blobs = a.blobs;
  suite.base.warp = parse_warp_kind(a.warp);
  suite.base.magnitude = a.magnitude;
  suite.base.tissue_regions = a.tissue;
  suite.occluded_fraction = a.occlusion;
  suite.seed = a.seed;

  auto values = split(a.values);
  if (values.empty()) {
    if (a.param == "k") values = {"1", "2", "3", "4", "5", "6"};
    else if (a.param == "sigma") values = {"2", "5", "10", "20", "40", "inf"};
    else if (a.param == "kind") values = {"translation", "rotation", "smooth"};
    else if (a.param == "policy") values = {"random-anywhere", "random-inside-label"};
  }
  if (a.param != "k" && a.param != "sigma" && a.param != "kind" && a.param != "policy") {
    throw Error(Errc::ConfigError, "sweep parameter must be k, sigma, kind or policy");
  }

  // The suite is shared across values unless the warp kind itself varies.
  std::vector<SyntheticPair> shared;
  if (a.param != "kind") shared = make_suite(suite);

  std::ostringstream csv;
  csv << "param,value,pair_dice,pair_tre,label_dice,label_tre,failed_runs,failed_prompts\n";
  for (const auto& v : values) {
    RunConfig c = cfg;
    const std::vector<SyntheticPair>* pairs = &shared;
    std::vector<SyntheticPair> own;
    if (a.param == "k") {
      c.num_prompts = static_cast<int>(parse_real(v));
    } else if (a.param == "sigma") {
      c.aux.sigma = parse_real(v);
    } else if (a.param == "policy") {
      c.prompt_policy = parse_prompt_policy(v);
    } else {
      SuiteSpec s = suite;
      s.base.warp = parse_warp_kind(v);
      // rotation magnitude is in degrees; keep the sweep's px magnitude meaningful
      if (s.base.warp == WarpKind::Rotation && a.magnitude <= 4.0) s.base.magnitude = 10.0;
      own = make_suite(s);
      pairs = &own;
    }
    c.validate();
    const auto score = evaluate_suite(*pairs, c, *seg);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%s,%.6f,%.6f,%.6f,%.6f,%zu,%zu\n", a.param.c_str(), v.c_str(), score.pair_dice,
                  score.pair_tre, score.label_dice, score.label_tre, score.failed_runs, score.failed_prompts);
    csv << line;
    std::fprintf(stderr, "%s", line);
  }
  write_text(a.out, csv.str());
  return 0;
}

// ---- serve ----------------------------------------------------------------------

struct ServeArgs {
  std::optional<std::string> host;
  std::optional<int> port;
  std::optional<std::size_t> max_payload;
  int ttl = 3600;
  std::string segmenter = "toy";
  std::optional<std::string> config;
};

SessionService* g_service = nullptr;

int cmd_serve(const ServeArgs& a) {
  auto opts = ServiceOptions::from_env();
  if (a.host) opts.host = *a.host;
  if (a.port) opts.port = *a.port;
  if (a.max_payload) opts.max_payload = *a.max_payload;
  if (a.ttl < 1) throw Error(Errc::ConfigError, "ttl must be >= 1 s");
  opts.ttl = std::chrono::seconds(a.ttl);
  if (a.config) opts.defaults = load_config(*a.config);
  std::shared_ptr<const Segmenter> seg = make_segmenter(a.config ? opts.defaults.segmenter : a.segmenter);
  SessionService svc(opts, seg);
  g_service = &svc;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->server().stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->server().stop();
  });
  std::printf("listening on %s:%d\n", opts.host.c_str(), opts.port);
  std::fflush(stdout);
  svc.run();
  g_service = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free image registration from corresponding segmentation prompts"};
  app.require_subcommand(1);

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "register one image pair from a JSON run config");
  reg->add_option("config", ra.config, "run config (JSON)")->required();
  reg->add_option("--num-prompts", ra.num_prompts, "number of sampled prompts K");
  reg->add_option("--sigma", ra.sigma, "auxiliary prompt distance threshold (px, or inf)");
  reg->add_option("--epsilon", ra.epsilon, "step factor for auxiliary positive prompts");
  reg->add_option("--marg-j", ra.marg_j, "number of random transforms to marginalise over");
  reg->add_option("--seed", ra.seed, "prompt sampling seed");
  reg->add_option("--segmenter", ra.segmenter, "toy | remote:<url>");
  reg->add_option("--out", ra.out, "output directory");
  reg->add_option("--policy", ra.policy, "random-anywhere | random-inside-label | manual-list");
  reg->add_option("--threads", ra.threads, "worker threads (0: all cores)");
  reg->add_flag("--no-overlays", ra.no_overlays, "skip PNG overlays");

  SynthArgs sa;
  auto* syn = app.add_subcommand("synth", "generate a synthetic pair with a known warp");
  syn->add_option("--dims", sa.dims, "grid size, 2 or 3 values")->expected(2, 3);
  syn->add_option("--blobs", sa.blobs, "labelled blobs");
  syn->add_option("--warp", sa.warp, "translation | rotation | smooth");
  syn->add_option("--magnitude", sa.magnitude, "px for translation/smooth, degrees for rotation");
  syn->add_option("--offset", sa.offset, "translation vector (overrides magnitude)")->expected(2, 3);
  syn->add_option("--tissue", sa.tissue, "unlabelled background regions");
  syn->add_flag("--occlude", sa.occlude, "cut one fixed blob with a foreign stripe");
  syn->add_option("--seed", sa.seed, "generator seed");
  syn->add_option("--out", sa.out, "output directory");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "score a field against ground-truth labels");
  ev->add_option("--field", ea.field, "fitted field (.ddf)")->required();
  ev->add_option("--moving-labels", ea.moving_labels, "moving label map")->required();
  ev->add_option("--fixed-labels", ea.fixed_labels, "fixed label map")->required();
  ev->add_option("--truth", ea.truth, "ground-truth field (.ddf)");
  ev->add_option("--out", ea.out, "output JSON (default stdout)");

  SweepArgs wa;
  auto* sw = app.add_subcommand("sweep", "run a synthetic suite over a parameter grid, CSV out");
  sw->add_option("--param", wa.param, "k | sigma | kind | policy");
  sw->add_option("--values", wa.values, "comma-separated values");
  sw->add_option("--pairs", wa.pairs, "suite size");
  sw->add_option("--dims", wa.dims, "grid size")->expected(2, 3);
  sw->add_option("--blobs", wa.blobs, "labelled blobs per pair");
  sw->add_option("--warp", wa.warp, "warp kind for k/sigma sweeps");
  sw->add_option("--magnitude", wa.magnitude, "warp magnitude");
  sw->add_option("--tissue", wa.tissue, "unlabelled background regions");
  sw->add_option("--occlusion", wa.occlusion, "fraction of occluded pairs");
  sw->add_option("--seed", wa.seed, "suite seed");
  sw->add_option("--config", wa.config, "base run config (paths ignored)");
  sw->add_option("--policy", wa.policy, "prompt policy");
  sw->add_option("--out", wa.out, "output CSV (default stdout)");

  ServeArgs va;
  auto* sv = app.add_subcommand("serve", "interactive HTTP session service");
  sv->add_option("--host", va.host, "bind address (env PROMPTREG_BIND)");
  sv->add_option("--port", va.port, "port");
  sv->add_option("--max-payload", va.max_payload, "max request body in bytes (env PROMPTREG_MAX_PAYLOAD)");
  sv->add_option("--ttl", va.ttl, "idle session lifetime in seconds");
  sv->add_option("--segmenter", va.segmenter, "toy | remote:<url>");
  sv->add_option("--config", va.config, "default aux/marg/fit/seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*reg) return cmd_register(ra);
    if (*syn) return cmd_synth(sa);
    if (*ev) return cmd_eval(ea);
    if (*sw) return cmd_sweep(wa);
    if (*sv) return cmd_serve(va);
  } catch (const Error& e) {
    std::fprintf(stderr, "promptreg: %s\n", e.what());
    return is_config_error(e.code()) ? kExitConfig : kExitFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "promptreg: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
