#pragma once

// Batch registration: sample K prompts on the moving image, find the
// corresponding ROI pair for each (with marginalisation), fit one displacement
// field over all pairs, and report overlap/centroid metrics.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "promptreg/deformation.hpp"
#include "promptreg/io.hpp"
#include "promptreg/marginalization.hpp"
#include "promptreg/overlay.hpp"
#include "promptreg/prompt_search.hpp"
#include "promptreg/registration.hpp"
#include "promptreg/remote_segmenter.hpp"
#include "promptreg/segmenter.hpp"
#include "promptreg/synthetic.hpp"

namespace promptreg {

using nlohmann::json;

enum class PromptPolicy { RandomAnywhere, RandomInsideLabel, ManualList };

inline std::string to_string(PromptPolicy p) {
  switch (p) {
    case PromptPolicy::RandomAnywhere: return "random-anywhere";
    case PromptPolicy::RandomInsideLabel: return "random-inside-label";
    case PromptPolicy::ManualList: return "manual-list";
  }
  return "unknown";
}

inline PromptPolicy parse_prompt_policy(const std::string& s) {
  if (s == "random-anywhere" || s == "anywhere") return PromptPolicy::RandomAnywhere;
  if (s == "random-inside-label" || s == "inside") return PromptPolicy::RandomInsideLabel;
  if (s == "manual-list" || s == "manual") return PromptPolicy::ManualList;
  throw Error(Errc::ConfigError, "unknown prompt policy '" + s + "'");
}

inline std::string to_string(GradientSign g) { return g == GradientSign::Descent ? "descent" : "as-written"; }

inline GradientSign parse_gradient_sign(const std::string& s) {
  if (s == "descent") return GradientSign::Descent;
  if (s == "as-written") return GradientSign::AsWritten;
  throw Error(Errc::ConfigError, "unknown gradient sign '" + s + "'");
}

// ---- prompt (de)serialisation ---------------------------------------------------

inline json coords_json(const GridIndex& idx, int ndim) {
  return std::vector<std::int64_t>(idx.c.begin(), idx.c.begin() + ndim);
}

inline json prompt_set_to_json(const PromptSet& p, int ndim) {
  json pts = json::array();
  for (const auto& pt : p.points) pts.push_back({{"coords", coords_json(pt.location, ndim)}, {"polarity", polarity_name(pt.polarity)}});
  json j = {{"points", pts}};
  if (p.class_tag) j["tag"] = *p.class_tag;
  return j;
}

inline PromptPoint prompt_point_from_json(const json& j) {
  if (!j.is_object() || !j.contains("coords") || !j["coords"].is_array()) {
    throw Error(Errc::FormatError, "prompt point needs a coords array");
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "coords" && key != "polarity") throw Error(Errc::FormatError, "unexpected prompt field '" + key + "'");
  }
  PromptPoint p;
  const auto& c = j["coords"];
  if (c.size() < 2 || c.size() > 3) throw Error(Errc::FormatError, "prompt coords need 2 or 3 entries");
  for (std::size_t a = 0; a < c.size(); ++a) {
    if (!c[a].is_number_integer()) throw Error(Errc::FormatError, "prompt coords must be integers");
    p.location[static_cast<int>(a)] = c[a].get<std::int64_t>();
  }
  if (j.contains("polarity")) {
    if (!j["polarity"].is_string()) throw Error(Errc::FormatError, "polarity must be a string");
    p.polarity = parse_polarity(j["polarity"].get<std::string>());
  }
  return p;
}

inline PromptSet prompt_set_from_json(const json& j) {
  if (!j.is_object() || !j.contains("points") || !j["points"].is_array()) {
    throw Error(Errc::FormatError, "prompt set needs a points array");
  }
  PromptSet out;
  for (const auto& [key, _] : j.items()) {
    if (key != "points" && key != "tag") throw Error(Errc::FormatError, "unexpected prompt set field '" + key + "'");
  }
  for (const auto& p : j["points"]) out.points.push_back(prompt_point_from_json(p));
  if (j.contains("tag")) {
    if (!j["tag"].is_string()) throw Error(Errc::FormatError, "prompt tag must be a string");
    out.class_tag = j["tag"].get<std::string>();
  }
  return out;
}

// ---- configuration -------------------------------------------------------------

struct RunConfig {
  std::filesystem::path moving;
  std::filesystem::path fixed;
  std::optional<std::filesystem::path> moving_labels;
  std::optional<std::filesystem::path> fixed_labels;
  int num_prompts = 4;
  PromptPolicy prompt_policy = PromptPolicy::RandomAnywhere;
  std::vector<PromptSet> prompts;  // manual-list
  AuxConfig aux;
  MarginalizationConfig marg;
  FitConfig fit;
  std::string segmenter = "toy";
  std::filesystem::path output_dir = "promptreg-out";
  std::uint64_t seed = 0;
  int threads = 0;  // 0: hardware concurrency
  bool overlays = true;

  void validate() const {
    if (prompt_policy != PromptPolicy::ManualList && num_prompts < 1) throw Error(Errc::ConfigError, "num_prompts must be >= 1");
    if (prompt_policy == PromptPolicy::ManualList && prompts.empty()) {
      throw Error(Errc::ConfigError, "manual-list policy needs at least one prompt");
    }
    if (threads < 0) throw Error(Errc::ConfigError, "threads must be >= 0");
    aux.validate();
    marg.validate();
    fit.validate();
  }
};

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw Error(Errc::ConfigError, where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw Error(Errc::ConfigError, "unknown " + where + " key '" + key + "'");
    }
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (!j.contains(key) || j[key].is_null()) return;
  try {
    out = j[key].get<T>();
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, std::string("bad value for '") + key + "': " + e.what());
  }
}

inline json real_or_inf(double v) { return std::isinf(v) ? json("inf") : json(v); }

inline double read_real_or_inf(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j[key];
  if (v.is_string() && (v.get<std::string>() == "inf" || v.get<std::string>() == "+inf")) {
    return std::numeric_limits<double>::infinity();
  }
  if (!v.is_number()) throw Error(Errc::ConfigError, std::string("'") + key + "' must be a number or \"inf\"");
  return v.get<double>();
}

}  // namespace detail

inline json aux_to_json(const AuxConfig& a) {
  return {{"sigma", detail::real_or_inf(a.sigma)}, {"epsilon", a.epsilon}, {"max_iters", a.max_iters},
          {"gradient_sign", to_string(a.gradient_sign)}, {"top_quantile", a.top_quantile}};
}

inline AuxConfig aux_from_json(const json& j) {
  detail::reject_unknown(j, {"sigma", "epsilon", "max_iters", "gradient_sign", "top_quantile"}, "aux");
  AuxConfig a;
  a.sigma = detail::read_real_or_inf(j, "sigma", a.sigma);
  detail::read_key(j, "epsilon", a.epsilon);
  detail::read_key(j, "max_iters", a.max_iters);
  detail::read_key(j, "top_quantile", a.top_quantile);
  if (j.contains("gradient_sign")) a.gradient_sign = parse_gradient_sign(j["gradient_sign"].get<std::string>());
  return a;
}

inline json marg_to_json(const MarginalizationConfig& m) {
  json kinds = json::array();
  for (auto k : m.kinds) kinds.push_back(to_string(k));
  return {{"num_transforms", m.num_transforms}, {"kinds", kinds}, {"rng_seed", m.rng_seed}};
}

inline MarginalizationConfig marg_from_json(const json& j) {
  detail::reject_unknown(j, {"num_transforms", "kinds", "rng_seed"}, "marg");
  MarginalizationConfig m;
  detail::read_key(j, "num_transforms", m.num_transforms);
  detail::read_key(j, "rng_seed", m.rng_seed);
  if (j.contains("kinds")) {
    m.kinds.clear();
    try {
      for (const auto& k : j["kinds"]) m.kinds.push_back(parse_transform_kind(k.get<std::string>()));
    } catch (const json::exception& e) {
      throw Error(Errc::ConfigError, std::string("bad marg kinds: ") + e.what());
    }
  }
  return m;
}

inline json fit_to_json(const FitConfig& f) {
  return {{"lambda_smooth", f.lambda_smooth}, {"max_iters", f.max_iters}, {"step", f.step},
          {"control_spacing", f.control_spacing}, {"tol", f.tol}, {"min_step", f.min_step}};
}

inline FitConfig fit_from_json(const json& j) {
  detail::reject_unknown(j, {"lambda_smooth", "max_iters", "step", "control_spacing", "tol", "min_step"}, "fit");
  FitConfig f;
  detail::read_key(j, "lambda_smooth", f.lambda_smooth);
  detail::read_key(j, "max_iters", f.max_iters);
  detail::read_key(j, "step", f.step);
  detail::read_key(j, "control_spacing", f.control_spacing);
  detail::read_key(j, "tol", f.tol);
  detail::read_key(j, "min_step", f.min_step);
  return f;
}

inline json to_json(const RunConfig& c) {
  json j = {{"moving", c.moving.string()},
            {"fixed", c.fixed.string()},
            {"num_prompts", c.num_prompts},
            {"prompt_policy", to_string(c.prompt_policy)},
            {"aux", aux_to_json(c.aux)},
            {"marg", marg_to_json(c.marg)},
            {"fit", fit_to_json(c.fit)},
            {"segmenter", c.segmenter},
            {"output_dir", c.output_dir.string()},
            {"seed", c.seed},
            {"threads", c.threads},
            {"overlays", c.overlays}};
  if (c.moving_labels) j["moving_labels"] = c.moving_labels->string();
  if (c.fixed_labels) j["fixed_labels"] = c.fixed_labels->string();
  if (!c.prompts.empty()) {
    json ps = json::array();
    for (const auto& p : c.prompts) {
      json pj = prompt_set_to_json(p, 3);
      // drop the unused third coordinate of 2D prompts
      for (auto& pt : pj["points"]) {
        if (pt["coords"].size() == 3 && pt["coords"][2].get<std::int64_t>() == 0) pt["coords"].erase(2);
      }
      ps.push_back(pj);
    }
    j["prompts"] = ps;
  }
  return j;
}

/// Relative paths are resolved against `base_dir`.
inline RunConfig config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  detail::reject_unknown(j,
                         {"moving", "fixed", "moving_labels", "fixed_labels", "num_prompts", "prompt_policy", "prompts",
                          "aux", "marg", "fit", "segmenter", "output_dir", "seed", "threads", "overlays"},
                         "config");
  RunConfig c;
  auto path_key = [&](const char* key) -> std::optional<std::filesystem::path> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_string()) throw Error(Errc::ConfigError, std::string("'") + key + "' must be a path string");
    std::filesystem::path p = j[key].get<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    return p;
  };
  c.moving = path_key("moving").value_or("");
  c.fixed = path_key("fixed").value_or("");
  c.moving_labels = path_key("moving_labels");
  c.fixed_labels = path_key("fixed_labels");
  if (auto o = path_key("output_dir")) c.output_dir = *o;
  detail::read_key(j, "num_prompts", c.num_prompts);
  if (j.contains("prompt_policy")) c.prompt_policy = parse_prompt_policy(j["prompt_policy"].get<std::string>());
  if (j.contains("prompts")) {
    try {
      for (const auto& p : j["prompts"]) c.prompts.push_back(prompt_set_from_json(p));
    } catch (const Error& e) {
      throw Error(Errc::ConfigError, e.what());
    }
  }
  if (j.contains("aux")) c.aux = aux_from_json(j["aux"]);
  if (j.contains("marg")) c.marg = marg_from_json(j["marg"]);
  if (j.contains("fit")) c.fit = fit_from_json(j["fit"]);
  detail::read_key(j, "segmenter", c.segmenter);
  detail::read_key(j, "seed", c.seed);
  detail::read_key(j, "threads", c.threads);
  detail::read_key(j, "overlays", c.overlays);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::detail::read_file(path));
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, e.what());
  }
  return config_from_json(j, path.parent_path());
}

inline std::unique_ptr<Segmenter> make_segmenter(const std::string& spec) {
  if (spec == "toy") return std::make_unique<ToySegmenter>();
  const std::string prefix = "remote:";
  if (spec.rfind(prefix, 0) == 0 && spec.size() > prefix.size()) {
    return std::make_unique<RemoteSegmenter>(spec.substr(prefix.size()));
  }
  throw Error(Errc::ConfigError, "segmenter must be 'toy' or 'remote:<url>', got '" + spec + "'");
}

// ---- prompt sampling ----------------------------------------------------------------

namespace detail {

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const auto i = static_cast<std::size_t>(unit_uniform(rng) * static_cast<double>(n));
  return std::min(i, n - 1);
}

}  // namespace detail

inline std::mt19937_64 prompt_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x70726dU};
  return std::mt19937_64(seq);
}

/// K single-positive prompt sets drawn one after another from `rng`, so the
/// first K of a K' > K draw are the K-draw. Tags are p0, p1, ...
inline std::vector<PromptSet> sample_prompts(const Image& img, PromptPolicy policy, int k, const LabelMap* labels,
                                             std::mt19937_64& rng) {
  if (k < 1) throw Error(Errc::InvalidArgument, "need at least one prompt");
  const auto& shape = img.shape();
  std::vector<std::size_t> pool;
  if (policy == PromptPolicy::RandomInsideLabel) {
    if (!labels) throw Error(Errc::EmptyLabel, "inside-label sampling needs a label map");
    if (!labels->shape().same_extent(shape)) throw Error(Errc::ShapeMismatch, "label map differs from the image grid");
    for (std::size_t i = 0; i < labels->size(); ++i) {
      if ((*labels)[i] > 0) pool.push_back(i);
    }
    if (pool.empty()) throw Error(Errc::EmptyLabel, "label map has no labelled location");
  } else if (policy == PromptPolicy::ManualList) {
    throw Error(Errc::InvalidArgument, "manual prompts are not sampled");
  }
  std::vector<PromptSet> out;
  for (int i = 0; i < k; ++i) {
    const auto lin = pool.empty() ? detail::uniform_index(rng, shape.size()) : pool[detail::uniform_index(rng, pool.size())];
    out.push_back(single_positive(shape.unravel(lin), "p" + std::to_string(i)));
  }
  return out;
}

/// Marginalisation seed for prompt k of a run.
inline std::uint64_t prompt_marg_seed(const RunConfig& cfg, std::size_t k) {
  return splitmix64(cfg.marg.rng_seed ^ splitmix64(cfg.seed + static_cast<std::uint64_t>(k)));
}

// ---- per-prompt correspondence --------------------------------------------------------

struct PromptOutcome {
  std::size_t index = 0;
  std::string tag;
  PromptSet prompts_x;
  std::optional<RoiPair> pair;
  std::size_t branches = 0;
  std::size_t failed_branches = 0;
  std::optional<SearchStop> stop;  // branch-0 search outcome
  int aux_steps = 0;
  std::optional<Errc> error;
  std::string failure;
};

inline PromptOutcome correspond_prompt(const EncodedPair& enc, const PromptSet& z, std::size_t k, const Segmenter& seg,
                                       const RunConfig& cfg) {
  PromptOutcome o;
  o.index = k;
  o.tag = z.class_tag.value_or("p" + std::to_string(k));
  o.prompts_x = z;
  o.prompts_x.class_tag = o.tag;
  try {
    MarginalizationConfig marg = cfg.marg;
    marg.rng_seed = prompt_marg_seed(cfg, k);
    auto res = marginalized_correspondence(enc, o.prompts_x, seg, cfg.aux, marg);
    o.branches = res.branches.size();
    o.failed_branches = res.failed_branches();
    for (const auto& b : res.branches) {
      if (b.ok) {
        o.stop = b.result->stop;
        o.aux_steps = b.result->aux_steps;
        break;
      }
    }
    RoiPair pair{o.tag, std::move(res.roi_x), std::move(res.roi_y), o.prompts_x, std::move(res.prompts_y)};
    pair.validate();
    o.pair = std::move(pair);
  } catch (const Error& e) {
    o.error = e.code();
    o.failure = e.what();
  }
  return o;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers (0: hardware
/// concurrency). The first exception is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads) : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---- report ------------------------------------------------------------------------

struct Stats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t n = 0;
};

/// Non-finite entries are skipped.
inline Stats summarize(std::span<const double> xs) {
  Stats s;
  double sum = 0.0;
  for (double x : xs) {
    if (!std::isfinite(x)) continue;
    sum += x;
    ++s.n;
  }
  if (s.n == 0) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(), 0};
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (double x : xs) {
    if (std::isfinite(x)) ss += (x - s.mean) * (x - s.mean);
  }
  s.std = std::sqrt(ss / static_cast<double>(s.n));
  return s;
}

struct PairEntry {
  std::string tag;
  PromptSet prompts_x;
  PromptSet prompts_y;
  double dice = 0.0;
  double tre = 0.0;  // NaN when the warped ROI vanished
  double initial_dice = 0.0;
  std::size_t branches = 0;
  std::size_t failed_branches = 0;
  std::string stop;
  int aux_steps = 0;
};

struct PromptFailure {
  std::size_t index = 0;
  std::string tag;
  std::string code;
  std::string message;
};

struct LabelEntry {
  std::int32_t label = 0;
  double dice = 0.0;
  double tre = 0.0;
  double initial_dice = 0.0;
  double initial_tre = 0.0;
};

struct RunReport {
  int ndim = 2;
  std::vector<PairEntry> pairs;
  std::vector<PromptFailure> failures;
  std::vector<LabelEntry> labels;
  std::vector<double> loss_trace;
  std::size_t branch_failures = 0;
  json config;
  double wall_time_s = 0.0;

  Stats pair_dice() const { return stat([](const PairEntry& p) { return p.dice; }); }
  Stats pair_tre() const { return stat([](const PairEntry& p) { return p.tre; }); }
  Stats label_dice() const { return label_stat([](const LabelEntry& l) { return l.dice; }); }
  Stats label_tre() const { return label_stat([](const LabelEntry& l) { return l.tre; }); }
  Stats initial_label_dice() const { return label_stat([](const LabelEntry& l) { return l.initial_dice; }); }

  json to_json(bool with_timing = true) const {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    auto stats = [&](const Stats& s) { return json{{"mean", num(s.mean)}, {"std", num(s.std)}, {"n", s.n}}; };
    json jp = json::array();
    for (const auto& p : pairs) {
      jp.push_back({{"tag", p.tag},
                    {"prompt_x", prompt_set_to_json(p.prompts_x, ndim)["points"]},
                    {"prompt_y", prompt_set_to_json(p.prompts_y, ndim)["points"]},
                    {"dice", num(p.dice)},
                    {"tre", num(p.tre)},
                    {"initial_dice", num(p.initial_dice)},
                    {"branches", p.branches},
                    {"failed_branches", p.failed_branches},
                    {"search_stop", p.stop},
                    {"aux_steps", p.aux_steps}});
    }
    json jf = json::array();
    for (const auto& f : failures) jf.push_back({{"index", f.index}, {"tag", f.tag}, {"code", f.code}, {"message", f.message}});
    json j = {{"pairs", jp},
              {"failures", jf},
              {"summary", {{"dice", stats(pair_dice())}, {"tre", stats(pair_tre())}}},
              {"loss", {{"initial", loss_trace.empty() ? json(nullptr) : num(loss_trace.front())},
                        {"final", loss_trace.empty() ? json(nullptr) : num(loss_trace.back())},
                        {"iterations", loss_trace.empty() ? 0 : loss_trace.size() - 1},
                        {"trace", loss_trace}}},
              {"branch_failures", branch_failures},
              {"config", config}};
    if (!labels.empty()) {
      json jl = json::array();
      for (const auto& l : labels) {
        jl.push_back({{"label", l.label}, {"dice", num(l.dice)}, {"tre", num(l.tre)},
                      {"initial_dice", num(l.initial_dice)}, {"initial_tre", num(l.initial_tre)}});
      }
      j["labels"] = jl;
      j["label_summary"] = {{"dice", stats(label_dice())}, {"tre", stats(label_tre())},
                            {"initial_dice", stats(initial_label_dice())}};
    }
    if (with_timing) j["wall_time_s"] = wall_time_s;
    return j;
  }

 private:
  template <typename F>
  Stats stat(F f) const {
    std::vector<double> xs;
    for (const auto& p : pairs) xs.push_back(f(p));
    return summarize(xs);
  }
  template <typename F>
  Stats label_stat(F f) const {
    std::vector<double> xs;
    for (const auto& l : labels) xs.push_back(f(l));
    return summarize(xs);
  }
};

struct RunInputs {
  Image moving;
  Image fixed;
  std::optional<LabelMap> moving_labels;
  std::optional<LabelMap> fixed_labels;
};

struct RunResult {
  RunReport report;
  RoiPairSet pairs;
  std::optional<FitResult> fit;
  std::vector<PromptOutcome> outcomes;
};

/// Fits the field over the surviving pairs and assembles the report. Shared by
/// the batch run and the interactive service.
inline RunResult assemble_run(std::vector<PromptOutcome> outcomes, const RunInputs& in, const RunConfig& cfg) {
  RunResult r;
  r.report.ndim = in.moving.shape().ndim();
  r.report.config = to_json(cfg);
  for (const auto& o : outcomes) {
    r.report.branch_failures += o.failed_branches;
    if (o.pair) {
      r.pairs.pairs.push_back(*o.pair);
    } else {
      r.report.failures.push_back({o.index, o.tag, std::string(to_string(o.error.value_or(Errc::InvalidArgument))), o.failure});
    }
  }
  if (r.pairs.empty()) {
    r.outcomes = std::move(outcomes);
    throw Error(Errc::AllPromptsFailed, "every prompt failed; first failure: " +
                                            (r.report.failures.empty() ? std::string("none") : r.report.failures.front().message));
  }
  r.fit = fit_ddf(r.pairs, cfg.fit);
  r.report.loss_trace = r.fit->loss_trace;
  const DeformationField zero(in.fixed.shape(), cfg.fit.control_spacing);

  std::size_t next = 0;
  for (const auto& o : outcomes) {
    if (!o.pair) continue;
    const auto& pair = r.pairs.pairs[next++];
    PairEntry e;
    e.tag = pair.class_tag;
    e.prompts_x = pair.moving_prompts;
    e.prompts_y = pair.fixed_prompts;
    e.dice = pair_dice(pair, r.fit->field);
    e.initial_dice = pair_dice(pair, zero);
    try {
      e.tre = tre(pair, r.fit->field);
    } catch (const Error& err) {
      if (err.code() != Errc::EmptyAfterWarp) throw;
      e.tre = std::numeric_limits<double>::quiet_NaN();
    }
    e.branches = o.branches;
    e.failed_branches = o.failed_branches;
    e.stop = o.stop ? to_string(*o.stop) : "";
    e.aux_steps = o.aux_steps;
    r.report.pairs.push_back(std::move(e));
  }

  if (in.moving_labels && in.fixed_labels) {
    const auto fitted = evaluate_labels(*in.moving_labels, *in.fixed_labels, r.fit->field);
    const auto initial = evaluate_labels(*in.moving_labels, *in.fixed_labels, zero);
    for (std::size_t i = 0; i < fitted.size(); ++i) {
      r.report.labels.push_back({fitted[i].label, fitted[i].dice, fitted[i].tre, initial[i].dice, initial[i].tre});
    }
  }
  r.outcomes = std::move(outcomes);
  return r;
}

/// In-memory run over an explicit prompt list.
inline RunResult register_with_prompts(const RunInputs& in, const std::vector<PromptSet>& prompts, const RunConfig& cfg,
                                       const Segmenter& seg) {
  cfg.validate();
  if (in.moving.shape().ndim() != in.fixed.shape().ndim()) throw Error(Errc::AxisMismatch, "moving/fixed axis count differs");
  if (!in.moving.shape().same_extent(in.fixed.shape())) {
    throw Error(Errc::ShapeMismatch, "moving and fixed grids must match for field fitting");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto enc = EncodedPair::encode(in.moving, in.fixed, seg);
  std::vector<PromptOutcome> outcomes(prompts.size());
  parallel_for(prompts.size(), cfg.threads,
               [&](std::size_t k) { outcomes[k] = correspond_prompt(enc, prompts[k], k, seg, cfg); });
  auto r = assemble_run(std::move(outcomes), in, cfg);
  r.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::vector<PromptSet> prompts_for(const RunInputs& in, const RunConfig& cfg) {
  if (cfg.prompt_policy == PromptPolicy::ManualList) return cfg.prompts;
  auto rng = prompt_rng(cfg.seed);
  return sample_prompts(in.moving, cfg.prompt_policy, cfg.num_prompts, in.moving_labels ? &*in.moving_labels : nullptr, rng);
}

inline RunResult run_register(const RunInputs& in, const RunConfig& cfg, const Segmenter& seg) {
  cfg.validate();
  return register_with_prompts(in, prompts_for(in, cfg), cfg, seg);
}

// ---- file-based run -------------------------------------------------------------------

inline RunInputs load_inputs(const RunConfig& cfg) {
  if (cfg.moving.empty() || cfg.fixed.empty()) throw Error(Errc::ConfigError, "config needs moving and fixed paths");
  RunInputs in{io::load_image(cfg.moving), io::load_image(cfg.fixed), std::nullopt, std::nullopt};
  if (cfg.moving_labels) in.moving_labels = io::load_labels(*cfg.moving_labels);
  if (cfg.fixed_labels) in.fixed_labels = io::load_labels(*cfg.fixed_labels);
  return in;
}

inline void write_outputs(const std::filesystem::path& dir, const RunInputs& in, const RunResult& r, bool overlays) {
  std::filesystem::create_directories(dir);
  io::detail::write_file(dir / "report.json", r.report.to_json().dump(2) + "\n");
  if (r.fit) save_field(dir / "field.ddf", r.fit->field);
  if (!overlays) return;
  std::vector<RoiMask> mx, my, mw;
  std::vector<PromptPoint> px, py;
  for (const auto& p : r.pairs.pairs) {
    mx.push_back(binarize(p.moving));
    my.push_back(binarize(p.fixed));
    if (r.fit) mw.push_back(binarize(warp(p.moving, r.fit->field)));
    px.insert(px.end(), p.moving_prompts.points.begin(), p.moving_prompts.points.end());
    py.insert(py.end(), p.fixed_prompts.points.begin(), p.fixed_prompts.points.end());
  }
  std::filesystem::create_directories(dir / "overlays");
  save_overlay(dir / "overlays" / "moving.png", in.moving, mx, px);
  save_overlay(dir / "overlays" / "fixed.png", in.fixed, my, py);
  if (r.fit) save_overlay(dir / "overlays" / "warped.png", warp_image(in.moving, r.fit->field), mw, {});
}

inline RunResult run_register(const RunConfig& cfg) {
  cfg.validate();
  const auto seg = make_segmenter(cfg.segmenter);
  const auto in = load_inputs(cfg);
  auto r = run_register(in, cfg, *seg);
  write_outputs(cfg.output_dir, in, r, cfg.overlays);
  return r;
}

// ---- synthetic suite evaluation ------------------------------------------------------

struct SuiteScore {
  double pair_dice = 0.0;   // mean over runs of the run's mean pair Dice
  double pair_tre = 0.0;
  double label_dice = 0.0;  // mean over runs of the run's mean label Dice
  double label_tre = 0.0;
  std::size_t failed_runs = 0;
  std::size_t failed_prompts = 0;
  std::vector<RunReport> reports;
};

/// Runs every suite pair with `cfg` (pair i uses seed splitmix64(cfg.seed + i)).
/// A run whose prompts all fail scores the unregistered (zero-field) label metrics.
inline SuiteScore evaluate_suite(std::span<const SyntheticPair> suite, const RunConfig& cfg, const Segmenter& seg) {
  SuiteScore s;
  std::vector<double> pd, pt, ld, lt;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const auto& sp = suite[i];
    RunConfig c = cfg;
    c.seed = splitmix64(cfg.seed + static_cast<std::uint64_t>(i));
    const RunInputs in{sp.moving, sp.fixed, sp.moving_labels, sp.fixed_labels};
    try {
      auto r = run_register(in, c, seg);
      s.failed_prompts += r.report.failures.size();
      pd.push_back(r.report.pair_dice().mean);
      pt.push_back(r.report.pair_tre().mean);
      ld.push_back(r.report.label_dice().mean);
      lt.push_back(r.report.label_tre().mean);
      s.reports.push_back(std::move(r.report));
    } catch (const Error& e) {
      if (e.code() != Errc::AllPromptsFailed) throw;
      ++s.failed_runs;
      s.failed_prompts += static_cast<std::size_t>(c.num_prompts);
      const DeformationField zero(sp.fixed.shape(), c.fit.control_spacing);
      std::vector<double> d, t;
      for (const auto& m : evaluate_labels(sp.moving_labels, sp.fixed_labels, zero)) {
        d.push_back(m.dice);
        t.push_back(m.tre);
      }
      ld.push_back(summarize(d).mean);
      lt.push_back(summarize(t).mean);
    }
  }
  s.pair_dice = summarize(pd).mean;
  s.pair_tre = summarize(pt).mean;
  s.label_dice = summarize(ld).mean;
  s.label_tre = summarize(lt).mean;
  return s;
}

}  // namespace promptreg
