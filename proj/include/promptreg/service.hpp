#pragma once

// Interactive registration over HTTP. A session holds one moving/fixed pair;
// each posted prompt adds a corresponding ROI pair, and a fit turns the pairs
// into a displacement field.
//
//   POST   /sessions                      {"moving": img, "fixed": img, "config"?}  -> 201
//   GET    /sessions/{id}[?maps=1]
//   POST   /sessions/{id}/prompts         {"coords": [..], "polarity"?, "tag"?} | {"points": [..], "tag"?}
//   POST   /sessions/{id}/fit
//   GET    /sessions/{id}/report
//   GET    /sessions/{id}/overlay?side=moving|fixed|warped&slice=i                  -> image/png
//   DELETE /sessions/{id}/pairs/{tag}
//
// Images are {"dims", "spacing"?, "data": base64 float32-LE}. Mutating calls
// may carry X-Revision; a stale value is answered with 409.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "promptreg/codec.hpp"
#include "promptreg/io.hpp"
#include "promptreg/overlay.hpp"
#include "promptreg/pipeline.hpp"

namespace promptreg {

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 binds any free port
  std::size_t max_payload = 64u << 20;
  std::chrono::seconds ttl{3600};
  RunConfig defaults;

  /// PROMPTREG_BIND (host or host:port) and PROMPTREG_MAX_PAYLOAD override the defaults.
  static ServiceOptions from_env() {
    ServiceOptions o;
    if (const char* b = std::getenv("PROMPTREG_BIND")) {
      const std::string s = b;
      const auto colon = s.rfind(':');
      if (colon == std::string::npos) {
        o.host = s;
      } else {
        o.host = s.substr(0, colon);
        o.port = std::atoi(s.c_str() + colon + 1);
      }
    }
    if (const char* m = std::getenv("PROMPTREG_MAX_PAYLOAD")) o.max_payload = std::strtoull(m, nullptr, 10);
    return o;
  }
};

struct Session {
  std::string id;
  RunConfig cfg;
  RunInputs inputs;
  EncodedPair encoded;

  std::mutex mutate;         // serialises mutations, held across the computation
  mutable std::shared_mutex state;  // guards everything below
  std::vector<PromptOutcome> outcomes;  // successful prompts, in arrival order
  std::size_t next_index = 0;
  std::uint64_t revision = 0;
  std::optional<RunResult> fitted;
  std::atomic<std::int64_t> last_access{0};
};

class HttpError : public std::runtime_error {
 public:
  HttpError(int status, std::string code, const std::string& msg)
      : std::runtime_error(msg), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

class SessionService {
 public:
  SessionService(ServiceOptions opts, std::shared_ptr<const Segmenter> seg) : opts_(std::move(opts)), seg_(std::move(seg)) {
    svr_.set_payload_max_length(opts_.max_payload);
    routes();
  }

  ~SessionService() { stop(); }

  /// Binds and serves on a background thread; returns the bound port.
  int start() {
    int port = opts_.port;
    if (port == 0) {
      port = svr_.bind_to_any_port(opts_.host);
    } else if (!svr_.bind_to_port(opts_.host, port)) {
      port = -1;
    }
    if (port < 0) throw Error(Errc::IoError, "cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
    return port;
  }

  /// Binds and serves on the calling thread.
  void run() {
    if (!svr_.listen(opts_.host, opts_.port)) throw Error(Errc::IoError, "cannot listen on " + opts_.host);
  }

  void stop() {
    svr_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::size_t session_count() const {
    std::shared_lock lk(store_mu_);
    return sessions_.size();
  }

  /// Drops sessions idle for longer than the TTL.
  void evict_expired() {
    const auto now = clock_now();
    std::unique_lock lk(store_mu_);
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if (now - it->second->last_access.load() > std::chrono::duration_cast<std::chrono::nanoseconds>(opts_.ttl).count()) {
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }

  httplib::Server& server() { return svr_; }

 private:
  using json = nlohmann::json;

  static std::int64_t clock_now() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch()).count();
  }

  static int status_for(Errc c) {
    switch (c) {
      case Errc::PointOutOfBounds:
      case Errc::NoPositivePrompt:
      case Errc::EmptyRoi:
      case Errc::ZeroPrototype:
      case Errc::AllBranchesFailed:
      case Errc::EmptyMask:
        return 422;
      case Errc::PayloadTooLarge: return 413;
      case Errc::EmptyPairSet: return 409;
      case Errc::TransportError:
      case Errc::ProtocolError:
        return 502;
      default: return 400;
    }
  }

  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        send_json(res, e.status(), {{"error", e.code()}, {"message", e.what()}});
      } catch (const Error& e) {
        send_json(res, status_for(e.code()), {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
      } catch (const json::exception& e) {
        send_json(res, 400, {{"error", "FormatError"}, {"message", e.what()}});
      } catch (const std::exception& e) {
        send_json(res, 500, {{"error", "Internal"}, {"message", e.what()}});
      }
    };
  }

  std::string new_id() {
    std::lock_guard lk(id_mu_);
    std::uniform_int_distribution<std::uint64_t> d;
    char buf[33];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(d(id_rng_)),
                  static_cast<unsigned long long>(d(id_rng_)));
    return buf;
  }

  std::shared_ptr<Session> find(const std::string& id) {
    evict_expired();
    std::shared_lock lk(store_mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw HttpError(404, "NotFound", "unknown session '" + id + "'");
    it->second->last_access = clock_now();
    return it->second;
  }

  static json parse_body(const httplib::Request& req, bool allow_empty = false) {
    if (req.body.empty()) {
      if (allow_empty) return json::object();
      throw HttpError(400, "FormatError", "request body is empty");
    }
    try {
      auto j = json::parse(req.body);
      if (!j.is_object()) throw HttpError(400, "FormatError", "request body must be a JSON object");
      return j;
    } catch (const json::exception& e) {
      throw HttpError(400, "FormatError", std::string("malformed JSON: ") + e.what());
    }
  }

  // Checks X-Revision against the current revision; call with `mutate` held.
  static void check_revision(const httplib::Request& req, const Session& s) {
    if (!req.has_header("X-Revision")) return;
    const auto v = req.get_header_value("X-Revision");
    std::uint64_t rev = 0;
    try {
      std::size_t used = 0;
      rev = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw HttpError(400, "FormatError", "X-Revision must be an unsigned integer");
    }
    std::shared_lock lk(s.state);
    if (rev != s.revision) {
      throw HttpError(409, "RevisionConflict",
                      "revision " + v + " is stale; current is " + std::to_string(s.revision));
    }
  }

  static json contour_json(const ProbabilityMap& m) {
    json out = json::array();
    const auto mask = binarize(m);
    if (cardinality(mask) == 0) return out;
    for (const auto& c : extract_contour(mask)) out.push_back(coords_json(c, m.shape().ndim()));
    return out;
  }

  static json fit_summary(const RunResult& r) {
    json pairs = json::array();
    for (const auto& p : r.report.pairs) {
      pairs.push_back({{"tag", p.tag},
                       {"dice", p.dice},
                       {"tre", std::isfinite(p.tre) ? json(p.tre) : json(nullptr)}});
    }
    const auto& t = r.report.loss_trace;
    return {{"loss", {{"initial", t.front()}, {"final", t.back()}, {"iterations", t.size() - 1}, {"trace", t}}},
            {"pairs", pairs},
            {"max_displacement", r.fit->field.max_norm()}};
  }

  void routes() {
    svr_.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) { create(req, res); }));
    svr_.Get(R"(/sessions/([0-9a-f]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = find(req.matches[1]);
      const bool maps = req.has_param("maps") && req.get_param_value("maps") != "0";
      std::shared_lock lk(s->state);
      send_json(res, 200, describe(*s, maps));
    }));
    svr_.Post(R"(/sessions/([0-9a-f]+)/prompts)",
              guarded([this](const httplib::Request& req, httplib::Response& res) { add_prompt(req, res); }));
    svr_.Post(R"(/sessions/([0-9a-f]+)/fit)",
              guarded([this](const httplib::Request& req, httplib::Response& res) { fit(req, res); }));
    svr_.Get(R"(/sessions/([0-9a-f]+)/report)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = find(req.matches[1]);
      std::shared_lock lk(s->state);
      if (!s->fitted) throw HttpError(409, "NotFitted", "no field has been fitted for the current pairs");
      send_json(res, 200, s->fitted->report.to_json(false));
    }));
    svr_.Get(R"(/sessions/([0-9a-f]+)/overlay)",
             guarded([this](const httplib::Request& req, httplib::Response& res) { overlay(req, res); }));
    svr_.Delete(R"(/sessions/([0-9a-f]+)/pairs/([^/]+))",
                guarded([this](const httplib::Request& req, httplib::Response& res) { delete_pair(req, res); }));
    svr_.Delete(R"(/sessions/([0-9a-f]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::unique_lock lk(store_mu_);
      if (sessions_.erase(req.matches[1]) == 0) throw HttpError(404, "NotFound", "unknown session");
      send_json(res, 200, {{"deleted", std::string(req.matches[1])}});
    }));
  }

  void create(const httplib::Request& req, httplib::Response& res) {
    evict_expired();
    const auto body = parse_body(req);
    for (const auto& [key, _] : body.items()) {
      if (key != "moving" && key != "fixed" && key != "config") {
        throw HttpError(400, "FormatError", "unexpected session field '" + key + "'");
      }
    }
    if (!body.contains("moving") || !body.contains("fixed")) throw HttpError(400, "FormatError", "need moving and fixed images");

    auto s = std::make_shared<Session>();
    s->cfg = opts_.defaults;
    if (body.contains("config")) {
      const auto& c = body["config"];
      detail::reject_unknown(c, {"aux", "marg", "fit", "seed"}, "session config");
      if (c.contains("aux")) s->cfg.aux = aux_from_json(c["aux"]);
      if (c.contains("marg")) s->cfg.marg = marg_from_json(c["marg"]);
      if (c.contains("fit")) s->cfg.fit = fit_from_json(c["fit"]);
      detail::read_key(c, "seed", s->cfg.seed);
    }
    s->cfg.prompt_policy = PromptPolicy::ManualList;
    s->cfg.threads = 1;
    s->cfg.aux.validate();
    s->cfg.marg.validate();
    s->cfg.fit.validate();

    s->inputs.moving = io::image_from_json(body["moving"]);
    s->inputs.fixed = io::image_from_json(body["fixed"]);
    if (!s->inputs.moving.shape().same_extent(s->inputs.fixed.shape())) {
      throw HttpError(400, "ShapeMismatch", "moving and fixed grids must match");
    }
    s->encoded = EncodedPair::encode(s->inputs.moving, s->inputs.fixed, *seg_);
    s->id = new_id();
    s->last_access = clock_now();
    {
      std::unique_lock lk(store_mu_);
      sessions_[s->id] = s;
    }
    res.set_header("X-Revision", "0");
    send_json(res, 201, {{"id", s->id}, {"revision", 0}, {"dims", s->inputs.moving.shape().dims()}});
  }

  json describe(const Session& s, bool maps) const {
    const int nd = s.inputs.moving.shape().ndim();
    json pairs = json::array();
    for (const auto& o : s.outcomes) {
      const auto& p = *o.pair;
      json j = {{"tag", p.class_tag},
                {"prompt_x", prompt_set_to_json(p.moving_prompts, nd)["points"]},
                {"prompt_y", prompt_set_to_json(p.fixed_prompts, nd)["points"]},
                {"dice", dice(binarize(p.moving), binarize(p.fixed))}};
      if (maps) {
        j["moving_map"] = {{"dtype", "f64"}, {"data", codec::base64_encode(codec::pack_f64_le(p.moving.values()))}};
        j["fixed_map"] = {{"dtype", "f64"}, {"data", codec::base64_encode(codec::pack_f64_le(p.fixed.values()))}};
      }
      pairs.push_back(j);
    }
    json out = {{"id", s.id},
                {"revision", s.revision},
                {"dims", s.inputs.moving.shape().dims()},
                {"pairs", pairs},
                {"has_field", s.fitted.has_value()},
                {"config", {{"aux", aux_to_json(s.cfg.aux)}, {"marg", marg_to_json(s.cfg.marg)},
                            {"fit", fit_to_json(s.cfg.fit)}, {"seed", s.cfg.seed}}}};
    if (s.fitted) out["fit"] = fit_summary(*s.fitted);
    return out;
  }

  void add_prompt(const httplib::Request& req, httplib::Response& res) {
    const auto s = find(req.matches[1]);
    auto body = parse_body(req);
    PromptSet z;
    try {
      std::optional<std::string> tag;
      if (body.contains("tag")) {
        if (!body["tag"].is_string() || body["tag"].get<std::string>().empty()) {
          throw Error(Errc::FormatError, "tag must be a non-empty string");
        }
        tag = body["tag"].get<std::string>();
        body.erase("tag");
      }
      if (body.contains("points")) {
        z = prompt_set_from_json(body);
      } else {
        z.points.push_back(prompt_point_from_json(body));
      }
      z.class_tag = tag;
    } catch (const Error& e) {
      throw HttpError(400, "FormatError", e.what());
    }
    check_prompts(s->inputs.moving.shape(), z);

    std::lock_guard mut(s->mutate);
    check_revision(req, *s);
    std::size_t index;
    {
      std::shared_lock lk(s->state);
      index = s->next_index;
      const auto tag = z.class_tag.value_or("p" + std::to_string(index));
      for (const auto& o : s->outcomes) {
        if (o.tag == tag) throw HttpError(409, "DuplicateTag", "pair '" + tag + "' already exists");
      }
    }
    auto o = correspond_prompt(s->encoded, z, index, *seg_, s->cfg);
    if (!o.pair) throw Error(o.error.value_or(Errc::InvalidArgument), o.failure);

    const int nd = s->inputs.moving.shape().ndim();
    json out = {{"tag", o.tag},
                {"prompt_y", prompt_set_to_json(o.pair->fixed_prompts, nd)["points"]},
                {"contour_x", contour_json(o.pair->moving)},
                {"contour_y", contour_json(o.pair->fixed)},
                {"dice", dice(binarize(o.pair->moving), binarize(o.pair->fixed))},
                {"branches", o.branches},
                {"failed_branches", o.failed_branches}};
    std::uint64_t rev;
    {
      std::unique_lock lk(s->state);
      s->outcomes.push_back(std::move(o));
      s->next_index = index + 1;
      s->fitted.reset();
      rev = ++s->revision;
    }
    out["revision"] = rev;
    res.set_header("X-Revision", std::to_string(rev));
    send_json(res, 200, out);
  }

  void fit(const httplib::Request& req, httplib::Response& res) {
    const auto s = find(req.matches[1]);
    std::lock_guard mut(s->mutate);
    check_revision(req, *s);
    std::vector<PromptOutcome> outcomes;
    {
      std::shared_lock lk(s->state);
      outcomes = s->outcomes;
    }
    if (outcomes.empty()) throw HttpError(409, "EmptyPairSet", "fit needs at least one ROI pair");
    auto r = assemble_run(std::move(outcomes), s->inputs, s->cfg);
    json out = fit_summary(r);
    std::uint64_t rev;
    {
      std::unique_lock lk(s->state);
      s->fitted = std::move(r);
      rev = ++s->revision;
    }
    out["revision"] = rev;
    res.set_header("X-Revision", std::to_string(rev));
    send_json(res, 200, out);
  }

  void delete_pair(const httplib::Request& req, httplib::Response& res) {
    const auto s = find(req.matches[1]);
    const std::string tag = req.matches[2];
    std::lock_guard mut(s->mutate);
    check_revision(req, *s);
    std::uint64_t rev;
    {
      std::unique_lock lk(s->state);
      const auto it = std::find_if(s->outcomes.begin(), s->outcomes.end(), [&](const auto& o) { return o.tag == tag; });
      if (it == s->outcomes.end()) throw HttpError(404, "NotFound", "no pair tagged '" + tag + "'");
      s->outcomes.erase(it);
      s->fitted.reset();
      rev = ++s->revision;
    }
    res.set_header("X-Revision", std::to_string(rev));
    send_json(res, 200, {{"revision", rev}, {"pairs", s->outcomes.size()}});
  }

  void overlay(const httplib::Request& req, httplib::Response& res) {
    const auto s = find(req.matches[1]);
    const std::string side = req.has_param("side") ? req.get_param_value("side") : "moving";
    std::optional<std::int64_t> slice;
    if (req.has_param("slice")) {
      try {
        slice = std::stoll(req.get_param_value("slice"));
      } catch (const std::exception&) {
        throw HttpError(400, "FormatError", "slice must be an integer");
      }
    }
    std::shared_lock lk(s->state);
    std::vector<RoiMask> masks;
    std::vector<PromptPoint> points;
    io::RgbImage img;
    if (side == "moving" || side == "fixed") {
      const bool mov = side == "moving";
      for (const auto& o : s->outcomes) {
        masks.push_back(binarize(mov ? o.pair->moving : o.pair->fixed));
        const auto& pts = mov ? o.pair->moving_prompts.points : o.pair->fixed_prompts.points;
        points.insert(points.end(), pts.begin(), pts.end());
      }
      img = render_overlay(mov ? s->inputs.moving : s->inputs.fixed, masks, points, slice);
    } else if (side == "warped") {
      const DeformationField field =
          s->fitted ? s->fitted->fit->field : DeformationField(s->inputs.fixed.shape(), s->cfg.fit.control_spacing);
      for (const auto& o : s->outcomes) masks.push_back(binarize(warp(o.pair->moving, field)));
      img = render_overlay(warp_image(s->inputs.moving, field), masks, points, slice);
    } else {
      throw HttpError(400, "FormatError", "side must be moving, fixed or warped");
    }
    res.status = 200;
    res.set_content(io::encode_png(img), "image/png");
  }

  ServiceOptions opts_;
  std::shared_ptr<const Segmenter> seg_;
  httplib::Server svr_;
  std::thread thread_;

  mutable std::shared_mutex store_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;

  std::mutex id_mu_;
  std::mt19937_64 id_rng_{std::random_device{}()};
};

}  // namespace promptreg
