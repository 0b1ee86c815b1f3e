#pragma once

// Client for an external promptable segmenter speaking JSON over HTTP:
//
//   POST /encode  {"image": b64 f32-LE, "dims": [..]}
//              -> {"dims": [..], "channels": N, "vectors": b64 f32-LE}
//   POST /segment {"image": b64 f32-LE, "dims": [..],
//                  "points": [{"coords": [..], "polarity": "positive"|"negative"}]}
//              -> {"dims": [..], "probs": b64 f32-LE}
//
// Every response is validated before it reaches the pipeline.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "promptreg/codec.hpp"
#include "promptreg/segmenter.hpp"

namespace promptreg {

struct RemoteOptions {
  std::chrono::milliseconds timeout{30000};
  std::size_t max_payload = 256u << 20;

  /// PROMPTREG_REMOTE_TIMEOUT_MS and PROMPTREG_REMOTE_MAX_PAYLOAD override the defaults.
  static RemoteOptions from_env() {
    RemoteOptions o;
    if (const char* t = std::getenv("PROMPTREG_REMOTE_TIMEOUT_MS")) o.timeout = std::chrono::milliseconds(std::atol(t));
    if (const char* m = std::getenv("PROMPTREG_REMOTE_MAX_PAYLOAD")) o.max_payload = std::strtoull(m, nullptr, 10);
    return o;
  }
};

inline std::string polarity_name(Polarity p) { return p == Polarity::Positive ? "positive" : "negative"; }

inline Polarity parse_polarity(const std::string& s) {
  if (s == "positive" || s == "pos") return Polarity::Positive;
  if (s == "negative" || s == "neg") return Polarity::Negative;
  throw Error(Errc::FormatError, "unknown polarity '" + s + "'");
}

class RemoteSegmenter final : public Segmenter {
 public:
  explicit RemoteSegmenter(std::string endpoint, RemoteOptions opts = RemoteOptions::from_env())
      : endpoint_(std::move(endpoint)), opts_(opts) {
    while (!endpoint_.empty() && endpoint_.back() == '/') endpoint_.pop_back();
  }

  const std::string& endpoint() const { return endpoint_; }

  FeatureVolume encode(const Image& image) const override {
    nlohmann::json req = image_payload(image);
    const auto resp = post("/encode", req);

    const GridShape fshape = response_shape(resp, image.shape().ndim());
    feature_downscale_or_protocol(image.shape(), fshape);
    if (!resp.contains("channels") || !resp["channels"].is_number_unsigned() || resp["channels"].get<std::size_t>() == 0) {
      throw Error(Errc::ProtocolError, "encode response needs a positive integer 'channels'");
    }
    const auto channels = resp["channels"].get<std::size_t>();
    const auto vec = decode_floats(resp, "vectors");
    if (vec.size() != fshape.size() * channels) throw Error(Errc::ProtocolError, "feature payload length mismatch");
    std::vector<double> data(vec.size());
    for (std::size_t i = 0; i < vec.size(); ++i) {
      if (!std::isfinite(vec[i])) throw Error(Errc::ProtocolError, "non-finite feature value");
      data[i] = vec[i];
    }
    return FeatureVolume(fshape, channels, std::move(data));
  }

  ProbabilityMap segment(const Image& image, const FeatureVolume& features, const PromptSet& prompts) const override {
    feature_downscale(image.shape(), features.shape());
    check_prompts(image.shape(), prompts);
    nlohmann::json req = image_payload(image);
    req["points"] = nlohmann::json::array();
    for (const auto& p : prompts.points) {
      std::vector<std::int64_t> coords(p.location.c.begin(), p.location.c.begin() + image.shape().ndim());
      req["points"].push_back({{"coords", coords}, {"polarity", polarity_name(p.polarity)}});
    }
    const auto resp = post("/segment", req);

    const GridShape shape = response_shape(resp, image.shape().ndim());
    if (!shape.same_extent(image.shape())) {
      throw Error(Errc::ProtocolError, "segment response grid " + shape.str() + " != image grid " + image.shape().str());
    }
    const auto probs = decode_floats(resp, "probs");
    if (probs.size() != shape.size()) throw Error(Errc::ProtocolError, "probability payload length mismatch");
    std::vector<double> p(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const double v = probs[i];
      if (!(v >= 0.0 && v <= 1.0)) throw Error(Errc::ProtocolError, "probability outside [0, 1] or NaN");
      p[i] = v;
    }
    return ProbabilityMap(image.shape(), std::move(p));
  }

 private:
  static nlohmann::json image_payload(const Image& image) {
    return {{"image", codec::encode_f32_base64(image.values())},
            {"dims", std::vector<std::int64_t>(image.shape().dims().begin(), image.shape().dims().end())}};
  }

  static void feature_downscale_or_protocol(const GridShape& image, const GridShape& features) {
    try {
      feature_downscale(image, features);
    } catch (const Error& e) {
      throw Error(Errc::ProtocolError, e.what());
    }
  }

  static GridShape response_shape(const nlohmann::json& resp, int ndim) {
    if (!resp.contains("dims") || !resp["dims"].is_array()) throw Error(Errc::ProtocolError, "response lacks dims");
    try {
      const auto dims = resp["dims"].get<std::vector<std::int64_t>>();
      if (static_cast<int>(dims.size()) != ndim) throw Error(Errc::ProtocolError, "response dims axis count mismatch");
      return GridShape(dims);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::ProtocolError, std::string("bad dims: ") + e.what());
    } catch (const Error& e) {
      if (e.code() == Errc::ProtocolError) throw;
      throw Error(Errc::ProtocolError, e.what());
    }
  }

  static std::vector<float> decode_floats(const nlohmann::json& resp, const char* key) {
    if (!resp.contains(key) || !resp[key].is_string()) throw Error(Errc::ProtocolError, std::string("response lacks ") + key);
    try {
      return codec::decode_f32_base64(resp[key].get<std::string>());
    } catch (const Error& e) {
      throw Error(Errc::ProtocolError, e.what());
    }
  }

  nlohmann::json post(const std::string& path, const nlohmann::json& body) const {
    const std::string payload = body.dump();
    if (payload.size() > opts_.max_payload) {
      throw Error(Errc::PayloadTooLarge, "request of " + std::to_string(payload.size()) + " bytes exceeds limit");
    }
    // One client per call: no state shared between concurrent requests.
    httplib::Client cli(endpoint_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(opts_.timeout - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());
    auto res = cli.Post(path, payload, "application/json");
    if (!res) throw Error(Errc::TransportError, endpoint_ + path + ": " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw Error(Errc::ProtocolError, endpoint_ + path + " returned HTTP " + std::to_string(res->status));
    }
    if (res->body.size() > opts_.max_payload) throw Error(Errc::PayloadTooLarge, "response exceeds payload limit");
    try {
      auto j = nlohmann::json::parse(res->body);
      if (!j.is_object()) throw Error(Errc::ProtocolError, "response is not a JSON object");
      return j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::ProtocolError, std::string("malformed JSON response: ") + e.what());
    }
  }

  std::string endpoint_;
  RemoteOptions opts_;
};

}  // namespace promptreg
