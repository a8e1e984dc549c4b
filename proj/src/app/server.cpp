#include "minimt/server.hpp"

#include <map>
#include <stdexcept>

#include "httplib.h"
#include "json.hpp"

namespace minimt {

using json = nlohmann::json;

namespace {

constexpr std::size_t kMaxBody = 16u << 20;

json error_body(const std::string& message) { return json{{"error", message}}; }

std::size_t count_value(const std::string& key, const json& v) {
  if (!v.is_number_unsigned()) throw std::invalid_argument(key + " must be a non-negative integer");
  return v.get<std::size_t>();
}

// Per-request overrides of the server's decoding defaults.
DecodeOptions with_overrides(DecodeOptions d, const json& opts, bool* want_attn) {
  if (!opts.is_object()) throw std::invalid_argument("opts must be an object");
  for (const auto& [k, v] : opts.items()) {
    if (k == "beam_size") {
      d.beam_size = count_value(k, v);
    } else if (k == "n_best") {
      d.n_best = count_value(k, v);
    } else if (k == "decode_max_len") {
      d.max_len = count_value(k, v);
    } else if (k == "length_alpha") {
      d.length_alpha = v.get<double>();
    } else if (k == "coverage_beta") {
      d.coverage_beta = v.get<double>();
    } else if (k == "replace_unk") {
      d.replace_unk = v.get<bool>();
    } else if (k == "max_unk_count") {
      d.filters.clear();
      if (v.get<long long>() >= 0) d.filters.push_back(max_unk_count(count_value(k, v)));
    } else if (k == "attn") {
      *want_attn = v.get<bool>();
    } else {
      throw std::invalid_argument("unknown option " + k);
    }
  }
  d.validate();
  return d;
}

json response_item(const json& id, const Translation& t, bool want_attn) {
  if (!t.error.empty()) return json{{"id", id}, {"error", t.error}};
  json n_best = json::array();
  for (const auto& e : t.n_best) {
    n_best.push_back({{"tgt", e.tgt}, {"score", e.normalized}, {"raw_score", e.score}});
  }
  json r = {{"id", id},         {"tgt", t.tgt},        {"score", t.normalized},
            {"raw_score", t.score}, {"n_best", n_best}};
  if (t.constraint_unsatisfied) r["constraint_unsatisfied"] = true;
  if (want_attn) r["attn"] = t.attn;
  return r;
}

}  // namespace

TranslationService::TranslationService(const Translator& translator, DecodeOptions defaults)
    : translator_(translator),
      defaults_(std::move(defaults)),
      started_(std::chrono::steady_clock::now()) {
  defaults_.validate();
}

HttpReply TranslationService::translate(std::string_view body) const {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception& e) {
    return {400, error_body(std::string("malformed JSON: ") + e.what()).dump()};
  }
  const bool single = req.is_object();
  if (!single && !req.is_array()) {
    return {400, error_body("request must be an object or an array of objects").dump()};
  }
  const json items = single ? json::array({req}) : req;
  std::vector<json> replies(items.size());

  // Items sharing the same options are decoded together.
  struct Group {
    DecodeOptions opts;
    bool want_attn = false;
    std::vector<std::size_t> members;
    std::vector<std::string> lines;
  };
  std::map<std::string, Group> groups;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const json& item = items[i];
    const json id = item.is_object() && item.contains("id") ? item.at("id") : json(nullptr);
    try {
      if (!item.is_object()) throw std::invalid_argument("item must be an object");
      if (!item.contains("src") || !item.at("src").is_string()) {
        throw std::invalid_argument("src must be a string");
      }
      const json opts = item.value("opts", json::object());
      bool want_attn = false;
      DecodeOptions d = with_overrides(defaults_, opts, &want_attn);
      Group& g = groups[opts.dump()];
      if (g.members.empty()) {
        g.opts = std::move(d);
        g.want_attn = want_attn;
      }
      g.members.push_back(i);
      g.lines.push_back(item.at("src").get<std::string>());
    } catch (const std::exception& e) {
      replies[i] = json{{"id", id}, {"error", e.what()}};
    }
  }
  for (auto& [key, g] : groups) {
    const auto results = translator_.translate(g.lines, g.opts);
    for (std::size_t k = 0; k < g.members.size(); ++k) {
      const json& item = items[g.members[k]];
      replies[g.members[k]] = response_item(item.value("id", json(nullptr)), results[k], g.want_attn);
    }
  }
  if (single) return {200, replies.front().dump()};
  return {200, json(replies).dump()};
}

HttpReply TranslationService::health() const {
  const double uptime =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  json j = {{"status", "ok"},
            {"model", translator_.name()},
            {"config_hash", translator_.config_hash()},
            {"uptime_seconds", uptime},
            {"api_version", kApiVersion}};
  return {200, j.dump()};
}

struct HttpServer::Impl {
  httplib::Server server;
};

HttpServer::HttpServer(const TranslationService& service, std::size_t threads)
    : impl_(std::make_unique<Impl>()) {
  auto& s = impl_->server;
  const std::size_t n = threads == 0 ? 1 : threads;
  s.new_task_queue = [n] { return new httplib::ThreadPool(n); };
  s.set_payload_max_length(kMaxBody);
  s.Post("/translate", [&service](const httplib::Request& req, httplib::Response& res) {
    const HttpReply r = service.translate(req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
  s.Get("/health", [&service](const httplib::Request&, httplib::Response& res) {
    const HttpReply r = service.health();
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(error_body(msg).dump(), "application/json");
  });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  auto& s = impl_->server;
  if (port == 0) {
    const int p = s.bind_to_any_port(host);
    if (p < 0) throw std::runtime_error("cannot bind " + host);
    return p;
  }
  if (!s.bind_to_port(host, port)) {
    throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

bool HttpServer::running() const { return impl_->server.is_running(); }

}  // namespace minimt
