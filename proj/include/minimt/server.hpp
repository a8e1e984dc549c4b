#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <string_view>

#include "minimt/translator.hpp"

namespace minimt {

inline constexpr int kApiVersion = 1;

struct HttpReply {
  int status = 200;
  std::string body;  // JSON
};

// Request handling without the transport, so it can be exercised directly.
class TranslationService {
 public:
  TranslationService(const Translator& translator, DecodeOptions defaults);

  // Body: {"id", "src", "opts"} or an array of them. Per-item failures come
  // back as {"id", "error"} and do not affect the other items.
  HttpReply translate(std::string_view body) const;
  HttpReply health() const;

 private:
  const Translator& translator_;
  DecodeOptions defaults_;
  std::chrono::steady_clock::time_point started_;
};

// JSON over HTTP: POST /translate, GET /health.
class HttpServer {
 public:
  HttpServer(const TranslationService& service, std::size_t threads);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Port 0 picks a free port. Returns the bound port; throws on failure.
  int bind(const std::string& host, int port);
  // Blocks until stop(); requests in flight finish first.
  void listen();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace minimt
