#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "talkback/service.hpp"

namespace talkback {

/// HTTP/1.1 front end for a Service. Every route answers JSON; a static
/// directory, when given, is mounted at "/".
class HttpServer {
 public:
  explicit HttpServer(Service& svc, std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds to `port` (0 picks a free one) and returns the bound port, or -1.
  int bind(const std::string& host, int port);
  /// Blocks until stop() is called.
  bool listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace talkback
