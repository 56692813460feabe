#include "talkback/http.hpp"

#include "httplib.h"

namespace talkback {

struct HttpServer::Impl {
  Service& svc;
  httplib::Server server;
  explicit Impl(Service& s) : svc(s) {}
};

HttpServer::HttpServer(Service& svc, std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>(svc)) {
  auto& server = impl_->server;
  if (static_dir) server.set_mount_point("/", static_dir->string());
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const auto out = impl_->svc.handle(req.method, req.path, req.body, query);
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  const std::string any = R"(/(health|datasets|importance/.*|versions/.*|sessions(/.*)?))";
  server.Get(any, route);
  server.Post(any, route);
  server.Put(any, route);
  server.Delete(any, route);
  server.Patch(any, route);
  server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty())
      res.set_content(Json{{"error", "no route for " + req.path}}.dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool HttpServer::listen() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace talkback
