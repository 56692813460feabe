#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "talkback/http.hpp"

using namespace talkback;

TEST_CASE("http adapter serves the json api") {
  Service svc(std::nullopt, [] { return std::string("2024-01-01T00:00:00Z"); });
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread t([&] { server.listen(); });

  httplib::Client cli("127.0.0.1", port);
  auto health = cli.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(Json::parse(health->body)["status"] == "ok");

  auto created = cli.Post("/sessions", Json{{"dataset_csv", "a,b\n1,2\n3,4\n"}}.dump(), "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const auto sid = Json::parse(created->body)["session_id"].get<std::string>();

  auto rows = cli.Get("/sessions/" + sid + "/rows?offset=1&limit=5");
  REQUIRE(rows);
  CHECK(rows->status == 200);
  const auto body = Json::parse(rows->body);
  REQUIRE(body["rows"].size() == 1);
  CHECK(body["rows"][0]["row_id"] == 1);

  auto ragged = cli.Post("/sessions", Json{{"dataset_csv", "a,b\n1\n"}}.dump(), "application/json");
  REQUIRE(ragged);
  CHECK(ragged->status == 400);
  CHECK(Json::parse(ragged->body).contains("error"));

  auto missing = cli.Get("/elsewhere");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(Json::parse(missing->body).contains("error"));

  auto wrong = cli.Delete("/health");
  REQUIRE(wrong);
  CHECK(wrong->status == 405);

  server.stop();
  t.join();
}
