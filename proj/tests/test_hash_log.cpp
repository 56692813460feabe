#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "talkback/event_log.hpp"
#include "talkback/hash.hpp"

using namespace talkback;

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

namespace {

EventLog sample() {
  EventLog log;
  log.append("s-1", "session", {{"mode", "qbb"}});
  log.append("s-1", "event", {{"kind", "AddLabel"}, {"n", 1}});
  log.append("s-1", "event", {{"kind", "AddLabel"}, {"n", 2}, {"text", "café"}});
  log.append("s-1", "fit", {{"version_id", "abc"}});
  return log;
}

}  // namespace

TEST_CASE("chain links each record to its predecessor") {
  const auto log = sample();
  const auto& rs = log.records();
  REQUIRE(rs.size() == 4);
  CHECK(rs[0].prev == kGenesisHash);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    CHECK(rs[i].seq == i + 1);
    CHECK(rs[i].hash == record_hash(rs[i].seq, rs[i].session_id, rs[i].type, rs[i].body, rs[i].prev));
    if (i) CHECK(rs[i].prev == rs[i - 1].hash);
  }
  const auto parsed = EventLog::parse(log.text());
  REQUIRE(parsed.size() == 4);
  CHECK(parsed.back().hash == rs.back().hash);
}

TEST_CASE("record hash is sha256 of the canonical record without its hash") {
  const Json body{{"b", 1}, {"a", 2}};
  const Json rec{{"seq", 3}, {"session_id", "s"}, {"type", "event"}, {"body", body}, {"prev", kGenesisHash}};
  CHECK(record_hash(3, "s", "event", body, kGenesisHash) == sha256_hex(rec.dump(-1, ' ', false)));
}

TEST_CASE("any single byte change is detected") {
  const auto text = sample().text();
  std::size_t detected = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    auto t = text;
    t[i] = t[i] == 'x' ? 'y' : 'x';
    try {
      EventLog::parse(t);
    } catch (const IntegrityError&) {
      ++detected;
    }
  }
  CHECK(detected == text.size());
}

TEST_CASE("truncation, reordering and deletion are detected") {
  const auto text = sample().text();
  std::vector<std::string> lines;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i)
    if (text[i] == '\n') {
      lines.push_back(text.substr(start, i + 1 - start));
      start = i + 1;
    }
  REQUIRE(lines.size() == 4);

  CHECK_THROWS_AS(EventLog::parse(text.substr(0, text.size() - 1)), IntegrityError);
  CHECK_THROWS_AS(EventLog::parse(lines[0] + lines[2] + lines[1] + lines[3]), IntegrityError);
  CHECK_THROWS_AS(EventLog::parse(lines[0] + lines[1] + lines[3]), IntegrityError);
  CHECK_THROWS_AS(EventLog::parse(lines[1] + lines[2] + lines[3]), IntegrityError);
  // Dropping a suffix of whole lines is still a valid prefix.
  CHECK(EventLog::parse(lines[0] + lines[1]).size() == 2);
  CHECK(EventLog::parse("").empty());
}

TEST_CASE("integrity error names the failing sequence number") {
  const auto text = sample().text();
  const auto pos = text.find("\"n\":2");
  REQUIRE(pos != std::string::npos);
  auto t = text;
  t[pos + 4] = '3';
  try {
    EventLog::parse(t);
    FAIL("expected IntegrityError");
  } catch (const IntegrityError& e) {
    CHECK(e.sequence() == 3);
  }
}

TEST_CASE("re-hashed forgery breaks the chain at the next record") {
  auto rs = sample().records();
  rs[1].body["n"] = 99;
  rs[1].hash = record_hash(rs[1].seq, rs[1].session_id, rs[1].type, rs[1].body, rs[1].prev);
  std::string t;
  for (const auto& r : rs) t += r.to_json().dump(-1, ' ', false) + "\n";
  try {
    EventLog::parse(t);
    FAIL("expected IntegrityError");
  } catch (const IntegrityError& e) {
    CHECK(e.sequence() == 3);
  }
}

TEST_CASE("file-backed log reopens and continues the chain") {
  const auto dir = std::filesystem::temp_directory_path() / "talkback_log_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto path = dir / "s.jsonl";
  {
    EventLog log(path);
    log.append("s", "session", Json::object());
    log.append("s", "event", {{"n", 1}});
  }
  EventLog reopened(path);
  CHECK(reopened.records().size() == 2);
  reopened.append("s", "event", {{"n", 2}});
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(EventLog::parse(all).size() == 3);
  std::filesystem::remove_all(dir);
}
