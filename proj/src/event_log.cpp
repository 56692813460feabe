#include "talkback/event_log.hpp"

#include <fstream>
#include <sstream>

#include "talkback/errors.hpp"
#include "talkback/hash.hpp"

namespace talkback {

namespace {

Json hashed_fields(std::uint64_t seq, const std::string& session_id, const std::string& type, const Json& body,
                   const std::string& prev) {
  return {{"seq", seq}, {"session_id", session_id}, {"type", type}, {"body", body}, {"prev", prev}};
}

}  // namespace

Json LogRecord::to_json() const {
  auto j = hashed_fields(seq, session_id, type, body, prev);
  j["hash"] = hash;
  return j;
}

std::string record_hash(std::uint64_t seq, const std::string& session_id, const std::string& type, const Json& body,
                        const std::string& prev) {
  return sha256_hex(canonical(hashed_fields(seq, session_id, type, body, prev)));
}

EventLog::EventLog(std::filesystem::path file) : file_(std::move(file)) {
  std::ifstream in(*file_, std::ios::binary);
  if (!in) return;
  std::ostringstream ss;
  ss << in.rdbuf();
  records_ = parse(ss.str());
}

const LogRecord& EventLog::append(const std::string& session_id, const std::string& type, Json body) {
  LogRecord r;
  r.seq = next_seq();
  r.session_id = session_id;
  r.type = type;
  r.body = std::move(body);
  r.prev = records_.empty() ? kGenesisHash : records_.back().hash;
  r.hash = record_hash(r.seq, r.session_id, r.type, r.body, r.prev);
  const auto line = canonical(r.to_json()) + "\n";
  if (file_) {
    if (file_->has_parent_path()) std::filesystem::create_directories(file_->parent_path());
    std::ofstream out(*file_, std::ios::binary | std::ios::app);
    out << line;
    out.flush();
    if (!out) throw Error("cannot append to log " + file_->string());
  }
  records_.push_back(std::move(r));
  return records_.back();
}

std::string EventLog::text() const {
  std::string out;
  for (const auto& r : records_) out += canonical(r.to_json()) + "\n";
  return out;
}

std::vector<LogRecord> EventLog::parse(std::string_view text) {
  std::vector<LogRecord> out;
  std::string prev = kGenesisHash;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::uint64_t seq = out.size() + 1;
    const auto end = text.find('\n', pos);
    if (end == std::string_view::npos) throw IntegrityError("record is not newline-terminated", seq);
    const std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception&) {
      throw IntegrityError("record does not parse", seq);
    }
    LogRecord r;
    try {
      r.seq = j.at("seq").get<std::uint64_t>();
      r.session_id = j.at("session_id").get<std::string>();
      r.type = j.at("type").get<std::string>();
      r.body = j.at("body");
      r.prev = j.at("prev").get<std::string>();
      r.hash = j.at("hash").get<std::string>();
    } catch (const Json::exception&) {
      throw IntegrityError("record lacks a required field", seq);
    }
    if (j.size() != 6) throw IntegrityError("record has unexpected fields", seq);
    if (r.seq != seq) throw IntegrityError("sequence number " + std::to_string(r.seq) + " out of order", seq);
    if (r.prev != prev) throw IntegrityError("hash chain broken", seq);
    if (record_hash(r.seq, r.session_id, r.type, r.body, r.prev) != r.hash)
      throw IntegrityError("record hash mismatch", seq);
    std::string canon;
    try {
      canon = canonical(j);
    } catch (const Json::exception&) {
      throw IntegrityError("record is not valid UTF-8", seq);
    }
    if (canon != line) throw IntegrityError("record is not in canonical form", seq);
    if (!out.empty() && r.session_id != out.front().session_id)
      throw IntegrityError("record belongs to another session", seq);
    prev = r.hash;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace talkback
