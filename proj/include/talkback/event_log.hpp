#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "talkback/json_io.hpp"

namespace talkback {

/// One line of a session log. `hash` covers every other field, and `prev` is
/// the predecessor's hash (64 zeros for the first record).
struct LogRecord {
  std::uint64_t seq = 0;
  std::string session_id;
  std::string type;  // session | event | challenge | response | fit
  Json body;
  std::string prev;
  std::string hash;

  Json to_json() const;
};

inline const std::string kGenesisHash(64, '0');

std::string record_hash(std::uint64_t seq, const std::string& session_id, const std::string& type, const Json& body,
                        const std::string& prev);

/// Append-only JSON-lines log with a SHA-256 hash chain. Each line is the
/// canonical serialization of its record.
class EventLog {
 public:
  EventLog() = default;
  /// Opens (and verifies) `file`, creating it on first append.
  explicit EventLog(std::filesystem::path file);

  const LogRecord& append(const std::string& session_id, const std::string& type, Json body);
  const std::vector<LogRecord>& records() const { return records_; }
  std::uint64_t next_seq() const { return records_.size() + 1; }
  std::string text() const;

  /// Throws IntegrityError at the first record that fails to parse, is out
  /// of sequence, breaks the chain or is not in canonical form.
  static std::vector<LogRecord> parse(std::string_view text);

 private:
  std::optional<std::filesystem::path> file_;
  std::vector<LogRecord> records_;
};

}  // namespace talkback
