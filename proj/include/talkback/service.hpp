#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "talkback/event_log.hpp"
#include "talkback/model_bundle.hpp"
#include "talkback/skeptic.hpp"

namespace talkback {

/// Error carrying an HTTP status.
class ApiError : public Error {
 public:
  ApiError(int status, const std::string& what, Json details = nullptr)
      : Error(what), status_(status), details_(std::move(details)) {}
  int status() const { return status_; }
  const Json& details() const { return details_; }

 private:
  int status_;
  Json details_;
};

struct ModelVersion {
  std::string version_id;
  std::string session_id;
  std::optional<std::string> parent;
  Learner learner = Learner::tree;
  LoopKind loop = LoopKind::long_term;
  EventId first_event = 0;
  EventId last_event = 0;
  std::string created;
  std::string artifact_hash;
  Json coverage;
  std::vector<std::string> warnings;
};

Json version_to_json(const ModelVersion& v);
ModelVersion version_from_json(const Json& j);

/// sha256(canonical(artifact) | first | last).
std::string make_version_id(const Json& artifact, EventId first, EventId last);

struct ApiResponse {
  int status = 200;
  Json body;
};

using Clock = std::function<std::string()>;
/// Current UTC time as ISO-8601.
std::string utc_now();

struct ReplaySummary {
  std::string session_id;
  std::size_t records = 0;
  std::size_t events = 0;
  std::vector<std::string> versions;
};

class Service {
 public:
  /// With a root, sessions persist under it and are reloaded (and verified
  /// by replay) on construction.
  explicit Service(std::optional<std::filesystem::path> root = std::nullopt, Clock clock = utc_now);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Routes one HTTP request. Never throws.
  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body,
                     const std::map<std::string, std::string>& query = {});

  // Typed operations; failures throw ApiError or a library error.
  Json create_session(const Json& req);
  Json session_summary(const std::string& sid);
  Json rows(const std::string& sid, std::size_t offset, std::size_t limit);
  Json list_events(const std::string& sid);
  Json submit_events(const std::string& sid, const Json& req);
  Json validate_events(const std::string& sid, const Json& req);
  Json fit(const std::string& sid, const Json& req);
  Json explain(const std::string& sid, const Json& req);
  Json compare(const std::string& sid, const Json& req);
  Json list_challenges(const std::string& sid);
  Json get_challenge(const std::string& sid, const std::string& cid);
  Json respond_challenge(const std::string& sid, const std::string& cid, const Json& req);
  Json get_version(const std::string& vid);
  std::string log_text(const std::string& sid);

  /// Rebuilds a session from its log, re-running every recorded fit. Throws
  /// IntegrityError on a broken chain or a fit whose version id differs.
  ReplaySummary load_log(std::string_view text);
  static ReplaySummary replay(std::string_view text);

 private:
  struct Session;
  Session& session(const std::string& sid);
  std::optional<ModelBundle> bundle_for(const std::string& vid);
  void apply_record(Session& s, const LogRecord& r, bool live);
  const LogRecord& record(Session& s, const std::string& type, Json body);
  ModelVersion run_fit(Session& s, LoopKind loop, const std::string& created);
  void store_version(const ModelVersion& v, const Json& artifact);

  std::optional<std::filesystem::path> root_;
  Clock clock_;
  std::shared_mutex sessions_mu_;
  std::map<std::string, std::unique_ptr<Session>> sessions_;
  std::mutex versions_mu_;
  std::map<std::string, ModelVersion> versions_;
  std::map<std::string, Json> artifacts_;
  std::uint64_t created_sessions_ = 0;
};

}  // namespace talkback
