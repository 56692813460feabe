#include "talkback/service.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "talkback/hash.hpp"

namespace talkback {

namespace fs = std::filesystem;

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string make_version_id(const Json& artifact, EventId first, EventId last) {
  return sha256_hex(canonical(artifact) + "|" + std::to_string(first) + "|" + std::to_string(last));
}

Json version_to_json(const ModelVersion& v) {
  return {{"version_id", v.version_id},
          {"session_id", v.session_id},
          {"parent", v.parent ? Json(*v.parent) : Json(nullptr)},
          {"learner", to_string(v.learner)},
          {"loop", to_string(v.loop)},
          {"event_range", {v.first_event, v.last_event}},
          {"created", v.created},
          {"artifact_hash", v.artifact_hash},
          {"coverage", v.coverage},
          {"warnings", v.warnings}};
}

ModelVersion version_from_json(const Json& j) {
  try {
    ModelVersion v;
    v.version_id = j.at("version_id").get<std::string>();
    v.session_id = j.at("session_id").get<std::string>();
    if (!j.at("parent").is_null()) v.parent = j.at("parent").get<std::string>();
    v.learner = learner_from_string(j.at("learner").get<std::string>());
    v.loop = loop_from_string(j.at("loop").get<std::string>());
    v.first_event = j.at("event_range").at(0).get<EventId>();
    v.last_event = j.at("event_range").at(1).get<EventId>();
    v.created = j.at("created").get<std::string>();
    v.artifact_hash = j.at("artifact_hash").get<std::string>();
    v.coverage = j.at("coverage");
    v.warnings = j.at("warnings").get<std::vector<std::string>>();
    return v;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("version: ") + e.what(), 0);
  }
}

struct Service::Session {
  std::string id;
  std::string csv;
  Dataset data;
  SessionMode mode = SessionMode::qbb;
  Learner learner = Learner::tree;
  ConfigBundle config;
  std::string created;
  std::vector<ExplanationEvent> events;
  ValidationContext vctx;
  std::map<std::string, Challenge> challenges;
  std::vector<std::string> challenge_order;
  std::vector<std::string> versions;
  std::optional<std::string> head;
  EventLog log;
  std::mutex mu;
};

namespace {

std::optional<std::set<ClassId>> classes_for(SessionMode m) {
  if (m == SessionMode::qbb) return std::set<ClassId>{kUnwanted, kWanted};
  return std::nullopt;
}

// Active labels and the events that set them.
CompiledConstraints label_state(const std::vector<ExplanationEvent>& events) {
  CompiledConstraints cc;
  const auto active = active_event_ids(events);
  std::map<RowId, LabeledExample> latest;
  for (const auto& e : events) {
    if (!active.count(e.event_id)) continue;
    if (const auto* l = std::get_if<AddLabel>(&e.kind)) {
      latest[l->example.row_id] = l->example;
      cc.label_events[l->example.row_id] = e.event_id;
    }
  }
  for (const auto& [row, l] : latest) cc.labels.push_back(l);
  return cc;
}

std::vector<ExplanationEvent> events_from_request(const Json& req) {
  const Json& arr = req.is_object() && req.contains("events") ? req.at("events") : req;
  if (!arr.is_array()) throw ApiError(400, "expected a JSON array of events or {\"events\": [...]}");
  std::vector<ExplanationEvent> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    try {
      out.push_back(event_from_json(arr[i]));
    } catch (const ParseError& e) {
      throw ApiError(400, "event " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

}  // namespace

Service::Service(std::optional<fs::path> root, Clock clock) : root_(std::move(root)), clock_(std::move(clock)) {
  if (!root_) return;
  fs::create_directories(*root_ / "sessions");
  std::vector<fs::path> logs;
  for (const auto& entry : fs::directory_iterator(*root_ / "sessions"))
    if (entry.path().extension() == ".jsonl") logs.push_back(entry.path());
  std::sort(logs.begin(), logs.end());
  for (const auto& p : logs) load_log(read_file(p));
}

Service::~Service() = default;

Service::Session& Service::session(const std::string& sid) {
  std::shared_lock lock(sessions_mu_);
  auto it = sessions_.find(sid);
  if (it == sessions_.end()) throw ApiError(404, "unknown session '" + sid + "'");
  return *it->second;
}

std::optional<ModelBundle> Service::bundle_for(const std::string& vid) {
  std::lock_guard lock(versions_mu_);
  auto v = versions_.find(vid);
  if (v == versions_.end()) return std::nullopt;
  return bundle_from_json(artifacts_.at(v->second.artifact_hash));
}

void Service::store_version(const ModelVersion& v, const Json& artifact) {
  std::lock_guard lock(versions_mu_);
  if (versions_.count(v.version_id)) return;
  versions_[v.version_id] = v;
  artifacts_[v.artifact_hash] = artifact;
  if (root_) {
    write_file(*root_ / "artifacts" / (v.artifact_hash + ".json"), canonical(artifact));
    write_file(*root_ / "versions" / (v.version_id + ".json"), canonical(version_to_json(v)));
  }
}

const LogRecord& Service::record(Session& s, const std::string& type, Json body) {
  const auto& r = s.log.append(s.id, type, std::move(body));
  apply_record(s, r, true);
  return r;
}

void Service::apply_record(Session& s, const LogRecord& r, bool live) {
  if (r.type == "event") {
    auto e = event_from_json(r.body);
    if (e.event_id != r.seq) throw IntegrityError("event id does not match its sequence number", r.seq);
    if (!live) {
      const auto problems = validate_event(e, s.data, s.vctx);
      if (!problems.empty()) throw IntegrityError("logged event no longer validates: " + problems.front(), r.seq);
    }
    s.vctx.apply(e);
    s.events.push_back(std::move(e));
  } else if (r.type == "challenge") {
    auto c = challenge_from_json(r.body);
    if (!s.challenges.count(c.challenge_id)) s.challenge_order.push_back(c.challenge_id);
    s.challenges[c.challenge_id] = c;
  } else if (r.type == "fit") {
    if (live) return;
    const auto loop = loop_from_string(r.body.at("loop").get<std::string>());
    const auto v = run_fit(s, loop, r.body.at("created").get<std::string>());
    if (v.version_id != r.body.at("version_id").get<std::string>())
      throw IntegrityError("replayed fit produced version " + v.version_id, r.seq);
  } else if (r.type != "response") {
    throw IntegrityError("unknown record type '" + r.type + "'", r.seq);
  }
}

ModelVersion Service::run_fit(Session& s, LoopKind loop, const std::string& created) {
  if (s.events.empty()) throw ApiError(409, "no events to fit; submit labels first");
  FitContext ctx{&s.data, &s.events, s.learner, s.mode, s.config,
                 [this](const std::string& vid) { return bundle_for(vid); }};
  ModelVersion v;
  v.session_id = s.id;
  v.learner = s.learner;
  v.loop = loop;
  v.created = created;
  v.last_event = s.events.back().event_id;
  FitOutput out;
  if (loop == LoopKind::long_term) {
    v.first_event = s.events.front().event_id;
    v.parent = s.head;
    out = fit_long_term(ctx);
  } else {
    if (!s.head) throw ApiError(409, "short_term fit needs a parent version; run a long_term fit first");
    ModelVersion parent;
    {
      std::lock_guard lock(versions_mu_);
      parent = versions_.at(*s.head);
    }
    if (s.events.back().event_id <= parent.last_event)
      throw ApiError(409, "no new events since version " + parent.version_id);
    v.parent = parent.version_id;
    for (const auto& e : s.events)
      if (e.event_id > parent.last_event) {
        v.first_event = e.event_id;
        break;
      }
    out = fit_short_term(ctx, *bundle_for(parent.version_id), parent.last_event);
  }
  const Json artifact = bundle_to_json(out.bundle);
  v.version_id = make_version_id(artifact, v.first_event, v.last_event);
  v.artifact_hash = sha256_hex(canonical(artifact));
  v.coverage = coverage_report(out.bundle, s.data, out.constraints, s.config.rules);
  v.warnings = out.bundle.warnings;
  store_version(v, artifact);
  {
    std::lock_guard lock(versions_mu_);
    v = versions_.at(v.version_id);
  }
  if (s.versions.empty() || s.versions.back() != v.version_id) s.versions.push_back(v.version_id);
  s.head = v.version_id;
  return v;
}

// ---- sessions ---------------------------------------------------------------

Json Service::create_session(const Json& req) {
  if (!req.is_object()) throw ApiError(400, "request body must be a JSON object");
  std::string csv;
  if (req.contains("dataset_csv")) {
    csv = req.at("dataset_csv").get<std::string>();
  } else if (req.contains("dataset_id")) {
    const auto id = req.at("dataset_id").get<std::string>();
    if (!root_ || !fs::exists(*root_ / "datasets" / (id + ".csv"))) throw ApiError(404, "unknown dataset '" + id + "'");
    csv = read_file(*root_ / "datasets" / (id + ".csv"));
  } else {
    throw ApiError(400, "request needs dataset_csv or dataset_id");
  }
  Json body{{"dataset_csv", csv},
            {"mode", req.value("mode", std::string("qbb"))},
            {"learner", req.value("learner", std::string("tree"))},
            {"config", req.value("config", Json::object())},
            {"created", clock_()}};
  // Parse once here so bad input is a 400 before anything is persisted.
  load_csv(csv);
  mode_from_string(body["mode"].get<std::string>());
  learner_from_string(body["learner"].get<std::string>());
  body["config"] = config_to_json(config_from_json(body["config"]));

  std::string sid;
  {
    std::unique_lock lock(sessions_mu_);
    ++created_sessions_;
    sid = "s-" + sha256_hex(canonical(body) + "|" + std::to_string(created_sessions_)).substr(0, 16);
    while (sessions_.count(sid)) sid = "s-" + sha256_hex(sid).substr(0, 16);
    auto s = std::make_unique<Session>();
    s->id = sid;
    s->csv = csv;
    s->data = load_csv(csv);
    s->mode = mode_from_string(body["mode"].get<std::string>());
    s->learner = learner_from_string(body["learner"].get<std::string>());
    s->config = config_from_json(body["config"]);
    s->created = body["created"].get<std::string>();
    s->vctx = ValidationContext::from_events({}, classes_for(s->mode));
    if (root_) s->log = EventLog(*root_ / "sessions" / (sid + ".jsonl"));
    s->log.append(sid, "session", body);
    sessions_[sid] = std::move(s);
  }
  return {{"session_id", sid}};
}

ReplaySummary Service::load_log(std::string_view text) {
  const auto records = EventLog::parse(text);
  ReplaySummary summary;
  if (records.empty()) return summary;
  const auto& first = records.front();
  if (first.type != "session") throw IntegrityError("log does not start with a session record", first.seq);
  auto s = std::make_unique<Session>();
  s->id = first.session_id;
  try {
    s->csv = first.body.at("dataset_csv").get<std::string>();
    s->data = load_csv(s->csv);
    s->mode = mode_from_string(first.body.at("mode").get<std::string>());
    s->learner = learner_from_string(first.body.at("learner").get<std::string>());
    s->config = config_from_json(first.body.at("config"));
    s->created = first.body.at("created").get<std::string>();
  } catch (const std::exception& e) {
    throw IntegrityError(std::string("session record is unusable: ") + e.what(), first.seq);
  }
  s->vctx = ValidationContext::from_events({}, classes_for(s->mode));
  for (std::size_t i = 1; i < records.size(); ++i) {
    try {
      apply_record(*s, records[i], false);
    } catch (const IntegrityError&) {
      throw;
    } catch (const std::exception& e) {
      throw IntegrityError(e.what(), records[i].seq);
    }
  }
  // Adopt the verified records as the live log.
  EventLog log = root_ ? EventLog(*root_ / "sessions" / (s->id + ".jsonl")) : EventLog();
  if (log.records().empty())
    for (const auto& r : records) log.append(r.session_id, r.type, r.body);
  s->log = std::move(log);

  summary.session_id = s->id;
  summary.records = records.size();
  summary.events = s->events.size();
  summary.versions = s->versions;
  std::unique_lock lock(sessions_mu_);
  if (sessions_.count(s->id)) throw ApiError(409, "session '" + s->id + "' is already loaded");
  sessions_[s->id] = std::move(s);
  return summary;
}

ReplaySummary Service::replay(std::string_view text) {
  Service svc(std::nullopt, [] { return std::string("replay"); });
  return svc.load_log(text);
}

Json Service::session_summary(const std::string& sid) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  Json open = Json::array();
  for (const auto& id : s.challenge_order)
    if (s.challenges.at(id).state != ChallengeState::resolved) open.push_back(id);
  return {{"session_id", s.id},
          {"mode", to_string(s.mode)},
          {"learner", to_string(s.learner)},
          {"config", config_to_json(s.config)},
          {"schema", schema_to_json(s.data.schema())},
          {"rows", s.data.num_rows()},
          {"events", s.events.size()},
          {"next_sequence", s.log.next_seq()},
          {"head", s.head ? Json(*s.head) : Json(nullptr)},
          {"versions", s.versions},
          {"open_challenges", open},
          {"created", s.created}};
}

Json Service::rows(const std::string& sid, std::size_t offset, std::size_t limit) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  const auto labels = s.vctx.labels;
  Json out = Json::array();
  for (std::size_t r = offset; r < s.data.num_rows() && r < offset + limit; ++r) {
    Json row{{"row_id", s.data.row_id(r)}, {"values", values_to_json(s.data.schema(), s.data.row(r))}};
    auto it = labels.find(s.data.row_id(r));
    row["label"] = it == labels.end() ? Json(nullptr) : Json(it->second);
    out.push_back(row);
  }
  return {{"rows", out}, {"total", s.data.num_rows()}, {"offset", offset}};
}

Json Service::list_events(const std::string& sid) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  Json out = Json::array();
  for (const auto& e : s.events) out.push_back(event_to_json(e));
  return {{"events", out}};
}

// ---- events -----------------------------------------------------------------

namespace {

Json check_batch(std::vector<ExplanationEvent>& events, const Dataset& d, ValidationContext ctx, EventId first_id,
                 bool& ok) {
  Json results = Json::array();
  ok = true;
  for (std::size_t i = 0; i < events.size(); ++i) {
    events[i].event_id = first_id + i;
    const auto problems = validate_event(events[i], d, ctx);
    results.push_back({{"index", i}, {"valid", problems.empty()}, {"problems", problems}});
    if (problems.empty()) ctx.apply(events[i]);
    else ok = false;
  }
  return results;
}

}  // namespace

Json Service::validate_events(const std::string& sid, const Json& req) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  auto events = events_from_request(req);
  bool ok = true;
  auto results = check_batch(events, s.data, s.vctx, s.log.next_seq(), ok);
  return {{"valid", ok}, {"results", results}};
}

Json Service::submit_events(const std::string& sid, const Json& req) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  auto events = events_from_request(req);
  if (events.empty()) throw ApiError(400, "empty event batch");
  bool ok = true;
  auto results = check_batch(events, s.data, s.vctx, s.log.next_seq(), ok);
  if (!ok) {
    Json details = Json::array();
    for (const auto& r : results)
      if (!r["valid"].get<bool>()) details.push_back(r);
    throw ApiError(422, "event batch rejected; nothing was appended", details);
  }

  Json accepted = Json::array();
  std::vector<std::pair<LabeledExample, std::vector<LabeledExample>>> label_checks;
  for (auto& e : events) {
    if (e.timestamp.empty()) e.timestamp = clock_();
    if (const auto* l = std::get_if<AddLabel>(&e.kind)) {
      std::vector<LabeledExample> prior;
      for (const auto& [row, y] : s.vctx.labels) prior.push_back({row, y, 1.0});
      label_checks.emplace_back(l->example, std::move(prior));
    }
    const auto& r = record(s, "event", event_to_json(e));
    accepted.push_back(r.seq);
  }
  Json challenges = Json::array();
  for (const auto& [added, prior] : label_checks) {
    auto c = detect_contradiction(s.data, prior, added, s.config.tau);
    if (!c) continue;
    if (s.challenges.count(c->challenge_id) && s.challenges[c->challenge_id].state != ChallengeState::resolved) continue;
    record(s, "challenge", challenge_to_json(*c));
    challenges.push_back(challenge_to_json(*c));
  }
  return {{"accepted", accepted}, {"challenges", challenges}};
}

// ---- fitting and explaining ---------------------------------------------------

Json Service::fit(const std::string& sid, const Json& req) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  const auto loop = loop_from_string(req.is_object() ? req.value("loop", std::string("long_term")) : "long_term");
  const auto created = clock_();
  const auto v = run_fit(s, loop, created);
  s.log.append(s.id, "fit",
               {{"loop", to_string(loop)},
                {"version_id", v.version_id},
                {"parent", v.parent ? Json(*v.parent) : Json(nullptr)},
                {"event_range", {v.first_event, v.last_event}},
                {"created", created}});
  return version_to_json(v);
}

Json Service::explain(const std::string& sid, const Json& req) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  if (!req.is_object()) throw ApiError(400, "request body must be a JSON object");
  std::string vid;
  if (req.contains("version_id") && !req.at("version_id").is_null()) vid = req.at("version_id").get<std::string>();
  else if (s.head) vid = *s.head;
  else throw ApiError(404, "session has no model version yet");
  {
    std::lock_guard vlock(versions_mu_);
    auto it = versions_.find(vid);
    if (it == versions_.end() || it->second.session_id != s.id) throw ApiError(404, "unknown version '" + vid + "'");
  }
  std::vector<double> row;
  Json out;
  try {
    if (req.contains("row_id")) {
      const auto id = req.at("row_id").get<RowId>();
      auto idx = s.data.index_of(id);
      if (!idx) throw ApiError(422, "unknown row " + std::to_string(id));
      row.assign(s.data.row(*idx).begin(), s.data.row(*idx).end());
      out["row_id"] = id;
    } else if (req.contains("row")) {
      row = values_from_json(s.data.schema(), req.at("row"));
    } else {
      throw ApiError(422, "request needs row or row_id");
    }
  } catch (const ParseError& e) {
    throw ApiError(422, e.what());
  } catch (const SchemaError& e) {
    throw ApiError(422, e.what());
  } catch (const Json::exception& e) {
    throw ApiError(422, e.what());
  }
  const auto bundle = bundle_for(vid);
  const auto result = explain_row(*bundle, row);
  const auto row_json = values_to_json(s.data.schema(), row);
  for (const auto& [k, v] : result.items()) out[k] = v;
  out["version_id"] = vid;
  out["row"] = row_json;
  out["explanation_id"] = vid + ":" + sha256_hex(canonical(row_json)).substr(0, 16);
  return out;
}

Json Service::compare(const std::string& sid, const Json& req) {
  if (!req.is_object() || !req.contains("weights")) throw ApiError(400, "request needs weights");
  const auto explained = explain(sid, req);
  ImportanceProfile human;
  try {
    human.weights = req.at("weights").get<std::map<std::string, double>>();
  } catch (const Json::exception& e) {
    throw ApiError(400, std::string("weights: ") + e.what());
  }
  const auto attributions = attribution_from_json(explained.at("attributions"));
  Json out = comparison_to_json(compare_profiles(human, attributions));
  out["explanation_id"] = explained.at("explanation_id");
  out["attributions"] = explained.at("attributions");
  return out;
}

// ---- challenges ---------------------------------------------------------------

Json Service::list_challenges(const std::string& sid) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  Json out = Json::array();
  for (const auto& id : s.challenge_order) out.push_back(challenge_to_json(s.challenges.at(id)));
  return {{"challenges", out}};
}

Json Service::get_challenge(const std::string& sid, const std::string& cid) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  auto it = s.challenges.find(cid);
  if (it == s.challenges.end()) throw ApiError(404, "unknown challenge '" + cid + "'");
  const auto& c = it->second;
  const auto x = s.data.row(s.data.require_row(c.new_row));
  const auto y = s.data.row(s.data.require_row(c.counterfactual));
  const auto comps = GowerMetric(s.data).components(x, y);
  Json features = Json::array();
  for (std::size_t f = 0; f < comps.size(); ++f)
    features.push_back({{"feature", s.data.feature(f).name},
                        {"component", comps[f] ? Json(*comps[f]) : Json(nullptr)},
                        {"x", s.data.format_value(f, x[f])},
                        {"y", s.data.format_value(f, y[f])}});
  return {{"challenge", challenge_to_json(c)},
          {"x", values_to_json(s.data.schema(), x)},
          {"y", values_to_json(s.data.schema(), y)},
          {"components", features}};
}

Json Service::respond_challenge(const std::string& sid, const std::string& cid, const Json& req) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  auto it = s.challenges.find(cid);
  if (it == s.challenges.end()) throw ApiError(404, "unknown challenge '" + cid + "'");
  const Challenge c = it->second;
  if (c.state == ChallengeState::resolved) throw ApiError(409, "challenge '" + cid + "' is already resolved");
  UserResponse response;
  try {
    response = response_from_json(req.is_object() && req.contains("response") ? req.at("response") : req);
  } catch (const ParseError& e) {
    throw ApiError(400, e.what());
  }

  auto labels = label_state(s.events);
  SkepticContext ctx{&s.data, &labels, s.config.tau, s.config.round_cap};
  Resolution res;
  try {
    res = respond(c, response, ctx);
  } catch (const PreconditionError& e) {
    throw ApiError(422, e.what());
  }
  bool ok = true;
  auto results = check_batch(res.events, s.data, s.vctx, s.log.next_seq() + 1, ok);
  if (!ok) throw ApiError(422, "response produced invalid events", results);

  record(s, "response", {{"challenge_id", cid}, {"response", response_to_json(response)}});
  Json emitted = Json::array();
  for (auto& e : res.events) {
    e.timestamp = clock_();
    record(s, "event", event_to_json(e));
    emitted.push_back(event_to_json(e));
  }
  Challenge after = res.challenge;
  std::optional<Challenge> next;
  if (after.state == ChallengeState::awaiting_explanation) {
    auto now = label_state(s.events);
    SkepticContext next_ctx{&s.data, &now, s.config.tau, s.config.round_cap};
    next = next_counterfactual(after, next_ctx);
  }
  record(s, "challenge", challenge_to_json(after));
  if (next) record(s, "challenge", challenge_to_json(*next));
  return {{"resolution", {{"challenge", challenge_to_json(res.challenge)}, {"events", emitted}}},
          {"challenge", challenge_to_json(after)},
          {"next_challenge", next ? challenge_to_json(*next) : Json(nullptr)}};
}

// ---- versions -----------------------------------------------------------------

Json Service::get_version(const std::string& vid) {
  ModelVersion v;
  Json artifact;
  {
    std::lock_guard lock(versions_mu_);
    auto it = versions_.find(vid);
    if (it == versions_.end()) throw ApiError(404, "unknown version '" + vid + "'");
    v = it->second;
    artifact = artifacts_.at(v.artifact_hash);
  }
  auto& s = session(v.session_id);
  std::lock_guard lock(s.mu);
  std::vector<ExplanationEvent> upto;
  Json consumed = Json::array();
  for (const auto& e : s.events) {
    if (e.event_id > v.last_event) break;
    upto.push_back(e);
    if (e.event_id >= v.first_event) consumed.push_back(event_to_json(e));
  }
  Json out = version_to_json(v);
  out["artifact"] = artifact;
  out["events"] = consumed;
  const auto recomputed = coverage_report(bundle_from_json(artifact), s.data, compile(upto, s.data), s.config.rules);
  out["coverage_verified"] = recomputed == v.coverage;
  return out;
}

std::string Service::log_text(const std::string& sid) {
  auto& s = session(sid);
  std::lock_guard lock(s.mu);
  return s.log.text();
}

// ---- routing ------------------------------------------------------------------

namespace {

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : path) {
    if (ch == '/') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Json error_body(const std::string& message, const Json& details = nullptr) {
  Json j{{"error", message}};
  if (!details.is_null()) j["details"] = details;
  return j;
}

std::size_t query_number(const std::map<std::string, std::string>& q, const std::string& key, std::size_t fallback) {
  auto it = q.find(key);
  if (it == q.end()) return fallback;
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw ApiError(400, "query parameter '" + key + "' must be a non-negative integer");
  }
}

}  // namespace

ApiResponse Service::handle(const std::string& method, const std::string& path, const std::string& body,
                            const std::map<std::string, std::string>& query) {
  try {
    Json req = nullptr;
    if (!body.empty()) {
      try {
        req = Json::parse(body);
      } catch (const Json::exception& e) {
        throw ApiError(400, std::string("request body is not valid JSON: ") + e.what());
      }
    }
    const auto p = split_path(path);
    auto need = [&](const char* m) {
      if (method != m) throw ApiError(405, "method " + method + " not allowed on " + path);
    };
    if (p.size() == 1 && p[0] == "health") {
      need("GET");
      return {200, {{"status", "ok"}}};
    }
    if (p.size() == 1 && p[0] == "datasets") {
      need("POST");
      if (!req.is_object() || !req.contains("csv")) throw ApiError(400, "request needs csv");
      const auto csv = req.at("csv").get<std::string>();
      const auto d = load_csv(csv);
      const auto id = sha256_hex(csv).substr(0, 16);
      if (root_) write_file(*root_ / "datasets" / (id + ".csv"), csv);
      return {201, {{"dataset_id", id}, {"rows", d.num_rows()}, {"schema", schema_to_json(d.schema())}}};
    }
    if (p.size() == 2 && p[0] == "importance" && p[1] == "normalize") {
      need("POST");
      if (!req.is_object() || !req.contains("weights")) throw ApiError(400, "request needs weights");
      return {200, {{"weights", normalize_importance(req.at("weights").get<std::map<std::string, double>>())}}};
    }
    if (p.size() == 2 && p[0] == "versions") {
      need("GET");
      return {200, get_version(p[1])};
    }
    if (!p.empty() && p[0] == "sessions") {
      if (p.size() == 1) {
        need("POST");
        return {201, create_session(req)};
      }
      const auto& sid = p[1];
      if (p.size() == 2) {
        need("GET");
        return {200, session_summary(sid)};
      }
      const auto& what = p[2];
      if (p.size() == 3) {
        if (what == "rows") {
          need("GET");
          return {200, rows(sid, query_number(query, "offset", 0), query_number(query, "limit", 100))};
        }
        if (what == "events") {
          if (method == "GET") return {200, list_events(sid)};
          need("POST");
          return {200, submit_events(sid, req)};
        }
        if (what == "validate") {
          need("POST");
          return {200, validate_events(sid, req)};
        }
        if (what == "fit") {
          need("POST");
          return {201, fit(sid, req)};
        }
        if (what == "explain") {
          need("POST");
          return {200, explain(sid, req)};
        }
        if (what == "compare") {
          need("POST");
          return {200, compare(sid, req)};
        }
        if (what == "challenges") {
          need("GET");
          return {200, list_challenges(sid)};
        }
        if (what == "log") {
          need("GET");
          return {200, {{"log", log_text(sid)}}};
        }
      }
      if (what == "challenges" && p.size() == 4) {
        need("GET");
        return {200, get_challenge(sid, p[3])};
      }
      if (what == "challenges" && p.size() == 5 && p[4] == "respond") {
        need("POST");
        return {200, respond_challenge(sid, p[3], req)};
      }
    }
    throw ApiError(404, "no route for " + path);
  } catch (const ApiError& e) {
    return {e.status(), error_body(e.what(), e.details())};
  } catch (const CompileError& e) {
    Json conflicts = Json::array();
    for (const auto& c : e.conflicts())
      conflicts.push_back({{"row", c.row}, {"feature", c.feature}, {"first", c.first}, {"second", c.second}});
    return {422, error_body(e.what(), conflicts)};
  } catch (const ValidationError& e) {
    return {422, error_body(e.what(), e.problems())};
  } catch (const ParseError& e) {
    Json details = e.line() ? Json{{"line", e.line()}} : Json(nullptr);
    return {400, error_body(e.what(), details)};
  } catch (const ConfigError& e) {
    return {400, error_body(e.what())};
  } catch (const SchemaError& e) {
    return {422, error_body(e.what())};
  } catch (const PreconditionError& e) {
    return {409, error_body(e.what())};
  } catch (const NoAlternativeError& e) {
    return {409, error_body(e.what())};
  } catch (const Json::exception& e) {
    return {400, error_body(e.what())};
  } catch (const std::exception& e) {
    return {500, error_body(e.what())};
  }
}

}  // namespace talkback
