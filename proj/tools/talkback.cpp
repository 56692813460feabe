#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "suite.hpp"
#include "talkback/errors.hpp"
#include "talkback/http.hpp"
#include "talkback/json_io.hpp"
#include "talkback/model_bundle.hpp"
#include "talkback/service.hpp"

using namespace talkback;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::optional<std::filesystem::path> data_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("TALKBACK_DATA_DIR"); env && *env) return std::filesystem::path(env);
  return std::nullopt;
}

// Events without ids are numbered in file order.
std::vector<ExplanationEvent> load_events(const std::string& path) {
  auto j = Json::parse(slurp(path));
  if (j.is_object() && j.contains("events")) j = j.at("events");
  if (!j.is_array()) throw ParseError("events file must hold an array or {\"events\": [...]}", 0);
  std::vector<ExplanationEvent> events;
  EventId next = 1;
  for (const auto& e : j) {
    auto ev = event_from_json(e);
    if (ev.event_id == 0) ev.event_id = next;
    next = ev.event_id + 1;
    events.push_back(std::move(ev));
  }
  return events;
}

int serve(const std::string& host, int port, const std::string& static_dir, const std::string& dir) {
  Service svc(data_dir(dir));
  HttpServer server(svc, static_dir.empty() ? std::nullopt : std::optional<std::filesystem::path>(static_dir));
  const int bound = server.bind(host, port);
  if (bound < 0) {
    std::cerr << "cannot bind " << host << ":" << port << "\n";
    return 1;
  }
  std::cout << "listening on http://" << host << ":" << bound << std::endl;
  return server.listen() ? 0 : 1;
}

int fit(const std::string& csv, const std::string& events_path, const std::string& learner, const std::string& config,
        std::optional<std::uint64_t> seed, const std::string& out) {
  const auto d = load_csv(slurp(csv));
  const auto events = load_events(events_path);
  FitContext ctx;
  ctx.data = &d;
  ctx.events = &events;
  ctx.learner = learner_from_string(learner);
  Json overrides = config.empty() ? Json::object() : Json::parse(slurp(config));
  if (seed) overrides["seed"] = *seed;
  ctx.config = config_from_json(overrides);
  const auto fitted = fit_long_term(ctx);
  const auto artifact = bundle_to_json(fitted.bundle);
  if (!out.empty()) write_file(out, artifact.dump(2) + "\n");
  const Json summary{{"learner", learner},
                     {"events", events.size()},
                     {"coverage", coverage_report(fitted.bundle, d, fitted.constraints, ctx.config.rules)},
                     {"warnings", fitted.bundle.warnings}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int explain(const std::string& model, const std::string& row) {
  const auto bundle = bundle_from_json(Json::parse(slurp(model)));
  const auto values = values_from_json(bundle.schema, Json::parse(row));
  std::cout << explain_row(bundle, values).dump(2) << "\n";
  return 0;
}

int replay(const std::string& log) {
  try {
    const auto s = Service::replay(slurp(log));
    std::cout << Json{{"session_id", s.session_id}, {"records", s.records}, {"events", s.events}, {"versions", s.versions}}
                     .dump(2)
              << "\n";
    return 0;
  } catch (const IntegrityError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
}

int bench(const std::string& suite, std::uint64_t seed) {
  if (suite != "planted") {
    std::cerr << "unknown suite '" << suite << "'; available: planted\n";
    return 1;
  }
  bool all = true;
  acceptance::run_all({seed}, [&](const acceptance::Result& r) {
    std::cout << acceptance::format(r) << std::endl;
    all = all && r.pass;
  });
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"talkback: interactive learning from labels and explanations"};
  app.require_subcommand(1);

  std::string host = "127.0.0.1", static_dir, dir;
  int port = 8080;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP API");
  serve_cmd->add_option("--host", host, "Interface to bind");
  serve_cmd->add_option("--port", port, "Port (0 picks a free one)");
  serve_cmd->add_option("--static", static_dir, "Directory of UI files to serve at /");
  serve_cmd->add_option("--data-dir", dir, "Session store; defaults to $TALKBACK_DATA_DIR, else memory only");

  std::string csv, events, learner = "tree", config, out;
  std::optional<std::uint64_t> seed;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a model from a CSV and an event file");
  fit_cmd->add_option("--csv", csv, "Dataset")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--events", events, "JSON array of events")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--learner", learner, "tree, rules or mlp");
  fit_cmd->add_option("--config", config, "JSON config overrides")->check(CLI::ExistingFile);
  fit_cmd->add_option("--seed", seed, "Overrides the config seed");
  fit_cmd->add_option("--out", out, "Where to write the model artifact");

  std::string model, row;
  auto* explain_cmd = app.add_subcommand("explain", "Predict and explain one row");
  explain_cmd->add_option("--model", model, "Model artifact from fit")->required()->check(CLI::ExistingFile);
  explain_cmd->add_option("--row", row, "Row as a JSON object of feature values")->required();

  std::string log;
  auto* replay_cmd = app.add_subcommand("replay", "Verify a session log and re-run its fits");
  replay_cmd->add_option("--log", log, "JSONL session log")->required()->check(CLI::ExistingFile);

  std::string suite = "planted";
  std::uint64_t bench_seed = 0;
  auto* bench_cmd = app.add_subcommand("bench", "Run the property suite");
  bench_cmd->add_option("--suite", suite, "Suite name");
  bench_cmd->add_option("--seed", bench_seed, "Offset applied to every fixed seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*serve_cmd) return serve(host, port, static_dir, dir);
    if (*fit_cmd) return fit(csv, events, learner, config, seed, out);
    if (*explain_cmd) return explain(model, row);
    if (*replay_cmd) return replay(log);
    if (*bench_cmd) return bench(suite, bench_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
