// Command-line benchmark driver: trace replay, config comparison, setup
// lint, and a standalone simulated-backend server.

#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "stageflow/harness.hpp"
#include "stageflow/sim_server.hpp"

namespace {

using namespace stageflow;

ClockMode clock_from_name(const std::string& name) {
  if (name == "virtual") return ClockMode::Virtual;
  if (name == "wall") return ClockMode::Wall;
  throw CLI::ValidationError("--clock must be virtual or wall");
}

int cmd_run(const std::string& trace_path, const std::string& config_path,
            const std::string& clock, std::uint64_t seed, const std::string& out,
            const std::string& format) {
  auto config = load_config(config_path);
  auto templates = build_templates(config);
  auto trace = load_trace(trace_path, templates.names());

  BenchmarkOptions options;
  options.clock = clock_from_name(clock);
  options.seed = seed;
  auto report = run_benchmark(trace, config, options);
  emit_report(report, report_format_from_name(format), out);
  return report.workflows_failed == 0 ? 0 : 1;
}

int cmd_compare(const std::string& trace_path, const std::string& config_a_path,
                const std::string& config_b_path, const std::string& clock, std::uint64_t seed,
                const std::string& out) {
  auto config_a = load_config(config_a_path);
  auto config_b = load_config(config_b_path);
  auto templates = build_templates(config_a);
  auto trace = load_trace(trace_path, templates.names());

  BenchmarkOptions options;
  options.clock = clock_from_name(clock);
  options.seed = seed;
  auto comparison = compare_benchmarks(trace, config_a, config_b, options);
  if (out.empty() || out == "-") {
    comparison.write_summary(std::cout);
  } else {
    std::ofstream file(out);
    if (!file) throw std::runtime_error("cannot open output path: " + out);
    comparison.write_summary(file);
  }
  return 0;
}

int cmd_validate(const std::string& config_path, const std::string& trace_path) {
  auto config = load_config(config_path);
  auto findings = validate_setup(config);
  if (!trace_path.empty()) {
    try {
      auto templates = build_templates(config);
      auto trace = load_trace(trace_path, templates.names());
      std::cout << "trace: " << trace.size() << " records ok\n";
    } catch (const std::exception& e) {
      findings.push_back({"trace", e.what(), true});
    }
  }
  bool failed = false;
  for (const auto& f : findings) {
    std::cout << (f.is_error ? "error" : "warn") << " [" << f.subject << "] " << f.message
              << "\n";
    failed |= f.is_error;
  }
  if (!failed) std::cout << "configuration ok\n";
  return failed ? 1 : 0;
}

int cmd_sim_serve(const std::string& config_path, const std::string& ref,
                  const std::string& host, int port) {
  auto config = load_config(config_path);
  const BackendConfig* chosen = nullptr;
  for (const auto& b : config.backends) {
    if (b.descriptor.ref == ref && b.descriptor.kind == BackendKind::Simulated) chosen = &b;
  }
  if (!chosen) {
    std::cerr << "no simulated backend with ref '" << ref << "' in config\n";
    return 1;
  }
  SimServer server(chosen->descriptor, chosen->sim, stderr_logger(LogLevel::Warn));
  int bound = server.start(host, port);
  std::cout << "serving simulated backend '" << ref << "' at http://" << host << ":" << bound
            << "\n  POST /v1/chat/completions\n  POST /sim/flush\n  GET  /sim/utilization\n";
  // Park until interrupted.
  static volatile std::sig_atomic_t stop_flag = 0;
  std::signal(SIGINT, [](int) { stop_flag = 1; });
  std::signal(SIGTERM, [](int) { stop_flag = 1; });
  while (!stop_flag) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stageflow: serving harness for multi-stage LLM workflows"};
  app.require_subcommand(1);

  std::string trace_path, config_path, config_b_path, out, format = "summary";
  std::string clock = "virtual";
  std::uint64_t seed = 0;

  auto* run = app.add_subcommand("run", "replay a trace against one configuration");
  run->add_option("--trace", trace_path, "trace file (JSON lines)")->required();
  run->add_option("--config", config_path, "config file")->required();
  run->add_option("--clock", clock, "virtual|wall (default virtual)");
  run->add_option("--seed", seed, "run seed, recorded in the report");
  run->add_option("--out", out, "output path (default stdout)");
  run->add_option("--format", format, "jsonl|csv|summary (default summary)");

  auto* compare = app.add_subcommand("compare", "replay one trace under two configurations");
  compare->add_option("--trace", trace_path, "trace file (JSON lines)")->required();
  compare->add_option("--config-a", config_path, "first config")->required();
  compare->add_option("--config-b", config_b_path, "second config")->required();
  compare->add_option("--clock", clock, "virtual|wall (default virtual)");
  compare->add_option("--seed", seed, "run seed");
  compare->add_option("--out", out, "output path (default stdout)");

  auto* validate = app.add_subcommand("validate", "lint a configuration (and optional trace)");
  validate->add_option("--config", config_path, "config file")->required();
  validate->add_option("--trace", trace_path, "trace file to check");

  std::string serve_ref = "sim", serve_host = "127.0.0.1";
  int serve_port = 8089;
  auto* serve = app.add_subcommand("sim-serve", "serve a simulated backend over HTTP");
  serve->add_option("--config", config_path, "config file")->required();
  serve->add_option("--backend", serve_ref, "simulated backend ref to serve")->required();
  serve->add_option("--host", serve_host, "bind host (default 127.0.0.1)");
  serve->add_option("--port", serve_port, "bind port (default 8089)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(trace_path, config_path, clock, seed, out, format);
    if (*compare) return cmd_compare(trace_path, config_path, config_b_path, clock, seed, out);
    if (*validate) return cmd_validate(config_path, trace_path);
    if (*serve) return cmd_sim_serve(config_path, serve_ref, serve_host, serve_port);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
