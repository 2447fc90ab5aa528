#pragma once

// retina command-line tool. Every subcommand prints an aligned text table
// followed by one `RESULT key=value ...` line.
//
// Exit codes: 0 success, 1 domain error (retina::Error, I/O), 2 usage error
// (bad flags, bad config file).

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "retina/codec.hpp"
#include "retina/io.hpp"
#include "retina/model.hpp"
#include "retina/registry.hpp"
#include "retina/reuse.hpp"
#include "retina/synthetic.hpp"
#include "retina/theorem.hpp"
#include "retina/toy.hpp"
#include "retina/transport.hpp"

namespace retina::cli {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Output helpers

class Table {
 public:
  explicit Table(std::vector<std::string> header) : rows_{std::move(header)} {}
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

  void print(std::ostream& out) const {
    std::vector<std::size_t> w;
    for (const auto& r : rows_)
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (w.size() <= i) w.push_back(0);
        w[i] = std::max(w[i], r[i].size());
      }
    for (std::size_t k = 0; k < rows_.size(); ++k) {
      const auto& r = rows_[k];
      for (std::size_t i = 0; i < r.size(); ++i) {
        // first column left-aligned, the rest right-aligned
        if (i == 0)
          out << std::left << std::setw(static_cast<int>(w[i])) << r[i];
        else
          out << "  " << std::right << std::setw(static_cast<int>(w[i])) << r[i];
      }
      out << std::left << '\n';
      if (k == 0) {
        std::size_t total = 0;
        for (auto x : w) total += x + 2;
        out << std::string(total > 2 ? total - 2 : 0, '-') << '\n';
      }
    }
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

inline std::string fixed(double v, int decimals) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(decimals) << v;
  return s.str();
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << "0x" << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

class ResultLine {
 public:
  template <class T>
  ResultLine& add(const std::string& key, const T& value) {
    std::ostringstream s;
    s << value;
    parts_.push_back(key + "=" + s.str());
    return *this;
  }
  void print(std::ostream& out) const {
    out << "RESULT";
    for (const auto& p : parts_) out << ' ' << p;
    out << '\n';
  }

 private:
  std::vector<std::string> parts_;
};

inline std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

// ---------------------------------------------------------------------------
// Parsing helpers

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    const auto a = cur.find_first_not_of(" \t");
    const auto b = cur.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(cur.substr(a, b - a + 1));
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw UsageError(key + ": expected a number, got '" + v + "'");
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used == v.size()) return n;
  } catch (const std::exception&) {
  }
  throw UsageError(key + ": expected an integer, got '" + v + "'");
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& p : split(v, ',')) out.push_back(parse_double(key, p));
  return out;
}

inline std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& p : split(v, ',')) out.push_back(static_cast<int>(parse_int(key, p)));
  return out;
}

/// "1,2,5" or "1..20".
inline std::vector<std::uint64_t> parse_seeds(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  if (const auto dots = v.find(".."); dots != std::string::npos) {
    const auto a = parse_int(key, v.substr(0, dots));
    const auto b = parse_int(key, v.substr(dots + 2));
    if (a < 0 || b < a) throw UsageError(key + ": bad range '" + v + "'");
    for (auto s = a; s <= b; ++s) out.push_back(static_cast<std::uint64_t>(s));
  } else {
    for (const auto& p : split(v, ',')) {
      const auto s = parse_int(key, p);
      if (s < 0) throw UsageError(key + ": seeds must be non-negative");
      out.push_back(static_cast<std::uint64_t>(s));
    }
  }
  if (out.empty()) throw UsageError(key + ": no seeds given");
  return out;
}

/// `key = value` lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(n) + ": expected key = value");
    auto key = split(line.substr(0, eq), '\n');
    auto val = split(line.substr(eq + 1), '\n');
    if (key.empty()) throw UsageError("config line " + std::to_string(n) + ": empty key");
    std::string v = val.empty() ? "" : val[0];
    if (!v.empty() && v.back() == '\r') v.pop_back();
    kv[key[0]] = v;
  }
  return kv;
}

// ---------------------------------------------------------------------------
// train-reuse configuration

struct ReuseJob {
  synthetic::SyntheticSpec spec;
  reuse::ReuseConfig config;
  std::vector<std::uint64_t> seeds{1};
  int sources = -1;  // use the first N source models; -1: all
};

inline void apply_setting(ReuseJob& job, const std::string& key, const std::string& v) {
  auto& s = job.spec;
  auto& c = job.config;
  auto& a = c.alignment;
  auto align = [&]() -> reuse::Alignment& {
    if (a.empty()) a.emplace_back();
    return a.front();
  };
  if (key == "seeds") job.seeds = parse_seeds(key, v);
  else if (key == "sources") job.sources = static_cast<int>(parse_int(key, v));
  else if (key == "gamma") c.gamma = parse_double(key, v);
  else if (key == "alpha") c.alpha = parse_doubles(key, v);
  else if (key == "scale") {
    if (v == "mean") c.scale = reuse::RegularizerScale::Mean;
    else if (v == "sum") c.scale = reuse::RegularizerScale::Sum;
    else throw UsageError("scale: expected mean or sum");
  } else if (key == "hidden") c.hidden_widths = parse_ints(key, v);
  else if (key == "activation") {
    try {
      c.activation = nn::parse_activation(v);
    } catch (const Error& e) {
      throw UsageError(std::string("activation: ") + e.what());
    }
  } else if (key == "transform_init") c.transform_init = parse_double(key, v);
  else if (key == "step_size") c.opt.step_size = parse_double(key, v);
  else if (key == "batch_size") c.opt.batch_size = static_cast<int>(parse_int(key, v));
  else if (key == "epochs") c.opt.epochs = static_cast<int>(parse_int(key, v));
  else if (key == "align.target_layer") align().target_layer = static_cast<int>(parse_int(key, v));
  else if (key == "align.source_layers") align().source_layers = parse_ints(key, v);
  else if (key == "align.order") align().order = static_cast<int>(parse_int(key, v));
  else if (key == "align.target_rows") align().target_rows = static_cast<int>(parse_int(key, v));
  else if (key == "align.source_rows") align().source_rows = parse_ints(key, v);
  else if (key == "spec.dim") s.dim = static_cast<int>(parse_int(key, v));
  else if (key == "spec.classes") s.classes = static_cast<int>(parse_int(key, v));
  else if (key == "spec.class_spread") s.class_spread = parse_double(key, v);
  else if (key == "spec.noise") s.noise = parse_double(key, v);
  else if (key == "spec.source_angles") s.source_angles = parse_doubles(key, v);
  else if (key == "spec.translation") s.translation = parse_double(key, v);
  else if (key == "spec.source_samples") s.source_samples = static_cast<std::size_t>(parse_int(key, v));
  else if (key == "spec.target_samples") s.target_samples = static_cast<std::size_t>(parse_int(key, v));
  else if (key == "spec.label_fraction") s.label_fraction = parse_double(key, v);
  else if (key == "spec.test_samples") s.test_samples = static_cast<std::size_t>(parse_int(key, v));
  else if (key == "spec.source_hidden") s.source_hidden = parse_ints(key, v);
  else if (key == "spec.source_epochs") s.source_opt.epochs = static_cast<int>(parse_int(key, v));
  else if (key == "spec.source_step_size") s.source_opt.step_size = parse_double(key, v);
  else throw UsageError("unknown config key '" + key + "'");
  s.activation = c.activation;
}

inline ReuseJob load_job(const std::optional<std::string>& path, const std::vector<std::string>& overrides) {
  ReuseJob job;
  if (path) {
    std::ifstream in(*path);
    if (!in) fail(ErrorCode::Io, "cannot open config " + *path);
    for (const auto& [k, v] : parse_key_values(in)) apply_setting(job, k, v);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + o + "'");
    apply_setting(job, o.substr(0, eq), o.substr(eq + 1));
  }
  if (job.sources == 0 || job.sources > job.spec.sources())
    throw UsageError("sources must be between 1 and the number of source domains");
  return job;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  reuse::TrainResult result;
  double accuracy = 0.0;
};

inline SeedOutcome run_reuse_seed(const ReuseJob& job, std::uint64_t seed) {
  const auto dom = synthetic::make_synthetic_domains(job.spec, seed);
  reuse::SourceModelSet sources = dom.sources;
  if (job.sources > 0) sources.models.resize(static_cast<std::size_t>(job.sources));
  reuse::ReuseConfig cfg = job.config;
  cfg.opt.seed = seed;
  SeedOutcome out{seed, {}, 0.0};
  out.result = cfg.gamma == 0.0 ? reuse::train_supervised(dom.target, cfg, &dom.target_test)
                                 : reuse::train_target(sources, dom.target, cfg, &dom.target_test);
  out.accuracy = reuse::heldout_metric(out.result.net, dom.target_test, cfg.loss);
  return out;
}

// ---------------------------------------------------------------------------
// Store

inline Registry open_store(const std::string& flag) {
  if (!flag.empty()) return Registry(flag);
  if (auto root = Registry::default_root()) return Registry(*root);
  throw UsageError("no store: pass --store or set RETINA_STORE");
}

inline ModelArtifact load_model(const std::string& path) { return deserialize_model(read_file(path)); }
inline DeltaPacket load_packet(const std::string& path) { return deserialize_packet(read_file(path)); }

inline QuantizationParams params_from(int sbits, int qbits, double f) {
  if (sbits < 0 || qbits < 0 || sbits > kMaxSBits || qbits > sbits)
    throw UsageError("need 0 <= qbits <= sbits <= " + std::to_string(kMaxSBits));
  if (!(std::fabs(f) < 0.5)) throw UsageError("need |f| < 0.5");
  return QuantizationParams(sbits, qbits, f);
}

inline std::atomic<bool>& interrupted() {
  static std::atomic<bool> flag{false};
  return flag;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"retina: model delta transmission and model reuse toolkit", "retina"};
  app.require_subcommand(1);
  std::string store_flag;
  app.add_option("--store", store_flag, "registry root (default: $RETINA_STORE)");

  // pack
  auto* pack = app.add_subcommand("pack", "build a model container (random, perturbed or toy classifier)");
  std::string pack_out, pack_id = "model", pack_perturb;
  std::uint64_t pack_version = 0, pack_seed = 1, pack_weights = 0;
  std::optional<std::uint64_t> pack_parent;
  double pack_relative = 0.1;
  int pack_toy = -1;
  bool pack_million = false, pack_register = false;
  pack->add_option("-o,--out", pack_out, "output .drm file");
  pack->add_option("--id", pack_id, "model id");
  pack->add_option("--version", pack_version, "version number");
  pack->add_option("--parent", pack_parent, "parent version");
  pack->add_option("--seed", pack_seed, "random seed");
  auto* o_weights = pack->add_option("--weights", pack_weights, "random model: one rank-1 tensor with N weights");
  auto* o_million = pack->add_flag("--million", pack_million, "random model: two-layer 10^6-weight layout");
  auto* o_perturb = pack->add_option("--perturb", pack_perturb, "child of this .drm, each weight moved by up to --relative * |w|");
  pack->add_option("--relative", pack_relative, "relative perturbation for --perturb");
  auto* o_toy = pack->add_option("--toy", pack_toy, "toy classifier lineage member (0 or 1)")->check(CLI::Range(0, 1));
  pack->add_flag("--register", pack_register, "also register the artifact in the store");
  o_weights->excludes(o_million)->excludes(o_perturb)->excludes(o_toy);
  o_million->excludes(o_perturb)->excludes(o_toy);
  o_perturb->excludes(o_toy);

  // inspect
  auto* inspect = app.add_subcommand("inspect", "describe a .drm/.drp file or a model in the store");
  std::string inspect_file, inspect_model;
  inspect->add_option("file", inspect_file, "container or packet file");
  inspect->add_option("--model", inspect_model, "model id in the store");

  // diff
  auto* diff = app.add_subcommand("diff", "encode the difference between two versions");
  std::string diff_base, diff_target, diff_out;
  int diff_sbits = 12, diff_qbits = 0;
  double diff_f = 0.3;
  diff->add_option("--base", diff_base, "prediction model (.drm)")->required();
  diff->add_option("--target", diff_target, "new model (.drm)")->required();
  diff->add_option("--sbits", diff_sbits, "s_bits");
  diff->add_option("--qbits", diff_qbits, "q_bits")->required();
  diff->add_option("--f", diff_f, "rounding offset f");
  diff->add_option("-o,--out", diff_out, "output .drp file")->required();

  // apply
  auto* apply = app.add_subcommand("apply", "rebuild a model from a base and a packet");
  std::string apply_base, apply_packet_file, apply_out;
  apply->add_option("--base", apply_base, "prediction model (.drm); omit for whole-model packets");
  apply->add_option("--packet", apply_packet_file, "packet (.drp)")->required();
  apply->add_option("-o,--out", apply_out, "output .drm file")->required();

  // stats
  auto* stats = app.add_subcommand("stats", "per-layer size statistics of a packet");
  std::string stats_packet;
  stats->add_option("--packet", stats_packet, "packet (.drp)")->required();

  // bench-quant
  auto* bench = app.add_subcommand("bench-quant", "DoM versus whole-model packet sizes over compression bits");
  std::string bench_base, bench_target, bench_sweep = "7,6,5,4,3";
  int bench_sbits = 12;
  double bench_f = 0.3;
  bench->add_option("--base", bench_base, "prediction model (.drm)")->required();
  bench->add_option("--target", bench_target, "new model (.drm)")->required();
  bench->add_option("--sweep", bench_sweep, "compression bits, comma separated");
  bench->add_option("--sbits", bench_sbits, "s_bits");
  bench->add_option("--f", bench_f, "rounding offset f");

  // serve
  auto* serve = app.add_subcommand("serve", "receive model updates into the store");
  std::string serve_listen;
  std::uint64_t serve_max = 0;
  std::string serve_port_file;
  serve->add_option("--listen", serve_listen, "host:port (port 0 picks a free port)")->required();
  serve->add_option("--max-sessions", serve_max, "exit after this many sessions (0: run until interrupted)");
  serve->add_option("--port-file", serve_port_file, "write the bound port to this file");

  // push
  auto* push = app.add_subcommand("push", "send a stored version to a receiver");
  std::string push_remote, push_model_id;
  std::uint64_t push_version = 0;
  int push_sbits = 12, push_qbits = 0, push_timeout_ms = 30000;
  double push_f = 0.3;
  push->add_option("--remote", push_remote, "host:port")->required();
  push->add_option("--model", push_model_id, "model id")->required();
  push->add_option("--version", push_version, "version to send")->required();
  push->add_option("--sbits", push_sbits, "s_bits");
  push->add_option("--qbits", push_qbits, "q_bits")->required();
  push->add_option("--f", push_f, "rounding offset f");
  push->add_option("--timeout-ms", push_timeout_ms, "socket timeout");

  // train-reuse
  auto* train = app.add_subcommand("train-reuse", "train target models on the synthetic benchmark");
  std::optional<std::string> train_config;
  std::vector<std::string> train_set;
  std::string train_trace_dir, train_export;
  train->add_option("--config", train_config, "key = value config file");
  train->add_option("--set", train_set, "override a config key (key=value), repeatable");
  train->add_option("--trace-dir", train_trace_dir, "write trace_seed<N>.csv per seed");
  train->add_option("--export", train_export, "write the first seed's target model (.drm)");

  // verify-bound
  auto* verify = app.add_subcommand("verify-bound", "check the reuse risk bound on random linear instances");
  theorem::TheoremInstance inst;
  int verify_instances = 1;
  verify->add_option("--instances", verify_instances, "number of instances (seeds seed, seed+1, ...)")->check(CLI::PositiveNumber);
  verify->add_option("--seed", inst.seed, "first seed");
  verify->add_option("--sources", inst.sources, "M");
  verify->add_option("--gamma", inst.gamma, "gamma");
  verify->add_option("--dim", inst.dim, "feature dimension");
  verify->add_option("--radius", inst.radius, "feature ball radius r");
  verify->add_option("--noise", inst.noise, "label noise std");
  verify->add_option("--relatedness", inst.relatedness, "source task perturbation");
  verify->add_option("--labeled", inst.n_labeled, "N_l");
  verify->add_option("--unlabeled", inst.n_unlabeled, "N_u");
  std::string verify_activation = "identity";
  verify->add_option("--activation", verify_activation, "must be identity for the bound to apply");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*pack) {
      if (pack_out.empty() && !pack_register) throw UsageError("pack: give -o and/or --register");
      ModelArtifact m = [&]() -> ModelArtifact {
        if (pack_weights > 0)
          return toy::random_model(pack_id, pack_version, pack_parent, {{"weight", {pack_weights}}}, pack_seed);
        if (pack_million) return toy::random_model(pack_id, pack_version, pack_parent, toy::million_weight_layout(), pack_seed);
        if (!pack_perturb.empty()) {
          const ModelArtifact base = load_model(pack_perturb);
          if (pack_version <= base.version()) throw UsageError("pack: --version must exceed the base version");
          return toy::perturbed(base, pack_version, pack_relative, pack_seed);
        }
        if (pack_toy >= 0) {
          toy::ToyLineageSpec spec;
          spec.model_id = pack_id;
          auto lineage = toy::make_toy_lineage(spec, pack_seed);
          return pack_toy == 0 ? lineage.v0 : lineage.v1;
        }
        throw UsageError("pack: choose one of --weights, --million, --perturb, --toy");
      }();
      Table t({"layer", "shape", "weights"});
      for (const auto& l : m.layers()) t.add({l.name(), shape_string(l.shape()), std::to_string(l.data().size())});
      t.print(out);
      const Bytes bytes = serialize_model(m);
      if (!pack_out.empty()) write_file_atomic(pack_out, bytes);
      if (pack_register) open_store(store_flag).register_model(m);
      ResultLine()
          .add("model", m.id().str())
          .add("layers", m.layers().size())
          .add("weights", m.weight_count())
          .add("bytes", bytes.size())
          .add("digest", hex64(m.digest()))
          .add("checksum", hex64(weight_checksum(m)))
          .print(out);
      return 0;
    }

    if (*inspect) {
      if (inspect_file.empty() == inspect_model.empty()) throw UsageError("inspect: give a file or --model");
      if (!inspect_model.empty()) {
        const Registry store = open_store(store_flag);
        const VersionSet vs = store.versions(inspect_model);
        Table t({"version", "parent", "weights", "checksum"});
        std::vector<std::string> list;
        for (auto v : vs.versions) {
          const ModelArtifact m = store.get_model({inspect_model, v});
          t.add({std::to_string(v), m.parent_version() ? std::to_string(*m.parent_version()) : "-",
                 std::to_string(m.weight_count()), hex64(weight_checksum(m))});
          list.push_back(std::to_string(v));
        }
        t.print(out);
        ResultLine()
            .add("kind", "store")
            .add("model", inspect_model)
            .add("versions", list.empty() ? "none" : join(list))
            .print(out);
        return 0;
      }
      const Bytes bytes = read_file(inspect_file);
      if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, kPacketMagic)) {
        const DeltaPacket p = deserialize_packet(bytes);
        Table t({"layer", "shape", "payload_bytes"});
        for (const auto& l : p.layers) t.add({l.name, shape_string(l.shape), std::to_string(l.payload.size())});
        t.print(out);
        ResultLine()
            .add("kind", "packet")
            .add("base", p.base.str())
            .add("target", p.target.str())
            .add("sbits", p.params.s_bits())
            .add("qbits", p.params.q_bits())
            .add("f", fmt(p.params.f()))
            .add("weights", p.weight_count())
            .add("payload_bytes", p.payload_bytes())
            .add("packet_bytes", bytes.size())
            .add("checksum", hex64(p.checksum))
            .print(out);
        return 0;
      }
      const ModelArtifact m = deserialize_model(bytes);
      Table t({"layer", "shape", "weights", "min", "max"});
      for (const auto& l : m.layers()) {
        const auto [lo, hi] = std::minmax_element(l.data().begin(), l.data().end());
        t.add({l.name(), shape_string(l.shape()), std::to_string(l.data().size()), fmt(*lo), fmt(*hi)});
      }
      t.print(out);
      ResultLine()
          .add("kind", "model")
          .add("model", m.id().str())
          .add("parent", m.parent_version() ? std::to_string(*m.parent_version()) : "none")
          .add("layers", m.layers().size())
          .add("weights", m.weight_count())
          .add("bytes", bytes.size())
          .add("digest", hex64(m.digest()))
          .add("checksum", hex64(weight_checksum(m)))
          .print(out);
      return 0;
    }

    if (*diff) {
      const auto p = params_from(diff_sbits, diff_qbits, diff_f);
      const ModelArtifact base = load_model(diff_base);
      const ModelArtifact target = load_model(diff_target);
      const DeltaPacket pkt = diff_packet(target, base, p);
      const Bytes bytes = serialize_packet(pkt);
      write_file_atomic(diff_out, bytes);
      const SizeReport r = size_report(pkt, target.weight_count());
      Table t({"quantity", "value"});
      t.add({"weights", std::to_string(target.weight_count())});
      t.add({"baseline_bytes", std::to_string(r.baseline_bytes)});
      t.add({"packet_bytes", std::to_string(r.packet_bytes)});
      t.add({"payload_bytes", std::to_string(r.payload_bytes)});
      t.add({"compression_ratio", fixed(r.compression_ratio, 3)});
      t.add({"entropy_bits_per_weight", fixed(r.entropy_bits_per_weight, 4)});
      t.print(out);
      ResultLine()
          .add("base", pkt.base.str())
          .add("target", pkt.target.str())
          .add("compression_bits", p.compression_bits())
          .add("packet_bytes", r.packet_bytes)
          .add("payload_bytes", r.payload_bytes)
          .add("ratio", fixed(r.compression_ratio, 3))
          .add("entropy", fixed(r.entropy_bits_per_weight, 4))
          .add("checksum", hex64(pkt.checksum))
          .print(out);
      return 0;
    }

    if (*apply) {
      const DeltaPacket pkt = load_packet(apply_packet_file);
      std::optional<ModelArtifact> base;
      if (!apply_base.empty()) base = load_model(apply_base);
      if (!pkt.is_whole_model() && !base) throw UsageError("apply: --base is required for delta packets");
      const ModelArtifact rebuilt = apply_packet(pkt, base ? &*base : nullptr);
      write_file_atomic(apply_out, serialize_model(rebuilt));
      Table t({"quantity", "value"});
      t.add({"target", rebuilt.id().str()});
      t.add({"weights", std::to_string(rebuilt.weight_count())});
      t.add({"step_bound", fmt(pkt.params.error_bound())});
      t.print(out);
      ResultLine()
          .add("target", rebuilt.id().str())
          .add("checksum", hex64(weight_checksum(rebuilt)))
          .add("verified", "true")
          .add("step_bound", fmt(pkt.params.error_bound()))
          .print(out);
      return 0;
    }

    if (*stats) {
      const DeltaPacket pkt = load_packet(stats_packet);
      const QuantizedDelta qd = decode_packet(pkt);
      Table t({"layer", "weights", "payload_bytes", "bytes_per_weight", "zero_fraction"});
      for (std::size_t i = 0; i < pkt.layers.size(); ++i) {
        const auto& vals = qd.layers[i].values;
        const auto zeros = std::count(vals.begin(), vals.end(), std::int64_t{0});
        const double n = static_cast<double>(vals.size());
        t.add({pkt.layers[i].name, std::to_string(vals.size()), std::to_string(pkt.layers[i].payload.size()),
               fixed(static_cast<double>(pkt.layers[i].payload.size()) / n, 4), fixed(static_cast<double>(zeros) / n, 4)});
      }
      t.print(out);
      const SizeReport r = size_report(pkt, pkt.weight_count());
      ResultLine()
          .add("target", pkt.target.str())
          .add("whole_model", pkt.is_whole_model() ? "true" : "false")
          .add("packet_bytes", r.packet_bytes)
          .add("payload_bytes", r.payload_bytes)
          .add("ratio", fixed(r.compression_ratio, 3))
          .add("entropy", fixed(r.entropy_bits_per_weight, 4))
          .print(out);
      return 0;
    }

    if (*bench) {
      std::vector<int> sweep;
      for (const auto& s : split(bench_sweep, ',')) {
        const auto cb = parse_int("--sweep", s);
        if (cb < 0 || cb > bench_sbits) throw UsageError("--sweep: compression bits must be in [0, sbits]");
        sweep.push_back(static_cast<int>(cb));
      }
      if (sweep.empty()) throw UsageError("--sweep: empty list");
      const ModelArtifact base = load_model(bench_base);
      const ModelArtifact target = load_model(bench_target);
      Table t({"compression_bits", "qbits", "dom_bytes", "whole_bytes", "dom_ratio", "whole_ratio", "dom_entropy",
               "whole_entropy"});
      std::vector<std::string> dom_r, whole_r;
      bool ordered = true, monotone = true;
      double prev = -1.0;
      int prev_cb = -1;
      for (int cb : sweep) {
        const auto p = params_from(bench_sbits, bench_sbits - cb, bench_f);
        const DeltaPacket dp = diff_packet(target, base, p);
        const DeltaPacket wp = whole_model_packet(target, p);
        const SizeReport dr = size_report(dp, target.weight_count());
        const SizeReport wr = size_report(wp, target.weight_count());
        t.add({std::to_string(cb), std::to_string(p.q_bits()), std::to_string(dr.packet_bytes), std::to_string(wr.packet_bytes),
               fixed(dr.compression_ratio, 3), fixed(wr.compression_ratio, 3), fixed(dr.entropy_bits_per_weight, 4),
               fixed(wr.entropy_bits_per_weight, 4)});
        dom_r.push_back(fixed(dr.compression_ratio, 3));
        whole_r.push_back(fixed(wr.compression_ratio, 3));
        ordered = ordered && dr.packet_bytes < wr.packet_bytes;
        // ratio must not drop as compression bits decrease
        if (prev_cb >= 0 && cb < prev_cb && dr.compression_ratio < prev) monotone = false;
        if (prev_cb >= 0 && cb > prev_cb && dr.compression_ratio > prev) monotone = false;
        prev = dr.compression_ratio;
        prev_cb = cb;
      }
      t.print(out);
      ResultLine()
          .add("rows", sweep.size())
          .add("dom_ratio", join(dom_r))
          .add("whole_ratio", join(whole_r))
          .add("dom_smaller", ordered ? "true" : "false")
          .add("monotone", monotone ? "true" : "false")
          .print(out);
      return 0;
    }

    if (*serve) {
      Registry store = open_store(store_flag);
      Server server(store, Endpoint::parse(serve_listen), [&](const std::string& line) { err << line << '\n'; });
      if (!serve_port_file.empty()) {
        const std::string port = std::to_string(server.port()) + "\n";
        write_file_atomic(serve_port_file, Bytes(port.begin(), port.end()));
      }
      err << "listening on port " << server.port() << '\n';
      interrupted() = false;
      auto old_int = std::signal(SIGINT, [](int) { interrupted() = true; });
      auto old_term = std::signal(SIGTERM, [](int) { interrupted() = true; });
      server.start();
      while (!interrupted() && (serve_max == 0 || server.sessions_ok() + server.sessions_failed() < serve_max))
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      server.stop();
      std::signal(SIGINT, old_int);
      std::signal(SIGTERM, old_term);
      Table t({"sessions", "count"});
      t.add({"ok", std::to_string(server.sessions_ok())});
      t.add({"failed", std::to_string(server.sessions_failed())});
      t.print(out);
      ResultLine().add("ok", server.sessions_ok()).add("failed", server.sessions_failed()).print(out);
      return 0;
    }

    if (*push) {
      const auto p = params_from(push_sbits, push_qbits, push_f);
      const Registry store = open_store(store_flag);
      const auto started = std::chrono::steady_clock::now();
      const TransferSummary s =
          push_model(store, Endpoint::parse(push_remote), {push_model_id, push_version}, p, std::chrono::milliseconds(push_timeout_ms));
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      Table t({"quantity", "value"});
      t.add({"target", s.target.str()});
      t.add({"prediction", s.up_to_date ? "-" : detail::version_token(s.prediction_version)});
      t.add({"bytes_sent", std::to_string(s.bytes_sent)});
      t.add({"bytes_received", std::to_string(s.bytes_received)});
      t.add({"seconds", fixed(secs, 3)});
      t.print(out);
      // wall time is printed above but kept out of RESULT so it stays reproducible
      ResultLine()
          .add("target", s.target.str())
          .add("up_to_date", s.up_to_date ? "true" : "false")
          .add("prediction", s.up_to_date ? "-" : detail::version_token(s.prediction_version))
          .add("fallback", s.fallback() ? "true" : "false")
          .add("checksum", hex64(s.checksum))
          .add("packet_bytes", s.size.packet_bytes)
          .add("ratio", fixed(s.size.compression_ratio, 3))
          .print(out);
      return 0;
    }

    if (*train) {
      const ReuseJob job = load_job(train_config, train_set);
      if (!train_trace_dir.empty()) std::filesystem::create_directories(train_trace_dir);
      Table t({"seed", "final_L", "final_R", "heldout"});
      double sum = 0.0, lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < job.seeds.size(); ++i) {
        const SeedOutcome o = run_reuse_seed(job, job.seeds[i]);
        const auto& last = o.result.trace.empty() ? reuse::TraceRow{} : o.result.trace.back();
        t.add({std::to_string(o.seed), fixed(last.supervised, 6), fixed(last.regularizer, 6), fixed(o.accuracy, 4)});
        sum += o.accuracy;
        lo = std::min(lo, o.accuracy);
        hi = std::max(hi, o.accuracy);
        if (!train_trace_dir.empty()) {
          const std::string csv = reuse::trace_csv(o.result.trace);
          write_file_atomic(std::filesystem::path(train_trace_dir) / ("trace_seed" + std::to_string(o.seed) + ".csv"),
                            Bytes(csv.begin(), csv.end()));
        }
        if (i == 0 && !train_export.empty())
          write_file_atomic(train_export, serialize_model(o.result.net.to_artifact("target", 0)));
      }
      t.print(out);
      const int m = job.sources > 0 ? job.sources : job.spec.sources();
      ResultLine()
          .add("seeds", job.seeds.size())
          .add("gamma", fmt(job.config.gamma))
          .add("sources", job.config.gamma == 0.0 ? 0 : m)
          .add("mean_acc", fixed(sum / static_cast<double>(job.seeds.size()), 6))
          .add("min_acc", fixed(lo, 6))
          .add("max_acc", fixed(hi, 6))
          .print(out);
      return 0;
    }

    if (*verify) {
      inst.activation = nn::parse_activation(verify_activation);
      Table t({"seed", "lhs", "rhs", "holds"});
      int held = 0;
      double worst = 0.0;
      for (int i = 0; i < verify_instances; ++i) {
        theorem::TheoremInstance cur = inst;
        cur.seed = inst.seed + static_cast<std::uint64_t>(i);
        const auto r = theorem::theorem_bound_check(cur);
        held += r.holds ? 1 : 0;
        worst = std::max(worst, r.rhs > 0 ? r.lhs / r.rhs : (r.lhs > 0 ? 1e300 : 0.0));
        t.add({std::to_string(cur.seed), fmt(r.lhs), fmt(r.rhs), r.holds ? "yes" : "no"});
      }
      t.print(out);
      ResultLine()
          .add("instances", verify_instances)
          .add("held", held)
          .add("holds", held == verify_instances ? "true" : "false")
          .add("max_ratio", fixed(worst, 4))
          .print(out);
      return 0;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace retina::cli
