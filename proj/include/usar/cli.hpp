#pragma once

// Command-line front end. Every subcommand accepts --seed and --config
// (TOML key = value, keys named after the long flags; flags win). Result
// paths go to stdout, progress and diagnostics to stderr.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "usar/agents.hpp"
#include "usar/datapipe.hpp"
#include "usar/liveserve.hpp"
#include "usar/neural.hpp"
#include "usar/server.hpp"
#include "usar/world.hpp"

namespace usar::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kUsage = 2;

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::vector<Variant> parse_variants(const std::string& s) {
  if (s == "all") return {kAllVariants.begin(), kAllVariants.end()};
  std::vector<Variant> out;
  for (const auto& v : split_list(s)) out.push_back(parse_variant(v));
  if (out.empty()) throw Error("no variants given");
  return out;
}

// "yellow_first=1,sweeper=2"
inline std::vector<std::pair<PolicyKind, double>> parse_mix(const std::string& s) {
  std::vector<std::pair<PolicyKind, double>> out;
  for (const auto& item : split_list(s)) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw Error("policy mix entry '" + item + "' is not name=weight");
    out.push_back({parse_policy(item.substr(0, eq)), std::stod(item.substr(eq + 1))});
  }
  return out;
}

// Loads samples from an NDJSON file or labels a corpus directory on the fly.
inline std::vector<FeatureFrame> load_frames(const fs::path& source, int m) {
  if (fs::is_directory(source)) {
    const Corpus corpus = load_corpus(source);
    std::vector<FeatureFrame> out;
    for (const Trial& t : corpus.trials) {
      auto s = label_trajectory(t.log, t.map, m);
      out.insert(out.end(), s.begin(), s.end());
    }
    return out;
  }
  std::ifstream in(source);
  if (!in) throw Error("cannot open samples " + source.string());
  return read_samples(in);
}

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

struct Common {
  std::uint64_t seed = 0;
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "random seed")->capture_default_str();
  sub->add_option("--config", "TOML file of flag values; command-line flags take precedence")
      ->check(CLI::ExistingFile);
}

// Expands `<sub> ... --config file` into explicit flags for every key the
// command line does not already set. Keys are long flag names, either at
// top level or under a [<sub>] table.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
  if (args.empty()) return args;
  const std::string sub = args.front();
  std::optional<std::string> path;
  std::set<std::string> given;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (!a.starts_with("--")) continue;
    const auto eq = a.find('=');
    const std::string name = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
    given.insert(name);
    if (name == "config") {
      if (eq != std::string::npos) path = a.substr(eq + 1);
      else if (i + 1 < args.size()) path = args[i + 1];
    }
  }
  if (!path || !fs::is_regular_file(*path)) return args;
  for (const CLI::ConfigItem& item : CLI::ConfigTOML().from_file(*path)) {
    if (!item.parents.empty() && item.parents != std::vector<std::string>{sub}) continue;
    if (item.name == "++" || item.name == "--" || given.contains(item.name)) continue;
    args.push_back("--" + item.name);
    args.insert(args.end(), item.inputs.begin(), item.inputs.end());
  }
  return args;
}

inline int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"usarpred: goal and victim-type prediction for search-and-rescue trajectories", "usarpred"};
  app.require_subcommand(1);
  app.fallthrough(false);

  std::function<void()> run;

  // gen-corpus
  Common gen_c;
  std::vector<std::string> gen_maps;
  std::string gen_out, gen_mix = "yellow_first=1,opportunistic=1,sweeper=1", gen_difficulty;
  int gen_trials = 66;
  double gen_noise = 0.1;
  auto* gen = app.add_subcommand("gen-corpus", "simulate scripted rescuers into a corpus directory");
  add_common(gen, gen_c);
  gen->add_option("--map", gen_maps, "map file(s); trials cycle over them")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output corpus directory")->required();
  gen->add_option("--trials", gen_trials)->capture_default_str()->check(CLI::Range(6, 100000));
  gen->add_option("--noise", gen_noise, "probability of a random move")->capture_default_str()->check(CLI::Range(0.0, 0.4999));
  gen->add_option("--mix", gen_mix, "policy weights name=w,...")->capture_default_str();
  gen->add_option("--difficulty", gen_difficulty, "difficulty label (default: each map id)");
  gen->callback([&] {
    run = [&] {
      std::vector<std::shared_ptr<const GridMap>> maps;
      for (const auto& p : gen_maps) maps.push_back(std::make_shared<const GridMap>(load_map(p)));
      CorpusSpec spec;
      spec.mix = parse_mix(gen_mix);
      spec.noise_eps = gen_noise;
      spec.trials = gen_trials;
      spec.seed = gen_c.seed;
      spec.difficulty = gen_difficulty;
      const Corpus corpus = generate_corpus(maps, spec);
      save_corpus(gen_out, corpus);
      err << "generated " << corpus.trials.size() << " trials\n";
      out << fs::path(gen_out).string() << '\n';
    };
  });

  // label
  Common lab_c;
  std::string lab_corpus, lab_out;
  int lab_m = 6;
  auto* lab = app.add_subcommand("label", "turn a corpus into labeled feature samples (NDJSON)");
  add_common(lab, lab_c);
  lab->add_option("--corpus", lab_corpus)->required()->check(CLI::ExistingDirectory);
  lab->add_option("--out", lab_out)->required();
  lab->add_option("--m", lab_m, "moves in the window")->capture_default_str()->check(CLI::Range(1, 1000));
  lab->callback([&] {
    run = [&] {
      const auto frames = load_frames(lab_corpus, lab_m);
      ensure_parent(lab_out);
      std::ofstream f(lab_out);
      write_samples(f, frames);
      if (!f) throw Error("failed writing " + lab_out);
      err << "wrote " << frames.size() << " samples\n";
      out << lab_out << '\n';
    };
  });

  // train
  Common tr_c;
  std::string tr_data, tr_out, tr_history, tr_variant = "multires";
  int tr_m = 6;
  TrainConfig tr_cfg;
  auto* tr = app.add_subcommand("train", "train one model");
  add_common(tr, tr_c);
  tr->add_option("--data", tr_data, "corpus directory or samples file")->required()->check(CLI::ExistingPath);
  tr->add_option("--out", tr_out, "model file")->required();
  tr->add_option("--history", tr_history, "per-epoch loss CSV");
  tr->add_option("--variant", tr_variant)->capture_default_str()->check(
      CLI::IsMember({"multires", "baseline-locations", "baseline-dmd-area"}));
  tr->add_option("--m", tr_m)->capture_default_str()->check(CLI::Range(1, 1000));
  tr->add_option("--epochs", tr_cfg.epochs)->capture_default_str()->check(CLI::Range(1, 100000));
  tr->add_option("--batch-size", tr_cfg.batch_size)->capture_default_str()->check(CLI::Range(2, 100000));
  tr->add_option("--lr", tr_cfg.lr)->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--victim-weight", tr_cfg.victim_weight)->capture_default_str()->check(CLI::NonNegativeNumber);
  tr->callback([&] {
    run = [&] {
      const auto frames = load_frames(tr_data, tr_m);
      if (frames.empty()) throw Error("no samples in " + tr_data);
      tr_cfg.seed = tr_c.seed;
      const Manifest mf = manifest_for(parse_variant(tr_variant), tr_m, frames.front().num_areas());
      const TrainResult r = train(frames, mf, tr_cfg);
      ensure_parent(tr_out);
      save_model(tr_out, r.params);
      if (!r.history.empty())
        err << "final epoch L_total=" << r.history.back().total << " goal_acc=" << r.history.back().goal_acc
            << " vic_acc=" << r.history.back().vic_acc << '\n';
      out << tr_out << '\n';
      if (!tr_history.empty()) {
        ensure_parent(tr_history);
        std::ofstream h(tr_history);
        write_history_csv(h, r.history);
        out << tr_history << '\n';
      }
    };
  });

  // eval
  Common ev_c;
  std::string ev_model, ev_data, ev_out;
  auto* ev = app.add_subcommand("eval", "score a model on a corpus or samples file");
  add_common(ev, ev_c);
  ev->add_option("--model", ev_model)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "corpus directory or samples file")->required()->check(CLI::ExistingPath);
  ev->add_option("--out", ev_out, "result CSV")->required();
  ev->callback([&] {
    run = [&] {
      const ModelParams model = load_model(ev_model);
      const auto frames = load_frames(ev_data, model.manifest.m);
      const Accuracy acc = evaluate(model, frames);
      ensure_parent(ev_out);
      std::ofstream f(ev_out);
      char buf[128];
      std::snprintf(buf, sizeof buf, "%.4f,%.4f,%d,%d\n", acc.goal_acc, acc.vic_acc, acc.goal_n, acc.vic_n);
      f << "goal_acc,vic_acc,goal_n,vic_n\n" << buf;
      err << "goal_acc=" << acc.goal_acc << " vic_acc=" << acc.vic_acc << '\n';
      out << ev_out << '\n';
    };
  });

  // xval
  Common xv_c;
  std::string xv_corpus, xv_out, xv_fold_out, xv_variants = "all", xv_m = "6", xv_model_dir;
  ExperimentConfig xv_cfg;
  auto* xv = app.add_subcommand("xval", "k-fold cross-validation over variants and window lengths");
  add_common(xv, xv_c);
  xv->add_option("--corpus", xv_corpus)->required()->check(CLI::ExistingDirectory);
  xv->add_option("--out", xv_out, "report CSV")->required();
  xv->add_option("--fold-out", xv_fold_out, "per-fold CSV");
  xv->add_option("--variants", xv_variants, "'all' or a comma list")->capture_default_str();
  xv->add_option("--m", xv_m, "comma list of window lengths")->capture_default_str();
  xv->add_option("--folds", xv_cfg.folds)->capture_default_str()->check(CLI::Range(2, 1000));
  xv->add_option("--epochs", xv_cfg.train.epochs)->capture_default_str()->check(CLI::Range(1, 100000));
  xv->add_option("--batch-size", xv_cfg.train.batch_size)->capture_default_str()->check(CLI::Range(2, 100000));
  xv->add_option("--lr", xv_cfg.train.lr)->capture_default_str()->check(CLI::PositiveNumber);
  xv->add_option("--victim-weight", xv_cfg.train.victim_weight)->capture_default_str()->check(CLI::NonNegativeNumber);
  xv->add_option("--threads", xv_cfg.threads, "0 = all cores")->capture_default_str();
  xv->add_option("--model-dir", xv_model_dir, "keep every fold's model here");
  xv->callback([&] {
    run = [&] {
      xv_cfg.variants = parse_variants(xv_variants);
      xv_cfg.m_values.clear();
      for (const auto& s : split_list(xv_m)) xv_cfg.m_values.push_back(std::stoi(s));
      xv_cfg.fold_seed = xv_c.seed;
      xv_cfg.train.seed = xv_c.seed;
      if (!xv_model_dir.empty()) xv_cfg.model_dir = xv_model_dir;
      const Corpus corpus = load_corpus(xv_corpus);
      const auto reports = run_experiment(corpus, xv_cfg);
      print_report_table(err, reports);
      ensure_parent(xv_out);
      std::ofstream f(xv_out);
      write_report_csv(f, reports);
      out << xv_out << '\n';
      if (!xv_fold_out.empty()) {
        ensure_parent(xv_fold_out);
        std::ofstream ff(xv_fold_out);
        write_fold_csv(ff, reports);
        out << xv_fold_out << '\n';
      }
    };
  });

  // replay
  Common rp_c;
  std::string rp_log, rp_map, rp_out;
  auto* rp = app.add_subcommand("replay", "re-execute a log, verify it, and dump the final state");
  add_common(rp, rp_c);
  rp->add_option("--log", rp_log)->required()->check(CLI::ExistingFile);
  rp->add_option("--map", rp_map)->required()->check(CLI::ExistingFile);
  rp->add_option("--out", rp_out, "final state JSON")->required();
  rp->callback([&] {
    run = [&] {
      const auto map = std::make_shared<const GridMap>(load_map(rp_map));
      const TrajectoryLog log = load_log(rp_log);
      const Mission final = replay(log, map);
      json state = {{"v", 1},
                    {"trial_id", log.trial_id},
                    {"events", log.events.size()},
                    {"t", final.time()},
                    {"score", final.score()},
                    {"agent", cell_json(final.agent())},
                    {"waiting", final.count(VictimStatus::waiting)},
                    {"triaged", final.count(VictimStatus::triaged)},
                    {"expired", final.count(VictimStatus::expired)}};
      ensure_parent(rp_out);
      std::ofstream f(rp_out);
      f << state.dump(2) << '\n';
      out << rp_out << '\n';
    };
  });

  // predict
  Common pr_c;
  std::string pr_log, pr_map, pr_model, pr_out;
  auto* pr = app.add_subcommand("predict", "replay a log through a model, one line per scored move");
  add_common(pr, pr_c);
  pr->add_option("--log", pr_log)->required()->check(CLI::ExistingFile);
  pr->add_option("--map", pr_map)->required()->check(CLI::ExistingFile);
  pr->add_option("--model", pr_model)->required()->check(CLI::ExistingFile);
  pr->add_option("--out", pr_out, "write lines here instead of stdout");
  pr->callback([&] {
    run = [&] {
      const auto map = std::make_shared<const GridMap>(load_map(pr_map));
      const ModelParams model = load_model(pr_model);
      if (!model_fits_map(model.manifest, *map)) throw Error("model does not match the map's area count");
      const auto preds = predict_log(load_log(pr_log), map, model);
      if (pr_out.empty()) {
        for (const auto& p : preds) out << format_prediction_line(p) << '\n';
        return;
      }
      ensure_parent(pr_out);
      std::ofstream f(pr_out);
      for (const auto& p : preds) f << format_prediction_line(p) << '\n';
      out << pr_out << '\n';
    };
  });

  // serve
  Common sv_c;
  std::string sv_maps = "maps", sv_models = "models", sv_host = "127.0.0.1", sv_web, sv_logs;
  int sv_port = 8080;
  auto* sv = app.add_subcommand("serve", "run the live-play server until interrupted");
  add_common(sv, sv_c);
  sv->add_option("--maps", sv_maps, "directory of map files")->capture_default_str()->check(CLI::ExistingDirectory);
  sv->add_option("--models", sv_models, "directory of model files")->capture_default_str()->check(CLI::ExistingDirectory);
  sv->add_option("--host", sv_host)->capture_default_str();
  sv->add_option("--port", sv_port)->capture_default_str()->check(CLI::Range(0, 65535));
  sv->add_option("--web-root", sv_web, "static files served at /")->check(CLI::ExistingDirectory);
  sv->add_option("--log-dir", sv_logs, "where finished sessions are written");
  sv->callback([&] {
    run = [&] {
      SessionManager sessions(sv_logs.empty() ? std::nullopt : std::optional<fs::path>(sv_logs));
      sessions.load_directories(sv_maps, sv_models);
      Server server(sessions, sv_web.empty() ? std::nullopt : std::optional<fs::path>(sv_web));
      const auto port = server.start(sv_host, static_cast<unsigned short>(sv_port));
      out << "http://" << sv_host << ':' << port << '\n' << std::flush;
      server.wait();
    };
  });

  if (args.empty()) {
    err << app.help();
    return kUsage;
  }
  try {
    args = expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return e.get_exit_code() == 0 ? kOk : kUsage;
  }
  try {
    if (run) run();
    return kOk;
  } catch (const std::exception& e) {
    err << "usarpred: " << e.what() << '\n';
    return kFailure;
  }
}

inline int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + (argc > 0 ? 1 : 0), argv + argc);
  return dispatch(std::move(args), std::cout, std::cerr);
}

}  // namespace usar::cli
