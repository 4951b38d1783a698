// seqscript: synthetic script-identification workbench.
//
// Subcommands: gen-data, train, eval, infer, inspect-attention, info.
// Machine-readable JSON goes to stdout; human summaries go to stderr.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "seqscript/model.hpp"
#include "seqscript/pgm.hpp"
#include "seqscript/synth.hpp"
#include "seqscript/train.hpp"

using namespace seqscript;
namespace fs = std::filesystem;

namespace {

// Exit codes, also listed in --help:
//   0 success, 2 usage, 3 i/o, 4 file format, 5 checkpoint, 6 configuration,
//   7 shape/numeric/internal failure.
constexpr int kExitIo = 3;
constexpr int kExitFormat = 4;
constexpr int kExitCheckpoint = 5;
constexpr int kExitConfig = 6;
constexpr int kExitInternal = 7;

constexpr const char* kExitCodeHelp =
    "Exit codes: 0 success, 2 usage error, 3 i/o error, 4 file format error,\n"
    "5 checkpoint error, 6 configuration error, 7 internal/numeric error.";

struct DatasetPaths {
  DatasetMeta meta;
  LoadedDataset train;
  LoadedDataset test;
};

DatasetPaths open_dataset(const std::string& dir, bool want_train, bool want_test) {
  DatasetPaths d;
  d.meta = load_metadata(dir);
  if (want_train)
    d.train = load_dataset(load_manifest((fs::path(dir) / "train.tsv").string(), d.meta.num_scripts),
                           d.meta.num_scripts);
  if (want_test)
    d.test = load_dataset(load_manifest((fs::path(dir) / "test.tsv").string(), d.meta.num_scripts),
                          d.meta.num_scripts);
  return d;
}

std::string frames_string(const std::vector<int>& path) {
  std::string s;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i) s.push_back(' ');
    if (path[i] == ClassAlphabet::blank)
      s.push_back('-');
    else
      s += std::to_string(path[i]);
  }
  return s;
}

int cmd_gen_data(const std::string& out, int scripts, bool shared_pair, int n_train, int n_test,
                 std::uint64_t seed, bool force) {
  GenResult r = gen_dataset(out, scripts, shared_pair, n_train, n_test, seed, force);
  nlohmann::json j;
  j["out"] = out;
  j["files_written"] = r.files_written;
  j["num_scripts"] = r.meta.num_scripts;
  j["script_names"] = r.meta.script_names;
  j["train_count"] = r.meta.train_count;
  j["test_count"] = r.meta.test_count;
  j["seed"] = r.meta.seed;
  if (r.meta.shared_c) {
    j["shared_pair"] = {r.meta.shared_c, r.meta.shared_d};
    j["shared_only_frac_c"] = r.meta.shared_only_frac_c;
    j["shared_only_frac_d"] = r.meta.shared_only_frac_d;
  } else {
    j["shared_pair"] = nullptr;
  }
  std::cout << j.dump() << '\n';
  std::cerr << "wrote " << r.files_written << " crops (" << n_train << " train / " << n_test
            << " test, " << scripts << " scripts) under " << out << '\n';
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out, const std::string& loss,
              bool no_attention, bool no_residual, const std::string& attention_pos,
              const std::string& attention_gate, int epochs, int batch, std::uint64_t seed,
              bool no_augment, double lr, int eval_every) {
  DatasetPaths d = open_dataset(data_dir, true, true);

  ArchConfig config;
  config.num_scripts = d.meta.num_scripts;
  config.script_names = d.meta.script_names;
  config.use_attention = !no_attention;
  config.use_residual = !no_residual;
  config.loss = loss == "ce" ? LossKind::cross_entropy : LossKind::ctc;
  if (!attention_pos.empty()) {
    config.attention_sites.clear();
    std::istringstream is(attention_pos);
    std::string tok;
    while (std::getline(is, tok, ',')) config.attention_sites.push_back(site_from_name(tok));
  }
  if (attention_gate == "sigmoid_only") config.attention_gate = AttentionGate::sigmoid_only;
  validate_config(config);

  Model model = build(config, seed);
  TrainConfig tc;
  tc.batch_size = batch;
  tc.epochs = epochs;
  tc.loss = config.loss;
  tc.augment = !no_augment;
  tc.seed = seed;
  tc.lr = lr;
  tc.eval_every = eval_every;
  tc.log_path = out + ".runlog.jsonl";
  tc.progress = true;

  TrainResult r = train(model, d.train, d.test, tc);
  save_model(model, out);

  nlohmann::json j;
  j["checkpoint"] = out;
  j["run_log"] = tc.log_path;
  j["steps"] = r.steps;
  j["epochs"] = epochs;
  if (!r.log.empty() && r.log.back().evaluated) j["final_word_acc"] = r.log.back().eval.word_acc;
  j["param_count"] = param_count(model);
  std::cout << j.dump() << '\n';
  std::cerr << "saved " << out << " after " << r.steps << " optimizer steps\n";
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir) {
  Model model = load_model(model_path);
  DatasetPaths d = open_dataset(data_dir, false, true);
  EvalReport r = evaluate(model, d.test);
  std::cout << eval_report_json(r, effective_script_names(model.config)) << '\n';
  std::cerr << "word accuracy " << r.word_acc << " over " << r.total << " crops\n";
  return 0;
}

int cmd_infer(const std::string& model_path, const std::string& image_path) {
  Model model = load_model(model_path);
  Tensor image = read_pgm_file(image_path);
  Tensor probs = model_forward(model, image, Mode::eval);
  VoteResult vote = majority_vote(probs);
  GreedyDecode dec = greedy_decode(probs);
  const std::vector<std::string> names = effective_script_names(model.config);

  nlohmann::json j;
  if (vote.script == 0)
    j["script"] = nullptr;
  else
    j["script"] = names[static_cast<std::size_t>(vote.script - 1)];
  j["script_index"] = vote.script;
  nlohmann::json counts;
  for (std::size_t s = 0; s < names.size(); ++s) counts[names[s]] = vote.counts[s];
  j["counts"] = counts;
  j["frames"] = frames_string(dec.path);
  std::cout << j.dump() << '\n';
  std::cerr << "predicted: " << (vote.script == 0 ? std::string("none") : names[static_cast<std::size_t>(vote.script - 1)])
            << '\n';
  return 0;
}

int cmd_inspect_attention(const std::string& model_path, const std::string& image_path,
                          const std::string& out_dir) {
  Model model = load_model(model_path);
  if (!model.config.use_attention || model.attention.empty())
    throw ConfigError("model has no attention blocks to inspect");
  Tensor image = read_pgm_file(image_path);
  ForwardProbe probe;
  model_forward(model, image, Mode::eval, &probe);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir);

  auto normalize = [](const Tensor& t) {
    double lo = t.data[0], hi = t.data[0];
    for (double v : t.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    Tensor out = t;
    const double span = hi - lo;
    for (double& v : out.data) v = span > 0 ? (v - lo) / span : 0.0;
    return out;
  };

  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < probe.maps.size(); ++i) {
    const std::string base = "sa_" + site_name(probe.sites[i]);
    // gate values live in [0.5, 1); stretch that band across the full range
    Tensor scaled = probe.maps[i];
    for (double& v : scaled.data) v = std::min(1.0, std::max(0.0, (v - 0.5) * 2.0));
    const std::string map_path = (fs::path(out_dir) / (base + "_map.pgm")).string();
    write_pgm_file(scaled, map_path);
    const std::string pre_path = (fs::path(out_dir) / (base + "_pre.pgm")).string();
    write_pgm_file(normalize(probe.pre_mean[i]), pre_path);
    const std::string post_path = (fs::path(out_dir) / (base + "_post.pgm")).string();
    write_pgm_file(normalize(probe.post_mean[i]), post_path);
    files.push_back({{"site", site_name(probe.sites[i])},
                     {"map", map_path},
                     {"pre_mean", pre_path},
                     {"post_mean", post_path}});
  }
  nlohmann::json j;
  j["attention_blocks"] = files;
  std::cout << j.dump() << '\n';
  std::cerr << "wrote " << probe.maps.size() << " attention map(s) to " << out_dir << '\n';
  return 0;
}

int cmd_info(const std::string& model_path) {
  Model model = load_model(model_path);
  const ArchConfig& c = model.config;
  nlohmann::json j;
  j["input_height"] = c.input_height;
  j["conv_filters"] = c.conv_filters;
  nlohmann::json sites = nlohmann::json::array();
  for (AttentionSite s : c.attention_sites) sites.push_back(site_name(s));
  j["attention_sites"] = sites;
  j["bn_after_convs"] = c.bn_after_convs;
  j["lstm_hidden"] = c.lstm_hidden;
  j["lstm_proj"] = c.lstm_proj;
  j["num_scripts"] = c.num_scripts;
  j["script_names"] = effective_script_names(c);
  j["loss"] = c.loss == LossKind::ctc ? "ctc" : "ce";
  j["use_attention"] = c.use_attention;
  j["use_residual"] = c.use_residual;
  j["step"] = model.step;
  j["seed"] = model.seed;
  nlohmann::json layers = nlohmann::json::array();
  for (const ParamCountRow& row : param_breakdown(model))
    layers.push_back({{"name", row.name}, {"count", row.count}});
  j["param_breakdown"] = layers;
  j["param_total"] = param_count(model);
  std::cout << j.dump() << '\n';

  std::fprintf(stderr, "%-18s %12s\n", "layer", "params");
  for (const ParamCountRow& row : param_breakdown(model))
    std::fprintf(stderr, "%-18s %12lld\n", row.name.c_str(), row.count);
  std::fprintf(stderr, "%-18s %12lld\n", "total", param_count(model));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seqscript: spatial-attention CNN-BiLSTM-CTC script identification at desk scale"};
  app.footer(kExitCodeHelp);
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic script dataset");
  std::string gen_out;
  int gen_scripts = 4, gen_train = 2000, gen_test = 400;
  std::uint64_t gen_seed = 7;
  bool gen_shared = false, gen_force = false;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scripts", gen_scripts, "Number of scripts (2..6)");
  gen->add_flag("--shared-pair", gen_shared, "Give the last two scripts a shared glyph subset");
  gen->add_option("--train", gen_train, "Training crops");
  gen->add_option("--test", gen_test, "Test crops");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_flag("--force", gen_force, "Overwrite a non-empty output directory");

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
  std::string tr_data, tr_out, tr_loss = "ctc", tr_pos, tr_gate = "relu_sigmoid";
  int tr_epochs = 10, tr_batch = 32, tr_eval_every = 1;
  std::uint64_t tr_seed = 1;
  bool tr_no_attention = false, tr_no_residual = false, tr_no_augment = false;
  double tr_lr = 0.001;
  tr->add_option("--data", tr_data, "Dataset directory from gen-data")->required();
  tr->add_option("--out", tr_out, "Checkpoint path to write")->required();
  tr->add_option("--loss", tr_loss, "Loss: ctc | ce")->check(CLI::IsMember({"ctc", "ce"}));
  tr->add_flag("--no-attention", tr_no_attention, "Drop the spatial attention blocks");
  tr->add_flag("--no-residual", tr_no_residual, "Drop the residual skips");
  tr->add_option("--attention-pos", tr_pos,
                 "Comma list of attention sites among conv,rb1,rb2,rb3 (default rb1,rb2)");
  tr->add_option("--attention-gate", tr_gate, "Gate form: relu_sigmoid | sigmoid_only")
      ->check(CLI::IsMember({"relu_sigmoid", "sigmoid_only"}));
  tr->add_option("--epochs", tr_epochs, "Training epochs (0 writes an untrained checkpoint)");
  tr->add_option("--batch", tr_batch, "Minibatch size");
  tr->add_option("--seed", tr_seed, "Init/shuffle/augment seed");
  tr->add_flag("--no-augment", tr_no_augment, "Disable data augmentation");
  tr->add_option("--lr", tr_lr, "Adam learning rate");
  tr->add_option("--eval-every", tr_eval_every, "Evaluate every k epochs (0 = only log loss)");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
  std::string ev_model, ev_data;
  ev->add_option("--model", ev_model, "Checkpoint path")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();

  // infer
  auto* in = app.add_subcommand("infer", "Identify the script of one PGM crop");
  std::string in_model, in_image;
  in->add_option("--model", in_model, "Checkpoint path")->required();
  in->add_option("--image", in_image, "PGM image path")->required();

  // inspect-attention
  auto* ia = app.add_subcommand("inspect-attention", "Dump attention maps for one crop");
  std::string ia_model, ia_image, ia_out;
  ia->add_option("--model", ia_model, "Checkpoint path")->required();
  ia->add_option("--image", ia_image, "PGM image path")->required();
  ia->add_option("--out", ia_out, "Directory for the map images")->required();

  // info
  auto* inf = app.add_subcommand("info", "Print a checkpoint's config and parameter breakdown");
  std::string inf_model;
  inf->add_option("--model", inf_model, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_scripts, gen_shared, gen_train, gen_test, gen_seed,
                          gen_force);
    if (tr->parsed())
      return cmd_train(tr_data, tr_out, tr_loss, tr_no_attention, tr_no_residual, tr_pos, tr_gate,
                       tr_epochs, tr_batch, tr_seed, tr_no_augment, tr_lr, tr_eval_every);
    if (ev->parsed()) return cmd_eval(ev_model, ev_data);
    if (in->parsed()) return cmd_infer(in_model, in_image);
    if (ia->parsed()) return cmd_inspect_attention(ia_model, ia_image, ia_out);
    if (inf->parsed()) return cmd_info(inf_model);
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInternal;
  }
  return 2;
}
