#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "seqscript/train.hpp"
#include "support.hpp"

using namespace seqscript;
namespace fs = std::filesystem;

namespace {

ArchConfig small_config(int scripts) {
  ArchConfig c;
  c.conv_filters = {4, 6, 8, 10, 12, 14, 16};
  c.lstm_hidden = 12;
  c.lstm_proj = 6;
  c.num_scripts = scripts;
  return c;
}

LoadedDataset make_desk_dataset(const std::string& name, int scripts, int n_train, int n_test,
                                bool train_split, std::uint64_t seed = 7) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  gen_dataset(dir.string(), scripts, true, n_train, n_test, seed);
  DatasetMeta meta = load_metadata(dir.string());
  DatasetManifest man =
      load_manifest((dir / (train_split ? "train.tsv" : "test.tsv")).string(), meta.num_scripts);
  return load_dataset(man, meta.num_scripts);
}

}  // namespace

TEST_CASE("adam leaves parameters alone on zero gradients") {
  Model m = build(small_config(2), 3);
  AdamState adam = make_adam(m);
  std::vector<ParamRef> params = model_params(m);
  std::vector<double> before;
  for (const ParamRef& p : params)
    before.insert(before.end(), p.tensor->data.begin(), p.tensor->data.end());

  GradSet zero = zero_grads(m);
  for (int i = 0; i < 3; ++i) adam_step(adam, params, zero, 5.0);
  CHECK(adam.t == 3);

  std::vector<double> after;
  for (const ParamRef& p : params)
    after.insert(after.end(), p.tensor->data.begin(), p.tensor->data.end());
  CHECK(before == after);
}

TEST_CASE("adam first step moves a scalar by about -lr") {
  // single scalar parameter, gradient 1: bias correction cancels at t=1
  Model m = build(small_config(2), 3);
  AdamState adam = make_adam(m, 0.001);
  std::vector<ParamRef> params = model_params(m);
  GradSet g = zero_grads(m);
  // pick fc.b element 0 as the lone nonzero gradient
  const std::size_t pi = params.size() - 1;
  REQUIRE(params[pi].name == "fc.b");
  g.tensors[pi].data[0] = 1.0;
  const double before = params[pi].tensor->data[0];
  adam_step(adam, params, g, 5.0);
  const double delta = params[pi].tensor->data[0] - before;
  CHECK(std::abs(delta + 0.001) < 1e-6);
}

TEST_CASE("adam clips the global gradient norm") {
  Model m = build(small_config(2), 3);
  AdamState adam = make_adam(m, 0.1);
  std::vector<ParamRef> params = model_params(m);

  // two equal steps, one with gradients scaled 10x past the clip threshold:
  // after clipping both see the same effective gradient
  GradSet g1 = zero_grads(m);
  const std::size_t pi = params.size() - 1;
  g1.tensors[pi].data[0] = 50.0;  // global norm 50, clip 5 -> scale 0.1
  Model m2 = build(small_config(2), 3);
  AdamState adam2 = make_adam(m2, 0.1);
  std::vector<ParamRef> params2 = model_params(m2);
  GradSet g2 = zero_grads(m2);
  g2.tensors[pi].data[0] = 5.0;  // already at the clip norm

  adam_step(adam, params, g1, 5.0);
  adam_step(adam2, params2, g2, 5.0);
  CHECK(params[pi].tensor->data[0] == doctest::Approx(params2[pi].tensor->data[0]).epsilon(1e-12));
}

TEST_CASE("adam rejects non-finite gradients with the parameter name") {
  Model m = build(small_config(2), 3);
  AdamState adam = make_adam(m);
  std::vector<ParamRef> params = model_params(m);
  GradSet g = zero_grads(m);
  g.tensors[0].data[0] = std::nan("");
  try {
    adam_step(adam, params, g, 5.0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find(params[0].name) != std::string::npos);
  }
}

TEST_CASE("cross entropy loss gradient matches finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 4; ++trial) {
    const int T = rng.uniform_int(2, 6), K = rng.uniform_int(3, 5);
    Tensor logits = testsup::random_tensor(rng, {T, K}, 1.0);
    const int y = rng.uniform_int(1, K - 1);
    CeResult ce = cross_entropy_loss(logits, y);
    CHECK(ce.nll > 0.0);
    // blank column gets no gradient
    for (int t = 0; t < T; ++t) CHECK(ce.grad_logits(t, 0) == 0.0);
    auto loss = [&] { return cross_entropy_loss(logits, y).nll; };
    CHECK(testsup::gradcheck(logits, ce.grad_logits, loss) < 1e-6);
  }
}

TEST_CASE("one epoch over 8 samples at batch 4 takes exactly 2 steps") {
  LoadedDataset data = make_desk_dataset("seqscript_train_step", 2, 8, 2, true);
  Model m = build(small_config(2), 1);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  cfg.eval_every = 0;
  cfg.augment = false;
  TrainResult r = train(m, data, LoadedDataset{}, cfg);
  CHECK(r.steps == 2);
  CHECK(m.step == 2);
  REQUIRE(r.log.size() == 1);
  CHECK(r.log[0].skipped == 0);
}

TEST_CASE("loss decreases over five epochs on a small run") {
  LoadedDataset train_data = make_desk_dataset("seqscript_train_loss", 2, 48, 4, true);
  Model m = build(small_config(2), 5);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 5;
  cfg.eval_every = 0;
  cfg.augment = false;
  cfg.seed = 9;
  TrainResult r = train(m, train_data, LoadedDataset{}, cfg);
  REQUIRE(r.log.size() == 5);
  CHECK(r.log[4].mean_loss < r.log[0].mean_loss);
}

TEST_CASE("training twice with one seed gives byte-identical checkpoints") {
  LoadedDataset train_data = make_desk_dataset("seqscript_train_det", 2, 16, 2, true);
  const fs::path p1 = fs::temp_directory_path() / "det1.ssid";
  const fs::path p2 = fs::temp_directory_path() / "det2.ssid";
  for (int run = 0; run < 2; ++run) {
    Model m = build(small_config(2), 77);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.eval_every = 0;
    cfg.seed = 5;
    train(m, train_data, LoadedDataset{}, cfg);
    save_model(m, (run == 0 ? p1 : p2).string());
  }
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1.size() > 0);
  CHECK(s1 == s2);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("evaluate against a rigged constant-prediction model") {
  LoadedDataset test_data = make_desk_dataset("seqscript_train_eval", 4, 8, 40, false);
  Model m = build(small_config(4), 1);
  // slam the head onto script 2 for every frame
  for (double& v : m.fc.weights.data) v = 0.0;
  for (int k = 0; k < 5; ++k) m.fc.bias(k) = k == 2 ? 50.0 : -50.0;

  EvalReport r = evaluate(m, test_data);
  CHECK(r.total == 40);
  CHECK(r.word_acc == doctest::Approx(0.25));  // balanced split
  CHECK(r.per_script_acc[1] == doctest::Approx(1.0));
  CHECK(r.per_script_acc[0] == doctest::Approx(0.0));
  CHECK(r.blank_rate == doctest::Approx(0.0));

  // confusion row sums (plus none counts) cover every test word
  for (int s = 0; s < 4; ++s) {
    long long row = r.none_count[static_cast<std::size_t>(s)];
    for (int t = 0; t < 4; ++t) row += r.confusion[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)];
    CHECK(row == 10);
  }

  // mismatched script counts are a config error
  Model m3 = build(small_config(3), 1);
  CHECK_THROWS_AS(evaluate(m3, test_data), ConfigError);
}

TEST_CASE("untrained model sits near chance on a balanced set") {
  LoadedDataset test_data = make_desk_dataset("seqscript_train_chance", 4, 8, 80, false);
  Model m = build(small_config(4), 12345);
  EvalReport r = evaluate(m, test_data);
  CHECK(r.word_acc >= 0.05);
  CHECK(r.word_acc <= 0.45);
}

TEST_CASE("run log is valid json lines with the required fields") {
  LoadedDataset train_data = make_desk_dataset("seqscript_train_log", 2, 16, 4, true);
  LoadedDataset test_data = make_desk_dataset("seqscript_train_log2", 2, 16, 4, false);
  const fs::path log_path = fs::temp_directory_path() / "seqscript_run.jsonl";
  Model m = build(small_config(2), 2);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.seed = 3;
  cfg.log_path = log_path.string();
  train(m, train_data, test_data, cfg);

  std::ifstream f(log_path);
  std::string line;
  int lines = 0;
  while (std::getline(f, line)) {
    ++lines;
    CHECK(line.find("\"epoch\"") != std::string::npos);
    CHECK(line.find("\"mean_loss\"") != std::string::npos);
    CHECK(line.find("\"word_acc\"") != std::string::npos);
    CHECK(line.find("\"per_script_acc\"") != std::string::npos);
    CHECK(line.find("\"skipped\"") != std::string::npos);
  }
  CHECK(lines == 2);
  fs::remove(log_path);
}
