// knnlm: train / build-datastore / eval / sweep-lambda / analyze.
//
// Every hyperparameter can come from the JSON --config file or a flag; flags
// win. JSON outputs embed the seed and the SHA-256 of every input artifact.
// Wall-clock timestamps go only to <out>/<command>.log.

#include <chrono>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "knnlm/analysis.hpp"
#include "knnlm/checkpoint.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/error.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/io.hpp"
#include "knnlm/knn.hpp"
#include "knnlm/synthetic.hpp"
#include "knnlm/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace knnlm;

namespace {

enum class Kind { integer, real, text, flag };

/// A command-line option that, when given, overrides one config key.
struct Binding {
  CLI::Option* opt;
  json::json_pointer ptr;
  Kind kind;
  std::string* raw;
  bool flag_value;
};

class Options {
 public:
  void add(CLI::App* app, const std::string& name, const std::string& ptr, Kind kind,
           const std::string& help) {
    auto* raw = &storage_.emplace_back();
    CLI::Option* o = kind == Kind::flag ? app->add_flag(name, help) : app->add_option(name, *raw, help);
    // Flags named --no-x store false.
    bindings_.push_back({o, json::json_pointer(ptr), kind, raw, name.rfind("--no-", 0) != 0});
  }

  /// Overlays every flag that was given on the command line onto `cfg`.
  void apply(json& cfg) const {
    for (const auto& b : bindings_) {
      if (b.opt->count() == 0) continue;
      switch (b.kind) {
        case Kind::integer: {
          std::size_t pos = 0;
          unsigned long long v = 0;
          try {
            if (!b.raw->empty() && (*b.raw)[0] == '-') throw std::invalid_argument(*b.raw);
            v = std::stoull(*b.raw, &pos);
          } catch (const std::exception&) {
            pos = std::string::npos;
          }
          if (pos != b.raw->size()) fail_usage(b.opt->get_name() + ": expected a non-negative integer");
          cfg[b.ptr] = v;
          break;
        }
        case Kind::real: {
          std::size_t pos = 0;
          double v = 0;
          try {
            v = std::stod(*b.raw, &pos);
          } catch (const std::exception&) {
            pos = std::string::npos;
          }
          if (pos != b.raw->size()) fail_usage(b.opt->get_name() + ": expected a number");
          cfg[b.ptr] = v;
          break;
        }
        case Kind::text:
          cfg[b.ptr] = *b.raw;
          break;
        case Kind::flag:
          cfg[b.ptr] = b.flag_value;
          break;
      }
    }
  }

 private:
  std::deque<std::string> storage_;
  std::vector<Binding> bindings_;
};

template <typename T>
T get(const json& cfg, const std::string& ptr, T fallback) {
  json::json_pointer p(ptr);
  if (!cfg.contains(p) || cfg[p].is_null()) return fallback;
  return cfg[p].get<T>();
}

std::string need_path(const json& cfg, const std::string& ptr, const std::string& what) {
  auto p = get<std::string>(cfg, ptr, "");
  if (p.empty()) fail_usage("missing required input: " + what);
  if (!fs::exists(p)) fail_data("missing " + what + ": " + p + " does not exist");
  return p;
}

struct Context {
  json cfg;
  std::uint64_t seed = 0;
  fs::path out;
  std::string command;
  std::vector<std::string> argv;
  json inputs = json::object();  // name -> {path, sha256}

  Hash record_input(const std::string& name, const std::string& path) {
    auto h = sha256_file(path);
    inputs[name] = {{"path", path}, {"sha256", to_hex(h)}};
    return h;
  }

  std::string path(const std::string& file) const { return (out / file).string(); }

  void write(const std::string& file, std::string_view bytes) const { io::write_file(path(file), bytes); }

  void write_json(const std::string& file, json j) const {
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["command"] = command;
    write(file, j.dump(2) + "\n");
  }

  void log(const std::string& msg) const {
    fs::create_directories(out);
    std::ofstream f(path(command + ".log"), std::ios::app);
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    f << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << msg << '\n';
  }
};

struct Loaded {
  Vocab vocab;
  Checkpoint ckpt;
  Hash ckpt_hash{};
};

Loaded load_model(Context& ctx, const std::string& ckpt_ptr = "/paths/checkpoint",
                  const std::string& label = "checkpoint") {
  Loaded l;
  auto vocab_path = need_path(ctx.cfg, "/paths/vocab", "vocab");
  auto ckpt_path = need_path(ctx.cfg, ckpt_ptr, label);
  ctx.record_input("vocab", vocab_path);
  l.ckpt_hash = ctx.record_input(label, ckpt_path);
  l.vocab = Vocab::load(vocab_path);
  l.ckpt = Checkpoint::load(ckpt_path);
  if (l.ckpt.vocab_hash != l.vocab.content_hash())
    fail_data("vocab " + vocab_path + " (sha256 " + to_hex(l.vocab.content_hash()) +
              ") does not match " + label + " " + ckpt_path + " (expects " + to_hex(l.ckpt.vocab_hash) + ")");
  return l;
}

EncodedSplit load_split(Context& ctx, const Vocab& vocab, const std::string& ptr, const std::string& name) {
  auto p = need_path(ctx.cfg, ptr, name + " corpus");
  ctx.record_input(name, p);
  return encode(vocab, io::read_file(p), name);
}

KnnConfig knn_config(const json& cfg) {
  KnnConfig k;
  k.k = get<std::size_t>(cfg, "/knn/k", k.k);
  k.lambda = get<double>(cfg, "/knn/lambda", k.lambda);
  k.tau = get<double>(cfg, "/knn/tau", k.tau);
  k.validate();
  return k;
}

/// A datastore mapped from disk plus an optional IVF index over it.
struct Store {
  std::unique_ptr<MappedDatastore> mapped;
  std::optional<IvfIndex> index;
  std::optional<Retriever> retriever;
};

std::unique_ptr<Store> open_store(Context& ctx, const std::string& ds_ptr, const std::string& label) {
  auto s = std::make_unique<Store>();
  auto path = need_path(ctx.cfg, ds_ptr, label);
  auto ds_hash = ctx.record_input(label, path);
  s->mapped = std::make_unique<MappedDatastore>(path);
  auto ix_path = ds_ptr == "/paths/datastore" ? get<std::string>(ctx.cfg, "/paths/index", "") : "";
  if (!ix_path.empty()) {
    if (!fs::exists(ix_path)) fail_data("missing index: " + ix_path + " does not exist");
    ctx.record_input("index", ix_path);
    s->index = IvfIndex::load(ix_path);
    if (s->index->datastore_hash != ds_hash)
      fail_data("index " + ix_path + " was built for a different datastore");
    auto nprobe = get<std::size_t>(ctx.cfg, "/datastore/nprobe", std::min<std::size_t>(8, s->index->cells()));
    s->retriever.emplace(s->mapped->view(), *s->index, nprobe);
  } else {
    s->retriever.emplace(s->mapped->view());
  }
  return s;
}

ModelConfig model_config(const json& cfg, std::size_t vocab, std::uint64_t seed) {
  ModelConfig m;
  if (cfg.contains("model")) m = cfg["model"].get<ModelConfig>();
  m.vocab = vocab;
  m.seed = seed;
  m.validate();
  return m;
}

int cmd_gen_corpus(Context& ctx) {
  auto kind = get<std::string>(ctx.cfg, "/corpus/kind", "wiki");
  if (kind == "wiki") {
    synthetic::WikiOptions o;
    o.seed = ctx.seed;
    o.train_tokens = get<std::size_t>(ctx.cfg, "/corpus/train_tokens", o.train_tokens);
    o.valid_tokens = get<std::size_t>(ctx.cfg, "/corpus/valid_tokens", o.valid_tokens);
    o.entities = get<std::size_t>(ctx.cfg, "/corpus/entities", o.entities);
    auto s = synthetic::wiki_like_corpus(o);
    ctx.write("train.txt", s.train);
    ctx.write("valid.txt", s.valid);
  } else if (kind == "memorize") {
    auto n = get<std::size_t>(ctx.cfg, "/corpus/train_tokens", 2000);
    auto text = synthetic::memorization_corpus(n, get<std::size_t>(ctx.cfg, "/corpus/vocab", 40), ctx.seed);
    ctx.write("train.txt", text);
    ctx.write("valid.txt", text);
  } else {
    fail_usage("--kind must be wiki or memorize");
  }
  ctx.write_json("corpus.json", {{"kind", kind}, {"corpus", ctx.cfg.value("corpus", json::object())}});
  std::cout << "wrote " << ctx.path("train.txt") << " and " << ctx.path("valid.txt") << "\n";
  return 0;
}

int cmd_train(Context& ctx) {
  auto train_path = need_path(ctx.cfg, "/paths/train", "train corpus");
  auto train_text = io::read_file(train_path);
  ctx.record_input("train", train_path);
  Vocab vocab;
  auto vocab_path = get<std::string>(ctx.cfg, "/paths/vocab", "");
  if (!vocab_path.empty()) {
    need_path(ctx.cfg, "/paths/vocab", "vocab");
    ctx.record_input("vocab", vocab_path);
    vocab = Vocab::load(vocab_path);
  } else {
    vocab = build_vocab(train_text, get<std::uint64_t>(ctx.cfg, "/train/min_count", 1));
  }
  auto train = encode(vocab, train_text, "train");
  std::optional<EncodedSplit> valid;
  if (!get<std::string>(ctx.cfg, "/paths/valid", "").empty())
    valid = load_split(ctx, vocab, "/paths/valid", "valid");

  TrainConfig tc;
  tc.model = model_config(ctx.cfg, vocab.size(), ctx.seed);
  tc.objective = parse_objective(get<std::string>(ctx.cfg, "/train/objective", "ce"));
  if (ctx.cfg.contains("reg")) tc.reg = ctx.cfg["reg"].get<RegConfig>();
  if (ctx.cfg.contains("adam")) tc.adam = ctx.cfg["adam"].get<AdamConfig>();
  tc.epochs = get<std::size_t>(ctx.cfg, "/train/epochs", tc.epochs);
  tc.batch = get<std::size_t>(ctx.cfg, "/train/batch", tc.batch);
  tc.bptt = get<std::size_t>(ctx.cfg, "/train/bptt", tc.bptt);
  tc.shuffle = get<bool>(ctx.cfg, "/train/shuffle", tc.shuffle);
  tc.target_train_ppl = get<double>(ctx.cfg, "/train/target_train_ppl", tc.target_train_ppl);
  tc.checkpoint_path = ctx.path("checkpoint.knlm");
  if (tc.objective != Objective::ce_moco && ctx.cfg.contains(json::json_pointer("/reg/queue_len")))
    ctx.log("note: queue settings ignored for objective " + to_string(tc.objective));

  vocab.save(ctx.path("vocab.txt"));
  ctx.log("train start: " + std::to_string(train.ids.size()) + " tokens, V=" + std::to_string(vocab.size()));
  json metrics = {{"config", tc}, {"vocab_sha256", to_hex(vocab.content_hash())}, {"epochs", json::array()}};
  auto on_epoch = [&](const EpochStats& e) {
    metrics["epochs"].push_back(e);
    std::cout << "epoch " << e.epoch << " train_ppl=" << e.train_ppl
              << (valid ? " valid_ppl=" + std::to_string(e.valid_ppl) : std::string()) << std::endl;
    ctx.log("epoch " + std::to_string(e.epoch) + " train_ppl=" + std::to_string(e.train_ppl));
  };
  try {
    auto res = train_run<float>(tc, train, valid ? &*valid : nullptr, on_epoch);
    metrics["checkpoint_sha256"] = to_hex(res.checkpoint.content_hash());
    metrics["steps"] = res.checkpoint.step;
    metrics["mean_repr_sq_norm_train"] = mean_repr_sq_norm(res.model, train, tc.effective_bptt());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::divergence) {
      metrics["diverged"] = e.what();
      ctx.write_json("metrics.json", metrics);
    }
    throw;
  }
  ctx.write_json("metrics.json", metrics);
  std::cout << "wrote " << ctx.path("checkpoint.knlm") << "\n";
  return 0;
}

int cmd_build_datastore(Context& ctx) {
  auto m = load_model(ctx);
  auto split = load_split(ctx, m.vocab, "/paths/corpus", "corpus");
  auto bptt = get<std::size_t>(ctx.cfg, "/datastore/bptt", 0);
  auto ds = build_datastore(m.ckpt.model<float>(), split, bptt, m.ckpt_hash);
  ds.save(ctx.path("datastore.knds"));
  auto ds_hash = ds.content_hash();
  json summary = {{"datastore_sha256", to_hex(ds_hash)}, {"n", ds.size()}, {"dim", ds.dim}};
  auto cells = get<std::size_t>(ctx.cfg, "/datastore/ivf_cells", 0);
  if (cells > 0) {
    auto iters = get<std::size_t>(ctx.cfg, "/datastore/ivf_iters", 25);
    auto ix = ivf_build(ds.view(), cells, ctx.seed, iters, ds_hash);
    ix.save(ctx.path("index.kniv"));
    summary["index_sha256"] = to_hex(sha256(ix.serialize()));
    summary["ivf_cells"] = cells;
    summary["ivf_iters"] = iters;
  }
  ctx.write_json("datastore.json", summary);
  std::cout << "datastore: N=" << ds.size() << " d=" << ds.dim << " -> " << ctx.path("datastore.knds") << "\n";
  return 0;
}

int cmd_eval(Context& ctx) {
  auto m = load_model(ctx);
  auto split = load_split(ctx, m.vocab, "/paths/corpus", "corpus");
  auto store = open_store(ctx, "/paths/datastore", "datastore");
  auto k = knn_config(ctx.cfg);
  auto r = eval_knn_lm(m.ckpt, *store->retriever, split, k);
  std::cout << "ppl_lm=" << io::shortest(r.ppl_lm) << " ppl_knn_lm=" << io::shortest(r.ppl_knn_lm)
            << " tokens=" << r.tokens << "\n";
  ctx.write_json("eval.json", {{"ppl_lm", r.ppl_lm}, {"ppl_knn_lm", r.ppl_knn_lm}, {"tokens", r.tokens}, {"knn", k}});
  return 0;
}

int cmd_sweep(Context& ctx) {
  auto m = load_model(ctx);
  auto split = load_split(ctx, m.vocab, "/paths/corpus", "corpus");
  auto store = open_store(ctx, "/paths/datastore", "datastore");
  auto k = knn_config(ctx.cfg);
  auto grid = parse_grid(get<std::string>(ctx.cfg, "/knn/grid", "0:1:0.05"));
  auto s = sweep_lambda(m.ckpt, *store->retriever, split, k.k, k.tau, grid);
  ctx.write("sweep.csv", s.csv());
  ctx.write_json("sweep.json", {{"best_lambda", s.best_lambda},
                                {"ppl_lm", s.ppl_lm},
                                {"ppl_knn_lm", s.best_ppl},
                                {"k", k.k},
                                {"tau", k.tau},
                                {"grid", grid}});
  std::cout << "best_lambda=" << io::shortest(s.best_lambda) << " ppl_lm=" << io::shortest(s.ppl_lm)
            << " ppl_knn_lm=" << io::shortest(s.best_ppl) << " rows=" << s.rows.size() << "\n";
  return 0;
}

int cmd_analyze(Context& ctx) {
  auto knn = knn_config(ctx.cfg);
  ClusteringOptions opt;
  opt.seed = ctx.seed;
  opt.top_f = get<std::size_t>(ctx.cfg, "/analysis/top_f", opt.top_f);
  opt.components = get<std::size_t>(ctx.cfg, "/analysis/components", opt.components);
  opt.bins = get<std::size_t>(ctx.cfg, "/analysis/bins", opt.bins);
  opt.max_iter = get<std::size_t>(ctx.cfg, "/analysis/max_iter", opt.max_iter);
  opt.restarts = get<std::size_t>(ctx.cfg, "/analysis/restarts", opt.restarts);
  auto buckets = get<std::size_t>(ctx.cfg, "/analysis/buckets", 10);
  auto score = get<std::string>(ctx.cfg, "/analysis/score", "lm");
  if (score != "lm" && score != "knn-lm") fail_usage("--score must be lm or knn-lm");

  json sides = json::array();
  std::optional<Hash> vocab_hash;
  for (std::string label : {"a", "b"}) {
    const std::string ck_ptr = label == "a" ? "/paths/checkpoint" : "/paths/checkpoint_b";
    const std::string ds_ptr = label == "a" ? "/paths/datastore" : "/paths/datastore_b";
    if (label == "b" && get<std::string>(ctx.cfg, ck_ptr, "").empty()) break;
    auto m = load_model(ctx, ck_ptr, "checkpoint_" + label);
    if (vocab_hash && *vocab_hash != m.ckpt.vocab_hash) fail_data("checkpoints a and b use different vocabularies");
    vocab_hash = m.ckpt.vocab_hash;
    auto split = load_split(ctx, m.vocab, "/paths/corpus", "corpus");
    std::unique_ptr<Store> store;
    if (!get<std::string>(ctx.cfg, ds_ptr, "").empty()) store = open_store(ctx, ds_ptr, "datastore_" + label);

    auto lm = collect_records(m.ckpt, m.vocab, split);
    ctx.write(label + ".freq_loss_lm.csv", freq_loss_histogram(lm, buckets, m.vocab.size()).csv());
    json side;
    std::vector<TokenRecord> knn_records;
    if (store) {
      knn_records = collect_records(m.ckpt, m.vocab, split, &*store->retriever, knn);
      ctx.write(label + ".freq_loss_knn.csv", freq_loss_histogram(knn_records, buckets, m.vocab.size()).csv());
    } else if (score == "knn-lm") {
      fail_usage("--score knn-lm needs a datastore for checkpoint " + label);
    }
    auto c = cluster_records(score == "lm" ? lm : knn_records, label, opt);
    ctx.write(label + ".records.csv", c.records_csv());
    ctx.write(label + ".loglik_hist.csv", c.histogram.csv());
    side = c.summary();
    auto mean_nll = [](const std::vector<TokenRecord>& rs) {
      double s = 0;
      for (auto& r : rs) s += r.nll;
      return s / double(rs.size());
    };
    side["ppl_lm"] = std::exp(mean_nll(lm));
    if (store) side["ppl_knn_lm"] = std::exp(mean_nll(knn_records));
    sides.push_back(side);
    std::cout << label << ": gap(mean loglik low - high)=" << c.gap() << " n_high=" << c.split.high.size()
              << " n_low=" << c.split.low.size() << "\n";
  }
  ctx.write_json("analysis.json", {{"sides", sides},
                                   {"knn", knn},
                                   {"score", score},
                                   {"buckets", buckets},
                                   {"top_f", opt.top_f},
                                   {"components", opt.components},
                                   {"bins", opt.bins}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kNN-LM laboratory"};
  app.fallthrough();
  app.require_subcommand(1);
  std::string config_path, out_dir = ".";
  std::string seed_raw;
  auto* seed_opt = app.add_option("--seed", seed_raw, "RNG seed (u64)");
  app.add_option("--config", config_path, "JSON config file");
  auto* out_opt = app.add_option("--out", out_dir, "output directory");

  Options opts;
  auto paths = [&](CLI::App* c, std::initializer_list<const char*> names) {
    for (std::string n : names) {
      std::string key = n;
      std::replace(key.begin(), key.end(), '-', '_');
      opts.add(c, "--" + n, "/paths/" + key, Kind::text, n + " path");
    }
  };
  auto model_flags = [&](CLI::App* c) {
    opts.add(c, "--layers", "/model/n_layers", Kind::integer, "transformer blocks");
    opts.add(c, "--heads", "/model/n_heads", Kind::integer, "attention heads");
    opts.add(c, "--d-model", "/model/d_model", Kind::integer, "model width");
    opts.add(c, "--d-ff", "/model/d_ff", Kind::integer, "MLP width");
    opts.add(c, "--context", "/model/context_len", Kind::integer, "context length");
  };
  auto knn_flags = [&](CLI::App* c) {
    opts.add(c, "--k", "/knn/k", Kind::integer, "neighbours");
    opts.add(c, "--lambda", "/knn/lambda", Kind::real, "interpolation weight");
    opts.add(c, "--tau", "/knn/tau", Kind::real, "distance temperature");
    opts.add(c, "--nprobe", "/datastore/nprobe", Kind::integer, "IVF cells probed");
  };

  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic train/valid corpus");
  opts.add(gen, "--kind", "/corpus/kind", Kind::text, "wiki | memorize");
  opts.add(gen, "--train-tokens", "/corpus/train_tokens", Kind::integer, "train tokens");
  opts.add(gen, "--valid-tokens", "/corpus/valid_tokens", Kind::integer, "valid tokens");
  opts.add(gen, "--entities", "/corpus/entities", Kind::integer, "entities (wiki)");

  auto* train = app.add_subcommand("train", "train a language model");
  paths(train, {"train", "valid", "vocab"});
  model_flags(train);
  opts.add(train, "--objective", "/train/objective", Kind::text, "ce | ce+l2 | ce+moco");
  opts.add(train, "--omega", "/reg/omega", Kind::real, "regularizer weight");
  opts.add(train, "--queue-len", "/reg/queue_len", Kind::integer, "queue entries per word");
  opts.add(train, "--momentum", "/reg/momentum", Kind::real, "target encoder momentum");
  opts.add(train, "--epochs", "/train/epochs", Kind::integer, "epochs");
  opts.add(train, "--batch", "/train/batch", Kind::integer, "batch lanes");
  opts.add(train, "--bptt", "/train/bptt", Kind::integer, "window length");
  opts.add(train, "--min-count", "/train/min_count", Kind::integer, "vocab min count");
  opts.add(train, "--target-train-ppl", "/train/target_train_ppl", Kind::real, "stop below this train ppl");
  opts.add(train, "--no-shuffle", "/train/shuffle", Kind::flag, "keep batch order fixed");
  opts.add(train, "--lr", "/adam/lr", Kind::real, "peak learning rate");
  opts.add(train, "--warmup", "/adam/warmup", Kind::integer, "warmup steps");
  opts.add(train, "--clip", "/adam/clip", Kind::real, "gradient norm clip");

  auto* build = app.add_subcommand("build-datastore", "encode a corpus into a datastore");
  paths(build, {"checkpoint", "vocab", "corpus"});
  opts.add(build, "--bptt", "/datastore/bptt", Kind::integer, "window length");
  opts.add(build, "--ivf-cells", "/datastore/ivf_cells", Kind::integer, "IVF cells (0 = no index)");
  opts.add(build, "--ivf-iters", "/datastore/ivf_iters", Kind::integer, "k-means iterations");

  auto* eval = app.add_subcommand("eval", "LM and kNN-LM perplexity");
  paths(eval, {"checkpoint", "vocab", "corpus", "datastore", "index"});
  knn_flags(eval);

  auto* sweep = app.add_subcommand("sweep-lambda", "perplexity over a lambda grid");
  paths(sweep, {"checkpoint", "vocab", "corpus", "datastore", "index"});
  knn_flags(sweep);
  opts.add(sweep, "--grid", "/knn/grid", Kind::text, "lo:hi:step or a,b,c");

  auto* analyze = app.add_subcommand("analyze", "frequency/loss histograms and GMM clustering");
  paths(analyze, {"checkpoint", "checkpoint-b", "vocab", "corpus", "datastore", "datastore-b"});
  knn_flags(analyze);
  opts.add(analyze, "--buckets", "/analysis/buckets", Kind::integer, "frequency-rank buckets");
  opts.add(analyze, "--top-f", "/analysis/top_f", Kind::integer, "frequent-word cutoff");
  opts.add(analyze, "--components", "/analysis/components", Kind::integer, "GMM components");
  opts.add(analyze, "--bins", "/analysis/bins", Kind::integer, "log-likelihood histogram bins");
  opts.add(analyze, "--gmm-iters", "/analysis/max_iter", Kind::integer, "EM iterations");
  opts.add(analyze, "--restarts", "/analysis/restarts", Kind::integer, "EM restarts");
  opts.add(analyze, "--score", "/analysis/score", Kind::text, "lm | knn-lm NLL for the split");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  Context ctx;
  for (int i = 0; i < argc; ++i) ctx.argv.push_back(argv[i]);
  try {
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) fail_data("missing config: " + config_path + " does not exist");
      try {
        ctx.cfg = json::parse(io::read_file(config_path));
      } catch (const json::exception& e) {
        fail_usage("config " + config_path + ": " + e.what());
      }
      if (!ctx.cfg.is_object()) fail_usage("config must be a JSON object");
      ctx.record_input("config", config_path);
    } else {
      ctx.cfg = json::object();
    }
    opts.apply(ctx.cfg);
    if (seed_opt->count()) {
      std::size_t pos = 0;
      try {
        if (!seed_raw.empty() && seed_raw[0] == '-') throw std::invalid_argument(seed_raw);
        ctx.cfg["seed"] = std::stoull(seed_raw, &pos);
      } catch (const std::exception&) {
        pos = std::string::npos;
      }
      if (pos != seed_raw.size()) fail_usage("--seed must be an unsigned 64-bit integer");
    }
    if (out_opt->count()) ctx.cfg["out"] = out_dir;
    ctx.seed = get<std::uint64_t>(ctx.cfg, "/seed", 0);
    ctx.out = get<std::string>(ctx.cfg, "/out", ".");
    fs::create_directories(ctx.out);

    auto* sub = app.get_subcommands().front();
    ctx.command = sub->get_name();
    std::string cmdline;
    for (auto& a : ctx.argv) cmdline += (cmdline.empty() ? "" : " ") + a;
    ctx.log("start: " + cmdline);
    int rc = 0;
    if (sub == gen) rc = cmd_gen_corpus(ctx);
    else if (sub == train) rc = cmd_train(ctx);
    else if (sub == build) rc = cmd_build_datastore(ctx);
    else if (sub == eval) rc = cmd_eval(ctx);
    else if (sub == sweep) rc = cmd_sweep(ctx);
    else rc = cmd_analyze(ctx);
    ctx.log("done");
    return rc;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!ctx.command.empty()) ctx.log(std::string("error: ") + e.what());
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "error: bad configuration value: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
