// Pipeline driver: builds the synthetic world, pretrains the base model,
// tunes continuous prompts, elicits and scores descriptions, and runs the
// bias diagnostics. Every subcommand reads and writes documented formats
// under --out and is rerun-safe; see docs/CLI.md.

#include <atomic>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "splab/splab.hpp"

namespace fs = std::filesystem;
using namespace splab;

namespace {

struct MalformedInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Wrap input loading so file problems map to exit code 3.
template <class F>
auto load_phase(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const std::exception& e) {
        throw MalformedInput(e.what());
    }
}

// ---------------------------------------------------------------------------
// configuration file
// ---------------------------------------------------------------------------

struct Config {
    // world
    std::uint64_t world_seed = 11;
    int num_demo_tasks = 8;
    std::uint64_t eval_task_seed = 101;
    std::uint64_t demo_task_seed_base = 500;
    int num_classes = 2;
    bool with_bias = false;
    double bias_strength = 0.65;
    std::size_t train_size = 240, val_size = 60, test_size = 120;
    std::uint64_t data_seed = 21;
    CorpusConfig corpus;
    std::uint64_t corpus_seed = 31;

    ModelConfig model;
    PretrainConfig pretrain;

    TuneConfig tune;
    int prompt_length = 14;

    // elicit
    int budget = 48;
    int num_demos = 3;
    std::uint64_t demo_seed = 5;
    int source_layer = 1;
    int target_layer = 1;
    bool sweep = false;

    // score
    std::string accuracy_split = "val";

    // bias
    std::uint64_t group_seed = 17;

    // report
    double bin_width = 0.1;
};

Config parse_config(const fs::path& path) {
    const json j = json::parse(io::read_text_file(path));
    Config c;
    if (j.contains("world")) {
        const json& w = j.at("world");
        if (w.contains("seed")) c.world_seed = w.at("seed").get<std::uint64_t>();
        if (w.contains("num_demo_tasks")) c.num_demo_tasks = w.at("num_demo_tasks").get<int>();
        if (w.contains("eval_task_seed"))
            c.eval_task_seed = w.at("eval_task_seed").get<std::uint64_t>();
        if (w.contains("demo_task_seed_base"))
            c.demo_task_seed_base = w.at("demo_task_seed_base").get<std::uint64_t>();
        if (w.contains("num_classes")) c.num_classes = w.at("num_classes").get<int>();
        if (w.contains("with_bias")) c.with_bias = w.at("with_bias").get<bool>();
        if (w.contains("bias_strength")) c.bias_strength = w.at("bias_strength").get<double>();
        if (w.contains("train_size")) c.train_size = w.at("train_size").get<std::size_t>();
        if (w.contains("val_size")) c.val_size = w.at("val_size").get<std::size_t>();
        if (w.contains("test_size")) c.test_size = w.at("test_size").get<std::size_t>();
        if (w.contains("data_seed")) c.data_seed = w.at("data_seed").get<std::uint64_t>();
        if (w.contains("corpus_seed")) c.corpus_seed = w.at("corpus_seed").get<std::uint64_t>();
        if (w.contains("corpus")) {
            const json& cc = w.at("corpus");
            if (cc.contains("episodes")) c.corpus.episodes = cc.at("episodes").get<std::size_t>();
            if (cc.contains("listing_fraction"))
                c.corpus.listing_fraction = cc.at("listing_fraction").get<double>();
            if (cc.contains("classification_fraction"))
                c.corpus.classification_fraction = cc.at("classification_fraction").get<double>();
        }
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        ModelConfig d;
        c.model.num_layers = m.value("num_layers", d.num_layers);
        c.model.hidden_dim = m.value("hidden_dim", d.hidden_dim);
        c.model.num_heads = m.value("num_heads", d.num_heads);
        c.model.ffn_dim = m.value("ffn_dim", d.ffn_dim);
        c.model.max_seq_len = m.value("max_seq_len", d.max_seq_len);
        c.model.seed = m.value("seed", d.seed);
        // vocab_size is derived from the generated world at pretrain time
    }
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("tune")) {
        c.tune = TuneConfig::from_json(j.at("tune"));
        if (j.at("tune").contains("prompt_length"))
            c.prompt_length = j.at("tune").at("prompt_length").get<int>();
    }
    if (j.contains("elicit")) {
        const json& e = j.at("elicit");
        if (e.contains("budget")) c.budget = e.at("budget").get<int>();
        if (e.contains("num_demos")) c.num_demos = e.at("num_demos").get<int>();
        if (e.contains("demo_seed")) c.demo_seed = e.at("demo_seed").get<std::uint64_t>();
        if (e.contains("source_layer")) c.source_layer = e.at("source_layer").get<int>();
        if (e.contains("target_layer")) c.target_layer = e.at("target_layer").get<int>();
        if (e.contains("sweep")) c.sweep = e.at("sweep").get<bool>();
    }
    if (j.contains("score") && j.at("score").contains("accuracy_split"))
        c.accuracy_split = j.at("score").at("accuracy_split").get<std::string>();
    if (j.contains("bias") && j.at("bias").contains("group_seed"))
        c.group_seed = j.at("bias").at("group_seed").get<std::uint64_t>();
    if (j.contains("report") && j.at("report").contains("bin_width"))
        c.bin_width = j.at("report").at("bin_width").get<double>();
    return c;
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

int g_jobs = 1;

template <class F>
void parallel_for(std::size_t count, F&& f) {
    const int jobs = std::max(1, g_jobs);
    if (jobs == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int workers = std::min<std::size_t>(jobs, count);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                f(i);
            }
        });
    for (auto& t : pool) t.join();
}

struct WorldArtifacts {
    Vocabulary vocab;
    TaskSpec task;
    Model model;
};

WorldArtifacts load_world(const fs::path& out) {
    return load_phase([&] {
        WorldArtifacts w;
        w.vocab = Vocabulary::from_json(json::parse(io::read_text_file(out / "vocab.json")));
        w.task = TaskSpec::from_json(json::parse(io::read_text_file(out / "task.json")));
        w.model = Model::load(out / "model.sprb");
        return w;
    });
}

fs::path run_dir(const fs::path& out, std::uint64_t seed) {
    return out / "runs" / ("run-" + std::to_string(seed));
}

std::vector<ContinuousPrompt> load_run_checkpoints(const fs::path& rdir) {
    return load_phase(
        [&] { return load_checkpoint_set(rdir / "checkpoints").checkpoints; });
}

std::vector<Demonstration> load_demo_pool(const fs::path& out) {
    return load_phase([&] {
        std::vector<Demonstration> pool;
        for (const auto& j : json::parse(io::read_text_file(out / "demos.json")))
            pool.push_back(Demonstration::from_json(j));
        return pool;
    });
}

/// `accuracy.csv` rows for one run keyed by (step, split).
std::map<std::pair<std::uint64_t, std::string>, double> load_accuracy_csv(const fs::path& path) {
    const std::string text = io::read_text_file(path);
    std::map<std::pair<std::uint64_t, std::string>, double> out;
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);  // header
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string step_s, split, acc_s;
        if (!std::getline(row, step_s, ',') || !std::getline(row, split, ',') ||
            !std::getline(row, acc_s))
            throw std::runtime_error("malformed accuracy row at " + path.string() + ":" +
                                     std::to_string(line_no));
        out[{std::stoull(step_s), split}] = std::stod(acc_s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

void cmd_pretrain(const Config& cfg_in, const fs::path& config_path, const fs::path& out,
                  std::optional<std::uint64_t> seed) {
    Config cfg = cfg_in;
    if (seed) cfg.pretrain.seed = *seed;
    fs::create_directories(out / "data");

    Vocabulary vocab;
    TaskFactory factory(vocab, cfg.world_seed);
    TaskSpec task =
        factory.make_task(cfg.eval_task_seed, cfg.num_classes, cfg.with_bias, cfg.bias_strength);
    std::vector<TaskSpec> all_tasks{task};
    for (int i = 0; i < cfg.num_demo_tasks; ++i)
        all_tasks.push_back(
            factory.make_task(cfg.demo_task_seed_base + i, 2 + (i % 3), false, 0.0));

    ModelConfig mc = cfg.model;
    mc.vocab_size = static_cast<int>(vocab.size());

    const std::vector<TokenId> corpus =
        make_corpus(vocab, all_tasks, factory.fillers(), cfg.corpus, cfg.corpus_seed);
    const DatasetSplits splits = split_dataset(task, factory.fillers(), cfg.train_size,
                                               cfg.val_size, cfg.test_size, cfg.data_seed);

    std::cerr << "world: vocab " << vocab.size() << " tokens, corpus " << corpus.size()
              << " tokens, " << all_tasks.size() << " tasks\n";
    const PretrainResult result = pretrain_base(mc, corpus, cfg.pretrain, &std::cerr);
    std::cerr << "holdout loss " << result.holdout_loss_untrained << " -> "
              << result.holdout_loss_final << "\n";

    RunManifest manifest;
    manifest.command = "pretrain";
    manifest.config_path = config_path.string();
    manifest.seed = cfg.pretrain.seed;
    manifest.started_at = iso_utc_now();
    manifest.add_input(config_path);

    io::write_text_file(out / "vocab.json", io::canonical(vocab.to_json()) + "\n");
    io::write_text_file(out / "task.json", io::canonical(task.to_json()) + "\n");
    write_corpus_file(out / "corpus.sptc", corpus, vocab.size());
    result.model.save(out / "model.sprb");
    write_jsonl_dataset(out / "data" / "train.jsonl", splits.train, task.task_id);
    write_jsonl_dataset(out / "data" / "val.jsonl", splits.val, task.task_id);
    write_jsonl_dataset(out / "data" / "test.jsonl", splits.test, task.task_id);

    json demos = json::array();
    for (std::size_t i = 1; i < all_tasks.size(); ++i) {
        Demonstration d;
        d.description_text = all_tasks[i].description_text;
        d.class_labels = all_tasks[i].class_labels;
        demos.push_back(d.to_json());
    }
    io::write_text_file(out / "demos.json", io::canonical(demos) + "\n");

    ReferenceSet refs;
    refs.task_id = task.task_id;
    refs.class_labels = task.class_labels;
    refs.references = make_reference_texts(task);
    io::write_text_file(out / "references.json", io::canonical(refs.to_json()) + "\n");

    std::string log_csv = "step,loss\n";
    for (const auto& e : result.log)
        log_csv += std::to_string(e.step) + "," + io::csv_number(e.loss) + "\n";
    io::write_text_file(out / "pretrain-log.csv", log_csv);

    for (const char* name : {"vocab.json", "task.json", "corpus.sptc", "model.sprb",
                             "demos.json", "references.json", "pretrain-log.csv"})
        manifest.add_output(out / name);
    for (const char* name : {"train.jsonl", "val.jsonl", "test.jsonl"})
        manifest.add_output(out / "data" / name);
    manifest.finished_at = iso_utc_now();
    manifest.write(out);
}

void cmd_tune(const Config& cfg, const fs::path& config_path, const fs::path& out,
              std::optional<std::uint64_t> seed) {
    const WorldArtifacts w = load_world(out);
    const auto train =
        load_phase([&] { return read_jsonl_dataset(out / "data" / "train.jsonl"); });

    const std::uint64_t run_seed = seed.value_or(cfg.tune.seed);
    ContinuousPrompt prompt = init_prompt(cfg.prompt_length, w.model.cfg.hidden_dim, run_seed);
    prompt.task_id = w.task.task_id;
    TuneConfig tc = cfg.tune;
    tc.seed = run_seed;

    const CheckpointSet set =
        train_prompt(w.model, prompt, train, w.task.class_labels, tc, w.vocab);

    const fs::path rdir = run_dir(out, run_seed);
    fs::create_directories(rdir);
    save_checkpoint_set(rdir / "checkpoints", set);

    json run_info;
    run_info["run_id"] = "run-" + std::to_string(run_seed);
    run_info["seed"] = run_seed;
    run_info["prompt_length"] = cfg.prompt_length;
    run_info["aborted"] = set.aborted;
    run_info["abort_reason"] = set.abort_reason;
    run_info["checkpoints"] = set.checkpoints.size();
    io::write_text_file(rdir / "run.json", io::canonical(run_info) + "\n");

    RunManifest manifest;
    manifest.command = "tune";
    manifest.config_path = config_path.string();
    manifest.seed = run_seed;
    manifest.started_at = iso_utc_now();
    manifest.add_input(config_path);
    manifest.add_input(out / "model.sprb");
    manifest.add_input(out / "data" / "train.jsonl");
    for (const auto& p : set.checkpoints)
        manifest.add_output(rdir / "checkpoints" / ("step-" + std::to_string(p.step) + ".spck"));
    manifest.add_output(rdir / "run.json");
    manifest.finished_at = iso_utc_now();
    manifest.write(rdir);

    std::cerr << "run-" << run_seed << ": " << set.checkpoints.size() << " checkpoints, "
              << (set.aborted ? "aborted: " + set.abort_reason : "ok") << "\n";
}

void cmd_accuracy(const Config& cfg, const fs::path& config_path, const fs::path& out,
                  std::optional<std::uint64_t> seed) {
    const WorldArtifacts w = load_world(out);
    const std::uint64_t run_seed = seed.value_or(cfg.tune.seed);
    const fs::path rdir = run_dir(out, run_seed);
    const auto checkpoints = load_run_checkpoints(rdir);
    const auto val = load_phase([&] { return read_jsonl_dataset(out / "data" / "val.jsonl"); });
    const auto test = load_phase([&] { return read_jsonl_dataset(out / "data" / "test.jsonl"); });

    struct Row {
        std::uint64_t step;
        double val_acc, test_acc;
    };
    std::vector<Row> rows(checkpoints.size());
    parallel_for(checkpoints.size(), [&](std::size_t i) {
        rows[i] = {checkpoints[i].step,
                   task_accuracy(w.model, checkpoints[i], val, w.task.class_labels, w.vocab),
                   task_accuracy(w.model, checkpoints[i], test, w.task.class_labels, w.vocab)};
    });

    std::string csv = "step,split,accuracy\n";
    for (const auto& r : rows) {
        csv += std::to_string(r.step) + ",test," + io::csv_number(r.test_acc) + "\n";
        csv += std::to_string(r.step) + ",val," + io::csv_number(r.val_acc) + "\n";
    }
    io::write_text_file(rdir / "accuracy.csv", csv);

    RunManifest manifest;
    manifest.command = "accuracy";
    manifest.config_path = config_path.string();
    manifest.seed = run_seed;
    manifest.started_at = iso_utc_now();
    manifest.add_input(out / "model.sprb");
    manifest.add_output(rdir / "accuracy.csv");
    manifest.finished_at = iso_utc_now();
    manifest.write(rdir);

    std::cerr << "run-" << run_seed << ": accuracy over " << checkpoints.size()
              << " checkpoints\n";
}

struct ElicitRow {
    std::string run_id;
    int target_prompt_index;
    ElicitationResult result;

    json to_json() const {
        json j = result.to_json();
        j["run_id"] = run_id;
        j["target_prompt"] = target_prompt_index;
        return j;
    }
};

void cmd_elicit(const Config& cfg, const fs::path& config_path, const fs::path& out,
                std::optional<std::uint64_t> seed, bool sweep_flag,
                const std::string& variant) {
    const WorldArtifacts w = load_world(out);
    const std::uint64_t run_seed = seed.value_or(cfg.tune.seed);
    const fs::path rdir = run_dir(out, run_seed);
    const auto checkpoints = load_run_checkpoints(rdir);
    const std::string run_id = "run-" + std::to_string(run_seed);
    const int n = checkpoints.front().length;

    std::vector<TargetPromptSpec> specs;
    if (variant == "listing") {
        const auto pool = load_demo_pool(out);
        for (int j = 0; j < 3; ++j) {
            TargetPromptSpec spec;
            spec.variant = TargetPromptVariant::Listing;
            spec.demonstrations = sample_demonstrations(pool, cfg.num_demos, cfg.demo_seed + j);
            spec.placeholder_count = n;
            spec.id = "tp-" + std::to_string(j);
            specs.push_back(spec);
        }
    } else if (variant == "feature-probe") {
        TargetPromptSpec spec;
        spec.variant = TargetPromptVariant::FeatureProbe;
        spec.placeholder_count = n;
        spec.id = "probe";
        specs.push_back(spec);
    } else {
        throw std::invalid_argument("unknown elicit variant: " + variant);
    }

    const bool sweep = sweep_flag || cfg.sweep;
    const std::vector<std::pair<int, int>> grid =
        sweep ? identity_layer_grid(w.model)
              : std::vector<std::pair<int, int>>{{cfg.source_layer, cfg.target_layer}};

    struct Job {
        std::size_t ckpt;
        std::size_t spec;
        std::pair<int, int> layers;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < checkpoints.size(); ++c)
        for (std::size_t s = 0; s < specs.size(); ++s)
            for (const auto& g : grid) jobs.push_back({c, s, g});

    std::vector<ElicitRow> rows(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) {
        const Job& job = jobs[i];
        rows[i] = {run_id, static_cast<int>(job.spec),
                   elicit(w.model, checkpoints[job.ckpt], specs[job.spec], job.layers.first,
                          job.layers.second, cfg.budget, w.vocab)};
    });

    std::string jsonl;
    for (const auto& r : rows) jsonl += io::canonical(r.to_json()) + "\n";
    const fs::path out_file =
        rdir / (variant == "listing" ? "elicitations.jsonl" : "probes.jsonl");
    io::write_text_file(out_file, jsonl);

    RunManifest manifest;
    manifest.command = std::string("elicit-") + variant;
    manifest.config_path = config_path.string();
    manifest.seed = run_seed;
    manifest.started_at = iso_utc_now();
    manifest.add_input(out / "model.sprb");
    manifest.add_output(out_file);
    manifest.finished_at = iso_utc_now();
    manifest.write(rdir);

    std::cerr << run_id << ": " << rows.size() << " elicitations (" << variant << ")\n";
}

void cmd_score(const Config& cfg, const fs::path& config_path, const fs::path& out,
               std::optional<std::uint64_t> seed) {
    const std::uint64_t run_seed = seed.value_or(cfg.tune.seed);
    const fs::path rdir = run_dir(out, run_seed);
    const std::string run_id = "run-" + std::to_string(run_seed);

    const ReferenceSet refs = load_phase([&] {
        return ReferenceSet::from_json(json::parse(io::read_text_file(out / "references.json")));
    });
    const auto accuracy = load_phase([&] { return load_accuracy_csv(rdir / "accuracy.csv"); });
    const auto rows = load_phase([&] {
        std::vector<ElicitRow> rows;
        std::istringstream is(io::read_text_file(rdir / "elicitations.jsonl"));
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            rows.push_back({j.at("run_id").get<std::string>(), j.at("target_prompt").get<int>(),
                            ElicitationResult::from_json(j)});
        }
        return rows;
    });
    const int prompt_length = load_phase([&] {
        return json::parse(io::read_text_file(rdir / "run.json"))
            .at("prompt_length")
            .get<int>();
    });

    // group by (step, layer pair); each group must hold one result per
    // target prompt, in index order
    std::map<std::pair<std::uint64_t, std::pair<int, int>>, std::vector<ElicitationResult>>
        groups;
    for (const auto& r : rows) {
        auto& slot = groups[{r.result.checkpoint_step,
                             {r.result.source_layer, r.result.target_layer}}];
        if (slot.size() <= static_cast<std::size_t>(r.target_prompt_index))
            slot.resize(r.target_prompt_index + 1);
        slot[r.target_prompt_index] = r.result;
    }

    // per checkpoint keep the layer pair with the best mean of the two scores
    std::map<std::uint64_t, ScoreRecord> best;
    std::map<std::uint64_t, std::pair<int, int>> best_layers;
    for (const auto& [key, results] : groups) {
        ScoreRecord rec = interpretability(results, refs);
        rec.run_id = run_id;
        rec.prompt_length = prompt_length;
        const auto acc_it = accuracy.find({key.first, cfg.accuracy_split});
        if (acc_it == accuracy.end())
            throw std::runtime_error("score: no " + cfg.accuracy_split +
                                     " accuracy for step " + std::to_string(key.first));
        rec.accuracy = acc_it->second;
        rec.checkpoint_step = key.first;
        auto it = best.find(key.first);
        const double score = (rec.class_rate_mean + rec.rouge1_mean) / 2.0;
        if (it == best.end() ||
            score > (it->second.class_rate_mean + it->second.rouge1_mean) / 2.0) {
            best[key.first] = rec;
            best_layers[key.first] = key.second;
        }
    }

    std::string csv = "run_id,step,accuracy,source_layer,target_layer,class_rate,rouge1\n";
    std::string jsonl;
    for (const auto& [step, rec] : best) {
        const auto layers = best_layers.at(step);
        csv += run_id + "," + std::to_string(step) + "," + io::csv_number(rec.accuracy) + "," +
               std::to_string(layers.first) + "," + std::to_string(layers.second) + "," +
               io::csv_number(rec.class_rate_mean) + "," + io::csv_number(rec.rouge1_mean) +
               "\n";
        json j = rec.to_json();
        j["source_layer"] = layers.first;
        j["target_layer"] = layers.second;
        jsonl += io::canonical(j) + "\n";
    }
    io::write_text_file(rdir / "scores.csv", csv);
    io::write_text_file(rdir / "scores.jsonl", jsonl);

    RunManifest manifest;
    manifest.command = "score";
    manifest.config_path = config_path.string();
    manifest.seed = run_seed;
    manifest.started_at = iso_utc_now();
    manifest.add_input(rdir / "elicitations.jsonl");
    manifest.add_input(out / "references.json");
    manifest.add_output(rdir / "scores.csv");
    manifest.add_output(rdir / "scores.jsonl");
    manifest.finished_at = iso_utc_now();
    manifest.write(rdir);

    std::cerr << run_id << ": scored " << best.size() << " checkpoints\n";
}

std::vector<fs::path> discover_runs(const fs::path& out) {
    std::vector<fs::path> dirs;
    const fs::path base = out / "runs";
    if (fs::exists(base))
        for (const auto& e : fs::directory_iterator(base))
            if (e.is_directory() && e.path().filename().string().rfind("run-", 0) == 0)
                dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

void cmd_bias(const Config& cfg, const fs::path& config_path, const fs::path& out,
              std::optional<std::uint64_t> seed) {
    Config c = cfg;
    if (seed) c.group_seed = *seed;
    const WorldArtifacts w = load_world(out);
    if (w.task.bias_map.empty())
        throw std::runtime_error("bias: task has no planted bias words (world.with_bias=false)");
    const auto test = load_phase([&] { return read_jsonl_dataset(out / "data" / "test.jsonl"); });

    const auto run_dirs = discover_runs(out);
    if (run_dirs.empty()) throw std::runtime_error("bias: no tuned runs under " +
                                                   (out / "runs").string());

    std::vector<BiasRunInput> runs(run_dirs.size());
    TargetPromptSpec probe;
    probe.variant = TargetPromptVariant::FeatureProbe;
    probe.id = "probe";

    for (std::size_t r = 0; r < run_dirs.size(); ++r) {
        runs[r].run_id = run_dirs[r].filename().string();
        runs[r].checkpoints = load_run_checkpoints(run_dirs[r]);
        runs[r].probe_texts.resize(runs[r].checkpoints.size());
    }
    // flatten (run, checkpoint) jobs for the probe elicitations
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t r = 0; r < runs.size(); ++r)
        for (std::size_t i = 0; i < runs[r].checkpoints.size(); ++i) jobs.push_back({r, i});
    parallel_for(jobs.size(), [&](std::size_t k) {
        const auto [r, i] = jobs[k];
        TargetPromptSpec spec = probe;
        spec.placeholder_count = runs[r].checkpoints[i].length;
        runs[r].probe_texts[i] =
            elicit(w.model, runs[r].checkpoints[i], spec, c.source_layer, c.target_layer,
                   c.budget, w.vocab)
                .description_text;
    });

    std::vector<std::pair<std::string, std::string>> biased_words;
    for (const auto& [cls, word] : w.task.bias_map) biased_words.emplace_back(word, cls);

    const std::string probe_text_full =
        build_target_prompt(w.model,
                            [&] {
                                TargetPromptSpec s = probe;
                                s.placeholder_count = runs[0].checkpoints[0].length;
                                return s;
                            }(),
                            w.vocab)
            .text;

    const BiasReport report = bias_report(w.model, w.vocab, w.task.class_labels, test, runs,
                                          biased_words, probe_text_full, c.group_seed);

    io::write_text_file(out / "bias.json", io::canonical(report.to_json()) + "\n");
    io::write_text_file(out / "count-deltas.csv", count_deltas_csv(report));
    io::write_text_file(out / "aggregate-deltas.csv", aggregate_deltas_csv(report));
    io::write_text_file(out / "measurements.csv", measurements_csv(report));

    std::string probes_jsonl;
    for (const auto& run : runs)
        for (std::size_t i = 0; i < run.checkpoints.size(); ++i) {
            json j;
            j["run_id"] = run.run_id;
            j["step"] = run.checkpoints[i].step;
            j["text"] = run.probe_texts[i];
            probes_jsonl += io::canonical(j) + "\n";
        }
    io::write_text_file(out / "probes.jsonl", probes_jsonl);

    RunManifest manifest;
    manifest.command = "bias";
    manifest.config_path = config_path.string();
    manifest.seed = c.group_seed;
    manifest.started_at = iso_utc_now();
    manifest.add_input(out / "model.sprb");
    for (const char* name : {"bias.json", "count-deltas.csv", "aggregate-deltas.csv",
                             "measurements.csv", "probes.jsonl"})
        manifest.add_output(out / name);
    manifest.finished_at = iso_utc_now();
    manifest.write(out);

    std::cerr << "bias: " << runs.size() << " runs, sign test p=" << report.sign_test_p
              << (report.sufficient_data ? "" : " (insufficient data)") << "\n";
}

void cmd_report(const Config& cfg, const fs::path& config_path, const fs::path& out) {
    std::vector<ScoreRecord> records;
    for (const auto& rdir : discover_runs(out)) {
        const fs::path scores = rdir / "scores.jsonl";
        if (!fs::exists(scores)) continue;
        load_phase([&] {
            std::istringstream is(io::read_text_file(scores));
            std::string line;
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                records.push_back(ScoreRecord::from_json(json::parse(line)));
            }
            return 0;
        });
    }
    if (records.empty()) throw std::runtime_error("report: no score records under " +
                                                  (out / "runs").string());

    const TrendTable table = build_trend_table(records, cfg.bin_width);
    io::write_text_file(out / "trend.csv", trend_csv(table));
    io::write_text_file(out / "trend.svg", trend_svg(table));

    std::vector<double> acc, interp;
    for (const auto& r : records) {
        acc.push_back(r.accuracy);
        interp.push_back((r.class_rate_mean + r.rouge1_mean) / 2.0);
    }
    json summary;
    summary["records"] = records.size();
    summary["bin_width"] = cfg.bin_width;
    try {
        const SpearmanResult sp = spearman(acc, interp);
        summary["spearman_rho"] = sp.rho;
        summary["spearman_p_one_sided"] = sp.p_value;
    } catch (const std::exception& e) {
        summary["spearman_error"] = e.what();
    }
    io::write_text_file(out / "summary.json", io::canonical(summary) + "\n");

    RunManifest manifest;
    manifest.command = "report";
    manifest.config_path = config_path.string();
    manifest.started_at = iso_utc_now();
    for (const char* name : {"trend.csv", "trend.svg", "summary.json"})
        manifest.add_output(out / name);
    manifest.finished_at = iso_utc_now();
    manifest.write(out);

    std::cerr << "report: " << records.size() << " score records\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continuous-prompt interpretation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "pipeline configuration JSON")->required();
    app.add_option("--out", out_dir, "artifact directory")->required();
    app.add_option("--seed", seed, "override the subcommand's primary seed");
    app.add_option("--jobs", g_jobs, "parallel fan-out for independent work items")
        ->default_val(1);

    auto* sub_pretrain = app.add_subcommand("pretrain", "build the world and train the base model");
    auto* sub_tune = app.add_subcommand("tune", "train a continuous prompt with checkpoints");
    auto* sub_accuracy = app.add_subcommand("accuracy", "score checkpoints on the datasets");
    auto* sub_elicit = app.add_subcommand("elicit", "decode descriptions from checkpoints");
    bool sweep_flag = false;
    std::string variant = "listing";
    sub_elicit->add_flag("--sweep", sweep_flag, "elicit at every identity layer pair");
    sub_elicit->add_option("--variant", variant, "listing | feature-probe")
        ->check(CLI::IsMember({"listing", "feature-probe"}));
    auto* sub_score = app.add_subcommand("score", "compute interpretability scores");
    auto* sub_bias = app.add_subcommand("bias", "run the planted-bias diagnostics");
    auto* sub_report = app.add_subcommand("report", "aggregate trend tables and charts");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", std::string("usage: ") + e.what()}, {"exit_code", 2}}.dump()
                  << "\n";
        return 2;
    }

    Config cfg;
    try {
        cfg = parse_config(config_path);
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"exit_code", 3}}.dump() << "\n";
        return 3;
    }

    const fs::path out(out_dir);
    try {
        if (sub_pretrain->parsed())
            cmd_pretrain(cfg, config_path, out, seed);
        else if (sub_tune->parsed())
            cmd_tune(cfg, config_path, out, seed);
        else if (sub_accuracy->parsed())
            cmd_accuracy(cfg, config_path, out, seed);
        else if (sub_elicit->parsed())
            cmd_elicit(cfg, config_path, out, seed, sweep_flag, variant);
        else if (sub_score->parsed())
            cmd_score(cfg, config_path, out, seed);
        else if (sub_bias->parsed())
            cmd_bias(cfg, config_path, out, seed);
        else if (sub_report->parsed())
            cmd_report(cfg, config_path, out);
    } catch (const MalformedInput& e) {
        std::cerr << json{{"error", e.what()}, {"exit_code", 3}}.dump() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"exit_code", 1}}.dump() << "\n";
        return 1;
    }
    return 0;
}
