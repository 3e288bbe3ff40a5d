#include "mmrg/experiment.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "mmrg/ddim.hpp"
#include "mmrg/denoiser.hpp"
#include "mmrg/error.hpp"
#include "mmrg/merge_core.hpp"
#include "mmrg/trainer.hpp"

namespace mmrg {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    const std::string s = trim(text);
    T value{};
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (s.empty() || ec != std::errc() || ptr != end) {
        throw config_error("config key '" + key + "': cannot parse '" + text + "'");
    }
    return value;
}

double parse_real(const std::string& key, const std::string& text) {
    const std::string s = trim(text);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
        throw config_error("config key '" + key + "': cannot parse '" + text + "' as a finite number");
    }
    return v;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string hex64(uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F f) {
    std::string out;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ",";
        out += f(xs[i]);
    }
    return out;
}

struct key_def {
    std::string key;
    std::function<void(experiment_config&, const std::string&)> set;
    std::function<std::string(const experiment_config&)> get;
};

template <class T>
key_def int_key(const std::string& key, T experiment_config::*field) {
    return {key, [key, field](experiment_config& c, const std::string& v) { c.*field = parse_number<T>(key, v); },
            [field](const experiment_config& c) { return std::to_string(c.*field); }};
}

key_def real_key(const std::string& key, double experiment_config::*field) {
    return {key, [key, field](experiment_config& c, const std::string& v) { c.*field = parse_real(key, v); },
            [field](const experiment_config& c) { return fmt(c.*field); }};
}

const std::vector<key_def>& key_table() {
    static const std::vector<key_def> table = {
        {"workdir", [](experiment_config& c, const std::string& v) { c.workdir = trim(v); },
         [](const experiment_config& c) { return c.workdir.string(); }},
        int_key("frames", &experiment_config::frames),
        int_key("dim", &experiment_config::dim),
        int_key("hidden", &experiment_config::hidden),
        int_key("time_dim", &experiment_config::time_dim),
        int_key("T", &experiment_config::T),
        {"schedule", [](experiment_config& c, const std::string& v) { c.schedule = parse_schedule_kind(trim(v)); },
         [](const experiment_config& c) { return to_string(c.schedule); }},
        int_key("pretrain_clips", &experiment_config::pretrain_clips),
        int_key("finetune_clips", &experiment_config::finetune_clips),
        real_key("pretrain_motion", &experiment_config::pretrain_motion),
        real_key("finetune_motion", &experiment_config::finetune_motion),
        int_key("data_seed", &experiment_config::data_seed),
        real_key("lr", &experiment_config::lr),
        int_key("batch", &experiment_config::batch),
        int_key("pretrain_steps", &experiment_config::pretrain_steps),
        int_key("finetune_steps", &experiment_config::finetune_steps),
        real_key("cond_dropout", &experiment_config::cond_dropout),
        int_key("train_seed", &experiment_config::train_seed),
        int_key("adapter_seed", &experiment_config::adapter_seed),
        real_key("alpha", &experiment_config::alpha),
        real_key("p", &experiment_config::p),
        int_key("seed1", &experiment_config::seed1),
        int_key("seed2", &experiment_config::seed2),
        real_key("w_deg", &experiment_config::w_deg),
        real_key("w_adt", &experiment_config::w_adt),
        int_key("steps", &experiment_config::steps),
        real_key("cfg_scale", &experiment_config::cfg_scale),
        int_key("switch_k", &experiment_config::switch_k),
        {"strategy", [](experiment_config& c, const std::string& v) { c.strategy = parse_strategy(trim(v)); },
         [](const experiment_config& c) { return to_string(c.strategy); }},
        int_key("n", &experiment_config::n),
        int_key("eval_seed", &experiment_config::eval_seed),
        {"seeds",
         [](experiment_config& c, const std::string& v) {
             c.seeds.clear();
             for (const auto& s : split_list(v)) c.seeds.push_back(parse_number<uint64_t>("seeds", s));
         },
         [](const experiment_config& c) { return join(c.seeds, [](uint64_t s) { return std::to_string(s); }); }},
        {"eval_magnitude",
         [](experiment_config& c, const std::string& v) { c.eval_magnitude = parse_magnitude(trim(v)); },
         [](const experiment_config& c) { return to_string(c.eval_magnitude); }},
        {"model", [](experiment_config& c, const std::string& v) { c.model = trim(v); },
         [](const experiment_config& c) { return c.model; }},
        int_key("threads", &experiment_config::threads),
        {"alphas",
         [](experiment_config& c, const std::string& v) {
             c.alphas.clear();
             for (const auto& s : split_list(v)) c.alphas.push_back(parse_real("alphas", s));
         },
         [](const experiment_config& c) { return join(c.alphas, fmt_short); }},
        {"ks",
         [](experiment_config& c, const std::string& v) {
             c.ks.clear();
             for (const auto& s : split_list(v)) c.ks.push_back(parse_number<int>("ks", s));
         },
         [](const experiment_config& c) { return join(c.ks, [](int k) { return std::to_string(k); }); }},
        {"taylor_alphas",
         [](experiment_config& c, const std::string& v) {
             c.taylor_alphas.clear();
             for (const auto& s : split_list(v)) c.taylor_alphas.push_back(parse_real("taylor_alphas", s));
         },
         [](const experiment_config& c) { return join(c.taylor_alphas, fmt_short); }},
        real_key("fd_step", &experiment_config::fd_step),
        int_key("taylor_n", &experiment_config::taylor_n),
        int_key("taylor_steps", &experiment_config::taylor_steps),
    };
    return table;
}

const key_def& find_key(const std::string& key) {
    for (const auto& k : key_table()) {
        if (k.key == key) return k;
    }
    throw config_error("unknown config key '" + key + "'");
}

const std::vector<std::string> model_names = {"pre", "sft", "dyn", "dyn_star", "con_star", "decoupled"};

// Rethrows `e` with the stage name prefixed, keeping its category.
[[noreturn]] void rethrow_in_stage(const std::string& stage) {
    try {
        throw;
    } catch (const config_error& e) {
        throw config_error("stage " + stage + ": " + e.what());
    } catch (const numeric_error& e) {
        throw numeric_error("stage " + stage + ": " + e.what());
    } catch (const missing_artifact& e) {
        throw missing_artifact("stage " + stage + ": " + e.what());
    } catch (const format_error& e) {
        throw format_error("stage " + stage + ": " + e.what());
    } catch (const std::exception& e) {
        throw error("stage " + stage + ": " + e.what());
    }
}

tensor_map require_checkpoint(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) {
        throw missing_artifact("missing artifact " + p.string() + " (run the producing command first)");
    }
    return load_checkpoint(p);
}

tensor_map require_container(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) {
        throw missing_artifact("missing artifact " + p.string() + " (run gen-data first)");
    }
    return read_container(p);
}

const std::vector<std::string> report_header = {"model_stage", "metric", "value", "n", "seed_hash"};

// One row per metric.
std::string report_rows(const std::string& stage, const eval_report& r) {
    const std::string n = std::to_string(r.n_samples);
    const std::string h = hex64(seed_hash(r.seed_set));
    return csv_row({stage, "motion_degree", fmt(r.motion_degree), n, h}) +
           csv_row({stage, "consistency", fmt(r.consistency), n, h}) +
           csv_row({stage, "control_adherence", fmt(r.control_adherence), n, h});
}

} // namespace

std::vector<int> experiment_config::effective_ks() const {
    if (!ks.empty()) return ks;
    return {0, steps / 4, steps / 2, steps};
}

std::vector<uint64_t> experiment_config::eval_seeds() const {
    return seeds.empty() ? seed_range(eval_seed, n) : seeds;
}

void experiment_config::validate() const {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw config_error(msg);
    };
    need(!workdir.empty(), "workdir must not be empty");
    need(frames >= 2, "frames must be >= 2");
    need(dim > latent_code::features, "dim must exceed " + std::to_string(latent_code::features));
    need(hidden >= 1, "hidden must be >= 1");
    need(time_dim >= 2 && time_dim % 2 == 0, "time_dim must be even and >= 2");
    need(T >= 1, "T must be >= 1");
    need(pretrain_clips >= 1 && finetune_clips >= 1, "clip counts must be >= 1");
    need(pretrain_motion >= 0.0 && finetune_motion >= 0.0, "motion magnitudes must be >= 0");
    need(lr > 0.0, "lr must be > 0");
    need(batch >= 1, "batch must be >= 1");
    need(pretrain_steps >= 0 && finetune_steps >= 0, "training steps must be >= 0");
    need(cond_dropout >= 0.0 && cond_dropout <= 1.0, "cond_dropout must lie in [0, 1]");
    need(alpha >= 0.0, "alpha must be >= 0");
    need(p >= 0.0 && p < 1.0, "p must lie in [0, 1)");
    need(steps >= 1 && steps <= T, "steps must lie in [1, T]");
    need(switch_k >= -1 && effective_k() <= steps, "switch_k must lie in [0, steps] (or -1 for steps/2)");
    need(n >= 1 || !seeds.empty(), "n must be >= 1");
    need(threads >= 1, "threads must be >= 1");
    bool known = false;
    for (const auto& m : model_names) known = known || m == model;
    need(known, "model must be one of pre, sft, dyn, dyn_star, con_star, decoupled; got '" + model + "'");
    need(!alphas.empty(), "alphas must not be empty");
    for (double a : alphas) need(a >= 0.0, "alphas must be >= 0");
    for (int k : effective_ks()) need(k >= 0 && k <= steps, "ks must lie in [0, steps]");
    need(!taylor_alphas.empty(), "taylor_alphas must not be empty");
    need(fd_step > 0.0, "fd_step must be > 0");
    need(taylor_n >= 1, "taylor_n must be >= 1");
    need(taylor_steps >= 1 && taylor_steps <= T, "taylor_steps must lie in [1, T]");
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& d : key_table()) k.push_back(d.key);
        return k;
    }();
    return keys;
}

void set_config_value(experiment_config& cfg, const std::string& key, const std::string& value) {
    find_key(key).set(cfg, value);
}

std::string get_config_value(const experiment_config& cfg, const std::string& key) {
    return find_key(key).get(cfg);
}

experiment_config parse_config(const std::string& text, experiment_config base) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        try {
            set_config_value(base, key, line.substr(eq + 1));
        } catch (const config_error& e) {
            throw config_error("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return base;
}

experiment_config load_config(const std::filesystem::path& path, experiment_config base) {
    std::ifstream in(path);
    if (!in) {
        throw config_error("cannot read config file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string dump_config(const experiment_config& cfg) {
    std::string out;
    for (const auto& k : key_table()) {
        out += k.key + " = " + k.get(cfg) + "\n";
    }
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string csv_row(const std::vector<std::string>& fields) {
    std::string out;
    for (size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ",";
        out += csv_field(fields[i]);
    }
    return out + "\r\n";
}

experiment::experiment(experiment_config cfg, std::ostream* log) : cfg_(std::move(cfg)), log_(log) {
    cfg_.validate();
    sched_ = build_schedule(cfg_.T, cfg_.schedule);
}

void experiment::say(const std::string& line) const {
    if (log_) *log_ << line << std::endl;
}

eval_plan experiment::make_plan() const {
    eval_plan plan;
    plan.seeds = cfg_.eval_seeds();
    plan.magnitude = cfg_.eval_magnitude;
    plan.threads = cfg_.threads;
    return plan;
}

switch_schedule experiment::make_switch(int k) const {
    switch_schedule s{cfg_.steps, k, cfg_.strategy};
    s.validate();
    return s;
}

model_pair experiment::load_pair() const {
    return model_pair(require_checkpoint(path(artifact::dyn_star)), require_checkpoint(path(artifact::con_star)));
}

void experiment::write_text(const char* name, const std::string& text) const {
    std::filesystem::create_directories(cfg_.workdir);
    const auto p = path(name);
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) {
        throw error("cannot write " + p.string());
    }
    say("wrote " + p.string());
}

void experiment::gen_data() {
    std::filesystem::create_directories(cfg_.workdir);
    corpus_spec pre;
    pre.count = cfg_.pretrain_clips;
    pre.frames = cfg_.frames;
    pre.dim = cfg_.dim;
    pre.motion_magnitude = cfg_.pretrain_motion;
    pre.conditioned = false;
    pre.label = magnitude_class::high;
    pre.seed = cfg_.data_seed;
    write_container(corpus_to_tensor_map(gen_corpus(pre), pre), path(artifact::pretrain_corpus));

    corpus_spec ft = pre;
    ft.count = cfg_.finetune_clips;
    ft.motion_magnitude = cfg_.finetune_motion;
    ft.conditioned = true;
    ft.label = magnitude_class::low;
    ft.seed = cfg_.data_seed + 1;
    write_container(corpus_to_tensor_map(gen_corpus(ft), ft), path(artifact::finetune_corpus));
    say("wrote " + path(artifact::pretrain_corpus).string() + " and " + path(artifact::finetune_corpus).string());
}

void experiment::pretrain() {
    const auto corpus = corpus_from_tensor_map(require_container(path(artifact::pretrain_corpus)));
    denoiser_spec spec;
    spec.frames = cfg_.frames;
    spec.dim = cfg_.dim;
    spec.hidden = cfg_.hidden;
    spec.time_dim = cfg_.time_dim;
    train_config tc;
    tc.lr = cfg_.lr;
    tc.batch = cfg_.batch;
    tc.steps = cfg_.pretrain_steps;
    tc.seed = cfg_.train_seed;
    tc.cond_dropout = cfg_.cond_dropout;
    tc.trainable = trainable_set::all;
    const auto r = train(spec, corpus, sched_, tc);
    save_checkpoint(r.params.to_tensor_map({{"stage", "pretrained"}, {"model_id", "pre"}}), path(artifact::pre));
    say("pretrain: loss " + fmt_short(r.initial_loss) + " -> " + fmt_short(r.final_loss) + ", wrote " +
        path(artifact::pre).string());
}

void experiment::finetune() {
    const auto corpus = corpus_from_tensor_map(require_container(path(artifact::finetune_corpus)));
    const auto pre = param_set::from_tensor_map(require_checkpoint(path(artifact::pre)));
    train_config tc;
    tc.lr = cfg_.lr;
    tc.batch = cfg_.batch;
    tc.steps = cfg_.finetune_steps;
    tc.seed = cfg_.train_seed + 2;
    tc.cond_dropout = cfg_.cond_dropout;
    tc.trainable = trainable_set::adapter_and_temporal;
    const auto r = train_from(attach_adapter(pre, cfg_.adapter_seed), corpus, sched_, tc);
    save_checkpoint(r.params.to_tensor_map({{"stage", "sft"}, {"model_id", "sft"}}), path(artifact::sft));
    say("finetune: loss " + fmt_short(r.initial_loss) + " -> " + fmt_short(r.final_loss) + ", wrote " +
        path(artifact::sft).string());
}

void experiment::extrapolate() {
    const auto pre = require_checkpoint(path(artifact::pre));
    const auto sft = require_checkpoint(path(artifact::sft));
    const auto part = validate_compatibility(sft, pre);
    save_checkpoint(mmrg::extrapolate(pre, sft, cfg_.alpha, part), path(artifact::dyn));
    say("extrapolate: alpha " + fmt_short(cfg_.alpha) + ", wrote " + path(artifact::dyn).string());
}

void experiment::dare() {
    const auto pre = require_checkpoint(path(artifact::pre));
    const auto sft = require_checkpoint(path(artifact::sft));
    const auto part = validate_compatibility(sft, pre);
    const auto pruned = dare_prune(delta(sft, pre, part), cfg_.p, cfg_.seed2);
    save_checkpoint(to_tensor_map(pruned), path(artifact::dare));
    say("dare: p " + fmt_short(cfg_.p) + ", wrote " + path(artifact::dare).string());
}

void experiment::isolate() {
    const auto pre = require_checkpoint(path(artifact::pre));
    const auto sft = require_checkpoint(path(artifact::sft));
    const auto dyn = require_checkpoint(path(artifact::dyn));
    const auto part = validate_compatibility(sft, pre);
    const auto sets = isolate_parameter_sets(pre, sft, dyn, part, cfg_.p, cfg_.seed1, cfg_.seed2);
    save_checkpoint(to_tensor_map(sets.theta_adt), path(artifact::adt));
    save_checkpoint(to_tensor_map(sets.theta_deg), path(artifact::deg));
    save_checkpoint(to_tensor_map(sets.theta_con), path(artifact::con));
    say("isolate: wrote adt, deg and con sets");
}

void experiment::build_enhanced() {
    const auto pre = require_checkpoint(path(artifact::pre));
    isolated_sets sets;
    sets.theta_adt = from_tensor_map(require_checkpoint(path(artifact::adt)));
    sets.theta_deg = from_tensor_map(require_checkpoint(path(artifact::deg)));
    sets.theta_con = from_tensor_map(require_checkpoint(path(artifact::con)));
    const auto models = build_enhanced_models(pre, sets, cfg_.w_deg, cfg_.w_adt);
    save_checkpoint(models.theta_dyn_star, path(artifact::dyn_star));
    save_checkpoint(models.theta_con_star, path(artifact::con_star));
    say("build-enhanced: wrote " + path(artifact::dyn_star).string() + " and " + path(artifact::con_star).string());
}

namespace {

void write_samples(const std::filesystem::path& p, const std::string& model, const eval_plan& plan,
                   const std::vector<latent_video>& videos) {
    tensor_map out;
    out.meta["kind"] = "samples";
    out.meta["model"] = model;
    for (size_t i = 0; i < videos.size(); ++i) {
        const auto& v = videos[i];
        tensor t({v.frames(), v.dim()});
        for (Eigen::Index j = 0; j < v.data.size(); ++j) {
            t.data[static_cast<size_t>(j)] = static_cast<float>(v.data.data()[j]);
        }
        char name[48];
        std::snprintf(name, sizeof(name), "sample.%05zu", i);
        out.entries.emplace(name, std::move(t));
        const auto cmd = plan.commands[i % plan.commands.size()];
        out.meta[std::string("label.") + name] = to_string(cmd) + ":" + to_string(plan.magnitude) + ":" +
                                                 std::to_string(plan.seeds[i]);
    }
    write_container(out, p);
}

} // namespace

void experiment::sample() {
    if (cfg_.model == "decoupled") {
        sample_decoupled();
        return;
    }
    const auto theta = param_set::from_tensor_map(require_checkpoint(cfg_.workdir / (cfg_.model + ".mmrg")));
    const auto plan = make_plan();
    std::vector<latent_video> videos;
    for (size_t i = 0; i < plan.seeds.size(); ++i) {
        const auto cond = make_condition(plan.commands[i % plan.commands.size()], plan.magnitude, cfg_.dim);
        videos.push_back(ddim_sample(theta, sched_, &cond, cfg_.steps, cfg_.cfg_scale, plan.seeds[i]));
    }
    const auto out = cfg_.workdir / ("samples_" + cfg_.model + ".mmrg");
    write_samples(out, cfg_.model, plan, videos);
    say("sample: wrote " + std::to_string(videos.size()) + " videos to " + out.string());
}

void experiment::sample_decoupled() {
    const auto pair = load_pair();
    const auto sw = make_switch(cfg_.effective_k());
    const auto plan = make_plan();
    std::vector<latent_video> videos;
    for (size_t i = 0; i < plan.seeds.size(); ++i) {
        const auto cond = make_condition(plan.commands[i % plan.commands.size()], plan.magnitude, cfg_.dim);
        videos.push_back(decoupled_sample(pair, sw, sched_, &cond, cfg_.steps, cfg_.cfg_scale, plan.seeds[i]));
    }
    const auto out = cfg_.workdir / "samples_decoupled.mmrg";
    write_samples(out, "decoupled", plan, videos);
    say("sample-decoupled: K " + std::to_string(sw.K) + ", wrote " + std::to_string(videos.size()) + " videos to " +
        out.string());
}

eval_report experiment::evaluate(const std::string& model) {
    const auto plan = make_plan();
    if (model == "decoupled") {
        const auto pair = load_pair();
        const auto sw = make_switch(cfg_.effective_k());
        return eval_samples(
            [&](const cond_embedding& c, uint64_t seed) {
                return decoupled_sample(pair, sw, sched_, &c, cfg_.steps, cfg_.cfg_scale, seed);
            },
            cfg_.dim, plan);
    }
    const auto theta = param_set::from_tensor_map(require_checkpoint(cfg_.workdir / (model + ".mmrg")));
    return eval_model(theta, sched_, plan, cfg_.steps, cfg_.cfg_scale);
}

eval_report experiment::eval() {
    const auto r = evaluate(cfg_.model);
    const std::string name = "eval_" + cfg_.model + ".csv";
    write_text(name.c_str(), csv_row(report_header) + report_rows(cfg_.model, r));
    say("eval " + cfg_.model + ": motion_degree " + fmt_short(r.motion_degree) + ", consistency " +
        fmt_short(r.consistency) + ", control_adherence " + fmt_short(r.control_adherence));
    return r;
}

taylor_report experiment::taylor_check() {
    const auto pre = require_checkpoint(path(artifact::pre));
    const auto sft = require_checkpoint(path(artifact::sft));
    const auto part = validate_compatibility(sft, pre);
    // Direction of extrapolation: pre - sft over the shared tensors.
    const delta_map dir = delta(pre, sft, part);
    const param_set base = param_set::from_tensor_map(pre);

    std::vector<std::pair<size_t, size_t>> ranges;
    for (const auto& [name, _] : dir.entries) {
        ranges.push_back(base.range_of(name));
    }
    const auto seeds = seed_range(cfg_.eval_seed, cfg_.taylor_n);
    const auto cmds = moving_commands;
    const objective_fn D = [&](std::span<const double> flat) {
        param_set theta = base;
        auto values = theta.values();
        size_t off = 0;
        for (const auto& [b, e] : ranges) {
            std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                      flat.begin() + static_cast<std::ptrdiff_t>(off + (e - b)),
                      values.begin() + static_cast<std::ptrdiff_t>(b));
            off += e - b;
        }
        double total = 0.0;
        for (size_t i = 0; i < seeds.size(); ++i) {
            const auto cond = make_condition(cmds[i % cmds.size()], cfg_.eval_magnitude, cfg_.dim);
            total += motion_degree(ddim_sample(theta, sched_, &cond, cfg_.taylor_steps, cfg_.cfg_scale, seeds[i]));
        }
        return total / static_cast<double>(seeds.size());
    };
    const auto r = mmrg::taylor_check(pre, dir, D, cfg_.taylor_alphas, cfg_.fd_step, cfg_.threads);

    std::string csv = csv_row({"alpha", "predicted", "measured"});
    for (size_t i = 0; i < r.alpha_grid.size(); ++i) {
        csv += csv_row({fmt(r.alpha_grid[i]), fmt(r.predicted[i]), fmt(r.measured[i])});
    }
    write_text(artifact::taylor, csv);
    say("taylor-check: gamma_hat " + fmt_short(r.gamma_hat) + ", cosine " +
        (r.cosine_defined ? fmt_short(r.cosine_alignment) : std::string("undefined")) + ", |grad D| " +
        fmt_short(r.gradient_norm));
    return r;
}

std::vector<stage_report> experiment::pipeline() {
    auto stage = [&](const std::string& name, const std::function<void()>& body) {
        say("== " + name);
        try {
            body();
        } catch (...) {
            rethrow_in_stage(name);
        }
    };
    stage("gen-data", [&] { gen_data(); });
    stage("pretrain", [&] { pretrain(); });
    stage("finetune", [&] { finetune(); });
    stage("extrapolate", [&] { extrapolate(); });
    stage("isolate", [&] { isolate(); });
    stage("build-enhanced", [&] { build_enhanced(); });
    stage("sample-decoupled", [&] { sample_decoupled(); });

    std::vector<stage_report> reports;
    stage("eval", [&] {
        for (const auto& [label, model] : std::vector<std::pair<std::string, std::string>>{
                 {"pre", "pre"}, {"sft", "sft"}, {"dyn", "dyn"}, {"pipeline", "decoupled"}}) {
            reports.push_back({label, evaluate(model)});
            const auto& r = reports.back().report;
            say(label + ": motion_degree " + fmt_short(r.motion_degree) + ", consistency " +
                fmt_short(r.consistency) + ", control_adherence " + fmt_short(r.control_adherence));
        }
        std::string csv = csv_row(report_header);
        for (const auto& r : reports) csv += report_rows(r.stage, r.report);
        write_text(artifact::reports, csv);
    });
    return reports;
}

std::vector<alpha_row> experiment::sweep_alpha() {
    const auto pre = require_checkpoint(path(artifact::pre));
    const auto sft = require_checkpoint(path(artifact::sft));
    const auto part = validate_compatibility(sft, pre);
    const auto plan = make_plan();
    std::vector<alpha_row> rows;
    std::string csv = csv_row({"alpha", "motion_degree", "consistency"});
    for (double a : cfg_.alphas) {
        const auto theta = param_set::from_tensor_map(mmrg::extrapolate(pre, sft, a, part));
        rows.push_back({a, eval_model(theta, sched_, plan, cfg_.steps, cfg_.cfg_scale)});
        const auto& r = rows.back().report;
        csv += csv_row({fmt(a), fmt(r.motion_degree), fmt(r.consistency)});
        say("alpha " + fmt_short(a) + ": motion_degree " + fmt_short(r.motion_degree) + ", consistency " +
            fmt_short(r.consistency));
    }
    write_text(artifact::sweep_alpha, csv);
    return rows;
}

std::vector<k_row> experiment::sweep_k() {
    const auto pair = load_pair();
    const auto plan = make_plan();
    std::vector<k_row> rows;
    std::string csv = csv_row({"k", "strategy", "motion_degree", "consistency", "control_adherence"});
    for (int k : cfg_.effective_ks()) {
        const auto sw = make_switch(k);
        const auto r = eval_samples(
            [&](const cond_embedding& c, uint64_t seed) {
                return decoupled_sample(pair, sw, sched_, &c, cfg_.steps, cfg_.cfg_scale, seed);
            },
            cfg_.dim, plan);
        rows.push_back({k, sw.strategy, r});
        csv += csv_row({std::to_string(k), to_string(sw.strategy), fmt(r.motion_degree), fmt(r.consistency),
                        fmt(r.control_adherence)});
        say("K " + std::to_string(k) + ": motion_degree " + fmt_short(r.motion_degree) + ", consistency " +
            fmt_short(r.consistency) + ", control_adherence " + fmt_short(r.control_adherence));
    }
    write_text(artifact::sweep_k, csv);
    return rows;
}

const std::vector<std::string>& experiment::commands() {
    static const std::vector<std::string> names = {
        "gen-data", "pretrain", "finetune", "extrapolate", "dare",     "isolate",     "build-enhanced",
        "sample",   "sample-decoupled",     "eval",        "taylor-check", "pipeline", "sweep-alpha", "sweep-k"};
    return names;
}

void experiment::run(const std::string& name) {
    if (name == "gen-data") gen_data();
    else if (name == "pretrain") pretrain();
    else if (name == "finetune") finetune();
    else if (name == "extrapolate") extrapolate();
    else if (name == "dare") dare();
    else if (name == "isolate") isolate();
    else if (name == "build-enhanced") build_enhanced();
    else if (name == "sample") sample();
    else if (name == "sample-decoupled") sample_decoupled();
    else if (name == "eval") eval();
    else if (name == "taylor-check") taylor_check();
    else if (name == "pipeline") pipeline();
    else if (name == "sweep-alpha") sweep_alpha();
    else if (name == "sweep-k") sweep_k();
    else throw config_error("unknown command '" + name + "'");
}

std::vector<std::string> experiment::plan(const std::string& name) const {
    auto in = [&](const std::string& f) { return "read  " + (cfg_.workdir / f).string(); };
    auto out = [&](const std::string& f) { return "write " + (cfg_.workdir / f).string(); };
    const std::string model_file = cfg_.model + ".mmrg";
    if (name == "gen-data") return {out(artifact::pretrain_corpus), out(artifact::finetune_corpus)};
    if (name == "pretrain") return {in(artifact::pretrain_corpus), out(artifact::pre)};
    if (name == "finetune") return {in(artifact::finetune_corpus), in(artifact::pre), out(artifact::sft)};
    if (name == "extrapolate") return {in(artifact::pre), in(artifact::sft), out(artifact::dyn)};
    if (name == "dare") return {in(artifact::pre), in(artifact::sft), out(artifact::dare)};
    if (name == "isolate") {
        return {in(artifact::pre), in(artifact::sft), in(artifact::dyn), out(artifact::adt), out(artifact::deg),
                out(artifact::con)};
    }
    if (name == "build-enhanced") {
        return {in(artifact::pre), in(artifact::adt), in(artifact::deg), in(artifact::con), out(artifact::dyn_star),
                out(artifact::con_star)};
    }
    if (name == "sample-decoupled" || (name == "sample" && cfg_.model == "decoupled")) {
        return {in(artifact::dyn_star), in(artifact::con_star), out("samples_decoupled.mmrg")};
    }
    if (name == "sample") return {in(model_file), out("samples_" + cfg_.model + ".mmrg")};
    if (name == "eval") {
        if (cfg_.model == "decoupled") {
            return {in(artifact::dyn_star), in(artifact::con_star), out("eval_decoupled.csv")};
        }
        return {in(model_file), out("eval_" + cfg_.model + ".csv")};
    }
    if (name == "taylor-check") return {in(artifact::pre), in(artifact::sft), out(artifact::taylor)};
    if (name == "sweep-alpha") return {in(artifact::pre), in(artifact::sft), out(artifact::sweep_alpha)};
    if (name == "sweep-k") return {in(artifact::dyn_star), in(artifact::con_star), out(artifact::sweep_k)};
    if (name == "pipeline") {
        std::vector<std::string> lines;
        for (const char* stage : {"gen-data", "pretrain", "finetune", "extrapolate", "isolate", "build-enhanced",
                                  "sample-decoupled"}) {
            for (auto& l : plan(stage)) lines.push_back(std::string(stage) + ": " + l);
        }
        lines.push_back("eval: " + out(artifact::reports));
        return lines;
    }
    throw config_error("unknown command '" + name + "'");
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const config_error*>(&e)) return 2;
    if (dynamic_cast<const numeric_error*>(&e)) return 3;
    if (dynamic_cast<const missing_artifact*>(&e)) return 4;
    return 1;
}

} // namespace mmrg
