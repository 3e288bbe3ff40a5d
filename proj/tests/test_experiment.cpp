#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mmrg/error.hpp"
#include "mmrg/experiment.hpp"
#include "support.hpp"

using namespace mmrg;

namespace {

experiment_config tiny_config(const std::filesystem::path& dir) {
    return parse_config(R"(
# small enough for a unit test
workdir = )" + dir.string() + R"(
frames = 4
dim = 12
hidden = 8
time_dim = 2
T = 10
steps = 10
pretrain_clips = 32
finetune_clips = 32
pretrain_steps = 60
finetune_steps = 20
n = 4
alphas = 0, 2
ks = 0, 5, 10
taylor_alphas = 0.01
taylor_n = 1
taylor_steps = 2
)");
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MMRG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("config parsing") {
    const auto cfg = parse_config("alpha = 0.7\n  p=0.5 # trailing comment\n\nseeds = 3, 4,5\nstrategy = con-first\n");
    CHECK(cfg.alpha == 0.7);
    CHECK(cfg.p == 0.5);
    CHECK(cfg.seeds == std::vector<uint64_t>{3, 4, 5});
    CHECK(cfg.eval_seeds() == std::vector<uint64_t>{3, 4, 5});
    CHECK(cfg.strategy == switch_strategy::con_first);

    CHECK_THROWS_AS(parse_config("nope = 1\n"), config_error);
    CHECK_THROWS_AS(parse_config("alpha\n"), config_error);
    CHECK_THROWS_AS(parse_config("steps = ten\n"), config_error);
    CHECK_THROWS_AS(parse_config("steps = 10.5\n"), config_error);
    CHECK_THROWS_AS(parse_config("alpha = nan\n"), config_error);
    CHECK_THROWS_AS(load_config("/nonexistent/x.cfg"), config_error);

    // later layers override earlier ones
    auto layered = parse_config("alpha = 0.2\n", parse_config("alpha = 0.9\nn = 7\n"));
    CHECK(layered.alpha == 0.2);
    CHECK(layered.n == 7);
    set_config_value(layered, "n", "9");
    CHECK(get_config_value(layered, "n") == "9");

    // dump is a fixed point of parse
    CHECK(dump_config(parse_config(dump_config(layered))) == dump_config(layered));
    CHECK(config_keys().front() == "workdir");
}

TEST_CASE("config defaults") {
    const experiment_config cfg;
    CHECK(cfg.frames == 8);
    CHECK(cfg.dim == 16);
    CHECK(cfg.T == 50);
    CHECK(cfg.steps == 50);
    CHECK(cfg.cfg_scale == 7.5);
    CHECK(cfg.p == 0.7);
    CHECK(cfg.alpha == 0.5);
    CHECK(cfg.effective_k() == 25);
    CHECK(cfg.w_deg == 1.0);
    CHECK(cfg.w_adt == 1.0);
    CHECK(cfg.effective_ks() == std::vector<int>{0, 12, 25, 50});
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config validation") {
    auto bad = [](const std::string& text) { return parse_config(text).validate(); };
    CHECK_THROWS_AS(bad("p = 1\n"), config_error);
    CHECK_THROWS_AS(bad("steps = 51\n"), config_error);
    CHECK_THROWS_AS(bad("switch_k = 60\n"), config_error);
    CHECK_THROWS_AS(bad("dim = 8\n"), config_error);
    CHECK_THROWS_AS(bad("time_dim = 3\n"), config_error);
    CHECK_THROWS_AS(bad("frames = 1\n"), config_error);
    CHECK_THROWS_AS(bad("model = other\n"), config_error);
    CHECK_THROWS_AS(bad("alpha = -1\n"), config_error);
    CHECK_THROWS_AS(bad("ks = 0, 99\n"), config_error);
    CHECK_THROWS_AS(bad("n = 0\n"), config_error);
}

TEST_CASE("csv quoting") {
    CHECK(csv_field("plain") == "plain");
    CHECK(csv_field("a,b") == "\"a,b\"");
    CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(csv_row({"a", "b c", "1,2"}) == "a,b c,\"1,2\"\r\n");
}

TEST_CASE("exit codes") {
    CHECK(exit_code_for(config_error("x")) == 2);
    CHECK(exit_code_for(numeric_error("x")) == 3);
    CHECK(exit_code_for(missing_artifact("x")) == 4);
    CHECK(exit_code_for(format_error("x")) == 1);
    CHECK(exit_code_for(std::runtime_error("x")) == 1);
}

TEST_CASE("plans do not touch disk") {
    test::temp_dir dir("plan");
    const auto work = dir.path / "fresh";
    experiment exp(tiny_config(work));
    for (const auto& cmd : experiment::commands()) CHECK_FALSE(exp.plan(cmd).empty());
    CHECK_FALSE(std::filesystem::exists(work));
    CHECK_THROWS_AS(exp.plan("launch"), config_error);
}

TEST_CASE("missing artifacts are reported") {
    test::temp_dir dir("missing");
    experiment exp(tiny_config(dir.path));
    CHECK_THROWS_AS(exp.pretrain(), missing_artifact);
    CHECK_THROWS_AS(exp.extrapolate(), missing_artifact);
    CHECK_THROWS_AS(exp.sweep_k(), missing_artifact);
}

TEST_CASE("pipeline end to end on a tiny config") {
    test::temp_dir dir("pipeline");
    const auto work = dir.path / "created";
    const auto cfg = tiny_config(work);
    experiment exp(cfg);
    const auto reports = exp.pipeline();
    REQUIRE(reports.size() == 4);
    CHECK(reports[0].stage == "pre");
    CHECK(reports[3].stage == "pipeline");

    const std::map<std::string, std::string> stages = {
        {artifact::pre, "pretrained"}, {artifact::sft, "sft"},           {artifact::dyn, "dyn"},
        {artifact::adt, "isolated_delta"}, {artifact::deg, "isolated_delta"}, {artifact::con, "isolated_delta"},
        {artifact::dyn_star, "dyn_star"}, {artifact::con_star, "con_star"}};
    for (const auto& [file, stage] : stages) CHECK(load_checkpoint(work / file).stage() == stage);

    const std::string csv = slurp(work / artifact::reports);
    CHECK(csv.rfind("model_stage,metric,value,n,seed_hash\r\n", 0) == 0);
    CHECK(csv.find("pipeline,control_adherence,") != std::string::npos);

    SUBCASE("rerun is bitwise identical") {
        std::map<std::string, std::string> before;
        for (const auto& e : std::filesystem::directory_iterator(work)) before[e.path().filename()] = slurp(e.path());
        experiment again(cfg);
        again.pipeline();
        for (const auto& [name, bytes] : before) CHECK(slurp(work / name) == bytes);
    }
    SUBCASE("sweep endpoints") {
        const auto alphas = exp.sweep_alpha();
        REQUIRE(alphas.size() == 2);
        CHECK(alphas[0].report.motion_degree == reports[0].report.motion_degree);
        const auto ks = exp.sweep_k();
        REQUIRE(ks.size() == 3);
        CHECK(ks[0].report.motion_degree == exp.evaluate("con_star").motion_degree);
        CHECK(ks[2].report.motion_degree == exp.evaluate("dyn_star").motion_degree);
        CHECK(std::filesystem::exists(work / artifact::sweep_alpha));
        CHECK(std::filesystem::exists(work / artifact::sweep_k));
    }
    SUBCASE("single commands") {
        exp.dare();
        CHECK(from_tensor_map(load_checkpoint(work / artifact::dare)).prune_rate == cfg.p);
        exp.sample();
        CHECK(read_container(work / "samples_sft.mmrg").entries.size() == 4);
        const auto r = exp.eval();
        CHECK(r.n_samples == 4);
        const auto t = exp.taylor_check();
        CHECK(t.alpha_grid.size() == 1);
        CHECK(slurp(work / artifact::taylor).rfind("alpha,predicted,measured\r\n", 0) == 0);
    }
}

TEST_CASE("command line front end") {
    test::temp_dir dir("cli");
    const auto cfg_path = dir.path / "exp.cfg";
    {
        std::ofstream out(cfg_path);
        out << dump_config(tiny_config(dir.path / "work"));
    }
    const std::string base = "--config " + cfg_path.string();
    CHECK(run_cli("pipeline --dry-run " + base) == 0);
    CHECK_FALSE(std::filesystem::exists(dir.path / "work"));
    CHECK(run_cli("eval --p 1.5 " + base) == 2);
    CHECK(run_cli("eval --no-such-flag " + base) == 2);
    CHECK(run_cli("eval " + base) == 4);
    CHECK(run_cli("gen-data " + base) == 0);
    CHECK(std::filesystem::exists(dir.path / "work" / artifact::pretrain_corpus));

    // the environment overrides the file, flags override both
    const auto env_dir = dir.path / "env";
    CHECK(run_cli("gen-data " + base + " --workdir " + (dir.path / "flag").string()) == 0);
    CHECK(std::filesystem::exists(dir.path / "flag" / artifact::pretrain_corpus));
    CHECK(std::system(("MMRG_WORKDIR=" + env_dir.string() + " " + MMRG_CLI_PATH + " gen-data " + base +
                       " >/dev/null 2>&1")
                          .c_str()) == 0);
    CHECK(std::filesystem::exists(env_dir / artifact::pretrain_corpus));
}
