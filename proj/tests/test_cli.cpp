#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "rulemem/checkpoint.hpp"
#include "rulemem/rules.hpp"

namespace {

const std::string kCli = RULEMEM_CLI_PATH;
const std::string kDir = "/tmp/rulemem_cli_test";

struct RunResult {
  int exit_code;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string out_path = kDir + "/stdout.txt";
  const std::string cmd = kCli + " " + args + " > " + out_path + " 2> " + kDir +
                          "/stderr.txt";
  const int status = std::system(cmd.c_str());
  std::ifstream is(out_path);
  std::stringstream ss;
  ss << is.rdbuf();
  return {WEXITSTATUS(status), ss.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& path) {
  std::ifstream is(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) ++n;
  return n;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path);
  os << content;
}

const char* kTinyConfig = R"({
  "epochs": 40, "batch_size": 128, "learning_rate": 0.001, "seed": 1,
  "selector_reset_every": 15, "eval_every": 20, "beta": 1.0,
  "restore_policy": "best_val_loss",
  "n_rules": 4, "rule_emb_size": 16,
  "encoder_hidden": [24, 24], "selector_hidden": [24], "decoder_hidden": [24],
  "selector_input": "concept_probs"
})";

}  // namespace

TEST_CASE("cli end-to-end workflow") {
  std::system(("rm -rf " + kDir + " && mkdir -p " + kDir).c_str());

  SUBCASE("gen-data writes metadata plus one line per example, reproducibly") {
    RunResult r = run("gen-data --kind pairsum --digits 4 --sigma 0.3 --n 100 "
                      "--seed 1 --out " + kDir + "/d1.jsonl");
    CHECK(r.exit_code == 0);
    CHECK(line_count(kDir + "/d1.jsonl") == 101);
    nlohmann::json j = nlohmann::json::parse(r.out);
    CHECK(j["examples"] == 100);

    run("gen-data --kind pairsum --digits 4 --sigma 0.3 --n 100 --seed 1 --out " +
        kDir + "/d2.jsonl");
    CHECK(slurp(kDir + "/d1.jsonl") == slurp(kDir + "/d2.jsonl"));
  }

  SUBCASE("usage errors exit with code 2") {
    CHECK(run("gen-data --kind mystery --n 10 --out " + kDir + "/x.jsonl")
              .exit_code == 2);
    CHECK(run("gen-data").exit_code == 2);          // missing required --out
    CHECK(run("train --config nope.json").exit_code == 2);
    CHECK(run("frobnicate").exit_code == 2);        // unknown subcommand
    CHECK(run("gen-data --frob 1 --out " + kDir + "/x.jsonl").exit_code == 2);
  }

  SUBCASE("train, eval, decode, verify, oracle-check, intervene") {
    run("gen-data --kind pairsum --digits 2 --sigma 0.3 --n 1500 --seed 1 "
        "--out " + kDir + "/train.jsonl");
    run("gen-data --kind pairsum --digits 2 --sigma 0.3 --n 400 --seed 9 "
        "--out " + kDir + "/test.jsonl");
    write_file(kDir + "/cfg.json", kTinyConfig);
    const std::string train_hash_before = slurp(kDir + "/train.jsonl");

    RunResult tr = run("train --config " + kDir + "/cfg.json --data " + kDir +
                       "/train.jsonl --out " + kDir + "/ckpt.json --history " +
                       kDir + "/hist.jsonl");
    REQUIRE(tr.exit_code == 0);
    CHECK(line_count(kDir + "/hist.jsonl") == 2);
    // Inputs are never mutated.
    CHECK(slurp(kDir + "/train.jsonl") == train_hash_before);

    RunResult ev = run("eval --ckpt " + kDir + "/ckpt.json --data " + kDir +
                       "/test.jsonl");
    REQUIRE(ev.exit_code == 0);
    nlohmann::json metrics = nlohmann::json::parse(ev.out);
    CHECK(metrics["task_subset_accuracy"].get<double>() > 0.8);
    CHECK(metrics.contains("rule_recovery"));

    RunResult de = run("decode --ckpt " + kDir + "/ckpt.json --out " + kDir +
                       "/rules.json");
    REQUIRE(de.exit_code == 0);
    // The written file validates against the rulebook schema.
    rulemem::rules::Rulebook book =
        rulemem::rules::load_rulebook(kDir + "/rules.json");
    CHECK(book.concepts.size() == 4);
    CHECK(book.tasks.size() == 3);
    for (const auto& task : book.tasks)
      for (const auto& rule : task.rules)
        CHECK(rule.roles.size() == 4);
    nlohmann::json decoded = nlohmann::json::parse(de.out);
    CHECK(decoded["tasks"].size() == 3);

    // Verification: a property of the trained theory plus a toy book.
    write_file(kDir + "/props.txt",
               "# only one first-digit concept can support a task\n"
               "y_2 -> c_0_1\n");
    RunResult ve = run("verify --rules " + kDir + "/rules.json --props " + kDir +
                       "/props.txt --report " + kDir + "/report.json");
    nlohmann::json report = nlohmann::json::parse(ve.out);
    CHECK(report["properties"].size() == 1);
    CHECK((ve.exit_code == 0 || ve.exit_code == 1));

    rulemem::rules::Rulebook toy;
    toy.concepts = {"c1", "c2"};
    toy.tasks.push_back({"y", {rulemem::rules::SymbolicRule::from_string("PN")}});
    rulemem::rules::save_rulebook(toy, kDir + "/toy.json");
    write_file(kDir + "/toy_props.txt", "y -> c1\n");
    CHECK(run("verify --rules " + kDir + "/toy.json --props " + kDir +
              "/toy_props.txt").exit_code == 0);
    write_file(kDir + "/toy_bad.txt", "y -> c2\n");
    CHECK(run("verify --rules " + kDir + "/toy.json --props " + kDir +
              "/toy_bad.txt").exit_code == 1);

    RunResult oc = run("oracle-check --ckpt " + kDir + "/ckpt.json --data " +
                       kDir + "/test.jsonl --n-cases 50");
    REQUIRE(oc.exit_code == 0);
    nlohmann::json devs = nlohmann::json::parse(oc.out);
    CHECK(devs["max_likelihood_deviation"].get<double>() <= 1e-9);
    CHECK(devs["max_gradient_rel_error"].get<double>() <= 1e-4);

    // Rule intervention: add a manual rule, resume briefly, decode again.
    write_file(kDir + "/add.json", R"([{"task": "y_1", "roles": "PNNP"}])");
    RunResult in = run("intervene --ckpt " + kDir + "/ckpt.json --data " + kDir +
                       "/train.jsonl --out " + kDir + "/ckpt2.json --add-rules " +
                       kDir + "/add.json --resume-epochs 2");
    REQUIRE(in.exit_code == 0);
    rulemem::model::Checkpoint ck2 =
        rulemem::model::load_checkpoint(kDir + "/ckpt2.json");
    CHECK(ck2.params.rulebook[1].size() == 5);
    rulemem::rules::Rulebook book2 = rulemem::model::decode_rulebook(ck2.params);
    bool found = false;
    for (const auto& rule : book2.tasks[1].rules)
      found = found || (rule.role_string() == "PNNP" &&
                        rule.provenance == rulemem::rules::Provenance::Manual);
    CHECK(found);

    // Pin intervention: force a role and verify the decode respects it.
    write_file(kDir + "/pins.json",
               R"([{"task": "y_0", "rule": 0, "concept": "c_1_1", "pin": "force_I"}])");
    RunResult pi = run("intervene --ckpt " + kDir + "/ckpt.json --data " + kDir +
                       "/train.jsonl --out " + kDir + "/ckpt3.json --pins " +
                       kDir + "/pins.json --resume-epochs 1");
    REQUIRE(pi.exit_code == 0);
    rulemem::model::Checkpoint ck3 =
        rulemem::model::load_checkpoint(kDir + "/ckpt3.json");
    rulemem::rules::Rulebook book3 = rulemem::model::decode_rulebook(ck3.params);
    CHECK(book3.tasks[0].rules[0].roles[3] == rulemem::rules::Role::I);
  }
}
