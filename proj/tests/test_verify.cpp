#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>
#include <vector>

#include "rulemem/rng.hpp"
#include "rulemem/rules.hpp"
#include "rulemem/verify.hpp"

using namespace rulemem;
using verify::Formula;

namespace {

rules::Rulebook toy_book() {
  // Single rule: y <=> c1 & !c2.
  rules::Rulebook book;
  book.concepts = {"c1", "c2"};
  book.tasks.push_back({"y", {rules::SymbolicRule::from_string("PN")}});
  return book;
}

rules::Rulebook random_book(Rng& rng, std::size_t n_c, std::size_t n_t,
                            std::size_t max_rules) {
  rules::Rulebook book;
  for (std::size_t i = 0; i < n_c; ++i)
    book.concepts.push_back("c" + std::to_string(i));
  for (std::size_t t = 0; t < n_t; ++t) {
    rules::TaskRules task;
    task.name = "y" + std::to_string(t);
    const std::size_t count = 1 + rng.below(max_rules);
    for (std::size_t j = 0; j < count; ++j) {
      rules::SymbolicRule r;
      for (std::size_t i = 0; i < n_c; ++i)
        r.roles.push_back(static_cast<rules::Role>(rng.below(3)));
      task.rules.push_back(std::move(r));
    }
    book.tasks.push_back(std::move(task));
  }
  return book;
}

Formula random_formula(Rng& rng, const rules::Rulebook& book, int depth) {
  const std::size_t pick = rng.below(depth <= 0 ? 3 : 8);
  switch (pick) {
    case 0:
      return Formula::make_atom(book.concepts[rng.below(book.concepts.size())]);
    case 1:
      return Formula::make_atom(book.tasks[rng.below(book.tasks.size())].name);
    case 2:
      return Formula::constant(rng.below(2) != 0);
    case 3:
      return Formula::unary(Formula::Kind::Not,
                            random_formula(rng, book, depth - 1));
    default: {
      const Formula::Kind kinds[4] = {Formula::Kind::And, Formula::Kind::Or,
                                      Formula::Kind::Implies, Formula::Kind::Iff};
      return Formula::binary(kinds[pick % 4], random_formula(rng, book, depth - 1),
                             random_formula(rng, book, depth - 1));
    }
  }
}

// Independent in-test evaluation used to validate counterexamples.
bool eval_formula(const Formula& f, const rules::Rulebook& book,
                  const std::vector<std::uint8_t>& c,
                  const std::vector<std::uint8_t>& y) {
  switch (f.kind) {
    case Formula::Kind::True: return true;
    case Formula::Kind::False: return false;
    case Formula::Kind::Atom: {
      for (std::size_t i = 0; i < book.concepts.size(); ++i)
        if (book.concepts[i] == f.atom) return c[i] != 0;
      for (std::size_t t = 0; t < book.tasks.size(); ++t)
        if (book.tasks[t].name == f.atom) return y[t] != 0;
      FAIL("unexpected atom ", f.atom);
      return false;
    }
    case Formula::Kind::Not: return !eval_formula(f.kids[0], book, c, y);
    case Formula::Kind::And:
      return eval_formula(f.kids[0], book, c, y) &&
             eval_formula(f.kids[1], book, c, y);
    case Formula::Kind::Or:
      return eval_formula(f.kids[0], book, c, y) ||
             eval_formula(f.kids[1], book, c, y);
    case Formula::Kind::Implies:
      return !eval_formula(f.kids[0], book, c, y) ||
             eval_formula(f.kids[1], book, c, y);
    default:
      return eval_formula(f.kids[0], book, c, y) ==
             eval_formula(f.kids[1], book, c, y);
  }
}

}  // namespace

TEST_CASE("parser builds the expected structures") {
  Formula f = verify::parse("y_apple -> !c_blue");
  REQUIRE(f.kind == Formula::Kind::Implies);
  CHECK(f.kids[0].kind == Formula::Kind::Atom);
  CHECK(f.kids[0].atom == "y_apple");
  REQUIRE(f.kids[1].kind == Formula::Kind::Not);
  CHECK(f.kids[1].kids[0].atom == "c_blue");

  // Implication is right-associative.
  Formula g = verify::parse("a -> b -> c");
  REQUIRE(g.kind == Formula::Kind::Implies);
  CHECK(g.kids[0].atom == "a");
  REQUIRE(g.kids[1].kind == Formula::Kind::Implies);
  CHECK(g.kids[1].kids[0].atom == "b");
  CHECK(g.kids[1].kids[1].atom == "c");

  // & binds tighter than |, which binds tighter than ->, then <->.
  Formula h = verify::parse("a <-> b | c & d -> e");
  REQUIRE(h.kind == Formula::Kind::Iff);
  REQUIRE(h.kids[1].kind == Formula::Kind::Implies);
  REQUIRE(h.kids[1].kids[0].kind == Formula::Kind::Or);
  CHECK(h.kids[1].kids[0].kids[1].kind == Formula::Kind::And);

  CHECK(verify::parse("true").kind == Formula::Kind::True);
  CHECK(verify::parse("!false").kids[0].kind == Formula::Kind::False);
  CHECK(verify::parse("(a)").atom == "a");
  // Function-style atoms lex as one token, group parens stay separate.
  Formula r = verify::parse("(role(y,2,c_1,P) & a)");
  CHECK(r.kind == Formula::Kind::And);
  CHECK(r.kids[0].atom == "role(y,2,c_1,P)");
}

TEST_CASE("parser reports offsets and expectations on bad input") {
  CHECK_THROWS_AS(verify::parse("a & (b | c"), verify::ParseError);
  CHECK_THROWS_AS(verify::parse("a b"), verify::ParseError);
  CHECK_THROWS_AS(verify::parse("a & 5"), verify::ParseError);
  CHECK_THROWS_AS(verify::parse(""), verify::ParseError);
  try {
    verify::parse("ab & 5x");
  } catch (const verify::ParseError& e) {
    CHECK(e.offset == 5);
    CHECK(std::string(e.what()).find("byte 5") != std::string::npos);
  }
}

TEST_CASE("render and parse round-trip on random formulas") {
  Rng rng(13);
  rules::Rulebook book = random_book(rng, 5, 2, 2);
  for (int rep = 0; rep < 1000; ++rep) {
    Formula f = random_formula(rng, book, 8);
    Formula back = verify::parse(verify::render(f));
    CHECK(back == f);
  }
}

TEST_CASE("entailment on the single-rule toy theory") {
  rules::Rulebook book = toy_book();
  verify::Verdict good = verify::check_entailment(book, verify::parse("y -> c1"));
  CHECK(good.entailed);
  CHECK_FALSE(good.counterexample.has_value());

  verify::Verdict bad = verify::check_entailment(book, verify::parse("y -> c2"));
  REQUIRE_FALSE(bad.entailed);
  REQUIRE(bad.counterexample.has_value());
  CHECK(bad.counterexample->concepts == std::vector<std::uint8_t>{1, 0});
  const auto tasks = rules::global_predict(book, bad.counterexample->selected,
                                           bad.counterexample->concepts);
  CHECK(tasks[0] == 1);
}

TEST_CASE("entailment rejects oversized books and unknown atoms") {
  Rng rng(3);
  rules::Rulebook big = random_book(rng, 25, 1, 1);
  CHECK_THROWS_WITH_AS(verify::check_entailment(big, verify::parse("c0")),
                       doctest::Contains("25"), std::invalid_argument);
  rules::Rulebook book = toy_book();
  CHECK_THROWS_AS(verify::check_entailment(book, verify::parse("nope")),
                  std::invalid_argument);
}

TEST_CASE("role literals resolve to constants from the decoded book") {
  rules::Rulebook book = toy_book();
  CHECK(verify::check_entailment(book, verify::parse("role(y,0,c1,P)")).entailed);
  CHECK(verify::check_entailment(book, verify::parse("role(y,0,c2,N)")).entailed);
  CHECK_FALSE(
      verify::check_entailment(book, verify::parse("role(y,0,c1,I)")).entailed);
  CHECK_THROWS_AS(
      verify::check_entailment(book, verify::parse("role(y,7,c1,P)")),
      std::invalid_argument);
}

TEST_CASE("oracle reproduces the toy verdicts") {
  rules::Rulebook book = toy_book();
  CHECK(verify::check_oracle(book, verify::parse("y -> c1")).entailed);
  verify::Verdict bad = verify::check_oracle(book, verify::parse("y -> c2"));
  REQUIRE_FALSE(bad.entailed);
  CHECK(bad.counterexample->concepts == std::vector<std::uint8_t>{1, 0});
  CHECK(verify::check_oracle(book, verify::parse("role(y,0,c1,P)")).entailed);
}

TEST_CASE("checker and oracle agree on 500 random instances") {
  Rng rng(101);
  std::size_t disagreements = 0;
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t n_c = 1 + rng.below(rep % 10 == 0 ? 12 : 6);
    const std::size_t n_t = 1 + rng.below(3);
    rules::Rulebook book = random_book(rng, n_c, n_t, 4);
    Formula prop = random_formula(rng, book, 6);
    verify::Verdict fast = verify::check_entailment(book, prop);
    verify::Verdict slow = verify::check_oracle(book, prop);
    if (fast.entailed != slow.entailed) ++disagreements;
    CHECK(fast.entailed == slow.entailed);
    if (!fast.entailed && !slow.entailed) {
      CHECK(fast.counterexample->concepts == slow.counterexample->concepts);
      CHECK(fast.counterexample->selected == slow.counterexample->selected);
      // Counterexample validity: re-evaluating the model falsifies the prop.
      const auto y = rules::global_predict(book, fast.counterexample->selected,
                                           fast.counterexample->concepts);
      CHECK_FALSE(eval_formula(prop, book, fast.counterexample->concepts, y));
    }
  }
  CHECK(disagreements == 0);
}

TEST_CASE("entailment is monotone under disjunction") {
  Rng rng(55);
  std::size_t entailed_seen = 0;
  for (int rep = 0; rep < 300 || entailed_seen < 20; ++rep) {
    if (rep > 3000) break;
    rules::Rulebook book = random_book(rng, 4, 2, 3);
    Formula prop = random_formula(rng, book, 4);
    if (!verify::check_entailment(book, prop).entailed) continue;
    ++entailed_seen;
    Formula weaker = Formula::binary(Formula::Kind::Or, prop,
                                     random_formula(rng, book, 4));
    CHECK(verify::check_entailment(book, weaker).entailed);
  }
  CHECK(entailed_seen >= 20);
}

TEST_CASE("duplicate rules never change a verdict") {
  Rng rng(77);
  for (int rep = 0; rep < 100; ++rep) {
    rules::Rulebook book = random_book(rng, 5, 2, 3);
    Formula prop = random_formula(rng, book, 5);
    verify::Verdict base = verify::check_entailment(book, prop);
    rules::Rulebook duped = book;
    const std::size_t t = rng.below(duped.tasks.size());
    duped.tasks[t].rules.push_back(duped.tasks[t].rules[0]);
    verify::Verdict after = verify::check_entailment(duped, prop);
    CHECK(base.entailed == after.entailed);
    if (!base.entailed) {
      CHECK(base.counterexample->concepts == after.counterexample->concepts);
    }
  }
}

TEST_CASE("property files run line by line with comments") {
  rules::Rulebook book = toy_book();
  std::istringstream props(
      "# safety properties\n"
      "y -> c1\n"
      "\n"
      "y -> !c2   # no blue apples\n");
  verify::PropertyReport report = verify::check_properties(book, props);
  REQUIRE(report.results.size() == 2);
  CHECK(report.all_entailed);
  CHECK(report.results[0].source == "y -> c1");

  std::istringstream mixed("y -> c1\ny -> c2\n");
  verify::PropertyReport failing = verify::check_properties(book, mixed);
  CHECK_FALSE(failing.all_entailed);
  nlohmann::json j = verify::report_to_json(failing, book);
  CHECK(j["all_entailed"] == false);
  REQUIRE(j["properties"].size() == 2);
  CHECK(j["properties"][1].contains("counterexample"));
  CHECK(j["properties"][1]["counterexample"]["tasks"][0] == 1);
}
