#pragma once

// Propositional property language over concept atoms, task atoms and fixed
// role literals, with an exhaustive entailment checker against the decoded
// theory: a property is entailed when it holds for every concept assignment
// and every rule selection (the selector is treated adversarially). A
// separate straight-line truth-table evaluator serves as a cross-check.

#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rulemem/rules.hpp"

namespace rulemem::verify {

struct ParseError : std::runtime_error {
  std::size_t offset;
  std::string expected;
  ParseError(const std::string& msg, std::size_t off, std::string exp)
      : std::runtime_error(msg + " at byte " + std::to_string(off) +
                           " (expected " + exp + ")"),
        offset(off),
        expected(std::move(exp)) {}
};

struct Formula {
  enum class Kind { True, False, Atom, Not, And, Or, Implies, Iff };
  Kind kind = Kind::True;
  std::string atom;
  std::vector<Formula> kids;

  static Formula constant(bool v) {
    Formula f;
    f.kind = v ? Kind::True : Kind::False;
    return f;
  }
  static Formula make_atom(std::string name) {
    Formula f;
    f.kind = Kind::Atom;
    f.atom = std::move(name);
    return f;
  }
  static Formula unary(Kind k, Formula a) {
    Formula f;
    f.kind = k;
    f.kids.push_back(std::move(a));
    return f;
  }
  static Formula binary(Kind k, Formula a, Formula b) {
    Formula f;
    f.kind = k;
    f.kids.push_back(std::move(a));
    f.kids.push_back(std::move(b));
    return f;
  }

  bool operator==(const Formula& o) const {
    return kind == o.kind && atom == o.atom && kids == o.kids;
  }
};

namespace detail {

struct Lexer {
  std::string_view src;
  std::size_t pos = 0;

  void skip_ws() {
    while (pos < src.size() && std::isspace(static_cast<unsigned char>(src[pos])))
      ++pos;
  }
  bool at_end() {
    skip_ws();
    return pos >= src.size();
  }
  bool peek(char c) {
    skip_ws();
    return pos < src.size() && src[pos] == c;
  }
  bool peek2(const char* two) {
    skip_ws();
    return pos + 1 < src.size() && src[pos] == two[0] && src[pos + 1] == two[1];
  }
  bool peek3(const char* three) {
    skip_ws();
    return pos + 2 < src.size() && src[pos] == three[0] &&
           src[pos + 1] == three[1] && src[pos + 2] == three[2];
  }

  static bool ident_start(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
  }
  static bool ident_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  }

  // Identifier, optionally followed by a balanced argument list so that
  // role(task,2,concept,P) lexes as one atom while "y3)" stops before the
  // group-closing paren.
  std::string take_atom() {
    skip_ws();
    const std::size_t start = pos;
    if (pos >= src.size() || !ident_start(src[pos]))
      throw ParseError("unknown token", pos, "atom or '('");
    while (pos < src.size() && ident_char(src[pos])) ++pos;
    if (pos < src.size() && src[pos] == '(') {
      std::size_t depth = 0;
      const std::size_t args_start = pos;
      while (pos < src.size()) {
        if (src[pos] == '(') ++depth;
        if (src[pos] == ')') {
          --depth;
          ++pos;
          if (depth == 0) break;
          continue;
        }
        if (depth > 0 && !ident_char(src[pos]) && src[pos] != ',' &&
            src[pos] != '(' && !std::isspace(static_cast<unsigned char>(src[pos]))) {
          throw ParseError("bad character in atom arguments", pos, "',' or ')'");
        }
        ++pos;
      }
      if (depth != 0)
        throw ParseError("unbalanced parentheses in atom", args_start, "')'");
    }
    std::string atom(src.substr(start, pos - start));
    std::string cleaned;
    for (char c : atom)
      if (!std::isspace(static_cast<unsigned char>(c))) cleaned.push_back(c);
    return cleaned;
  }
};

struct Parser {
  Lexer lex;

  Formula parse_iff() {
    Formula left = parse_implies();
    while (lex.peek3("<->")) {
      lex.pos += 3;
      left = Formula::binary(Formula::Kind::Iff, std::move(left), parse_implies());
    }
    return left;
  }

  Formula parse_implies() {
    Formula left = parse_or();
    if (lex.peek2("->")) {
      lex.pos += 2;
      return Formula::binary(Formula::Kind::Implies, std::move(left),
                             parse_implies());  // right-associative
    }
    return left;
  }

  Formula parse_or() {
    Formula left = parse_and();
    while (lex.peek('|')) {
      ++lex.pos;
      left = Formula::binary(Formula::Kind::Or, std::move(left), parse_and());
    }
    return left;
  }

  Formula parse_and() {
    Formula left = parse_unary();
    while (lex.peek('&')) {
      ++lex.pos;
      left = Formula::binary(Formula::Kind::And, std::move(left), parse_unary());
    }
    return left;
  }

  Formula parse_unary() {
    if (lex.peek('!')) {
      ++lex.pos;
      return Formula::unary(Formula::Kind::Not, parse_unary());
    }
    if (lex.peek('(')) {
      ++lex.pos;
      Formula f = parse_iff();
      if (!lex.peek(')'))
        throw ParseError("unbalanced parentheses", lex.pos, "')'");
      ++lex.pos;
      return f;
    }
    std::string atom = lex.take_atom();
    if (atom == "true") return Formula::constant(true);
    if (atom == "false") return Formula::constant(false);
    return Formula::make_atom(std::move(atom));
  }
};

}  // namespace detail

inline Formula parse(std::string_view src) {
  detail::Parser p{detail::Lexer{src, 0}};
  Formula f = p.parse_iff();
  if (!p.lex.at_end())
    throw ParseError("trailing input", p.lex.pos, "end of formula");
  return f;
}

inline std::string render(const Formula& f) {
  switch (f.kind) {
    case Formula::Kind::True: return "true";
    case Formula::Kind::False: return "false";
    case Formula::Kind::Atom: return f.atom;
    case Formula::Kind::Not: return "!" + render(f.kids[0]);
    case Formula::Kind::And:
      return "(" + render(f.kids[0]) + " & " + render(f.kids[1]) + ")";
    case Formula::Kind::Or:
      return "(" + render(f.kids[0]) + " | " + render(f.kids[1]) + ")";
    case Formula::Kind::Implies:
      return "(" + render(f.kids[0]) + " -> " + render(f.kids[1]) + ")";
    default:
      return "(" + render(f.kids[0]) + " <-> " + render(f.kids[1]) + ")";
  }
}

struct TheoryModel {
  std::vector<std::uint8_t> concepts;
  std::vector<std::size_t> selected;  // one rule index per task
};

struct Verdict {
  bool entailed = true;
  std::optional<TheoryModel> counterexample;
  std::uint64_t models_checked = 0;
};

namespace detail {

enum class AtomKind { Concept, Task, Const };

struct ResolvedAtom {
  AtomKind kind = AtomKind::Const;
  std::size_t index = 0;
  bool value = false;
};

// Role literals reference the decoded book directly and reduce to constants:
// role(<task>, <rule index>, <concept>, P|N|I).
inline ResolvedAtom resolve_role_literal(const rules::Rulebook& book,
                                         const std::string& atom) {
  const std::size_t open = atom.find('(');
  std::string inner = atom.substr(open + 1, atom.size() - open - 2);
  std::vector<std::string> args;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = inner.find(',', start);
    if (comma == std::string::npos) {
      args.push_back(inner.substr(start));
      break;
    }
    args.push_back(inner.substr(start, comma - start));
    start = comma + 1;
  }
  if (args.size() != 4)
    throw std::invalid_argument("role literal '" + atom + "' needs 4 arguments");
  std::size_t task = book.tasks.size();
  for (std::size_t t = 0; t < book.tasks.size(); ++t)
    if (book.tasks[t].name == args[0]) task = t;
  if (task == book.tasks.size())
    throw std::invalid_argument("role literal: unknown task '" + args[0] + "'");
  const std::size_t rule = std::stoul(args[1]);
  if (rule >= book.tasks[task].rules.size())
    throw std::invalid_argument("role literal: rule index out of range in '" +
                                atom + "'");
  std::size_t concept_idx = book.concepts.size();
  for (std::size_t i = 0; i < book.concepts.size(); ++i)
    if (book.concepts[i] == args[2]) concept_idx = i;
  if (concept_idx == book.concepts.size())
    throw std::invalid_argument("role literal: unknown concept '" + args[2] + "'");
  if (args[3].size() != 1)
    throw std::invalid_argument("role literal: bad role '" + args[3] + "'");
  ResolvedAtom res;
  res.kind = AtomKind::Const;
  res.value = book.tasks[task].rules[rule].roles[concept_idx] ==
              rules::role_from_char(args[3][0]);
  return res;
}

inline ResolvedAtom resolve_atom(const rules::Rulebook& book,
                                 const std::string& atom) {
  if (atom.rfind("role(", 0) == 0) return resolve_role_literal(book, atom);
  for (std::size_t i = 0; i < book.concepts.size(); ++i)
    if (book.concepts[i] == atom) return {AtomKind::Concept, i, false};
  for (std::size_t t = 0; t < book.tasks.size(); ++t)
    if (book.tasks[t].name == atom) return {AtomKind::Task, t, false};
  throw std::invalid_argument("atom '" + atom +
                              "' does not name a concept, task or role literal");
}

// Formula compiled to a flat node list with pre-resolved atoms.
struct Compiled {
  struct Node {
    Formula::Kind kind;
    ResolvedAtom atom;
    std::size_t a = 0, b = 0;
  };
  std::vector<Node> nodes;
  std::size_t root = 0;

  static std::size_t build(const Formula& f, const rules::Rulebook& book,
                           Compiled& out) {
    Node n;
    n.kind = f.kind;
    if (f.kind == Formula::Kind::Atom) n.atom = resolve_atom(book, f.atom);
    if (!f.kids.empty()) n.a = build(f.kids[0], book, out);
    if (f.kids.size() > 1) n.b = build(f.kids[1], book, out);
    out.nodes.push_back(n);
    return out.nodes.size() - 1;
  }

  static Compiled compile(const Formula& f, const rules::Rulebook& book) {
    Compiled c;
    c.root = build(f, book, c);
    return c;
  }

  bool eval(const std::vector<std::uint8_t>& c,
            const std::vector<std::uint8_t>& y) const {
    std::vector<char> val(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const Node& n = nodes[i];
      switch (n.kind) {
        case Formula::Kind::True: val[i] = 1; break;
        case Formula::Kind::False: val[i] = 0; break;
        case Formula::Kind::Atom:
          val[i] = n.atom.kind == AtomKind::Concept ? c[n.atom.index] != 0
                   : n.atom.kind == AtomKind::Task  ? y[n.atom.index] != 0
                                                    : n.atom.value;
          break;
        case Formula::Kind::Not: val[i] = !val[n.a]; break;
        case Formula::Kind::And: val[i] = val[n.a] && val[n.b]; break;
        case Formula::Kind::Or: val[i] = val[n.a] || val[n.b]; break;
        case Formula::Kind::Implies: val[i] = !val[n.a] || val[n.b]; break;
        default: val[i] = val[n.a] == val[n.b]; break;
      }
    }
    return val[root] != 0;
  }
};

}  // namespace detail

// Enumerates concept assignments in lexicographic order (first concept most
// significant). For each assignment the per-task achievable truth values are
// computed from the rulebook; every combination of achievable task values
// corresponds to at least one adversarial rule selection, and the
// lexicographically smallest such selection witnesses a counterexample.
inline Verdict check_entailment(const rules::Rulebook& book, const Formula& prop,
                                std::size_t enumeration_cap = 24) {
  const std::size_t nc = book.n_concepts();
  const std::size_t nt = book.n_tasks();
  if (nc > enumeration_cap) {
    throw std::invalid_argument(
        "check_entailment: " + std::to_string(nc) + " concepts exceed the " +
        std::to_string(enumeration_cap) + "-concept enumeration cap");
  }
  for (const rules::TaskRules& t : book.tasks) {
    if (t.rules.empty())
      throw std::invalid_argument("check_entailment: task '" + t.name +
                                  "' has no rules");
  }
  detail::Compiled compiled = detail::Compiled::compile(prop, book);

  Verdict verdict;
  std::vector<std::uint8_t> c(nc, 0);
  std::vector<std::uint8_t> y(nt, 0);
  // first_sel[t][v]: smallest rule index of task t evaluating to v, if any.
  std::vector<std::array<std::optional<std::size_t>, 2>> first_sel(nt);
  const std::uint64_t n_assign = 1ull << nc;
  for (std::uint64_t mask = 0; mask < n_assign; ++mask) {
    for (std::size_t i = 0; i < nc; ++i)
      c[i] = (mask >> (nc - 1 - i)) & 1 ? 1 : 0;
    for (std::size_t t = 0; t < nt; ++t) {
      first_sel[t][0].reset();
      first_sel[t][1].reset();
      for (std::size_t j = 0; j < book.tasks[t].rules.size(); ++j) {
        const bool v = rules::evaluate(book.tasks[t].rules[j], c);
        if (!first_sel[t][v ? 1 : 0]) first_sel[t][v ? 1 : 0] = j;
        if (first_sel[t][0] && first_sel[t][1]) break;
      }
    }
    // Walk achievable task-value combinations; combo bits follow selection
    // lexicographic order because per-task candidates are tried smallest
    // selection index first.
    std::optional<std::vector<std::size_t>> best_sel;
    std::vector<std::uint8_t> best_y;
    std::size_t n_combos = 1;
    for (std::size_t t = 0; t < nt; ++t)
      n_combos *= (first_sel[t][0] && first_sel[t][1]) ? 2 : 1;
    for (std::size_t combo = 0; combo < n_combos; ++combo) {
      std::vector<std::size_t> sel(nt);
      std::size_t rem = combo;
      for (std::size_t t = 0; t < nt; ++t) {
        const bool both = first_sel[t][0] && first_sel[t][1];
        std::size_t pick;  // 0 = the smaller-index value first
        if (both) {
          pick = rem % 2;
          rem /= 2;
        } else {
          pick = 0;
        }
        std::size_t order[2];
        if (both) {
          const std::size_t a = *first_sel[t][0], b = *first_sel[t][1];
          order[0] = std::min(a, b);
          order[1] = std::max(a, b);
        } else {
          order[0] = order[1] =
              first_sel[t][0] ? *first_sel[t][0] : *first_sel[t][1];
        }
        sel[t] = order[pick];
        y[t] = rules::evaluate(book.tasks[t].rules[sel[t]], c) ? 1 : 0;
      }
      ++verdict.models_checked;
      if (!compiled.eval(c, y)) {
        if (!best_sel || std::lexicographical_compare(sel.begin(), sel.end(),
                                                      best_sel->begin(),
                                                      best_sel->end())) {
          best_sel = sel;
          best_y = y;
        }
      }
    }
    if (best_sel) {
      verdict.entailed = false;
      verdict.counterexample = TheoryModel{c, *best_sel};
      return verdict;
    }
  }
  return verdict;
}

// Independent straight-line truth-table cross-check: full enumeration of
// concept assignments and per-task rule selections, no shared evaluation
// code with check_entailment. Intended for small books (n_C <= 12).
inline Verdict check_oracle(const rules::Rulebook& book, const Formula& prop) {
  const std::size_t nc = book.n_concepts();
  const std::size_t nt = book.n_tasks();
  if (nc > 12) {
    throw std::invalid_argument("check_oracle: book has " + std::to_string(nc) +
                                " concepts; the oracle handles at most 12");
  }
  // Straight-line recursive evaluation over the raw AST.
  struct Eval {
    const rules::Rulebook& book;
    static bool run(const Formula& f, const rules::Rulebook& book,
                    const std::vector<std::uint8_t>& c,
                    const std::vector<std::uint8_t>& y) {
      switch (f.kind) {
        case Formula::Kind::True: return true;
        case Formula::Kind::False: return false;
        case Formula::Kind::Atom: {
          if (f.atom.rfind("role(", 0) == 0) {
            detail::ResolvedAtom a = detail::resolve_role_literal(book, f.atom);
            return a.value;
          }
          for (std::size_t i = 0; i < book.concepts.size(); ++i)
            if (book.concepts[i] == f.atom) return c[i] != 0;
          for (std::size_t t = 0; t < book.tasks.size(); ++t)
            if (book.tasks[t].name == f.atom) return y[t] != 0;
          throw std::invalid_argument("atom '" + f.atom + "' not declared");
        }
        case Formula::Kind::Not: return !run(f.kids[0], book, c, y);
        case Formula::Kind::And:
          return run(f.kids[0], book, c, y) && run(f.kids[1], book, c, y);
        case Formula::Kind::Or:
          return run(f.kids[0], book, c, y) || run(f.kids[1], book, c, y);
        case Formula::Kind::Implies:
          return !run(f.kids[0], book, c, y) || run(f.kids[1], book, c, y);
        default:
          return run(f.kids[0], book, c, y) == run(f.kids[1], book, c, y);
      }
    }
  };

  Verdict verdict;
  std::vector<std::uint8_t> c(nc, 0);
  std::vector<std::size_t> sel(nt, 0);
  std::vector<std::uint8_t> y(nt, 0);
  const std::uint64_t n_assign = 1ull << nc;
  for (std::uint64_t mask = 0; mask < n_assign; ++mask) {
    for (std::size_t i = 0; i < nc; ++i)
      c[i] = (mask >> (nc - 1 - i)) & 1 ? 1 : 0;
    sel.assign(nt, 0);
    while (true) {
      for (std::size_t t = 0; t < nt; ++t) {
        bool v = true;
        const rules::SymbolicRule& r = book.tasks[t].rules[sel[t]];
        for (std::size_t i = 0; i < nc; ++i) {
          if (r.roles[i] == rules::Role::P && !c[i]) v = false;
          if (r.roles[i] == rules::Role::N && c[i]) v = false;
        }
        y[t] = v ? 1 : 0;
      }
      ++verdict.models_checked;
      if (!Eval::run(prop, book, c, y)) {
        verdict.entailed = false;
        verdict.counterexample = TheoryModel{c, sel};
        return verdict;
      }
      // Advance the selection odometer, last task fastest.
      bool done = true;
      for (std::size_t t = nt; t > 0;) {
        --t;
        if (++sel[t] < book.tasks[t].rules.size()) {
          done = false;
          break;
        }
        sel[t] = 0;
      }
      if (done) break;
    }
  }
  return verdict;
}

// --- property files --------------------------------------------------------

struct PropertyResult {
  std::string source;
  Verdict verdict;
};

struct PropertyReport {
  std::vector<PropertyResult> results;
  bool all_entailed = true;
};

inline PropertyReport check_properties(const rules::Rulebook& book,
                                       std::istream& is) {
  PropertyReport report;
  std::string line;
  while (std::getline(is, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::size_t a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    std::size_t b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);
    Formula f = parse(line);
    PropertyResult res;
    res.source = line;
    res.verdict = check_entailment(book, f);
    report.all_entailed = report.all_entailed && res.verdict.entailed;
    report.results.push_back(std::move(res));
  }
  return report;
}

inline PropertyReport check_property_file(const rules::Rulebook& book,
                                          const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return check_properties(book, is);
}

inline nlohmann::json report_to_json(const PropertyReport& report,
                                     const rules::Rulebook& book) {
  nlohmann::json out;
  out["all_entailed"] = report.all_entailed;
  out["properties"] = nlohmann::json::array();
  for (const PropertyResult& r : report.results) {
    nlohmann::json j{{"formula", r.source},
                     {"entailed", r.verdict.entailed},
                     {"models_checked", r.verdict.models_checked}};
    if (r.verdict.counterexample) {
      const TheoryModel& m = *r.verdict.counterexample;
      nlohmann::json cx;
      cx["concepts"] = m.concepts;
      cx["selected"] = m.selected;
      cx["tasks"] = rules::global_predict(book, m.selected, m.concepts);
      j["counterexample"] = std::move(cx);
    }
    out["properties"].push_back(std::move(j));
  }
  return out;
}

}  // namespace rulemem::verify
