#pragma once

// Symbolic layer: conjunctive rules over concepts, decoded rulebooks, rule
// evaluation and the selector-gated global prediction. Each concept plays
// one of three roles in a rule: positive (P, must be true), negative (N,
// must be false) or irrelevant (I).

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace rulemem::rules {

enum class Role : std::uint8_t { P = 0, N = 1, I = 2 };

inline char role_char(Role r) {
  switch (r) {
    case Role::P: return 'P';
    case Role::N: return 'N';
    default: return 'I';
  }
}

inline Role role_from_char(char c) {
  switch (c) {
    case 'P': return Role::P;
    case 'N': return Role::N;
    case 'I': return Role::I;
    default:
      throw std::invalid_argument(std::string("unknown role '") + c + "'");
  }
}

enum class Provenance : std::uint8_t { Learned, Manual };

struct SymbolicRule {
  std::vector<Role> roles;
  Provenance provenance = Provenance::Learned;

  std::string role_string() const {
    std::string s;
    s.reserve(roles.size());
    for (Role r : roles) s.push_back(role_char(r));
    return s;
  }

  static SymbolicRule from_string(const std::string& s,
                                  Provenance prov = Provenance::Learned) {
    SymbolicRule r;
    r.provenance = prov;
    r.roles.reserve(s.size());
    for (char c : s) r.roles.push_back(role_from_char(c));
    return r;
  }
};

struct TaskRules {
  std::string name;
  std::vector<SymbolicRule> rules;
};

struct Rulebook {
  std::vector<std::string> concepts;
  std::vector<TaskRules> tasks;

  std::size_t n_concepts() const { return concepts.size(); }
  std::size_t n_tasks() const { return tasks.size(); }
};

// y <- AND_i [ (r_i = I) or ((r_i = P => c_i) and (r_i = N => !c_i)) ]
inline bool evaluate(const SymbolicRule& rule,
                     const std::vector<std::uint8_t>& c) {
  if (rule.roles.size() != c.size()) {
    throw std::invalid_argument(
        "evaluate: rule over " + std::to_string(rule.roles.size()) +
        " concepts applied to " + std::to_string(c.size()) + " bits");
  }
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (rule.roles[i] == Role::P && c[i] == 0) return false;
    if (rule.roles[i] == Role::N && c[i] != 0) return false;
  }
  return true;
}

// Argmax decode of one role distribution, tie broken in the fixed order
// P > N > I (first maximum wins).
inline Role decode_role(double p, double n, double i) {
  double best = p;
  Role r = Role::P;
  if (n > best) {
    best = n;
    r = Role::N;
  }
  if (i > best) r = Role::I;
  return r;
}

// One task bit per task: the selected rule's symbolic evaluation.
inline std::vector<std::uint8_t> global_predict(
    const Rulebook& book, const std::vector<std::size_t>& selected,
    const std::vector<std::uint8_t>& c) {
  if (selected.size() != book.tasks.size()) {
    throw std::invalid_argument("global_predict: need one selection per task");
  }
  std::vector<std::uint8_t> y(book.tasks.size(), 0);
  for (std::size_t t = 0; t < book.tasks.size(); ++t) {
    if (selected[t] >= book.tasks[t].rules.size()) {
      throw std::invalid_argument("global_predict: rule index " +
                                  std::to_string(selected[t]) +
                                  " out of range for task '" +
                                  book.tasks[t].name + "'");
    }
    y[t] = evaluate(book.tasks[t].rules[selected[t]], c) ? 1 : 0;
  }
  return y;
}

inline void add_manual_rule(Rulebook& book, std::size_t task,
                            SymbolicRule rule) {
  if (task >= book.tasks.size()) {
    throw std::invalid_argument("add_manual_rule: task index out of range");
  }
  if (rule.roles.size() != book.concepts.size()) {
    throw std::invalid_argument("add_manual_rule: rule length " +
                                std::to_string(rule.roles.size()) +
                                " does not match " +
                                std::to_string(book.concepts.size()) +
                                " concepts");
  }
  rule.provenance = Provenance::Manual;
  book.tasks[task].rules.push_back(std::move(rule));
}

// --- wire format -----------------------------------------------------------

inline nlohmann::json rulebook_to_json(const Rulebook& book) {
  nlohmann::json j;
  j["concepts"] = book.concepts;
  j["tasks"] = nlohmann::json::array();
  for (const TaskRules& t : book.tasks) {
    nlohmann::json jt;
    jt["name"] = t.name;
    jt["rules"] = nlohmann::json::array();
    for (const SymbolicRule& r : t.rules) {
      jt["rules"].push_back(
          {{"roles", r.role_string()},
           {"provenance",
            r.provenance == Provenance::Manual ? "manual" : "learned"}});
    }
    j["tasks"].push_back(std::move(jt));
  }
  return j;
}

inline Rulebook rulebook_from_json(const nlohmann::json& j) {
  Rulebook book;
  book.concepts = j.at("concepts").get<std::vector<std::string>>();
  for (const auto& jt : j.at("tasks")) {
    TaskRules t;
    t.name = jt.at("name").get<std::string>();
    for (const auto& jr : jt.at("rules")) {
      const std::string roles = jr.at("roles").get<std::string>();
      if (roles.size() != book.concepts.size()) {
        throw std::invalid_argument("rulebook: rule '" + roles +
                                    "' has wrong length for " +
                                    std::to_string(book.concepts.size()) +
                                    " concepts");
      }
      t.rules.push_back(SymbolicRule::from_string(
          roles, jr.value("provenance", "learned") == std::string("manual")
                     ? Provenance::Manual
                     : Provenance::Learned));
    }
    book.tasks.push_back(std::move(t));
  }
  return book;
}

inline void save_rulebook(const Rulebook& book, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os << rulebook_to_json(book).dump(2) << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }
}

inline Rulebook load_rulebook(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  is >> j;
  return rulebook_from_json(j);
}

// Human rendering: positive concepts shown plain, irrelevant ones between
// parentheses, negative ones omitted. An all-negative body renders as the
// empty rule "y <- ".
inline std::string render_rule(const SymbolicRule& rule,
                               const std::vector<std::string>& concepts,
                               const std::string& task_name) {
  std::ostringstream os;
  os << task_name << " <- ";
  bool first = true;
  for (std::size_t i = 0; i < rule.roles.size(); ++i) {
    if (rule.roles[i] == Role::N) continue;
    if (!first) os << " & ";
    if (rule.roles[i] == Role::P)
      os << concepts[i];
    else
      os << "(" << concepts[i] << ")";
    first = false;
  }
  if (rule.provenance == Provenance::Manual) os << "   [manual]";
  return os.str();
}

inline std::string render_rulebook(const Rulebook& book) {
  std::ostringstream os;
  for (const TaskRules& t : book.tasks) {
    for (const SymbolicRule& r : t.rules)
      os << render_rule(r, book.concepts, t.name) << "\n";
  }
  return os.str();
}

// Per-task set comparison of role strings, ignoring order and duplicates.
struct RecoveryScore {
  std::size_t matched = 0;
  std::size_t missing = 0;
  std::size_t spurious = 0;
};

inline RecoveryScore rule_recovery_score(const Rulebook& book,
                                         const Rulebook& reference) {
  RecoveryScore score;
  for (std::size_t t = 0; t < reference.tasks.size(); ++t) {
    std::vector<std::string> got, want;
    if (t < book.tasks.size())
      for (const SymbolicRule& r : book.tasks[t].rules)
        got.push_back(r.role_string());
    for (const SymbolicRule& r : reference.tasks[t].rules)
      want.push_back(r.role_string());
    std::sort(got.begin(), got.end());
    got.erase(std::unique(got.begin(), got.end()), got.end());
    std::sort(want.begin(), want.end());
    want.erase(std::unique(want.begin(), want.end()), want.end());
    for (const std::string& w : want) {
      if (std::binary_search(got.begin(), got.end(), w))
        ++score.matched;
      else
        ++score.missing;
    }
    for (const std::string& g : got) {
      if (!std::binary_search(want.begin(), want.end(), g)) ++score.spurious;
    }
  }
  return score;
}

}  // namespace rulemem::rules
