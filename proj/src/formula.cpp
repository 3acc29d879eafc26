#include "merlin/formula.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "merlin/error.hpp"

namespace merlin {

const char* to_string(LinkKind k) {
  switch (k) {
    case LinkKind::ev: return "EV";
    case LinkKind::dev: return "dEV";
    case LinkKind::d2ev: return "d2EV";
    case LinkKind::iev: return "iEV";
    case LinkKind::xb: return "XB";
    case LinkKind::dxb: return "dXB";
    case LinkKind::d2xb: return "d2XB";
    case LinkKind::ixb: return "iXB";
  }
  return "?";
}

bool link_uses_expected_value(LinkKind k) {
  return k == LinkKind::ev || k == LinkKind::dev || k == LinkKind::d2ev || k == LinkKind::iev;
}

int link_derivative_order(LinkKind k) {
  switch (k) {
    case LinkKind::ev:
    case LinkKind::xb: return 0;
    case LinkKind::dev:
    case LinkKind::dxb: return 1;
    case LinkKind::d2ev:
    case LinkKind::d2xb: return 2;
    default: return -1;
  }
}

const char* to_string(FamilyTag f) {
  switch (f) {
    case FamilyTag::gaussian: return "gaussian";
    case FamilyTag::bernoulli: return "bernoulli";
    case FamilyTag::poisson: return "poisson";
    case FamilyTag::exponential: return "exponential";
    case FamilyTag::weibull: return "weibull";
    case FamilyTag::gompertz: return "gompertz";
    case FamilyTag::rp: return "rp";
    case FamilyTag::rcs: return "rcs";
    case FamilyTag::user: return "user";
  }
  return "?";
}

bool ModelSpec::survival() const {
  switch (family.tag) {
    case FamilyTag::exponential:
    case FamilyTag::weibull:
    case FamilyTag::gompertz:
    case FamilyTag::rp:
    case FamilyTag::rcs: return true;
    case FamilyTag::user: return !family.hazard.empty();
    default: return false;
  }
}

namespace {

// ---------------------------------------------------------------- lexer

enum class Tok { ident, number, lparen, rparen, lbracket, rbracket, comma, hash, at, gt, end };

struct Token {
  Tok kind;
  std::string text;
  double number = 0;
  std::size_t pos = 0;
};

std::vector<Token> tokenize(const std::string& s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    std::size_t start = i;
    auto single = [&](Tok k) {
      out.push_back({k, std::string(1, c), 0, start});
      ++i;
    };
    switch (c) {
      case '(': single(Tok::lparen); continue;
      case ')': single(Tok::rparen); continue;
      case '[': single(Tok::lbracket); continue;
      case ']': single(Tok::rbracket); continue;
      case ',': single(Tok::comma); continue;
      case '#': single(Tok::hash); continue;
      case '@': single(Tok::at); continue;
      case '>': single(Tok::gt); continue;
      default: break;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_')) ++i;
      out.push_back({Tok::ident, s.substr(start, i - start), 0, start});
      continue;
    }
    bool sign = (c == '-' || c == '+') && i + 1 < s.size() &&
                (std::isdigit(static_cast<unsigned char>(s[i + 1])) || s[i + 1] == '.');
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' || sign) {
      if (sign) ++i;
      while (i < s.size() && (std::isdigit(static_cast<unsigned char>(s[i])) || s[i] == '.')) ++i;
      if (i < s.size() && (s[i] == 'e' || s[i] == 'E')) {
        std::size_t j = i + 1;
        if (j < s.size() && (s[j] == '+' || s[j] == '-')) ++j;
        if (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) {
          i = j;
          while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
        }
      }
      std::string text = s.substr(start, i - start);
      double v = 0;
      const char* b = text.data() + (text[0] == '+' ? 1 : 0);
      auto [p, ec] = std::from_chars(b, text.data() + text.size(), v);
      if (ec != std::errc() || p != text.data() + text.size())
        throw ParseError("invalid number '" + text + "' at position " + std::to_string(start));
      out.push_back({Tok::number, text, v, start});
      continue;
    }
    throw ParseError(std::string("unexpected character '") + c + "' at position " +
                     std::to_string(start));
  }
  out.push_back({Tok::end, "", 0, s.size()});
  return out;
}

std::string describe(const Token& t) {
  if (t.kind == Tok::end) return "end of input";
  return "'" + t.text + "' at position " + std::to_string(t.pos);
}

// ---------------------------------------------------------------- options

struct Option {
  std::string name;
  bool has_args = false;
  std::vector<Token> args;  // tokens between the parentheses, plus a trailing end token
  std::size_t pos = 0;
};

std::string canonical_option(const std::string& name) {
  static const std::map<std::string, std::string> aliases = {{"pow", "powers"},
                                                             {"ltrunc", "ltruncated"}};
  auto it = aliases.find(name);
  return it == aliases.end() ? name : it->second;
}

class Parser {
 public:
  explicit Parser(std::vector<Token> toks) : t_(std::move(toks)) {}

  const Token& peek(std::size_t ahead = 0) const {
    return t_[std::min(i_ + ahead, t_.size() - 1)];
  }
  bool at(Tok k) const { return peek().kind == k; }
  Token take() { return t_[std::min(i_++, t_.size() - 1)]; }
  Token expect(Tok k, const char* what) {
    if (!at(k)) throw ParseError(std::string("expected ") + what + ", found " + describe(peek()));
    return take();
  }

  // option := ident [ '(' ... ')' ] ; options separated by whitespace, optional commas
  std::vector<Option> options(std::initializer_list<Tok> stop) {
    std::vector<Option> out;
    std::set<std::string> seen;
    auto stopping = [&] {
      for (Tok s : stop)
        if (at(s)) return true;
      return false;
    };
    while (!stopping()) {
      if (at(Tok::comma)) {
        take();
        continue;
      }
      Token name = expect(Tok::ident, "an option name");
      Option opt;
      opt.name = canonical_option(name.text);
      opt.pos = name.pos;
      if (at(Tok::lparen)) {
        take();
        opt.has_args = true;
        int depth = 1;
        while (true) {
          if (at(Tok::end)) throw ParseError("unbalanced parentheses in option '" + name.text + "'");
          if (at(Tok::lparen)) ++depth;
          if (at(Tok::rparen) && --depth == 0) {
            take();
            break;
          }
          opt.args.push_back(take());
        }
      }
      opt.args.push_back({Tok::end, "", 0, opt.pos});
      if (!seen.insert(opt.name).second) throw ParseError("duplicate option '" + opt.name + "'");
      out.push_back(std::move(opt));
    }
    return out;
  }

  std::size_t index() const { return i_; }

 private:
  std::vector<Token> t_;
  std::size_t i_ = 0;
};

void require_args(const Option& o) {
  if (!o.has_args) throw ParseError("option '" + o.name + "' requires an argument");
}
void forbid_args(const Option& o) {
  if (o.has_args) throw ParseError("option '" + o.name + "' takes no argument");
}

std::vector<double> numlist(const Option& o) {
  require_args(o);
  std::vector<double> v;
  for (const auto& t : o.args) {
    if (t.kind == Tok::end) break;
    if (t.kind == Tok::comma) continue;
    if (t.kind != Tok::number)
      throw ParseError("option '" + o.name + "' expects numbers, found " + describe(t));
    v.push_back(t.number);
  }
  if (v.empty()) throw ParseError("option '" + o.name + "' requires at least one number");
  return v;
}

int integer_arg(const Option& o, int min_value) {
  auto v = numlist(o);
  if (v.size() != 1 || v[0] != std::floor(v[0]) || v[0] < min_value)
    throw ParseError("option '" + o.name + "' expects an integer >= " + std::to_string(min_value));
  return static_cast<int>(v[0]);
}

std::string name_arg(const Option& o) {
  require_args(o);
  if (o.args.size() != 2 || o.args[0].kind != Tok::ident)
    throw ParseError("option '" + o.name + "' expects a single name");
  return o.args[0].text;
}

bool ascending(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] > v[i - 1])) return false;
  return true;
}

const std::array<double, 8> kFpPowers = {-2, -1, -0.5, 0, 0.5, 1, 2, 3};

std::optional<LinkKind> link_kind(const std::string& s) {
  static const std::map<std::string, LinkKind> kinds = {
      {"EV", LinkKind::ev},   {"dEV", LinkKind::dev}, {"d2EV", LinkKind::d2ev},
      {"iEV", LinkKind::iev}, {"XB", LinkKind::xb},   {"dXB", LinkKind::dxb},
      {"d2XB", LinkKind::d2xb}, {"iXB", LinkKind::ixb}};
  auto it = kinds.find(s);
  if (it == kinds.end()) return std::nullopt;
  return it->second;
}

bool is_effect_name(const std::string& s) {
  return s.size() >= 2 && s[0] == 'M' &&
         std::all_of(s.begin() + 1, s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

ElementSpec basis_element(ElementKind kind, const std::string& fname, Parser& p) {
  ElementSpec e;
  e.kind = kind;
  p.expect(Tok::lparen, "'('");
  e.variable = p.expect(Tok::ident, "a variable name").text;
  std::vector<Option> opts;
  if (p.at(Tok::comma)) {
    p.take();
    opts = p.options({Tok::rparen, Tok::end});
  }
  if (!p.at(Tok::rparen)) throw ParseError("unbalanced parentheses in " + fname + "()");
  p.take();

  auto& o = e.options;
  for (const auto& opt : opts) {
    const std::string& n = opt.name;
    bool spline = kind == ElementKind::rcs || kind == ElementKind::bs;
    if (spline && n == "df") {
      o.df = integer_arg(opt, 1);
    } else if (spline && n == "knots") {
      o.knots = numlist(opt);
    } else if (kind == ElementKind::bs && n == "bknots") {
      o.bknots = numlist(opt);
    } else if (spline && n == "log") {
      forbid_args(opt);
      o.log = true;
    } else if (kind == ElementKind::rcs && n == "orthog") {
      forbid_args(opt);
      o.orthog = true;
    } else if (spline && n == "event") {
      forbid_args(opt);
      o.event = true;
    } else if (kind == ElementKind::bs && n == "intercept") {
      forbid_args(opt);
      o.intercept = true;
    } else if (n == "offset") {
      o.offset = name_arg(opt);
    } else if (kind == ElementKind::fp && n == "powers") {
      o.powers = numlist(opt);
    } else {
      throw ParseError("unknown option '" + n + "' for " + fname + "()");
    }
  }

  if (kind == ElementKind::rcs) {
    if (o.df.has_value() == !o.knots.empty())
      throw ParseError("rcs(): specify exactly one of df() or knots()");
    if (!o.knots.empty() && (o.knots.size() < 2 || !ascending(o.knots)))
      throw ParseError("rcs(): knots() needs at least two ascending values including boundaries");
  } else if (kind == ElementKind::bs) {
    if (o.df && !o.knots.empty()) throw ParseError("bs(): df() and knots() are mutually exclusive");
    if (!ascending(o.knots)) throw ParseError("bs(): knots() must be ascending");
    if (!o.bknots.empty() && (o.bknots.size() != 2 || !ascending(o.bknots)))
      throw ParseError("bs(): bknots() must be an ascending pair");
  } else if (kind == ElementKind::fp) {
    if (o.powers.empty() || o.powers.size() > 2)
      throw ParseError("fp(): powers() needs one or two powers");
    for (double pw : o.powers)
      if (std::find(kFpPowers.begin(), kFpPowers.end(), pw) == kFpPowers.end())
        throw ParseError("fp(): power " + std::to_string(pw) +
                         " not in {-2,-1,-0.5,0,0.5,1,2,3}");
  }
  if (o.event && !o.df) throw ParseError(fname + "(): event requires df()");
  return e;
}

ElementSpec parse_element(Parser& p) {
  Token name = p.expect(Tok::ident, "an element");
  if (p.at(Tok::lparen)) {
    if (name.text == "rcs") return basis_element(ElementKind::rcs, "rcs", p);
    if (name.text == "bs") return basis_element(ElementKind::bs, "bs", p);
    if (name.text == "fp") return basis_element(ElementKind::fp, "fp", p);
    if (name.text == "mf") {
      p.take();
      ElementSpec e;
      e.kind = ElementKind::user;
      e.variable = p.expect(Tok::ident, "a function name").text;
      p.expect(Tok::rparen, "')'");
      return e;
    }
    throw ParseError("unknown element '" + name.text + "()' at position " + std::to_string(name.pos));
  }
  if (p.at(Tok::lbracket)) {
    p.take();
    ElementSpec e;
    if (auto lk = link_kind(name.text)) {
      e.kind = ElementKind::link;
      e.link = *lk;
      Token t = p.take();
      if (t.kind == Tok::ident) {
        e.target = t.text;
      } else if (t.kind == Tok::number && t.number == std::floor(t.number) && t.number >= 1) {
        e.target = t.text;
      } else {
        throw ParseError(name.text + "[]: expected a response name or model index, found " +
                         describe(t));
      }
    } else if (is_effect_name(name.text)) {
      e.kind = ElementKind::random_effect;
      e.effect = name.text;
      e.level_path.push_back(p.expect(Tok::ident, "a cluster variable").text);
      while (p.at(Tok::gt)) {
        p.take();
        e.level_path.push_back(p.expect(Tok::ident, "a cluster variable").text);
      }
    } else {
      throw ParseError("unknown element '" + name.text + "[]' at position " +
                       std::to_string(name.pos));
    }
    p.expect(Tok::rbracket, "']'");
    return e;
  }
  if (link_kind(name.text) || is_effect_name(name.text))
    throw ParseError("element '" + name.text + "' requires [...]");
  ElementSpec e;
  e.kind = ElementKind::variable;
  e.variable = name.text;
  return e;
}

ComponentSpec parse_component(Parser& p) {
  ComponentSpec c;
  c.elements.push_back(parse_element(p));
  while (p.at(Tok::hash)) {
    p.take();
    c.elements.push_back(parse_element(p));
  }
  if (p.at(Tok::at)) {
    p.take();
    Token v = p.take();
    if (v.kind != Tok::number) throw ParseError("'@' must be followed by a number, found " + describe(v));
    if (!std::isfinite(v.number)) throw ParseError("'@' constraint must be finite");
    c.constraint = v.number;
    if (p.at(Tok::hash))
      throw ParseError("a constraint may only appear at the end of a component");
    if (p.at(Tok::at)) throw ParseError("at most one constraint per component");
  }
  return c;
}

FamilySpec parse_family(const Option& opt) {
  require_args(opt);
  Parser p(opt.args);
  Token name = p.expect(Tok::ident, "a family name");
  FamilySpec f;
  static const std::map<std::string, FamilyTag> tags = {
      {"gaussian", FamilyTag::gaussian}, {"bernoulli", FamilyTag::bernoulli},
      {"poisson", FamilyTag::poisson},   {"exponential", FamilyTag::exponential},
      {"weibull", FamilyTag::weibull},   {"gompertz", FamilyTag::gompertz},
      {"rp", FamilyTag::rp},             {"rcs", FamilyTag::rcs},
      {"user", FamilyTag::user}};
  auto it = tags.find(name.text);
  if (it == tags.end()) throw ParseError("unknown family '" + name.text + "'");
  f.tag = it->second;
  std::vector<Option> opts;
  if (p.at(Tok::comma)) {
    p.take();
    opts = p.options({Tok::end});
  }
  if (!p.at(Tok::end)) throw ParseError("unexpected " + describe(p.peek()) + " in family()");
  const bool spline = f.tag == FamilyTag::rp || f.tag == FamilyTag::rcs;
  for (const auto& o : opts) {
    if (o.name == "failure") {
      f.failure = name_arg(o);
    } else if (o.name == "ltruncated") {
      f.ltruncated = name_arg(o);
    } else if (spline && o.name == "df") {
      f.df = integer_arg(o, 1);
    } else if (spline && o.name == "knots") {
      f.knots = numlist(o);
    } else if (spline && o.name == "orthog") {
      forbid_args(o);
      f.orthog = true;
    } else if (f.tag == FamilyTag::user && o.name == "nap") {
      f.nap = integer_arg(o, 0);
    } else if (f.tag == FamilyTag::user && o.name == "llfunction") {
      f.llfunction = name_arg(o);
    } else if (f.tag == FamilyTag::user && o.name == "hazard") {
      f.hazard = name_arg(o);
    } else if (f.tag == FamilyTag::user && o.name == "chazard") {
      f.chazard = name_arg(o);
    } else {
      throw ParseError("unknown option '" + o.name + "' for family(" + name.text + ")");
    }
  }
  ModelSpec probe;
  probe.family = f;
  const bool survival = probe.survival();
  if (f.tag == FamilyTag::user) {
    if (f.llfunction.empty() == f.hazard.empty())
      throw ParseError("family(user) needs exactly one of llfunction() or hazard()");
    if (!f.chazard.empty() && f.hazard.empty())
      throw ParseError("family(user): chazard() requires hazard()");
  }
  if (survival && !f.failure) throw ParseError("family(" + name.text + ") requires failure()");
  if (!survival && f.tag != FamilyTag::user && (f.failure || f.ltruncated))
    throw ParseError("failure()/ltruncated() are only valid for survival families");
  if (!survival && f.ltruncated) throw ParseError("ltruncated() requires a survival family");
  if (spline) {
    if (f.df.has_value() == !f.knots.empty())
      throw ParseError("family(" + name.text + ") requires exactly one of df() or knots()");
    if (!f.knots.empty() && (f.knots.size() < 2 || !ascending(f.knots)))
      throw ParseError("family(" + name.text + "): knots() needs ascending boundary and interior knots");
  }
  return f;
}

ModelSpec parse_model(Parser& p) {
  p.expect(Tok::lparen, "'(' starting a model");
  ModelSpec m;
  const Token& first = p.peek();
  const Tok next = p.peek(1).kind;
  if (first.kind == Tok::ident && next != Tok::lparen && next != Tok::lbracket &&
      next != Tok::hash && next != Tok::at) {
    if (link_kind(first.text) || is_effect_name(first.text))
      throw ParseError("element '" + first.text + "' requires [...]");
    m.response = p.take().text;
  }
  while (!p.at(Tok::comma) && !p.at(Tok::rparen)) {
    if (p.at(Tok::end)) throw ParseError("unbalanced parentheses: model is not closed");
    if (p.at(Tok::at)) throw ParseError("'@' must follow an element");
    m.components.push_back(parse_component(p));
  }
  bool have_family = false;
  if (p.at(Tok::comma)) {
    p.take();
    for (const auto& o : p.options({Tok::rparen, Tok::end})) {
      if (o.name == "family") {
        m.family = parse_family(o);
        have_family = true;
      } else if (o.name == "timevar") {
        m.timevar = name_arg(o);
      } else if (o.name == "noconstant" || o.name == "nocons") {
        forbid_args(o);
        m.has_constant = false;
      } else {
        throw ParseError("unknown model option '" + o.name + "'");
      }
    }
  }
  if (!p.at(Tok::rparen)) throw ParseError("unbalanced parentheses: model is not closed");
  p.take();
  if (!have_family) throw ParseError("model '" + m.response + "' has no family() option");
  if (m.response.empty() && m.family.tag != FamilyTag::user)
    throw ParseError("model has no response variable");
  return m;
}

GlobalOptions parse_globals(Parser& p) {
  GlobalOptions g;
  for (const auto& o : p.options({Tok::end})) {
    if (o.name == "covariance") {
      std::string v = name_arg(o);
      if (v == "diagonal") g.covariance = CovarianceStructure::diagonal;
      else if (v == "unstructured") g.covariance = CovarianceStructure::unstructured;
      else throw ParseError("unsupported covariance structure '" + v + "'");
    } else if (o.name == "intpoints") {
      g.intpoints = integer_arg(o, 1);
    } else if (o.name == "intmethod") {
      std::string v = name_arg(o);
      if (v == "mvaghermite" || v == "aghermite") g.adaptive = true;
      else if (v == "ghermite") g.adaptive = false;
      else throw ParseError("unknown intmethod '" + v + "'");
    } else if (o.name == "chintpoints") {
      g.chintpoints = integer_arg(o, 1);
    } else if (o.name == "nolog") {
      forbid_args(o);
      g.nolog = true;
    } else {
      throw ParseError("unknown option '" + o.name + "'");
    }
  }
  return g;
}

int effect_number(const std::string& name) { return std::stoi(name.substr(1)); }

void collect_effects(ModelGraph& g) {
  std::map<std::string, std::vector<std::string>> paths;
  for (const auto& m : g.models)
    for (const auto& c : m.components)
      for (const auto& e : c.elements) {
        if (e.kind != ElementKind::random_effect) continue;
        auto [it, inserted] = paths.emplace(e.effect, e.level_path);
        if (!inserted && it->second != e.level_path)
          throw ParseError("random effect " + e.effect + " is used at two different levels");
      }
  std::vector<std::string> longest;
  for (const auto& [name, path] : paths)
    if (path.size() > longest.size()) longest = path;
  for (const auto& [name, path] : paths)
    if (!std::equal(path.begin(), path.end(), longest.begin()))
      throw ParseError("random effect levels do not form a single nested hierarchy");
  if (longest.size() > 2) throw ParseError("at most two nested random-effect levels are supported");
  g.levels = longest;
  g.effects.clear();
  for (const auto& [name, path] : paths) g.effects.push_back({name, path});
  std::sort(g.effects.begin(), g.effects.end(), [](const auto& a, const auto& b) {
    if (a.level_path.size() != b.level_path.size()) return a.level_path.size() < b.level_path.size();
    return effect_number(a.name) < effect_number(b.name);
  });
}

std::string num(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string numlist_text(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + num(v[i]);
  return s;
}

std::string render_element(const ElementSpec& e) {
  switch (e.kind) {
    case ElementKind::variable: return e.variable;
    case ElementKind::random_effect: {
      std::string s = e.effect + "[";
      for (std::size_t i = 0; i < e.level_path.size(); ++i) s += (i ? ">" : "") + e.level_path[i];
      return s + "]";
    }
    case ElementKind::link: return std::string(to_string(e.link)) + "[" + e.target + "]";
    case ElementKind::user: return "mf(" + e.variable + ")";
    default: break;
  }
  const auto& o = e.options;
  std::vector<std::string> opts;
  if (o.df) opts.push_back("df(" + std::to_string(*o.df) + ")");
  if (!o.knots.empty()) opts.push_back("knots(" + numlist_text(o.knots) + ")");
  if (!o.bknots.empty()) opts.push_back("bknots(" + numlist_text(o.bknots) + ")");
  if (!o.powers.empty()) opts.push_back("powers(" + numlist_text(o.powers) + ")");
  if (o.log) opts.push_back("log");
  if (o.orthog) opts.push_back("orthog");
  if (o.event) opts.push_back("event");
  if (o.intercept) opts.push_back("intercept");
  if (o.offset) opts.push_back("offset(" + *o.offset + ")");
  std::string s = (e.kind == ElementKind::rcs ? "rcs(" : e.kind == ElementKind::bs ? "bs(" : "fp(") + e.variable;
  if (!opts.empty()) {
    s += ", ";
    for (std::size_t i = 0; i < opts.size(); ++i) s += (i ? " " : "") + opts[i];
  }
  return s + ")";
}

}  // namespace

std::string render(const ModelSpec& m) {
  std::string s = "(" + m.response;
  for (const auto& c : m.components) {
    if (!s.empty() && s.back() != '(') s += " ";
    for (std::size_t i = 0; i < c.elements.size(); ++i) s += (i ? "#" : "") + render_element(c.elements[i]);
    if (c.constraint) s += "@" + num(*c.constraint);
  }
  const auto& f = m.family;
  std::vector<std::string> fo;
  if (f.failure) fo.push_back("failure(" + *f.failure + ")");
  if (f.ltruncated) fo.push_back("ltruncated(" + *f.ltruncated + ")");
  if (f.df) fo.push_back("df(" + std::to_string(*f.df) + ")");
  if (!f.knots.empty()) fo.push_back("knots(" + numlist_text(f.knots) + ")");
  if (f.orthog) fo.push_back("orthog");
  if (f.nap > 0) fo.push_back("nap(" + std::to_string(f.nap) + ")");
  if (!f.llfunction.empty()) fo.push_back("llfunction(" + f.llfunction + ")");
  if (!f.hazard.empty()) fo.push_back("hazard(" + f.hazard + ")");
  if (!f.chazard.empty()) fo.push_back("chazard(" + f.chazard + ")");
  s += ", family(" + std::string(to_string(f.tag));
  if (!fo.empty()) {
    s += ",";
    for (const auto& o : fo) s += " " + o;
  }
  s += ")";
  if (m.timevar) s += " timevar(" + *m.timevar + ")";
  if (!m.has_constant) s += " noconstant";
  return s + ")";
}

std::string render(const ModelGraph& g) {
  std::string s;
  for (std::size_t i = 0; i < g.models.size(); ++i) s += (i ? " " : "") + render(g.models[i]);
  std::vector<std::string> opts;
  const auto& o = g.options;
  if (o.covariance == CovarianceStructure::unstructured) opts.push_back("covariance(unstructured)");
  if (o.intpoints) opts.push_back("intpoints(" + std::to_string(*o.intpoints) + ")");
  if (o.adaptive) opts.push_back(*o.adaptive ? "intmethod(mvaghermite)" : "intmethod(ghermite)");
  if (o.chintpoints) opts.push_back("chintpoints(" + std::to_string(*o.chintpoints) + ")");
  if (o.nolog) opts.push_back("nolog");
  if (!opts.empty()) {
    s += ",";
    for (const auto& x : opts) s += " " + x;
  }
  return s;
}

ModelGraph parse_spec(const std::string& text) {
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw ParseError("empty model text");
  {
    int depth = 0;
    for (char c : text) {
      if (c == '(') ++depth;
      if (c == ')' && --depth < 0) throw ParseError("unbalanced parentheses: unexpected ')'");
    }
    if (depth != 0) throw ParseError("unbalanced parentheses: missing ')'");
  }
  Parser p(tokenize(text));
  ModelGraph g;
  if (!p.at(Tok::lparen)) throw ParseError("expected '(' starting a model, found " + describe(p.peek()));
  while (p.at(Tok::lparen)) g.models.push_back(parse_model(p));
  if (p.at(Tok::comma)) {
    p.take();
    g.options = parse_globals(p);
  }
  if (!p.at(Tok::end)) throw ParseError("unexpected " + describe(p.peek()));
  collect_effects(g);
  return g;
}

void resolve_links(ModelGraph& g) {
  const std::size_t n = g.models.size();
  g.edges.clear();
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& c : g.models[i].components) {
      for (auto& e : c.elements) {
        if (e.kind != ElementKind::link) continue;
        std::size_t target = 0;
        if (std::isdigit(static_cast<unsigned char>(e.target[0]))) {
          std::size_t k = std::stoul(e.target);
          if (k < 1 || k > n)
            throw ValidationError(std::string(to_string(e.link)) + "[" + e.target +
                                  "]: no model with that index");
          target = k - 1;
        } else {
          std::vector<std::size_t> hits;
          for (std::size_t j = 0; j < n; ++j)
            if (g.models[j].response == e.target) hits.push_back(j);
          if (hits.empty())
            throw ValidationError(std::string(to_string(e.link)) + "[" + e.target +
                                  "]: no model has response '" + e.target + "'");
          if (hits.size() > 1)
            throw ValidationError(std::string(to_string(e.link)) + "[" + e.target +
                                  "]: several models have that response; use the model index");
          target = hits[0];
        }
        if (target == i)
          throw ValidationError("model " + std::to_string(i + 1) + " links to itself");
        if (link_uses_expected_value(e.link) && g.models[target].survival())
          throw ValidationError(std::string(to_string(e.link)) + "[" + e.target +
                                "]: expected value of a survival model is not defined; use XB");
        e.target_index = target;
        g.edges.push_back({i, target, e.link});
      }
    }
  }
  // cycle check (DFS colouring)
  std::vector<int> colour(n, 0);
  std::function<void(std::size_t)> visit = [&](std::size_t v) {
    colour[v] = 1;
    for (const auto& ed : g.edges) {
      if (ed.from != v) continue;
      if (colour[ed.to] == 1)
        throw ValidationError("cyclic links between models " + std::to_string(ed.from + 1) +
                              " and " + std::to_string(ed.to + 1));
      if (colour[ed.to] == 0) visit(ed.to);
    }
    colour[v] = 2;
  };
  for (std::size_t v = 0; v < n; ++v)
    if (colour[v] == 0) visit(v);
}

std::vector<std::string> referenced_variables(const ModelSpec& m, bool include_outcomes) {
  std::set<std::string> vars;
  for (const auto& c : m.components)
    for (const auto& e : c.elements) {
      switch (e.kind) {
        case ElementKind::variable:
        case ElementKind::rcs:
        case ElementKind::bs:
        case ElementKind::fp:
          vars.insert(e.variable);
          if (e.options.offset) vars.insert(*e.options.offset);
          break;
        default: break;
      }
    }
  if (m.timevar) vars.insert(*m.timevar);
  if (include_outcomes) {
    if (!m.response.empty()) vars.insert(m.response);
    if (m.family.failure) vars.insert(*m.family.failure);
    if (m.family.ltruncated) vars.insert(*m.family.ltruncated);
  } else {
    vars.erase(m.response);
  }
  return {vars.begin(), vars.end()};
}

std::vector<std::string> referenced_variables(const ModelGraph& g, bool include_outcomes) {
  std::set<std::string> vars;
  for (const auto& m : g.models)
    for (auto& v : referenced_variables(m, include_outcomes)) vars.insert(v);
  for (const auto& l : g.levels) vars.insert(l);
  return {vars.begin(), vars.end()};
}

std::vector<std::vector<bool>> level_dependence(const ModelGraph& g) {
  const std::size_t n = g.models.size();
  std::vector<std::vector<bool>> dep(n, std::vector<bool>(g.levels.size(), false));
  std::vector<int> done(n, 0);
  std::function<void(std::size_t)> visit = [&](std::size_t m) {
    if (done[m]) return;
    done[m] = 1;
    for (const auto& c : g.models[m].components)
      for (const auto& e : c.elements) {
        if (e.kind == ElementKind::random_effect) {
          dep[m][e.level_path.size() - 1] = true;
        } else if (e.kind == ElementKind::link && e.target_index) {
          visit(*e.target_index);
          for (std::size_t l = 0; l < g.levels.size(); ++l)
            if (dep[*e.target_index][l]) dep[m][l] = true;
        }
      }
  };
  for (std::size_t m = 0; m < n; ++m) visit(m);
  return dep;
}

namespace {

// Covariates needed on a model's rows, including those of linked models.
void linked_covariates(const ModelGraph& g, std::size_t m, bool host_supplies_time,
                       std::set<std::string>& out, std::set<std::size_t>& seen) {
  if (!seen.insert(m).second) return;
  const auto& spec = g.models[m];
  for (auto& v : referenced_variables(spec, false)) {
    if (host_supplies_time && spec.timevar && v == *spec.timevar) continue;
    out.insert(v);
  }
  for (const auto& c : spec.components)
    for (const auto& e : c.elements)
      if (e.kind == ElementKind::link && e.target_index)
        linked_covariates(g, *e.target_index, host_supplies_time || spec.timevar.has_value(), out, seen);
}

}  // namespace

ValidatedGraph validate(ModelGraph g, const Dataset& d) {
  resolve_links(g);
  for (const auto& v : referenced_variables(g, true))
    if (!d.has_column(v)) throw ValidationError("unknown variable '" + v + "'");

  const std::size_t n = g.models.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& m = g.models[i];
    const std::string tag = "model " + std::to_string(i + 1) + " (" + m.response + ")";
    if (m.survival() && m.timevar && *m.timevar != m.response)
      throw ValidationError(tag + ": timevar() must name the survival time variable '" + m.response + "'");
    for (const auto& c : m.components)
      for (const auto& e : c.elements) {
        bool basis = e.kind == ElementKind::variable || e.kind == ElementKind::rcs ||
                     e.kind == ElementKind::bs || e.kind == ElementKind::fp;
        if (basis && m.survival() && e.variable == m.response && !m.timevar)
          throw ValidationError(tag + ": element uses the survival time '" + m.response +
                                "'; specify timevar(" + m.response + ")");
        if (e.options.event && !m.family.failure)
          throw ValidationError(tag + ": the event option needs a model with failure()");
        if (e.kind == ElementKind::link) {
          const auto& target = g.models[*e.target_index];
          bool timed = link_derivative_order(e.link) != 0;
          if ((m.survival() || timed) && !m.timevar)
            throw ValidationError(tag + ": " + to_string(e.link) + "[] requires timevar() in this model");
          if ((m.survival() || timed) && !target.timevar)
            throw ValidationError(tag + ": " + to_string(e.link) + "[" + e.target +
                                  "] requires timevar() in the linked model");
        }
      }
  }

  ValidatedGraph out;
  out.rows.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& m = g.models[i];
    const std::string tag = "model " + std::to_string(i + 1) + " (" + m.response + ")";
    std::vector<std::string> responses;
    if (!m.response.empty()) responses.push_back(m.response);
    if (m.family.failure) responses.push_back(*m.family.failure);
    if (m.family.ltruncated) responses.push_back(*m.family.ltruncated);
    std::set<std::string> covs;
    std::set<std::size_t> seen;
    linked_covariates(g, i, false, covs, seen);
    for (const auto& r : responses) covs.erase(r);
    std::vector<std::string> cov_list(covs.begin(), covs.end());
    RowSet rows = responses.empty() ? model_rows(d, {}, cov_list) : model_rows(d, responses, {});
    for (std::size_t r : rows)
      for (const auto& v : cov_list)
        if (d.is_missing(v, r))
          throw ValidationError(tag + ": covariate '" + v + "' is missing on row " +
                                std::to_string(r + 1) + " where the response is observed");
    if (rows.empty()) throw ValidationError(tag + ": no usable observations");

    auto y = m.response.empty() ? std::span<const double>() : d.column(m.response);
    if (m.survival()) {
      auto ev = d.column(*m.family.failure);
      for (std::size_t r : rows) {
        if (!(y[r] > 0)) throw ValidationError(tag + ": survival time must be > 0 (row " + std::to_string(r + 1) + ")");
        if (ev[r] != 0 && ev[r] != 1)
          throw ValidationError(tag + ": event indicator must be 0/1 (row " + std::to_string(r + 1) + ")");
        if (m.family.ltruncated) {
          double t0 = d.column(*m.family.ltruncated)[r];
          if (!(t0 >= 0 && t0 < y[r]))
            throw ValidationError(tag + ": entry time must satisfy 0 <= t0 < t (row " + std::to_string(r + 1) + ")");
        }
      }
    } else if (m.family.tag == FamilyTag::bernoulli) {
      for (std::size_t r : rows)
        if (y[r] != 0 && y[r] != 1)
          throw ValidationError(tag + ": bernoulli response must be 0/1 (row " + std::to_string(r + 1) + ")");
    } else if (m.family.tag == FamilyTag::poisson) {
      for (std::size_t r : rows)
        if (y[r] < 0 || y[r] != std::floor(y[r]))
          throw ValidationError(tag + ": poisson response must be a non-negative integer (row " +
                                std::to_string(r + 1) + ")");
    }
    out.rows[i] = std::move(rows);
  }

  if (!g.levels.empty()) {
    auto dep = level_dependence(g);
    std::set<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i)
      if (std::find(dep[i].begin(), dep[i].end(), true) != dep[i].end())
        rows.insert(out.rows[i].begin(), out.rows[i].end());
    try {
      out.clusters = build_cluster_index(d, g.levels, RowSet(rows.begin(), rows.end()));
    } catch (const DataError& e) {
      throw ValidationError(e.what());
    }
  }
  out.graph = std::move(g);
  return out;
}

}  // namespace merlin
