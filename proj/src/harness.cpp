#include "styleshift/harness.hpp"

#include "styleshift/image_io.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace styleshift {

using json = nlohmann::json;

// ---------------------------------------------------------------- annotations and roster

std::string to_string(Annotation a) {
  switch (a) {
    case Annotation::supervised_original: return "supervised-seen-original";
    case Annotation::supervised_adapted: return "supervised-seen-adapted";
    case Annotation::unsupervised: return "unsupervised-seen";
    default: return "unseen";
  }
}

Annotation parse_annotation(const std::string& text) {
  for (auto a : {Annotation::supervised_original, Annotation::supervised_adapted, Annotation::unsupervised, Annotation::unseen})
    if (to_string(a) == text) return a;
  throw std::invalid_argument("unknown annotation " + text);
}

std::vector<std::string> ModelSpec::supervised() const {
  std::vector<std::string> out{source};
  if (!source_adapted.empty()) out.push_back(source_adapted);
  return out;
}

std::vector<std::string> ModelSpec::unsupervised() const {
  std::vector<std::string> out;
  if (!target.empty()) out.push_back(target);
  if (!target_adapted.empty()) out.push_back(target_adapted);
  return out;
}

Annotation annotate(const ModelSpec& model, const std::string& dataset) {
  if (dataset == model.source) return Annotation::supervised_original;
  if (!model.source_adapted.empty() && dataset == model.source_adapted) return Annotation::supervised_adapted;
  const auto u = model.unsupervised();
  if (std::find(u.begin(), u.end(), dataset) != u.end()) return Annotation::unsupervised;
  return Annotation::unseen;
}

std::optional<AdaptedName> parse_adapted_name(const std::string& name) {
  const auto at = name.find('@');
  if (at == std::string::npos) return std::nullopt;
  const auto colon = name.find(':', at);
  if (colon == std::string::npos) throw std::invalid_argument("adapted dataset " + name + " must look like X@S:T");
  AdaptedName a{name.substr(0, at), name.substr(at + 1, colon - at - 1), name.substr(colon + 1)};
  if (a.dataset.empty() || a.source.empty() || a.target.empty())
    throw std::invalid_argument("adapted dataset " + name + " must look like X@S:T");
  if (a.dataset != a.source && a.dataset != a.target)
    throw std::invalid_argument("adapted dataset " + name + ": " + a.dataset + " is not part of pair " + a.pair());
  return a;
}

// ---------------------------------------------------------------- transfer matrix

const TransferCell& TransferMatrix::at(const std::string& dataset, const std::string& model) const {
  const auto r = std::find(datasets.begin(), datasets.end(), dataset);
  const auto c = std::find(models.begin(), models.end(), model);
  if (r == datasets.end() || c == models.end()) throw std::out_of_range("no cell " + dataset + " / " + model);
  return cells[static_cast<std::size_t>(r - datasets.begin())][static_cast<std::size_t>(c - models.begin())];
}

std::size_t TransferMatrix::best_column(std::size_t row, int k) const {
  std::size_t best = 0;
  for (std::size_t c = 1; c < models.size(); ++c)
    if (cells[row][c].accuracy.at(k) > cells[row][best].accuracy.at(k)) best = c;
  return best;
}

json to_json(const TransferMatrix& m) {
  json cells = json::array();
  for (std::size_t r = 0; r < m.datasets.size(); ++r)
    for (std::size_t c = 0; c < m.models.size(); ++c) {
      const auto& cell = m.cells[r][c];
      json acc = json::object(), per = json::object();
      for (const auto& [k, v] : cell.accuracy) acc[std::to_string(k)] = v;
      for (const auto& [k, v] : cell.per_seed) per[std::to_string(k)] = v;
      cells.push_back({{"dataset", m.datasets[r]},
                       {"model", m.models[c]},
                       {"accuracy", acc},
                       {"per_seed", per},
                       {"annotation", to_string(cell.annotation)},
                       {"provenance", cell.provenance}});
    }
  return {{"datasets", m.datasets}, {"models", m.models}, {"topk", m.ks}, {"seeds", m.seeds}, {"cells", cells}};
}

TransferMatrix transfer_matrix_from_json(const json& j) {
  TransferMatrix m;
  m.datasets = j.at("datasets").get<std::vector<std::string>>();
  m.models = j.at("models").get<std::vector<std::string>>();
  m.ks = j.at("topk").get<std::vector<int>>();
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.cells.assign(m.datasets.size(), std::vector<TransferCell>(m.models.size()));
  for (const auto& cj : j.at("cells")) {
    const auto r = static_cast<std::size_t>(std::find(m.datasets.begin(), m.datasets.end(), cj.at("dataset").get<std::string>()) - m.datasets.begin());
    const auto c = static_cast<std::size_t>(std::find(m.models.begin(), m.models.end(), cj.at("model").get<std::string>()) - m.models.begin());
    if (r >= m.datasets.size() || c >= m.models.size()) throw std::runtime_error("matrix cell references an unknown row or column");
    auto& cell = m.cells[r][c];
    for (const auto& [k, v] : cj.at("accuracy").items()) cell.accuracy[std::stoi(k)] = v.get<double>();
    for (const auto& [k, v] : cj.at("per_seed").items()) cell.per_seed[std::stoi(k)] = v.get<std::vector<double>>();
    cell.annotation = parse_annotation(cj.at("annotation").get<std::string>());
    cell.provenance = cj.at("provenance").get<std::string>();
  }
  return m;
}

double max_cell_difference(const TransferMatrix& a, const TransferMatrix& b) {
  if (a.datasets != b.datasets || a.models != b.models || a.ks != b.ks) throw std::invalid_argument("transfer matrices differ in shape");
  double worst = 0;
  for (std::size_t r = 0; r < a.datasets.size(); ++r)
    for (std::size_t c = 0; c < a.models.size(); ++c)
      for (int k : a.ks) worst = std::max(worst, std::abs(a.cells[r][c].accuracy.at(k) - b.cells[r][c].accuracy.at(k)));
  return worst;
}

// ---------------------------------------------------------------- reports

ReportFormat parse_report_format(const std::string& text) {
  if (text == "csv") return ReportFormat::csv;
  if (text == "markdown" || text == "md") return ReportFormat::markdown;
  throw std::invalid_argument("unknown report format " + text + " (expected csv or markdown)");
}

namespace {

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

const char* short_annotation(Annotation a) {
  switch (a) {
    case Annotation::supervised_original: return "sup";
    case Annotation::supervised_adapted: return "sup-adapted";
    case Annotation::unsupervised: return "unsup";
    default: return "unseen";
  }
}

Annotation parse_short_annotation(const std::string& s) {
  for (auto a : {Annotation::supervised_original, Annotation::supervised_adapted, Annotation::unsupervised, Annotation::unseen})
    if (s == short_annotation(a)) return a;
  throw std::invalid_argument("unknown annotation label " + s);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> md_split(const std::string& line) {
  std::vector<std::string> out;
  std::string t = trim(line);
  if (t.size() < 2 || t.front() != '|' || t.back() != '|') throw std::runtime_error("not a markdown table row: " + line);
  for (auto& f : split_list(t.substr(1, t.size() - 2), '|')) out.push_back(trim(f));
  return out;
}

}  // namespace

std::string render_report(const TransferMatrix& m, ReportFormat format) {
  if (m.datasets.empty() || m.models.empty()) throw std::invalid_argument("cannot render an empty transfer matrix");
  std::ostringstream os;
  if (format == ReportFormat::csv) {
    os << "dataset,k";
    for (const auto& model : m.models) os << ',' << csv_field(model);
    os << ",best";
    for (const auto& model : m.models) os << ',' << csv_field(model + ":annotation");
    os << '\n';
    for (std::size_t r = 0; r < m.datasets.size(); ++r)
      for (int k : m.ks) {
        os << csv_field(m.datasets[r]) << ',' << k;
        for (std::size_t c = 0; c < m.models.size(); ++c) os << ',' << fixed6(m.cells[r][c].accuracy.at(k));
        os << ',' << csv_field(m.models[m.best_column(r, k)]);
        for (std::size_t c = 0; c < m.models.size(); ++c) os << ',' << to_string(m.cells[r][c].annotation);
        os << '\n';
      }
    return os.str();
  }
  os << "| dataset | top-k |";
  for (const auto& model : m.models) os << ' ' << model << " |";
  os << "\n|---|---|";
  for (std::size_t c = 0; c < m.models.size(); ++c) os << "---|";
  os << '\n';
  for (std::size_t r = 0; r < m.datasets.size(); ++r)
    for (int k : m.ks) {
      const std::size_t best = m.best_column(r, k);
      os << "| " << m.datasets[r] << " | " << k << " |";
      for (std::size_t c = 0; c < m.models.size(); ++c) {
        const std::string v = fixed6(m.cells[r][c].accuracy.at(k));
        os << ' ' << (c == best ? "**" + v + "**" : v) << " (" << short_annotation(m.cells[r][c].annotation) << ") |";
      }
      os << '\n';
    }
  os << "\nBold marks the best model per row. Annotations: sup = supervised-seen original, sup-adapted = "
        "supervised-seen adapted, unsup = unsupervised-seen, unseen = never seen in training.\n";
  return os.str();
}

std::string render_report(const TransferMatrix& m, const std::string& format) { return render_report(m, parse_report_format(format)); }

ParsedReport parse_report(const std::string& text, ReportFormat format) {
  ParsedReport out;
  std::istringstream is(text);
  std::string line;
  if (format == ReportFormat::csv) {
    if (!std::getline(is, line)) throw std::runtime_error("empty csv report");
    const auto head = csv_split(line);
    const std::size_t n = (head.size() - 3) / 2;
    if (head.size() != 3 + 2 * n || head[0] != "dataset" || head[1] != "k" || head[2 + n] != "best")
      throw std::runtime_error("unexpected csv report header");
    out.models.assign(head.begin() + 2, head.begin() + 2 + static_cast<std::ptrdiff_t>(n));
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto f = csv_split(line);
      if (f.size() != head.size()) throw std::runtime_error("csv report row has the wrong number of fields");
      ReportRow row{f[0], std::stoi(f[1]), {}, f[2 + n], {}};
      for (std::size_t c = 0; c < n; ++c) row.values.push_back(std::stod(f[2 + c]));
      for (std::size_t c = 0; c < n; ++c) row.annotations.push_back(f[3 + n + c]);
      out.rows.push_back(std::move(row));
    }
    return out;
  }
  if (!std::getline(is, line)) throw std::runtime_error("empty markdown report");
  const auto head = md_split(line);
  if (head.size() < 3 || head[0] != "dataset" || head[1] != "top-k") throw std::runtime_error("unexpected markdown report header");
  out.models.assign(head.begin() + 2, head.end());
  std::getline(is, line);  // separator
  while (std::getline(is, line)) {
    if (trim(line).empty()) break;
    const auto f = md_split(line);
    if (f.size() != head.size()) throw std::runtime_error("markdown report row has the wrong number of fields");
    ReportRow row{f[0], std::stoi(f[1]), {}, {}, {}};
    for (std::size_t c = 2; c < f.size(); ++c) {
      std::string cell = f[c];
      const auto open = cell.rfind(" (");
      if (open == std::string::npos || cell.back() != ')') throw std::runtime_error("malformed markdown cell " + cell);
      row.annotations.push_back(to_string(parse_short_annotation(cell.substr(open + 2, cell.size() - open - 3))));
      std::string value = cell.substr(0, open);
      if (value.rfind("**", 0) == 0) {
        value = value.substr(2, value.size() - 4);
        if (row.best.empty()) row.best = out.models[c - 2];
      }
      row.values.push_back(std::stod(value));
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------- configuration

namespace {

const std::set<std::string> kKnownKeys{
    "output_dir", "seeds", "deterministic", "workers", "resolution",
    "synthetic.styles", "synthetic.k", "synthetic.n_per_class", "synthetic.seed",
    "gan.pairs", "gan.epochs", "gan.checkpoint_epoch", "gan.mix_epochs", "gan.output", "gan.batch_size", "gan.lr",
    "gan.beta1", "gan.beta2", "gan.lambda", "gan.generator", "gan.generator_width", "gan.generator_depth",
    "gan.discriminator_width", "gan.discriminator_layers",
    "backbone.weights", "backbone.width_divisor", "backbone.seed",
    "clf.width", "clf.blocks", "clf.epochs", "clf.batch_size", "clf.lr", "clf.beta1", "clf.beta2", "clf.ema_decay",
    "clf.w_u", "clf.rampup", "clf.rampup_fraction", "clf.confidence_threshold", "clf.symmetric", "clf.eval_network",
    "models", "eval.datasets", "eval.topk", "eval.full", "eval.train_fraction"};

const std::set<std::string> kDatasetFields{"root", "domain", "fraction"};
const std::set<std::string> kModelFields{"mode", "source", "source_adapted", "target", "target_adapted"};

}  // namespace

ExperimentConfig ExperimentConfig::from_flat(const FlatConfig& f) {
  for (const auto& [key, value] : f.values()) {
    if (kKnownKeys.count(key)) continue;
    const auto last = key.rfind('.');
    const std::string field = last == std::string::npos ? "" : key.substr(last + 1);
    if (key.rfind("dataset.", 0) == 0 && kDatasetFields.count(field) && last > 8) continue;
    if (key.rfind("model.", 0) == 0 && kModelFields.count(field) && last > 6) continue;
    throw std::runtime_error("unknown config key " + key);
  }

  ExperimentConfig c;
  c.output_dir = f.get("output_dir", "out");
  c.seeds.clear();
  for (auto s : f.get_int_list("seeds", {0})) c.seeds.push_back(static_cast<std::uint64_t>(s));
  c.deterministic = f.get_bool("deterministic", true);
  c.workers = static_cast<int>(f.get_int("workers", 1));
  c.resolution = f.get_int("resolution", 64);

  c.synthetic_styles = f.get_list("synthetic.styles");
  c.synthetic.k = static_cast<int>(f.get_int("synthetic.k", 8));
  c.synthetic.n_per_class = static_cast<int>(f.get_int("synthetic.n_per_class", 25));
  c.synthetic.resolution = c.resolution;
  c.synthetic_seed = f.get_uint("synthetic.seed", 7);

  std::set<std::string> names;
  for (const auto& [key, value] : f.with_prefix("dataset.")) names.insert(key.substr(0, key.rfind('.')));
  for (const auto& name : names) {
    DatasetSource d;
    d.name = name;
    d.root = f.require("dataset." + name + ".root");
    d.domain = f.get("dataset." + name + ".domain", name);
    d.fraction = f.get_double("dataset." + name + ".fraction", 1.0);
    c.datasets.push_back(d);
  }

  for (const auto& p : f.get_list("gan.pairs")) {
    const auto parts = split_list(p, ':');
    if (parts.size() != 2 || parts[0].empty() || parts[1].empty()) throw std::runtime_error("gan.pairs entry " + p + " must be S:T");
    c.gan_pairs.emplace_back(parts[0], parts[1]);
  }
  c.gan.resolution = c.resolution;
  c.gan.epochs = static_cast<int>(f.get_int("gan.epochs", 5));
  c.gan.batch_size = f.get_int("gan.batch_size", 8);
  c.gan.adam.lr = f.get_double("gan.lr", 2e-4);
  c.gan.adam.beta1 = f.get_double("gan.beta1", 0.5);
  c.gan.adam.beta2 = f.get_double("gan.beta2", 0.999);
  const auto lambda = f.get_double_list("gan.lambda", {1, 1, 1, 1, 1, 1});
  if (lambda.size() != 6) throw std::runtime_error("gan.lambda needs six values");
  std::copy(lambda.begin(), lambda.end(), c.gan.weights.lambda.begin());
  c.gan.generator.arch = f.get("gan.generator", "unet");
  c.gan.generator.width = f.get_int("gan.generator_width", 8);
  c.gan.generator.depth = static_cast<int>(f.get_int("gan.generator_depth", 3));
  c.gan.discriminator.width = f.get_int("gan.discriminator_width", 16);
  c.gan.discriminator.layers = static_cast<int>(f.get_int("gan.discriminator_layers", 3));
  c.checkpoint_epoch = static_cast<int>(f.get_int("gan.checkpoint_epoch", 5));
  for (auto e : f.get_int_list("gan.mix_epochs")) c.mix_epochs.push_back(static_cast<int>(e));
  c.adapted_output = parse_adapted_output(f.get("gan.output", "translated"));

  c.backbone_weights = f.get("backbone.weights", "");
  c.backbone_width_divisor = f.get_int("backbone.width_divisor", 4);
  c.backbone_seed = f.get_uint("backbone.seed", 1);

  c.clf.resolution = c.resolution;
  c.clf.net.width = f.get_int("clf.width", 16);
  c.clf.net.blocks = static_cast<int>(f.get_int("clf.blocks", 4));
  c.clf.epochs = static_cast<int>(f.get_int("clf.epochs", 20));
  c.clf.batch_size = f.get_int("clf.batch_size", 8);
  c.clf.adam.lr = f.get_double("clf.lr", 1e-3);
  c.clf.adam.beta1 = f.get_double("clf.beta1", 0.9);
  c.clf.adam.beta2 = f.get_double("clf.beta2", 0.999);
  c.clf.ema_decay = f.get_double("clf.ema_decay", 0.99);
  c.clf.w_u = f.get_double("clf.w_u", 1.0);
  c.clf.rampup = f.get_bool("clf.rampup", true);
  c.clf.rampup_fraction = f.get_double("clf.rampup_fraction", 0.1);
  c.clf.consistency.confidence_threshold = f.get_double("clf.confidence_threshold", 0.0);
  c.clf.consistency.symmetric = f.get_bool("clf.symmetric", false);
  const std::string net = f.get("clf.eval_network", "teacher");
  if (net != "teacher" && net != "student") throw std::runtime_error("clf.eval_network must be teacher or student");
  c.clf.evaluate_teacher = net == "teacher";

  for (const auto& name : f.get_list("models")) {
    ModelSpec m;
    m.name = name;
    const std::string p = "model." + name + ".";
    m.mode = parse_train_mode(f.require(p + "mode"));
    m.source = f.require(p + "source");
    m.source_adapted = f.get(p + "source_adapted", "");
    m.target = f.get(p + "target", "");
    m.target_adapted = f.get(p + "target_adapted", "");
    c.models.push_back(m);
  }
  for (const auto& [key, value] : f.with_prefix("model.")) {
    const std::string name = key.substr(0, key.rfind('.'));
    if (std::none_of(c.models.begin(), c.models.end(), [&](const ModelSpec& m) { return m.name == name; }))
      throw std::runtime_error("model " + name + " is configured but not listed in models");
  }

  c.eval_datasets = f.get_list("eval.datasets");
  c.topk.clear();
  for (auto k : f.get_int_list("eval.topk", {1, 5})) c.topk.push_back(static_cast<int>(k));
  c.eval_full = f.get_bool("eval.full", false);
  c.train_fraction = f.get_double("eval.train_fraction", 0.9);
  c.validate();
  return c;
}

std::vector<std::string> ExperimentConfig::original_dataset_names() const {
  std::vector<std::string> out = synthetic_styles;
  for (const auto& d : datasets) out.push_back(d.name);
  return out;
}

std::vector<std::string> ExperimentConfig::adapted_dataset_names() const {
  std::vector<std::string> out;
  auto add = [&](const std::string& n) {
    if (!n.empty() && parse_adapted_name(n) && std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
  };
  for (const auto& m : models) {
    add(m.source_adapted);
    add(m.target_adapted);
  }
  for (const auto& d : eval_datasets) add(d);
  return out;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw std::runtime_error("no seeds configured");
  if (workers < 1) throw std::runtime_error("workers must be >= 1");
  for (const auto& s : synthetic_styles) parse_synthetic_style(s);
  if (!synthetic_styles.empty()) synthetic.validate();
  const auto originals = original_dataset_names();
  std::set<std::string> unique(originals.begin(), originals.end());
  if (unique.size() != originals.size()) throw std::runtime_error("dataset names must be unique");
  auto known_original = [&](const std::string& n) { return unique.count(n) > 0; };
  std::set<std::string> pairs;
  for (const auto& [s, t] : gan_pairs) {
    if (!known_original(s) || !known_original(t)) throw std::runtime_error("gan pair " + s + ":" + t + " references an unknown dataset");
    pairs.insert(s + ":" + t);
  }
  auto check_dataset = [&](const std::string& n, const std::string& where) {
    if (n.empty()) return;
    if (auto a = parse_adapted_name(n)) {
      if (!pairs.count(a->pair())) throw std::runtime_error(where + ": " + n + " needs gan pair " + a->pair());
    } else if (!known_original(n)) {
      throw std::runtime_error(where + ": unknown dataset " + n);
    }
  };
  if (models.empty()) throw std::runtime_error("empty model roster");
  std::set<std::string> model_names;
  for (const auto& m : models) {
    if (!model_names.insert(m.name).second) throw std::runtime_error("duplicate model " + m.name);
    const std::string where = "model " + m.name;
    for (const auto* n : {&m.source, &m.source_adapted, &m.target, &m.target_adapted}) check_dataset(*n, where);
    if (parse_adapted_name(m.source)) throw std::runtime_error(where + ": source must be an original dataset");
    if (!m.source_adapted.empty() && !parse_adapted_name(m.source_adapted))
      throw std::runtime_error(where + ": source_adapted must be an adapted dataset (X@S:T)");
    if (!m.target_adapted.empty() && !parse_adapted_name(m.target_adapted))
      throw std::runtime_error(where + ": target_adapted must be an adapted dataset (X@S:T)");
    const bool adapted = !m.source_adapted.empty(), target = !m.target.empty() || !m.target_adapted.empty();
    switch (m.mode) {
      case TrainMode::base:
        if (adapted || target) throw std::runtime_error(where + ": mode base uses only the original source");
        break;
      case TrainMode::tune:
        if (!adapted || target) throw std::runtime_error(where + ": mode tune needs source_adapted and no target");
        break;
      case TrainMode::ensemble:
        if (!adapted || m.target.empty() || m.target_adapted.empty())
          throw std::runtime_error(where + ": mode ensemble needs source_adapted, target and target_adapted");
        break;
    }
  }
  if (eval_datasets.empty()) throw std::runtime_error("no evaluation datasets");
  for (const auto& d : eval_datasets) check_dataset(d, "eval.datasets");
  if (topk.empty()) throw std::runtime_error("eval.topk is empty");
  int k_classes = synthetic_styles.empty() ? 0 : synthetic.k;
  for (int k : topk)
    if (k < 1 || (k_classes > 0 && k > k_classes)) throw std::runtime_error("eval.topk value " + std::to_string(k) + " out of range");
  if (!eval_full && !(train_fraction > 0 && train_fraction < 1)) throw std::runtime_error("eval.train_fraction must be in (0, 1)");
  if (!gan_pairs.empty()) {
    gan.validate();
    for (int e : mix_epochs.empty() ? std::vector<int>{checkpoint_epoch} : mix_epochs)
      if (e < 1 || e > gan.epochs)
        throw std::runtime_error("checkpoint epoch " + std::to_string(e) + " outside 1.." + std::to_string(gan.epochs));
  }
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::data: return "data";
    case Stage::train_gan: return "train-gan";
    case Stage::generate: return "generate";
    case Stage::train_clf: return "train-clf";
    case Stage::evaluate: return "evaluate";
    default: return "report";
  }
}

Backbone<float> make_backbone(const ExperimentConfig& config) {
  if (!config.backbone_weights.empty()) return Backbone<float>::load(config.backbone_weights);
  return Backbone<float>(scaled_vgg16_widths(config.backbone_width_divisor), config.backbone_seed);
}

double dataset_style_distance(const Backbone<float>& backbone, const Tensor<float>& a, const Tensor<float>& b, Index chunk) {
  NoGradGuard guard;
  auto mean_style = [&](const Tensor<float>& x) {
    std::vector<Tensor<double>> acc;
    for (Index lo = 0; lo < x.dim(0); lo += chunk) {
      const auto part = x.slice(lo, std::min(x.dim(0), lo + chunk));
      const auto taps = backbone.forward(Var<float>::constant(part));
      for (std::size_t l = 0; l < taps.style.size(); ++l) {
        auto g = gram(taps.style[l]).value().cast<double>();  // (n, C, C)
        const Index c = g.dim(1), n = g.dim(0);
        Tensor<double> s({c, c});
        for (Index i = 0; i < n; ++i) s.array() += g.array().segment(i * c * c, c * c);
        if (acc.size() <= l) acc.push_back(s);
        else acc[l].array() += s.array();
      }
    }
    for (auto& t : acc) t.array() /= static_cast<double>(x.dim(0));
    return acc;
  };
  const auto sa = mean_style(a), sb = mean_style(b);
  double d = 0;
  for (std::size_t l = 0; l < sa.size(); ++l) d += (sa[l].array() - sb[l].array()).square().mean();
  return d;
}

// ---------------------------------------------------------------- pipeline

namespace {

std::string file_token(const std::string& name) {
  std::string out;
  for (char ch : name) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.') ? ch : '_';
  return out;
}

std::string relative_to(const fs::path& p, const fs::path& base) {
  const auto rel = fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(base).lexically_normal());
  return rel.empty() ? p.generic_string() : rel.generic_string();
}

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& cfg, const RunOptions& opts) : cfg_(cfg), opts_(opts), out_(fs::absolute(cfg.output_dir)) {}

  std::optional<TransferMatrix> run() {
    stage(Stage::data, [&] { prepare_data(); });
    if (opts_.until == Stage::data) return std::nullopt;
    for (auto seed : cfg_.seeds) {
      adapted_.clear();
      stage(Stage::train_gan, [&] { train_gans(seed); });
      if (opts_.until == Stage::train_gan) continue;
      stage(Stage::generate, [&] { generate(seed); });
      if (opts_.until == Stage::generate) continue;
      stage(Stage::train_clf, [&] { train_models(seed); });
      if (opts_.until == Stage::train_clf) continue;
      stage(Stage::evaluate, [&] { evaluate(seed); });
    }
    if (opts_.until != Stage::report) return std::nullopt;
    std::optional<TransferMatrix> m;
    stage(Stage::report, [&] { m = report(); });
    return m;
  }

 private:
  template <typename F>
  void stage(Stage s, F&& f) {
    try {
      f();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(s, e.what());
    }
  }

  void log(const std::string& msg) const {
    if (opts_.verbose) std::cerr << "[styleshift] " << msg << '\n';
  }

  const Backbone<float>& backbone() {
    if (!backbone_) backbone_.emplace(make_backbone(cfg_));
    return *backbone_;
  }

  fs::path seed_dir(std::uint64_t seed) const { return out_ / ("seed_" + std::to_string(seed)); }
  fs::path gan_dir(std::uint64_t seed, const std::string& s, const std::string& t) const {
    return seed_dir(seed) / "gan" / file_token(s + "_" + t);
  }
  fs::path adapted_manifest_path(std::uint64_t seed, const AdaptedName& a) const {
    return seed_dir(seed) / "adapted" / file_token(a.source + "_" + a.target) / (file_token(a.dataset) + ".tsv");
  }
  fs::path model_path(std::uint64_t seed, const std::string& model) const { return seed_dir(seed) / "models" / (file_token(model) + ".ckpt"); }
  fs::path eval_path(std::uint64_t seed, const std::string& model, const std::string& dataset) const {
    return seed_dir(seed) / "eval" / file_token(model) / (file_token(dataset) + ".json");
  }

  void prepare_data() {
    const fs::path data = out_ / "data";
    for (const auto& style : cfg_.synthetic_styles) {
      const fs::path mp = data / (style + ".tsv");
      if (!fs::exists(mp)) {
        log("synthesising style " + style);
        save_manifest(make_synthetic_domain(cfg_.synthetic_seed, cfg_.synthetic, parse_synthetic_style(style), data / "synthetic"), mp);
      }
      originals_[style] = load_manifest(mp);
    }
    for (const auto& d : cfg_.datasets) {
      const fs::path mp = data / (file_token(d.name) + ".tsv");
      if (!fs::exists(mp)) {
        log("ingesting " + d.name);
        save_manifest(subsample(ingest(d.root, d.domain), d.fraction, 0), mp);
      }
      originals_[d.name] = load_manifest(mp);
    }
    int k = -1;
    for (const auto& [name, m] : originals_) {
      validate_manifest(m, true);
      if (k >= 0 && m.k != k) throw std::runtime_error("datasets disagree on the class count (" + name + " has k=" + std::to_string(m.k) + ")");
      k = m.k;
    }
    k_ = k;
    for (int t : cfg_.topk)
      if (t > k_) throw std::runtime_error("eval.topk " + std::to_string(t) + " exceeds the class count " + std::to_string(k_));
  }

  DatasetManifest part(const DatasetManifest& m, bool train) const {
    if (cfg_.eval_full) return m;
    auto s = split_manifest(m, cfg_.train_fraction);
    return train ? s.train : s.test;
  }

  const DatasetManifest& dataset(std::uint64_t seed, const std::string& name) {
    if (auto a = parse_adapted_name(name)) {
      auto it = adapted_.find(name);
      if (it == adapted_.end()) {
        const auto p = adapted_manifest_path(seed, *a);
        if (!fs::exists(p)) throw std::runtime_error("adapted dataset " + name + " has not been generated (" + p.string() + ")");
        it = adapted_.emplace(name, load_manifest(p)).first;
      }
      return it->second;
    }
    return originals_.at(name);
  }

  GanConfig gan_config(std::uint64_t seed) const {
    GanConfig g = cfg_.gan;
    g.seed = seed;
    return g;
  }

  void train_gans(std::uint64_t seed) {
    for (const auto& [s, t] : cfg_.gan_pairs) {
      const auto dir = gan_dir(seed, s, t);
      if (fs::exists(gan_checkpoint_path(dir, cfg_.gan.epochs))) continue;
      log("training gan " + s + ":" + t + " seed " + std::to_string(seed));
      train_gan(part(originals_.at(s), true), part(originals_.at(t), true), gan_config(seed), backbone(),
                GanTrainOptions{dir, true, opts_.verbose});
    }
  }

  void generate(std::uint64_t seed) {
    for (const auto& name : cfg_.adapted_dataset_names()) {
      const auto a = *parse_adapted_name(name);
      const auto mp = adapted_manifest_path(seed, a);
      if (fs::exists(mp)) continue;
      log("generating " + name + " seed " + std::to_string(seed));
      AdaptedDatasetSpec spec;
      for (int e : cfg_.mix_epochs.empty() ? std::vector<int>{cfg_.checkpoint_epoch} : cfg_.mix_epochs)
        spec.checkpoints.push_back(gan_checkpoint_path(gan_dir(seed, a.source, a.target), e));
      spec.direction = a.direction();
      spec.output = cfg_.adapted_output;
      spec.output_root = mp.parent_path() / file_token(a.dataset);
      spec.workers = cfg_.deterministic ? 1 : cfg_.workers;
      save_manifest(materialize_adapted(originals_.at(a.dataset), spec), mp);
    }
  }

  void train_models(std::uint64_t seed) {
    for (const auto& m : cfg_.models) {
      const auto path = model_path(seed, m.name);
      if (fs::exists(path)) continue;
      log("training " + m.name + " (" + to_string(m.mode) + ") seed " + std::to_string(seed));
      std::map<std::string, DatasetManifest> parts;
      auto get = [&](const std::string& n) -> const DatasetManifest* {
        if (n.empty()) return nullptr;
        return &parts.emplace(n, part(dataset(seed, n), true)).first->second;
      };
      ClassifierData data{get(m.source), get(m.source_adapted), get(m.target), get(m.target_adapted)};
      ClassifierTrainConfig c = cfg_.clf;
      c.net.k = k_;
      c.seed = seed;
      auto metrics = path;
      metrics.replace_extension(".metrics.jsonl");
      train_classifier(m.mode, data, c, ClassifierOutputs{path, metrics, opts_.verbose});
    }
  }

  void evaluate(std::uint64_t seed) {
    std::map<std::string, std::pair<Tensor<float>, std::vector<int>>> images;
    for (const auto& m : cfg_.models) {
      const auto mp = model_path(seed, m.name);
      std::optional<LoadedClassifier> net;
      for (const auto& d : cfg_.eval_datasets) {
        const auto ep = eval_path(seed, m.name, d);
        if (fs::exists(ep)) continue;
        if (!net) net = load_classifier(mp);
        auto it = images.find(d);
        if (it == images.end()) {
          const auto eval_set = part(dataset(seed, d), false);
          if (eval_set.empty()) throw std::runtime_error("evaluation split of " + d + " is empty");
          it = images.emplace(d, std::make_pair(load_images(eval_set.paths(), cfg_.resolution), eval_set.labels())).first;
        }
        const auto probs = predict(net->net, it->second.first);
        json acc = json::object();
        for (int k : cfg_.topk) acc[std::to_string(k)] = top_k_accuracy(probs, it->second.second, k);
        atomic_write(ep, json{{"model", m.name}, {"dataset", d}, {"network", net->network}, {"n", probs.dim(0)}, {"topk", acc}}.dump(2) + "\n");
      }
    }
  }

  std::string provenance(const std::string& model, const std::string& dataset_name) {
    std::string p;
    if (auto a = parse_adapted_name(dataset_name)) {
      std::vector<int> epochs = cfg_.mix_epochs.empty() ? std::vector<int>{cfg_.checkpoint_epoch} : cfg_.mix_epochs;
      std::string ck;
      for (int e : epochs) ck += (ck.empty() ? "" : ";") + relative_to(gan_checkpoint_path(gan_dir(cfg_.seeds.front(), a->source, a->target), e), out_);
      p = "dataset=adapted|" + to_string(a->direction()) + "|" + to_string(cfg_.adapted_output) + "|" + ck;
    } else {
      p = "dataset=original";
    }
    return p + " model=" + relative_to(model_path(cfg_.seeds.front(), model), out_) + " split=" + (cfg_.eval_full ? "full" : "test");
  }

  TransferMatrix report() {
    TransferMatrix m;
    m.datasets = cfg_.eval_datasets;
    for (const auto& spec : cfg_.models) m.models.push_back(spec.name);
    m.ks = cfg_.topk;
    m.seeds = cfg_.seeds;
    m.cells.assign(m.datasets.size(), std::vector<TransferCell>(m.models.size()));
    for (std::size_t r = 0; r < m.datasets.size(); ++r)
      for (std::size_t c = 0; c < m.models.size(); ++c) {
        auto& cell = m.cells[r][c];
        cell.annotation = annotate(cfg_.models[c], m.datasets[r]);
        cell.provenance = provenance(m.models[c], m.datasets[r]);
        for (auto seed : cfg_.seeds) {
          const auto ep = eval_path(seed, m.models[c], m.datasets[r]);
          if (!fs::exists(ep)) throw std::runtime_error("missing evaluation " + ep.string());
          const auto j = json::parse(read_file(ep));
          for (int k : m.ks) cell.per_seed[k].push_back(j.at("topk").at(std::to_string(k)).get<double>());
        }
        for (int k : m.ks) {
          double s = 0;
          for (double v : cell.per_seed[k]) s += v;
          cell.accuracy[k] = s / static_cast<double>(cell.per_seed[k].size());
        }
      }
    atomic_write(out_ / "matrix.json", to_json(m).dump(2) + "\n");
    atomic_write(out_ / "report.csv", render_report(m, ReportFormat::csv));
    atomic_write(out_ / "report.md", render_report(m, ReportFormat::markdown));
    return m;
  }

  const ExperimentConfig& cfg_;
  RunOptions opts_;
  fs::path out_;
  std::optional<Backbone<float>> backbone_;
  std::map<std::string, DatasetManifest> originals_;
  std::map<std::string, DatasetManifest> adapted_;
  int k_ = 0;
};

}  // namespace

std::optional<TransferMatrix> run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  try {
    config.validate();
  } catch (const std::exception& e) {
    throw StageError(Stage::data, std::string("invalid configuration: ") + e.what());
  }
  return Pipeline(config, options).run();
}

}  // namespace styleshift
