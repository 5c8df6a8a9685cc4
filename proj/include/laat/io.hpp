// File formats: anchor files (JSON, v1), encoder manifests with a raw
// float64 blob, datasets, training configs, learning-curve CSV and reports.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "laat/anchor_geometry.hpp"
#include "laat/dataset.hpp"
#include "laat/diagnostics.hpp"
#include "laat/encoder.hpp"
#include "laat/evaluation.hpp"
#include "laat/training.hpp"

namespace laat::io {

using nlohmann::json;

enum class ErrorCode { Io = 1, Malformed = 2, Version = 3, Shape = 4, Norm = 5 };

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::Io: return "io";
    case ErrorCode::Malformed: return "malformed";
    case ErrorCode::Version: return "version";
    case ErrorCode::Shape: return "shape";
    case ErrorCode::Norm: return "norm";
  }
  return "unknown";
}

class FileError : public std::runtime_error {
 public:
  FileError(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(to_string(code)) + " error: " + msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// ---- text helpers -------------------------------------------------------------

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FileError(ErrorCode::Io, "cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FileError(ErrorCode::Io, "cannot write " + p.string());
  out << text;
  if (!out) throw FileError(ErrorCode::Io, "short write to " + p.string());
}

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FileError(ErrorCode::Malformed, what + ": " + e.what());
  }
}

inline std::string format_double(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Serializes like json::dump, but floats always carry 17 significant digits.
inline void dump17(const json& j, std::string& out, int indent, int depth) {
  const std::string pad = indent >= 0 ? std::string(std::size_t(indent * (depth + 1)), ' ') : "";
  const std::string close = indent >= 0 ? std::string(std::size_t(indent * depth), ' ') : "";
  const char* nl = indent >= 0 ? "\n" : "";
  switch (j.type()) {
    case json::value_t::number_float:
      out += format_double(j.get<double>());
      return;
    case json::value_t::array: {
      if (j.empty()) { out += "[]"; return; }
      // Numeric rows stay on one line.
      const bool flat = std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_primitive(); });
      out += '[';
      bool first = true;
      for (const auto& e : j) {
        if (!first) out += ',';
        if (!flat) { out += nl; out += pad; }
        dump17(e, out, indent, depth + 1);
        first = false;
      }
      if (!flat) { out += nl; out += close; }
      out += ']';
      return;
    }
    case json::value_t::object: {
      if (j.empty()) { out += "{}"; return; }
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        out += nl;
        out += pad;
        out += json(it.key()).dump();
        out += indent >= 0 ? ": " : ":";
        dump17(it.value(), out, indent, depth + 1);
        first = false;
      }
      out += nl;
      out += close;
      out += '}';
      return;
    }
    default:
      out += j.dump();
  }
}

inline std::string dump17(const json& j, int indent = 2) {
  std::string out;
  dump17(j, out, indent, 0);
  out += '\n';
  return out;
}

inline json rows_to_json(const Tensor& t) {
  json rows = json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

inline Tensor rows_from_json(const json& j, std::size_t cols, const std::string& what) {
  if (!j.is_array()) throw FileError(ErrorCode::Malformed, what + " must be an array of rows");
  Tensor t = Tensor::matrix(j.size(), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const json& row = j[r];
    if (!row.is_array()) throw FileError(ErrorCode::Malformed, what + " row is not an array");
    if (row.size() != cols) {
      throw FileError(ErrorCode::Shape, what + " row " + std::to_string(r) + " has length " +
                                            std::to_string(row.size()) + ", expected " +
                                            std::to_string(cols));
    }
    for (std::size_t c = 0; c < cols; ++c) {
      if (!row[c].is_number()) throw FileError(ErrorCode::Malformed, what + " has a non-numeric entry");
      t(r, c) = row[c].get<double>();
    }
  }
  return t;
}

// ---- anchor files ---------------------------------------------------------------

inline constexpr int kAnchorFileVersion = 1;

struct AnchorFile {
  AnchorSet anchors;
  std::string prompt;
  bool expanded = false;
  std::optional<ExpansionModel> expansion;
};

/// Norms within 1e-4 of one are accepted as-is, within 1e-2 re-normalized
/// with a warning, anything else rejected.
inline AnchorFile parse_anchor_file(const std::string& text, const std::string& name = "anchor file") {
  const json j = parse_json(text, name);
  try {
    if (!j.is_object()) throw FileError(ErrorCode::Malformed, name + ": top level must be an object");
    if (!j.contains("version") || !j["version"].is_number_integer()) {
      throw FileError(ErrorCode::Malformed, name + ": missing integer 'version'");
    }
    if (j["version"].get<int>() != kAnchorFileVersion) {
      throw FileError(ErrorCode::Version, name + ": unsupported version " +
                                              std::to_string(j["version"].get<int>()));
    }
    for (const char* key : {"dim", "labels", "vectors"})
      if (!j.contains(key)) throw FileError(ErrorCode::Malformed, name + ": missing '" + key + "'");
    const auto dim = j["dim"].get<long>();
    if (dim < 2) throw FileError(ErrorCode::Shape, name + ": dim must be at least 2");
    const auto labels = j["labels"].get<std::vector<std::string>>();
    if (labels.size() != j["vectors"].size()) {
      throw FileError(ErrorCode::Shape, name + ": " + std::to_string(labels.size()) +
                                            " labels but " + std::to_string(j["vectors"].size()) +
                                            " vectors");
    }
    Tensor vectors = rows_from_json(j["vectors"], std::size_t(dim), name + " vectors");
    for (std::size_t r = 0; r < vectors.rows(); ++r) {
      const double nrm = norm2(vectors.row(r));
      const double dev = std::abs(nrm - 1.0);
      if (dev <= 1e-4) continue;
      if (dev <= 1e-2) {
        warn(name + ": re-normalizing '" + labels[r] + "' (norm " + std::to_string(nrm) + ")");
        for (double& v : vectors.row(r)) v /= nrm;
        continue;
      }
      throw FileError(ErrorCode::Norm, name + ": vector '" + labels[r] + "' has norm " +
                                           std::to_string(nrm));
    }
    AnchorFile f;
    f.anchors = AnchorSet::normalized(labels, std::move(vectors), j.value("source", std::string()));
    f.prompt = j.value("prompt", std::string());
    f.expanded = j.value("expanded", false);
    if (j.contains("expansion_params") && !j["expansion_params"].is_null()) {
      const json& ep = j["expansion_params"];
      auto center = ep.at("center").get<std::vector<double>>();
      if (center.size() != std::size_t(dim)) {
        throw FileError(ErrorCode::Shape, name + ": expansion center has wrong dimension");
      }
      f.expansion = make_expansion_model(std::move(center), ep.at("phi0").get<double>());
    }
    return f;
  } catch (const json::exception& e) {
    throw FileError(ErrorCode::Malformed, name + ": " + e.what());
  } catch (const GeometryError& e) {
    throw FileError(ErrorCode::Shape, name + ": " + e.what());
  }
}

inline std::string format_anchor_file(const AnchorFile& f) {
  json j;
  j["version"] = kAnchorFileVersion;
  j["dim"] = f.anchors.dim();
  j["labels"] = f.anchors.labels();
  j["vectors"] = rows_to_json(f.anchors.vectors());
  j["source"] = f.anchors.source();
  if (!f.prompt.empty()) j["prompt"] = f.prompt;
  j["expanded"] = f.expanded;
  if (f.expansion) {
    j["expansion_params"] = {{"center", f.expansion->center}, {"phi0", f.expansion->phi0}};
  }
  return dump17(j);
}

inline AnchorFile load_anchor_file(const std::filesystem::path& p) {
  return parse_anchor_file(read_text(p), p.string());
}

inline void save_anchor_file(const std::filesystem::path& p, const AnchorFile& f) {
  write_text(p, format_anchor_file(f));
}

// ---- encoder files ----------------------------------------------------------------

inline constexpr const char* kModelFormat = "laat-mlp";

/// Writes `<path>` (JSON manifest) and `<path>.bin` (parameters as
/// little-endian float64, layer by layer: W row-major, then b).
inline void save_model(const std::filesystem::path& p, const Mlp& m) {
  const auto blob = std::filesystem::path(p.string() + ".bin");
  std::ofstream out(blob, std::ios::binary);
  if (!out) throw FileError(ErrorCode::Io, "cannot write " + blob.string());
  for (const auto& t : m.parameters()) {
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw FileError(ErrorCode::Io, "short write to " + blob.string());
  json j;
  j["format"] = kModelFormat;
  j["version"] = 1;
  j["input_dim"] = m.architecture().input_dim;
  j["hidden"] = m.architecture().hidden;
  j["output_dim"] = m.architecture().output_dim;
  j["init_seed"] = m.seed();
  j["num_params"] = m.parameter_count();
  j["dtype"] = "float64-le";
  j["blob"] = blob.filename().string();
  write_text(p, dump17(j));
}

inline Mlp load_model(const std::filesystem::path& p) {
  const json j = parse_json(read_text(p), p.string());
  try {
    if (j.at("format").get<std::string>() != kModelFormat) {
      throw FileError(ErrorCode::Malformed, p.string() + ": not a laat-mlp manifest");
    }
    if (j.at("version").get<int>() != 1) {
      throw FileError(ErrorCode::Version, p.string() + ": unsupported model version");
    }
    MlpArchitecture arch{j.at("input_dim").get<std::size_t>(),
                         j.at("hidden").get<std::vector<std::size_t>>(),
                         j.at("output_dim").get<std::size_t>()};
    Mlp m(arch, j.value("init_seed", std::uint64_t{0}));
    if (m.parameter_count() != j.at("num_params").get<std::size_t>()) {
      throw FileError(ErrorCode::Shape, p.string() + ": parameter count does not match architecture");
    }
    const auto blob = p.parent_path() / j.at("blob").get<std::string>();
    std::ifstream in(blob, std::ios::binary);
    if (!in) throw FileError(ErrorCode::Io, "cannot open " + blob.string());
    for (auto& t : m.parameters()) {
      in.read(reinterpret_cast<char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!in) throw FileError(ErrorCode::Shape, blob.string() + ": truncated parameter blob");
    return m;
  } catch (const json::exception& e) {
    throw FileError(ErrorCode::Malformed, p.string() + ": " + e.what());
  }
}

// ---- datasets ---------------------------------------------------------------------

inline json split_to_json(const Split& s) { return {{"x", rows_to_json(s.x)}, {"y", s.y}}; }

inline Split split_from_json(const json& j, std::size_t dim, std::size_t classes) {
  Split s{rows_from_json(j.at("x"), dim, "dataset x"), j.at("y").get<std::vector<std::size_t>>()};
  if (s.y.size() != s.x.rows()) throw FileError(ErrorCode::Shape, "dataset: x/y length mismatch");
  for (std::size_t y : s.y)
    if (y >= classes) throw FileError(ErrorCode::Shape, "dataset: label index out of range");
  return s;
}

inline void save_dataset(const std::filesystem::path& p, const Dataset& d, const json& provenance = {}) {
  json j;
  j["version"] = 1;
  j["dim"] = d.dim;
  j["labels"] = d.labels;
  j["train"] = split_to_json(d.train);
  j["test"] = split_to_json(d.test);
  if (!provenance.is_null()) j["provenance"] = provenance;
  write_text(p, dump17(j, -1));
}

inline Dataset load_dataset(const std::filesystem::path& p) {
  const json j = parse_json(read_text(p), p.string());
  try {
    if (j.at("version").get<int>() != 1) throw FileError(ErrorCode::Version, p.string() + ": unsupported dataset version");
    Dataset d;
    d.dim = j.at("dim").get<std::size_t>();
    d.labels = j.at("labels").get<std::vector<std::string>>();
    d.train = split_from_json(j.at("train"), d.dim, d.labels.size());
    d.test = split_from_json(j.at("test"), d.dim, d.labels.size());
    return d;
  } catch (const json::exception& e) {
    throw FileError(ErrorCode::Malformed, p.string() + ": " + e.what());
  }
}

// ---- configs ----------------------------------------------------------------------

inline json loss_to_json(const LossKind& k) {
  json j{{"kind", loss_name(k)}};
  if (auto* a = std::get_if<loss::Ace>(&k)) j["tau"] = a->tau;
  if (auto* c = std::get_if<loss::Cw>(&k)) j["kappa"] = c->kappa;
  if (auto* t = std::get_if<loss::TradesKl>(&k)) j["lambda_inv"] = t->lambda_inv;
  return j;
}

inline LossKind loss_from_json(const json& j) {
  const std::string kind = j.is_string() ? j.get<std::string>() : j.at("kind").get<std::string>();
  auto num = [&](const char* key, double dflt) {
    return j.is_object() ? j.value(key, dflt) : dflt;
  };
  LossKind k;
  if (kind == "ace") k = loss::Ace{num("tau", 1.0)};
  else if (kind == "cos_theta") k = loss::CosTheta{};
  else if (kind == "theta") k = loss::Theta{};
  else if (kind == "euclid") k = loss::Euclid{};
  else if (kind == "cw") k = loss::Cw{num("kappa", 0.0)};
  else if (kind == "trades_kl") k = loss::TradesKl{num("lambda_inv", 6.0)};
  else throw std::invalid_argument("unknown loss kind '" + kind + "'");
  validate(k);
  return k;
}

inline json attack_to_json(const AttackConfig& a) {
  return {{"name", a.name},           {"epsilon", a.epsilon},
          {"steps", a.steps},         {"step_size", a.step_size},
          {"loss", loss_to_json(a.loss)}, {"random_start", a.random_start}};
}

/// Either {"preset": name, overrides...} or a full field list.
inline AttackConfig attack_from_json(const json& j) {
  AttackConfig a = j.contains("preset") ? presets::by_name(j["preset"].get<std::string>())
                                        : AttackConfig{};
  a.name = j.value("name", a.name);
  a.epsilon = j.value("epsilon", a.epsilon);
  a.steps = j.value("steps", a.steps);
  a.step_size = j.value("step_size", a.step_size);
  a.random_start = j.value("random_start", a.random_start);
  if (j.contains("loss")) a.loss = loss_from_json(j["loss"]);
  a.validate();
  return a;
}

struct TrainJob {
  TrainConfig train;
  std::vector<std::size_t> hidden = {128, 128};
  std::uint64_t init_seed = 0;
  std::string data;  // dataset path, may be overridden on the command line
};

inline json train_job_to_json(const TrainJob& job) {
  const TrainConfig& c = job.train;
  return {{"epochs", c.epochs},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_decay_epochs", c.lr_decay_epochs},
          {"lr_decay_factor", c.lr_decay_factor},
          {"alpha", c.alpha},
          {"batch_size", c.batch_size},
          {"attack", attack_to_json(c.attack)},
          {"loss", loss_to_json(c.loss)},
          {"seed", c.seed},
          {"track_curve", c.track_curve},
          {"curve_attack", attack_to_json(c.curve_attack)},
          {"curve_samples", c.curve_samples},
          {"hidden", job.hidden},
          {"init_seed", job.init_seed},
          {"data", job.data}};
}

/// Missing keys keep their defaults.
inline TrainJob train_job_from_json(const json& j) {
  TrainJob job;
  TrainConfig& c = job.train;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_decay_epochs = j.value("lr_decay_epochs", c.lr_decay_epochs);
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.alpha = j.value("alpha", c.alpha);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("attack")) c.attack = attack_from_json(j["attack"]);
    if (j.contains("loss")) c.loss = loss_from_json(j["loss"]);
    c.seed = j.value("seed", c.seed);
    c.track_curve = j.value("track_curve", c.track_curve);
    if (j.contains("curve_attack")) c.curve_attack = attack_from_json(j["curve_attack"]);
    c.curve_samples = j.value("curve_samples", c.curve_samples);
    job.hidden = j.value("hidden", job.hidden);
    job.init_seed = j.value("init_seed", job.init_seed);
    job.data = j.value("data", job.data);
  } catch (const json::exception& e) {
    throw FileError(ErrorCode::Malformed, std::string("train config: ") + e.what());
  }
  c.validate();
  return job;
}

// ---- curves and reports -----------------------------------------------------------

inline constexpr const char* kCurveHeader = "epoch,train_loss,clean_acc,robust_acc";

inline std::string format_curve_csv(const LearningCurve& curve) {
  std::string out = std::string(kCurveHeader) + "\n";
  for (const auto& p : curve) {
    out += std::to_string(p.epoch) + "," + format_double(p.train_loss) + "," +
           format_double(p.clean_acc) + "," + format_double(p.robust_acc) + "\n";
  }
  return out;
}

inline json report_to_json(const EvalReport& r) {
  json attacks = json::array();
  for (const auto& a : r.attacks) attacks.push_back(attack_to_json(a));
  return {{"clean_acc", r.clean_acc},
          {"robust_acc", r.robust_acc},
          {"ci95", r.ci95},
          {"n_way", r.n_way},
          {"k_shot", r.k_shot},
          {"anchor_mode", r.anchor_mode},
          {"beta", r.beta},
          {"num_examples", r.num_examples},
          {"num_tasks", r.num_tasks},
          {"queries_per_class", r.queries_per_class},
          {"attacks", attacks},
          {"seed", r.seed}};
}

inline std::string format_report_csv(const EvalReport& r) {
  std::string out = "metric,value\nclean_acc," + format_double(r.clean_acc) + "\n";
  for (const auto& [name, acc] : r.robust_acc) out += "robust_acc:" + name + "," + format_double(acc) + "\n";
  return out;
}

inline json rank_metrics_to_json(const RankMetrics& m) {
  json groups = json::array();
  for (const auto& g : m.per_group)
    groups.push_back({{"group", g.group}, {"sum_of_ranks", g.sum_of_ranks}, {"top5_ratio", g.top_ratio}});
  return {{"sum_of_ranks", m.sum_of_ranks}, {"top5_ratio", m.top5_ratio}, {"groups", groups}};
}

/// Label -> group mapping. Accepts a JSON object, or text lines of
/// `label<TAB>group` (falling back to the last comma). Blank lines and
/// lines starting with '#' are skipped.
inline std::map<std::string, std::string> parse_group_map(const std::string& text) {
  std::map<std::string, std::string> out;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    const json j = parse_json(text, "group map");
    try {
      for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value().get<std::string>();
    } catch (const json::exception& e) {
      throw FileError(ErrorCode::Malformed, std::string("group map: ") + e.what());
    }
    return out;
  }
  std::istringstream in(text);
  std::string line;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto sep = line.find('\t');
    if (sep == std::string::npos) sep = line.rfind(',');
    if (sep == std::string::npos) throw FileError(ErrorCode::Malformed, "group map line without separator: " + line);
    out[trim(line.substr(0, sep))] = trim(line.substr(sep + 1));
  }
  return out;
}

inline std::map<std::string, std::string> load_group_map(const std::filesystem::path& p) {
  return parse_group_map(read_text(p));
}

}  // namespace laat::io
