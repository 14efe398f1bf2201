#pragma once

// File formats: model JSON, corpus CSV files with a manifest, run logs,
// summaries, training reports and prediction tubes.

#include "ccmpc/chance_geometry.hpp"
#include "ccmpc/corpus.hpp"
#include "ccmpc/sim_harness.hpp"
#include "ccmpc/vbgmm.hpp"

#include <json.hpp>

#include <cinttypes>
#include <cstdlib>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace ccmpc {

using Json = nlohmann::json;
namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Primitives

/// %.17g, enough digits to read back the same double.
inline std::string fmt_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& what) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return kInf;
  if (s == "-inf") return -kInf;
  // strtod rather than stod: stod throws on subnormals
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end == s.c_str()) throw IoError(what + ": not a number: '" + s + "'");
  if (end != s.c_str() + s.size()) throw IoError(what + ": trailing characters in '" + s + "'");
  return v;
}

/// FNV-1a, 64 bit. Stable across platforms, used for content digests.
class Digest {
 public:
  void add(std::string_view s) {
    for (unsigned char c : s) {
      h_ ^= c;
      h_ *= 0x100000001b3ULL;
    }
  }
  void add(double x) { add(fmt_double(x)); }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h_);
    return buf;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline Json to_json(const Vec& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Json to_json(const Mat& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

inline Vec vec_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw IoError(what + ": expected an array");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw IoError(what + ": expected numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline Mat mat_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw IoError(what + ": expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Vec r = vec_from_json(j[static_cast<std::size_t>(i)], what);
    if (r.size() != cols) throw IoError(what + ": ragged matrix");
    m.row(i) = r.transpose();
  }
  return m;
}

/// Comma-separated table with a header row.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable parse_csv(const std::string& text, const std::string& what) {
  CsvTable t;
  std::istringstream ss(text);
  std::string line;
  if (!std::getline(ss, line)) throw IoError(what + ": empty file");
  t.header = split_csv_line(line);
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.header.size())
      throw IoError(what + ": row " + std::to_string(t.rows.size() + 1) + " has " + std::to_string(cells.size()) +
                    " cells, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

/// Throws naming the first expected column that is missing or out of place.
inline void require_columns(const CsvTable& t, const std::vector<std::string>& expected, const std::string& what) {
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (i >= t.header.size() || t.header[i] != expected[i])
      throw IoError(what + ": expected column '" + expected[i] + "' at position " + std::to_string(i) +
                    (i < t.header.size() ? ", found '" + t.header[i] + "'" : ", header too short"));
}

// ---------------------------------------------------------------------------
// Model

inline Json model_to_json(const VbgmmPosterior& q) {
  Json j;
  j["format"] = "ccmpc-vbgmm-1";
  j["D"] = q.D;
  j["prior"] = {{"alpha0", q.prior.alpha0}, {"beta0", q.prior.beta0}, {"nu0", q.prior.nu0},
                {"K_init", q.prior.K_init}, {"m0", to_json(q.prior.m0)},  {"W0", to_json(q.prior.W0)}};
  Json comps = Json::array();
  for (int k = 0; k < q.K(); ++k) {
    const auto ku = static_cast<std::size_t>(k);
    Json c = {{"alpha", q.alpha[ku]}, {"beta", q.beta[ku]}, {"nu", q.nu[ku]}, {"m", to_json(q.m[ku])},
              {"W", to_json(q.W[ku])}};
    if (ku < q.W_inv.size()) c["W_inv"] = to_json(q.W_inv[ku]);
    comps.push_back(c);
  }
  j["components"] = comps;
  j["elbo_trace"] = q.elbo_trace;
  j["iterations"] = q.iterations;
  j["converged"] = q.converged;
  j["n_samples"] = q.n_samples;
  return j;
}

inline VbgmmPosterior model_from_json(const Json& j) {
  try {
    if (j.at("format") != "ccmpc-vbgmm-1") throw IoError("model: unknown format");
    VbgmmPosterior q;
    q.D = j.at("D").get<int>();
    const Json& p = j.at("prior");
    q.prior.alpha0 = p.at("alpha0").get<double>();
    q.prior.beta0 = p.at("beta0").get<double>();
    q.prior.nu0 = p.at("nu0").get<double>();
    q.prior.K_init = p.at("K_init").get<int>();
    q.prior.m0 = vec_from_json(p.at("m0"), "model prior m0");
    q.prior.W0 = mat_from_json(p.at("W0"), "model prior W0");
    q.prior.validate(q.D);
    for (const Json& c : j.at("components")) {
      q.alpha.push_back(c.at("alpha").get<double>());
      q.beta.push_back(c.at("beta").get<double>());
      q.nu.push_back(c.at("nu").get<double>());
      q.m.push_back(vec_from_json(c.at("m"), "model component m"));
      q.W.push_back(mat_from_json(c.at("W"), "model component W"));
      if (c.contains("W_inv")) q.W_inv.push_back(mat_from_json(c.at("W_inv"), "model component W_inv"));
      if (q.m.back().size() != q.D || q.W.back().rows() != q.D) throw IoError("model: component dimension mismatch");
    }
    if (!q.W_inv.empty() && q.W_inv.size() != q.W.size()) throw IoError("model: W_inv present for some components only");
    q.elbo_trace = j.at("elbo_trace").get<std::vector<double>>();
    q.iterations = j.at("iterations").get<int>();
    q.converged = j.at("converged").get<bool>();
    q.n_samples = j.at("n_samples").get<std::size_t>();
    return q;
  } catch (const Json::exception& e) {
    throw IoError(std::string("model: ") + e.what());
  }
}

inline void save_model(const fs::path& path, const VbgmmPosterior& q) { write_text(path, model_to_json(q).dump(1) + "\n"); }
inline VbgmmPosterior load_model(const fs::path& path) { return model_from_json(read_json(path)); }

/// ELBO trace, component weights and the dominant count.
inline Json training_report(const VbgmmPosterior& q) {
  Json j;
  j["K_init"] = q.prior.K_init;
  j["n_samples"] = q.n_samples;
  j["iterations"] = q.iterations;
  j["converged"] = q.converged;
  j["dominant_count"] = q.dominant_count();
  j["elbo_trace"] = q.elbo_trace;
  j["weights"] = q.expected_weights();
  std::vector<bool> dominant;
  for (int k = 0; k < q.K(); ++k) dominant.push_back(!q.dormant(k));
  j["dominant"] = dominant;
  bool monotone = true;
  for (std::size_t i = 1; i < q.elbo_trace.size(); ++i)
    monotone &= q.elbo_trace[i] >= q.elbo_trace[i - 1] - 1e-9 * std::abs(q.elbo_trace[i - 1]);
  j["elbo_non_decreasing"] = monotone;
  return j;
}

// ---------------------------------------------------------------------------
// Trajectories

inline std::string trajectory_csv(const TrajectorySeries& tr) {
  std::string s = "t,x,y,z\n";
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const Vec3& p = tr.positions[i];
    s += fmt_double(tr.times[i]) + "," + fmt_double(p.x()) + "," + fmt_double(p.y()) + "," + fmt_double(p.z()) + "\n";
  }
  return s;
}

inline TrajectorySeries trajectory_from_csv(const std::string& text, const std::string& what) {
  const CsvTable t = parse_csv(text, what);
  require_columns(t, {"t", "x", "y", "z"}, what);
  TrajectorySeries tr;
  for (const auto& r : t.rows) {
    tr.times.push_back(parse_double(r[0], what));
    tr.positions.emplace_back(parse_double(r[1], what), parse_double(r[2], what), parse_double(r[3], what));
  }
  tr.validate();
  return tr;
}

struct CorpusManifest {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::size_t n_train = 0, n_test = 0;
  std::vector<std::string> files;  // train files first
  std::string digest;              // over the file contents in order
};

inline std::string corpus_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "traj_%05zu.csv", i);
  return buf;
}

/// One CSV per trajectory plus manifest.json. Returns the manifest.
inline CorpusManifest write_corpus(const fs::path& dir, const Corpus& c, std::uint64_t seed) {
  CorpusManifest m;
  m.seed = seed;
  m.n_train = c.train.size();
  m.n_test = c.test.size();
  Digest d;
  std::size_t i = 0;
  for (const auto* set : {&c.train, &c.test})
    for (const auto& tr : *set) {
      const std::string name = corpus_file_name(i++);
      const std::string text = trajectory_csv(tr);
      write_text(dir / name, text);
      d.add(name);
      d.add(text);
      m.files.push_back(name);
    }
  m.count = m.files.size();
  m.digest = d.hex();
  Json env = Json::array();
  for (const auto& o : c.env_obstacles) env.push_back({o.x(), o.y(), o.z()});
  const Json j = {{"count", m.count},
                  {"seed", m.seed},
                  {"split", {{"train", m.n_train}, {"test", m.n_test}}},
                  {"files", m.files},
                  {"env_obstacles", env},
                  {"digest", m.digest}};
  write_text(dir / "manifest.json", j.dump(1) + "\n");
  return m;
}

inline Corpus read_corpus(const fs::path& dir, CorpusManifest* manifest_out = nullptr) {
  const Json j = read_json(dir / "manifest.json");
  CorpusManifest m;
  try {
    m.count = j.at("count").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_train = j.at("split").at("train").get<std::size_t>();
    m.n_test = j.at("split").at("test").get<std::size_t>();
    m.files = j.at("files").get<std::vector<std::string>>();
    m.digest = j.at("digest").get<std::string>();
  } catch (const Json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (m.files.size() != m.count || m.n_train + m.n_test != m.count)
    throw IoError((dir / "manifest.json").string() + ": counts do not add up");
  Corpus c;
  Digest d;
  for (std::size_t i = 0; i < m.files.size(); ++i) {
    const std::string text = read_text(dir / m.files[i]);
    d.add(m.files[i]);
    d.add(text);
    (i < m.n_train ? c.train : c.test).push_back(trajectory_from_csv(text, (dir / m.files[i]).string()));
  }
  if (d.hex() != m.digest) throw IoError(dir.string() + ": corpus files do not match the manifest digest");
  for (const auto& o : j.value("env_obstacles", Json::array())) c.env_obstacles.emplace_back(o[0], o[1], o[2]);
  if (manifest_out) *manifest_out = m;
  return c;
}

/// Digest of a scenario's obstacle scripts and reference.
inline std::string scenario_digest(const Scenario& sc) {
  Digest d;
  for (const auto& o : sc.static_obstacles)
    for (int i = 0; i < 3; ++i) d.add(o(i));
  d.add(trajectory_csv(sc.reference));
  for (const auto& m : sc.moving_obstacles) d.add(trajectory_csv(m));
  return d.hex();
}

// ---------------------------------------------------------------------------
// Run logs

inline std::vector<std::string> runlog_columns(std::size_t n_moving) {
  std::vector<std::string> c{"t", "x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw", "wx", "wy", "wz",
                             "u1", "u2", "u3", "u4", "err_x", "err_y", "err_z", "d_static"};
  for (std::size_t j = 0; j < n_moving; ++j) c.push_back("d_mov_" + std::to_string(j + 1));
  c.insert(c.end(), {"status", "t_comp", "V_N"});
  return c;
}

inline std::string runlog_csv(const RunLog& log) {
  std::string s;
  const auto cols = runlog_columns(log.n_moving);
  for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "," : "") + cols[i];
  s += "\n";
  for (const auto& r : log.records) {
    std::string line = fmt_double(r.t);
    for (int i = 0; i < kNx; ++i) line += "," + fmt_double(r.state.size() == kNx ? r.state(i) : std::nan(""));
    for (int i = 0; i < kNu; ++i) line += "," + fmt_double(r.control.size() == kNu ? r.control(i) : std::nan(""));
    for (int i = 0; i < 3; ++i) line += "," + fmt_double(r.error(i));
    line += "," + fmt_double(r.d_static);
    for (std::size_t j = 0; j < log.n_moving; ++j)
      line += "," + fmt_double(j < r.d_moving.size() ? r.d_moving[j] : kDistanceCap);
    line += std::string(",") + to_string(r.status) + "," + fmt_double(r.t_comp) + "," + fmt_double(r.value_function);
    s += line + "\n";
  }
  return s;
}

inline SolveStatus parse_status(const std::string& s) {
  for (auto st : {SolveStatus::optimal, SolveStatus::relaxed, SolveStatus::fallback})
    if (s == to_string(st)) return st;
  throw IoError("unknown solver status '" + s + "'");
}

/// Reads the columns of runlog_csv back. Fields not in the table keep defaults.
inline RunLog runlog_from_csv(const std::string& text, const std::string& what) {
  const CsvTable t = parse_csv(text, what);
  std::size_t n_moving = 0;
  for (const auto& h : t.header) n_moving += h.rfind("d_mov_", 0) == 0 ? 1 : 0;
  require_columns(t, runlog_columns(n_moving), what);
  RunLog log;
  log.n_moving = n_moving;
  for (const auto& r : t.rows) {
    StepRecord rec;
    std::size_t c = 0;
    auto next = [&] { return parse_double(r[c++], what); };
    rec.t = next();
    rec.state = Vec(kNx);
    for (int i = 0; i < kNx; ++i) rec.state(i) = next();
    rec.control = Vec(kNu);
    for (int i = 0; i < kNu; ++i) rec.control(i) = next();
    for (int i = 0; i < 3; ++i) rec.error(i) = next();
    rec.d_static = next();
    for (std::size_t j = 0; j < n_moving; ++j) rec.d_moving.push_back(next());
    rec.status = parse_status(r[c++]);
    rec.t_comp = next();
    rec.value_function = next();
    log.records.push_back(std::move(rec));
  }
  if (log.records.size() >= 2) log.dt = log.records[1].t - log.records[0].t;
  return log;
}

inline Json nan_to_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

inline Json summary_json(const RunMetrics& m, const RunLog& log, const std::vector<Encounter>& enc) {
  Json j;
  j["mode"] = to_string(log.mode);
  j["steps"] = m.steps;
  j["dt"] = log.dt;
  j["aborted"] = m.aborted;
  if (m.aborted) j["error"] = log.error;
  j["rms_error"] = m.rms_error;
  j["max_error"] = m.max_error;
  j["min_static_distance"] = m.min_static_distance;
  j["min_moving_distance"] = m.min_moving_distance;
  j["mean_solve_time"] = m.mean_solve_time;
  j["max_solve_time"] = m.max_solve_time;
  j["relaxed_steps"] = m.relaxed_steps;
  j["fallback_steps"] = m.fallback_steps;
  j["max_abs_velocity"] = m.max_abs_velocity;
  j["max_abs_input"] = m.max_abs_input;
  j["hard_stability_steps"] = m.hard_stability_steps;
  j["value_decrease_violations"] = m.value_decrease_violations;
  Json e = Json::array();
  for (std::size_t i = 0; i < enc.size(); ++i)
    e.push_back({{"obstacle", enc[i].obstacle + 1},
                 {"t_begin", enc[i].t_begin},
                 {"t_closest", enc[i].t_closest},
                 {"onset", nan_to_null(i < m.onset.size() ? m.onset[i] : std::nan(""))}});
  j["encounters"] = e;
  return j;
}

// ---------------------------------------------------------------------------
// Prediction tubes

inline std::vector<std::string> tube_columns() {
  return {"id", "t_now", "k", "t", "mean_x", "mean_y", "mean_z", "cov_xx", "cov_xy", "cov_xz", "cov_yy",
          "cov_yz", "cov_zz", "true_x", "true_y", "true_z"};
}

inline std::string tube_csv_header() {
  std::string s;
  const auto cols = tube_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "," : "") + cols[i];
  return s + "\n";
}

/// Rows of one predicted sequence next to the true positions.
inline std::string tube_csv_rows(std::size_t id, double t_now, const PredictedRegionSequence& r,
                                 const TrajectorySeries& truth) {
  std::string s;
  for (std::size_t k = 0; k < r.times.size(); ++k) {
    const Vec3& m = r.means[k];
    const Mat3& C = r.covs[k];
    const Vec3 p = truth.position_at(r.times[k]);
    s += std::to_string(id) + "," + fmt_double(t_now) + "," + std::to_string(k + 1) + "," + fmt_double(r.times[k]);
    for (double v : {m.x(), m.y(), m.z(), C(0, 0), C(0, 1), C(0, 2), C(1, 1), C(1, 2), C(2, 2), p.x(), p.y(), p.z()})
      s += "," + fmt_double(v);
    s += "\n";
  }
  return s;
}

}  // namespace ccmpc
