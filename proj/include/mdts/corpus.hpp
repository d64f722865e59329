#ifndef MDTS_CORPUS_HPP
#define MDTS_CORPUS_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mdts/io.hpp"
#include "mdts/tensor.hpp"

namespace mdts {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainSpec {
  std::string name;
  std::vector<std::string> variates;
  bool multivariate = true;
  double nominal_frequency = 0.0;  // Hz, metadata only

  /// Variates seen by the tokeniser. A uni-variate domain analyses every
  /// column as its own sample, so it has a single shared variate.
  std::vector<std::string> analysis_variates() const {
    if (multivariate) return variates;
    return {name};
  }

  void validate() const {
    if (name.empty()) throw DataError("domain with empty name");
    if (variates.empty()) throw DataError("domain '" + name + "' declares no variates");
    std::set<std::string> seen;
    for (const auto& v : variates)
      if (!seen.insert(v).second) throw DataError("domain '" + name + "' repeats variate '" + v + "'");
  }

  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

using DomainRef = std::shared_ptr<const DomainSpec>;

struct ClassLabel {
  int id = 0;
  friend bool operator==(const ClassLabel&, const ClassLabel&) = default;
};

struct TargetLabel {
  std::vector<double> values;
  friend bool operator==(const TargetLabel&, const TargetLabel&) = default;
};

using Label = std::variant<ClassLabel, TargetLabel>;

struct TimeSeriesSample {
  DomainRef domain;
  Matrix<double> values;            // V_S x T
  std::vector<int> variate_subset;  // indices into domain->analysis_variates()
  std::optional<Label> label;

  Eigen::Index num_variates() const { return values.rows(); }
  Eigen::Index length() const { return values.cols(); }
};

struct PreparedSample {
  Matrix<double> values;            // V_S x context_length
  std::vector<bool> time_validity;  // false on zero-padding
  Eigen::Index crop_offset = 0;
};

// ---------------------------------------------------------------------------
// Normalisation and crop/pad

/// Per-row z-scoring with population statistics; flat rows become zeros.
inline TimeSeriesSample normalize_channelwise(TimeSeriesSample sample) {
  auto& x = sample.values;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double sd = std::sqrt(var);
    if (sd <= 1e-12 * std::max(1.0, std::abs(mu))) {
      x.row(r).setZero();
    } else {
      x.row(r) = (x.row(r).array() - mu) / sd;
    }
  }
  return sample;
}

inline PreparedSample prepare(const TimeSeriesSample& sample, Eigen::Index context_length,
                              Eigen::Index patch_size, Rng& rng) {
  if (patch_size < 1 || context_length < patch_size || context_length % patch_size != 0)
    throw std::invalid_argument("context length " + std::to_string(context_length) +
                                " is not a positive multiple of patch size " + std::to_string(patch_size));
  const Eigen::Index len = sample.length();
  PreparedSample out;
  out.values = Matrix<double>::Zero(sample.num_variates(), context_length);
  out.time_validity.assign(static_cast<std::size_t>(context_length), true);
  if (len > context_length) {
    std::uniform_int_distribution<Eigen::Index> pick(0, len - context_length);
    out.crop_offset = pick(rng);
    out.values = sample.values.middleCols(out.crop_offset, context_length);
  } else {
    out.values.leftCols(len) = sample.values;
    for (Eigen::Index t = len; t < context_length; ++t) out.time_validity[static_cast<std::size_t>(t)] = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV + manifest

inline Matrix<double> read_series_csv(const std::string& path, std::vector<std::string>* header_out) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": missing header row");
  auto header = io::split(line, ',');
  const std::size_t ncol = header.size();
  std::vector<double> flat;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    auto fields = io::split(line, ',');
    if (fields.size() != ncol)
      throw DataError(path + ": row " + std::to_string(rows + 2) + " has " + std::to_string(fields.size()) +
                      " fields, header has " + std::to_string(ncol));
    for (const auto& f : fields) {
      double v = 0;
      if (!io::parse_number(f, v)) throw DataError(path + ": row " + std::to_string(rows + 2) + ": bad number '" + f + "'");
      if (!std::isfinite(v)) throw DataError(path + ": row " + std::to_string(rows + 2) + ": non-finite value");
      flat.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw DataError(path + ": no data rows");
  // rows = time, cols = variates; transpose into V x T.
  Matrix<double> vt(static_cast<Eigen::Index>(ncol), static_cast<Eigen::Index>(rows));
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t v = 0; v < ncol; ++v) vt(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(t)) = flat[t * ncol + v];
  if (header_out) *header_out = std::move(header);
  return vt;
}

inline void write_series_csv(const std::string& path, const std::vector<std::string>& header, const Matrix<double>& vt) {
  std::string text;
  for (std::size_t i = 0; i < header.size(); ++i) text += (i ? "," : "") + header[i];
  text += '\n';
  for (Eigen::Index t = 0; t < vt.cols(); ++t) {
    for (Eigen::Index v = 0; v < vt.rows(); ++v) {
      if (v) text += ',';
      text += io::format_number(vt(v, t));
    }
    text += '\n';
  }
  io::write_text(path, text);
}

inline std::string format_label(const Label& label) {
  if (const auto* c = std::get_if<ClassLabel>(&label)) return "class:" + std::to_string(c->id);
  const auto& t = std::get<TargetLabel>(label);
  std::string s = "target:";
  for (std::size_t i = 0; i < t.values.size(); ++i) s += (i ? ";" : "") + io::format_number(t.values[i]);
  return s;
}

inline Label parse_label(const std::string& field) {
  if (field.rfind("class:", 0) == 0) {
    long long id = 0;
    if (!io::parse_int(field.substr(6), id) || id < 0) throw DataError("bad class label '" + field + "'");
    return ClassLabel{static_cast<int>(id)};
  }
  if (field.rfind("target:", 0) == 0) {
    TargetLabel t;
    for (const auto& part : io::split(field.substr(7), ';')) {
      double v = 0;
      if (!io::parse_number(part, v) || !std::isfinite(v)) throw DataError("bad target label '" + field + "'");
      t.values.push_back(v);
    }
    return t;
  }
  throw DataError("label must be 'class:<id>' or 'target:<v1;v2;...>', got '" + field + "'");
}

/// Manifest layout:
///
///   # comment
///   [domains]
///   name, variate_1, ..., variate_V, frequency_hz, multivariate{0|1}
///   [samples]
///   name, csv_path[, class:<id> | target:<v1;v2>]
///
/// CSV paths are resolved relative to the manifest's directory.
inline std::vector<TimeSeriesSample> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  const auto base = std::filesystem::path(path).parent_path();
  std::map<std::string, DomainRef> domains;
  std::vector<TimeSeriesSample> samples;
  enum class Section { None, Domains, Samples } section = Section::None;
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto line = std::string(io::trim(raw));
    const std::string where = path + ":" + std::to_string(lineno);
    if (line.empty() || line[0] == '#') continue;
    if (line == "[domains]") {
      section = Section::Domains;
      continue;
    }
    if (line == "[samples]") {
      section = Section::Samples;
      continue;
    }
    auto f = io::split(line, ',');
    if (section == Section::Domains) {
      if (f.size() < 4) throw DataError(where + ": domain record needs name, variates, frequency, multivariate flag");
      DomainSpec spec;
      spec.name = f.front();
      spec.variates.assign(f.begin() + 1, f.end() - 2);
      if (!io::parse_number(f[f.size() - 2], spec.nominal_frequency))
        throw DataError(where + ": bad frequency '" + f[f.size() - 2] + "'");
      if (f.back() != "0" && f.back() != "1") throw DataError(where + ": multivariate flag must be 0 or 1");
      spec.multivariate = f.back() == "1";
      try {
        spec.validate();
      } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
      }
      if (auto it = domains.find(spec.name); it != domains.end()) {
        if (!(*it->second == spec)) throw DataError(where + ": conflicting redefinition of domain '" + spec.name + "'");
        continue;
      }
      auto key = spec.name;
      domains.emplace(std::move(key), std::make_shared<const DomainSpec>(std::move(spec)));
    } else if (section == Section::Samples) {
      if (f.size() < 2 || f.size() > 3) throw DataError(where + ": sample record needs domain, csv_path[, label]");
      auto it = domains.find(f[0]);
      if (it == domains.end()) throw DataError(where + ": unknown domain '" + f[0] + "'");
      const DomainRef& dom = it->second;
      std::optional<Label> label;
      if (f.size() == 3 && !f[2].empty()) {
        try {
          label = parse_label(f[2]);
        } catch (const DataError& e) {
          throw DataError(where + ": " + e.what());
        }
      }
      const auto csv = (base / f[1]).string();
      std::vector<std::string> header;
      Matrix<double> values;
      try {
        values = read_series_csv(csv, &header);
      } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
      }
      if (header.size() != dom->variates.size())
        throw DataError(where + ": " + f[1] + " has " + std::to_string(header.size()) + " columns but domain '" + dom->name +
                        "' declares " + std::to_string(dom->variates.size()) + " variates");
      if (header != dom->variates) throw DataError(where + ": " + f[1] + " header does not match the variates of '" + dom->name + "'");
      if (dom->multivariate) {
        TimeSeriesSample s{dom, std::move(values), {}, label};
        for (int v = 0; v < static_cast<int>(dom->variates.size()); ++v) s.variate_subset.push_back(v);
        samples.push_back(std::move(s));
      } else {
        for (Eigen::Index v = 0; v < values.rows(); ++v)
          samples.push_back(TimeSeriesSample{dom, values.row(v), {0}, label});
      }
    } else {
      throw DataError(where + ": record outside [domains]/[samples] section");
    }
  }
  return samples;
}

/// Writes `samples` as a manifest plus one CSV per sample under `dir`.
inline void write_manifest(const std::string& dir, const std::vector<TimeSeriesSample>& samples,
                           const std::string& manifest_name = "manifest.txt") {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "data");
  std::vector<DomainRef> order;
  for (const auto& s : samples)
    if (std::none_of(order.begin(), order.end(), [&](const DomainRef& d) { return d->name == s.domain->name; }))
      order.push_back(s.domain);
  std::string text = "# mdts manifest v1\n[domains]\n";
  for (const auto& d : order) {
    text += d->name;
    for (const auto& v : d->variates) text += ", " + v;
    text += ", " + io::format_number(d->nominal_frequency) + ", " + (d->multivariate ? "1" : "0") + "\n";
  }
  text += "[samples]\n";
  std::map<std::string, int> counter;
  for (const auto& s : samples) {
    const auto& d = *s.domain;
    if (!d.multivariate || s.values.rows() != static_cast<Eigen::Index>(d.variates.size()))
      throw DataError("write_manifest: sample of '" + d.name + "' does not span the full variate catalogue");
    char name[64];
    std::snprintf(name, sizeof name, "%05d", counter[d.name]++);
    const std::string rel = "data/" + d.name + "_" + name + ".csv";
    write_series_csv((fs::path(dir) / rel).string(), d.variates, s.values);
    text += d.name + ", " + rel;
    if (s.label) text += ", " + format_label(*s.label);
    text += "\n";
  }
  io::write_text((fs::path(dir) / manifest_name).string(), text);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class SynthTask { None, Class, Mixture, Periodic };

struct SynthDomainConfig {
  std::string name;
  int variates = 1;
  int samples = 0;
  int length = 0;
  double frequency_hz = 100.0;
  // Sinusoid frequencies in cycles per time step.
  double band_lo = 0.01;
  double band_hi = 0.05;
  int sources = 3;
  int layout_dims = 0;  // 0 = no planted layout, 2 or 3
  // Explicit variates x layout_dims coordinates; random positions when empty.
  Matrix<double> fixed_layout;
  double length_scale = 0.35;
  // Sources fall in a disk (or on a sphere) of this radius, wider than the
  // unit layout so edge variates are not systematically quieter.
  double source_radius = 1.0;
  double noise = 0.05;
  SynthTask task = SynthTask::None;
  // Class task: one band per class. Mixture task: [slow, fast] component bands.
  std::vector<std::pair<double, double>> class_bands;
  double period = 48.0;  // periodic task
};

struct SynthConfig {
  std::vector<SynthDomainConfig> domains;
};

struct SynthCorpus {
  std::vector<TimeSeriesSample> samples;
  std::map<std::string, Matrix<double>> layouts;  // planted V x k coordinates
};

inline std::vector<std::string> default_variate_names(const std::string& domain, int n) {
  std::vector<std::string> names;
  for (int i = 0; i < n; ++i) names.push_back(domain + "_ch" + std::to_string(i));
  return names;
}

namespace detail {

inline Matrix<double> planted_layout(int variates, int dims, Rng& rng) {
  // Uniform in the unit disk (2D) or on the upper unit hemisphere (3D).
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> n01;
  Matrix<double> pos(variates, dims);
  for (int v = 0; v < variates; ++v) {
    if (dims == 2) {
      double x, y;
      do {
        x = u(rng);
        y = u(rng);
      } while (x * x + y * y > 1.0);
      pos(v, 0) = x;
      pos(v, 1) = y;
    } else {
      Eigen::Vector3d p(n01(rng), n01(rng), std::abs(n01(rng)));
      p.normalize();
      pos.row(v) = p.transpose();
    }
  }
  return pos;
}

inline Matrix<double> source_positions(int count, int dims, double radius, Rng& rng) {
  Matrix<double> pos(count, dims);
  if (dims == 2) {
    std::uniform_real_distribution<double> u(-radius, radius);
    for (int k = 0; k < count; ++k) {
      double x, y;
      do {
        x = u(rng);
        y = u(rng);
      } while (x * x + y * y > radius * radius);
      pos(k, 0) = x;
      pos(k, 1) = y;
    }
  } else {
    std::normal_distribution<double> n01;
    for (int k = 0; k < count; ++k) {
      Eigen::Vector3d p(n01(rng), n01(rng), n01(rng));
      pos.row(k) = p.normalized().transpose() * radius;
    }
  }
  return pos;
}

inline double draw_frequency(double lo, double hi, Rng& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace detail

inline SynthCorpus synth_corpus(const SynthConfig& config, Rng& rng) {
  if (config.domains.empty()) throw std::invalid_argument("synth config declares no domains");
  std::set<std::string> names;
  SynthCorpus corpus;
  for (const auto& dc : config.domains) {
    if (dc.samples <= 0) throw std::invalid_argument("domain '" + dc.name + "' requests zero samples");
    if (dc.variates <= 0 || dc.length <= 0) throw std::invalid_argument("domain '" + dc.name + "' needs variates and length");
    if (!names.insert(dc.name).second) throw std::invalid_argument("duplicate synth domain '" + dc.name + "'");
    if (dc.layout_dims != 0 && dc.layout_dims != 2 && dc.layout_dims != 3)
      throw std::invalid_argument("layout_dims must be 0, 2 or 3");
    if (dc.task == SynthTask::Class && dc.class_bands.size() < 2)
      throw std::invalid_argument("class task on '" + dc.name + "' needs at least two class bands");
    if (dc.task == SynthTask::Mixture && dc.class_bands.size() != 2)
      throw std::invalid_argument("mixture task on '" + dc.name + "' needs exactly two component bands");
    if (dc.layout_dims && !(dc.source_radius > 0 && dc.length_scale > 0))
      throw std::invalid_argument("layout domains need positive source_radius and length_scale");
    if (dc.task == SynthTask::Periodic && !(dc.period > 0)) throw std::invalid_argument("periodic task needs period > 0");

    auto spec = std::make_shared<DomainSpec>();
    spec->name = dc.name;
    spec->variates = default_variate_names(dc.name, dc.variates);
    spec->multivariate = true;
    spec->nominal_frequency = dc.frequency_hz;
    DomainRef dom = spec;

    Matrix<double> layout;
    if (dc.layout_dims) {
      if (dc.fixed_layout.size() > 0) {
        if (dc.fixed_layout.rows() != dc.variates || dc.fixed_layout.cols() != dc.layout_dims)
          throw std::invalid_argument("fixed layout of '" + dc.name + "' does not match variates x layout_dims");
        layout = dc.fixed_layout;
      } else {
        layout = detail::planted_layout(dc.variates, dc.layout_dims, rng);
      }
      corpus.layouts.emplace(dc.name, layout);
    }

    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> amp(0.5, 1.5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double two_pi = 2.0 * std::numbers::pi;

    for (int i = 0; i < dc.samples; ++i) {
      TimeSeriesSample s;
      s.domain = dom;
      s.values = Matrix<double>::Zero(dc.variates, dc.length);
      for (int v = 0; v < dc.variates; ++v) s.variate_subset.push_back(v);

      double lo = dc.band_lo, hi = dc.band_hi;
      if (dc.task == SynthTask::Class) {
        const int cls = i % static_cast<int>(dc.class_bands.size());
        lo = dc.class_bands[cls].first;
        hi = dc.class_bands[cls].second;
        s.label = ClassLabel{cls};
      }

      if (dc.task == SynthTask::Mixture) {
        const double a = unit(rng);
        s.label = TargetLabel{{a}};
        for (int v = 0; v < dc.variates; ++v) {
          const double f1 = detail::draw_frequency(dc.class_bands[0].first, dc.class_bands[0].second, rng);
          const double f2 = detail::draw_frequency(dc.class_bands[1].first, dc.class_bands[1].second, rng);
          const double p1 = phase(rng), p2 = phase(rng);
          for (int t = 0; t < dc.length; ++t)
            s.values(v, t) = a * std::sin(two_pi * f1 * t + p1) + (1.0 - a) * std::sin(two_pi * f2 * t + p2) +
                             dc.noise * noise(rng);
        }
      } else if (dc.task == SynthTask::Periodic) {
        for (int v = 0; v < dc.variates; ++v) {
          const double p = phase(rng);
          const double a = amp(rng);
          for (int t = 0; t < dc.length; ++t) s.values(v, t) = a * std::sin(two_pi * t / dc.period + p) + dc.noise * noise(rng);
        }
      } else if (dc.layout_dims) {
        // Each source sits somewhere on the layout; a variate hears every
        // source attenuated by a Gaussian of their distance.
        Matrix<double> src_pos = detail::source_positions(dc.sources, dc.layout_dims, dc.source_radius, rng);
        for (int k = 0; k < dc.sources; ++k) {
          const double f = detail::draw_frequency(lo, hi, rng);
          const double p = phase(rng);
          const double a = amp(rng);
          RowVector<double> wave(dc.length);
          for (int t = 0; t < dc.length; ++t) wave(t) = a * std::sin(two_pi * f * t + p);
          for (int v = 0; v < dc.variates; ++v) {
            const double d2 = (layout.row(v) - src_pos.row(k)).squaredNorm();
            const double w = std::exp(-d2 / (2.0 * dc.length_scale * dc.length_scale));
            s.values.row(v) += w * wave;
          }
        }
        for (Eigen::Index j = 0; j < s.values.size(); ++j) s.values.data()[j] += dc.noise * noise(rng);
      } else {
        for (int v = 0; v < dc.variates; ++v) {
          for (int k = 0; k < dc.sources; ++k) {
            const double f = detail::draw_frequency(lo, hi, rng);
            const double p = phase(rng);
            const double a = amp(rng);
            for (int t = 0; t < dc.length; ++t) s.values(v, t) += a * std::sin(two_pi * f * t + p);
          }
          for (int t = 0; t < dc.length; ++t) s.values(v, t) += dc.noise * noise(rng);
        }
      }
      corpus.samples.push_back(std::move(s));
    }
  }
  return corpus;
}

}  // namespace mdts

#endif  // MDTS_CORPUS_HPP
