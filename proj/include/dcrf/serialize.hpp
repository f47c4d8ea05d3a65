#ifndef DCRF_SERIALIZE_HPP
#define DCRF_SERIALIZE_HPP

#include "dcrf/features.hpp"
#include "dcrf/solver.hpp"
#include "dcrf/theory.hpp"

#include "json.hpp"

#include <fstream>
#include <string>
#include <vector>

namespace dcrf {

using Json = nlohmann::ordered_json;

inline Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Vector vector_from_json(const Json& a) {
  require(a.is_array(), "expected a JSON array");
  Vector v(static_cast<Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Index>(i)) = a[i].get<double>();
  return v;
}

/// Row-major nested arrays.
inline Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const Json& a) {
  require(a.is_array() && !a.empty() && a.front().is_array(), "expected a nonempty array of rows");
  const auto cols = a.front().size();
  Matrix m(static_cast<Index>(a.size()), static_cast<Index>(cols));
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i].size() == cols, "ragged matrix rows");
    for (std::size_t j = 0; j < cols; ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = a[i][j].get<double>();
  }
  return m;
}

inline Json to_json(const KernelSpec& k) { return Json{{"kind", to_string(k.kind)}, {"bandwidth", k.bandwidth}}; }

inline KernelSpec kernel_from_json(const Json& j) {
  KernelSpec k{parse_kernel_kind(j.at("kind").get<std::string>()), j.value("bandwidth", 1.0)};
  k.validate();
  return k;
}

inline Json to_json(const FeatureMap& fm) {
  return Json{{"id", fm.id()},
              {"family", to_string(fm.family())},
              {"kernel", to_json(fm.kernel())},
              {"seed", fm.seed()},
              {"flags", fm.flags()},
              {"frequencies", to_json(fm.frequencies())},
              {"phases", to_json(fm.phases())},
              {"importance_weights", to_json(fm.importance_weights())}};
}

inline FeatureMap feature_map_from_json(const Json& j) {
  FeatureMap fm(parse_feature_family(j.at("family").get<std::string>()), kernel_from_json(j.at("kernel")),
                matrix_from_json(j.at("frequencies")), vector_from_json(j.at("phases")),
                vector_from_json(j.at("importance_weights")), j.at("seed").get<std::uint64_t>(),
                j.value("flags", std::vector<std::string>{}));
  if (j.contains("id") && j["id"].get<std::string>() != fm.id())
    throw InvalidArgument("feature map content does not match its recorded id");
  return fm;
}

inline Json to_json(const LocalModel& m) {
  return Json{{"feature_map_id", m.feature_map_id},
              {"partition_index", m.partition_index},
              {"n_local", m.n_local},
              {"weights", to_json(m.weights)}};
}

inline Json to_json(const AveragedModel& m) {
  return Json{{"feature_map_id", m.feature_map_id},
              {"m", m.m},
              {"partition_sizes", m.partition_sizes},
              {"weights", to_json(m.weights)}};
}

inline AveragedModel averaged_model_from_json(const Json& j) {
  AveragedModel m;
  m.feature_map_id = j.at("feature_map_id").get<std::string>();
  m.m = j.at("m").get<Index>();
  m.partition_sizes = j.value("partition_sizes", std::vector<Index>{});
  m.weights = vector_from_json(j.at("weights"));
  return m;
}

inline Json to_json(const RateParams& p) { return Json{{"r", p.r}, {"gamma", p.gamma}, {"alpha", p.alpha}}; }

inline Json to_json(const ParamPlan& p) {
  Json j{{"N", p.N},
         {"N_star", p.N_star},
         {"lambda", p.lambda},
         {"M", p.M},
         {"m", p.m},
         {"rate_exponent", p.rate_exponent},
         {"M_exponent", p.M_exponent},
         {"m_exponent", p.m_exponent},
         {"safety_c", p.safety_c},
         {"params", to_json(p.params)}};
  j["n0"] = p.n0 ? Json(*p.n0) : Json(nullptr);
  return j;
}

inline Json to_json(const ErrorDecomposition& e) {
  return Json{{"variance", e.variance},
              {"empirical_error", e.empirical_error},
              {"distributed_error", e.distributed_error},
              {"rf_error", e.rf_error},
              {"approximation_error", e.approximation_error},
              {"total_excess_risk", e.total_excess_risk},
              {"bound", e.bound()},
              {"replicates", e.replicates}};
}

/// Self-contained model artifact: weights, lambda, the feature map itself and
/// the configuration that produced them.
struct ModelFile {
  AveragedModel model;
  FeatureMap feature_map;
  double lambda = 0.0;
  Json config;
};

inline Json to_json(const ModelFile& f) {
  return Json{{"format", "dcrf-model/1"},
              {"config", f.config},
              {"lambda", f.lambda},
              {"model", to_json(f.model)},
              {"feature_map", to_json(f.feature_map)}};
}

inline ModelFile model_file_from_json(const Json& j) {
  if (j.value("format", std::string{}) != "dcrf-model/1") throw InvalidArgument("not a dcrf model file");
  ModelFile f{averaged_model_from_json(j.at("model")), feature_map_from_json(j.at("feature_map")),
              j.at("lambda").get<double>(), j.value("config", Json::object())};
  if (f.model.feature_map_id != f.feature_map.id()) throw InvalidArgument("model and feature map ids differ");
  if (f.model.weights.size() != f.feature_map.size()) throw InvalidArgument("weight count differs from M");
  return f;
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw InvalidArgument("'" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace dcrf

#endif  // DCRF_SERIALIZE_HPP
