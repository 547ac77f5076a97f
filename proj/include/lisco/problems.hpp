#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "lisco/common.hpp"

namespace lisco {

enum class ProblemKind { ConvexQp, NonconvexQp, Rosenbrock };

inline std::string_view to_string(ProblemKind kind) {
  switch (kind) {
    case ProblemKind::ConvexQp: return "convex_qp";
    case ProblemKind::NonconvexQp: return "nonconvex_qp";
    case ProblemKind::Rosenbrock: return "rosenbrock";
  }
  return "convex_qp";
}

inline ProblemKind parse_problem_kind(std::string_view tag) {
  if (tag == "convex_qp") return ProblemKind::ConvexQp;
  if (tag == "nonconvex_qp") return ProblemKind::NonconvexQp;
  if (tag == "rosenbrock") return ProblemKind::Rosenbrock;
  throw ValidationError("unknown problem kind '" + std::string(tag) + "'");
}

/**
 * One instantiation of the parametric problem
 *
 *   min_y f(y)  s.t.  A y = x,  G y <= h,
 *
 * where the parameter x enters only the equality right-hand side. Immutable
 * once built; safe to share read-only between threads.
 */
template <typename Scalar = double>
struct ProblemInstance {
  ProblemKind kind = ProblemKind::ConvexQp;
  Index n_y = 0;
  Index n_h = 0;
  Index n_g = 0;
  std::optional<Vector<Scalar>> q_diag;  // absent for Rosenbrock
  Vector<Scalar> p;
  Matrix<Scalar> a_mat;
  Matrix<Scalar> g_mat;
  Vector<Scalar> h_vec;
  std::uint64_t seed = 0;

  Index n_z() const { return n_y + n_h + n_g; }
  Index n_x() const { return n_h; }

  template <typename Other>
  ProblemInstance<Other> cast() const {
    ProblemInstance<Other> out;
    out.kind = kind;
    out.n_y = n_y;
    out.n_h = n_h;
    out.n_g = n_g;
    if (q_diag) out.q_diag = q_diag->template cast<Other>();
    out.p = p.template cast<Other>();
    out.a_mat = a_mat.template cast<Other>();
    out.g_mat = g_mat.template cast<Other>();
    out.h_vec = h_vec.template cast<Other>();
    out.seed = seed;
    return out;
  }

  /// Throws unless every stored array agrees with the recorded counts.
  void validate() const {
    require_dims(n_y > 0 && n_h >= 0 && n_g >= 0, "instance counts");
    require_dims(p.size() == n_y, "p length");
    require_dims(a_mat.rows() == n_h && a_mat.cols() == n_y, "A shape");
    require_dims(g_mat.rows() == n_g && g_mat.cols() == n_y, "G shape");
    require_dims(h_vec.size() == n_g, "h length");
    if (kind == ProblemKind::Rosenbrock) {
      if (q_diag) throw ValidationError("rosenbrock instance must not carry q_diag");
    } else {
      if (!q_diag) throw ValidationError("quadratic instance requires q_diag");
      require_dims(q_diag->size() == n_y, "q_diag length");
    }
  }
};

/// Batch of parameter vectors, one per row, entries in [-1, 1].
template <typename Scalar = double>
struct ParamBatch {
  Matrix<Scalar> x;
  Index n() const { return x.rows(); }
};

class GenerationFailure : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

inline constexpr double kRankPivotThreshold = 1e-10;
inline constexpr int kMaxRankRetries = 10;

/// Moore-Penrose pseudo-inverse of a full-row-rank A as A^T (A A^T)^{-1}.
/// Returns nullopt when a pivot of A A^T falls below the rank threshold.
template <typename Scalar>
std::optional<Matrix<Scalar>> pseudo_inverse_full_row_rank(const Matrix<Scalar>& a) {
  const Index m = a.rows();
  if (m == 0) return Matrix<Scalar>::Zero(a.cols(), 0);
  const Matrix<Scalar> gram = a * a.transpose();
  Eigen::PartialPivLU<Matrix<Scalar>> lu(gram);
  const auto pivots = lu.matrixLU().diagonal().cwiseAbs();
  if (!(pivots.minCoeff() > Scalar(kRankPivotThreshold))) return std::nullopt;
  const Matrix<Scalar> w = lu.solve(Matrix<Scalar>::Identity(m, m));
  return Matrix<Scalar>(a.transpose() * w);
}

/// h_i = sum_j |G A^+|_ij, which makes G A^+ x <= h for all x in [-1,1]^n_h.
template <typename Scalar>
Vector<Scalar> feasible_rhs(const Matrix<Scalar>& g, const Matrix<Scalar>& a_pinv) {
  return (g * a_pinv).cwiseAbs().rowwise().sum();
}

/// Builds an instance from explicit data; h is derived from A and G.
template <typename Scalar>
ProblemInstance<Scalar> make_instance(ProblemKind kind, std::optional<Vector<Scalar>> q_diag,
                                      Vector<Scalar> p, Matrix<Scalar> a, Matrix<Scalar> g,
                                      std::uint64_t seed = 0) {
  ProblemInstance<Scalar> inst;
  inst.kind = kind;
  inst.n_y = p.size();
  inst.n_h = a.rows();
  inst.n_g = g.rows();
  inst.q_diag = std::move(q_diag);
  inst.p = std::move(p);
  inst.a_mat = std::move(a);
  inst.g_mat = std::move(g);
  inst.seed = seed;
  require_dims(inst.a_mat.cols() == inst.n_y || inst.n_h == 0, "A columns");
  if (inst.n_h == 0) inst.a_mat.resize(0, inst.n_y);
  if (inst.n_g == 0) inst.g_mat.resize(0, inst.n_y);
  auto pinv = pseudo_inverse_full_row_rank(inst.a_mat);
  if (!pinv) throw GenerationFailure("A is rank deficient");
  inst.h_vec = feasible_rhs(inst.g_mat, *pinv);
  inst.validate();
  return inst;
}

/**
 * Samples an instance: Q diagonal and p uniform on [0,1], A and G standard
 * normal, h from the pseudo-inverse construction. A is redrawn (from the same
 * stream) while it is rank deficient, at most kMaxRankRetries times.
 */
template <typename Scalar = double>
ProblemInstance<Scalar> gen_instance(ProblemKind kind, Index n_y, Index n_h, Index n_g,
                                     std::uint64_t seed) {
  if (!(n_h > 0 && n_h <= n_y && n_g > 0))
    throw ValidationError("gen_instance requires 0 < n_h <= n_y and n_g > 0");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::optional<Vector<Scalar>> q_diag;
  if (kind != ProblemKind::Rosenbrock) {
    Vector<Scalar> q(n_y);
    for (Index i = 0; i < n_y; ++i) q[i] = Scalar(unit(rng));
    q_diag = std::move(q);
  }
  Vector<Scalar> p(n_y);
  for (Index i = 0; i < n_y; ++i) p[i] = Scalar(unit(rng));

  Matrix<Scalar> g(n_g, n_y);
  for (Index i = 0; i < n_g; ++i)
    for (Index j = 0; j < n_y; ++j) g(i, j) = Scalar(normal(rng));

  for (int attempt = 0; attempt < kMaxRankRetries; ++attempt) {
    Matrix<Scalar> a(n_h, n_y);
    for (Index i = 0; i < n_h; ++i)
      for (Index j = 0; j < n_y; ++j) a(i, j) = Scalar(normal(rng));
    auto pinv = pseudo_inverse_full_row_rank(a);
    if (!pinv) continue;
    ProblemInstance<Scalar> inst;
    inst.kind = kind;
    inst.n_y = n_y;
    inst.n_h = n_h;
    inst.n_g = n_g;
    inst.q_diag = std::move(q_diag);
    inst.p = std::move(p);
    inst.a_mat = std::move(a);
    inst.g_mat = std::move(g);
    inst.h_vec = feasible_rhs(inst.g_mat, *pinv);
    inst.seed = seed;
    return inst;
  }
  throw GenerationFailure("A rank deficient after " + std::to_string(kMaxRankRetries) +
                          " attempts");
}

/// n i.i.d. parameter vectors with entries uniform on [-1, 1].
template <typename Scalar>
ParamBatch<Scalar> sample_params(const ProblemInstance<Scalar>& inst, Index n, std::uint64_t seed) {
  if (n < 1) throw ValidationError("sample_params requires n >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  ParamBatch<Scalar> batch;
  batch.x.resize(n, inst.n_h);
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < inst.n_h; ++c) batch.x(r, c) = Scalar(dist(rng));
  return batch;
}

// Objective, gradient and Hessian. The parameter x never enters f; it is
// accepted so that every problem callback shares one signature.

template <typename Scalar, typename DerivedY, typename DerivedX>
Scalar objective(const ProblemInstance<Scalar>& inst, const Eigen::MatrixBase<DerivedY>& y,
                 const Eigen::MatrixBase<DerivedX>& x) {
  require_dims(y.size() == inst.n_y, "objective: y");
  require_dims(x.size() == inst.n_h, "objective: x");
  switch (inst.kind) {
    case ProblemKind::ConvexQp:
      return Scalar(0.5) * y.dot(inst.q_diag->cwiseProduct(y)) + inst.p.dot(y);
    case ProblemKind::NonconvexQp:
      return Scalar(0.5) * y.dot(inst.q_diag->cwiseProduct(y)) +
             inst.p.dot(y.array().sin().matrix());
    case ProblemKind::Rosenbrock: {
      Scalar f = 0;
      for (Index i = 0; i + 1 < inst.n_y; ++i) {
        const Scalar a = y[i + 1] - y[i] * y[i];
        const Scalar b = Scalar(1) - y[i];
        f += a * a + Scalar(0.01) * b * b;
      }
      return f + Scalar(5) * inst.p.dot(y);
    }
  }
  return 0;
}

template <typename Scalar, typename DerivedY, typename DerivedX>
Vector<Scalar> objective_grad(const ProblemInstance<Scalar>& inst,
                              const Eigen::MatrixBase<DerivedY>& y,
                              const Eigen::MatrixBase<DerivedX>& x) {
  require_dims(y.size() == inst.n_y, "objective_grad: y");
  require_dims(x.size() == inst.n_h, "objective_grad: x");
  switch (inst.kind) {
    case ProblemKind::ConvexQp:
      return inst.q_diag->cwiseProduct(y) + inst.p;
    case ProblemKind::NonconvexQp:
      return inst.q_diag->cwiseProduct(y) + inst.p.cwiseProduct(y.array().cos().matrix());
    case ProblemKind::Rosenbrock: {
      const Index n = inst.n_y;
      Vector<Scalar> g = Scalar(5) * inst.p;
      for (Index i = 0; i + 1 < n; ++i) {
        const Scalar a = y[i + 1] - y[i] * y[i];
        g[i] += Scalar(-4) * y[i] * a - Scalar(0.02) * (Scalar(1) - y[i]);
        g[i + 1] += Scalar(2) * a;
      }
      return g;
    }
  }
  return {};
}

template <typename Scalar, typename DerivedY, typename DerivedX>
Matrix<Scalar> objective_hess(const ProblemInstance<Scalar>& inst,
                              const Eigen::MatrixBase<DerivedY>& y,
                              const Eigen::MatrixBase<DerivedX>& x) {
  require_dims(y.size() == inst.n_y, "objective_hess: y");
  require_dims(x.size() == inst.n_h, "objective_hess: x");
  const Index n = inst.n_y;
  Matrix<Scalar> h = Matrix<Scalar>::Zero(n, n);
  switch (inst.kind) {
    case ProblemKind::ConvexQp:
      h.diagonal() = *inst.q_diag;
      break;
    case ProblemKind::NonconvexQp:
      h.diagonal() = *inst.q_diag - inst.p.cwiseProduct(y.array().sin().matrix());
      break;
    case ProblemKind::Rosenbrock:
      for (Index i = 0; i + 1 < n; ++i) {
        const Scalar a = y[i + 1] - y[i] * y[i];
        h(i, i) += Scalar(-4) * a + Scalar(8) * y[i] * y[i] + Scalar(0.02);
        h(i + 1, i + 1) += Scalar(2);
        h(i, i + 1) += Scalar(-4) * y[i];
        h(i + 1, i) += Scalar(-4) * y[i];
      }
      break;
  }
  return h;
}

template <typename Scalar>
struct ConstraintValues {
  Vector<Scalar> eq;    // A y - x
  Vector<Scalar> ineq;  // G y - h, feasible when <= 0
};

template <typename Scalar, typename DerivedY, typename DerivedX>
ConstraintValues<Scalar> constraints(const ProblemInstance<Scalar>& inst,
                                     const Eigen::MatrixBase<DerivedY>& y,
                                     const Eigen::MatrixBase<DerivedX>& x) {
  require_dims(y.size() == inst.n_y, "constraints: y");
  require_dims(x.size() == inst.n_h, "constraints: x");
  return {inst.a_mat * y - x, inst.g_mat * y - inst.h_vec};
}

// ---------------------------------------------------------------------------
// JSON persistence (double precision; values written as shortest round-trip
// decimals by nlohmann::json).

namespace detail {

template <typename Scalar>
nlohmann::json to_json_array(const Vector<Scalar>& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Index i = 0; i < v.size(); ++i) arr.push_back(double(v[i]));
  return arr;
}

template <typename Scalar>
nlohmann::json to_json_array(const Matrix<Scalar>& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) arr.push_back(double(m(r, c)));
  return arr;
}

template <typename Scalar>
Vector<Scalar> vector_from_json(const nlohmann::json& arr, Index expected, const char* what) {
  if (!arr.is_array() || Index(arr.size()) != expected)
    throw DimensionMismatch(std::string("dimension mismatch: ") + what);
  Vector<Scalar> v(expected);
  for (Index i = 0; i < expected; ++i) v[i] = Scalar(arr[size_t(i)].get<double>());
  return v;
}

template <typename Scalar>
Matrix<Scalar> matrix_from_json(const nlohmann::json& arr, Index rows, Index cols,
                                const char* what) {
  if (!arr.is_array() || Index(arr.size()) != rows * cols)
    throw DimensionMismatch(std::string("dimension mismatch: ") + what);
  Matrix<Scalar> m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = Scalar(arr[size_t(r * cols + c)].get<double>());
  return m;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("parse error in " + path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << text;
}

}  // namespace detail

inline constexpr int kInstanceFormatVersion = 1;

template <typename Scalar>
nlohmann::json instance_to_json(const ProblemInstance<Scalar>& inst) {
  nlohmann::json j;
  j["format_version"] = kInstanceFormatVersion;
  j["kind"] = std::string(to_string(inst.kind));
  j["n_y"] = inst.n_y;
  j["n_h"] = inst.n_h;
  j["n_g"] = inst.n_g;
  j["q_diag"] = inst.q_diag ? detail::to_json_array(*inst.q_diag) : nlohmann::json(nullptr);
  j["p"] = detail::to_json_array(inst.p);
  j["a_row_major"] = detail::to_json_array(inst.a_mat);
  j["g_row_major"] = detail::to_json_array(inst.g_mat);
  j["h"] = detail::to_json_array(inst.h_vec);
  j["seed"] = inst.seed;
  return j;
}

inline ProblemInstance<double> instance_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kInstanceFormatVersion)
      throw ValidationError("unsupported instance format_version");
    ProblemInstance<double> inst;
    inst.kind = parse_problem_kind(j.at("kind").get<std::string>());
    inst.n_y = j.at("n_y").get<Index>();
    inst.n_h = j.at("n_h").get<Index>();
    inst.n_g = j.at("n_g").get<Index>();
    if (!j.at("q_diag").is_null())
      inst.q_diag = detail::vector_from_json<double>(j["q_diag"], inst.n_y, "q_diag");
    inst.p = detail::vector_from_json<double>(j.at("p"), inst.n_y, "p");
    inst.a_mat = detail::matrix_from_json<double>(j.at("a_row_major"), inst.n_h, inst.n_y, "A");
    inst.g_mat = detail::matrix_from_json<double>(j.at("g_row_major"), inst.n_g, inst.n_y, "G");
    inst.h_vec = detail::vector_from_json<double>(j.at("h"), inst.n_g, "h");
    inst.seed = j.at("seed").get<std::uint64_t>();
    inst.validate();
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed instance: ") + e.what());
  }
}

template <typename Scalar>
void save_instance(const ProblemInstance<Scalar>& inst, const std::string& path) {
  detail::write_text_file(path, instance_to_json(inst).dump() + "\n");
}

inline ProblemInstance<double> load_instance(const std::string& path) {
  return instance_from_json(detail::read_json_file(path));
}

/// FNV-1a over the canonical JSON text; keys oracle caches to an instance.
template <typename Scalar>
std::uint64_t instance_hash(const ProblemInstance<Scalar>& inst) {
  return fnv1a(instance_to_json(inst).dump());
}

}  // namespace lisco
