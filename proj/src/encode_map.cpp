#include "cotrec/encode_map.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <random>

#include <Eigen/SVD>

#include "cotrec/error.hpp"
#include "cotrec/io.hpp"

namespace cotrec {

Reducer fit_reducer(const Eigen::MatrixXd& corpus, int d_crm) {
  const Eigen::Index n = corpus.rows();
  const Eigen::Index d_lm = corpus.cols();
  if (d_crm < 1 || d_crm > d_lm || n < d_crm) {
    throw ConfigError("fit_reducer: need 1 <= d_crm <= d_lm and N >= d_crm (N=" +
                      std::to_string(n) + ", d_lm=" + std::to_string(d_lm) +
                      ", d_crm=" + std::to_string(d_crm) + ")");
  }
  if (!corpus.allFinite()) {
    throw ConfigError("fit_reducer: corpus contains non-finite values");
  }

  Eigen::VectorXd mean = corpus.colwise().mean();
  Eigen::MatrixXd centered = corpus.rowwise() - mean.transpose();

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& sigma = svd.singularValues();
  const double tol = sigma.size() > 0
                         ? sigma(0) * static_cast<double>(std::max(n, d_lm)) *
                               std::numeric_limits<double>::epsilon()
                         : 0.0;
  int rank = 0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) > tol) ++rank;
  }
  if (rank < d_crm) {
    throw RankDeficiencyError("fit_reducer: centered corpus has rank " +
                                  std::to_string(rank) + " < d_crm " +
                                  std::to_string(d_crm),
                              rank);
  }

  Eigen::MatrixXd proj = svd.matrixV().leftCols(d_crm);
  // Sign convention: the largest-magnitude entry of each column (first
  // index on ties) is made positive.
  for (Eigen::Index c = 0; c < proj.cols(); ++c) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < proj.rows(); ++i) {
      double m = std::abs(proj(i, c));
      if (m > best) {
        best = m;
        arg = i;
      }
    }
    if (proj(arg, c) < 0.0) proj.col(c) = -proj.col(c);
  }

  Reducer r;
  r.mean = std::move(mean);
  r.projection = std::move(proj);
  r.d_lm = static_cast<int>(d_lm);
  r.d_crm = d_crm;
  return r;
}

Eigen::VectorXd reduce(const Reducer& r, const Eigen::VectorXd& v) {
  if (v.size() != r.d_lm) {
    throw ConfigError("reduce: vector dimension " + std::to_string(v.size()) +
                      " does not match d_lm " + std::to_string(r.d_lm));
  }
  if (!v.allFinite()) {
    throw ConfigError("reduce: vector contains non-finite values");
  }
  return r.projection.transpose() * (v - r.mean);
}

Eigen::MatrixXd reduce_rows(const Reducer& r, const Eigen::MatrixXd& rows) {
  if (rows.cols() != r.d_lm) {
    throw ConfigError("reduce_rows: row dimension " + std::to_string(rows.cols()) +
                      " does not match d_lm " + std::to_string(r.d_lm));
  }
  return (rows.rowwise() - r.mean.transpose()) * r.projection;
}

Eigen::MatrixXd encode_and_map(const std::vector<std::string>& texts, const Reducer& r,
                               Gateway& gateway) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(texts.size()), r.d_crm);
  constexpr std::size_t kBatch = 128;
  for (std::size_t start = 0; start < texts.size(); start += kBatch) {
    std::size_t end = std::min(start + kBatch, texts.size());
    std::vector<std::string> batch(texts.begin() + static_cast<std::ptrdiff_t>(start),
                                   texts.begin() + static_cast<std::ptrdiff_t>(end));
    EmbedResponse resp = gateway.embed(batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& vec = resp.vectors.at(i);
      if (static_cast<int>(vec.size()) != r.d_lm) {
        throw ConfigError("encode_and_map: backend embedding dimension " +
                          std::to_string(vec.size()) + " does not match reducer d_lm " +
                          std::to_string(r.d_lm));
      }
      Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(
          vec.data(), static_cast<Eigen::Index>(vec.size()));
      out.row(static_cast<Eigen::Index>(start + i)) = reduce(r, v).transpose();
    }
  }
  return out;
}

ItemInitMode item_init_mode_from_string(const std::string& s) {
  if (s == "random") return ItemInitMode::kRandom;
  if (s == "caption") return ItemInitMode::kCaption;
  if (s == "description") return ItemInitMode::kDescription;
  throw ConfigError("unknown item embedding mode '" + s +
                    "' (expected random|caption|description)");
}

UserInitMode user_init_mode_from_string(const std::string& s) {
  if (s == "none") return UserInitMode::kNone;
  if (s == "random") return UserInitMode::kRandom;
  if (s == "preference") return UserInitMode::kPreference;
  throw ConfigError("unknown user embedding mode '" + s +
                    "' (expected none|random|preference)");
}

std::string to_string(ItemInitMode m) {
  switch (m) {
    case ItemInitMode::kRandom: return "random";
    case ItemInitMode::kCaption: return "caption";
    case ItemInitMode::kDescription: return "description";
  }
  return "random";
}

std::string to_string(UserInitMode m) {
  switch (m) {
    case UserInitMode::kNone: return "none";
    case UserInitMode::kRandom: return "random";
    case UserInitMode::kPreference: return "preference";
  }
  return "none";
}

double text_row_target_norm(int d_crm) { return kInitStd * std::sqrt(d_crm); }

std::string item_text(const ItemMeta& meta, ItemInitMode mode) {
  if (mode == ItemInitMode::kDescription && !meta.description.empty()) {
    return meta.caption + " " + meta.description;
  }
  return meta.caption;
}

namespace {

Eigen::MatrixXd gaussian_rows(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, kInitStd);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return m;
}

void rescale_rows_to_target(Eigen::MatrixXd& m, Eigen::Index first_row, double target) {
  for (Eigen::Index i = first_row; i < m.rows(); ++i) {
    double n = m.row(i).norm();
    if (n > 1e-12) {
      m.row(i) *= target / n;
    }  // zero rows (texts that reduce to the corpus mean) stay zero
  }
}

}  // namespace

EmbeddingTable build_item_table(ItemInitMode mode, const Dataset& dataset, int d_crm,
                                const Reducer* reducer, Gateway* gateway,
                                std::uint64_t seed) {
  if (d_crm < 1) throw ConfigError("build_item_table: d_crm must be >= 1");
  const int n = dataset.num_items();
  EmbeddingTable t;
  if (mode == ItemInitMode::kRandom) {
    t.values = gaussian_rows(n + 1, d_crm, seed);
    t.values.row(0).setZero();
    t.provenance.assign(static_cast<std::size_t>(n) + 1, "random");
    return t;
  }
  if (reducer == nullptr || gateway == nullptr) {
    throw ConfigError("build_item_table: text modes require a fitted reducer and a "
                      "gateway");
  }
  if (reducer->d_crm != d_crm) {
    throw ConfigError("build_item_table: reducer d_crm " + std::to_string(reducer->d_crm) +
                      " does not match requested dimension " + std::to_string(d_crm));
  }
  std::vector<std::string> texts;
  texts.reserve(static_cast<std::size_t>(n));
  for (int i = 1; i <= n; ++i) {
    const ItemMeta& meta = dataset.meta(i);
    if (mode == ItemInitMode::kDescription && meta.description.empty()) {
      std::cerr << "[encode-map] item " << i << " (" << meta.item_id
                << ") has no description; falling back to its caption\n";
    }
    texts.push_back(item_text(meta, mode));
  }
  Eigen::MatrixXd reduced = encode_and_map(texts, *reducer, *gateway);
  t.values = Eigen::MatrixXd::Zero(n + 1, d_crm);
  t.values.bottomRows(n) = reduced;
  rescale_rows_to_target(t.values, 1, text_row_target_norm(d_crm));
  t.provenance.assign(static_cast<std::size_t>(n) + 1, "text-initialized");
  t.provenance[0] = "random";
  return t;
}

std::optional<EmbeddingTable> build_user_table(
    UserInitMode mode, const std::vector<UserPreference>& prefs, int num_users,
    int d_crm, const Reducer* reducer, Gateway* gateway, std::uint64_t seed) {
  if (mode == UserInitMode::kNone) return std::nullopt;
  if (d_crm < 1) throw ConfigError("build_user_table: d_crm must be >= 1");
  EmbeddingTable t;
  if (mode == UserInitMode::kRandom) {
    t.values = gaussian_rows(num_users, d_crm, seed);
    t.provenance.assign(static_cast<std::size_t>(num_users), "random");
    return t;
  }
  if (reducer == nullptr || gateway == nullptr) {
    throw ConfigError("build_user_table: preference mode requires a fitted reducer "
                      "and a gateway");
  }
  if (reducer->d_crm != d_crm) {
    throw ConfigError("build_user_table: reducer d_crm " + std::to_string(reducer->d_crm) +
                      " does not match requested dimension " + std::to_string(d_crm));
  }
  std::vector<std::string> texts(static_cast<std::size_t>(num_users));
  std::vector<bool> have(static_cast<std::size_t>(num_users), false);
  for (const auto& p : prefs) {
    if (p.user_id >= 1 && p.user_id <= num_users) {
      texts[static_cast<std::size_t>(p.user_id - 1)] = p.text;
      have[static_cast<std::size_t>(p.user_id - 1)] = true;
    }
  }
  for (int u = 1; u <= num_users; ++u) {
    if (!have[static_cast<std::size_t>(u - 1)]) {
      throw ConfigError("build_user_table: no preference text for user " +
                        std::to_string(u));
    }
  }
  t.values = encode_and_map(texts, *reducer, *gateway);
  rescale_rows_to_target(t.values, 0, text_row_target_norm(d_crm));
  t.provenance.assign(static_cast<std::size_t>(num_users), "text-initialized");
  return t;
}

void save_reducer(const Reducer& r, const std::filesystem::path& path) {
  Json j;
  j["d_lm"] = r.d_lm;
  j["d_crm"] = r.d_crm;
  j["mean"] = std::vector<double>(r.mean.data(), r.mean.data() + r.mean.size());
  std::vector<double> proj;
  proj.reserve(static_cast<std::size_t>(r.projection.size()));
  for (Eigen::Index i = 0; i < r.projection.rows(); ++i) {
    for (Eigen::Index c = 0; c < r.projection.cols(); ++c) {
      proj.push_back(r.projection(i, c));
    }
  }
  j["projection"] = proj;  // row-major
  atomic_write_file(path, j.dump() + "\n");
}

Reducer load_reducer(const std::filesystem::path& path) {
  Json j = Json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ArtifactError("reducer artifact " + path.string() + " is not valid JSON");
  Reducer r;
  r.d_lm = j.at("d_lm").get<int>();
  r.d_crm = j.at("d_crm").get<int>();
  auto mean = j.at("mean").get<std::vector<double>>();
  auto proj = j.at("projection").get<std::vector<double>>();
  if (static_cast<int>(mean.size()) != r.d_lm ||
      proj.size() != static_cast<std::size_t>(r.d_lm) * static_cast<std::size_t>(r.d_crm)) {
    throw ArtifactError("reducer artifact " + path.string() + " has inconsistent shapes");
  }
  r.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), r.d_lm);
  r.projection.resize(r.d_lm, r.d_crm);
  std::size_t k = 0;
  for (int i = 0; i < r.d_lm; ++i) {
    for (int c = 0; c < r.d_crm; ++c) r.projection(i, c) = proj[k++];
  }
  return r;
}

void save_table(const EmbeddingTable& t, const std::filesystem::path& path) {
  Json j;
  j["rows"] = t.values.rows();
  j["dim"] = t.values.cols();
  j["provenance"] = t.provenance;
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(t.values.size()));
  for (Eigen::Index i = 0; i < t.values.rows(); ++i) {
    for (Eigen::Index c = 0; c < t.values.cols(); ++c) vals.push_back(t.values(i, c));
  }
  j["values"] = vals;  // row-major
  atomic_write_file(path, j.dump() + "\n");
}

EmbeddingTable load_table(const std::filesystem::path& path) {
  Json j = Json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ArtifactError("table artifact " + path.string() + " is not valid JSON");
  EmbeddingTable t;
  Eigen::Index rows = j.at("rows").get<Eigen::Index>();
  Eigen::Index dim = j.at("dim").get<Eigen::Index>();
  t.provenance = j.at("provenance").get<std::vector<std::string>>();
  auto vals = j.at("values").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(vals.size()) != rows * dim ||
      static_cast<Eigen::Index>(t.provenance.size()) != rows) {
    throw ArtifactError("table artifact " + path.string() + " has inconsistent shapes");
  }
  t.values.resize(rows, dim);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < dim; ++c) t.values(i, c) = vals[k++];
  }
  return t;
}

}  // namespace cotrec
