#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cotrec/corpus.hpp"
#include "cotrec/extraction.hpp"
#include "cotrec/gateway.hpp"

namespace cotrec {

// PCA mapping from the language-model embedding space to the CRM space:
// reduce(v) = projection^T * (v - mean), with orthonormal projection
// columns and a deterministic per-column sign convention.
struct Reducer {
  Eigen::VectorXd mean;        // d_lm
  Eigen::MatrixXd projection;  // d_lm x d_crm, orthonormal columns
  int d_lm = 0;
  int d_crm = 0;
};

// Centers the corpus rows, takes the top-d_crm right singular directions,
// and makes the largest-magnitude entry of each column positive (first
// such index on ties). Throws RankDeficiencyError when the centered corpus
// has rank below d_crm.
Reducer fit_reducer(const Eigen::MatrixXd& corpus, int d_crm);

Eigen::VectorXd reduce(const Reducer& r, const Eigen::VectorXd& v);
Eigen::MatrixXd reduce_rows(const Reducer& r, const Eigen::MatrixXd& rows);

// Embeds the texts through the gateway (in batches) and reduces each row.
Eigen::MatrixXd encode_and_map(const std::vector<std::string>& texts, const Reducer& r,
                               Gateway& gateway);

enum class ItemInitMode { kRandom, kCaption, kDescription };
enum class UserInitMode { kNone, kRandom, kPreference };

ItemInitMode item_init_mode_from_string(const std::string& s);
UserInitMode user_init_mode_from_string(const std::string& s);
std::string to_string(ItemInitMode m);
std::string to_string(UserInitMode m);

// Row-per-entity embedding matrix plus a per-row provenance tag
// ("random" or "text-initialized").
struct EmbeddingTable {
  Eigen::MatrixXd values;
  std::vector<std::string> provenance;
};

// Expected norm of one Gaussian(0, kInitStd) row in d dimensions; text
// rows are rescaled to this so optimizer dynamics match the random
// baseline.
inline constexpr double kInitStd = 0.02;
double text_row_target_norm(int d_crm);

// The text used per item in each text mode: caption, or caption plus the
// catalog description when present (caption-only fallback otherwise).
std::string item_text(const ItemMeta& meta, ItemInitMode mode);

// Item table: (num_items + 1) x d_crm, row 0 zeroed for padding.
// Random mode draws Gaussian(0, 0.02) rows from `seed` and needs no
// reducer; text modes go through encode_and_map (reducer->d_crm must equal
// d_crm) and are rescaled to text_row_target_norm.
EmbeddingTable build_item_table(ItemInitMode mode, const Dataset& dataset, int d_crm,
                                const Reducer* reducer, Gateway* gateway,
                                std::uint64_t seed);

// User table: num_users x d_crm (user u at row u-1); absent in mode none.
// Preference mode requires one preference per user.
std::optional<EmbeddingTable> build_user_table(
    UserInitMode mode, const std::vector<UserPreference>& prefs, int num_users,
    int d_crm, const Reducer* reducer, Gateway* gateway, std::uint64_t seed);

void save_reducer(const Reducer& r, const std::filesystem::path& path);
Reducer load_reducer(const std::filesystem::path& path);
void save_table(const EmbeddingTable& t, const std::filesystem::path& path);
EmbeddingTable load_table(const std::filesystem::path& path);

}  // namespace cotrec
