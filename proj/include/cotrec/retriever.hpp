#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cotrec/corpus.hpp"
#include "cotrec/encode_map.hpp"

namespace cotrec {

struct ModelConfig {
  int d_crm = 64;
  int blocks = 2;
  int heads = 1;
  int max_len = 50;  // buffer length including the optional user slot
  double lr = 1e-3;
  int epochs = 100;
  int negatives = 1;  // sampled negatives per supervised position
  int batch_size = 128;
  std::uint64_t seed = 0;
  bool use_user_slot = true;
  double dropout = 0.0;  // training-time only; off by default for determinism

  void validate() const;
};

struct BlockParams {
  Eigen::MatrixXd wq, wk, wv, wo;          // d x d
  Eigen::MatrixXd w1, w2;                  // 4d x d, d x 4d
  Eigen::MatrixXd b1, b2;                  // 4d x 1, d x 1
  Eigen::MatrixXd ln1_g, ln1_b, ln2_g, ln2_b;  // d x 1
};

// Full parameter set. Gradients and optimizer moments reuse this struct
// (same shapes, zero-initialized).
struct RetrieverParams {
  ModelConfig cfg;
  int num_items = 0;
  int num_users = 0;
  std::string user_mode = "none";    // cell label carried into artifacts
  std::string item_mode = "random";  // cell label carried into artifacts
  Eigen::MatrixXd item_table;  // (num_items+1) x d, row 0 = padding, kept zero
  Eigen::MatrixXd user_table;  // num_users x d; 0 x d when the slot is off
  Eigen::MatrixXd pos_table;   // max_len x d; row 0 = user slot position
  std::vector<BlockParams> blocks;
};

// Visits every parameter matrix in a fixed order (same order for params,
// grads, and optimizer moments).
void visit_params(RetrieverParams& p,
                  const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn);
RetrieverParams zeros_like(const RetrieverParams& p);

// One training sequence laid out into the fixed-length buffer:
// [pad..., user slot (optional), items...], all items flush right.
// targets[t] is the next chronological item for the item at t (0 when
// unsupervised); the user-slot position is never supervised. negatives[t]
// is filled by the training loop.
struct TrainExample {
  int user = 0;
  std::vector<int> tokens;    // 0 = padding; >0 = item id
  int user_slot_pos = -1;     // index into tokens, -1 when the slot is off
  std::vector<int> targets;   // 0 = no target
  std::vector<std::vector<int>> negatives;  // per position; empty when unsupervised
};

TrainExample build_input(int user, const std::vector<int>& seq, const ModelConfig& cfg);

// Forward activations kept for backprop.
struct ForwardCache {
  Eigen::MatrixXd x0;
  std::vector<char> is_pad;
  struct BlockCache {
    Eigen::MatrixXd x_in;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> probs;  // per head, T x T
    Eigen::MatrixXd attn_concat, attn_out;
    Eigen::MatrixXd s1, ln1_xhat, y;
    Eigen::VectorXd ln1_inv_std;
    Eigen::MatrixXd ffn_pre, ffn_act, ffn_out;
    Eigen::MatrixXd s2, ln2_xhat;
    Eigen::VectorXd ln2_inv_std;
    // Inverted-dropout masks (empty when dropout is off).
    Eigen::MatrixXd drop_attn, drop_ffn;
  };
  std::vector<BlockCache> blocks;
  Eigen::MatrixXd drop_x0;
  Eigen::MatrixXd h;  // final hidden states, T x d
};

// Causal transformer forward pass over one example. Padding positions
// contribute zero embeddings, are masked out as attention keys, and a
// query row with no visible keys gets a zero attention output. `rng` is
// only consulted when cfg.dropout > 0 and `training` is true.
Eigen::MatrixXd forward(const RetrieverParams& p, const TrainExample& ex,
                        ForwardCache* cache = nullptr, bool training = false,
                        std::mt19937_64* rng = nullptr);

// Logits for items 1..num_items given one hidden state: logit(j) =
// dot(hidden, item_embedding_j). Entry j-1 of the result is item j.
Eigen::VectorXd score_all(const RetrieverParams& p, const Eigen::VectorXd& hidden);

// Masked binary cross-entropy with sampled negatives, averaged over the
// supervised positions of the example (0 when none).
double loss(const RetrieverParams& p, const TrainExample& ex);

// Batch loss (mean over all supervised positions in the batch) plus
// accumulated analytic gradients. Returns the loss; *positions gets the
// supervised-position count.
double loss_and_grad(const RetrieverParams& p, const std::vector<TrainExample>& batch,
                     RetrieverParams& grads, std::size_t* positions = nullptr,
                     bool training = false, std::mt19937_64* rng = nullptr);

struct AdamState {
  RetrieverParams m, v;
  long step = 0;
};

void adam_step(RetrieverParams& p, const RetrieverParams& grads, AdamState& state,
               double lr);

struct TrainLogRow {
  int epoch = 0;
  double loss = 0.0;
  double val_hit10 = 0.0;
  double val_ndcg10 = 0.0;
};

// Trains on the train split with per-epoch validation metrics; fixed seed
// and single-threaded execution make runs bit-reproducible. Passing
// nullptr inits draws seeded Gaussian tables internally.
RetrieverParams train_retriever(const Dataset& dataset, const SplitSpec& splits,
                                ModelConfig cfg, const EmbeddingTable* item_init,
                                const EmbeddingTable* user_init,
                                std::vector<TrainLogRow>* log = nullptr);

struct TopK {
  std::vector<int> items;
  bool truncated = false;  // fewer than K eligible items existed
};

// Scores from the final position's hidden state; items in `input_seq` and
// padding are excluded; descending score, ties broken by ascending id.
TopK retrieve_topk(const RetrieverParams& p, int user, const std::vector<int>& input_seq,
                   int K);

// Rank of `target` under the retriever's scores when ranking all eligible
// items (input_seq excluded); absent when the target itself is excluded.
std::optional<int> rank_of_item(const RetrieverParams& p, int user,
                                const std::vector<int>& input_seq, int target);

void save_checkpoint(const RetrieverParams& p, const std::filesystem::path& path);
RetrieverParams load_checkpoint(const std::filesystem::path& path);

void save_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

}  // namespace cotrec
