#include "cotrec/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>
#include <sstream>

#include "cotrec/error.hpp"
#include "cotrec/io.hpp"

namespace cotrec {

namespace {

constexpr double kLnEps = 1e-8;

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

void ModelConfig::validate() const {
  if (d_crm < 1) throw ConfigError("retriever: d_crm must be >= 1");
  if (heads < 1 || d_crm % heads != 0) {
    throw ConfigError("retriever: d_crm (" + std::to_string(d_crm) +
                      ") must be divisible by heads (" + std::to_string(heads) + ")");
  }
  if (max_len < 3) throw ConfigError("retriever: max_len must be >= 3");
  if (blocks < 1) throw ConfigError("retriever: blocks must be >= 1");
  if (negatives < 1) throw ConfigError("retriever: negatives must be >= 1");
  if (batch_size < 1) throw ConfigError("retriever: batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("retriever: epochs must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("retriever: dropout must be in [0, 1)");
  }
  if (!(lr > 0.0)) throw ConfigError("retriever: learning rate must be positive");
}

void visit_params(RetrieverParams& p,
                  const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn) {
  fn("item_table", p.item_table);
  fn("user_table", p.user_table);
  fn("pos_table", p.pos_table);
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    BlockParams& blk = p.blocks[b];
    fn(pre + "wq", blk.wq);
    fn(pre + "wk", blk.wk);
    fn(pre + "wv", blk.wv);
    fn(pre + "wo", blk.wo);
    fn(pre + "w1", blk.w1);
    fn(pre + "b1", blk.b1);
    fn(pre + "w2", blk.w2);
    fn(pre + "b2", blk.b2);
    fn(pre + "ln1_g", blk.ln1_g);
    fn(pre + "ln1_b", blk.ln1_b);
    fn(pre + "ln2_g", blk.ln2_g);
    fn(pre + "ln2_b", blk.ln2_b);
  }
}

RetrieverParams zeros_like(const RetrieverParams& p) {
  RetrieverParams z = p;
  visit_params(z, [](const std::string&, Eigen::MatrixXd& m) { m.setZero(); });
  return z;
}

TrainExample build_input(int user, const std::vector<int>& seq, const ModelConfig& cfg) {
  if (seq.empty()) {
    throw ConfigError("build_input: empty interaction sequence for user " + std::to_string(user));
  }
  for (int it : seq) {
    if (it < 1) {
      throw ConfigError("build_input: item id " + std::to_string(it) + " for user " +
                        std::to_string(user) + " is not a positive dense id");
    }
  }
  const int n = cfg.max_len;
  const int slot = cfg.use_user_slot ? 1 : 0;
  const int cap = n - slot;
  const int keep = std::min(static_cast<int>(seq.size()), cap);

  TrainExample ex;
  ex.user = user;
  ex.tokens.assign(static_cast<std::size_t>(n), 0);
  ex.targets.assign(static_cast<std::size_t>(n), 0);
  ex.negatives.resize(static_cast<std::size_t>(n));

  const int first_item_pos = n - keep;
  if (slot) ex.user_slot_pos = first_item_pos - 1;
  const std::size_t base = seq.size() - static_cast<std::size_t>(keep);
  for (int j = 0; j < keep; ++j) {
    const std::size_t s = base + static_cast<std::size_t>(j);
    ex.tokens[static_cast<std::size_t>(first_item_pos + j)] = seq[s];
    if (s + 1 < seq.size()) {
      ex.targets[static_cast<std::size_t>(first_item_pos + j)] = seq[s + 1];
    }
  }
  return ex;
}

namespace {

Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double p,
                             std::mt19937_64& rng) {
  std::bernoulli_distribution keep(1.0 - p);
  Eigen::MatrixXd m(rows, cols);
  const double scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = keep(rng) ? scale : 0.0;
  }
  return m;
}

// Row-wise layer norm; writes xhat and 1/std for backprop.
void layer_norm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& g,
                const Eigen::MatrixXd& b, Eigen::MatrixXd& xhat,
                Eigen::VectorXd& inv_std, Eigen::MatrixXd& out) {
  const Eigen::Index t_len = x.rows(), d = x.cols();
  xhat.resize(t_len, d);
  out.resize(t_len, d);
  inv_std.resize(t_len);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const double mu = x.row(t).mean();
    double var = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double dev = x(t, j) - mu;
      var += dev * dev;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLnEps);
    inv_std(t) = is;
    for (Eigen::Index j = 0; j < d; ++j) {
      xhat(t, j) = (x(t, j) - mu) * is;
      out(t, j) = xhat(t, j) * g(j, 0) + b(j, 0);
    }
  }
}

// dOut -> dX for layer norm; accumulates dg/db.
Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& d_out,
                                    const Eigen::MatrixXd& xhat,
                                    const Eigen::VectorXd& inv_std,
                                    const Eigen::MatrixXd& g, Eigen::MatrixXd& dg,
                                    Eigen::MatrixXd& db) {
  const Eigen::Index t_len = d_out.rows(), d = d_out.cols();
  Eigen::MatrixXd dx(t_len, d);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    double m1 = 0.0, m2 = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double dxh = d_out(t, j) * g(j, 0);
      m1 += dxh;
      m2 += dxh * xhat(t, j);
      dg(j, 0) += d_out(t, j) * xhat(t, j);
      db(j, 0) += d_out(t, j);
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double dxh = d_out(t, j) * g(j, 0);
      dx(t, j) = inv_std(t) * (dxh - m1 - xhat(t, j) * m2);
    }
  }
  return dx;
}

}  // namespace

Eigen::MatrixXd forward(const RetrieverParams& p, const TrainExample& ex,
                        ForwardCache* cache, bool training, std::mt19937_64* rng) {
  const int t_len = static_cast<int>(ex.tokens.size());
  const int d = p.cfg.d_crm;
  const int n_heads = p.cfg.heads;
  const int dk = d / n_heads;
  const int slot = p.cfg.use_user_slot ? 1 : 0;
  const bool drop = training && p.cfg.dropout > 0.0 && rng != nullptr;

  Eigen::MatrixXd x0 = Eigen::MatrixXd::Zero(t_len, d);
  std::vector<char> is_pad(static_cast<std::size_t>(t_len), 0);
  for (int t = 0; t < t_len; ++t) {
    if (t == ex.user_slot_pos) {
      if (!p.cfg.use_user_slot || ex.user < 1 || ex.user > p.num_users) {
        throw ConfigError("forward: user slot present but user id " +
                          std::to_string(ex.user) + " is out of range");
      }
      x0.row(t) = p.user_table.row(ex.user - 1) + p.pos_table.row(0);
    } else if (ex.tokens[static_cast<std::size_t>(t)] > 0) {
      const int item = ex.tokens[static_cast<std::size_t>(t)];
      if (item > p.num_items) {
        throw ConfigError("forward: item id " + std::to_string(item) + " out of range");
      }
      const int pos_row = (t_len - 1 - t) + slot;
      if (pos_row >= p.cfg.max_len) {
        throw ConfigError("forward: sequence longer than max_len");
      }
      x0.row(t) = p.item_table.row(item) + p.pos_table.row(pos_row);
    } else {
      is_pad[static_cast<std::size_t>(t)] = 1;
    }
  }

  Eigen::MatrixXd drop_x0;
  if (drop) {
    drop_x0 = dropout_mask(t_len, d, p.cfg.dropout, *rng);
    x0 = x0.cwiseProduct(drop_x0);
  }

  if (cache) {
    cache->x0 = x0;
    cache->is_pad = is_pad;
    cache->drop_x0 = drop_x0;
    cache->blocks.clear();
    cache->blocks.resize(p.blocks.size());
  }

  Eigen::MatrixXd x = x0;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const BlockParams& blk = p.blocks[b];
    ForwardCache::BlockCache* bc = cache ? &cache->blocks[b] : nullptr;
    if (bc) bc->x_in = x;

    Eigen::MatrixXd q = x * blk.wq;
    Eigen::MatrixXd k = x * blk.wk;
    Eigen::MatrixXd v = x * blk.wv;
    Eigen::MatrixXd attn_concat(t_len, d);
    std::vector<Eigen::MatrixXd> probs_by_head;
    probs_by_head.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
      auto qh = q.middleCols(h * dk, dk);
      auto kh = k.middleCols(h * dk, dk);
      auto vh = v.middleCols(h * dk, dk);
      Eigen::MatrixXd scores = qh * kh.transpose() * scale;
      Eigen::MatrixXd probs = Eigen::MatrixXd::Zero(t_len, t_len);
      for (int t = 0; t < t_len; ++t) {
        double max_score = -std::numeric_limits<double>::infinity();
        for (int s = 0; s <= t; ++s) {
          if (!is_pad[static_cast<std::size_t>(s)]) {
            max_score = std::max(max_score, scores(t, s));
          }
        }
        if (!std::isfinite(max_score)) continue;  // no visible keys: zero row
        double denom = 0.0;
        for (int s = 0; s <= t; ++s) {
          if (!is_pad[static_cast<std::size_t>(s)]) {
            probs(t, s) = std::exp(scores(t, s) - max_score);
            denom += probs(t, s);
          }
        }
        for (int s = 0; s <= t; ++s) probs(t, s) /= denom;
      }
      attn_concat.middleCols(h * dk, dk) = probs * vh;
      probs_by_head.push_back(std::move(probs));
    }
    Eigen::MatrixXd attn_out = attn_concat * blk.wo;
    Eigen::MatrixXd drop_attn;
    if (drop) {
      drop_attn = dropout_mask(t_len, d, p.cfg.dropout, *rng);
      attn_out = attn_out.cwiseProduct(drop_attn);
    }
    Eigen::MatrixXd s1 = x + attn_out;
    Eigen::MatrixXd ln1_xhat, y;
    Eigen::VectorXd ln1_inv_std;
    layer_norm(s1, blk.ln1_g, blk.ln1_b, ln1_xhat, ln1_inv_std, y);

    Eigen::MatrixXd ffn_pre = y * blk.w1.transpose();
    ffn_pre.rowwise() += blk.b1.col(0).transpose();
    Eigen::MatrixXd ffn_act = ffn_pre.cwiseMax(0.0);
    Eigen::MatrixXd ffn_out = ffn_act * blk.w2.transpose();
    ffn_out.rowwise() += blk.b2.col(0).transpose();
    Eigen::MatrixXd drop_ffn;
    if (drop) {
      drop_ffn = dropout_mask(t_len, d, p.cfg.dropout, *rng);
      ffn_out = ffn_out.cwiseProduct(drop_ffn);
    }
    Eigen::MatrixXd s2 = y + ffn_out;
    Eigen::MatrixXd ln2_xhat, x_next;
    Eigen::VectorXd ln2_inv_std;
    layer_norm(s2, blk.ln2_g, blk.ln2_b, ln2_xhat, ln2_inv_std, x_next);

    if (bc) {
      bc->q = std::move(q);
      bc->k = std::move(k);
      bc->v = std::move(v);
      bc->probs = std::move(probs_by_head);
      bc->attn_concat = std::move(attn_concat);
      bc->attn_out = std::move(attn_out);
      bc->s1 = std::move(s1);
      bc->ln1_xhat = std::move(ln1_xhat);
      bc->ln1_inv_std = std::move(ln1_inv_std);
      bc->y = y;
      bc->ffn_pre = std::move(ffn_pre);
      bc->ffn_act = std::move(ffn_act);
      bc->ffn_out = std::move(ffn_out);
      bc->s2 = std::move(s2);
      bc->ln2_xhat = std::move(ln2_xhat);
      bc->ln2_inv_std = std::move(ln2_inv_std);
      bc->drop_attn = std::move(drop_attn);
      bc->drop_ffn = std::move(drop_ffn);
    }
    x = std::move(x_next);
  }
  if (cache) cache->h = x;
  return x;
}

Eigen::VectorXd score_all(const RetrieverParams& p, const Eigen::VectorXd& hidden) {
  return p.item_table.bottomRows(p.num_items) * hidden;
}

double loss(const RetrieverParams& p, const TrainExample& ex) {
  Eigen::MatrixXd h = forward(p, ex);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < ex.targets.size(); ++t) {
    const int tgt = ex.targets[t];
    if (tgt <= 0) continue;
    ++count;
    const Eigen::VectorXd ht = h.row(static_cast<Eigen::Index>(t)).transpose();
    total += softplus(-p.item_table.row(tgt).dot(ht));
    if (t < ex.negatives.size()) {
      for (int neg : ex.negatives[t]) {
        total += softplus(p.item_table.row(neg).dot(ht));
      }
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

namespace {

// Backpropagates dh through the transformer stack of one example,
// accumulating parameter gradients.
void backward_example(const RetrieverParams& p, const TrainExample& ex,
                      const ForwardCache& cache, Eigen::MatrixXd dh,
                      RetrieverParams& grads) {
  const int t_len = static_cast<int>(ex.tokens.size());
  const int d = p.cfg.d_crm;
  const int n_heads = p.cfg.heads;
  const int dk = d / n_heads;
  const int slot = p.cfg.use_user_slot ? 1 : 0;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Eigen::MatrixXd dx = std::move(dh);
  for (int b = static_cast<int>(p.blocks.size()) - 1; b >= 0; --b) {
    const BlockParams& blk = p.blocks[static_cast<std::size_t>(b)];
    const auto& bc = cache.blocks[static_cast<std::size_t>(b)];
    BlockParams& gblk = grads.blocks[static_cast<std::size_t>(b)];

    // LN2
    Eigen::MatrixXd ds2 = layer_norm_backward(dx, bc.ln2_xhat, bc.ln2_inv_std,
                                              blk.ln2_g, gblk.ln2_g, gblk.ln2_b);
    // s2 = y + ffn_out
    Eigen::MatrixXd dffn_out = ds2;
    if (bc.drop_ffn.size() > 0) dffn_out = dffn_out.cwiseProduct(bc.drop_ffn);
    Eigen::MatrixXd dy = ds2;
    // ffn_out = act * w2^T + b2
    gblk.w2 += dffn_out.transpose() * bc.ffn_act;
    gblk.b2.col(0) += dffn_out.colwise().sum().transpose();
    Eigen::MatrixXd dact = dffn_out * blk.w2;
    Eigen::MatrixXd dpre =
        dact.cwiseProduct((bc.ffn_pre.array() > 0.0).cast<double>().matrix());
    gblk.w1 += dpre.transpose() * bc.y;
    gblk.b1.col(0) += dpre.colwise().sum().transpose();
    dy += dpre * blk.w1;
    // LN1
    Eigen::MatrixXd ds1 = layer_norm_backward(dy, bc.ln1_xhat, bc.ln1_inv_std,
                                              blk.ln1_g, gblk.ln1_g, gblk.ln1_b);
    // s1 = x_in + attn_out
    Eigen::MatrixXd dattn_out = ds1;
    if (bc.drop_attn.size() > 0) dattn_out = dattn_out.cwiseProduct(bc.drop_attn);
    Eigen::MatrixXd dx_in = ds1;
    // attn_out = concat * wo
    gblk.wo += bc.attn_concat.transpose() * dattn_out;
    Eigen::MatrixXd dconcat = dattn_out * blk.wo.transpose();

    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(t_len, d);
    Eigen::MatrixXd dkm = Eigen::MatrixXd::Zero(t_len, d);
    Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(t_len, d);
    for (int h = 0; h < n_heads; ++h) {
      const Eigen::MatrixXd& probs = bc.probs[static_cast<std::size_t>(h)];
      auto vh = bc.v.middleCols(h * dk, dk);
      auto qh = bc.q.middleCols(h * dk, dk);
      auto kh = bc.k.middleCols(h * dk, dk);
      Eigen::MatrixXd d_oh = dconcat.middleCols(h * dk, dk);
      Eigen::MatrixXd dprobs = d_oh * vh.transpose();
      dv.middleCols(h * dk, dk) += probs.transpose() * d_oh;
      // softmax backward per row; masked entries have probs == 0
      Eigen::VectorXd row_dot = (dprobs.cwiseProduct(probs)).rowwise().sum();
      Eigen::MatrixXd dscores =
          probs.cwiseProduct(dprobs - row_dot.replicate(1, t_len));
      dq.middleCols(h * dk, dk) += dscores * kh * scale;
      dkm.middleCols(h * dk, dk) += dscores.transpose() * qh * scale;
    }
    gblk.wq += bc.x_in.transpose() * dq;
    gblk.wk += bc.x_in.transpose() * dkm;
    gblk.wv += bc.x_in.transpose() * dv;
    dx_in += dq * blk.wq.transpose();
    dx_in += dkm * blk.wk.transpose();
    dx_in += dv * blk.wv.transpose();
    dx = std::move(dx_in);
  }

  if (cache.drop_x0.size() > 0) dx = dx.cwiseProduct(cache.drop_x0);
  for (int t = 0; t < t_len; ++t) {
    if (t == ex.user_slot_pos) {
      grads.user_table.row(ex.user - 1) += dx.row(t);
      grads.pos_table.row(0) += dx.row(t);
    } else if (ex.tokens[static_cast<std::size_t>(t)] > 0) {
      grads.item_table.row(ex.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
      grads.pos_table.row((t_len - 1 - t) + slot) += dx.row(t);
    }
  }
}

}  // namespace

double loss_and_grad(const RetrieverParams& p, const std::vector<TrainExample>& batch,
                     RetrieverParams& grads, std::size_t* positions, bool training,
                     std::mt19937_64* rng) {
  std::vector<ForwardCache> caches(batch.size());
  std::size_t total_positions = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    forward(p, batch[i], &caches[i], training, rng);
    for (std::size_t t = 0; t < batch[i].targets.size(); ++t) {
      if (batch[i].targets[t] > 0) ++total_positions;
    }
  }
  if (positions) *positions = total_positions;
  if (total_positions == 0) return 0.0;

  const double w = 1.0 / static_cast<double>(total_positions);
  double total_loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainExample& ex = batch[i];
    const ForwardCache& cache = caches[i];
    const Eigen::MatrixXd& h = cache.h;
    Eigen::MatrixXd dh = Eigen::MatrixXd::Zero(h.rows(), h.cols());
    for (std::size_t t = 0; t < ex.targets.size(); ++t) {
      const int tgt = ex.targets[t];
      if (tgt <= 0) continue;
      const Eigen::Index ti = static_cast<Eigen::Index>(t);
      const double z_pos = p.item_table.row(tgt).dot(h.row(ti));
      total_loss += softplus(-z_pos);
      const double g_pos = (sigmoid(z_pos) - 1.0) * w;
      dh.row(ti) += g_pos * p.item_table.row(tgt);
      grads.item_table.row(tgt) += g_pos * h.row(ti);
      if (t < ex.negatives.size()) {
        for (int neg : ex.negatives[t]) {
          const double z_neg = p.item_table.row(neg).dot(h.row(ti));
          total_loss += softplus(z_neg);
          const double g_neg = sigmoid(z_neg) * w;
          dh.row(ti) += g_neg * p.item_table.row(neg);
          grads.item_table.row(neg) += g_neg * h.row(ti);
        }
      }
    }
    backward_example(p, ex, cache, std::move(dh), grads);
  }
  return total_loss * w;
}

void adam_step(RetrieverParams& p, const RetrieverParams& grads, AdamState& state,
               double lr) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.98, kEps = 1e-9;
  ++state.step;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));

  std::vector<Eigen::MatrixXd*> ps, gs, ms, vs;
  visit_params(p, [&](const std::string&, Eigen::MatrixXd& m) { ps.push_back(&m); });
  visit_params(const_cast<RetrieverParams&>(grads),
               [&](const std::string&, Eigen::MatrixXd& m) { gs.push_back(&m); });
  visit_params(state.m, [&](const std::string&, Eigen::MatrixXd& m) { ms.push_back(&m); });
  visit_params(state.v, [&](const std::string&, Eigen::MatrixXd& m) { vs.push_back(&m); });

  for (std::size_t i = 0; i < ps.size(); ++i) {
    Eigen::MatrixXd& theta = *ps[i];
    const Eigen::MatrixXd& g = *gs[i];
    Eigen::MatrixXd& m = *ms[i];
    Eigen::MatrixXd& v = *vs[i];
    m = kBeta1 * m + (1.0 - kBeta1) * g;
    v = kBeta2 * v.array().matrix() + (1.0 - kBeta2) * g.cwiseProduct(g);
    const Eigen::ArrayXXd m_hat = m.array() / bc1;
    const Eigen::ArrayXXd v_hat = v.array() / bc2;
    theta.array() -= lr * m_hat / (v_hat.sqrt() + kEps);
    if (!theta.allFinite()) {
      throw Error("adam_step produced non-finite parameters at step " +
                  std::to_string(state.step));
    }
  }
}

RetrieverParams train_retriever(const Dataset& dataset, const SplitSpec& splits,
                                ModelConfig cfg, const EmbeddingTable* item_init,
                                const EmbeddingTable* user_init,
                                std::vector<TrainLogRow>* log) {
  cfg.validate();
  const int n_items = dataset.num_items();
  const int n_users = dataset.num_users();
  if (n_items < 2) {
    throw ConfigError("train_retriever: need at least 2 items for negative sampling");
  }
  const int d = cfg.d_crm;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> small(0.0, kInitStd);
  auto gaussian = [&](Eigen::Index r, Eigen::Index c, double std_dev) {
    std::normal_distribution<double> dist(0.0, std_dev);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = dist(rng);
    }
    return m;
  };

  RetrieverParams p;
  p.cfg = cfg;
  p.num_items = n_items;
  p.num_users = n_users;

  if (item_init) {
    if (item_init->values.rows() != n_items + 1 || item_init->values.cols() != d) {
      throw ConfigError("train_retriever: item init table shape mismatch");
    }
    p.item_table = item_init->values;
  } else {
    p.item_table = gaussian(n_items + 1, d, kInitStd);
  }
  p.item_table.row(0).setZero();

  if (cfg.use_user_slot) {
    if (user_init) {
      if (user_init->values.rows() != n_users || user_init->values.cols() != d) {
        throw ConfigError("train_retriever: user init table shape mismatch");
      }
      p.user_table = user_init->values;
    } else {
      p.user_table = gaussian(n_users, d, kInitStd);
    }
  } else {
    if (user_init) {
      throw ConfigError("train_retriever: user table supplied but the user slot is off");
    }
    p.user_table.resize(0, d);
  }

  p.pos_table = gaussian(cfg.max_len, d, kInitStd);

  const double xav_d = std::sqrt(2.0 / (d + d));
  const double xav_ff = std::sqrt(2.0 / (d + 4 * d));
  p.blocks.resize(static_cast<std::size_t>(cfg.blocks));
  for (auto& blk : p.blocks) {
    blk.wq = gaussian(d, d, xav_d);
    blk.wk = gaussian(d, d, xav_d);
    blk.wv = gaussian(d, d, xav_d);
    blk.wo = gaussian(d, d, xav_d);
    blk.w1 = gaussian(4 * d, d, xav_ff);
    blk.w2 = gaussian(d, 4 * d, xav_ff);
    blk.b1 = Eigen::MatrixXd::Zero(4 * d, 1);
    blk.b2 = Eigen::MatrixXd::Zero(d, 1);
    blk.ln1_g = Eigen::MatrixXd::Ones(d, 1);
    blk.ln1_b = Eigen::MatrixXd::Zero(d, 1);
    blk.ln2_g = Eigen::MatrixXd::Ones(d, 1);
    blk.ln2_b = Eigen::MatrixXd::Zero(d, 1);
  }

  AdamState adam;
  adam.m = zeros_like(p);
  adam.v = zeros_like(p);
  RetrieverParams grads = zeros_like(p);

  std::vector<int> order(static_cast<std::size_t>(n_users));
  std::iota(order.begin(), order.end(), 1);
  std::uniform_int_distribution<int> neg_dist(1, n_items);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss_sum = 0.0;
    std::size_t epoch_positions = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TrainExample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const int u = order[i];
        const UserSplit& split = splits.users.at(static_cast<std::size_t>(u));
        if (split.train.empty()) continue;
        TrainExample ex = build_input(u, split.train, cfg);
        for (std::size_t t = 0; t < ex.targets.size(); ++t) {
          if (ex.targets[t] <= 0) continue;
          ex.negatives[t].reserve(static_cast<std::size_t>(cfg.negatives));
          for (int k = 0; k < cfg.negatives; ++k) {
            int neg = neg_dist(rng);
            while (neg == ex.targets[t]) neg = neg_dist(rng);
            ex.negatives[t].push_back(neg);
          }
        }
        batch.push_back(std::move(ex));
      }
      if (batch.empty()) continue;
      visit_params(grads, [](const std::string&, Eigen::MatrixXd& m) { m.setZero(); });
      std::size_t positions = 0;
      const double batch_loss = loss_and_grad(p, batch, grads, &positions, true, &rng);
      if (!std::isfinite(batch_loss)) {
        throw Error("train_retriever: non-finite loss (epoch " + std::to_string(epoch) +
                    ", batch at user index " + std::to_string(start) + ", lr " +
                    std::to_string(cfg.lr) + ")");
      }
      adam_step(p, grads, adam, cfg.lr);
      epoch_loss_sum += batch_loss * static_cast<double>(positions);
      epoch_positions += positions;
    }

    if (log) {
      double hit = 0.0, ndcg = 0.0;
      int evaluated = 0;
      for (int u = 1; u <= n_users; ++u) {
        const UserSplit& split = splits.users.at(static_cast<std::size_t>(u));
        if (split.val <= 0) continue;
        ++evaluated;
        auto r = rank_of_item(p, u, split.train, split.val);
        if (r.has_value() && *r <= 10) {
          hit += 1.0;
          ndcg += 1.0 / std::log2(static_cast<double>(*r) + 1.0);
        }
      }
      TrainLogRow row;
      row.epoch = epoch;
      row.loss = epoch_positions > 0
                     ? epoch_loss_sum / static_cast<double>(epoch_positions)
                     : 0.0;
      row.val_hit10 = evaluated > 0 ? hit / evaluated : 0.0;
      row.val_ndcg10 = evaluated > 0 ? ndcg / evaluated : 0.0;
      log->push_back(row);
    }
  }
  return p;
}

namespace {

Eigen::VectorXd last_hidden(const RetrieverParams& p, int user,
                            const std::vector<int>& input_seq) {
  TrainExample ex = build_input(user, input_seq, p.cfg);
  Eigen::MatrixXd h = forward(p, ex);
  return h.row(h.rows() - 1).transpose();
}

}  // namespace

TopK retrieve_topk(const RetrieverParams& p, int user, const std::vector<int>& input_seq,
                   int k) {
  if (k < 1) throw ConfigError("retrieve_topk: K must be >= 1");
  Eigen::VectorXd scores = score_all(p, last_hidden(p, user, input_seq));
  std::set<int> seen(input_seq.begin(), input_seq.end());
  std::vector<int> eligible;
  eligible.reserve(static_cast<std::size_t>(p.num_items));
  for (int item = 1; item <= p.num_items; ++item) {
    if (!seen.count(item)) eligible.push_back(item);
  }
  std::sort(eligible.begin(), eligible.end(), [&](int a, int b) {
    const double sa = scores(a - 1), sb = scores(b - 1);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  TopK out;
  if (static_cast<int>(eligible.size()) > k) {
    eligible.resize(static_cast<std::size_t>(k));
  } else {
    out.truncated = static_cast<int>(eligible.size()) < k;
  }
  out.items = std::move(eligible);
  return out;
}

std::optional<int> rank_of_item(const RetrieverParams& p, int user,
                                const std::vector<int>& input_seq, int target) {
  if (target < 1 || target > p.num_items) {
    throw ConfigError("rank_of_item: target " + std::to_string(target) + " out of range");
  }
  std::set<int> seen(input_seq.begin(), input_seq.end());
  if (seen.count(target)) return std::nullopt;
  Eigen::VectorXd scores = score_all(p, last_hidden(p, user, input_seq));
  const double st = scores(target - 1);
  int rank = 1;
  for (int item = 1; item <= p.num_items; ++item) {
    if (item == target || seen.count(item)) continue;
    const double s = scores(item - 1);
    if (s > st || (s == st && item < target)) ++rank;
  }
  return rank;
}

namespace {

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(const std::string& in, std::size_t& off) {
  if (off + 8 > in.size()) throw ArtifactError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  off += 8;
  return v;
}

constexpr char kMagic[9] = "CRCK0001";

}  // namespace

void save_checkpoint(const RetrieverParams& p, const std::filesystem::path& path) {
  std::string out;
  out.append(kMagic, 8);
  Json header;
  header["d_crm"] = p.cfg.d_crm;
  header["blocks"] = p.cfg.blocks;
  header["heads"] = p.cfg.heads;
  header["max_len"] = p.cfg.max_len;
  header["lr"] = p.cfg.lr;
  header["epochs"] = p.cfg.epochs;
  header["negatives"] = p.cfg.negatives;
  header["batch_size"] = p.cfg.batch_size;
  header["seed"] = p.cfg.seed;
  header["use_user_slot"] = p.cfg.use_user_slot;
  header["dropout"] = p.cfg.dropout;
  header["num_items"] = p.num_items;
  header["num_users"] = p.num_users;
  header["user_mode"] = p.user_mode;
  header["item_mode"] = p.item_mode;
  const std::string hs = header.dump();
  append_u64(out, hs.size());
  out += hs;
  visit_params(const_cast<RetrieverParams&>(p),
               [&](const std::string&, Eigen::MatrixXd& m) {
                 append_u64(out, static_cast<std::uint64_t>(m.rows()));
                 append_u64(out, static_cast<std::uint64_t>(m.cols()));
                 for (Eigen::Index i = 0; i < m.rows(); ++i) {
                   for (Eigen::Index j = 0; j < m.cols(); ++j) {
                     double v = m(i, j);
                     char buf[8];
                     std::memcpy(buf, &v, 8);
                     out.append(buf, 8);
                   }
                 }
               });
  atomic_write_file(path, out);
}

RetrieverParams load_checkpoint(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  if (in.size() < 8 || in.compare(0, 8, kMagic, 8) != 0) {
    throw ArtifactError("file " + path.string() + " is not a retriever checkpoint");
  }
  std::size_t off = 8;
  const std::uint64_t hlen = read_u64(in, off);
  if (off + hlen > in.size()) throw ArtifactError("checkpoint header truncated");
  Json header = Json::parse(in.substr(off, hlen), nullptr, false);
  if (header.is_discarded()) throw ArtifactError("checkpoint header is not valid JSON");
  off += hlen;

  RetrieverParams p;
  p.cfg.d_crm = header.at("d_crm").get<int>();
  p.cfg.blocks = header.at("blocks").get<int>();
  p.cfg.heads = header.at("heads").get<int>();
  p.cfg.max_len = header.at("max_len").get<int>();
  p.cfg.lr = header.at("lr").get<double>();
  p.cfg.epochs = header.at("epochs").get<int>();
  p.cfg.negatives = header.at("negatives").get<int>();
  p.cfg.batch_size = header.at("batch_size").get<int>();
  p.cfg.seed = header.at("seed").get<std::uint64_t>();
  p.cfg.use_user_slot = header.at("use_user_slot").get<bool>();
  p.cfg.dropout = header.at("dropout").get<double>();
  p.num_items = header.at("num_items").get<int>();
  p.num_users = header.at("num_users").get<int>();
  p.user_mode = header.at("user_mode").get<std::string>();
  p.item_mode = header.at("item_mode").get<std::string>();
  p.blocks.resize(static_cast<std::size_t>(p.cfg.blocks));

  visit_params(p, [&](const std::string& name, Eigen::MatrixXd& m) {
    const auto rows = static_cast<Eigen::Index>(read_u64(in, off));
    const auto cols = static_cast<Eigen::Index>(read_u64(in, off));
    if (rows < 0 || cols < 0 ||
        off + static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * 8 >
            in.size()) {
      throw ArtifactError("checkpoint matrix " + name + " truncated");
    }
    m.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        double v;
        std::memcpy(&v, in.data() + off, 8);
        off += 8;
        m(i, j) = v;
      }
    }
  });
  if (off != in.size()) throw ArtifactError("checkpoint has trailing bytes");
  return p;
}

void save_train_log(const std::vector<TrainLogRow>& log,
                    const std::filesystem::path& path) {
  std::ostringstream os;
  os << "epoch,loss,val_hit10,val_ndcg10\n";
  char buf[128];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.10f,%.10f,%.10f\n", row.epoch, row.loss,
                  row.val_hit10, row.val_ndcg10);
    os << buf;
  }
  atomic_write_file(path, os.str());
}

}  // namespace cotrec
