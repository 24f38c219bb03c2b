#pragma once

// Small dense networks with reverse-mode gradients, a replay buffer and the
// actor-critic updates of the learned policy.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "oodcharge/core.hpp"

namespace oodcharge {

enum class Head { kIdentity, kSquash };

/// Activations kept by a batch forward pass for the backward pass.
struct Tape {
  std::vector<Mat> inputs;   // input of each layer (in x batch)
  std::vector<Mat> outputs;  // tanh output of each layer (hidden and squash head)
};

/// Fully connected network with tanh hidden layers. The squash head maps the
/// last layer through tanh onto [lo, hi]. Parameters live in one flat vector,
/// per layer W (out x in, column-major) followed by b.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<int> widths, Head head, double lo = -1.0, double hi = 1.0);

  /// Uniform(+-1/sqrt(fan_in)) for hidden layers, Uniform(+-final_scale) for the last.
  void init(Rng& rng, double final_scale = 3e-3);

  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  int layers() const { return static_cast<int>(widths_.size()) - 1; }
  int param_count() const { return static_cast<int>(params_.size()); }
  const std::vector<int>& widths() const { return widths_; }
  Head head() const { return head_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }

  /// Columns of X are samples.
  Mat forward(const Mat& X) const;
  Mat forward(const Mat& X, Tape& tape) const;
  Vec forward(const Vec& x) const;

  /// dY is dLoss/dOutput (out x batch). Writes dLoss/dparams (overwrites) and,
  /// when requested, dLoss/dInput.
  void backward(const Tape& tape, const Mat& dY, Vec* dparams, Mat* dX) const;

 private:
  int weight_offset(int l) const { return offsets_[l]; }
  int bias_offset(int l) const { return offsets_[l] + widths_[l + 1] * widths_[l]; }

  std::vector<int> widths_;
  std::vector<int> offsets_;
  Head head_ = Head::kIdentity;
  double lo_ = -1.0, hi_ = 1.0;
  Vec params_;
};

/// Text checkpoint: header with widths and head, then every parameter as a
/// hexadecimal float so the round trip is exact.
void save_checkpoint(std::ostream& out, const Mlp& net);
Mlp load_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const Mlp& net);
Mlp load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------

/// Fixed-capacity FIFO of (s~, a, s~', c, terminal) transitions stored flat.
class ReplayBuffer {
 public:
  ReplayBuffer(int capacity, int state_dim, int action_dim);

  void push(const Vec& s, const Vec& a, const Vec& s_next, double cost, bool terminal);
  int size() const { return size_; }
  int capacity() const { return capacity_; }
  int state_dim() const { return ds_; }
  int action_dim() const { return da_; }
  void clear();

  /// i-th oldest stored transition.
  Vec state(int i) const;
  Vec action(int i) const;
  Vec next_state(int i) const;
  double cost(int i) const;
  bool terminal(int i) const;

  /// `count` distinct indices (insertion order positions), uniformly.
  std::vector<int> sample_indices(int count, Rng& rng) const;

  struct Batch {
    Mat S, A, S2;  // columns are samples
    Vec C;
    Vec not_terminal;
  };
  Batch gather(const std::vector<int>& idx) const;
  Batch sample(int count, Rng& rng) const { return gather(sample_indices(count, rng)); }

 private:
  int slot(int i) const { return (head_ + i) % capacity_; }

  int capacity_, ds_, da_;
  int head_ = 0, size_ = 0;
  std::vector<double> s_, a_, s2_, c_;
  std::vector<unsigned char> terminal_;
};

// ---------------------------------------------------------------------------

class Optimizer {
 public:
  enum class Kind { kSgd, kAdam };
  Optimizer() = default;
  Optimizer(Kind kind, double lr, int size);
  static Optimizer make(const std::string& name, double lr, int size);

  void step(Vec& params, const Vec& grad);
  double lr() const { return lr_; }

 private:
  Kind kind_ = Kind::kSgd;
  double lr_ = 1e-3;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  Vec m_, v_;
};

struct DdpgParams {
  double lr = 1e-3;
  int batch = 128;
  double tau_soft = 0.005;
  double discount = 1.0;
  std::string optimizer = "adam";
  int hidden = 64;
  int hidden_layers = 2;
  int buffer = 1000000;
  // Gaussian exploration sd as a fraction of the action range, linear decay
  double noise_start = 0.1;
  double noise_end = 0.01;
};

/// Critic input: stacked (state features, action).
Mat critic_input(const Mat& S, const Mat& A);

/// Mean squared TD residual (Q(s,a) - [c + discount * not_terminal * Q'(s', pi'(s'))])^2.
double critic_loss(const Mlp& critic, const Mlp& critic_target, const Mlp& actor_target,
                   const ReplayBuffer::Batch& batch, double discount, Vec* grad = nullptr);
/// One optimizer step on critic_loss; returns the loss before the step.
double critic_update(Mlp& critic, Optimizer& opt, const Mlp& critic_target, const Mlp& actor_target,
                     const ReplayBuffer::Batch& batch, double discount);

/// Batch critic seen by the actor: Q per column of (S, A) and, when dA is
/// given, dQ/dA per column.
using ActionCritic = std::function<Vec(const Mat& S, const Mat& A, Mat* dA)>;
ActionCritic as_action_critic(const Mlp& critic);

/// Mean over the batch of Q(s, pi(s)).
double actor_objective(const Mlp& actor, const ActionCritic& critic, const Mat& S, Vec* grad = nullptr);
/// One descent step on actor_objective; returns the objective before the step.
double actor_update(Mlp& actor, Optimizer& opt, const ActionCritic& critic, const Mat& S);

/// target <- tau * source + (1 - tau) * target.
void soft_update(Mlp& target, const Mlp& source, double tau);

double q_eval(const Mlp& critic, const Vec& s, const Vec& a);

/// Actor, critic, their targets, the optimizers and the replay buffer of one
/// experiment cell.
class DdpgLearner {
 public:
  DdpgLearner(int state_dim, int action_dim, double a_lo, double a_hi, const DdpgParams& params,
              std::uint64_t seed);

  Vec act(const Vec& s) const;
  /// Actor output plus decayed Gaussian noise, clipped to the action range.
  /// progress in [0, 1] is the fraction of training elapsed.
  Vec explore(const Vec& s, double progress);
  double q(const Vec& s, const Vec& a) const;
  void store(const Vec& s, const Vec& a, const Vec& s_next, double cost, bool terminal);
  bool ready() const { return buffer_.size() >= params_.batch; }
  /// Critic step, actor step and soft target updates on one sampled batch.
  void update();

  const Mlp& actor() const { return actor_; }
  const Mlp& critic() const { return critic_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  Rng& rng() { return rng_; }
  double last_critic_loss() const { return last_critic_loss_; }

 private:
  DdpgParams params_;
  Mlp actor_, critic_, actor_target_, critic_target_;
  Optimizer actor_opt_, critic_opt_;
  ReplayBuffer buffer_;
  Rng rng_;
  double a_lo_, a_hi_;
  double last_critic_loss_ = 0.0;
};

}  // namespace oodcharge
