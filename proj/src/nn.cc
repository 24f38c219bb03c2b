#include "oodcharge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>

namespace oodcharge {

using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using ConstVecMap = Eigen::Map<const Vec>;

Mlp::Mlp(std::vector<int> widths, Head head, double lo, double hi)
    : widths_(std::move(widths)), head_(head), lo_(lo), hi_(hi) {
  if (widths_.size() < 2) throw ValidationError("network needs at least an input and an output width");
  for (int w : widths_)
    if (w <= 0) throw ValidationError("network layer widths must be positive");
  if (head_ == Head::kSquash && !(lo_ < hi_)) throw ValidationError("squash head needs lo < hi");
  int total = 0;
  for (int l = 0; l + 1 < static_cast<int>(widths_.size()); ++l) {
    offsets_.push_back(total);
    total += widths_[l + 1] * (widths_[l] + 1);
  }
  params_ = Vec::Zero(total);
}

void Mlp::init(Rng& rng, double final_scale) {
  for (int l = 0; l < layers(); ++l) {
    const double bound = l + 1 == layers() ? final_scale : 1.0 / std::sqrt(static_cast<double>(widths_[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    const int count = widths_[l + 1] * (widths_[l] + 1);
    for (int k = 0; k < count; ++k) params_[offsets_[l] + k] = u(rng);
  }
}

namespace {

// tanh(x) = 1 - 2 / (exp(2x) + 1) on Eigen's vectorized exp; libm tanh is
// scalar and dominated the update time.
Mat fast_tanh(const Mat& z) {
  const auto e = (2.0 * z.array().cwiseMax(-20.0).cwiseMin(20.0)).exp();
  return (1.0 - 2.0 / (e + 1.0)).matrix();
}

void check_finite(const Mat& M, int layer, const char* what) {
  if (!M.allFinite()) throw DomainError(fmt::format("non-finite {} in network layer {}", what, layer));
}

}  // namespace

Mat Mlp::forward(const Mat& X, Tape& tape) const {
  if (X.rows() != input_dim()) {
    throw ValidationError(fmt::format("network input has {} rows, expected {}", X.rows(), input_dim()));
  }
  check_finite(X, 0, "input");
  const int L = layers();
  tape.inputs.resize(L);
  tape.outputs.resize(L);
  Mat h = X;
  for (int l = 0; l < L; ++l) {
    ConstMatMap W(params_.data() + weight_offset(l), widths_[l + 1], widths_[l]);
    ConstVecMap b(params_.data() + bias_offset(l), widths_[l + 1]);
    Mat z = W * h;
    z.colwise() += b;
    tape.inputs[l] = std::move(h);
    if (l + 1 < L || head_ == Head::kSquash) {
      z = fast_tanh(z);
      tape.outputs[l] = z;
    }
    check_finite(z, l + 1, "activation");
    h = std::move(z);
  }
  if (head_ == Head::kSquash) {
    const double half = 0.5 * (hi_ - lo_);
    h = ((h.array() + 1.0) * half + lo_).cwiseMax(lo_).cwiseMin(hi_).matrix();
  }
  return h;
}

Mat Mlp::forward(const Mat& X) const {
  Tape tape;
  return forward(X, tape);
}

Vec Mlp::forward(const Vec& x) const {
  Tape tape;
  return forward(Mat(x), tape).col(0);
}

void Mlp::backward(const Tape& tape, const Mat& dY, Vec* dparams, Mat* dX) const {
  const int L = layers();
  if (static_cast<int>(tape.inputs.size()) != L) throw ValidationError("tape does not belong to this network");
  if (dY.rows() != output_dim() || dY.cols() != tape.inputs[0].cols()) {
    throw ValidationError("output gradient has the wrong shape");
  }
  if (dparams) dparams->setZero(param_count());
  Mat g = dY;
  if (head_ == Head::kSquash) g *= 0.5 * (hi_ - lo_);
  for (int l = L - 1; l >= 0; --l) {
    if (l + 1 < L || head_ == Head::kSquash) {
      g = (g.array() * (1.0 - tape.outputs[l].array().square())).matrix();
    }
    check_finite(g, l + 1, "gradient");
    ConstMatMap W(params_.data() + weight_offset(l), widths_[l + 1], widths_[l]);
    if (dparams) {
      MatMap dW(dparams->data() + weight_offset(l), widths_[l + 1], widths_[l]);
      dW.noalias() = g * tape.inputs[l].transpose();
      dparams->segment(bias_offset(l), widths_[l + 1]) = g.rowwise().sum();
    }
    if (l > 0 || dX) g = W.transpose() * g;
  }
  if (dX) *dX = std::move(g);
}

// ---------------------------------------------------------------------------

void save_checkpoint(std::ostream& out, const Mlp& net) {
  out << "oodcharge-mlp 1\n";
  out << "widths";
  for (int w : net.widths()) out << ' ' << w;
  out << '\n';
  out << fmt::format("head {} {:a} {:a}\n", net.head() == Head::kSquash ? "squash" : "identity", net.lo(),
                     net.hi());
  out << "params " << net.param_count() << '\n';
  for (int i = 0; i < net.param_count(); ++i) out << fmt::format("{:a}\n", net.params()[i]);
}

namespace {

double parse_hex(const std::string& token) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(token, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != token.size()) throw ParseError(fmt::format("checkpoint: bad number '{}'", token));
  return v;
}

}  // namespace

Mlp load_checkpoint(std::istream& in) {
  std::string line, word;
  if (!std::getline(in, line) || line != "oodcharge-mlp 1") throw ParseError("checkpoint: missing version header");
  if (!std::getline(in, line)) throw ParseError("checkpoint: missing widths");
  std::istringstream ws(line);
  ws >> word;
  if (word != "widths") throw ParseError("checkpoint: expected widths line");
  std::vector<int> widths;
  for (int w; ws >> w;) widths.push_back(w);
  if (!std::getline(in, line)) throw ParseError("checkpoint: missing head");
  std::istringstream hs(line);
  std::string kind, lo, hi;
  hs >> word >> kind >> lo >> hi;
  if (word != "head" || (kind != "squash" && kind != "identity")) throw ParseError("checkpoint: bad head line");
  Mlp net(widths, kind == "squash" ? Head::kSquash : Head::kIdentity, parse_hex(lo), parse_hex(hi));
  if (!std::getline(in, line)) throw ParseError("checkpoint: missing parameter count");
  std::istringstream ps(line);
  int count = -1;
  ps >> word >> count;
  if (word != "params" || count != net.param_count()) {
    throw ParseError(fmt::format("checkpoint: parameter count {} does not match widths ({})", count,
                                 net.param_count()));
  }
  for (int i = 0; i < count; ++i) {
    if (!(in >> word)) throw ParseError(fmt::format("checkpoint: truncated at parameter {}", i));
    net.params()[i] = parse_hex(word);
  }
  return net;
}

void save_checkpoint(const std::string& path, const Mlp& net) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write checkpoint '{}'", path));
  save_checkpoint(out, net);
}

Mlp load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot read checkpoint '{}'", path));
  return load_checkpoint(in);
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(int capacity, int state_dim, int action_dim)
    : capacity_(capacity), ds_(state_dim), da_(action_dim) {
  if (capacity <= 0) throw ValidationError("replay buffer capacity must be positive");
}

void ReplayBuffer::clear() {
  head_ = size_ = 0;
  s_.clear();
  a_.clear();
  s2_.clear();
  c_.clear();
  terminal_.clear();
}

void ReplayBuffer::push(const Vec& s, const Vec& a, const Vec& s_next, double cost, bool terminal) {
  if (s.size() != ds_ || s_next.size() != ds_ || a.size() != da_) {
    throw ValidationError("replay buffer: transition has the wrong dimensions");
  }
  int k;
  if (size_ < capacity_) {
    // storage grows lazily up to capacity
    k = size_++;
    s_.resize(static_cast<std::size_t>(size_) * ds_);
    s2_.resize(static_cast<std::size_t>(size_) * ds_);
    a_.resize(static_cast<std::size_t>(size_) * da_);
    c_.resize(size_);
    terminal_.resize(size_);
  } else {
    k = head_;
    head_ = (head_ + 1) % capacity_;
  }
  std::copy(s.data(), s.data() + ds_, s_.begin() + static_cast<std::ptrdiff_t>(k) * ds_);
  std::copy(s_next.data(), s_next.data() + ds_, s2_.begin() + static_cast<std::ptrdiff_t>(k) * ds_);
  std::copy(a.data(), a.data() + da_, a_.begin() + static_cast<std::ptrdiff_t>(k) * da_);
  c_[k] = cost;
  terminal_[k] = terminal ? 1 : 0;
}

Vec ReplayBuffer::state(int i) const { return ConstVecMap(s_.data() + static_cast<std::ptrdiff_t>(slot(i)) * ds_, ds_); }
Vec ReplayBuffer::action(int i) const { return ConstVecMap(a_.data() + static_cast<std::ptrdiff_t>(slot(i)) * da_, da_); }
Vec ReplayBuffer::next_state(int i) const {
  return ConstVecMap(s2_.data() + static_cast<std::ptrdiff_t>(slot(i)) * ds_, ds_);
}
double ReplayBuffer::cost(int i) const { return c_[slot(i)]; }
bool ReplayBuffer::terminal(int i) const { return terminal_[slot(i)] != 0; }

std::vector<int> ReplayBuffer::sample_indices(int count, Rng& rng) const {
  if (count > size_) {
    throw ValidationError(fmt::format("replay buffer holds {} transitions, batch needs {}", size_, count));
  }
  // Floyd's algorithm: distinct uniform indices
  std::vector<int> out;
  out.reserve(count);
  std::unordered_set<int> seen;
  for (int j = size_ - count; j < size_; ++j) {
    const int r = std::uniform_int_distribution<int>(0, j)(rng);
    if (seen.insert(r).second) out.push_back(r);
    else {
      seen.insert(j);
      out.push_back(j);
    }
  }
  return out;
}

ReplayBuffer::Batch ReplayBuffer::gather(const std::vector<int>& idx) const {
  const int B = static_cast<int>(idx.size());
  Batch b;
  b.S.resize(ds_, B);
  b.S2.resize(ds_, B);
  b.A.resize(da_, B);
  b.C.resize(B);
  b.not_terminal.resize(B);
  for (int j = 0; j < B; ++j) {
    if (idx[j] < 0 || idx[j] >= size_) throw ValidationError("replay buffer: index out of range");
    const std::ptrdiff_t k = slot(idx[j]);
    b.S.col(j) = ConstVecMap(s_.data() + k * ds_, ds_);
    b.S2.col(j) = ConstVecMap(s2_.data() + k * ds_, ds_);
    b.A.col(j) = ConstVecMap(a_.data() + k * da_, da_);
    b.C[j] = c_[k];
    b.not_terminal[j] = terminal_[k] ? 0.0 : 1.0;
  }
  return b;
}

// ---------------------------------------------------------------------------

Optimizer::Optimizer(Kind kind, double lr, int size) : kind_(kind), lr_(lr) {
  if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
  if (kind_ == Kind::kAdam) {
    m_ = Vec::Zero(size);
    v_ = Vec::Zero(size);
  }
}

Optimizer Optimizer::make(const std::string& name, double lr, int size) {
  if (name == "adam") return Optimizer(Kind::kAdam, lr, size);
  if (name == "sgd") return Optimizer(Kind::kSgd, lr, size);
  throw ValidationError(fmt::format("unknown optimizer '{}'", name));
}

void Optimizer::step(Vec& params, const Vec& grad) {
  if (grad.size() != params.size()) throw ValidationError("optimizer: gradient has the wrong size");
  if (kind_ == Kind::kSgd) {
    params -= lr_ * grad;
    return;
  }
  if (m_.size() != params.size()) throw ValidationError("optimizer: state has the wrong size");
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

// ---------------------------------------------------------------------------

Mat critic_input(const Mat& S, const Mat& A) {
  if (S.cols() != A.cols()) throw ValidationError("critic input: state and action batches differ in size");
  Mat X(S.rows() + A.rows(), S.cols());
  X.topRows(S.rows()) = S;
  X.bottomRows(A.rows()) = A;
  return X;
}

double critic_loss(const Mlp& critic, const Mlp& critic_target, const Mlp& actor_target,
                   const ReplayBuffer::Batch& batch, double discount, Vec* grad) {
  const int B = static_cast<int>(batch.C.size());
  if (B == 0) throw ValidationError("critic loss on an empty batch");
  const Mat next_q = critic_target.forward(critic_input(batch.S2, actor_target.forward(batch.S2)));
  const Vec target = batch.C + discount * batch.not_terminal.cwiseProduct(next_q.row(0).transpose());
  Tape tape;
  const Mat q = critic.forward(critic_input(batch.S, batch.A), tape);
  const Vec resid = q.row(0).transpose() - target;
  if (grad) critic.backward(tape, Mat((2.0 / B) * resid.transpose()), grad, nullptr);
  return resid.squaredNorm() / B;
}

double critic_update(Mlp& critic, Optimizer& opt, const Mlp& critic_target, const Mlp& actor_target,
                     const ReplayBuffer::Batch& batch, double discount) {
  Vec grad;
  const double loss = critic_loss(critic, critic_target, actor_target, batch, discount, &grad);
  opt.step(critic.params(), grad);
  return loss;
}

ActionCritic as_action_critic(const Mlp& critic) {
  return [&critic](const Mat& S, const Mat& A, Mat* dA) -> Vec {
    Tape tape;
    const Mat q = critic.forward(critic_input(S, A), tape);
    if (dA) {
      Mat dX;
      critic.backward(tape, Mat::Ones(1, q.cols()), nullptr, &dX);
      *dA = dX.bottomRows(A.rows());
    }
    return q.row(0).transpose();
  };
}

double actor_objective(const Mlp& actor, const ActionCritic& critic, const Mat& S, Vec* grad) {
  const int B = static_cast<int>(S.cols());
  if (B == 0) throw ValidationError("actor objective on an empty batch");
  Tape tape;
  const Mat A = actor.forward(S, tape);
  Mat dA;
  const Vec q = critic(S, A, grad ? &dA : nullptr);
  if (grad) actor.backward(tape, dA / B, grad, nullptr);
  return q.mean();
}

double actor_update(Mlp& actor, Optimizer& opt, const ActionCritic& critic, const Mat& S) {
  Vec grad;
  const double obj = actor_objective(actor, critic, S, &grad);
  opt.step(actor.params(), grad);
  return obj;
}

void soft_update(Mlp& target, const Mlp& source, double tau) {
  if (target.widths() != source.widths()) throw ValidationError("soft update: networks differ in shape");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("soft update rate must lie in [0, 1]");
  if (tau == 1.0) target.params() = source.params();
  else if (tau > 0.0) target.params() = tau * source.params() + (1.0 - tau) * target.params();
}

double q_eval(const Mlp& critic, const Vec& s, const Vec& a) {
  Vec x(s.size() + a.size());
  x << s, a;
  return critic.forward(x)[0];
}

// ---------------------------------------------------------------------------

namespace {

std::vector<int> hidden_widths(int in, int out, const DdpgParams& p) {
  std::vector<int> w{in};
  for (int k = 0; k < p.hidden_layers; ++k) w.push_back(p.hidden);
  w.push_back(out);
  return w;
}

}  // namespace

DdpgLearner::DdpgLearner(int state_dim, int action_dim, double a_lo, double a_hi, const DdpgParams& params,
                         std::uint64_t seed)
    : params_(params),
      actor_(hidden_widths(state_dim, action_dim, params), Head::kSquash, a_lo, a_hi),
      critic_(hidden_widths(state_dim + action_dim, 1, params), Head::kIdentity),
      buffer_(params.buffer, state_dim, action_dim),
      rng_(seed),
      a_lo_(a_lo),
      a_hi_(a_hi) {
  if (!(params.tau_soft > 0.0 && params.tau_soft <= 1.0)) throw ValidationError("tau_soft must lie in (0, 1]");
  if (params.batch <= 0 || params.batch > params.buffer) throw ValidationError("batch must lie in [1, buffer]");
  actor_.init(rng_);
  critic_.init(rng_);
  actor_target_ = actor_;
  critic_target_ = critic_;
  actor_opt_ = Optimizer::make(params.optimizer, params.lr, actor_.param_count());
  critic_opt_ = Optimizer::make(params.optimizer, params.lr, critic_.param_count());
}

Vec DdpgLearner::act(const Vec& s) const { return actor_.forward(s); }

Vec DdpgLearner::explore(const Vec& s, double progress) {
  const double frac = std::clamp(progress, 0.0, 1.0);
  const double sd = (params_.noise_start + (params_.noise_end - params_.noise_start) * frac) * (a_hi_ - a_lo_);
  Vec a = act(s);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = std::clamp(a[i] + sd * noise(rng_), a_lo_, a_hi_);
  return a;
}

double DdpgLearner::q(const Vec& s, const Vec& a) const { return q_eval(critic_, s, a); }

void DdpgLearner::store(const Vec& s, const Vec& a, const Vec& s_next, double cost, bool terminal) {
  buffer_.push(s, a, s_next, cost, terminal);
}

void DdpgLearner::update() {
  const ReplayBuffer::Batch batch = buffer_.sample(params_.batch, rng_);
  last_critic_loss_ = critic_update(critic_, critic_opt_, critic_target_, actor_target_, batch, params_.discount);
  actor_update(actor_, actor_opt_, as_action_critic(critic_), batch.S);
  soft_update(critic_target_, critic_, params_.tau_soft);
  soft_update(actor_target_, actor_, params_.tau_soft);
}

}  // namespace oodcharge
