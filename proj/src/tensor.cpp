#include "meow/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace meow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kLayerNormEps = 1e-5;

uint64_t splitmix64(uint64_t& x) {
  x += 0x9E3779B97F4A7C15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

uint64_t rotl64(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

double sigmoid_of(double x) { return 1.0 / (1.0 + std::exp(-x)); }

thread_local Tape* tl_tape = nullptr;

std::atomic<uint64_t> g_epoch{1};

}  // namespace

// ---------------------------------------------------------------------------
// Rng

Rng::Rng(uint64_t seed) : seed_(seed) {
  uint64_t s = seed;
  for (auto& w : state_) w = splitmix64(s);
}

uint64_t Rng::next_u64() {
  uint64_t* s = state_;
  uint64_t result = rotl64(s[0] + s[3], 23) + s[0];
  uint64_t t = s[1] << 17;
  s[2] ^= s[0];
  s[3] ^= s[1];
  s[1] ^= s[2];
  s[0] ^= s[3];
  s[2] ^= t;
  s[3] = rotl64(s[3], 45);
  return result;
}

double Rng::uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  has_spare_ = true;
  return u * m;
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw Error("uniform_int: n must be positive");
  return static_cast<int>(
      (static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
}

Rng Rng::fork(uint64_t stream) const {
  uint64_t x = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
  return Rng(splitmix64(x));
}

// ---------------------------------------------------------------------------
// Shape / Tensor construction

std::string Shape::str() const {
  std::ostringstream os;
  if (rank == 0) {
    os << "()";
  } else if (rank == 1) {
    os << "(" << d0 << ")";
  } else {
    os << "(" << d0 << "x" << d1 << ")";
  }
  return os.str();
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.owned_ = std::make_shared<std::vector<double>>(1, v);
  t.shape_ = Shape::scalar();
  return t;
}

Tensor Tensor::vec(std::vector<double> v) {
  Tensor t;
  t.shape_ = Shape::vec(static_cast<int>(v.size()));
  t.owned_ = std::make_shared<std::vector<double>>(std::move(v));
  return t;
}

Tensor Tensor::vec(std::span<const double> v) {
  return vec(std::vector<double>(v.begin(), v.end()));
}

Tensor Tensor::mat(int rows, int cols, std::vector<double> v) {
  if (rows <= 0 || cols <= 0 || static_cast<int>(v.size()) != rows * cols)
    throw ShapeError("matrix data does not match rows x cols");
  Tensor t;
  t.shape_ = Shape::mat(rows, cols);
  t.owned_ = std::make_shared<std::vector<double>>(std::move(v));
  return t;
}

Tensor Tensor::zeros(const Shape& s) {
  Tensor t;
  t.shape_ = s;
  t.owned_ = std::make_shared<std::vector<double>>(s.size(), 0.0);
  return t;
}

Tensor Tensor::full(const Shape& s, double v) {
  Tensor t;
  t.shape_ = s;
  t.owned_ = std::make_shared<std::vector<double>>(s.size(), v);
  return t;
}

Tensor Tensor::parameter(const Shape& s, std::vector<double> init) {
  if (static_cast<int>(init.size()) != s.size())
    throw ShapeError("parameter init does not match shape " + s.str());
  Tensor t;
  t.shape_ = s;
  t.owned_ = std::make_shared<std::vector<double>>(std::move(init));
  t.requires_grad_ = true;
  return t;
}

double* Tensor::mutable_data() {
  if (!owned_) throw Error("mutable_data: tensor does not own its storage");
  return owned_->data();
}

const double* Tensor::owned_data() const {
  if (!owned_) throw Error("owned_data: tensor does not own its storage");
  return owned_->data();
}

Tensor Tensor::reshaped(const Shape& s) const {
  if (s.size() != size())
    throw ShapeError("reshape " + shape_.str() + " -> " + s.str() + " changes element count");
  if (owned_ && requires_grad_)
    throw Error("reshaped: parameters must keep their registered shape");
  Tensor t(*this);
  t.shape_ = s;
  return t;
}

// ---------------------------------------------------------------------------
// GradientMap

bool GradientMap::contains(const Tensor& param) const {
  return param.defined() && find(param) != nullptr;
}

const std::vector<double>* GradientMap::find(const Tensor& param) const {
  auto it = by_storage_.find(static_cast<const void*>(param.owned_data()));
  return it == by_storage_.end() ? nullptr : &it->second;
}

std::vector<double>* GradientMap::find(const Tensor& param) {
  auto it = by_storage_.find(static_cast<const void*>(param.owned_data()));
  return it == by_storage_.end() ? nullptr : &it->second;
}

std::vector<double> GradientMap::grad(const Tensor& param) const {
  const std::vector<double>* g = find(param);
  if (g == nullptr) return std::vector<double>(param.size(), 0.0);
  return *g;
}

// ---------------------------------------------------------------------------
// Tape bookkeeping

Tape::Tape() : epoch_(g_epoch.fetch_add(1)) {}

Tape::~Tape() = default;

Tape::Scope::Scope(Tape* t) : prev_(tl_tape) { tl_tape = t; }

Tape::Scope::~Scope() { tl_tape = prev_; }

Tape* Tape::current() { return tl_tape; }

void Tape::clear() {
  nodes_.clear();
  vals_.clear();
  saved_.clear();
  leaf_ids_.clear();
  leaf_keepalive_.clear();
  epoch_ = g_epoch.fetch_add(1);
}

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kAddC: return "add_const";
    case Op::kMulC: return "mul_const";
    case Op::kSubC: return "sub_const";
    case Op::kRsubC: return "rsub_const";
    case Op::kDivC: return "div_const";
    case Op::kMatVec: return "matmul";
    case Op::kAffine: return "affine";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kNeg: return "neg";
    case Op::kSquare: return "square";
    case Op::kSwish: return "swish";
    case Op::kSigmoid: return "sigmoid";
    case Op::kMin: return "min";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kDropout: return "dropout";
    case Op::kGaussLogP: return "gaussian_log_prob";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
  }
  return "?";
}

std::span<double> Tape::out_span(const Node& n) {
  return {vals_.data() + n.out_off, static_cast<size_t>(n.shape.size())};
}

std::span<const double> Tape::out_span(const Node& n) const {
  return {vals_.data() + n.out_off, static_cast<size_t>(n.shape.size())};
}

std::span<double> Tape::saved_span(const Node& n) {
  return {saved_.data() + n.saved_off, static_cast<size_t>(n.saved_len)};
}

std::span<const double> Tape::saved_span(const Node& n) const {
  return {saved_.data() + n.saved_off, static_cast<size_t>(n.saved_len)};
}

int Tape::node_for(const Tensor& t) {
  if (!t.defined()) throw Error("op input is an undefined tensor");
  if (t.node_ >= 0) {
    if (t.tape_ != this || t.epoch_ != epoch_)
      throw ShapeError("op input belongs to another or a cleared tape");
    return t.node_;
  }
  const void* key = static_cast<const void*>(t.owned_->data());
  auto it = leaf_ids_.find(key);
  if (it != leaf_ids_.end()) return it->second;

  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = t.requires_grad_;
  n.shape = t.shape_;
  n.out_off = vals_.size();
  n.leaf_src = t.owned_.get();
  vals_.insert(vals_.end(), t.owned_->begin(), t.owned_->end());
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(n);
  leaf_ids_.emplace(key, id);
  // Pin the storage: a temporary leaf freed mid-build would otherwise let a
  // later allocation reuse its address and collide in leaf_ids_.
  leaf_keepalive_.push_back(t.owned_);
  return id;
}

int Tape::record(Op op, const Shape& shape, int in0, int in1, int in2, double c,
                 int aux, int saved_len, bool requires_grad) {
  Node n;
  n.op = op;
  n.requires_grad = requires_grad;
  n.in0 = in0;
  n.in1 = in1;
  n.in2 = in2;
  n.c = c;
  n.aux = aux;
  n.shape = shape;
  n.out_off = vals_.size();
  n.saved_off = saved_.size();
  n.saved_len = saved_len;
  vals_.resize(vals_.size() + shape.size());
  saved_.resize(saved_.size() + saved_len);
  nodes_.push_back(n);
  return static_cast<int>(nodes_.size()) - 1;
}

// ---------------------------------------------------------------------------
// OpAccess: shared forward kernels plus validated op application. It is the
// one place allowed to touch Tensor and Tape internals.

struct OpAccess {
  using Op = Tape::Op;

  struct FwdCall {
    const double* a = nullptr;
    int la = 0;
    const double* b = nullptr;
    int lb = 0;
    const double* c3 = nullptr;
    double c = 0.0;
    int aux = 0;
    double* out = nullptr;
    int lo = 0;
    double* saved = nullptr;
    bool fresh = true;  // false replays a recorded stochastic draw
    Rng* rng = nullptr;
  };

  static const double* values_of(const Tensor& t) {
    if (!t.defined()) throw Error("reading an undefined tensor");
    if (t.owned_) return t.owned_->data();
    if (t.tape_ == nullptr || t.epoch_ != t.tape_->epoch_)
      throw Error("reading a tensor from a cleared tape");
    return t.tape_->vals_.data() + t.tape_->nodes_[t.node_].out_off;
  }

  static void check_finite(Op op, const double* out, int n) {
    for (int i = 0; i < n; ++i) {
      if (!std::isfinite(out[i]))
        throw NumericError(std::string(Tape::op_name(op)) + " produced a non-finite value");
    }
  }

  static void run_forward(Op op, const FwdCall& f);
  static Shape infer(Op op, const Tensor* a, const Tensor* b, const Tensor* c3,
                     double c, int aux, int* saved_len);
  static Tensor apply(Op op, const Tensor* a, const Tensor* b, const Tensor* c3,
                      double c, int aux, Rng* rng);
};

void OpAccess::run_forward(Op op, const FwdCall& f) {
  switch (op) {
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      for (int i = 0; i < f.lo; ++i) {
        double av = f.a[f.la == 1 ? 0 : i];
        double bv = f.b[f.lb == 1 ? 0 : i];
        switch (op) {
          case Op::kAdd: f.out[i] = av + bv; break;
          case Op::kSub: f.out[i] = av - bv; break;
          case Op::kMul: f.out[i] = av * bv; break;
          default: f.out[i] = av / bv; break;
        }
      }
      break;
    }
    case Op::kAddC:
      for (int i = 0; i < f.lo; ++i) f.out[i] = f.a[i] + f.c;
      break;
    case Op::kSubC:
      for (int i = 0; i < f.lo; ++i) f.out[i] = f.a[i] - f.c;
      break;
    case Op::kRsubC:
      for (int i = 0; i < f.lo; ++i) f.out[i] = f.c - f.a[i];
      break;
    case Op::kMulC:
      for (int i = 0; i < f.lo; ++i) f.out[i] = f.a[i] * f.c;
      break;
    case Op::kDivC:
      for (int i = 0; i < f.lo; ++i) f.out[i] = f.a[i] / f.c;
      break;
    case Op::kMatVec:
    case Op::kAffine: {
      int n = f.aux;
      for (int r = 0; r < f.lo; ++r) {
        const double* row = f.a + static_cast<size_t>(r) * n;
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += row[j] * f.b[j];
        f.out[r] = (op == Op::kAffine) ? acc + f.c3[r] : acc;
      }
      break;
    }
    case Op::kSum:
    case Op::kMean: {
      double acc = 0.0;
      for (int i = 0; i < f.la; ++i) acc += f.a[i];
      f.out[0] = (op == Op::kMean) ? acc / f.la : acc;
      break;
    }
    case Op::kLog:
      for (int i = 0; i < f.lo; ++i) f.out[i] = std::log(f.a[i]);
      break;
    case Op::kExp:
      for (int i = 0; i < f.lo; ++i) f.out[i] = std::exp(f.a[i]);
      break;
    case Op::kNeg:
      for (int i = 0; i < f.lo; ++i) f.out[i] = -f.a[i];
      break;
    case Op::kSquare:
      for (int i = 0; i < f.lo; ++i) f.out[i] = f.a[i] * f.a[i];
      break;
    case Op::kSwish:
      for (int i = 0; i < f.lo; ++i) f.out[i] = f.a[i] * sigmoid_of(f.a[i]);
      break;
    case Op::kSigmoid:
      for (int i = 0; i < f.lo; ++i) f.out[i] = sigmoid_of(f.a[i]);
      break;
    case Op::kMin: {
      // Tie selects the first operand; the mask records the routing.
      for (int i = 0; i < f.lo; ++i) {
        double av = f.a[f.la == 1 ? 0 : i];
        double bv = f.b[f.lb == 1 ? 0 : i];
        bool first = av <= bv;
        f.out[i] = first ? av : bv;
        if (f.saved != nullptr) f.saved[i] = first ? 1.0 : 0.0;
      }
      break;
    }
    case Op::kLayerNorm: {
      int n = f.la;
      double mu = 0.0;
      for (int i = 0; i < n; ++i) mu += f.a[i];
      mu /= n;
      double var = 0.0;
      for (int i = 0; i < n; ++i) {
        double d = f.a[i] - mu;
        var += d * d;
      }
      var /= n;
      double istd = 1.0 / std::sqrt(var + kLayerNormEps);
      for (int i = 0; i < n; ++i) {
        double xn = (f.a[i] - mu) * istd;
        if (f.saved != nullptr) f.saved[i] = xn;
        f.out[i] = f.b[i] * xn + f.c3[i];
      }
      if (f.saved != nullptr) f.saved[n] = istd;
      break;
    }
    case Op::kDropout: {
      double keep_scale = 1.0 / (1.0 - f.c);
      for (int i = 0; i < f.lo; ++i) {
        double m;
        if (f.fresh) {
          m = (f.rng->uniform() >= f.c) ? keep_scale : 0.0;
          if (f.saved != nullptr) f.saved[i] = m;
        } else {
          m = f.saved[i];
        }
        f.out[i] = f.a[i] * m;
      }
      break;
    }
    case Op::kGaussLogP: {
      double acc = 0.0;
      for (int i = 0; i < f.la; ++i) acc += f.a[i] * f.a[i];
      f.out[0] = -0.5 * acc - 0.5 * f.la * kLog2Pi;
      break;
    }
    case Op::kConcat: {
      for (int i = 0; i < f.la; ++i) f.out[i] = f.a[i];
      for (int i = 0; i < f.lb; ++i) f.out[f.la + i] = f.b[i];
      break;
    }
    case Op::kSlice: {
      for (int i = 0; i < f.lo; ++i) f.out[i] = f.a[f.aux + i];
      break;
    }
    case Op::kLeaf:
      throw Error("leaf nodes have no forward kernel");
  }
}

Shape OpAccess::infer(Op op, const Tensor* a, const Tensor* b, const Tensor* c3,
                      double c, int aux, int* saved_len) {
  *saved_len = 0;
  auto need = [&](const Tensor* t, const char* what) -> const Tensor& {
    if (t == nullptr || !t->defined())
      throw Error(std::string(Tape::op_name(op)) + ": missing operand (" + what + ")");
    return *t;
  };
  auto binary_shape = [&](const Tensor& x, const Tensor& y) -> Shape {
    if (x.shape() == y.shape()) return x.shape();
    if (x.shape().rank == 0) return y.shape();
    if (y.shape().rank == 0) return x.shape();
    throw ShapeError(std::string(Tape::op_name(op)) + ": operands " + x.shape().str() +
                     " and " + y.shape().str() + " do not match (only rank-0 broadcasts)");
  };
  switch (op) {
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv:
      return binary_shape(need(a, "lhs"), need(b, "rhs"));
    case Op::kMin: {
      Shape s = binary_shape(need(a, "lhs"), need(b, "rhs"));
      *saved_len = s.size();
      return s;
    }
    case Op::kAddC:
    case Op::kSubC:
    case Op::kRsubC:
    case Op::kMulC:
    case Op::kDivC:
      if (op == Op::kDivC && c == 0.0) throw NumericError("div by constant zero");
      return need(a, "operand").shape();
    case Op::kMatVec:
    case Op::kAffine: {
      const Tensor& w = need(a, "matrix");
      const Tensor& x = need(b, "vector");
      if (w.shape().rank != 2 || x.shape().rank != 1)
        throw ShapeError(std::string(Tape::op_name(op)) + ": expected matrix and vector, got " +
                         w.shape().str() + " and " + x.shape().str());
      if (w.shape().d1 != x.shape().d0)
        throw ShapeError(std::string(Tape::op_name(op)) + ": inner dimensions differ, " +
                         w.shape().str() + " vs " + x.shape().str());
      if (op == Op::kAffine) {
        const Tensor& bias = need(c3, "bias");
        if (bias.shape().rank != 1 || bias.shape().d0 != w.shape().d0)
          throw ShapeError("affine: bias " + bias.shape().str() + " does not match rows of " +
                           w.shape().str());
      }
      return Shape::vec(w.shape().d0);
    }
    case Op::kSum:
    case Op::kMean:
      if (need(a, "operand").size() == 0) throw ShapeError("sum/mean of an empty tensor");
      return Shape::scalar();
    case Op::kLog:
    case Op::kExp:
    case Op::kNeg:
    case Op::kSquare:
    case Op::kSwish:
    case Op::kSigmoid:
      return need(a, "operand").shape();
    case Op::kLayerNorm: {
      const Tensor& x = need(a, "input");
      const Tensor& g = need(b, "gain");
      const Tensor& bi = need(c3, "bias");
      if (x.shape().rank != 1 || !(g.shape() == x.shape()) || !(bi.shape() == x.shape()))
        throw ShapeError("layer_norm: input, gain and bias must be vectors of one length");
      *saved_len = x.size() + 1;
      return x.shape();
    }
    case Op::kDropout: {
      if (c < 0.0 || c >= 1.0) throw Error("dropout: rate must lie in [0, 1)");
      const Tensor& x = need(a, "input");
      *saved_len = x.size();
      return x.shape();
    }
    case Op::kGaussLogP: {
      const Tensor& z = need(a, "input");
      if (z.shape().rank != 1)
        throw ShapeError("gaussian_log_prob: expected a vector, got " + z.shape().str());
      return Shape::scalar();
    }
    case Op::kConcat: {
      const Tensor& x = need(a, "lhs");
      const Tensor& y = need(b, "rhs");
      if (x.shape().rank != 1 || y.shape().rank != 1) throw ShapeError("concat: expected vectors");
      return Shape::vec(x.size() + y.size());
    }
    case Op::kSlice: {
      const Tensor& x = need(a, "input");
      if (x.shape().rank != 1) throw ShapeError("slice: expected a vector");
      int length = static_cast<int>(c);
      if (aux < 0 || length < 1 || aux + length > x.size())
        throw ShapeError("slice: range out of bounds");
      return Shape::vec(length);
    }
    case Op::kLeaf:
      break;
  }
  throw Error("unsupported op");
}

Tensor OpAccess::apply(Op op, const Tensor* a, const Tensor* b, const Tensor* c3,
                       double c, int aux, Rng* rng) {
  int saved_len = 0;
  Shape out_shape = infer(op, a, b, c3, c, aux, &saved_len);

  bool rg = (a != nullptr && a->requires_grad()) || (b != nullptr && b->requires_grad()) ||
            (c3 != nullptr && c3->requires_grad());
  Tape* tape = Tape::current();

  if (tape != nullptr && rg) {
    int ia = a != nullptr ? tape->node_for(*a) : -1;
    int ib = b != nullptr ? tape->node_for(*b) : -1;
    int ic = c3 != nullptr ? tape->node_for(*c3) : -1;
    int id = tape->record(op, out_shape, ia, ib, ic, c, aux, saved_len, true);
    tape->forward_node(static_cast<size_t>(id), tape->vals_.data() + tape->nodes_[id].out_off,
                       /*fresh_saved=*/true, rng);
    check_finite(op, tape->vals_.data() + tape->nodes_[id].out_off, out_shape.size());
    Tensor t;
    t.shape_ = out_shape;
    t.requires_grad_ = true;
    t.tape_ = tape;
    t.epoch_ = tape->epoch_;
    t.node_ = id;
    return t;
  }

  auto out = std::make_shared<std::vector<double>>(out_shape.size());
  std::vector<double> scratch(static_cast<size_t>(saved_len));
  FwdCall f;
  f.a = a != nullptr ? values_of(*a) : nullptr;
  f.la = a != nullptr ? a->size() : 0;
  f.b = b != nullptr ? values_of(*b) : nullptr;
  f.lb = b != nullptr ? b->size() : 0;
  f.c3 = c3 != nullptr ? values_of(*c3) : nullptr;
  f.c = c;
  f.aux = (op == Op::kMatVec || op == Op::kAffine) ? b->size() : aux;
  f.out = out->data();
  f.lo = out_shape.size();
  f.saved = saved_len > 0 ? scratch.data() : nullptr;
  f.rng = rng;
  run_forward(op, f);
  check_finite(op, out->data(), out_shape.size());
  Tensor t;
  t.shape_ = out_shape;
  t.owned_ = std::move(out);
  return t;
}

// ---------------------------------------------------------------------------
// Tensor readers (need OpAccess for arena resolution)

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
  return OpAccess::values_of(*this)[0];
}

std::vector<double> Tensor::values() const {
  const double* p = OpAccess::values_of(*this);
  return std::vector<double>(p, p + size());
}

Tensor Tensor::clone_detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.owned_ = std::make_shared<std::vector<double>>(values());
  return t;
}

// ---------------------------------------------------------------------------
// Tape execution

void Tape::forward_node(size_t idx, double* out, bool fresh_saved, Rng* rng) {
  Node& n = nodes_[idx];
  if (n.op == Op::kLeaf) {
    std::memcpy(out, n.leaf_src->data(), n.leaf_src->size() * sizeof(double));
    return;
  }
  OpAccess::FwdCall f;
  if (n.in0 >= 0) {
    const Node& m = nodes_[n.in0];
    f.a = vals_.data() + m.out_off;
    f.la = m.shape.size();
  }
  if (n.in1 >= 0) {
    const Node& m = nodes_[n.in1];
    f.b = vals_.data() + m.out_off;
    f.lb = m.shape.size();
  }
  if (n.in2 >= 0) {
    const Node& m = nodes_[n.in2];
    f.c3 = vals_.data() + m.out_off;
  }
  f.c = n.c;
  f.aux = (n.op == Op::kMatVec || n.op == Op::kAffine) ? f.lb : n.aux;
  f.out = out;
  f.lo = n.shape.size();
  f.saved = n.saved_len > 0 ? saved_.data() + n.saved_off : nullptr;
  f.fresh = fresh_saved;
  f.rng = rng;
  OpAccess::run_forward(n.op, f);
}

bool Tape::replay_matches() {
  std::vector<double> scratch;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    size_t len = static_cast<size_t>(n.shape.size());
    scratch.resize(len);
    forward_node(i, scratch.data(), /*fresh_saved=*/false, nullptr);
    if (std::memcmp(scratch.data(), vals_.data() + n.out_off, len * sizeof(double)) != 0)
      return false;
  }
  return true;
}

GradientMap Tape::backward(const Tensor& loss) {
  if (loss.node_ < 0 || loss.tape_ != this || loss.epoch_ != epoch_)
    throw Error("backward: loss is not recorded on this tape");
  if (loss.shape().rank != 0)
    throw ShapeError("backward: loss must be a scalar");

  adj_.assign(vals_.size(), 0.0);
  std::vector<uint8_t> touched(nodes_.size(), 0);
  adj_[nodes_[loss.node_].out_off] = 1.0;
  touched[loss.node_] = 1;

  auto adj_of = [&](int id) -> double* {
    if (id < 0) return nullptr;
    const Node& m = nodes_[id];
    if (!m.requires_grad) return nullptr;
    touched[id] = 1;
    return adj_.data() + m.out_off;
  };

  for (int i = loss.node_; i >= 0; --i) {
    if (!touched[i] || !nodes_[i].requires_grad) continue;
    if (nodes_[i].op == Op::kLeaf) continue;
    backward_node(static_cast<size_t>(i), adj_.data() + nodes_[i].out_off, adj_of);
  }

  GradientMap gm;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op != Op::kLeaf || !n.requires_grad || !touched[i]) continue;
    const double* g = adj_.data() + n.out_off;
    size_t len = n.leaf_src->size();
    for (size_t k = 0; k < len; ++k) {
      if (!std::isfinite(g[k])) throw NumericError("backward produced a non-finite gradient");
    }
    gm.by_storage_[static_cast<const void*>(n.leaf_src->data())] =
        std::vector<double>(g, g + len);
  }
  return gm;
}

void Tape::backward_node(size_t idx, const double* adj,
                         const std::function<double*(int)>& adj_of) {
  const Node& n = nodes_[idx];
  const int lo = n.shape.size();
  const double* va = n.in0 >= 0 ? vals_.data() + nodes_[n.in0].out_off : nullptr;
  const double* vb = n.in1 >= 0 ? vals_.data() + nodes_[n.in1].out_off : nullptr;
  const int la = n.in0 >= 0 ? nodes_[n.in0].shape.size() : 0;
  const int lb = n.in1 >= 0 ? nodes_[n.in1].shape.size() : 0;
  const double* vo = vals_.data() + n.out_off;
  double* ga = adj_of(n.in0);
  double* gb = adj_of(n.in1);
  double* gc = adj_of(n.in2);

  // Accumulate v into g[i], or g[0] when that operand broadcast from rank 0.
  auto acc = [lo](double* g, int lg, int i, double v) {
    if (g == nullptr) return;
    g[(lg == 1 && lo != 1) ? 0 : i] += v;
  };

  switch (n.op) {
    case Op::kAdd:
      for (int i = 0; i < lo; ++i) {
        acc(ga, la, i, adj[i]);
        acc(gb, lb, i, adj[i]);
      }
      break;
    case Op::kSub:
      for (int i = 0; i < lo; ++i) {
        acc(ga, la, i, adj[i]);
        acc(gb, lb, i, -adj[i]);
      }
      break;
    case Op::kMul:
      for (int i = 0; i < lo; ++i) {
        double av = va[la == 1 ? 0 : i];
        double bv = vb[lb == 1 ? 0 : i];
        acc(ga, la, i, adj[i] * bv);
        acc(gb, lb, i, adj[i] * av);
      }
      break;
    case Op::kDiv:
      for (int i = 0; i < lo; ++i) {
        double av = va[la == 1 ? 0 : i];
        double bv = vb[lb == 1 ? 0 : i];
        acc(ga, la, i, adj[i] / bv);
        acc(gb, lb, i, -adj[i] * av / (bv * bv));
      }
      break;
    case Op::kAddC:
    case Op::kSubC:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] += adj[i];
      break;
    case Op::kRsubC:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] -= adj[i];
      break;
    case Op::kMulC:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] += adj[i] * n.c;
      break;
    case Op::kDivC:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] += adj[i] / n.c;
      break;
    case Op::kMatVec:
    case Op::kAffine: {
      int cols = lb;
      for (int r = 0; r < lo; ++r) {
        double g = adj[r];
        if (g == 0.0 && n.op == Op::kMatVec) continue;
        const double* wrow = va + static_cast<size_t>(r) * cols;
        if (ga != nullptr) {
          double* grow = ga + static_cast<size_t>(r) * cols;
          for (int j = 0; j < cols; ++j) grow[j] += g * vb[j];
        }
        if (gb != nullptr)
          for (int j = 0; j < cols; ++j) gb[j] += g * wrow[j];
        if (n.op == Op::kAffine && gc != nullptr) gc[r] += g;
      }
      break;
    }
    case Op::kSum:
      if (ga != nullptr)
        for (int i = 0; i < la; ++i) ga[i] += adj[0];
      break;
    case Op::kMean:
      if (ga != nullptr) {
        double g = adj[0] / la;
        for (int i = 0; i < la; ++i) ga[i] += g;
      }
      break;
    case Op::kLog:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] += adj[i] / va[i];
      break;
    case Op::kExp:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] += adj[i] * vo[i];
      break;
    case Op::kNeg:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] -= adj[i];
      break;
    case Op::kSquare:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] += 2.0 * adj[i] * va[i];
      break;
    case Op::kSwish:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) {
          double s = sigmoid_of(va[i]);
          ga[i] += adj[i] * (s + va[i] * s * (1.0 - s));
        }
      break;
    case Op::kSigmoid:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[i] += adj[i] * vo[i] * (1.0 - vo[i]);
      break;
    case Op::kMin: {
      const double* mask = saved_.data() + n.saved_off;
      for (int i = 0; i < lo; ++i) {
        if (mask[i] != 0.0)
          acc(ga, la, i, adj[i]);
        else
          acc(gb, lb, i, adj[i]);
      }
      break;
    }
    case Op::kLayerNorm: {
      int len = la;
      const double* xn = saved_.data() + n.saved_off;
      double istd = saved_[n.saved_off + len];
      const double* gain = vb;
      double m1 = 0.0, m2 = 0.0;
      for (int i = 0; i < len; ++i) {
        double dxn = adj[i] * gain[i];
        m1 += dxn;
        m2 += dxn * xn[i];
      }
      m1 /= len;
      m2 /= len;
      for (int i = 0; i < len; ++i) {
        double dxn = adj[i] * gain[i];
        if (ga != nullptr) ga[i] += istd * (dxn - m1 - xn[i] * m2);
        if (gb != nullptr) gb[i] += adj[i] * xn[i];
        if (gc != nullptr) gc[i] += adj[i];
      }
      break;
    }
    case Op::kDropout:
      if (ga != nullptr) {
        const double* mask = saved_.data() + n.saved_off;
        for (int i = 0; i < lo; ++i) ga[i] += adj[i] * mask[i];
      }
      break;
    case Op::kGaussLogP:
      if (ga != nullptr)
        for (int i = 0; i < la; ++i) ga[i] -= adj[0] * va[i];
      break;
    case Op::kConcat:
      if (ga != nullptr)
        for (int i = 0; i < la; ++i) ga[i] += adj[i];
      if (gb != nullptr)
        for (int i = 0; i < lb; ++i) gb[i] += adj[la + i];
      break;
    case Op::kSlice:
      if (ga != nullptr)
        for (int i = 0; i < lo; ++i) ga[n.aux + i] += adj[i];
      break;
    case Op::kLeaf:
      break;
  }
}

// ---------------------------------------------------------------------------
// Public op wrappers

Tensor add(const Tensor& a, const Tensor& b) {
  return OpAccess::apply(OpAccess::Op::kAdd, &a, &b, nullptr, 0, 0, nullptr);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return OpAccess::apply(OpAccess::Op::kSub, &a, &b, nullptr, 0, 0, nullptr);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return OpAccess::apply(OpAccess::Op::kMul, &a, &b, nullptr, 0, 0, nullptr);
}
Tensor div(const Tensor& a, const Tensor& b) {
  return OpAccess::apply(OpAccess::Op::kDiv, &a, &b, nullptr, 0, 0, nullptr);
}
Tensor add(const Tensor& a, double c) {
  return OpAccess::apply(OpAccess::Op::kAddC, &a, nullptr, nullptr, c, 0, nullptr);
}
Tensor sub(const Tensor& a, double c) {
  return OpAccess::apply(OpAccess::Op::kSubC, &a, nullptr, nullptr, c, 0, nullptr);
}
Tensor sub(double c, const Tensor& a) {
  return OpAccess::apply(OpAccess::Op::kRsubC, &a, nullptr, nullptr, c, 0, nullptr);
}
Tensor mul(const Tensor& a, double c) {
  return OpAccess::apply(OpAccess::Op::kMulC, &a, nullptr, nullptr, c, 0, nullptr);
}
Tensor div(const Tensor& a, double c) {
  return OpAccess::apply(OpAccess::Op::kDivC, &a, nullptr, nullptr, c, 0, nullptr);
}
Tensor matmul(const Tensor& w, const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kMatVec, &w, &x, nullptr, 0, 0, nullptr);
}
Tensor affine(const Tensor& w, const Tensor& x, const Tensor& b) {
  return OpAccess::apply(OpAccess::Op::kAffine, &w, &x, &b, 0, 0, nullptr);
}
Tensor sum(const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kSum, &x, nullptr, nullptr, 0, 0, nullptr);
}
Tensor mean(const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kMean, &x, nullptr, nullptr, 0, 0, nullptr);
}
Tensor log(const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kLog, &x, nullptr, nullptr, 0, 0, nullptr);
}
Tensor exp(const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kExp, &x, nullptr, nullptr, 0, 0, nullptr);
}
Tensor neg(const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kNeg, &x, nullptr, nullptr, 0, 0, nullptr);
}
Tensor square(const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kSquare, &x, nullptr, nullptr, 0, 0, nullptr);
}
Tensor swish(const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kSwish, &x, nullptr, nullptr, 0, 0, nullptr);
}
Tensor sigmoid(const Tensor& x) {
  return OpAccess::apply(OpAccess::Op::kSigmoid, &x, nullptr, nullptr, 0, 0, nullptr);
}
Tensor minimum(const Tensor& a, const Tensor& b) {
  return OpAccess::apply(OpAccess::Op::kMin, &a, &b, nullptr, 0, 0, nullptr);
}
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  return OpAccess::apply(OpAccess::Op::kLayerNorm, &x, &gain, &bias, 0, 0, nullptr);
}
Tensor dropout(const Tensor& x, double rate, bool training, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) throw Error("dropout: training mode needs a random stream");
  return OpAccess::apply(OpAccess::Op::kDropout, &x, nullptr, nullptr, rate, 0, rng);
}
Tensor gaussian_log_prob(const Tensor& z) {
  return OpAccess::apply(OpAccess::Op::kGaussLogP, &z, nullptr, nullptr, 0, 0, nullptr);
}
Tensor concat(const Tensor& a, const Tensor& b) {
  return OpAccess::apply(OpAccess::Op::kConcat, &a, &b, nullptr, 0, 0, nullptr);
}
Tensor slice(const Tensor& x, int offset, int length) {
  return OpAccess::apply(OpAccess::Op::kSlice, &x, nullptr, nullptr,
                         static_cast<double>(length), offset, nullptr);
}

}  // namespace meow
