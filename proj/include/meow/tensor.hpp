// Reverse-mode automatic differentiation on 64-bit floats.
//
// A Tape records primitive ops as they execute; backward() walks the record
// once in reverse and returns gradients keyed by parameter storage. Tensors
// are lightweight handles: either owned storage (constants, parameters) or a
// reference into the tape's value arena (intermediates). When no tape is
// active, ops evaluate eagerly and record nothing.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace meow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch, rank violation, or use of a handle from a cleared tape.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An op produced NaN or Inf. Non-finite values never propagate silently.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Deterministic random stream. All stochastic code takes one of these by
// reference; nothing in the library touches a global generator.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double normal();                        // N(0, 1)
  int uniform_int(int n);                 // {0, ..., n-1}

  // Independent stream derived from this seed and a stream index. Does not
  // advance this generator.
  Rng fork(uint64_t stream) const;

 private:
  uint64_t seed_;
  uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Rank 0 (scalar), 1 (vector) or 2 (matrix). Matrices are row-major.
struct Shape {
  int rank = 0;
  int d0 = 1;
  int d1 = 1;

  static Shape scalar() { return {0, 1, 1}; }
  static Shape vec(int n) { return {1, n, 1}; }
  static Shape mat(int rows, int cols) { return {2, rows, cols}; }

  int size() const { return rank == 0 ? 1 : (rank == 1 ? d0 : d0 * d1); }
  bool operator==(const Shape& o) const {
    return rank == o.rank && size() == o.size() &&
           (rank < 2 || (d0 == o.d0 && d1 == o.d1));
  }
  std::string str() const;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  // Owned constants.
  static Tensor scalar(double v);
  static Tensor vec(std::vector<double> v);
  static Tensor vec(std::span<const double> v);
  static Tensor mat(int rows, int cols, std::vector<double> v);
  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double v);

  // Owned storage participating in gradients.
  static Tensor parameter(const Shape& s, std::vector<double> init);

  bool defined() const { return owned_ != nullptr || node_ >= 0; }
  const Shape& shape() const { return shape_; }
  int size() const { return shape_.size(); }
  bool requires_grad() const { return requires_grad_; }

  double item() const;                 // scalar only
  std::vector<double> values() const;  // copy out

  // In-place update of owned storage (optimizer, target blending, tests).
  // Not available for tape intermediates.
  double* mutable_data();
  const double* owned_data() const;

  // Same storage viewed under a different shape. Element count must match.
  Tensor reshaped(const Shape& s) const;

  Tensor clone_detached() const;  // deep copy of current values, no grad

 private:
  friend class Tape;
  friend struct OpAccess;

  std::shared_ptr<std::vector<double>> owned_;
  Shape shape_;
  bool requires_grad_ = false;

  // Set when the handle refers to a tape intermediate.
  Tape* tape_ = nullptr;
  uint64_t epoch_ = 0;
  int node_ = -1;
};

using NamedParam = std::pair<std::string, Tensor>;
using ParamList = std::vector<NamedParam>;

// Gradients from one backward pass, keyed by parameter storage identity.
// Parameters never reached by the loss read back as zeros.
class GradientMap {
 public:
  bool contains(const Tensor& param) const;
  std::vector<double> grad(const Tensor& param) const;
  const std::vector<double>* find(const Tensor& param) const;
  std::vector<double>* find(const Tensor& param);

 private:
  friend class Tape;
  std::unordered_map<const void*, std::vector<double>> by_storage_;
};

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Makes a tape (or none, with nullptr) current for this thread while the
  // scope object lives. Tapes are single-threaded; two threads may each use
  // their own.
  class Scope {
   public:
    explicit Scope(Tape* t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current();

  // Drops every node but keeps arena capacity. Outstanding handles into this
  // tape become invalid.
  void clear();

  size_t node_count() const { return nodes_.size(); }

  // Reverse sweep from a scalar recorded on this tape. Each node is visited
  // at most once; only ancestors of the loss contribute.
  GradientMap backward(const Tensor& loss);

  // Re-executes every recorded op from current leaf values (stochastic ops
  // reuse their saved draws) and compares against the recorded outputs.
  // Returns true when every value reproduces bit-for-bit.
  bool replay_matches();

 private:
  friend struct OpAccess;

  enum class Op : uint8_t {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kAddC,
    kMulC,
    kSubC,   // x - c
    kRsubC,  // c - x
    kDivC,   // x / c
    kMatVec,
    kAffine,
    kSum,
    kMean,
    kLog,
    kExp,
    kNeg,
    kSquare,
    kSwish,
    kSigmoid,
    kMin,
    kLayerNorm,
    kDropout,
    kGaussLogP,
    kConcat,
    kSlice,
  };

  struct Node {
    Op op;
    bool requires_grad = false;
    int in0 = -1, in1 = -1, in2 = -1;
    size_t out_off = 0;
    size_t saved_off = 0;
    int saved_len = 0;
    int aux = 0;      // slice offset
    double c = 0.0;   // scalar operand / dropout rate
    Shape shape;
    const std::vector<double>* leaf_src = nullptr;  // leaves only
  };

  static const char* op_name(Op op);

  int node_for(const Tensor& t);  // registers owned tensors as leaves
  int record(Op op, const Shape& shape, int in0, int in1, int in2, double c,
             int aux, int saved_len, bool requires_grad);
  std::span<double> out_span(const Node& n);
  std::span<const double> out_span(const Node& n) const;
  std::span<double> saved_span(const Node& n);
  std::span<const double> saved_span(const Node& n) const;

  void forward_node(size_t idx, double* out, bool fresh_saved, Rng* rng);
  void backward_node(size_t idx, const double* adj,
                     const std::function<double*(int)>& adj_of);

  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<double> saved_;
  std::vector<double> adj_;
  std::unordered_map<const void*, int> leaf_ids_;
  // Shared ownership of every registered leaf. Keying leaf_ids_ by storage
  // address is only sound while the storage cannot be freed and reallocated
  // at the same address mid-epoch.
  std::vector<std::shared_ptr<const std::vector<double>>> leaf_keepalive_;
  uint64_t epoch_;
};

// Elementwise binary ops. Operands must share a shape, or one of them may be
// rank 0 and broadcasts against the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Fused constant variants.
Tensor add(const Tensor& a, double c);
Tensor sub(const Tensor& a, double c);
Tensor sub(double c, const Tensor& a);
Tensor mul(const Tensor& a, double c);
Tensor div(const Tensor& a, double c);

// matmul(W, x): (m x n) row-major matrix times length-n vector.
Tensor matmul(const Tensor& w, const Tensor& x);
// affine(W, x, b) = matmul(W, x) + b, recorded as one op.
Tensor affine(const Tensor& w, const Tensor& x, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor square(const Tensor& x);
Tensor swish(const Tensor& x);    // x * sigmoid(x)
Tensor sigmoid(const Tensor& x);

// Elementwise minimum. Gradient routes to the selected operand; on a tie the
// first operand is selected.
Tensor minimum(const Tensor& a, const Tensor& b);

// Normalizes a vector to zero mean and unit variance (epsilon 1e-5), then
// applies elementwise gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Inverted dropout. Training mode zeroes each element with probability rate
// and scales survivors by 1/(1-rate); the drawn mask is part of the record,
// so replay and backward reuse it. Eval mode is the identity.
Tensor dropout(const Tensor& x, double rate, bool training, Rng* rng);

// Log density of a standard normal: -||z||^2 / 2 - (d/2) log(2 pi).
Tensor gaussian_log_prob(const Tensor& z);

Tensor concat(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& x, int offset, int length);

}  // namespace meow
