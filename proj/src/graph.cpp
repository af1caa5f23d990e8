#include "patchsim/graph.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "patchsim/parallel.hpp"

namespace patchsim::diffgrid {

namespace {

constexpr double kBceEps = 1e-7;

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_finite(const Grid& g, NodeId id) {
  if (!g.all_finite()) {
    throw GraphError("non-finite value produced at node " + std::to_string(id),
                     id);
  }
}

struct ConvDims {
  int ci, h, w, co, k, stride, pad, ho, wo;
};

ConvDims conv_dims(const Node& n, const Grid& in, const Grid& kernel) {
  ConvDims d;
  d.ci = static_cast<int>(in.shape[0]);
  d.h = static_cast<int>(in.shape[1]);
  d.w = static_cast<int>(in.shape[2]);
  d.co = static_cast<int>(kernel.shape[0]);
  d.k = static_cast<int>(kernel.shape[2]);
  d.stride = n.i0;
  d.pad = n.i1;
  d.ho = static_cast<int>(n.shape[1]);
  d.wo = static_cast<int>(n.shape[2]);
  return d;
}

// Stride-1 forward: for each kernel tap, an axpy over contiguous rows.
void conv2d_forward(const ConvDims& d, const double* in, const double* w,
                    double* out) {
  if (d.stride == 1) {
    parallel_for(static_cast<std::size_t>(d.co), [&](std::size_t lo,
                                                     std::size_t hi) {
      for (std::size_t co = lo; co < hi; ++co) {
        double* outc = out + co * d.ho * d.wo;
        std::fill(outc, outc + d.ho * d.wo, 0.0);
        for (int ci = 0; ci < d.ci; ++ci) {
          for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
              const double wv =
                  w[((co * d.ci + ci) * d.k + ky) * d.k + kx];
              if (wv == 0.0) continue;
              const int oy_lo = std::max(0, d.pad - ky);
              const int oy_hi = std::min(d.ho, d.h + d.pad - ky);
              const int ox_lo = std::max(0, d.pad - kx);
              const int ox_hi = std::min(d.wo, d.w + d.pad - kx);
              for (int oy = oy_lo; oy < oy_hi; ++oy) {
                const double* irow =
                    in + (ci * d.h + oy + ky - d.pad) * d.w + kx - d.pad;
                double* orow = outc + oy * d.wo;
                for (int ox = ox_lo; ox < ox_hi; ++ox) {
                  orow[ox] += wv * irow[ox];
                }
              }
            }
          }
        }
      }
    });
    return;
  }
  // Generic stride path.
  for (int co = 0; co < d.co; ++co) {
    for (int oy = 0; oy < d.ho; ++oy) {
      for (int ox = 0; ox < d.wo; ++ox) {
        double acc = 0.0;
        for (int ci = 0; ci < d.ci; ++ci) {
          for (int ky = 0; ky < d.k; ++ky) {
            const int iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.h) continue;
            for (int kx = 0; kx < d.k; ++kx) {
              const int ix = ox * d.stride + kx - d.pad;
              if (ix < 0 || ix >= d.w) continue;
              acc += in[(ci * d.h + iy) * d.w + ix] *
                     w[((co * d.ci + ci) * d.k + ky) * d.k + kx];
            }
          }
        }
        out[(co * d.ho + oy) * d.wo + ox] = acc;
      }
    }
  }
}

void conv2d_backward_input(const ConvDims& d, const double* w,
                           const double* dout, double* din) {
  if (d.stride == 1) {
    parallel_for(static_cast<std::size_t>(d.ci), [&](std::size_t lo,
                                                     std::size_t hi) {
      for (std::size_t ci = lo; ci < hi; ++ci) {
        double* dinc = din + ci * d.h * d.w;
        std::fill(dinc, dinc + d.h * d.w, 0.0);
        for (int co = 0; co < d.co; ++co) {
          for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
              const double wv = w[((co * d.ci + ci) * d.k + ky) * d.k + kx];
              if (wv == 0.0) continue;
              const int oy_lo = std::max(0, d.pad - ky);
              const int oy_hi = std::min(d.ho, d.h + d.pad - ky);
              const int ox_lo = std::max(0, d.pad - kx);
              const int ox_hi = std::min(d.wo, d.w + d.pad - kx);
              for (int oy = oy_lo; oy < oy_hi; ++oy) {
                double* drow =
                    dinc + (oy + ky - d.pad) * d.w + kx - d.pad;
                const double* orow = dout + (co * d.ho + oy) * d.wo;
                for (int ox = ox_lo; ox < ox_hi; ++ox) {
                  drow[ox] += wv * orow[ox];
                }
              }
            }
          }
        }
      }
    });
    return;
  }
  std::fill(din, din + d.ci * d.h * d.w, 0.0);
  for (int co = 0; co < d.co; ++co) {
    for (int oy = 0; oy < d.ho; ++oy) {
      for (int ox = 0; ox < d.wo; ++ox) {
        const double g = dout[(co * d.ho + oy) * d.wo + ox];
        if (g == 0.0) continue;
        for (int ci = 0; ci < d.ci; ++ci) {
          for (int ky = 0; ky < d.k; ++ky) {
            const int iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.h) continue;
            for (int kx = 0; kx < d.k; ++kx) {
              const int ix = ox * d.stride + kx - d.pad;
              if (ix < 0 || ix >= d.w) continue;
              din[(ci * d.h + iy) * d.w + ix] +=
                  g * w[((co * d.ci + ci) * d.k + ky) * d.k + kx];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_kernel(const ConvDims& d, const double* in,
                            const double* dout, double* dw) {
  if (d.stride == 1) {
    parallel_for(static_cast<std::size_t>(d.co), [&](std::size_t lo,
                                                     std::size_t hi) {
      for (std::size_t co = lo; co < hi; ++co) {
        for (int ci = 0; ci < d.ci; ++ci) {
          for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
              const int oy_lo = std::max(0, d.pad - ky);
              const int oy_hi = std::min(d.ho, d.h + d.pad - ky);
              const int ox_lo = std::max(0, d.pad - kx);
              const int ox_hi = std::min(d.wo, d.w + d.pad - kx);
              double acc = 0.0;
              for (int oy = oy_lo; oy < oy_hi; ++oy) {
                const double* irow =
                    in + (ci * d.h + oy + ky - d.pad) * d.w + kx - d.pad;
                const double* orow = dout + (co * d.ho + oy) * d.wo;
                for (int ox = ox_lo; ox < ox_hi; ++ox) {
                  acc += irow[ox] * orow[ox];
                }
              }
              dw[((co * d.ci + ci) * d.k + ky) * d.k + kx] = acc;
            }
          }
        }
      }
    });
    return;
  }
  std::fill(dw, dw + d.co * d.ci * d.k * d.k, 0.0);
  for (int co = 0; co < d.co; ++co) {
    for (int oy = 0; oy < d.ho; ++oy) {
      for (int ox = 0; ox < d.wo; ++ox) {
        const double g = dout[(co * d.ho + oy) * d.wo + ox];
        if (g == 0.0) continue;
        for (int ci = 0; ci < d.ci; ++ci) {
          for (int ky = 0; ky < d.k; ++ky) {
            const int iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.h) continue;
            for (int kx = 0; kx < d.k; ++kx) {
              const int ix = ox * d.stride + kx - d.pad;
              if (ix < 0 || ix >= d.w) continue;
              dw[((co * d.ci + ci) * d.k + ky) * d.k + kx] +=
                  g * in[(ci * d.h + iy) * d.w + ix];
            }
          }
        }
      }
    }
  }
}

struct BilinearTap {
  int x0, y0;
  double fx, fy;
  bool clamped_x, clamped_y;
};

BilinearTap bilinear_tap(double x, double y, int w, int h) {
  BilinearTap t{};
  t.clamped_x = x < 0.0 || x > static_cast<double>(w - 1);
  t.clamped_y = y < 0.0 || y > static_cast<double>(h - 1);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  t.x0 = std::min(static_cast<int>(x), w - 2);
  t.y0 = std::min(static_cast<int>(y), h - 2);
  if (w == 1) t.x0 = 0;
  if (h == 1) t.y0 = 0;
  t.fx = x - t.x0;
  t.fy = y - t.y0;
  return t;
}

}  // namespace

NodeId Graph::push(Node n) {
  for (int p : n.parents) {
    if (p < 0 || p >= static_cast<int>(nodes_.size())) {
      throw GraphError("parent id out of order: " + std::to_string(p));
    }
  }
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

NodeId Graph::input(const std::string& name, std::vector<std::size_t> shape,
                    bool trainable) {
  for (const Node& n : nodes_) {
    if (n.op == Op::kInput && n.name == name) {
      throw GraphError("duplicate input name: " + name);
    }
  }
  Node n;
  n.op = Op::kInput;
  n.shape = std::move(shape);
  Grid::count(n.shape);  // validates nonzero dims
  n.name = name;
  n.trainable = trainable;
  return push(std::move(n));
}

NodeId Graph::relu(NodeId x) {
  Node n;
  n.op = Op::kRelu;
  n.parents = {x};
  n.shape = shape_of(x);
  return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId x) {
  Node n;
  n.op = Op::kSigmoid;
  n.parents = {x};
  n.shape = shape_of(x);
  return push(std::move(n));
}

NodeId Graph::exp_cap(NodeId x, double cap) {
  if (!(cap > 0.0)) throw GraphError("exp_cap: cap must be positive");
  Node n;
  n.op = Op::kExpCap;
  n.parents = {x};
  n.shape = shape_of(x);
  n.p0 = cap;
  return push(std::move(n));
}

NodeId Graph::sqrt_of(NodeId x) {
  Node n;
  n.op = Op::kSqrt;
  n.parents = {x};
  n.shape = shape_of(x);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  if (shape_of(a) != shape_of(b)) {
    throw GraphError("add: shape mismatch " + shape_str(shape_of(a)) + " vs " +
                     shape_str(shape_of(b)));
  }
  Node n;
  n.op = Op::kAdd;
  n.parents = {a, b};
  n.shape = shape_of(a);
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  if (shape_of(a) != shape_of(b)) {
    throw GraphError("mul: shape mismatch " + shape_str(shape_of(a)) + " vs " +
                     shape_str(shape_of(b)));
  }
  Node n;
  n.op = Op::kMul;
  n.parents = {a, b};
  n.shape = shape_of(a);
  return push(std::move(n));
}

NodeId Graph::affine(NodeId x, double a, double b) {
  Node n;
  n.op = Op::kAffine;
  n.parents = {x};
  n.shape = shape_of(x);
  n.p0 = a;
  n.p1 = b;
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId w, int stride, int pad) {
  const auto& xs = shape_of(x);
  const auto& ws = shape_of(w);
  if (xs.size() != 3 || ws.size() != 4) {
    throw GraphError("conv2d: expects input {C,H,W} and kernel {Co,Ci,k,k}");
  }
  if (ws[1] != xs[0]) throw GraphError("conv2d: channel mismatch");
  if (ws[2] != ws[3]) throw GraphError("conv2d: kernel must be square");
  const int k = static_cast<int>(ws[2]);
  if (k % 2 == 0) throw GraphError("conv2d: kernel size must be odd");
  if (stride < 1) throw GraphError("conv2d: stride must be >= 1");
  if (pad < 0) throw GraphError("conv2d: negative padding");
  const int h = static_cast<int>(xs[1]);
  const int wdt = static_cast<int>(xs[2]);
  if (k > h + 2 * pad || k > wdt + 2 * pad) {
    throw GraphError("conv2d: kernel larger than padded input");
  }
  Node n;
  n.op = Op::kConv2d;
  n.parents = {x, w};
  n.i0 = stride;
  n.i1 = pad;
  n.shape = {ws[0], static_cast<std::size_t>((h + 2 * pad - k) / stride + 1),
             static_cast<std::size_t>((wdt + 2 * pad - k) / stride + 1)};
  return push(std::move(n));
}

NodeId Graph::bias_channels(NodeId x, NodeId b) {
  const auto& xs = shape_of(x);
  const auto& bs = shape_of(b);
  if (xs.size() != 3 || bs.size() != 1 || bs[0] != xs[0]) {
    throw GraphError("bias_channels: expects {C,H,W} and {C}");
  }
  Node n;
  n.op = Op::kBiasChannels;
  n.parents = {x, b};
  n.shape = xs;
  return push(std::move(n));
}

NodeId Graph::maxpool2(NodeId x) {
  const auto& xs = shape_of(x);
  if (xs.size() != 3 || xs[1] % 2 != 0 || xs[2] % 2 != 0) {
    throw GraphError("maxpool2: expects {C,H,W} with even H and W");
  }
  Node n;
  n.op = Op::kMaxPool2;
  n.parents = {x};
  n.shape = {xs[0], xs[1] / 2, xs[2] / 2};
  return push(std::move(n));
}

NodeId Graph::slice_channels(NodeId x, int c0, int c1) {
  const auto& xs = shape_of(x);
  if (xs.size() != 3) throw GraphError("slice_channels: expects {C,H,W}");
  if (c0 < 0 || c1 <= c0 || c1 > static_cast<int>(xs[0])) {
    throw GraphError("slice_channels: bad channel range");
  }
  Node n;
  n.op = Op::kSliceChannels;
  n.parents = {x};
  n.i0 = c0;
  n.i1 = c1;
  n.shape = {static_cast<std::size_t>(c1 - c0), xs[1], xs[2]};
  return push(std::move(n));
}

NodeId Graph::hwc_to_chw(NodeId x) {
  const auto& xs = shape_of(x);
  if (xs.size() != 3) throw GraphError("hwc_to_chw: expects rank 3");
  Node n;
  n.op = Op::kHwcToChw;
  n.parents = {x};
  n.shape = {xs[2], xs[0], xs[1]};
  return push(std::move(n));
}

NodeId Graph::chw_to_hwc(NodeId x) {
  const auto& xs = shape_of(x);
  if (xs.size() != 3) throw GraphError("chw_to_hwc: expects rank 3");
  Node n;
  n.op = Op::kChwToHwc;
  n.parents = {x};
  n.shape = {xs[1], xs[2], xs[0]};
  return push(std::move(n));
}

NodeId Graph::bilinear_sample(NodeId texture, NodeId coords) {
  const auto& ts = shape_of(texture);
  const auto& cs = shape_of(coords);
  if (ts.size() != 3 || ts[2] != 3) {
    throw GraphError("bilinear_sample: texture must be {H,W,3}");
  }
  if (cs.size() != 2 || cs[1] != 2) {
    throw GraphError("bilinear_sample: coords must be {N,2}");
  }
  Node n;
  n.op = Op::kBilinearSample;
  n.parents = {texture, coords};
  n.shape = {cs[0], 3};
  return push(std::move(n));
}

NodeId Graph::composite(NodeId base, NodeId samples, std::vector<int> pixels) {
  const auto& bs = shape_of(base);
  const auto& ss = shape_of(samples);
  if (bs.size() != 3 || bs[2] != 3) {
    throw GraphError("composite: base must be {H,W,3}");
  }
  if (ss.size() != 2 || ss[1] != 3 || ss[0] != pixels.size()) {
    throw GraphError("composite: samples must be {N,3} matching pixel list");
  }
  const int npix = static_cast<int>(bs[0] * bs[1]);
  std::unordered_set<int> seen;
  seen.reserve(pixels.size());
  for (int p : pixels) {
    if (p < 0 || p >= npix) throw GraphError("composite: pixel id out of range");
    if (!seen.insert(p).second) {
      throw GraphError("composite: duplicate pixel id");
    }
  }
  Node n;
  n.op = Op::kComposite;
  n.parents = {base, samples};
  n.shape = bs;
  n.pixels = std::move(pixels);
  return push(std::move(n));
}

NodeId Graph::sum(NodeId x) {
  Node n;
  n.op = Op::kSum;
  n.parents = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::mean(NodeId x) {
  Node n;
  n.op = Op::kMean;
  n.parents = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::squared_error(NodeId a, NodeId b) {
  if (shape_of(a) != shape_of(b)) {
    throw GraphError("squared_error: shape mismatch");
  }
  Node n;
  n.op = Op::kSquaredError;
  n.parents = {a, b};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::bce(NodeId probs, NodeId targets) {
  if (shape_of(probs) != shape_of(targets)) {
    throw GraphError("bce: shape mismatch");
  }
  Node n;
  n.op = Op::kBce;
  n.parents = {probs, targets};
  n.shape = shape_of(probs);
  return push(std::move(n));
}

NodeId Graph::softmax_xent(NodeId logits, int target) {
  const auto& ls = shape_of(logits);
  if (ls.size() != 1) throw GraphError("softmax_xent: logits must be rank 1");
  if (target < 0 || target >= static_cast<int>(ls[0])) {
    throw GraphError("softmax_xent: target out of range");
  }
  Node n;
  n.op = Op::kSoftmaxXentVec;
  n.parents = {logits};
  n.i0 = target;
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::softmax_xent_map(NodeId logits, NodeId onehot) {
  const auto& ls = shape_of(logits);
  if (ls.size() != 3) throw GraphError("softmax_xent_map: expects {C,H,W}");
  if (shape_of(onehot) != ls) throw GraphError("softmax_xent_map: shape mismatch");
  Node n;
  n.op = Op::kSoftmaxXentMap;
  n.parents = {logits, onehot};
  n.shape = {ls[1], ls[2]};
  return push(std::move(n));
}

EvalResult Graph::eval(const Bindings& bindings) const {
  EvalResult res;
  res.values.resize(nodes_.size());
  for (int id = 0; id < static_cast<int>(nodes_.size()); ++id) {
    const Node& n = nodes_[id];
    Grid& out = res.values[id];
    switch (n.op) {
      case Op::kInput: {
        auto it = bindings.find(n.name);
        if (it == bindings.end()) {
          throw GraphError("missing binding for input '" + n.name +
                               "' at node " + std::to_string(id),
                           id);
        }
        if (it->second.shape != n.shape) {
          throw GraphError("binding shape mismatch for '" + n.name + "': " +
                               shape_str(it->second.shape) + " vs declared " +
                               shape_str(n.shape) + " at node " +
                               std::to_string(id),
                           id);
        }
        out = it->second;
        break;
      }
      case Op::kRelu: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
        }
        break;
      }
      case Op::kSigmoid: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          out.data[i] = stable_sigmoid(x.data[i]);
        }
        break;
      }
      case Op::kExpCap: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          out.data[i] = std::min(std::exp(x.data[i]), n.p0);
        }
        break;
      }
      case Op::kSqrt: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          out.data[i] = std::sqrt(x.data[i]);
        }
        break;
      }
      case Op::kAdd: {
        const Grid& a = res.values[n.parents[0]];
        const Grid& b = res.values[n.parents[1]];
        out = Grid(n.shape);
        for (std::size_t i = 0; i < a.numel(); ++i) {
          out.data[i] = a.data[i] + b.data[i];
        }
        break;
      }
      case Op::kMul: {
        const Grid& a = res.values[n.parents[0]];
        const Grid& b = res.values[n.parents[1]];
        out = Grid(n.shape);
        for (std::size_t i = 0; i < a.numel(); ++i) {
          out.data[i] = a.data[i] * b.data[i];
        }
        break;
      }
      case Op::kAffine: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          out.data[i] = n.p0 * x.data[i] + n.p1;
        }
        break;
      }
      case Op::kConv2d: {
        const Grid& x = res.values[n.parents[0]];
        const Grid& w = res.values[n.parents[1]];
        out = Grid(n.shape);
        conv2d_forward(conv_dims(n, x, w), x.data.data(), w.data.data(),
                       out.data.data());
        break;
      }
      case Op::kBiasChannels: {
        const Grid& x = res.values[n.parents[0]];
        const Grid& b = res.values[n.parents[1]];
        out = Grid(n.shape);
        const std::size_t hw = n.shape[1] * n.shape[2];
        for (std::size_t c = 0; c < n.shape[0]; ++c) {
          const double bias = b.data[c];
          for (std::size_t i = 0; i < hw; ++i) {
            out.data[c * hw + i] = x.data[c * hw + i] + bias;
          }
        }
        break;
      }
      case Op::kMaxPool2: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        const std::size_t c = n.shape[0], ho = n.shape[1], wo = n.shape[2];
        const std::size_t h = x.shape[1], w = x.shape[2];
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const double* base = &x.data[(ci * h + 2 * oy) * w + 2 * ox];
              double m = base[0];
              m = std::max(m, base[1]);
              m = std::max(m, base[w]);
              m = std::max(m, base[w + 1]);
              out.data[(ci * ho + oy) * wo + ox] = m;
            }
          }
        }
        break;
      }
      case Op::kSliceChannels: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        const std::size_t hw = n.shape[1] * n.shape[2];
        for (int c = n.i0; c < n.i1; ++c) {
          std::copy_n(&x.data[static_cast<std::size_t>(c) * hw], hw,
                      &out.data[static_cast<std::size_t>(c - n.i0) * hw]);
        }
        break;
      }
      case Op::kHwcToChw: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        const std::size_t h = x.shape[0], w = x.shape[1], c = x.shape[2];
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t xx = 0; xx < w; ++xx) {
            for (std::size_t cc = 0; cc < c; ++cc) {
              out.data[(cc * h + y) * w + xx] = x.data[(y * w + xx) * c + cc];
            }
          }
        }
        break;
      }
      case Op::kChwToHwc: {
        const Grid& x = res.values[n.parents[0]];
        out = Grid(n.shape);
        const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
        for (std::size_t cc = 0; cc < c; ++cc) {
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xx = 0; xx < w; ++xx) {
              out.data[(y * w + xx) * c + cc] = x.data[(cc * h + y) * w + xx];
            }
          }
        }
        break;
      }
      case Op::kBilinearSample: {
        const Grid& tex = res.values[n.parents[0]];
        const Grid& coords = res.values[n.parents[1]];
        out = Grid(n.shape);
        const int w = static_cast<int>(tex.shape[1]);
        const int h = static_cast<int>(tex.shape[0]);
        const std::size_t count = coords.shape[0];
        for (std::size_t i = 0; i < count; ++i) {
          const BilinearTap t =
              bilinear_tap(coords.data[2 * i], coords.data[2 * i + 1], w, h);
          if (t.clamped_x || t.clamped_y) ++res.bilinear_clamps;
          const int x1 = std::min(t.x0 + 1, w - 1);
          const int y1 = std::min(t.y0 + 1, h - 1);
          for (int cc = 0; cc < 3; ++cc) {
            const double v00 = tex.data[(t.y0 * w + t.x0) * 3 + cc];
            const double v01 = tex.data[(t.y0 * w + x1) * 3 + cc];
            const double v10 = tex.data[(y1 * w + t.x0) * 3 + cc];
            const double v11 = tex.data[(y1 * w + x1) * 3 + cc];
            out.data[i * 3 + cc] =
                (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) +
                t.fy * ((1 - t.fx) * v10 + t.fx * v11);
          }
        }
        break;
      }
      case Op::kComposite: {
        const Grid& base = res.values[n.parents[0]];
        const Grid& samples = res.values[n.parents[1]];
        out = base;
        for (std::size_t i = 0; i < n.pixels.size(); ++i) {
          const std::size_t p = static_cast<std::size_t>(n.pixels[i]);
          out.data[p * 3 + 0] = samples.data[i * 3 + 0];
          out.data[p * 3 + 1] = samples.data[i * 3 + 1];
          out.data[p * 3 + 2] = samples.data[i * 3 + 2];
        }
        break;
      }
      case Op::kSum: {
        const Grid& x = res.values[n.parents[0]];
        double acc = 0.0;
        for (double v : x.data) acc += v;
        out = Grid::scalar(acc);
        break;
      }
      case Op::kMean: {
        const Grid& x = res.values[n.parents[0]];
        double acc = 0.0;
        for (double v : x.data) acc += v;
        out = Grid::scalar(acc / static_cast<double>(x.numel()));
        break;
      }
      case Op::kSquaredError: {
        const Grid& a = res.values[n.parents[0]];
        const Grid& b = res.values[n.parents[1]];
        double acc = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) {
          const double d = a.data[i] - b.data[i];
          acc += d * d;
        }
        out = Grid::scalar(acc);
        break;
      }
      case Op::kBce: {
        const Grid& p = res.values[n.parents[0]];
        const Grid& t = res.values[n.parents[1]];
        out = Grid(n.shape);
        for (std::size_t i = 0; i < p.numel(); ++i) {
          const double pc = std::clamp(p.data[i], kBceEps, 1.0 - kBceEps);
          out.data[i] =
              -(t.data[i] * std::log(pc) + (1.0 - t.data[i]) * std::log(1.0 - pc));
        }
        break;
      }
      case Op::kSoftmaxXentVec: {
        const Grid& l = res.values[n.parents[0]];
        double m = l.data[0];
        for (double v : l.data) m = std::max(m, v);
        double lse = 0.0;
        for (double v : l.data) lse += std::exp(v - m);
        lse = m + std::log(lse);
        out = Grid::scalar(lse - l.data[n.i0]);
        break;
      }
      case Op::kSoftmaxXentMap: {
        const Grid& l = res.values[n.parents[0]];
        const Grid& oh = res.values[n.parents[1]];
        out = Grid(n.shape);
        const std::size_t c = l.shape[0], hw = l.shape[1] * l.shape[2];
        for (std::size_t i = 0; i < hw; ++i) {
          double m = l.data[i];
          for (std::size_t cc = 1; cc < c; ++cc) {
            m = std::max(m, l.data[cc * hw + i]);
          }
          double lse = 0.0, dot = 0.0;
          for (std::size_t cc = 0; cc < c; ++cc) {
            lse += std::exp(l.data[cc * hw + i] - m);
            dot += oh.data[cc * hw + i] * l.data[cc * hw + i];
          }
          out.data[i] = m + std::log(lse) - dot;
        }
        break;
      }
    }
    check_finite(out, id);
  }
  return res;
}

GradResult Graph::grad(NodeId scalar_output, const std::set<std::string>& wrt,
                       const Bindings& bindings) const {
  if (scalar_output < 0 || scalar_output >= size()) {
    throw GraphError("grad: bad output node id");
  }
  if (shape_of(scalar_output) != std::vector<std::size_t>{1}) {
    throw GraphError("grad: output node " + std::to_string(scalar_output) +
                         " is not scalar",
                     scalar_output);
  }
  // wrt leaves must exist and be trainable.
  std::map<std::string, NodeId> leaf_ids;
  for (int id = 0; id < size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::kInput && wrt.count(n.name)) {
      if (!n.trainable) {
        throw GraphError("grad: leaf '" + n.name + "' is not trainable", id);
      }
      leaf_ids[n.name] = id;
    }
  }
  for (const std::string& name : wrt) {
    if (!leaf_ids.count(name)) {
      throw GraphError("grad: unknown leaf '" + name + "'");
    }
  }

  EvalResult fwd = eval(bindings);

  // needed = descendants of wrt leaves intersected with ancestors of output.
  std::vector<char> from_leaf(nodes_.size(), 0);
  for (const auto& [name, id] : leaf_ids) from_leaf[id] = 1;
  for (int id = 0; id < size(); ++id) {
    for (int p : nodes_[id].parents) {
      if (from_leaf[p]) from_leaf[id] = 1;
    }
  }
  std::vector<char> to_output(nodes_.size(), 0);
  to_output[scalar_output] = 1;
  for (int id = scalar_output; id >= 0; --id) {
    if (!to_output[id]) continue;
    for (int p : nodes_[id].parents) to_output[p] = 1;
  }
  std::vector<char> needed(nodes_.size(), 0);
  for (int id = 0; id < size(); ++id) needed[id] = from_leaf[id] && to_output[id];

  std::vector<Grid> adj(nodes_.size());
  auto touch = [&](NodeId id) -> Grid& {
    if (adj[id].data.empty()) adj[id] = Grid(nodes_[id].shape);
    return adj[id];
  };
  touch(scalar_output).data[0] = 1.0;

  for (int id = scalar_output; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (!needed[id] || adj[id].data.empty()) continue;
    const Grid& up = adj[id];
    switch (n.op) {
      case Op::kInput:
        break;
      case Op::kRelu: {
        const Grid& x = fwd.values[n.parents[0]];
        if (!needed[n.parents[0]]) break;
        Grid& d = touch(n.parents[0]);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          if (x.data[i] > 0.0) d.data[i] += up.data[i];
        }
        break;
      }
      case Op::kSigmoid: {
        if (!needed[n.parents[0]]) break;
        const Grid& y = fwd.values[id];
        Grid& d = touch(n.parents[0]);
        for (std::size_t i = 0; i < y.numel(); ++i) {
          d.data[i] += up.data[i] * y.data[i] * (1.0 - y.data[i]);
        }
        break;
      }
      case Op::kExpCap: {
        if (!needed[n.parents[0]]) break;
        const Grid& x = fwd.values[n.parents[0]];
        Grid& d = touch(n.parents[0]);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          const double e = std::exp(x.data[i]);
          if (e < n.p0) d.data[i] += up.data[i] * e;
        }
        break;
      }
      case Op::kSqrt: {
        if (!needed[n.parents[0]]) break;
        const Grid& x = fwd.values[n.parents[0]];
        Grid& d = touch(n.parents[0]);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          // subgradient 0 at x == 0 (valid for the L2-norm use)
          if (x.data[i] > 0.0) {
            d.data[i] += up.data[i] * 0.5 / std::sqrt(x.data[i]);
          }
        }
        break;
      }
      case Op::kAdd: {
        for (int side = 0; side < 2; ++side) {
          if (!needed[n.parents[side]]) continue;
          Grid& d = touch(n.parents[side]);
          for (std::size_t i = 0; i < up.numel(); ++i) d.data[i] += up.data[i];
        }
        break;
      }
      case Op::kMul: {
        const Grid& a = fwd.values[n.parents[0]];
        const Grid& b = fwd.values[n.parents[1]];
        if (needed[n.parents[0]]) {
          Grid& d = touch(n.parents[0]);
          for (std::size_t i = 0; i < up.numel(); ++i) {
            d.data[i] += up.data[i] * b.data[i];
          }
        }
        if (needed[n.parents[1]]) {
          Grid& d = touch(n.parents[1]);
          for (std::size_t i = 0; i < up.numel(); ++i) {
            d.data[i] += up.data[i] * a.data[i];
          }
        }
        break;
      }
      case Op::kAffine: {
        if (!needed[n.parents[0]]) break;
        Grid& d = touch(n.parents[0]);
        for (std::size_t i = 0; i < up.numel(); ++i) {
          d.data[i] += up.data[i] * n.p0;
        }
        break;
      }
      case Op::kConv2d: {
        const Grid& x = fwd.values[n.parents[0]];
        const Grid& w = fwd.values[n.parents[1]];
        const ConvDims dims = conv_dims(n, x, w);
        if (needed[n.parents[0]]) {
          Grid din(x.shape);
          conv2d_backward_input(dims, w.data.data(), up.data.data(),
                                din.data.data());
          Grid& d = touch(n.parents[0]);
          for (std::size_t i = 0; i < d.numel(); ++i) d.data[i] += din.data[i];
        }
        if (needed[n.parents[1]]) {
          Grid dw(w.shape);
          conv2d_backward_kernel(dims, x.data.data(), up.data.data(),
                                 dw.data.data());
          Grid& d = touch(n.parents[1]);
          for (std::size_t i = 0; i < d.numel(); ++i) d.data[i] += dw.data[i];
        }
        break;
      }
      case Op::kBiasChannels: {
        const std::size_t hw = n.shape[1] * n.shape[2];
        if (needed[n.parents[0]]) {
          Grid& d = touch(n.parents[0]);
          for (std::size_t i = 0; i < up.numel(); ++i) d.data[i] += up.data[i];
        }
        if (needed[n.parents[1]]) {
          Grid& d = touch(n.parents[1]);
          for (std::size_t c = 0; c < n.shape[0]; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += up.data[c * hw + i];
            d.data[c] += acc;
          }
        }
        break;
      }
      case Op::kMaxPool2: {
        if (!needed[n.parents[0]]) break;
        const Grid& x = fwd.values[n.parents[0]];
        Grid& d = touch(n.parents[0]);
        const std::size_t c = n.shape[0], ho = n.shape[1], wo = n.shape[2];
        const std::size_t h = x.shape[1], w = x.shape[2];
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::size_t base = (ci * h + 2 * oy) * w + 2 * ox;
              const std::size_t idx[4] = {base, base + 1, base + w,
                                          base + w + 1};
              std::size_t best = idx[0];
              for (int k = 1; k < 4; ++k) {
                if (x.data[idx[k]] > x.data[best]) best = idx[k];
              }
              d.data[best] += up.data[(ci * ho + oy) * wo + ox];
            }
          }
        }
        break;
      }
      case Op::kSliceChannels: {
        if (!needed[n.parents[0]]) break;
        Grid& d = touch(n.parents[0]);
        const std::size_t hw = n.shape[1] * n.shape[2];
        for (int cc = n.i0; cc < n.i1; ++cc) {
          for (std::size_t i = 0; i < hw; ++i) {
            d.data[static_cast<std::size_t>(cc) * hw + i] +=
                up.data[static_cast<std::size_t>(cc - n.i0) * hw + i];
          }
        }
        break;
      }
      case Op::kHwcToChw: {
        if (!needed[n.parents[0]]) break;
        Grid& d = touch(n.parents[0]);
        const std::size_t c = n.shape[0], h = n.shape[1], w = n.shape[2];
        for (std::size_t cc = 0; cc < c; ++cc) {
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xx = 0; xx < w; ++xx) {
              d.data[(y * w + xx) * c + cc] += up.data[(cc * h + y) * w + xx];
            }
          }
        }
        break;
      }
      case Op::kChwToHwc: {
        if (!needed[n.parents[0]]) break;
        Grid& d = touch(n.parents[0]);
        const std::size_t h = n.shape[0], w = n.shape[1], c = n.shape[2];
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t xx = 0; xx < w; ++xx) {
            for (std::size_t cc = 0; cc < c; ++cc) {
              d.data[(cc * h + y) * w + xx] += up.data[(y * w + xx) * c + cc];
            }
          }
        }
        break;
      }
      case Op::kBilinearSample: {
        const Grid& tex = fwd.values[n.parents[0]];
        const Grid& coords = fwd.values[n.parents[1]];
        const int w = static_cast<int>(tex.shape[1]);
        const int h = static_cast<int>(tex.shape[0]);
        const std::size_t count = coords.shape[0];
        if (needed[n.parents[0]]) {
          Grid& d = touch(n.parents[0]);
          for (std::size_t i = 0; i < count; ++i) {
            const BilinearTap t = bilinear_tap(coords.data[2 * i],
                                               coords.data[2 * i + 1], w, h);
            const int x1 = std::min(t.x0 + 1, w - 1);
            const int y1 = std::min(t.y0 + 1, h - 1);
            for (int cc = 0; cc < 3; ++cc) {
              const double g = up.data[i * 3 + cc];
              d.data[(t.y0 * w + t.x0) * 3 + cc] += g * (1 - t.fx) * (1 - t.fy);
              d.data[(t.y0 * w + x1) * 3 + cc] += g * t.fx * (1 - t.fy);
              d.data[(y1 * w + t.x0) * 3 + cc] += g * (1 - t.fx) * t.fy;
              d.data[(y1 * w + x1) * 3 + cc] += g * t.fx * t.fy;
            }
          }
        }
        if (needed[n.parents[1]]) {
          Grid& d = touch(n.parents[1]);
          for (std::size_t i = 0; i < count; ++i) {
            const BilinearTap t = bilinear_tap(coords.data[2 * i],
                                               coords.data[2 * i + 1], w, h);
            const int x1 = std::min(t.x0 + 1, w - 1);
            const int y1 = std::min(t.y0 + 1, h - 1);
            double gx = 0.0, gy = 0.0;
            for (int cc = 0; cc < 3; ++cc) {
              const double v00 = tex.data[(t.y0 * w + t.x0) * 3 + cc];
              const double v01 = tex.data[(t.y0 * w + x1) * 3 + cc];
              const double v10 = tex.data[(y1 * w + t.x0) * 3 + cc];
              const double v11 = tex.data[(y1 * w + x1) * 3 + cc];
              const double g = up.data[i * 3 + cc];
              gx += g * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
              gy += g * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
            }
            if (!t.clamped_x) d.data[2 * i] += gx;
            if (!t.clamped_y) d.data[2 * i + 1] += gy;
          }
        }
        break;
      }
      case Op::kComposite: {
        if (needed[n.parents[0]]) {
          Grid& d = touch(n.parents[0]);
          Grid masked = up;
          for (int p : n.pixels) {
            masked.data[static_cast<std::size_t>(p) * 3 + 0] = 0.0;
            masked.data[static_cast<std::size_t>(p) * 3 + 1] = 0.0;
            masked.data[static_cast<std::size_t>(p) * 3 + 2] = 0.0;
          }
          for (std::size_t i = 0; i < d.numel(); ++i) d.data[i] += masked.data[i];
        }
        if (needed[n.parents[1]]) {
          Grid& d = touch(n.parents[1]);
          for (std::size_t i = 0; i < n.pixels.size(); ++i) {
            const std::size_t p = static_cast<std::size_t>(n.pixels[i]);
            d.data[i * 3 + 0] += up.data[p * 3 + 0];
            d.data[i * 3 + 1] += up.data[p * 3 + 1];
            d.data[i * 3 + 2] += up.data[p * 3 + 2];
          }
        }
        break;
      }
      case Op::kSum: {
        if (!needed[n.parents[0]]) break;
        Grid& d = touch(n.parents[0]);
        for (std::size_t i = 0; i < d.numel(); ++i) d.data[i] += up.data[0];
        break;
      }
      case Op::kMean: {
        if (!needed[n.parents[0]]) break;
        Grid& d = touch(n.parents[0]);
        const double g = up.data[0] / static_cast<double>(d.numel());
        for (std::size_t i = 0; i < d.numel(); ++i) d.data[i] += g;
        break;
      }
      case Op::kSquaredError: {
        const Grid& a = fwd.values[n.parents[0]];
        const Grid& b = fwd.values[n.parents[1]];
        if (needed[n.parents[0]]) {
          Grid& d = touch(n.parents[0]);
          for (std::size_t i = 0; i < a.numel(); ++i) {
            d.data[i] += up.data[0] * 2.0 * (a.data[i] - b.data[i]);
          }
        }
        if (needed[n.parents[1]]) {
          Grid& d = touch(n.parents[1]);
          for (std::size_t i = 0; i < a.numel(); ++i) {
            d.data[i] -= up.data[0] * 2.0 * (a.data[i] - b.data[i]);
          }
        }
        break;
      }
      case Op::kBce: {
        const Grid& p = fwd.values[n.parents[0]];
        const Grid& t = fwd.values[n.parents[1]];
        if (needed[n.parents[0]]) {
          Grid& d = touch(n.parents[0]);
          for (std::size_t i = 0; i < p.numel(); ++i) {
            if (p.data[i] <= kBceEps || p.data[i] >= 1.0 - kBceEps) continue;
            d.data[i] +=
                up.data[i] * (p.data[i] - t.data[i]) /
                (p.data[i] * (1.0 - p.data[i]));
          }
        }
        if (needed[n.parents[1]]) {
          Grid& d = touch(n.parents[1]);
          for (std::size_t i = 0; i < p.numel(); ++i) {
            const double pc = std::clamp(p.data[i], kBceEps, 1.0 - kBceEps);
            d.data[i] += up.data[i] * (std::log(1.0 - pc) - std::log(pc));
          }
        }
        break;
      }
      case Op::kSoftmaxXentVec: {
        if (!needed[n.parents[0]]) break;
        const Grid& l = fwd.values[n.parents[0]];
        Grid& d = touch(n.parents[0]);
        double m = l.data[0];
        for (double v : l.data) m = std::max(m, v);
        double z = 0.0;
        for (double v : l.data) z += std::exp(v - m);
        for (std::size_t i = 0; i < l.numel(); ++i) {
          const double soft = std::exp(l.data[i] - m) / z;
          const double one = static_cast<int>(i) == n.i0 ? 1.0 : 0.0;
          d.data[i] += up.data[0] * (soft - one);
        }
        break;
      }
      case Op::kSoftmaxXentMap: {
        const Grid& l = fwd.values[n.parents[0]];
        const Grid& oh = fwd.values[n.parents[1]];
        const std::size_t c = l.shape[0], hw = l.shape[1] * l.shape[2];
        if (needed[n.parents[0]]) {
          Grid& d = touch(n.parents[0]);
          for (std::size_t i = 0; i < hw; ++i) {
            double m = l.data[i];
            for (std::size_t cc = 1; cc < c; ++cc) {
              m = std::max(m, l.data[cc * hw + i]);
            }
            double z = 0.0;
            for (std::size_t cc = 0; cc < c; ++cc) {
              z += std::exp(l.data[cc * hw + i] - m);
            }
            for (std::size_t cc = 0; cc < c; ++cc) {
              const double soft = std::exp(l.data[cc * hw + i] - m) / z;
              d.data[cc * hw + i] +=
                  up.data[i] * (soft - oh.data[cc * hw + i]);
            }
          }
        }
        if (needed[n.parents[1]]) {
          Grid& d = touch(n.parents[1]);
          for (std::size_t i = 0; i < hw; ++i) {
            for (std::size_t cc = 0; cc < c; ++cc) {
              d.data[cc * hw + i] -= up.data[i] * l.data[cc * hw + i];
            }
          }
        }
        break;
      }
    }
  }

  GradResult out;
  out.scalar_value = fwd.values[scalar_output].data[0];
  out.bilinear_clamps = fwd.bilinear_clamps;
  for (const auto& [name, id] : leaf_ids) {
    if (adj[id].data.empty()) {
      out.leaf_grads[name] = Grid(nodes_[id].shape);
    } else {
      check_finite(adj[id], id);
      out.leaf_grads[name] = std::move(adj[id]);
    }
  }
  return out;
}

}  // namespace patchsim::diffgrid
