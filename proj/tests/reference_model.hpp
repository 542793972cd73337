#pragma once

// Loop-only recomputation of the fused logits. Shares nothing with the
// tensor library except parameter storage.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cbias/corpus.hpp"
#include "cbias/param_store.hpp"
#include "cbias/pipeline.hpp"

namespace cbias::reference {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Vec values(const ParamStore& p, const std::string& name) {
  auto d = p.get(name).data();
  return Vec(d.begin(), d.end());
}

inline Vec row_of(const ParamStore& p, const std::string& name, int row) {
  const auto& t = p.get(name);
  const std::size_t cols = t.dim(1);
  auto d = t.data();
  return Vec(d.begin() + row * static_cast<long>(cols), d.begin() + (row + 1) * static_cast<long>(cols));
}

// x W + b with W stored [in x out].
inline Vec affine(const ParamStore& p, const std::string& name, const Vec& x) {
  const auto& w = p.get(name + ".weight");
  const std::size_t in = w.dim(0), out = w.dim(1);
  const auto W = w.data();
  const auto B = p.get(name + ".bias").data();
  Vec y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = B[o];
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * W[i * out + o];
    y[o] = acc;
  }
  return y;
}

inline Vec times(const Vec& x, const ParamStore& p, const std::string& name) {
  const auto& w = p.get(name);
  const std::size_t in = w.dim(0), out = w.dim(1);
  const auto W = w.data();
  Vec y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) y[o] += x[i] * W[i * out + o];
  return y;
}

inline Vec rectify(Vec v) {
  for (auto& x : v) x = x > 0.0 ? x : 0.0;
  return v;
}

inline Vec join(std::initializer_list<Vec> parts) {
  Vec out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline Vec estimate(const ParamStore& p, const corpus::Entity& s, const corpus::Entity& o) {
  auto hs = rectify(affine(p, "eem.phi_s", row_of(p, "eem.w_s", s.category)));
  auto ho = rectify(affine(p, "eem.phi_o", row_of(p, "eem.w_o", o.category)));
  Vec coords{s.box.x, s.box.y, s.box.w, s.box.h, o.box.x, o.box.y, o.box.w, o.box.h};
  auto hp = rectify(affine(p, "eem.phi_p", coords));
  return affine(p, "eem.mlp.1", rectify(affine(p, "eem.mlp.0", join({hs, ho, hp}))));
}

// [C x 1 x 1] channel bias from the language map.
inline Vec channel_bias(const ParamStore& p, const pipeline::ModelSpec& spec, int sc, int oc) {
  const auto lc = spec.lmm();
  const auto es = row_of(p, lc.subject_embedding(), sc);
  const auto eo = row_of(p, lc.object_embedding(), oc);
  const std::size_t D = spec.embed_dim, S = spec.lmm_pool, k = D / S;
  Mat pooled(S, Vec(S, 0.0));
  for (std::size_t a = 0; a < S; ++a)
    for (std::size_t b = 0; b < S; ++b) {
      for (std::size_t u = 0; u < k; ++u)
        for (std::size_t v = 0; v < k; ++v) pooled[a][b] += es[a * k + u] * eo[b * k + v];
      pooled[a][b] /= static_cast<double>(k * k);
    }
  auto conv = [&](const std::vector<Mat>& in, const std::string& name) {
    const auto& w = p.get(name + ".weight");
    const std::size_t cout = w.dim(0), cin = w.dim(1);
    const auto W = w.data();
    const auto B = p.get(name + ".bias").data();
    std::vector<Mat> out(cout, Mat(S, Vec(S, 0.0)));
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          double acc = B[c];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(S) || xx >= static_cast<long>(S)) continue;
                acc += in[ci][yy][xx] * W[((c * cin + ci) * 3 + (dy + 1)) * 3 + (dx + 1)];
              }
          out[c][y][x] = std::max(acc, 0.0);
        }
    return out;
  };
  auto h = conv(conv({pooled}, "lmm.conv1"), "lmm.conv2");
  Vec f;
  for (const auto& m : h) {
    double acc = 0.0;
    for (const auto& r : m)
      for (double v : r) acc += v;
    f.push_back(acc / static_cast<double>(S * S));
  }
  return f;
}

inline Mat scene_rep(const ParamStore& p, const pipeline::ModelSpec& spec,
                     const corpus::SceneSample& scene) {
  const auto sc = spec.sem();
  const std::size_t n = scene.entities.size(), dk = sc.head_dim();
  Mat x;
  for (const auto& e : scene.entities) {
    auto pos = rectify(affine(p, "sem.pos", {e.box.x, e.box.y, e.box.w, e.box.h}));
    x.push_back(affine(p, "sem.input", join({row_of(p, "sem.w_c", e.category), pos})));
  }
  for (std::size_t l = 0; l < sc.layers; ++l) {
    const std::string blk = "sem.layer" + std::to_string(l);
    Mat merged(n);
    for (std::size_t h = 0; h < sc.heads; ++h) {
      const std::string hd = blk + ".head" + std::to_string(h);
      Mat q, k, v;
      for (const auto& r : x) {
        q.push_back(times(r, p, hd + ".q"));
        k.push_back(times(r, p, hd + ".k"));
        v.push_back(times(r, p, hd + ".v"));
      }
      for (std::size_t i = 0; i < n; ++i) {
        Vec s(n);
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dk; ++c) dot += q[i][c] * k[j][c];
          s[j] = dot / std::sqrt(static_cast<double>(dk));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (auto& t : s) z += (t = std::exp(t - mx));
        Vec o(dk, 0.0);
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = 0; c < dk; ++c) o[c] += s[j] / z * v[j][c];
        merged[i].insert(merged[i].end(), o.begin(), o.end());
      }
    }
    const auto gain = values(p, blk + ".ln.gain"), bias = values(p, blk + ".ln.bias");
    for (std::size_t i = 0; i < n; ++i) {
      auto att = affine(p, blk + ".psi", merged[i]);
      if (sc.attention_residual)
        for (std::size_t c = 0; c < att.size(); ++c) att[c] += x[i][c];
      auto ffn = affine(p, blk + ".ffn2", rectify(affine(p, blk + ".ffn1", att)));
      Vec y(att.size());
      double mu = 0.0, var = 0.0;
      for (std::size_t c = 0; c < y.size(); ++c) mu += (y[c] = att[c] + ffn[c]);
      mu /= static_cast<double>(y.size());
      for (double t : y) var += (t - mu) * (t - mu);
      var /= static_cast<double>(y.size());
      for (std::size_t c = 0; c < y.size(); ++c)
        y[c] = gain[c] * (y[c] - mu) / std::sqrt(var + sc.ln_eps) + bias[c];
      x[i] = y;
    }
  }
  Mat out;
  for (const auto& r : x) out.push_back(affine(p, "sem.output", r));
  return out;
}

// Row-major [pairs x N_r] fused logits over all ordered pairs.
inline Vec fused_logits(const corpus::SceneSample& scene, const ParamStore& p,
                        const pipeline::ModelSpec& spec, const pipeline::PipelineConfig& config,
                        const corpus::FreqPrior* freq = nullptr) {
  const std::size_t n = scene.entities.size();
  const auto& dims = spec.dims;
  Mat srep = config.use_sem ? scene_rep(p, spec, scene) : Mat(n, Vec(spec.sem_out, 0.0));
  Vec out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto& si = scene.entities[i];
      const auto& oj = scene.entities[j];
      const auto& edge = scene.edge(static_cast<int>(i), static_cast<int>(j));
      const std::size_t area = dims.patch * dims.patch;
      Vec pooled(dims.channels, 0.0);
      Vec bias = config.use_lmm ? channel_bias(p, spec, si.category, oj.category)
                                : Vec(dims.channels, 0.0);
      for (std::size_t c = 0; c < dims.channels; ++c) {
        for (std::size_t q = 0; q < area; ++q) pooled[c] += edge[c * area + q] + bias[c];
        pooled[c] /= static_cast<double>(area);
      }
      auto features = join({srep[i], si.feature, srep[j], oj.feature, pooled});
      auto logits = affine(p, "baseline.fc2", rectify(affine(p, "baseline.fc1", features)));
      if (config.use_eem) {
        auto d = estimate(p, si, oj);
        for (std::size_t r = 0; r < logits.size(); ++r) logits[r] += d[r];
      }
      if (config.use_freq_baseline && freq) {
        auto dist = freq->distribution(si.category, oj.category);
        for (std::size_t r = 0; r < logits.size(); ++r) logits[r] += std::log(dist[r]);
      }
      out.insert(out.end(), logits.begin(), logits.end());
    }
  return out;
}

}  // namespace cbias::reference
