#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dfer/encoders.hpp"

namespace dfer {

// The learnable label representation: for every class, snt alternative
// "sentences" of tkn token vectors, each embd wide. These replace tokenized
// label text entirely; training moves them directly in embedding space.
template <class Real>
struct MatBank {
  std::int64_t cls = 0, snt = 0, tkn = 0, embd = 0;
  Var<Real> tokens;  // [cls, snt, tkn, embd]
  ParamGroup<Real> params;

  static MatBank init(std::int64_t cls, std::int64_t snt, std::int64_t tkn, std::int64_t embd,
                      std::uint64_t seed, std::int64_t tkn_max = kTknMax) {
    if (cls <= 0 || snt <= 0 || tkn <= 0 || embd <= 0)
      throw ConfigError("mat: all extents must be positive");
    if (tkn > tkn_max)
      throw ConfigError("mat: tkn " + std::to_string(tkn) + " exceeds context limit " +
                        std::to_string(tkn_max));
    MatBank b;
    b.cls = cls;
    b.snt = snt;
    b.tkn = tkn;
    b.embd = embd;
    Tensor<Real> t(Shape{cls, snt, tkn, embd});
    Rng rng = Rng(seed).split("mat");
    t.fill_gaussian(rng, 0.0, 0.02);
    b.tokens = Var<Real>::leaf(std::move(t), false);
    b.params.name = "mat";
    b.params.add("tokens", b.tokens);
    return b;
  }
};

// Context for one (class, sentence) slot: the tkn token rows followed by
// exactly-zero padding up to tkn_max. Gradients flow through the selection
// back into the bank; the padding is a shared constant.
template <class Real>
TokenContext<Real> assemble_context(const MatBank<Real>& bank, std::int64_t i, std::int64_t j,
                                    std::int64_t tkn_max = kTknMax) {
  if (i < 0 || i >= bank.cls)
    throw ConfigError("assemble_context: class " + std::to_string(i) + " out of range");
  if (j < 0 || j >= bank.snt)
    throw ConfigError("assemble_context: sentence " + std::to_string(j) + " out of range");
  if (bank.tkn > tkn_max)
    throw ConfigError("assemble_context: bank tkn " + std::to_string(bank.tkn) +
                      " exceeds context limit " + std::to_string(tkn_max));
  Var<Real> block = select(select(bank.tokens, i), j);  // [tkn, embd]
  if (bank.tkn == tkn_max) return TokenContext<Real>{block, bank.tkn};
  Var<Real> pad = Var<Real>::constant(Tensor<Real>::zeros(Shape{tkn_max - bank.tkn, bank.embd}));
  return TokenContext<Real>{concat(block, pad, 0), bank.tkn};
}

// Every (class, sentence) slot encoded to a feature. grid[i][j] is the
// feature of sentence j of class i.
template <class Real>
std::vector<std::vector<Var<Real>>> encode_all(const MatBank<Real>& bank,
                                               const FrozenEncoder<Real>& enc) {
  if (enc.config.embd != bank.embd)
    throw ConfigError("encode_all: bank width " + std::to_string(bank.embd) +
                      " vs encoder width " + std::to_string(enc.config.embd));
  std::vector<std::vector<Var<Real>>> grid(static_cast<std::size_t>(bank.cls));
  for (std::int64_t i = 0; i < bank.cls; ++i) {
    grid[static_cast<std::size_t>(i)].reserve(static_cast<std::size_t>(bank.snt));
    for (std::int64_t j = 0; j < bank.snt; ++j)
      grid[static_cast<std::size_t>(i)].push_back(
          enc.encode_text(assemble_context(bank, i, j, enc.config.tkn_max)));
  }
  return grid;
}

// ---- vocabulary introspection ----

// Plain-text table: one word followed by its embedding per line.
struct VocabTable {
  std::vector<std::string> words;
  Tensor<float> embeddings;  // [words, width]

  std::int64_t size() const { return static_cast<std::int64_t>(words.size()); }
  std::int64_t width() const { return embeddings.rank() == 2 ? embeddings.shape[1] : 0; }
};

inline VocabTable load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocab file: " + path);
  VocabTable vt;
  std::vector<float> values;
  std::int64_t width = -1;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;  // blank line
    std::vector<float> row;
    double v;
    while (ls >> v) {
      if (!std::isfinite(v)) throw ParseError(lineno, "non-finite embedding value");
      row.push_back(static_cast<float>(v));
    }
    if (!ls.eof()) throw ParseError(lineno, "malformed embedding value");
    if (row.empty()) throw ParseError(lineno, "word without embedding: " + word);
    if (width < 0) width = static_cast<std::int64_t>(row.size());
    if (static_cast<std::int64_t>(row.size()) != width)
      throw ParseError(lineno, "expected " + std::to_string(width) + " values, got " +
                                   std::to_string(row.size()));
    double norm2 = 0.0;
    for (float x : row) norm2 += static_cast<double>(x) * static_cast<double>(x);
    if (std::sqrt(norm2) < kNormFloor)
      throw ParseError(lineno, "zero-norm embedding for word: " + word);
    vt.words.push_back(word);
    values.insert(values.end(), row.begin(), row.end());
  }
  if (vt.words.empty()) throw ParseError(lineno == 0 ? 1 : lineno, "vocab file has no entries");
  vt.embeddings = Tensor<float>(Shape{vt.size(), width});
  std::copy(values.begin(), values.end(), vt.embeddings.data.begin());
  return vt;
}

struct VocabMatch {
  std::int64_t word = -1;
  double sim = 0.0;
};

// Cosine neighbors in the vocabulary for every token vector in the bank.
// Purely diagnostic, value-level, no gradients. Ties resolve to the lower
// vocabulary index; k is clamped to the vocabulary size.
struct NearestVocab {
  std::int64_t cls = 0, snt = 0, tkn = 0;
  int k = 0;
  std::vector<VocabMatch> flat;  // [cls*snt*tkn, k] row-major

  std::span<const VocabMatch> at(std::int64_t i, std::int64_t j, std::int64_t t) const {
    const std::int64_t row = (i * snt + j) * tkn + t;
    return std::span<const VocabMatch>(flat).subspan(static_cast<std::size_t>(row * k),
                                                     static_cast<std::size_t>(k));
  }
};

inline NearestVocab nearest_vocab(const Tensor<float>& tokens, const VocabTable& vocab, int k) {
  if (tokens.rank() != 4)
    throw ConfigError("nearest_vocab: token bank must be rank 4, got " + shape_str(tokens.shape));
  if (vocab.size() == 0) throw ConfigError("nearest_vocab: empty vocabulary");
  if (k < 1) throw ConfigError("nearest_vocab: k must be at least 1");
  const std::int64_t D = tokens.shape[3];
  if (vocab.width() != D)
    throw ConfigError("nearest_vocab: token width " + std::to_string(D) +
                      " vs vocab width " + std::to_string(vocab.width()));
  NearestVocab out;
  out.cls = tokens.shape[0];
  out.snt = tokens.shape[1];
  out.tkn = tokens.shape[2];
  out.k = std::min<std::int64_t>(k, vocab.size());

  std::vector<double> vnorm(static_cast<std::size_t>(vocab.size()));
  for (std::int64_t w = 0; w < vocab.size(); ++w) {
    double n2 = 0.0;
    for (std::int64_t d = 0; d < D; ++d) {
      double x = vocab.embeddings.at(w, d);
      n2 += x * x;
    }
    vnorm[static_cast<std::size_t>(w)] = std::sqrt(n2);
  }

  const std::int64_t n_tokens = out.cls * out.snt * out.tkn;
  std::vector<VocabMatch> scored(static_cast<std::size_t>(vocab.size()));
  for (std::int64_t t = 0; t < n_tokens; ++t) {
    const float* tok = tokens.data.data() + t * D;
    double tnorm2 = 0.0;
    for (std::int64_t d = 0; d < D; ++d)
      tnorm2 += static_cast<double>(tok[d]) * static_cast<double>(tok[d]);
    const double tnorm = std::sqrt(tnorm2);
    if (tnorm < kNormFloor)
      throw NumericError("nearest_vocab: degenerate token norm at flat index " +
                         std::to_string(t));
    for (std::int64_t w = 0; w < vocab.size(); ++w) {
      double dot = 0.0;
      for (std::int64_t d = 0; d < D; ++d)
        dot += static_cast<double>(tok[d]) * static_cast<double>(vocab.embeddings.at(w, d));
      scored[static_cast<std::size_t>(w)] = {w, dot / (tnorm * vnorm[static_cast<std::size_t>(w)])};
    }
    std::stable_sort(scored.begin(), scored.end(), [](const VocabMatch& a, const VocabMatch& b) {
      if (a.sim != b.sim) return a.sim > b.sim;
      return a.word < b.word;
    });
    out.flat.insert(out.flat.end(), scored.begin(), scored.begin() + out.k);
  }
  return out;
}

}  // namespace dfer
