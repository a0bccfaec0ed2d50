// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "wsdlab/common.hpp"
#include "wsdlab/nanomodel.hpp"

namespace wsdlab {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual int vocab_size() const = 0;
  virtual std::vector<int32_t> encode(std::string_view text) const = 0;
  virtual std::string id() const = 0;
};

// Default tokenizer: one token per byte, ids 0..255.
class ByteTokenizer final : public Tokenizer {
 public:
  int vocab_size() const override { return 256; }
  std::vector<int32_t> encode(std::string_view text) const override {
    std::vector<int32_t> ids(text.size());
    for (size_t i = 0; i < text.size(); ++i) {
      ids[i] = static_cast<int32_t>(static_cast<unsigned char>(text[i]));
    }
    return ids;
  }
  std::string id() const override { return "byte-v1"; }
};

inline std::unique_ptr<Tokenizer> make_tokenizer(const std::string& name) {
  if (name == "byte" || name == "byte-v1") return std::make_unique<ByteTokenizer>();
  throw std::invalid_argument("unknown tokenizer: " + name);
}

struct TokenCorpus {
  std::vector<int32_t> tokens;
  std::string source_digest;  // hex FNV-1a of the raw input bytes
  std::string tokenizer_id;
};

inline constexpr char kTokenCorpusMagic[9] = "WSDTOK01";

inline void save_token_corpus(const std::filesystem::path& path, const TokenCorpus& corpus) {
  std::string out;
  detail::put_bytes(out, kTokenCorpusMagic, 8);
  detail::put_int<uint32_t>(out, 1);
  detail::put_string(out, corpus.source_digest);
  detail::put_string(out, corpus.tokenizer_id);
  detail::put_int<uint64_t>(out, corpus.tokens.size());
  detail::put_bytes(out, corpus.tokens.data(), corpus.tokens.size() * sizeof(int32_t));
  write_file_bytes(path, out);
}

// Accepts plain UTF-8 text (a file or a directory of files, read in sorted
// name order) or a pre-tokenized binary produced by save_token_corpus. The
// binary keeps the original text digest, so both routes name the same corpus.
inline TokenCorpus load_corpus(const std::filesystem::path& path, const Tokenizer& tokenizer) {
  std::string raw;
  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) raw += read_file_bytes(f);
  } else {
    raw = read_file_bytes(path);
  }
  if (raw.size() >= 8 && std::string_view(raw.data(), 8) == std::string_view(kTokenCorpusMagic, 8)) {
    detail::ByteReader in({raw.data(), raw.size()});
    char magic[8];
    in.read(magic, 8);
    if (in.read_int<uint32_t>() != 1) throw std::runtime_error("unsupported corpus version");
    TokenCorpus corpus;
    corpus.source_digest = in.read_string();
    corpus.tokenizer_id = in.read_string();
    corpus.tokens.resize(in.read_int<uint64_t>());
    in.read(corpus.tokens.data(), corpus.tokens.size() * sizeof(int32_t));
    if (corpus.tokens.empty()) throw std::runtime_error("empty corpus: " + path.string());
    return corpus;
  }
  if (raw.empty()) throw std::runtime_error("empty corpus: " + path.string());
  TokenCorpus corpus;
  corpus.tokens = tokenizer.encode(raw);
  corpus.source_digest = hex64(fnv1a64(raw.data(), raw.size()));
  corpus.tokenizer_id = tokenizer.id();
  return corpus;
}

struct TokenRange {
  size_t first = 0;
  size_t count = 0;
};

// Split boundary is floor(n_tokens * train_fraction); train and validation
// token ranges are disjoint and exhaustive.
inline TokenRange train_range(const TokenCorpus& corpus, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train_fraction must be in (0, 1)");
  }
  const auto boundary = static_cast<size_t>(static_cast<double>(corpus.tokens.size()) * train_fraction);
  return {0, boundary};
}

inline TokenRange val_range(const TokenCorpus& corpus, double train_fraction) {
  const auto train = train_range(corpus, train_fraction);
  return {train.count, corpus.tokens.size() - train.count};
}

inline long n_batches_in(const TokenRange& range, int batch_size, int seq_len) {
  const auto tokens_per_batch = static_cast<size_t>(batch_size) * (static_cast<size_t>(seq_len) + 1);
  return static_cast<long>(range.count / tokens_per_batch);
}

// Batch content is a pure function of (corpus, range, sizes, index); the
// visitation order never changes what a given index contains.
inline Batch make_batch(const TokenCorpus& corpus, const TokenRange& range, int batch_size,
                        int seq_len, long index) {
  if (index < 0 || index >= n_batches_in(range, batch_size, seq_len)) {
    throw std::out_of_range("batch index out of range");
  }
  const size_t row_len = static_cast<size_t>(seq_len) + 1;
  const size_t start = range.first + static_cast<size_t>(index) * batch_size * row_len;
  Batch batch;
  batch.tokens.resize(batch_size, static_cast<Eigen::Index>(row_len));
  for (int r = 0; r < batch_size; ++r) {
    for (size_t c = 0; c < row_len; ++c) {
      batch.tokens(r, static_cast<Eigen::Index>(c)) =
          corpus.tokens[start + static_cast<size_t>(r) * row_len + c];
    }
  }
  return batch;
}

// Fisher-Yates over mt19937_64 with rejection sampling; the generator and
// draw scheme are part of the reproducibility contract.
inline std::vector<size_t> permute(long n_batches, uint64_t seed) {
  if (n_batches < 1) throw std::invalid_argument("n_batches must be >= 1");
  Rng rng(seed);
  return fisher_yates(static_cast<size_t>(n_batches), rng);
}

// Concatenation of independent full permutations, truncated to target_steps;
// every index appears either floor or ceil of target/n times.
inline std::vector<size_t> permute_with_repetition(long n_batches, long target_steps,
                                                   uint64_t seed) {
  if (n_batches < 1) throw std::invalid_argument("n_batches must be >= 1");
  if (target_steps < n_batches) throw std::invalid_argument("target_steps must be >= n_batches");
  Rng rng(seed);
  std::vector<size_t> order;
  order.reserve(static_cast<size_t>(target_steps));
  while (order.size() < static_cast<size_t>(target_steps)) {
    const auto perm = fisher_yates(static_cast<size_t>(n_batches), rng);
    const size_t take =
        std::min(perm.size(), static_cast<size_t>(target_steps) - order.size());
    order.insert(order.end(), perm.begin(), perm.begin() + static_cast<long>(take));
  }
  return order;
}

struct BatchPlan {
  int batch_size = 0;
  int seq_len = 0;
  std::vector<size_t> order;
  uint64_t seed = 0;
};

inline BatchPlan make_batch_plan(long n_batches, long target_steps, uint64_t seed, int batch_size,
                                 int seq_len) {
  BatchPlan plan;
  plan.batch_size = batch_size;
  plan.seq_len = seq_len;
  plan.seed = seed;
  plan.order = (target_steps == n_batches) ? permute(n_batches, seed)
                                           : permute_with_repetition(n_batches, target_steps, seed);
  return plan;
}

// Contiguous batch index ranges relative to a split.
struct BatchRange {
  long first = 0;
  long count = 0;
};

// Split [first, first+count) into `parts` contiguous, non-intersecting ranges
// whose union is exactly the input; sizes differ by at most one.
inline std::vector<BatchRange> partition_batches(const BatchRange& range, int parts) {
  if (parts < 1) throw std::invalid_argument("parts must be >= 1");
  if (range.count < parts) throw std::invalid_argument("not enough batches to partition");
  std::vector<BatchRange> out;
  const long base = range.count / parts;
  const long extra = range.count % parts;
  long cursor = range.first;
  for (int i = 0; i < parts; ++i) {
    const long len = base + (i < extra ? 1 : 0);
    out.push_back({cursor, len});
    cursor += len;
  }
  return out;
}

// Perplexity of each listed batch under fixed weights, in the given (original
// training) order. Pure: no weight updates, repeated calls agree exactly.
template <typename T>
std::vector<double> retrospective_eval(const WeightVector<T>& weights, const ModelConfig& cfg,
                                       const TokenCorpus& corpus, const TokenRange& split,
                                       int batch_size, const std::vector<long>& batch_indices) {
  std::vector<double> ppl;
  ppl.reserve(batch_indices.size());
  for (const long idx : batch_indices) {
    const Batch batch = make_batch(corpus, split, batch_size, cfg.seq_len, idx);
    ppl.push_back(std::exp(eval_loss(weights, cfg, batch)));
  }
  return ppl;
}

// Trailing window mean: out[i] averages series[max(0, i-width+1) .. i].
inline std::vector<double> window_smooth(const std::vector<double>& series, size_t width) {
  if (width == 0) throw std::invalid_argument("window width must be positive");
  std::vector<double> out(series.size());
  double acc = 0.0;
  for (size_t i = 0; i < series.size(); ++i) {
    acc += series[i];
    if (i >= width) acc -= series[i - width];
    const size_t n = std::min(i + 1, width);
    out[i] = acc / static_cast<double>(n);
  }
  return out;
}

}  // namespace wsdlab
