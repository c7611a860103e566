#pragma once

// Byte-level tokenization and batched token-stream ingestion from plain
// UTF-8 text files. One token per byte plus a reserved end-of-text id, so
// the pipeline needs no external vocabulary assets and round-trips exactly.

#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "dsmoe/common.hpp"

namespace dsmoe {

class ByteTokenizer {
 public:
  static constexpr int32_t kEot = 256;         // end-of-text sentinel
  static constexpr int32_t kVocabSize = 257;   // 256 byte values + EOT

  static std::vector<int32_t> encode(std::string_view text) {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
    return ids;
  }

  // EOT renders as empty; anything past the vocabulary is a range error.
  static std::string decode(const std::vector<int32_t>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int32_t id : ids) {
      if (id < 0 || id >= kVocabSize)
        throw RangeError("decode: token id " + std::to_string(id) +
                         " outside [0," + std::to_string(kVocabSize) + ")");
      if (id == kEot) continue;
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
  }
};

struct Batch {
  std::vector<int32_t> inputs;   // [b * seq_len] flattened row-major
  std::vector<int32_t> targets;  // inputs shifted by one position
  int64_t batch = 0;
  int64_t seq_len = 0;
};

class TokenStream {
 public:
  // The final `val_fraction` of the stream is held out for validation.
  static TokenStream from_bytes(std::string_view text,
                                double val_fraction = 0.05) {
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
      throw RangeError("token stream: split fraction must lie in (0,1)");
    TokenStream ts;
    ts.ids_ = ByteTokenizer::encode(text);
    ts.split_ = static_cast<int64_t>(ts.ids_.size()) -
                static_cast<int64_t>(
                    static_cast<double>(ts.ids_.size()) * val_fraction);
    return ts;
  }

  static TokenStream from_file(const std::string& path,
                               double val_fraction = 0.05) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("token stream: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    if (text.empty()) throw DataError("token stream: " + path + " is empty");
    return from_bytes(text, val_fraction);
  }

  const std::vector<int32_t>& ids() const { return ids_; }
  int64_t size() const { return static_cast<int64_t>(ids_.size()); }
  int64_t split() const { return split_; }
  int64_t train_size() const { return split_; }
  int64_t val_size() const { return size() - split_; }

 private:
  std::vector<int32_t> ids_;
  int64_t split_ = 0;
};

// b random contiguous windows from the training span; targets are inputs
// shifted by one. Window starts are a pure function of (seed, step, row).
inline Batch next_batch(const TokenStream& stream, int64_t batch,
                        int64_t seq_len, uint64_t seed, uint64_t step) {
  const int64_t n = stream.train_size();
  if (n <= seq_len + 1)
    throw DataError("next_batch: training stream of " + std::to_string(n) +
                    " tokens is too short for seq_len " +
                    std::to_string(seq_len));
  Batch out;
  out.batch = batch;
  out.seq_len = seq_len;
  out.inputs.resize(static_cast<size_t>(batch * seq_len));
  out.targets.resize(static_cast<size_t>(batch * seq_len));
  const int64_t starts = n - seq_len;  // start may be anything with start+seq_len < n
  const auto& ids = stream.ids();
  for (int64_t r = 0; r < batch; ++r) {
    const int64_t pos = static_cast<int64_t>(
        mix64(seed, step, static_cast<uint64_t>(r)) %
        static_cast<uint64_t>(starts));
    for (int64_t i = 0; i < seq_len; ++i) {
      out.inputs[static_cast<size_t>(r * seq_len + i)] =
          ids[static_cast<size_t>(pos + i)];
      out.targets[static_cast<size_t>(r * seq_len + i)] =
          ids[static_cast<size_t>(pos + i + 1)];
    }
  }
  return out;
}

// Deterministic non-overlapping evaluation windows over a token span.
// Returns consecutive (inputs, targets) windows of length seq_len.
inline std::vector<Batch> eval_windows(const std::vector<int32_t>& ids,
                                       int64_t seq_len) {
  if (static_cast<int64_t>(ids.size()) <= seq_len)
    throw DataError("eval_windows: token span shorter than one window");
  std::vector<Batch> out;
  for (int64_t start = 0;
       start + seq_len < static_cast<int64_t>(ids.size());
       start += seq_len) {
    Batch b;
    b.batch = 1;
    b.seq_len = seq_len;
    b.inputs.assign(ids.begin() + start, ids.begin() + start + seq_len);
    b.targets.assign(ids.begin() + start + 1, ids.begin() + start + seq_len + 1);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace dsmoe
