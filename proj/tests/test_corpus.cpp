#include <gtest/gtest.h>

#include <map>
#include <string>

#include "dsmoe/corpus.hpp"

using namespace dsmoe;

TEST(ByteTokenizer, EncodesBytesAsIdentity) {
  const auto ids = ByteTokenizer::encode("AB");
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(ids[0], 65);
  EXPECT_EQ(ids[1], 66);
}

TEST(ByteTokenizer, EmptyString) {
  EXPECT_TRUE(ByteTokenizer::encode("").empty());
}

TEST(ByteTokenizer, DecodeBasics) {
  EXPECT_EQ(ByteTokenizer::decode({72, 105}), "Hi");
  EXPECT_EQ(ByteTokenizer::decode({ByteTokenizer::kEot}), "");
  EXPECT_THROW(ByteTokenizer::decode({257}), RangeError);
  EXPECT_THROW(ByteTokenizer::decode({-1}), RangeError);
}

TEST(ByteTokenizer, RoundTripProperty) {
  Rng rng(99);
  for (int it = 0; it < 1000; ++it) {
    std::string s;
    const int len = static_cast<int>(rng.uniform_int(64));
    for (int i = 0; i < len; ++i)
      s.push_back(static_cast<char>(rng.uniform_int(256)));
    EXPECT_EQ(ByteTokenizer::decode(ByteTokenizer::encode(s)), s);
  }
}

TEST(TokenStream, SplitFractionValidated) {
  EXPECT_THROW(TokenStream::from_bytes("abc", 0.0), RangeError);
  EXPECT_THROW(TokenStream::from_bytes("abc", 1.0), RangeError);
}

TEST(TokenStream, LastFiveStraightPercentIsValidation) {
  std::string text(1000, 'x');
  TokenStream ts = TokenStream::from_bytes(text);
  EXPECT_EQ(ts.size(), 1000);
  EXPECT_EQ(ts.train_size(), 950);
  EXPECT_EQ(ts.val_size(), 50);
}

TEST(NextBatch, TargetsAreInputsShiftedByOne) {
  std::string text;
  for (int i = 0; i < 200; ++i) text.push_back(static_cast<char>('a' + i % 26));
  TokenStream ts = TokenStream::from_bytes(text);
  const Batch b = next_batch(ts, 4, 8, 7, 0);
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t i = 0; i + 1 < 8; ++i)
      EXPECT_EQ(b.targets[r * 8 + i], b.inputs[r * 8 + i + 1]);
}

TEST(NextBatch, WindowsComeFromTheStream) {
  std::string text = "0123456789";
  TokenStream ts = TokenStream::from_bytes(text, 0.05);
  const Batch b = next_batch(ts, 1, 3, 42, 1);
  // inputs are a contiguous window; target follows it
  for (int64_t i = 0; i + 1 < 3; ++i)
    EXPECT_EQ(b.inputs[i] + 1, b.inputs[i + 1]);
  EXPECT_EQ(b.targets[2], b.inputs[2] + 1);
}

TEST(NextBatch, DeterministicPerSeedAndStep) {
  std::string text(5000, 'q');
  for (size_t i = 0; i < text.size(); ++i)
    text[i] = static_cast<char>('a' + i % 26);
  TokenStream ts = TokenStream::from_bytes(text);
  const Batch a = next_batch(ts, 3, 16, 1234, 55);
  const Batch b = next_batch(ts, 3, 16, 1234, 55);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.targets, b.targets);
  const Batch c = next_batch(ts, 3, 16, 1234, 56);
  EXPECT_NE(a.inputs, c.inputs);
}

TEST(NextBatch, TooShortStreamIsDataError) {
  TokenStream ts = TokenStream::from_bytes("abcdefgh", 0.1);
  EXPECT_THROW(next_batch(ts, 1, 16, 0, 0), DataError);
}

TEST(NextBatch, StartsCoverTheFullRange) {
  // text[i] = i mod 256 makes the window start recoverable mod 256, enough
  // to bucket the draw distribution.
  std::string text(2048 + 8, ' ');
  for (size_t i = 0; i < text.size(); ++i)
    text[i] = static_cast<char>(i % 256);
  TokenStream ts = TokenStream::from_bytes(text, 0.001);
  const int64_t seq = 8;
  constexpr int kBuckets = 16;
  std::vector<int> bucket(kBuckets, 0);
  for (uint64_t step = 0; step < 10000; ++step) {
    const Batch b = next_batch(ts, 1, seq, 9, step);
    ++bucket[static_cast<size_t>(b.inputs[0] * kBuckets / 256)];
  }
  for (int i = 0; i < kBuckets; ++i)
    EXPECT_GT(bucket[static_cast<size_t>(i)], 300) << "bucket " << i;
}

TEST(EvalWindows, NonOverlappingAndShifted) {
  std::vector<int32_t> ids(100);
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int32_t>(i);
  const auto windows = eval_windows(ids, 10);
  ASSERT_EQ(windows.size(), 9u);  // last start 90 would need token 100
  EXPECT_EQ(windows[0].inputs[0], 0);
  EXPECT_EQ(windows[1].inputs[0], 10);
  EXPECT_EQ(windows[0].targets[9], 10);
}
