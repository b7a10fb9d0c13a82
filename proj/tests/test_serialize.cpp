#include "ccnn/serialize.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <limits>

using namespace ccnn;
using ccnn::testing::random_matrix;

TEST(Crc32, KnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(io::crc32_of(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), 0xCBF43926u);
  EXPECT_EQ(io::crc32_of(nullptr, 0), 0u);
}

TEST(Codec, ScalarsAreLittleEndian) {
  io::Writer w;
  w.u16(0x0102);
  w.u32(0x03040506);
  const auto& b = w.buffer();
  ASSERT_EQ(b.size(), 6u);
  EXPECT_EQ(b[0], 0x02);
  EXPECT_EQ(b[1], 0x01);
  EXPECT_EQ(b[2], 0x06);
  EXPECT_EQ(b[5], 0x03);
}

TEST(Codec, RoundTripsEveryType) {
  io::Writer w;
  w.bytes("HDR");
  w.u8(250);
  w.u16(65000);
  w.u32(4000000000u);
  w.u64(std::numeric_limits<std::uint64_t>::max());
  w.i64(-42);
  w.f32(1.5f);
  w.f64(-std::numeric_limits<double>::denorm_min());
  w.str("meta data");
  w.str("");
  const Matrix M = random_matrix(3, 5, 1);
  w.matrix(M);
  w.matrix(M, io::DType::f32);
  const Vector v = random_matrix(4, 1, 2);
  w.matrix(v);
  w.matrix(Matrix(0, 7));

  io::Reader r(w.finish(), "test");
  r.verify_checksum();
  EXPECT_EQ(r.bytes(3), "HDR");
  EXPECT_EQ(r.u8(), 250);
  EXPECT_EQ(r.u16(), 65000);
  EXPECT_EQ(r.u32(), 4000000000u);
  EXPECT_EQ(r.u64(), std::numeric_limits<std::uint64_t>::max());
  EXPECT_EQ(r.i64(), -42);
  EXPECT_EQ(r.f32(), 1.5f);
  EXPECT_EQ(r.f64(), -std::numeric_limits<double>::denorm_min());
  EXPECT_EQ(r.str(), "meta data");
  EXPECT_EQ(r.str(), "");
  EXPECT_EQ(r.matrix(), M);
  EXPECT_EQ(r.matrix(), M.cast<float>().cast<double>());
  EXPECT_EQ(r.vector(), v);
  const Matrix empty = r.matrix();
  EXPECT_EQ(empty.rows(), 0);
  EXPECT_EQ(empty.cols(), 7);
  EXPECT_TRUE(r.at_end());
}

TEST(Codec, MatrixPayloadIsRowMajor) {
  Matrix M(2, 2);
  M << 1, 2, 3, 4;
  io::Writer w;
  w.matrix(M);
  io::Reader r(w.buffer(), "t");
  r.u8();
  r.u64();
  r.u64();
  EXPECT_EQ(r.f64(), 1.0);
  EXPECT_EQ(r.f64(), 2.0);
  EXPECT_EQ(r.f64(), 3.0);
}

TEST(Codec, ChecksumDetectsEveryFlippedByte) {
  io::Writer w;
  w.str("payload");
  w.matrix(random_matrix(2, 2, 3));
  const auto bytes = w.finish();
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x01;
    io::Reader r(bad, "t");
    EXPECT_THROW(r.verify_checksum(), ChecksumError) << "byte " << i;
  }
}

TEST(Codec, TruncationAndBadTagsAreDataErrors) {
  io::Writer w;
  w.matrix(random_matrix(4, 4, 4));
  auto bytes = w.buffer();
  bytes.resize(bytes.size() - 3);
  io::Reader r(bytes, "t");
  EXPECT_THROW(r.matrix(), DataError);

  io::Writer h;
  h.u8(9);
  h.u64(1);
  h.u64(1);
  io::Reader r2(h.buffer(), "t");
  EXPECT_THROW(r2.matrix(), DataError);

  io::Writer s;
  s.u64(1000);  // string length beyond payload
  io::Reader r3(s.buffer(), "t");
  EXPECT_THROW(r3.str(), DataError);

  io::Reader r4({1, 2}, "t");
  EXPECT_THROW(r4.verify_checksum(), DataError);
  io::Reader r5({1}, "t");
  EXPECT_THROW(r5.u32(), DataError);
}

TEST(Codec, HugeDimensionsDoNotAllocate) {
  io::Writer w;
  w.u8(2);
  w.u64(std::uint64_t(1) << 40);
  w.u64(std::uint64_t(1) << 40);
  io::Reader r(w.buffer(), "t");
  EXPECT_THROW(r.matrix(), DataError);
}

TEST(Files, WriteReadAndMissing) {
  ccnn::testing::TempDir tmp;
  io::write_all(tmp / "x.bin", {1, 2, 3});
  EXPECT_EQ(io::read_all(tmp / "x.bin"), (std::vector<std::uint8_t>{1, 2, 3}));
  EXPECT_THROW(io::read_all(tmp / "nope.bin"), DataError);
  EXPECT_THROW(io::write_all(tmp / "no-dir" / "x.bin", {1}), DataError);
}
