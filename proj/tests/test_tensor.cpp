#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "tttseg/tensor.hpp"
#include "tttseg/tensor_io.hpp"

using namespace tttseg;

namespace {

Tensor random_tensor(Rng& rng, Shape shape) { return rng.normal_tensor(shape, 0.0, 1.0); }

bool approx_equal(const Tensor& a, const Tensor& b, double tol) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::abs(a[i] - b[i]) > tol) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("matmul identity") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {3, 4, 5, 6});
  CHECK(matmul(eye, m).vec() == m.vec());
}

TEST_CASE("matmul dot product") {
  // [[1,2]] . [[3],[4]] = [[11]], dot product by hand
  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c[0] == doctest::Approx(11.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a({2, 3});
  Tensor b({4, 5});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul associativity within 1e-9 relative") {
  Rng rng(11);
  Tensor a = random_tensor(rng, {4, 6});
  Tensor b = random_tensor(rng, {6, 5});
  Tensor c = random_tensor(rng, {5, 3});
  Tensor left = matmul(matmul(a, b), c);
  Tensor right = matmul(a, matmul(b, c));
  for (std::size_t i = 0; i < left.size(); ++i) {
    const double denom = std::max({std::abs(left[i]), std::abs(right[i]), 1.0});
    CHECK(std::abs(left[i] - right[i]) / denom < 1e-9);
  }
}

TEST_CASE("elementwise basics") {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  CHECK(mul(a, b).vec() == std::vector<double>{3, 8});
  CHECK(add(a, Tensor::scalar(0)).vec() == a.vec());
  CHECK(sub(a, b).vec() == std::vector<double>{-2, -2});
  CHECK(scale(a, 2.0).vec() == std::vector<double>{2, 4});
  CHECK(neg(a).vec() == std::vector<double>{-1, -2});
  CHECK_THROWS_AS(mul(Tensor({2, 2}), Tensor({3, 2})), ShapeError);
}

TEST_CASE("hadamard commutative exactly, associative to machine precision") {
  Rng rng(7);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {3, 4});
  Tensor c = random_tensor(rng, {3, 4});
  CHECK(mul(a, b).vec() == mul(b, a).vec());
  // IEEE multiplication commutes bitwise but does not associate bitwise.
  Tensor lhs = mul(mul(a, b), c);
  Tensor rhs = mul(a, mul(b, c));
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    CHECK(std::abs(lhs[i] - rhs[i]) <= 1e-15 * std::abs(lhs[i]));
  }
}

TEST_CASE("reduce basics") {
  Tensor v({3}, {1, 2, 3});
  CHECK(reduce_all(ReduceOp::Sum, v).item() == doctest::Approx(6.0));
  Tensor c = Tensor::full({4, 2}, 2.5);
  CHECK(reduce_all(ReduceOp::Mean, c).item() == doctest::Approx(2.5));
  Tensor m({2, 2}, {1, 5, 3, 2});
  Tensor mx = reduce(ReduceOp::Max, m, {1});
  CHECK(mx.shape() == Shape{2});
  CHECK(mx.vec() == std::vector<double>{5, 3});
  CHECK_THROWS_AS(reduce(ReduceOp::Sum, v, {3}), AxisError);
}

TEST_CASE("sum over axis sequences matches full sum within 1e-12") {
  Rng rng(23);
  Tensor t = random_tensor(rng, {3, 4, 5});
  const double whole = reduce_all(ReduceOp::Sum, t).item();
  const double seq1 = reduce_all(ReduceOp::Sum, reduce(ReduceOp::Sum, t, {1})).item();
  const double seq2 = reduce_all(ReduceOp::Sum, reduce(ReduceOp::Sum, reduce(ReduceOp::Sum, t, {2}), {0})).item();
  CHECK(std::abs(whole - seq1) < 1e-12);
  CHECK(std::abs(whole - seq2) < 1e-12);
}

TEST_CASE("reshape preserves row-major data") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = reshape(a, {3, 2});
  CHECK(b.vec() == a.vec());
  CHECK(reshape(b, {2, 3}).vec() == a.vec());
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
}

TEST_CASE("flatten uses raster order over (H, W)") {
  // C=2, H=2, W=2; token t = h*W + w carries the C channel values at (h, w).
  Tensor fmap({2, 2, 2}, {// channel 0
                          0, 1, 2, 3,
                          // channel 1
                          10, 11, 12, 13});
  Tensor tokens = chw_to_tokens(fmap);
  CHECK(tokens.shape() == Shape{4, 2});
  CHECK(tokens.vec() == std::vector<double>{0, 10, 1, 11, 2, 12, 3, 13});
  Tensor back = tokens_to_chw(tokens, 2, 2, 2);
  CHECK(back.vec() == fmap.vec());
}

TEST_CASE("transpose involution") {
  Rng rng(3);
  Tensor a = random_tensor(rng, {3, 5});
  CHECK(transpose(transpose(a)).vec() == a.vec());
  Tensor b = random_tensor(rng, {2, 3, 4});
  CHECK(transpose(transpose(b, {2, 0, 1}), {1, 2, 0}).vec() == b.vec());
}

TEST_CASE("narrow and concat") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor left = narrow(a, 1, 0, 2);
  CHECK(left.vec() == std::vector<double>{1, 2, 4, 5});
  Tensor right = narrow(a, 1, 2, 1);
  CHECK(concat({left, right}, 1).vec() == a.vec());
  CHECK_THROWS_AS(narrow(a, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(narrow(a, 5, 0, 1), AxisError);
}

TEST_CASE("rng determinism and degenerate std") {
  Rng a(42), b(42);
  Tensor ta = a.normal_tensor({16}, 0.0, 1.0);
  Tensor tb = b.normal_tensor({16}, 0.0, 1.0);
  CHECK(ta.vec() == tb.vec());

  Rng c(7);
  Tensor constant = c.normal_tensor({8}, 3.5, 0.0);
  for (std::size_t i = 0; i < constant.size(); ++i) CHECK(constant[i] == 3.5);

  CHECK_THROWS_AS(Rng(1).normal(0.0, -1.0), ValueError);
}

TEST_CASE("rng sample mean near zero for 1e4 draws") {
  Rng rng(12345);
  double sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) sum += rng.normal(0.0, 1.0);
  CHECK(std::abs(sum / n) < 0.05);
}

TEST_CASE("rng forks are independent of parent draws") {
  Rng a(99);
  Rng fork_before = a.fork(1);
  (void)a.next_u64();
  Rng b(99);
  Rng fork_after = b.fork(1);
  CHECK(fork_before.next_u64() == fork_after.next_u64());
}

TEST_CASE("counter-based uniforms are stateless") {
  CHECK(Rng::uniform_at(5, 17) == Rng::uniform_at(5, 17));
  CHECK(Rng::uniform_at(5, 17) != Rng::uniform_at(5, 18));
}

TEST_CASE("tensor invariants") {
  Tensor s = Tensor::scalar(4.0);
  CHECK(s.rank() == 0);
  CHECK(s.size() == 1);
  CHECK(s.item() == 4.0);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 2}), ShapeError);
}

TEST_CASE("tsr1 round trip f64") {
  Rng rng(31);
  Tensor t = random_tensor(rng, {3, 4, 2});
  auto bytes = encode_tsr(t, Dtype::F64);
  CHECK(bytes[0] == 'T');
  CHECK(bytes[4] == 0);  // dtype f64
  CHECK(bytes[5] == 3);  // rank
  LoadedTensor lt = decode_tsr(bytes);
  CHECK(lt.dtype == Dtype::F64);
  CHECK(lt.tensor.shape() == t.shape());
  CHECK(lt.tensor.vec() == t.vec());
  CHECK(encode_tsr(lt.tensor, Dtype::F64) == bytes);
}

TEST_CASE("tsr1 round trip u8") {
  Tensor t({2, 3}, {0, 1, 128, 255, 7, 42});
  auto bytes = encode_tsr(t, Dtype::U8);
  LoadedTensor lt = decode_tsr(bytes);
  CHECK(lt.dtype == Dtype::U8);
  CHECK(lt.tensor.vec() == t.vec());
  CHECK_THROWS_AS(encode_tsr(Tensor({1}, {1.5}), Dtype::U8), ValueError);
  CHECK_THROWS_AS(encode_tsr(Tensor({1}, {256.0}), Dtype::U8), ValueError);
}

TEST_CASE("tsr1 rejects bad magic and truncation with offsets") {
  Tensor t({2}, {1, 2});
  auto bytes = encode_tsr(t, Dtype::F64);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_tsr(bad), doctest::Contains("offset 0"), IoError);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  CHECK_THROWS_WITH_AS(decode_tsr(cut), doctest::Contains("truncated"), IoError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_WITH_AS(decode_tsr(extra), doctest::Contains("trailing"), IoError);
}

TEST_CASE("tsr1 file io") {
  Tensor t({4}, {1, 2, 3, 4});
  const std::string path = "test_tensor_io.tsr";
  save_tsr(t, Dtype::F64, path);
  LoadedTensor lt = load_tsr(path);
  CHECK(lt.tensor.vec() == t.vec());
  std::remove(path.c_str());
}

TEST_CASE("reshape round trip property on random shapes") {
  Rng rng(77);
  for (int iter = 0; iter < 20; ++iter) {
    const std::size_t a = 1 + rng.uniform_int(4);
    const std::size_t b = 1 + rng.uniform_int(4);
    const std::size_t c = 1 + rng.uniform_int(4);
    Tensor t = random_tensor(rng, {a, b, c});
    Tensor r = reshape(reshape(t, {a * b * c}), {a, b, c});
    CHECK(r.vec() == t.vec());
    CHECK(approx_equal(r, t, 0.0));
  }
}
