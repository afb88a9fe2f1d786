#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace pcrobust;

namespace {

Tensor random_images(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform();
  return t;
}

}  // namespace

TEST_SUITE("models") {
  TEST_CASE("lenet5 on 1x28x28 maps a batch of 5 to 5x10 logits") {
    Network net = Network::build(ArchitectureSpec::lenet5(Shape{1, 28, 28}, 10), 1);
    Rng rng(5);
    Tensor x = random_images(rng, Shape{5, 1, 28, 28});
    Tensor logits = net.forward(x);
    CHECK(logits.shape() == Shape{5, 10});
    check_finite(logits, "lenet5 logits");
  }

  TEST_CASE("same spec and seed build identical parameters") {
    const auto spec = ArchitectureSpec::lenet5(Shape{1, 28, 28}, 10);
    Network a = Network::build(spec, 99);
    Network b = Network::build(spec, 99);
    const auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].data() == pb[i].data());

    Network c = Network::build(spec, 100);
    bool all_equal = true;
    const auto pc = c.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (pa[i].data() != pc[i].data()) all_equal = false;
    }
    CHECK_FALSE(all_equal);
  }

  TEST_CASE("mlp smoke forward produces finite logits") {
    Network net = Network::build(ArchitectureSpec::mlp(Shape{1, 28, 28}, 10), 7);
    Rng rng(8);
    Tensor x = random_images(rng, Shape{3, 1, 28, 28});
    Tensor logits = net.forward(x);
    CHECK(logits.shape() == Shape{3, 10});
    check_finite(logits, "mlp logits");
  }

  TEST_CASE("build rejects incompatible shapes and degenerate class counts") {
    CHECK_THROWS_AS(Network::build(ArchitectureSpec::lenet5(Shape{1, 28, 28}, 1), 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(Network::build(ArchitectureSpec::lenet5(Shape{1, 8, 8}, 10), 0),
                    std::invalid_argument);  // pooling collapses below the 5x5 kernels
    Network net = Network::build(ArchitectureSpec::lenet5(Shape{1, 28, 28}, 10), 0);
    CHECK_THROWS_AS(net.forward(Tensor(Shape{2, 1, 14, 14}, 0.5)), std::invalid_argument);
  }

  TEST_CASE("predict is argmax and shift-invariant") {
    // A single dense layer makes the logits easy to steer.
    Tensor w(Shape{1, 3}, {0.0, 0.0, 0.0});
    Tensor b(Shape{3}, {0.1, 5.0, -2.0});
    std::vector<std::unique_ptr<Layer>> layers;
    layers.push_back(std::make_unique<DenseLayer>(std::move(w), std::move(b)));
    Network net(ArchitectureSpec::mlp(Shape{1}, 3, {}), std::move(layers));
    Tensor x(Shape{1, 1}, {0.3});
    CHECK(net.predict(x) == std::vector<int>{1});

    Tensor b_shifted(Shape{3}, {0.1 + 7.5, 5.0 + 7.5, -2.0 + 7.5});
    std::vector<std::unique_ptr<Layer>> layers2;
    layers2.push_back(std::make_unique<DenseLayer>(Tensor(Shape{1, 3}, {0.0, 0.0, 0.0}),
                                                   std::move(b_shifted)));
    Network shifted(ArchitectureSpec::mlp(Shape{1}, 3, {}), std::move(layers2));
    CHECK(shifted.predict(x) == std::vector<int>{1});
  }

  TEST_CASE("architecture spec round-trips through its string form") {
    const auto lenet = ArchitectureSpec::lenet5(Shape{1, 28, 28}, 10);
    CHECK(ArchitectureSpec::parse(lenet.to_string()) == lenet);
    const auto mlp = ArchitectureSpec::mlp(Shape{16}, 3, {32, 16});
    CHECK(ArchitectureSpec::parse(mlp.to_string()) == mlp);
    const auto logistic = ArchitectureSpec::mlp(Shape{4}, 2, {});
    CHECK(ArchitectureSpec::parse(logistic.to_string()) == logistic);
    CHECK_THROWS_AS(ArchitectureSpec::parse("lenet5;in=;k=10"), std::invalid_argument);
  }
}

TEST_SUITE("checkpoints") {
  TEST_CASE("save then load keeps predictions identical on 100 random inputs") {
    const auto dir = std::filesystem::temp_directory_path() / "pcr_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "roundtrip.ckpt").string();

    Network net = Network::build(ArchitectureSpec::cnn3(Shape{1, 12, 12}, 4), 21);
    net.save(path);
    Network loaded = Network::load(path);

    Rng rng(31);
    Tensor x = random_images(rng, Shape{100, 1, 12, 12});
    CHECK(net.predict(x) == loaded.predict(x));

    // Bit-exact parameters, not merely agreeing predictions.
    const auto pa = net.parameters(), pb = loaded.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].data() == pb[i].data());
  }

  TEST_CASE("loading with the wrong class count is an explicit error") {
    const auto dir = std::filesystem::temp_directory_path() / "pcr_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "wrong_k.ckpt").string();
    Network::build(ArchitectureSpec::mlp(Shape{8}, 3, {6}), 2).save(path);
    CHECK_THROWS_WITH_AS(Network::load(path, ArchitectureSpec::mlp(Shape{8}, 5, {6})),
                         doctest::Contains("expected"), std::runtime_error);
  }

  TEST_CASE("truncated checkpoint is rejected without a partial network") {
    const auto dir = std::filesystem::temp_directory_path() / "pcr_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "full.ckpt").string();
    Network::build(ArchitectureSpec::mlp(Shape{8}, 3, {6}), 2).save(path);

    const auto size = std::filesystem::file_size(path);
    const std::string cut = (dir / "truncated.ckpt").string();
    {
      std::ifstream in(path, std::ios::binary);
      std::vector<char> bytes(size / 2);
      in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      std::ofstream out(cut, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_WITH_AS(Network::load(cut), doctest::Contains("truncated"), std::runtime_error);
  }

  TEST_CASE("garbage magic is rejected") {
    const auto dir = std::filesystem::temp_directory_path() / "pcr_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "not_a_ckpt.bin").string();
    std::ofstream(path, std::ios::binary) << "definitely not a checkpoint";
    CHECK_THROWS_WITH_AS(Network::load(path), doctest::Contains("magic"), std::runtime_error);
  }
}
