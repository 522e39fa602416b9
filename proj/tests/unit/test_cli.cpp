#include <filesystem>

#include "bswitch/container.hpp"
#include "bswitch/experiment.hpp"
#include "doctest.h"

using namespace bswitch;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(const fs::path& out) {
  const fs::path data = BSWITCH_DATA_DIR;
  ExperimentConfig c;
  c.set("data.mnist_images", (data / "mnist-npm-images-idx3-ubyte").string());
  c.set("data.mnist_labels", (data / "mnist-npm-labels-idx1-ubyte").string());
  c.set("data.test_size", "50");
  c.set("data.train_size", "100");
  c.set("data.attack_size", "2");
  c.set("train.epochs", "1");
  c.set("train.batch_size", "50");
  c.set("train.pool_size", "2");
  c.set("cw.steps", "2");
  c.set("cw.bs_steps", "2");
  c.set("graddist.samples", "4");
  c.set("graddist.pixels", "3");
  c.set("out", out.string());
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig c = ExperimentConfig::parse(
      "# experiment\n"
      "train.epochs = 3   # fewer\n"
      "\n"
      "sweep.channels = 1, 3,5\n");
  CHECK(c.get_size("train.epochs") == 3);
  CHECK(c.get_size_list("sweep.channels") == std::vector<std::size_t>{1, 3, 5});
  CHECK(c.get_double("train.learning_rate") == 0.01);
  CHECK(c.get("defense") == "regular");

  CHECK_THROWS_WITH_AS(ExperimentConfig::parse("train.epochs = 1\nbogus = 2\n", "exp.cfg"),
                       doctest::Contains("exp.cfg:2"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("train.epochs\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/exp.cfg"), ConfigError);

  ExperimentConfig o;
  o.apply_override("seed.attack=11");
  CHECK(o.get_u64("seed.attack") == 11);
  o.set("train.epochs", "two");
  CHECK_THROWS_AS(o.get_size("train.epochs"), ConfigError);
  CHECK_THROWS_AS(o.set("nope", "1"), ConfigError);

  const std::string text = ExperimentConfig().render();
  CHECK(ExperimentConfig::parse(text).render() == text);
  CHECK(ExperimentConfig().as_metadata().at("config.seed.train") == "1");
}

TEST_CASE("pipeline stages") {
  const fs::path out = fresh_dir("bswitch_unit_cli");
  const ExperimentConfig config = tiny_config(out);

  const auto models = cmd_train(config);
  REQUIRE(models.size() == 2);
  const Sequential m0 = load_model(models[0]), m1 = load_model(models[1]);
  CHECK(m0.same_architecture(m1));
  CHECK_FALSE(m0.params() == m1.params());
  CHECK(fs::exists(out / "train.config"));
  CHECK(read_file(out / "train.config") == config.render());
  CHECK(read_container(models[0]).meta.at("config.seed.train") == "1");

  const fs::path sw = cmd_build_switch(config, models);
  CHECK(load_switching(sw).channel_count() == 2);
  const fs::path archive = cmd_attack(config, sw);
  const fs::path report = cmd_eval(config, sw, archive);
  const std::string csv = read_file(report);
  CHECK(csv.find("model,attack,epsilon_or_kappa") != std::string::npos);
  CHECK(csv.find("\nswitching,cw,0,") != std::string::npos);

  SUBCASE("rerunning reproduces outputs bitwise") {
    const std::string before = read_file(archive);
    cmd_attack(config, sw);
    CHECK(read_file(archive) == before);
  }
  SUBCASE("defense=sap on a sequential model file") {
    ExperimentConfig sap = config;
    sap.set("defense", "sap");
    const LoadedTarget t = load_target(sap, models[0]);
    CHECK(t.ref().kind() == ModelRef::Kind::kSap);
    const fs::path h = cmd_graddist(sap, models[0]);
    CHECK(read_file(h).find("pixel,sample_index,value") != std::string::npos);
  }
  SUBCASE("missing inputs are reported") {
    CHECK_THROWS_AS(cmd_attack(config, out / "absent.bsw"), ConfigError);
    ExperimentConfig bad = config;
    bad.set("data.mnist_images", (out / "absent-images").string());
    CHECK_THROWS_AS(cmd_train(bad), ConfigError);
    CHECK_THROWS_AS(cmd_eval(config, sw, sw), ContainerError);
  }
}
