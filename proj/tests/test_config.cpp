#include "muesli/config.hpp"
#include "muesli/experiment.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace muesli;

TEST(Config, DefaultsMatchTrainer) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.train.batch_size, 32u);
  EXPECT_EQ(cfg.train.sequence_length, 10u);
  EXPECT_EQ(cfg.train.unroll_length, 5u);
  EXPECT_EQ(cfg.train.replay_fraction, 0.75);
  EXPECT_EQ(cfg.train.target_alpha, 0.1);
  EXPECT_EQ(cfg.train.learning_rate, 3e-4);
  EXPECT_EQ(cfg.train.update.policy_loss_weight, 3.0);
  EXPECT_EQ(cfg.train.update.lambda_cmpo, 1.0);
  EXPECT_EQ(cfg.train.update.clip_c, 1.0);
  EXPECT_EQ(config_value(cfg, "entropy_weight"), "default");
}

TEST(Config, ParsesFile) {
  std::istringstream in(
      "# comment\n"
      "mdp = random   # trailing\n"
      "random_states=6\n"
      "\n"
      "variant = ppo\n"
      "learning_rate = 1e-3\n"
      "model_policy_loss = false\n"
      "representation = mlp\n"
      "return_estimator = vtrace\n");
  const RunConfig cfg = parse_config(in);
  EXPECT_EQ(cfg.mdp, MdpSource::random);
  EXPECT_EQ(cfg.random_states, 6u);
  EXPECT_EQ(cfg.train.update.variant, Variant::ppo);
  EXPECT_EQ(cfg.train.learning_rate, 1e-3);
  EXPECT_FALSE(cfg.train.model_policy_loss);
  EXPECT_EQ(cfg.train.representation, Representation::mlp);
  EXPECT_EQ(cfg.train.return_estimator, ReturnEstimator::vtrace);
  EXPECT_EQ(cfg.build_mdp().num_states(), 6u);
}

TEST(Config, ErrorsCarryLineNumbers) {
  std::istringstream in("seed = 1\nbogus = 2\n");
  try {
    parse_config(in);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Config, RejectsBadValues) {
  RunConfig cfg;
  EXPECT_THROW(apply_setting(cfg, "batch_size = -3"), ConfigError);
  EXPECT_THROW(apply_setting(cfg, "learning_rate = 1e-3x"), ConfigError);
  EXPECT_THROW(apply_setting(cfg, "model_policy_loss = maybe"), ConfigError);
  EXPECT_THROW(apply_setting(cfg, "variant = sac"), std::invalid_argument);
  EXPECT_THROW(apply_setting(cfg, "no equals sign"), ConfigError);
}

TEST(Config, PrintedConfigParsesBack) {
  RunConfig cfg;
  apply_setting(cfg, "random_discount = 0.9");
  apply_setting(cfg, "learning_rate = 0.1");
  apply_setting(cfg, "entropy_weight = 0.25");
  apply_setting(cfg, "seed = 12345678901");
  apply_setting(cfg, "run_name = sweep_a");
  std::stringstream ss;
  print_config(ss, cfg);
  EXPECT_NE(ss.str().find("= 0.9 "), std::string::npos);
  const RunConfig back = parse_config(ss);
  for (const auto& key : config_keys()) EXPECT_EQ(config_value(back, key), config_value(cfg, key)) << key;
}

TEST(Config, LaterSettingsOverride) {
  std::istringstream in("seed = 4\n");
  RunConfig cfg = parse_config(in);
  apply_setting(cfg, "seed=9");
  EXPECT_EQ(cfg.train.seed, 9u);
  EXPECT_EQ(cfg.train.update.entropy(), 0.0);
  apply_setting(cfg, "entropy_weight = default");
  EXPECT_FALSE(cfg.train.update.entropy_weight.has_value());
}

TEST(Config, ValidationCatchesInconsistency) {
  RunConfig cfg;
  apply_setting(cfg, "mdp = file");
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  RunConfig other;
  apply_setting(other, "unroll_length = 9");
  EXPECT_THROW(other.validate(), std::invalid_argument);
}

TEST(Config, SummaryRoundTrip) {
  RunConfig cfg;
  cfg.run_name = "abc";
  RunSummary s;
  s.policy = aliased_policy(0.625);
  s.final_J = 0.5625;
  s.tv_max = 0.1;
  std::stringstream ss;
  write_summary(ss, cfg, s, 42);
  const auto m = read_summary(ss);
  EXPECT_EQ(m.at("run_name"), "abc");
  EXPECT_EQ(m.at("steps"), "42");
  EXPECT_EQ(std::stod(m.at("final_J")), 0.5625);
  EXPECT_EQ(m.at("greedy"), "0 0");
  EXPECT_EQ(m.at("variant"), "muesli");
}
