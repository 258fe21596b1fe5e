#include <doctest.h>

#include <fstream>

#include "cdd/checkpoint.hpp"
#include "cdd/errors.hpp"
#include "cdd/hash.hpp"
#include "cdd/io.hpp"
#include "cdd/trainer.hpp"
#include "fixtures.hpp"

using namespace cdd;

TEST_SUITE("checkpoint") {
  TEST_CASE("sha256 of a known string") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }

  TEST_CASE("save and load round-trip every value bit for bit") {
    const NoiseSchedule s = NoiseSchedule::build(fixtures::tiny_schedule());
    TrainConfig tc;
    tc.epochs = 1;
    tc.seed = 3;
    Trainer tr(tc, fixtures::tiny_model(), s);
    Rng rng(1);
    const Dataset d = sample_dataset(make_task(fixtures::tiny_task(), 1), 64, rng);
    tr.train(d);
    const Checkpoint a = tr.checkpoint();
    const auto dir = fixtures::scratch("ckpt_roundtrip");
    save_checkpoint(dir, a);
    const Checkpoint b = load_checkpoint(dir);
    CHECK(b.config_hash() == a.config_hash());
    CHECK(b.rng_state == a.rng_state);
    CHECK(b.epoch == 1);
    CHECK(b.step == a.step);
    REQUIRE(b.base.size() == a.base.size());
    for (std::size_t i = 0; i < a.base.size(); ++i) {
      CHECK(b.base[i].name == a.base[i].name);
      CHECK(b.base[i].values == a.base[i].values);
    }
    REQUIRE(b.optimizer.size() == a.optimizer.size());
    for (std::size_t i = 0; i < a.optimizer.size(); ++i) CHECK(b.optimizer[i].values == a.optimizer[i].values);
    CHECK(b.schedule.T == 4);

    const Denoiser m = restore_model(b);
    const auto pa = tr.model().base_parameters(), pb = m.base_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      const auto x = pa[i].tensor.data(), y = pb[i].tensor.data();
      CHECK(std::equal(x.begin(), x.end(), y.begin()));
    }
  }

  TEST_CASE("a corrupted weight file is an io error") {
    const NoiseSchedule s = NoiseSchedule::build(fixtures::tiny_schedule());
    TrainConfig tc;
    tc.epochs = 0;
    Trainer tr(tc, fixtures::tiny_model(), s);
    const auto dir = fixtures::scratch("ckpt_corrupt");
    save_checkpoint(dir, tr.checkpoint());
    std::string bytes = read_file(dir / "base.bin");
    bytes[10] ^= 0x40;
    write_file(dir / "base.bin", bytes);
    CHECK_THROWS_AS(load_checkpoint(dir), IoError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
  }

  TEST_CASE("fine-tuning refuses a mismatched architecture") {
    const NoiseSchedule s = NoiseSchedule::build(fixtures::tiny_schedule());
    TrainConfig tc;
    tc.epochs = 0;
    Trainer tr(tc, fixtures::tiny_model(), s);
    const Checkpoint base = tr.checkpoint();
    DenoiserConfig other = fixtures::tiny_model();
    other.d_ff = 12;
    TrainConfig ft;
    ft.phase = Phase::finetune_lora;
    LoraConfig l;
    l.r = 2;
    ft.lora = l;
    CHECK_THROWS_AS(Trainer::finetune(ft, base, other, s), ConfigError);
    CHECK_NOTHROW(Trainer::finetune(ft, base, fixtures::tiny_model(), s));
  }
}
