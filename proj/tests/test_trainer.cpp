#include "regiontok/errors.hpp"
#include "regiontok/trainer.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace regiontok;
using namespace regiontok::trainer;
using regiontok::testing::random_tensor;

namespace {

TrainConfig tiny_config(long long pretrain = 4, long long text_face = 0, long long decoder_ft = 0) {
    TrainConfig c;
    c.model.downsample = 4;
    c.model.base_width = 8;
    c.model.res_blocks = 1;
    c.model.codebook_size = 32;
    c.model.embed_dim = 4;
    c.model.seed = 3;
    c.disc = {8, 2, 4};
    c.perceptual.image.layers = 2;
    c.perceptual.text.layers = 2;
    c.perceptual.face.layers = 2;
    c.batch_size = 4;
    c.image_height = 16;
    c.image_width = 16;
    c.seed = 21;
    c.optim.lr = 2e-3;
    c.optim.disc_lr = 2e-3;
    c.schedule = StageSchedule::standard(pretrain, text_face, decoder_ft);
    return c;
}

data::Corpus tiny_corpus(int n, std::uint64_t seed) {
    data::MixedCorpusConfig m;
    m.text.height = m.text.width = 16;
    m.text.max_strings = 2;
    m.text.max_length = 2;
    m.text.scales = {1};
    m.face.height = m.face.width = 16;
    m.face.min_size = 9;
    m.face.max_size = 12;
    m.face.max_faces = 1;
    return data::generate_mixed_corpus(n, m, seed);
}

std::string first_error(const TrainConfig& c) {
    const auto e = c.validation_errors();
    return e.empty() ? std::string() : e.front();
}

} // namespace

TEST(Trainer, DefaultHyperparameters) {
    const LossWeights w;
    EXPECT_EQ(w.beta, 0.02);
    EXPECT_EQ(w.gamma, 0.5);
    EXPECT_EQ(w.eta, 0.5);
    EXPECT_EQ(w.alpha_text, 1.0);
    EXPECT_EQ(w.alpha_face, 1.0);
    const OptimizerConfig o;
    EXPECT_EQ(o.beta1, 0.5);
    EXPECT_EQ(o.beta2, 0.9);
    EXPECT_EQ(o.clip_norm, 1.0);
    EXPECT_EQ(o.weight_decay, 0.05);
    EXPECT_EQ(o.warmup_fraction, 0.05);
    const auto s = StageSchedule::standard(200000, 40000, 40000);
    EXPECT_EQ(s.stages[0].weights.alpha_text, 0.0);
    EXPECT_EQ(s.stages[2].weights.alpha_text, 0.1);
    EXPECT_EQ(s.stages[2].weights.alpha_face, 0.1);
    EXPECT_FALSE(s.stages[2].mask.encoder);
    EXPECT_FALSE(s.stages[2].mask.quantizer);
    EXPECT_EQ(s.total_steps(), 280000);
}

TEST(Trainer, ConfigValidationListsEveryViolation) {
    auto c = tiny_config();
    EXPECT_TRUE(c.validation_errors().empty());
    c.schedule.stages[0].weights.alpha_text = 0.5;
    c.schedule.stages[2].mask.encoder = true;
    c.optim.lr = -1.0;
    const auto errors = c.validation_errors();
    EXPECT_EQ(errors.size(), 3u);
    try {
        c.validate();
        FAIL();
    } catch (const ValueError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("optimizer.lr"), std::string::npos) << msg;
        EXPECT_NE(msg.find("schedule[0]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("schedule[2]"), std::string::npos) << msg;
    }
    auto d = tiny_config();
    d.image_width = 18;
    EXPECT_NE(first_error(d).find("image_size"), std::string::npos) << first_error(d);
}

TEST(Trainer, ConfigJsonRoundTrip) {
    auto c = tiny_config(5, 6, 7);
    c.schedule.stages[1].lr = 3e-4;
    c.train_manifest = "data/manifest.jsonl";
    c.perceptual.region.area_weighting = false;
    const auto back = TrainConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.schedule.stages, c.schedule.stages);
    EXPECT_EQ(back.fingerprint(), c.fingerprint());
    EXPECT_FALSE(back.perceptual.region.area_weighting);
}

TEST(Trainer, ConfigJsonErrorsNameThePath) {
    auto expect_error = [](const std::string& text, const std::string& needle) {
        try {
            TrainConfig::from_json(text);
            FAIL() << "accepted: " << text;
        } catch (const Error& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_error(R"({"model": {"downsampel": 4}})", "model.downsampel");
    expect_error(R"({"optimizer": {"lr": "fast"}})", "optimizer.lr");
    expect_error(R"({"schedule": [{"kind": "warmup", "steps": 3}]})", "schedule[0].kind");
    expect_error(R"({"batch_size": 0})", "batch_size");
    expect_error("{not json", "");
}

TEST(Trainer, LossBreakdownSumsToTotal) {
    auto c = tiny_config();
    const Trainer t(c);
    const auto corpus = tiny_corpus(4, 31);
    data::BatchIterator it(corpus, 4, 1);
    const auto batch = it.next();
    const auto fw = t.tokenizer().forward(ad::constant(batch.images));
    const LossWeights w;
    const auto res = total_loss(batch.images, fw.reconstruction, fw.latent_rows, fw.assignment.quantized, batch.regions, w,
                                t.extractors(), &t.discriminator());
    EXPECT_NEAR(res.total.item(), res.weighted.sum(), 1e-9);
    // Straight-line recomputation from the raw terms.
    const double manual = res.raw.reconstruction + w.beta * res.raw.commitment + w.gamma * res.raw.perceptual +
                          w.eta * res.raw.adversarial + w.alpha_text * res.raw.text + w.alpha_face * res.raw.face;
    EXPECT_NEAR(res.total.item(), manual, 1e-9);
    EXPECT_GT(res.raw.text + res.raw.face, 0.0);

    const LossWeights zero{0, 0, 0, 0, 0};
    const auto l1 = total_loss(batch.images, fw.reconstruction, fw.latent_rows, fw.assignment.quantized, batch.regions,
                               zero, t.extractors(), &t.discriminator());
    double want = 0.0;
    const auto& xh = fw.reconstruction.value();
    for (std::size_t i = 0; i < xh.numel(); ++i) want += std::abs(xh.data[i] - batch.images.data[i]);
    EXPECT_NEAR(l1.total.item(), want / xh.numel(), 1e-12);

    const auto same = total_loss(batch.images, ad::constant(batch.images), fw.latent_rows,
                                 fw.latent_rows.value(), batch.regions, w, t.extractors(), &t.discriminator());
    EXPECT_EQ(same.raw.reconstruction, 0.0);
    EXPECT_EQ(same.raw.commitment, 0.0);
    EXPECT_EQ(same.raw.perceptual, 0.0);
    EXPECT_EQ(same.raw.text, 0.0);
    EXPECT_EQ(same.raw.face, 0.0);
}

TEST(Trainer, SameSeedIsBitwiseDeterministic) {
    const auto corpus = tiny_corpus(8, 32);
    Trainer a(tiny_config(10)), b(tiny_config(10));
    a.run(corpus);
    b.run(corpus);
    EXPECT_EQ(a.state_bytes(), b.state_bytes());
    auto c = tiny_config(10);
    c.seed = 22;
    Trainer d(c);
    d.run(corpus);
    EXPECT_NE(a.state_bytes(), d.state_bytes());
}

TEST(Trainer, FrozenMaskKeepsWeightsButUpdatesCodebook) {
    auto c = tiny_config(2);
    c.schedule.stages[0].mask = {false, true, false, false};
    Trainer t(c);
    const auto before = t.generator_params();
    std::vector<std::vector<double>> values;
    for (const auto& [name, v] : before.items()) values.push_back(v.value().data);
    const auto disc_before = t.discriminator().params().items()[0].second.value().data;
    const auto cb_before = t.tokenizer().codebook().cluster_sum.data;
    t.run(tiny_corpus(8, 33));
    const auto after = t.generator_params();
    for (std::size_t i = 0; i < values.size(); ++i) EXPECT_EQ(after.items()[i].second.value().data, values[i]);
    EXPECT_EQ(t.discriminator().params().items()[0].second.value().data, disc_before);
    EXPECT_NE(t.tokenizer().codebook().cluster_sum.data, cb_before);
}

TEST(Trainer, DecoderFinetuneKeepsTokensIdentical) {
    const auto corpus = tiny_corpus(8, 34);
    Trainer t(tiny_config(3, 0, 3));
    t.run(corpus, 3);
    const Tensor probe = random_tensor({2, 3, 16, 16}, 35, 0.0, 1.0);
    const auto tokens = t.tokenizer().tokenize(probe);
    const auto enc = t.tokenizer().encode(ad::constant(probe)).value().data;
    const auto dec = t.tokenizer().decoder_params().items()[0].second.value().data;
    t.run(corpus);
    EXPECT_TRUE(t.finished());
    EXPECT_EQ(t.tokenizer().tokenize(probe), tokens);
    EXPECT_EQ(t.tokenizer().encode(ad::constant(probe)).value().data, enc);
    EXPECT_NE(t.tokenizer().decoder_params().items()[0].second.value().data, dec);
}

TEST(Trainer, ZeroStepScheduleLeavesInitialState) {
    Trainer a(tiny_config(0, 0, 0)), b(tiny_config(0, 0, 0));
    EXPECT_EQ(a.run(tiny_corpus(4, 36)), 0);
    EXPECT_TRUE(a.finished());
    EXPECT_EQ(a.tokenizer().encoder_params().items()[0].second.value().data,
              b.tokenizer().encoder_params().items()[0].second.value().data);
}

TEST(Trainer, CheckpointRoundTripIsBitExact) {
    const auto dir = regiontok::testing::temp_dir("trainer_ckpt");
    const auto corpus = tiny_corpus(8, 37);
    Trainer a(tiny_config(3, 3));
    a.run(corpus, 4);
    a.save_checkpoint(dir + "/a.ckpt");
    Trainer b(tiny_config(3, 3));
    b.load_checkpoint(dir + "/a.ckpt");
    EXPECT_EQ(a.state_bytes(), b.state_bytes());
    EXPECT_EQ(b.position(), (Position{1, 1, 4}));
    a.run(corpus, 1);
    b.run(corpus, 1);
    EXPECT_EQ(a.state_bytes(), b.state_bytes());
    Trainer c = Trainer::from_checkpoint(dir + "/a.ckpt");
    c.run(corpus, 1);
    EXPECT_EQ(a.state_bytes(), c.state_bytes());
}

TEST(Trainer, CheckpointRejectsTamperingAndMismatch) {
    const auto dir = regiontok::testing::temp_dir("trainer_ckpt_bad");
    Trainer a(tiny_config(1));
    a.save_checkpoint(dir + "/a.ckpt");
    auto other = tiny_config(1);
    other.model.codebook_size = 64;
    Trainer b(other);
    EXPECT_THROW(b.load_checkpoint(dir + "/a.ckpt"), ConfigMismatchError);

    std::string bytes;
    {
        std::ifstream in(dir + "/a.ckpt", std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    bytes[bytes.size() / 2] ^= 0x10;
    {
        std::ofstream out(dir + "/bad.ckpt", std::ios::binary);
        out << bytes;
    }
    Trainer c(tiny_config(1));
    EXPECT_THROW(c.load_checkpoint(dir + "/bad.ckpt"), ChecksumError);
}

TEST(Trainer, ZeroRegionWeightsMatchPlainTrainer) {
    const auto corpus = tiny_corpus(8, 38);
    auto with = tiny_config(2, 4);
    with.schedule.stages[1].weights.alpha_text = 0.0;
    with.schedule.stages[1].weights.alpha_face = 0.0;
    auto plain = with;
    plain.perceptual.region_losses = false;
    Trainer a(with), b(plain);
    EXPECT_TRUE(a.extractors().text.has_value());
    EXPECT_FALSE(b.extractors().text.has_value());
    // Same batches for both; the plain trainer never reads the annotations.
    a.run(corpus);
    b.run(corpus);
    EXPECT_EQ(a.tokenizer().codebook().embeddings.data, b.tokenizer().codebook().embeddings.data);
    for (std::size_t i = 0; i < a.generator_params().size(); ++i)
        EXPECT_EQ(a.generator_params().items()[i].second.value().data,
                  b.generator_params().items()[i].second.value().data);
}

TEST(Trainer, NonFiniteLossAborts) {
    Trainer t(tiny_config(1));
    data::Batch batch;
    batch.images = Tensor({4, 3, 16, 16}, 0.5);
    batch.images.data[7] = std::nan("");
    batch.regions.resize(4);
    batch.indices = {0, 1, 2, 3};
    EXPECT_THROW(t.train_step(batch, Stage::pretrain(1), 0), NonFiniteError);
}

TEST(Trainer, SmokeTrainingHalvesReconstructionLoss) {
    auto c = tiny_config(200);
    c.schedule.stages[0].weights.eta = 0.0;
    c.batch_size = 8;
    c.model.downsample = 2;
    c.model.base_width = 16;
    c.model.codebook_size = 64;
    c.model.embed_dim = 8;
    Trainer t(c);
    std::vector<double> l1;
    t.run(tiny_corpus(32, 39), -1, [&](const StepLog& log) { l1.push_back(log.raw.reconstruction); });
    ASSERT_EQ(l1.size(), 200u);
    auto window = [&](std::size_t from) {
        double s = 0.0;
        for (std::size_t i = from; i < from + 10; ++i) s += l1[i];
        return s / 10.0;
    };
    EXPECT_LT(window(190), 0.5 * window(0));
}

TEST(Trainer, StepLogCsv) {
    EXPECT_EQ(StepLog::csv_header(),
              "global_step,stage,stage_step,lr,eta,rec,commit,perc,gan,text,face,total,grad_norm,d_loss,restarts,"
              "utilization,annotated");
    StepLog s;
    s.global_step = 3;
    const auto row = s.csv_row();
    EXPECT_EQ(std::count(row.begin(), row.end(), ','), 16);
}
