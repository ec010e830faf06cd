#pragma once

// Composite objective, staged training loop, configuration and checkpoints.

#include "regiontok/adversarial.hpp"
#include "regiontok/autoencoder.hpp"
#include "regiontok/data.hpp"
#include "regiontok/perceptual.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace regiontok::trainer {

struct LossWeights {
    double beta = 0.02;      // commitment
    double gamma = 0.5;      // image perceptual
    double eta = 0.5;        // adversarial
    double alpha_text = 1.0; // localized text
    double alpha_face = 1.0; // localized face

    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct ComponentMask {
    bool encoder = true;
    bool quantizer = true; // EMA update and restarts
    bool decoder = true;
    bool discriminator = true;

    friend bool operator==(const ComponentMask&, const ComponentMask&) = default;
};

enum class StageKind { Pretrain, TextFace, DecoderFinetune };
const char* to_string(StageKind kind);
StageKind stage_kind_from_string(const std::string& s);

struct Stage {
    StageKind kind = StageKind::Pretrain;
    long long steps = 0;
    LossWeights weights;
    ComponentMask mask;
    // < 0: uniform draws over the corpus; otherwise the annotated share of each batch.
    double annotated_fraction = -1.0;
    // The adversarial weight ramps linearly from 0 over this share of the stage.
    double gan_warmup_fraction = 0.0;
    std::optional<double> lr; // overrides the optimizer learning rate

    static Stage pretrain(long long steps);
    static Stage text_face(long long steps);
    static Stage decoder_finetune(long long steps);

    friend bool operator==(const Stage&, const Stage&) = default;
};

struct StageSchedule {
    std::vector<Stage> stages;

    // pretrain -> text_face -> decoder_ft with the default weights.
    static StageSchedule standard(long long pretrain, long long text_face, long long decoder_ft);
    long long total_steps() const;
};

struct OptimizerConfig {
    double lr = 1e-4;
    double disc_lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.9;
    double clip_norm = 1.0;
    double weight_decay = 0.05;
    double warmup_fraction = 0.05;
};

struct ExtractorSettings {
    perceptual::ExtractorKind kind = perceptual::ExtractorKind::SeededRandomConv;
    std::uint64_t seed = 11;
    int layers = 5;
    std::string path; // for External
};

struct PerceptualConfig {
    ExtractorSettings image{perceptual::ExtractorKind::SeededRandomConv, 11, 3, {}};
    ExtractorSettings text{perceptual::ExtractorKind::SeededRandomConv, 12, 5, {}};
    ExtractorSettings face{perceptual::ExtractorKind::SeededRandomConv, 13, 5, {}};
    perceptual::RegionLossOptions region;
    // false builds the plain reconstruction + GAN trainer: no region extractors exist.
    bool region_losses = true;
};

struct TrainConfig {
    autoencoder::AutoencoderConfig model;
    adversarial::DiscriminatorConfig disc;
    OptimizerConfig optim;
    PerceptualConfig perceptual;
    StageSchedule schedule;
    int batch_size = 8;
    int image_height = 32;
    int image_width = 32;
    std::uint64_t seed = 0;
    std::string train_manifest;
    std::string output_dir;

    // Every violated field, one message each.
    std::vector<std::string> validation_errors() const;
    // Throws ValueError listing all violations.
    void validate() const;
    // Architecture identity; checkpoints refuse to load across differing fingerprints.
    std::string fingerprint() const;

    std::string to_json() const;
    // Unknown keys and type errors are reported with their JSON path.
    static TrainConfig from_json(const std::string& text);
    static TrainConfig load(const std::string& path);
};

struct LossTerms {
    double reconstruction = 0.0;
    double commitment = 0.0;
    double perceptual = 0.0;
    double adversarial = 0.0;
    double text = 0.0;
    double face = 0.0;

    double sum() const { return reconstruction + commitment + perceptual + adversarial + text + face; }
};

struct LossResult {
    ad::Var total;
    LossTerms raw;      // unweighted term values
    LossTerms weighted; // weight * raw; sums to total
};

struct Extractors {
    std::optional<perceptual::FeatureExtractor> image;
    std::optional<perceptual::FeatureExtractor> text;
    std::optional<perceptual::FeatureExtractor> face;
    perceptual::ChannelWeights image_weights;
    geometry::LandmarkSet face_template = geometry::default_face_template();
    perceptual::RegionLossOptions region;
};

Extractors make_extractors(const PerceptualConfig& config, int image_h, int image_w);

// L1 + beta * commitment + gamma * perceptual + eta * GAN + alpha_text * text + alpha_face * face.
// Terms whose weight is 0 are not evaluated. Region losses are averaged over
// the batch; `regions` holds one list per image.
LossResult total_loss(const Tensor& x, const ad::Var& x_hat, const ad::Var& z_rows, const Tensor& zq_rows,
                      const std::vector<std::vector<RegionAnnotation>>& regions, const LossWeights& weights,
                      const Extractors& extractors, const adversarial::Discriminator* discriminator);

struct StepLog {
    long long global_step = 0;
    std::size_t stage = 0;
    long long stage_step = 0;
    double lr = 0.0;
    double eta = 0.0;
    LossTerms raw;
    LossTerms weighted;
    double total = 0.0;
    double grad_norm = 0.0;
    double d_loss = 0.0;
    int restarts = 0;
    double utilization = 0.0; // batch-level
    int annotated = 0;

    static std::string csv_header();
    std::string csv_row() const;
};

struct Position {
    std::size_t stage = 0;
    long long stage_step = 0;
    long long global_step = 0;

    friend bool operator==(const Position&, const Position&) = default;
};

class Trainer {
public:
    static constexpr std::string_view kCheckpointMagic = "RTKCKPT1";
    static constexpr std::uint32_t kCheckpointVersion = 1;

    explicit Trainer(TrainConfig config);

    const TrainConfig& config() const { return config_; }
    autoencoder::Tokenizer& tokenizer() { return tokenizer_; }
    const autoencoder::Tokenizer& tokenizer() const { return tokenizer_; }
    const adversarial::Discriminator& discriminator() const { return discriminator_; }
    const adversarial::LeCamState& lecam_state() const { return lecam_; }
    const Extractors& extractors() const { return extractors_; }
    const Position& position() const { return position_; }
    bool finished() const { return position_.stage >= config_.schedule.stages.size(); }

    // One generator update, one discriminator update and one codebook
    // update on `batch`, under `stage` at step `stage_step` of that stage.
    StepLog train_step(const data::Batch& batch, const Stage& stage, long long stage_step);

    using StepCallback = std::function<void(const StepLog&)>;
    using StageCallback = std::function<void(std::size_t stage)>;
    // Continues the schedule from the current position. Stops after
    // max_steps steps when max_steps >= 0. Returns the number of steps run.
    long long run(const data::Corpus& corpus, long long max_steps = -1, const StepCallback& on_step = {},
                  const StageCallback& on_stage_end = {});

    void save_checkpoint(const std::string& path) const;
    // Throws ConfigMismatchError when the checkpoint was written under a
    // different architecture, ChecksumError / VersionError on corrupt files.
    void load_checkpoint(const std::string& path);
    // Rebuilds a trainer from the configuration stored in a checkpoint.
    static Trainer from_checkpoint(const std::string& path);

    nn::ParamList generator_params() const;

    // Canonical serialized training state (parameters, codebook, optimizer
    // moments, RNG and iterator state, position); also the checkpoint payload.
    std::string state_bytes() const;

private:
    TrainConfig config_;
    autoencoder::Tokenizer tokenizer_;
    adversarial::Discriminator discriminator_;
    adversarial::LeCamState lecam_;
    Extractors extractors_;
    nn::Adam gen_opt_;
    nn::Adam disc_opt_;
    Rng restart_rng_;
    Position position_;
    std::string iterator_state_;
};

} // namespace regiontok::trainer
