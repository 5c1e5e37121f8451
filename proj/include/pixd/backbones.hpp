#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "pixd/nn.hpp"
#include "pixd/tensor.hpp"

namespace pixd {

enum class Family { kResNet, kShuffle, kToy };
enum class Role { kTeacher, kAssistant, kStudent };

std::string family_name(Family f);
Family family_from_name(const std::string& s);
std::string role_name(Role r);

/// Declarative network description. `depth` selects the resnet variant,
/// `width` the shufflenet variant, `channels` the toy-cnn stage widths.
struct BackboneSpec {
    Family family = Family::kToy;
    int64_t depth = 18;
    double width = 1.0;
    std::vector<int64_t> channels = {16, 32};
    int64_t num_classes = 10;
    int64_t input_resolution = 32;
    int64_t stage_count = 2;  // M

    static BackboneSpec resnet(int64_t depth, int64_t num_classes, int64_t input_resolution);
    static BackboneSpec shufflenet(double width, int64_t num_classes, int64_t input_resolution);
    static BackboneSpec toy(std::vector<int64_t> channels, int64_t num_classes, int64_t input_resolution);

    void validate() const;
    bool same_architecture(const BackboneSpec& other) const;
    std::string describe() const;
};

struct ForwardResult {
    FeatureSet features;  // M stage outputs
    Tensor logits;        // pre-softmax (batch, num_classes)
};

/// An instantiated network with per-stage feature taps and a
/// global-average-pool + linear classifier head.
class Backbone {
public:
    Backbone(const BackboneSpec& spec, Role role, uint64_t seed);

    ForwardResult forward_with_taps(const Tensor& images, bool training = false, bool record = false);

    /// Backward through the recorded pass. `dtaps` entries may be empty
    /// tensors; defined entries inject gradient at that stage output.
    void backward(const Tensor& dlogits, const std::vector<Tensor>& dtaps = {});

    std::vector<nn::NamedParam> parameters();
    std::vector<nn::NamedTensor> state();
    void zero_grad();

    nn::CostSheet cost(int64_t input_resolution) const;
    std::array<int64_t, 2> last_spatial(int64_t input_resolution) const;
    int64_t last_channels() const { return last_channels_; }

    const BackboneSpec& spec() const { return spec_; }
    Role role() const { return role_; }
    uint64_t seed() const { return seed_; }
    const Tensor& classifier_weight() const { return fc_->weight.value; }

private:
    void build_resnet(Rng& rng);
    void build_shufflenet(Rng& rng);
    void build_toy(Rng& rng);

    BackboneSpec spec_;
    Role role_;
    uint64_t seed_;
    int64_t last_channels_ = 0;

    nn::Sequential stem_;
    std::vector<std::unique_ptr<nn::Sequential>> stages_;
    nn::GlobalAvgPool gap_;
    nn::Flatten flatten_;
    std::unique_ptr<nn::Linear> fc_;
};

using BackbonePtr = std::unique_ptr<Backbone>;

BackbonePtr build_backbone(const BackboneSpec& spec, Role role, uint64_t seed);

/// Class activation map: class-weighted sum over channels of the final
/// feature map. `last_map` is (C,H,W) or (1,C,H,W); result is (H,W).
Tensor cam(const Tensor& last_map, const Tensor& classifier_weight, int64_t class_index);

/// Enforces the teacher/assistant/student contract: assistant shares the
/// student architecture and the teacher input resolution.
void validate_tas_trio(const BackboneSpec& teacher, const BackboneSpec& assistant, const BackboneSpec& student);

}  // namespace pixd
