#pragma once

#include "upgd/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace upgd {

/// One learner-facing minibatch. Nothing about the task schedule leaks in.
struct Batch {
    Matrix inputs;            // [batch x d]
    Matrix targets;           // [batch x m]; one-hot rows for classification
    std::vector<int> labels;  // class indices, empty for regression
};

struct MnistDataset {
    Matrix images;            // [count x rows*cols], values in [0, 1]
    std::vector<int> labels;  // 0..9
    std::size_t rows = 28;
    std::size_t cols = 28;

    [[nodiscard]] std::size_t size() const { return labels.size(); }
};

/// Reads an IDX image/label file pair (big-endian, magics 0x803 and 0x801).
/// Throws BadMagic, TruncatedFile or CountMismatch.
[[nodiscard]] MnistDataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);

/// load_mnist on the conventional training file names inside `dir`.
[[nodiscard]] MnistDataset load_mnist_dir(const std::filesystem::path& dir);

struct StationaryMnist {};

struct LabelPermutedMnist {
    std::int64_t period = 1000;
    bool identity_first = false;  // first task keeps the original labels
};

/// y = s * (x_i + x_j) with the sign s flipping every `period` steps.
struct ChangingAdder {
    int n_inputs = 16;
    std::int64_t period = 100;
};

/// y = x_i + x_j with (i, j) moving to a disjoint pair every `period` steps.
struct PermutedAdder {
    int n_inputs = 16;
    std::int64_t period = 100;
};

/// Stationary y = x_0 + x_1 over five inputs.
struct UtilityProbeAdder {
    int n_inputs = 5;
};

using StreamKind = std::variant<StationaryMnist, LabelPermutedMnist, ChangingAdder, PermutedAdder, UtilityProbeAdder>;

[[nodiscard]] std::string stream_name(const StreamKind& kind);
[[nodiscard]] bool is_classification(const StreamKind& kind);
[[nodiscard]] bool needs_mnist(const StreamKind& kind);
/// Steps per task; 0 for stationary streams.
[[nodiscard]] std::int64_t task_period(const StreamKind& kind);

/// Cycles through the n/2 disjoint pairs (0,1), (2,3), ...; each later cycle
/// visits them in a shuffled order whose first pair differs from the last pair
/// of the previous cycle, so consecutive tasks never share an input.
class PairSchedule {
public:
    PairSchedule(int n_inputs, std::mt19937_64 rng);

    [[nodiscard]] std::pair<int, int> pair(std::int64_t task_index);

private:
    int n_inputs_;
    std::mt19937_64 rng_;
    std::vector<int> order_;  // pair ids, concatenated cycles
};

[[nodiscard]] std::pair<int, int> pair_schedule(int n_inputs, std::int64_t task_index, std::mt19937_64 rng);

/// Infinite stream of batches following a hidden non-stationary schedule.
class TaskStream {
public:
    TaskStream(StreamKind kind, std::uint64_t seed, std::size_t batch_size = 32,
               std::shared_ptr<const MnistDataset> mnist = nullptr);

    [[nodiscard]] Batch next_batch();

    [[nodiscard]] std::size_t input_size() const;
    [[nodiscard]] std::size_t output_size() const;
    [[nodiscard]] const StreamKind& kind() const { return kind_; }
    [[nodiscard]] std::int64_t steps() const { return step_; }

private:
    Batch adder_batch(int first, int second, double sign);
    Batch mnist_batch();

    StreamKind kind_;
    std::size_t batch_size_;
    std::shared_ptr<const MnistDataset> mnist_;
    std::mt19937_64 data_rng_;
    std::mt19937_64 schedule_rng_;
    std::int64_t step_ = 0;

    std::unique_ptr<PairSchedule> pairs_;
    std::vector<int> label_map_;
};

}  // namespace upgd
