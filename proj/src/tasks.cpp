#include "upgd/tasks.hpp"

#include "upgd/errors.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>

namespace upgd {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;
constexpr std::uint64_t kDataStream = 0x64617461ULL;
constexpr std::uint64_t kScheduleStream = 0x73636864ULL;

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DatasetNotLoaded("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::filesystem::path& path) {
    if (bytes.size() < offset + 4) {
        throw TruncatedFile(path.string() + ": header truncated");
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

MnistDataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto image_bytes = read_file(images);
    const auto label_bytes = read_file(labels);

    if (read_be32(image_bytes, 0, images) != kImagesMagic) {
        throw BadMagic(images.string() + ": not an IDX image file");
    }
    if (read_be32(label_bytes, 0, labels) != kLabelsMagic) {
        throw BadMagic(labels.string() + ": not an IDX label file");
    }
    const std::size_t count = read_be32(image_bytes, 4, images);
    const std::size_t rows = read_be32(image_bytes, 8, images);
    const std::size_t cols = read_be32(image_bytes, 12, images);
    const std::size_t label_count = read_be32(label_bytes, 4, labels);
    if (count != label_count) {
        throw CountMismatch(std::to_string(count) + " images but " + std::to_string(label_count) + " labels");
    }
    const std::size_t pixels = rows * cols;
    if (image_bytes.size() < 16 + count * pixels) {
        throw TruncatedFile(images.string() + ": pixel data truncated");
    }
    if (label_bytes.size() < 8 + count) {
        throw TruncatedFile(labels.string() + ": label data truncated");
    }

    MnistDataset data;
    data.rows = rows;
    data.cols = cols;
    data.images.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(pixels));
    for (std::size_t n = 0; n < count; ++n) {
        for (std::size_t p = 0; p < pixels; ++p) {
            data.images(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p)) =
                static_cast<double>(image_bytes[16 + n * pixels + p]) / 255.0;
        }
    }
    data.labels.resize(count);
    for (std::size_t n = 0; n < count; ++n) {
        const int label = label_bytes[8 + n];
        if (label > 9) {
            throw Error(labels.string() + ": label out of range at index " + std::to_string(n));
        }
        data.labels[n] = label;
    }
    return data;
}

MnistDataset load_mnist_dir(const std::filesystem::path& dir) {
    return load_mnist(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
}

std::string stream_name(const StreamKind& kind) {
    struct Visitor {
        std::string operator()(const StationaryMnist&) const { return "stationary_mnist"; }
        std::string operator()(const LabelPermutedMnist&) const { return "label_permuted_mnist"; }
        std::string operator()(const ChangingAdder&) const { return "changing_adder"; }
        std::string operator()(const PermutedAdder&) const { return "permuted_adder"; }
        std::string operator()(const UtilityProbeAdder&) const { return "utility_probe_adder"; }
    };
    return std::visit(Visitor{}, kind);
}

bool is_classification(const StreamKind& kind) {
    return std::holds_alternative<StationaryMnist>(kind) || std::holds_alternative<LabelPermutedMnist>(kind);
}

bool needs_mnist(const StreamKind& kind) { return is_classification(kind); }

std::int64_t task_period(const StreamKind& kind) {
    if (const auto* k = std::get_if<LabelPermutedMnist>(&kind)) return k->period;
    if (const auto* k = std::get_if<ChangingAdder>(&kind)) return k->period;
    if (const auto* k = std::get_if<PermutedAdder>(&kind)) return k->period;
    return 0;
}

PairSchedule::PairSchedule(int n_inputs, std::mt19937_64 rng) : n_inputs_(n_inputs), rng_(rng) {
    if (n_inputs < 4 || n_inputs % 2 != 0) {
        throw InvalidArgument("pair schedule needs an even input count of at least 4");
    }
    order_.resize(static_cast<std::size_t>(n_inputs / 2));
    std::iota(order_.begin(), order_.end(), 0);
}

std::pair<int, int> PairSchedule::pair(std::int64_t task_index) {
    if (task_index < 0) {
        throw InvalidArgument("negative task index");
    }
    const auto cycle = static_cast<std::size_t>(n_inputs_ / 2);
    while (order_.size() <= static_cast<std::size_t>(task_index)) {
        std::vector<int> next(cycle);
        std::iota(next.begin(), next.end(), 0);
        do {
            std::shuffle(next.begin(), next.end(), rng_);
        } while (next.front() == order_.back());
        order_.insert(order_.end(), next.begin(), next.end());
    }
    const int id = order_[static_cast<std::size_t>(task_index)];
    return {2 * id, 2 * id + 1};
}

std::pair<int, int> pair_schedule(int n_inputs, std::int64_t task_index, std::mt19937_64 rng) {
    PairSchedule schedule(n_inputs, rng);
    return schedule.pair(task_index);
}

TaskStream::TaskStream(StreamKind kind, std::uint64_t seed, std::size_t batch_size,
                       std::shared_ptr<const MnistDataset> mnist)
    : kind_(kind),
      batch_size_(batch_size),
      mnist_(std::move(mnist)),
      data_rng_(stream_rng(seed, kDataStream)),
      schedule_rng_(stream_rng(seed, kScheduleStream)) {
    if (batch_size_ == 0) {
        throw InvalidArgument("batch size must be positive");
    }
    if (task_period(kind_) < 0 || (!std::holds_alternative<StationaryMnist>(kind_) &&
                                   !std::holds_alternative<UtilityProbeAdder>(kind_) && task_period(kind_) == 0)) {
        throw InvalidArgument("task period must be positive");
    }
    if (needs_mnist(kind_) && (!mnist_ || mnist_->size() == 0)) {
        throw DatasetNotLoaded("MNIST stream requested but no dataset is loaded");
    }
    if (const auto* k = std::get_if<PermutedAdder>(&kind_)) {
        pairs_ = std::make_unique<PairSchedule>(k->n_inputs, schedule_rng_);
    }
    if (const auto* k = std::get_if<ChangingAdder>(&kind_); k && k->n_inputs < 2) {
        throw InvalidArgument("adder streams need at least two inputs");
    }
    if (const auto* k = std::get_if<UtilityProbeAdder>(&kind_); k && k->n_inputs < 2) {
        throw InvalidArgument("adder streams need at least two inputs");
    }
}

std::size_t TaskStream::input_size() const {
    if (const auto* k = std::get_if<ChangingAdder>(&kind_)) return static_cast<std::size_t>(k->n_inputs);
    if (const auto* k = std::get_if<PermutedAdder>(&kind_)) return static_cast<std::size_t>(k->n_inputs);
    if (const auto* k = std::get_if<UtilityProbeAdder>(&kind_)) return static_cast<std::size_t>(k->n_inputs);
    return static_cast<std::size_t>(mnist_->images.cols());
}

std::size_t TaskStream::output_size() const { return is_classification(kind_) ? 10 : 1; }

Batch TaskStream::adder_batch(int first, int second, double sign) {
    const auto n = static_cast<Eigen::Index>(input_size());
    const auto b = static_cast<Eigen::Index>(batch_size_);
    std::uniform_real_distribution<double> uniform(-0.5, 0.5);
    Batch batch{Matrix(b, n), Matrix(b, 1), {}};
    for (Eigen::Index r = 0; r < b; ++r) {
        for (Eigen::Index c = 0; c < n; ++c) {
            batch.inputs(r, c) = uniform(data_rng_);
        }
        batch.targets(r, 0) = sign * (batch.inputs(r, first) + batch.inputs(r, second));
    }
    return batch;
}

Batch TaskStream::mnist_batch() {
    const auto b = static_cast<Eigen::Index>(batch_size_);
    std::uniform_int_distribution<std::size_t> pick(0, mnist_->size() - 1);
    Batch batch{Matrix(b, mnist_->images.cols()), Matrix::Zero(b, 10), std::vector<int>(batch_size_)};
    for (Eigen::Index r = 0; r < b; ++r) {
        const auto idx = pick(data_rng_);
        batch.inputs.row(r) = mnist_->images.row(static_cast<Eigen::Index>(idx));
        int label = mnist_->labels[idx];
        if (!label_map_.empty()) {
            label = label_map_[static_cast<std::size_t>(label)];
        }
        batch.labels[static_cast<std::size_t>(r)] = label;
        batch.targets(r, label) = 1.0;
    }
    return batch;
}

Batch TaskStream::next_batch() {
    const std::int64_t t = step_++;
    if (const auto* k = std::get_if<ChangingAdder>(&kind_)) {
        const bool flipped = (t / k->period) % 2 == 1;
        return adder_batch(0, 1, flipped ? -1.0 : 1.0);
    }
    if (const auto* k = std::get_if<PermutedAdder>(&kind_)) {
        const auto [i, j] = pairs_->pair(t / k->period);
        return adder_batch(i, j, 1.0);
    }
    if (std::holds_alternative<UtilityProbeAdder>(kind_)) {
        return adder_batch(0, 1, 1.0);
    }
    if (const auto* k = std::get_if<LabelPermutedMnist>(&kind_)) {
        if (t % k->period == 0) {
            label_map_.resize(10);
            std::iota(label_map_.begin(), label_map_.end(), 0);
            if (!(t == 0 && k->identity_first)) {
                std::shuffle(label_map_.begin(), label_map_.end(), schedule_rng_);
            }
        }
    }
    return mnist_batch();
}

}  // namespace upgd
