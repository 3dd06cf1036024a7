#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "orup/random.hpp"
#include "orup/tensor.hpp"

namespace orup {

struct Dataset {
    Tensor images;  // [n,C,H,W]
    std::vector<std::size_t> labels;
    std::size_t n_classes = 0;
    // Per-channel statistics used by normalize(); filled by set_normalization.
    std::vector<double> mean;
    std::vector<double> stddev;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t height() const { return images.dim(2); }
    std::size_t width() const { return images.dim(3); }
};

struct SyntheticSpec {
    std::size_t n = 1000;
    std::size_t n_classes = 10;
    std::size_t size = 8;
    std::size_t channels = 1;
    // Amplitude of the class-conditional blob relative to unit Gaussian pixel noise.
    double separation = 3.0;
    std::uint64_t seed = 0;
    // Seed of the class prototypes; train and validation splits share it.
    std::uint64_t prototype_seed = 0;
};

// Class-conditional Gaussian-blob images: every class owns one blob per
// channel at a random centre; each image is separation·blob + N(0,1) noise.
Dataset gen_synthetic(const SyntheticSpec& spec);

// Reads an IDX image file (magic 0x00000803) and label file (0x00000801);
// pixels are scaled to [0,1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

std::vector<double> channel_means(const Tensor& images);
std::vector<double> channel_stddevs(const Tensor& images, std::span<const double> means);
Tensor normalize(const Tensor& images, std::span<const double> mean, std::span<const double> stddev);
Tensor denormalize(const Tensor& images, std::span<const double> mean, std::span<const double> stddev);

struct AugmentOps {
    double hflip_p = 0.0;
    std::size_t pad = 0;
    // Crop extents after padding; 0 keeps the input extent.
    std::size_t crop_h = 0;
    std::size_t crop_w = 0;
};

// Draws per image: one uniform for the flip when hflip_p > 0, then two for
// the crop offsets when pad > 0.
Tensor augment(const Tensor& batch, const AugmentOps& ops, Rng& rng);
Tensor hflip(const Tensor& images);
// Zero-pads every image by `pad` and takes the crop_h×crop_w window at (off_y, off_x).
Tensor pad_crop(const Tensor& images, std::size_t pad, std::size_t off_y, std::size_t off_x, std::size_t crop_h,
                std::size_t crop_w);

// [B,C,H,W] -> [B, (H/p)(W/p), C·p·p]. Patches in row-major order; inside a
// patch the element (py, px, c) sits at (py·p + px)·C + c.
Tensor patchify(const Tensor& images, std::size_t patch_size);
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch_size);

// Shuffled epoch order, a pure function of (data seed, epoch).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t data_seed, std::uint64_t epoch);

Tensor gather_images(const Tensor& images, std::span<const std::size_t> indices);

}  // namespace orup
