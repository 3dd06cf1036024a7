#include "orup/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace orup {

Dataset gen_synthetic(const SyntheticSpec& spec) {
    if (spec.n == 0) throw ContractError("gen_synthetic: n must be positive");
    if (spec.n_classes < 2) throw ContractError("gen_synthetic: need at least two classes");
    if (spec.size == 0 || spec.channels == 0) throw ContractError("gen_synthetic: empty image geometry");

    const std::size_t S = spec.size, C = spec.channels, K = spec.n_classes;
    const double sigma = std::max(1.0, static_cast<double>(S) / 4.0);

    Rng proto_rng(spec.prototype_seed);
    std::vector<double> prototypes(K * C * S * S);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < C; ++c) {
            const double cy = uniform01(proto_rng) * static_cast<double>(S - 1);
            const double cx = uniform01(proto_rng) * static_cast<double>(S - 1);
            double* p = prototypes.data() + (k * C + c) * S * S;
            for (std::size_t y = 0; y < S; ++y) {
                for (std::size_t x = 0; x < S; ++x) {
                    const double dy = static_cast<double>(y) - cy;
                    const double dx = static_cast<double>(x) - cx;
                    p[y * S + x] = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                }
            }
        }
    }

    Rng rng(spec.seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    Dataset ds;
    ds.n_classes = K;
    ds.labels.resize(spec.n);
    const std::size_t per_image = C * S * S;
    std::vector<double> pixels(spec.n * per_image);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const std::size_t label = i % K;
        ds.labels[i] = label;
        const double* proto = prototypes.data() + label * per_image;
        for (std::size_t j = 0; j < per_image; ++j) {
            pixels[i * per_image + j] = spec.separation * proto[j] + noise(rng);
        }
    }
    ds.images = Tensor({spec.n, C, S, S}, std::move(pixels));
    return ds;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
    if (off + 4 > b.size()) throw FormatError("truncated IDX header in " + path);
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);

    if (be32(img, 0, images_path) != 0x00000803) throw FormatError("bad IDX image magic in " + images_path);
    if (be32(lab, 0, labels_path) != 0x00000801) throw FormatError("bad IDX label magic in " + labels_path);

    const std::size_t n = be32(img, 4, images_path);
    const std::size_t rows = be32(img, 8, images_path);
    const std::size_t cols = be32(img, 12, images_path);
    const std::size_t n_labels = be32(lab, 4, labels_path);
    if (n == 0 || rows == 0 || cols == 0) throw FormatError("empty IDX image set in " + images_path);
    if (img.size() < 16 + n * rows * cols) throw FormatError("truncated IDX image payload in " + images_path);
    if (lab.size() < 8 + n_labels) throw FormatError("truncated IDX label payload in " + labels_path);
    if (n != n_labels) {
        throw ConsistencyError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) +
                               " labels");
    }

    Dataset ds;
    std::vector<double> pixels(n * rows * cols);
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<double>(img[16 + i]) / 255.0;
    ds.images = Tensor({n, 1, rows, cols}, std::move(pixels));
    ds.labels.resize(n);
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels[i] = lab[8 + i];
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.n_classes = std::max<std::size_t>(2, max_label + 1);
    return ds;
}

std::vector<double> channel_means(const Tensor& images) {
    const std::size_t N = images.dim(0), C = images.dim(1), HW = images.dim(2) * images.dim(3);
    const auto v = images.data();
    std::vector<double> mean(C, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* p = v.data() + (i * C + c) * HW;
            for (std::size_t j = 0; j < HW; ++j) mean[c] += p[j];
        }
    }
    for (double& m : mean) m /= static_cast<double>(N * HW);
    return mean;
}

std::vector<double> channel_stddevs(const Tensor& images, std::span<const double> means) {
    const std::size_t N = images.dim(0), C = images.dim(1), HW = images.dim(2) * images.dim(3);
    const auto v = images.data();
    std::vector<double> var(C, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* p = v.data() + (i * C + c) * HW;
            for (std::size_t j = 0; j < HW; ++j) var[c] += (p[j] - means[c]) * (p[j] - means[c]);
        }
    }
    std::vector<double> out(C);
    for (std::size_t c = 0; c < C; ++c) {
        out[c] = std::sqrt(var[c] / static_cast<double>(N * HW));
        if (out[c] <= 0.0) out[c] = 1.0;
    }
    return out;
}

namespace {
Tensor channel_affine(const Tensor& images, std::span<const double> mean, std::span<const double> stddev,
                      bool forward) {
    const std::size_t N = images.dim(0), C = images.dim(1), HW = images.dim(2) * images.dim(3);
    if (mean.size() != C || stddev.size() != C) throw DimensionError("normalization stats do not match channels");
    std::vector<double> out(images.data().begin(), images.data().end());
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            double* p = out.data() + (i * C + c) * HW;
            for (std::size_t j = 0; j < HW; ++j) p[j] = forward ? (p[j] - mean[c]) / stddev[c] : p[j] * stddev[c] + mean[c];
        }
    }
    return Tensor(images.shape(), std::move(out));
}
}  // namespace

Tensor normalize(const Tensor& images, std::span<const double> mean, std::span<const double> stddev) {
    return channel_affine(images, mean, stddev, true);
}

Tensor denormalize(const Tensor& images, std::span<const double> mean, std::span<const double> stddev) {
    return channel_affine(images, mean, stddev, false);
}

Tensor hflip(const Tensor& images) {
    if (images.ndim() != 4) throw DimensionError("hflip expects [B,C,H,W]");
    const std::size_t rows = images.dim(0) * images.dim(1) * images.dim(2), W = images.dim(3);
    std::vector<double> out(images.data().begin(), images.data().end());
    for (std::size_t r = 0; r < rows; ++r) std::reverse(out.begin() + r * W, out.begin() + (r + 1) * W);
    return Tensor(images.shape(), std::move(out));
}

Tensor pad_crop(const Tensor& images, std::size_t pad, std::size_t off_y, std::size_t off_x, std::size_t crop_h,
                std::size_t crop_w) {
    if (images.ndim() != 4) throw DimensionError("pad_crop expects [B,C,H,W]");
    const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (crop_h == 0) crop_h = H;
    if (crop_w == 0) crop_w = W;
    if (crop_h > H + 2 * pad || crop_w > W + 2 * pad) throw ContractError("crop larger than padded image");
    if (off_y + crop_h > H + 2 * pad || off_x + crop_w > W + 2 * pad) throw ContractError("crop window out of range");
    const auto in = images.data();
    std::vector<double> out(B * C * crop_h * crop_w, 0.0);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        for (std::size_t y = 0; y < crop_h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + off_y) - static_cast<std::ptrdiff_t>(pad);
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t x = 0; x < crop_w; ++x) {
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + off_x) - static_cast<std::ptrdiff_t>(pad);
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                out[(bc * crop_h + y) * crop_w + x] = in[(bc * H + sy) * W + sx];
            }
        }
    }
    return Tensor({B, C, crop_h, crop_w}, std::move(out));
}

Tensor augment(const Tensor& batch, const AugmentOps& ops, Rng& rng) {
    if (batch.ndim() != 4) throw DimensionError("augment expects [B,C,H,W]");
    if (ops.hflip_p < 0.0 || ops.hflip_p > 1.0) throw ContractError("hflip probability must lie in [0,1]");
    const std::size_t B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    const std::size_t crop_h = ops.crop_h ? ops.crop_h : H;
    const std::size_t crop_w = ops.crop_w ? ops.crop_w : W;
    if (crop_h > H + 2 * ops.pad || crop_w > W + 2 * ops.pad) throw ContractError("crop larger than padded image");
    if (ops.hflip_p == 0.0 && ops.pad == 0 && crop_h == H && crop_w == W) return batch.clone();

    const std::size_t per_image = C * H * W;
    std::vector<double> out;
    out.reserve(B * C * crop_h * crop_w);
    for (std::size_t b = 0; b < B; ++b) {
        Tensor img({1, C, H, W}, std::vector<double>(batch.data().begin() + b * per_image,
                                                     batch.data().begin() + (b + 1) * per_image));
        if (ops.hflip_p > 0.0 && uniform01(rng) < ops.hflip_p) img = hflip(img);
        std::size_t oy = ops.pad, ox = ops.pad;
        if (ops.pad > 0 || crop_h != H || crop_w != W) {
            const std::size_t range_y = H + 2 * ops.pad - crop_h + 1;
            const std::size_t range_x = W + 2 * ops.pad - crop_w + 1;
            oy = std::min(range_y - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(range_y)));
            ox = std::min(range_x - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(range_x)));
            img = pad_crop(img, ops.pad, oy, ox, crop_h, crop_w);
        }
        out.insert(out.end(), img.data().begin(), img.data().end());
    }
    return Tensor({B, C, crop_h, crop_w}, std::move(out));
}

Tensor patchify(const Tensor& images, std::size_t p) {
    if (images.ndim() != 4) throw DimensionError("patchify expects [B,C,H,W]");
    const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (p == 0 || H % p != 0 || W % p != 0) {
        throw DimensionError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                             " not divisible by patch " + std::to_string(p));
    }
    const std::size_t gh = H / p, gw = W / p, s = gh * gw, e = C * p * p;
    const auto in = images.data();
    std::vector<double> out(B * s * e);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t py = 0; py < gh; ++py) {
            for (std::size_t px = 0; px < gw; ++px) {
                double* dst = out.data() + (b * s + py * gw + px) * e;
                for (std::size_t y = 0; y < p; ++y) {
                    for (std::size_t x = 0; x < p; ++x) {
                        for (std::size_t c = 0; c < C; ++c) {
                            dst[(y * p + x) * C + c] = in[((b * C + c) * H + py * p + y) * W + px * p + x];
                        }
                    }
                }
            }
        }
    }
    return Tensor({B, s, e}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, std::size_t C, std::size_t H, std::size_t W, std::size_t p) {
    if (patches.ndim() != 3 || p == 0 || H % p != 0 || W % p != 0) throw DimensionError("unpatchify: bad geometry");
    const std::size_t B = patches.dim(0), gh = H / p, gw = W / p, s = gh * gw, e = C * p * p;
    if (patches.dim(1) != s || patches.dim(2) != e) throw DimensionError("unpatchify: patch tensor shape mismatch");
    const auto in = patches.data();
    std::vector<double> out(B * C * H * W);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t py = 0; py < gh; ++py) {
            for (std::size_t px = 0; px < gw; ++px) {
                const double* src = in.data() + (b * s + py * gw + px) * e;
                for (std::size_t y = 0; y < p; ++y) {
                    for (std::size_t x = 0; x < p; ++x) {
                        for (std::size_t c = 0; c < C; ++c) {
                            out[((b * C + c) * H + py * p + y) * W + px * p + x] = src[(y * p + x) * C + c];
                        }
                    }
                }
            }
        }
    }
    return Tensor({B, C, H, W}, std::move(out));
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t data_seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(data_seed, 1000 + epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

Tensor gather_images(const Tensor& images, std::span<const std::size_t> indices) {
    Shape shape = images.shape();
    const std::size_t per = images.numel() / shape[0];
    std::vector<double> out;
    out.reserve(indices.size() * per);
    const auto v = images.data();
    for (std::size_t i : indices) {
        if (i >= shape[0]) throw DimensionError("gather_images: index out of range");
        out.insert(out.end(), v.begin() + i * per, v.begin() + (i + 1) * per);
    }
    shape[0] = indices.size();
    return Tensor(std::move(shape), std::move(out));
}

}  // namespace orup
