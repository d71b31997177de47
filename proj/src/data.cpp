#include "detok/data.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <random>

namespace fs = std::filesystem;

namespace detok {

void DatasetSpec::validate() const {
    TORCH_CHECK(!root.empty(), "DatasetSpec: root path is empty");
    TORCH_CHECK(split == "train" || split == "val", "DatasetSpec: split must be train or val");
    TORCH_CHECK(image_size >= 4, "DatasetSpec: image_size too small");
}

torch::Tensor load_image(const std::string& path) {
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    TORCH_CHECK(!bgr.empty(), "load_image: cannot decode ", path);
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat32).div_(127.5).sub_(1.0);
}

void write_image(const std::string& path, const torch::Tensor& image) {
    TORCH_CHECK(image.dim() == 3 && image.size(0) == 3, "write_image: expected [3, H, W]");
    auto u8 = image.detach().cpu().clamp(-1.0, 1.0).add(1.0).mul(127.5)
                  .round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC3,
                u8.data_ptr());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    TORCH_CHECK(cv::imwrite(path, bgr), "write_image: cannot write ", path);
}

torch::Tensor center_crop(const torch::Tensor& image, int64_t target) {
    TORCH_CHECK(image.dim() == 3 && image.size(0) == 3, "center_crop: expected [3, H, W]");
    TORCH_CHECK(target >= 1, "center_crop: bad target size");
    auto img = image;
    int64_t h = img.size(1), w = img.size(2);
    TORCH_CHECK(h >= 1 && w >= 1, "center_crop: degenerate input");
    if (std::min(h, w) != target) {
        const double scale = static_cast<double>(target) / static_cast<double>(std::min(h, w));
        const int64_t nh = std::max<int64_t>(target, std::llround(h * scale));
        const int64_t nw = std::max<int64_t>(target, std::llround(w * scale));
        namespace F = torch::nn::functional;
        img = F::interpolate(img.unsqueeze(0),
                             F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{nh, nw})
                                 .mode(torch::kBicubic)
                                 .align_corners(false))
                  .squeeze(0)
                  .clamp(-1.0, 1.0);
        h = nh;
        w = nw;
    }
    const int64_t top = (h - target) / 2;
    const int64_t left = (w - target) / 2;
    return img.slice(1, top, top + target).slice(2, left, left + target).contiguous();
}

ImageFolderDataset::ImageFolderDataset(const DatasetSpec& spec) : spec_(spec) {
    spec_.validate();
    const fs::path base = fs::path(spec_.root) / spec_.split;
    TORCH_CHECK(fs::is_directory(base), "ImageFolderDataset: no such directory: ",
                base.string());
    for (const auto& entry : fs::directory_iterator(base)) {
        if (entry.is_directory()) {
            class_names_.push_back(entry.path().filename().string());
        }
    }
    std::sort(class_names_.begin(), class_names_.end());
    TORCH_CHECK(!class_names_.empty(), "ImageFolderDataset: no class directories under ",
                base.string());
    for (int64_t label = 0; label < num_classes(); ++label) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(base / class_names_[label])) {
            if (entry.is_regular_file()) {
                files.push_back(entry.path().string());
            }
        }
        std::sort(files.begin(), files.end());
        for (auto& f : files) {
            entries_.push_back({std::move(f), label});
        }
    }
    TORCH_CHECK(!entries_.empty(), "ImageFolderDataset: empty dataset under ", base.string());
}

std::pair<torch::Tensor, int64_t> ImageFolderDataset::item(int64_t index) const {
    const auto& entry = entries_.at(index);
    return {center_crop(load_image(entry.path), spec_.image_size), entry.label};
}

std::pair<torch::Tensor, torch::Tensor> ImageFolderDataset::load_batch(
    const std::vector<int64_t>& indices, torch::Generator& gen) const {
    const int64_t B = static_cast<int64_t>(indices.size());
    TORCH_CHECK(B > 0, "load_batch: empty index list");
    auto images = torch::empty({B, 3, spec_.image_size, spec_.image_size}, torch::kFloat32);
    auto labels = torch::empty({B}, torch::kInt64);
    auto flip_draws = spec_.augment_flip ? torch::rand({B}, gen, torch::kFloat32)
                                         : torch::Tensor();
    for (int64_t b = 0; b < B; ++b) {
        int64_t idx = indices[static_cast<size_t>(b)];
        for (int64_t attempt = 0;; ++attempt) {
            try {
                auto [img, label] = item(idx);
                images[b] = img;
                labels[b] = label;
                break;
            } catch (const std::exception& e) {
                if (spec_.fail_fast || attempt + 1 >= size()) {
                    throw;
                }
                std::cerr << "load_batch: skipping unreadable item " << idx << ": "
                          << e.what() << "\n";
                idx = (idx + 1) % size();
            }
        }
        if (spec_.augment_flip && flip_draws[b].item<float>() < 0.5f) {
            images[b] = images[b].flip(-1);
        }
    }
    return {images, labels};
}

namespace {

void draw_shape(cv::Mat& canvas, int64_t family, std::mt19937_64& rng) {
    const int s = canvas.rows;
    std::uniform_int_distribution<int> color_d(64, 255);
    std::uniform_real_distribution<double> pos_d(0.3, 0.7);
    std::uniform_real_distribution<double> size_d(0.15, 0.32);
    const cv::Scalar color(color_d(rng), color_d(rng), color_d(rng));
    const cv::Point center(static_cast<int>(pos_d(rng) * s), static_cast<int>(pos_d(rng) * s));
    const int radius = static_cast<int>(size_d(rng) * s);
    switch (family % 6) {
        case 0:
            cv::circle(canvas, center, radius, color, cv::FILLED, cv::LINE_AA);
            break;
        case 1:
            cv::rectangle(canvas, center - cv::Point(radius, radius),
                          center + cv::Point(radius, radius), color, cv::FILLED, cv::LINE_AA);
            break;
        case 2: {
            std::vector<cv::Point> tri{center + cv::Point(0, -radius),
                                       center + cv::Point(-radius, radius),
                                       center + cv::Point(radius, radius)};
            cv::fillConvexPoly(canvas, tri, color, cv::LINE_AA);
            break;
        }
        case 3: {
            const int bar = std::max(2, radius / 3);
            cv::rectangle(canvas, center - cv::Point(radius, bar),
                          center + cv::Point(radius, bar), color, cv::FILLED, cv::LINE_AA);
            cv::rectangle(canvas, center - cv::Point(bar, radius),
                          center + cv::Point(bar, radius), color, cv::FILLED, cv::LINE_AA);
            break;
        }
        case 4:
            cv::circle(canvas, center, radius, color, std::max(2, radius / 3), cv::LINE_AA);
            break;
        default: {
            std::vector<cv::Point> dia{center + cv::Point(0, -radius),
                                       center + cv::Point(radius, 0),
                                       center + cv::Point(0, radius),
                                       center + cv::Point(-radius, 0)};
            cv::fillConvexPoly(canvas, dia, color, cv::LINE_AA);
            break;
        }
    }
}

}  // namespace

void make_synthetic_dataset(const std::string& root, int64_t n_classes,
                            int64_t per_class_train, int64_t per_class_val,
                            int64_t image_size, uint64_t seed) {
    TORCH_CHECK(n_classes >= 1 && per_class_train >= 1 && per_class_val >= 0,
                "make_synthetic_dataset: bad sizes");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> bg_d(0, 96);
    for (const auto& [split, per_class] :
         std::vector<std::pair<std::string, int64_t>>{{"train", per_class_train},
                                                      {"val", per_class_val}}) {
        for (int64_t c = 0; c < n_classes; ++c) {
            const fs::path dir = fs::path(root) / split / ("class_" + std::to_string(c));
            fs::create_directories(dir);
            for (int64_t i = 0; i < per_class; ++i) {
                cv::Mat canvas(static_cast<int>(image_size), static_cast<int>(image_size),
                               CV_8UC3, cv::Scalar(bg_d(rng), bg_d(rng), bg_d(rng)));
                // background distractor first so the class shape stays on top
                if (rng() % 2 == 0) {
                    draw_shape(canvas, static_cast<int64_t>(rng() % 6), rng);
                }
                draw_shape(canvas, c, rng);
                char name[32];
                std::snprintf(name, sizeof(name), "img_%05lld.png",
                              static_cast<long long>(i));
                TORCH_CHECK(cv::imwrite((dir / name).string(), canvas),
                            "make_synthetic_dataset: cannot write ", (dir / name).string());
            }
        }
    }
}

}  // namespace detok
