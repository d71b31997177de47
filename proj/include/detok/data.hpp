#pragma once

#include <torch/torch.h>

#include <string>
#include <utility>
#include <vector>

namespace detok {

struct DatasetSpec {
    std::string root;
    std::string split = "train";  // subdirectory under root
    int64_t image_size = 64;
    bool augment_flip = true;
    bool fail_fast = true;  // unreadable file: throw, or log and substitute

    void validate() const;
};

// [3, H, W] float in [-1, 1].
torch::Tensor load_image(const std::string& path);
void write_image(const std::string& path, const torch::Tensor& image);

// Shorter side resized to target (bicubic), then central target x target crop.
// Identity for inputs already at target x target.
torch::Tensor center_crop(const torch::Tensor& image, int64_t target);

// Class-per-directory image folder: root/split/<class_name>/<image files>.
class ImageFolderDataset {
   public:
    explicit ImageFolderDataset(const DatasetSpec& spec);

    int64_t size() const { return static_cast<int64_t>(entries_.size()); }
    int64_t num_classes() const { return static_cast<int64_t>(class_names_.size()); }
    const std::vector<std::string>& class_names() const { return class_names_; }
    const DatasetSpec& spec() const { return spec_; }
    const std::string& path(int64_t index) const { return entries_.at(index).path; }
    int64_t label(int64_t index) const { return entries_.at(index).label; }

    // Single preprocessed image, no augmentation.
    std::pair<torch::Tensor, int64_t> item(int64_t index) const;

    // images [B, 3, S, S] in [-1, 1], labels [B] int64; horizontal flip with
    // probability 0.5 per image when augment_flip is set.
    std::pair<torch::Tensor, torch::Tensor> load_batch(const std::vector<int64_t>& indices,
                                                       torch::Generator& gen) const;

   private:
    struct Entry {
        std::string path;
        int64_t label;
    };
    DatasetSpec spec_;
    std::vector<std::string> class_names_;
    std::vector<Entry> entries_;
};

// Deterministic procedural dataset: one shape family per class, randomized
// color, placement and size, written as class-per-directory PNG files.
void make_synthetic_dataset(const std::string& root, int64_t n_classes,
                            int64_t per_class_train, int64_t per_class_val,
                            int64_t image_size, uint64_t seed);

}  // namespace detok
