#include <torch/torch.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "detok/checkpoint.hpp"
#include "detok/config.hpp"
#include "detok/data.hpp"
#include "detok/evaluation.hpp"
#include "detok/gen_models.hpp"
#include "detok/training.hpp"

namespace fs = std::filesystem;
using namespace detok;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    int64_t seed = -1;
    bool deterministic = false;
    std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_option("--set", args.overrides, "dot.path=value overrides")->take_all();
    cmd->add_option("--seed", args.seed, "global seed (overrides config)");
    cmd->add_flag("--deterministic", args.deterministic, "single-thread deterministic mode");
    cmd->add_option("--out", args.out, "output directory (overrides config io.out)");
}

RunConfig resolve(const CommonArgs& args, bool gen_defaults) {
    auto cfg = resolve_config(args.config_path, args.overrides, gen_defaults);
    if (args.seed >= 0) {
        cfg.seed = static_cast<uint64_t>(args.seed);
        cfg.resolved["seed"] = cfg.seed;
    }
    if (args.deterministic) {
        cfg.deterministic = true;
        cfg.resolved["deterministic"] = true;
    }
    if (!args.out.empty()) {
        cfg.io.out = args.out;
        cfg.resolved["io"]["out"] = args.out;
    }
    torch::manual_seed(cfg.seed);
    if (cfg.deterministic) {
        torch::set_num_threads(1);
    }
    return cfg;
}

// Every run leaves its exact resolved config and hash next to its artifacts.
void write_snapshot(const RunConfig& cfg, const std::string& command) {
    fs::create_directories(cfg.io.out);
    nlohmann::json snap = cfg.resolved;
    snap["provenance"] = {{"command", command}, {"config_hash", cfg.hash()}};
    std::ofstream out(cfg.io.out + "/config.json");
    out << snap.dump(2) << "\n";
}

std::string tokenizer_ckpt_path(const RunConfig& cfg) {
    return cfg.io.tokenizer_ckpt.empty() ? cfg.io.out + "/tokenizer.ckpt"
                                         : cfg.io.tokenizer_ckpt;
}

std::string gen_ckpt_path(const RunConfig& cfg) {
    return cfg.io.gen_ckpt.empty()
               ? cfg.io.out + "/gen_" + to_string(cfg.gen_model.family) + ".ckpt"
               : cfg.io.gen_ckpt;
}

std::string cache_path(const RunConfig& cfg) {
    return cfg.io.cache.empty() ? cfg.io.out + "/latents.ckpt" : cfg.io.cache;
}

TokenizerTrainer make_tokenizer_trainer(const RunConfig& cfg) {
    return TokenizerTrainer(cfg.tokenizer, cfg.corruption, cfg.losses, cfg.recipe, cfg.seed);
}

Tokenizer load_ema_tokenizer(const RunConfig& cfg) {
    auto trainer = make_tokenizer_trainer(cfg);
    trainer.from_checkpoint(load_checkpoint(tokenizer_ckpt_path(cfg)));
    return trainer.ema_tokenizer();
}

GenModelConfig gen_config_for(const RunConfig& cfg) {
    auto gen_cfg = cfg.gen_model;
    gen_cfg.n_tokens = cfg.tokenizer.n_tokens();
    gen_cfg.latent_dim = cfg.tokenizer.latent_dim;
    return gen_cfg;
}

SamplerSettings sampler_settings(const RunConfig& cfg, double cfg_scale) {
    SamplerSettings st;
    st.ar_steps = cfg.eval.ar_steps;
    st.denoise_steps = cfg.eval.denoise_steps;
    st.cfg_scale = cfg_scale;
    st.temperature = cfg.eval.temperature;
    st.t_start = cfg.eval.t_start;
    return st;
}

FidProxyExtractor make_extractor(const RunConfig& cfg, const ImageFolderDataset& train_data) {
    FidProxyExtractor extractor(train_data.num_classes(), cfg.seed);
    const std::string path = cfg.io.extractor_ckpt.empty()
                                 ? cfg.io.out + "/fid_proxy.ckpt"
                                 : cfg.io.extractor_ckpt;
    if (fs::exists(path)) {
        extractor.from_checkpoint(load_checkpoint(path));
    } else {
        std::cout << "training FID-proxy classifier (" << cfg.eval.classifier_steps
                  << " steps)\n";
        extractor.train_classifier(train_data, cfg.eval.classifier_steps,
                                   cfg.eval.batch_size);
        fs::create_directories(fs::path(path).parent_path());
        save_checkpoint(path, extractor.to_checkpoint());
    }
    return extractor;
}

FeatureStats reference_stats(FidProxyExtractor& extractor, const ImageFolderDataset& data,
                             int64_t batch_size) {
    std::vector<torch::Tensor> feats;
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        const int64_t end = std::min(data.size(), start + batch_size);
        std::vector<torch::Tensor> images;
        for (int64_t i = start; i < end; ++i) {
            images.push_back(data.item(i).first);
        }
        feats.push_back(extractor.features(torch::stack(images)));
    }
    auto stats = compute_feature_stats(torch::cat(feats));
    stats.extractor_id = extractor.id();
    stats.dataset_id = data.spec().root + "/" + data.spec().split;
    return stats;
}

SampleImagesFn make_image_sampler(const RunConfig& cfg, FlowModel& flow, ArModel& ar,
                                  Tokenizer& tok, const LatentStats& stats) {
    return [&cfg, &flow, &ar, &tok, &stats](const SamplerSettings& st,
                                            const torch::Tensor& labels,
                                            torch::Generator& gen) {
        torch::NoGradGuard no_grad;
        torch::Tensor z;
        if (cfg.gen_model.family == GenFamily::Flow) {
            z = sample_flow(flow, st, labels, NoiseSchedule::linear(), gen);
        } else {
            z = sample_ar(ar, st, labels, NoiseSchedule::linear(), gen);
        }
        LatentBatch latents;
        latents.tokens = unstandardize(z, stats);
        return tok->decode(latents);
    };
}

LatentStats stats_from_cache(const LatentCache& cache) {
    return cache.stats;
}

int cmd_synth_data(const CommonArgs& args, int64_t classes, int64_t per_train,
                   int64_t per_val) {
    auto cfg = resolve(args, false);
    TORCH_CHECK(!cfg.data.root.empty(), "config: data.root must be set for synth-data");
    make_synthetic_dataset(cfg.data.root, classes, per_train, per_val, cfg.data.image_size,
                           cfg.seed);
    std::cout << "wrote synthetic dataset with " << classes << " classes under "
              << cfg.data.root << "\n";
    return 0;
}

int cmd_train_tokenizer(const CommonArgs& args) {
    auto cfg = resolve(args, false);
    write_snapshot(cfg, "train-tokenizer");
    ImageFolderDataset data(cfg.data);
    auto trainer = make_tokenizer_trainer(cfg);
    trainer.run(data, cfg.io.out);
    save_checkpoint(tokenizer_ckpt_path(cfg), trainer.to_checkpoint());
    std::cout << "tokenizer checkpoint: " << tokenizer_ckpt_path(cfg) << "\n";
    return 0;
}

int cmd_finetune_decoder(const CommonArgs& args) {
    auto cfg = resolve(args, false);
    write_snapshot(cfg, "finetune-decoder");
    ImageFolderDataset data(cfg.data);
    auto trainer = make_tokenizer_trainer(cfg);
    trainer.from_checkpoint(load_checkpoint(tokenizer_ckpt_path(cfg)));
    trainer.finetune_decoder(data, cfg.recipe.epochs, cfg.io.out);
    std::cout << "fine-tuned checkpoint: " << cfg.io.out << "/tokenizer_finetuned.ckpt\n";
    return 0;
}

int cmd_compute_stats(const CommonArgs& args) {
    auto cfg = resolve(args, false);
    write_snapshot(cfg, "compute-stats");
    ImageFolderDataset data(cfg.data);
    auto tok = load_ema_tokenizer(cfg);
    auto stats = compute_latent_stats(tok, data, cfg.eval.batch_size);
    nlohmann::json j;
    j["mean"] = std::vector<double>(stats.mean.data_ptr<float>(),
                                    stats.mean.data_ptr<float>() + stats.mean.numel());
    j["std"] = std::vector<double>(stats.std.data_ptr<float>(),
                                   stats.std.data_ptr<float>() + stats.std.numel());
    j["degenerate_channels"] = stats.degenerate_channels;
    j["source"] = stats.source_dataset_id;
    std::ofstream out(cfg.io.out + "/latent_stats.json");
    out << j.dump(2) << "\n";
    std::cout << "latent stats: " << cfg.io.out << "/latent_stats.json\n";
    return 0;
}

int cmd_cache_latents(const CommonArgs& args) {
    auto cfg = resolve(args, false);
    write_snapshot(cfg, "cache-latents");
    ImageFolderDataset data(cfg.data);
    auto tok = load_ema_tokenizer(cfg);
    auto stats = compute_latent_stats(tok, data, cfg.eval.batch_size);
    cache_latents(tok, data, stats, cfg.tokenizer_hash(), cache_path(cfg),
                  cfg.eval.batch_size);
    std::cout << "latent cache: " << cache_path(cfg) << "\n";
    return 0;
}

int cmd_train_gen(const CommonArgs& args) {
    auto cfg = resolve(args, true);
    write_snapshot(cfg, "train-gen");
    auto cache = LatentCache::load(cache_path(cfg), cfg.tokenizer_hash());
    GenTrainer trainer(gen_config_for(cfg), cfg.recipe, cfg.seed);
    trainer.run(cache, cfg.io.out);
    save_checkpoint(gen_ckpt_path(cfg), trainer.to_checkpoint());
    std::cout << "generative checkpoint: " << gen_ckpt_path(cfg) << "\n";
    return 0;
}

int cmd_sample(const CommonArgs& args, int64_t count, double cfg_scale) {
    auto cfg = resolve(args, true);
    write_snapshot(cfg, "sample");
    auto cache = LatentCache::load(cache_path(cfg), cfg.tokenizer_hash());
    auto tok = load_ema_tokenizer(cfg);
    GenTrainer trainer(gen_config_for(cfg), cfg.recipe, cfg.seed);
    trainer.from_checkpoint(load_checkpoint(gen_ckpt_path(cfg)));
    trainer.apply_ema_weights();

    auto stats = stats_from_cache(cache);
    auto sampler = make_image_sampler(cfg, trainer.flow(), trainer.ar(), tok, stats);
    auto gen = make_generator(derive_seed(cfg.seed, "sample_cmd"));
    auto labels = torch::arange(count, torch::kInt64)
                      .remainder(gen_config_for(cfg).num_classes);
    auto images = sampler(sampler_settings(cfg, cfg_scale), labels, gen);

    // near-square grid
    const int64_t cols = static_cast<int64_t>(std::ceil(std::sqrt(count)));
    const int64_t rows = (count + cols - 1) / cols;
    const int64_t S = cfg.tokenizer.image_size;
    auto grid = torch::full({3, rows * S, cols * S}, -1.0f);
    for (int64_t i = 0; i < count; ++i) {
        const int64_t r = i / cols, c = i % cols;
        grid.slice(1, r * S, (r + 1) * S).slice(2, c * S, (c + 1) * S) = images[i];
    }
    write_image(cfg.io.out + "/samples.png", grid);
    std::cout << "samples: " << cfg.io.out << "/samples.png\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args) {
    auto cfg = resolve(args, false);
    write_snapshot(cfg, "evaluate");
    auto train_spec = cfg.data;
    train_spec.split = "train";
    ImageFolderDataset train_data(train_spec);
    auto val_spec = cfg.data;
    val_spec.split = "val";
    ImageFolderDataset val_data(val_spec);

    auto tok = load_ema_tokenizer(cfg);
    auto extractor = make_extractor(cfg, train_data);
    auto metrics = reconstruction_eval(tok, val_data, extractor, cfg.eval.batch_size);

    EvalReport report;
    report.psnr = metrics.psnr;
    report.recon_mse = metrics.mse;
    report.rfid_proxy = metrics.rfid_proxy;
    report.sample_count = metrics.sample_count;
    report.seed = cfg.seed;
    report.config_hash = cfg.hash();

    auto gen = make_generator(derive_seed(cfg.seed, "eval_grids"));
    auto image = val_data.item(0).first;
    write_image(cfg.io.out + "/denoising_grid.png",
                denoising_grid(tok, image, {0.0, 0.25, 0.5, 0.75, 1.0}, cfg.corruption, gen));
    write_image(cfg.io.out + "/demasking_grid.png",
                demasking_grid(tok, image, {0.0, 0.3, 0.5, 0.7, 0.9}, gen));

    std::ofstream out(cfg.io.out + "/eval_report.json");
    out << report.to_json().dump(2) << "\n";
    std::cout << "psnr " << metrics.psnr << " mse " << metrics.mse << " rfid-proxy "
              << metrics.rfid_proxy << "\n"
              << "report: " << cfg.io.out << "/eval_report.json\n";
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    auto cfg = resolve(args, true);
    write_snapshot(cfg, "sweep");
    auto train_spec = cfg.data;
    train_spec.split = "train";
    ImageFolderDataset train_data(train_spec);
    auto val_spec = cfg.data;
    val_spec.split = "val";
    ImageFolderDataset val_data(val_spec);

    auto cache = LatentCache::load(cache_path(cfg), cfg.tokenizer_hash());
    auto tok = load_ema_tokenizer(cfg);
    GenTrainer trainer(gen_config_for(cfg), cfg.recipe, cfg.seed);
    trainer.from_checkpoint(load_checkpoint(gen_ckpt_path(cfg)));
    trainer.apply_ema_weights();
    auto extractor = make_extractor(cfg, train_data);
    auto reference = reference_stats(extractor, val_data, cfg.eval.batch_size);

    auto stats = stats_from_cache(cache);
    auto sampler = make_image_sampler(cfg, trainer.flow(), trainer.ar(), tok, stats);
    auto result = cfg_sweep(sampler, cfg.eval.cfg_scales, sampler_settings(cfg, 1.0),
                            reference, extractor, cfg.eval.fid_samples,
                            gen_config_for(cfg).num_classes,
                            derive_seed(cfg.seed, "sweep"), cfg.eval.batch_size);

    EvalReport report;
    report.fid_proxy_by_cfg = result.scores;
    report.best_cfg = result.best_scale;
    report.sample_count = cfg.eval.fid_samples;
    report.seed = cfg.seed;
    report.config_hash = cfg.hash();
    std::ofstream out(cfg.io.out + "/sweep_report.json");
    out << report.to_json().dump(2) << "\n";
    std::ofstream csv(cfg.io.out + "/sweep_curve.csv");
    csv << "cfg_scale,fid_proxy\n";
    for (const auto& [scale, score] : result.scores) {
        csv << scale << "," << score << "\n";
    }
    std::cout << "best cfg scale " << result.best_scale << "; report: " << cfg.io.out
              << "/sweep_report.json\n";
    return 0;
}

// Table-1-style four-row comparison: baseline, masking only, latent noise
// only, joint; each trains a tokenizer, caches latents, trains one generative
// model, and scores generation with the FID proxy.
int cmd_ablate(const CommonArgs& args) {
    auto cfg = resolve(args, false);
    write_snapshot(cfg, "ablate");
    auto train_spec = cfg.data;
    train_spec.split = "train";
    ImageFolderDataset train_data(train_spec);
    auto val_spec = cfg.data;
    val_spec.split = "val";
    ImageFolderDataset val_data(val_spec);

    auto extractor = make_extractor(cfg, train_data);
    auto reference = reference_stats(extractor, val_data, cfg.eval.batch_size);

    struct Row {
        std::string name;
        double gamma;
        double mask;
    };
    const std::vector<Row> rows = {{"baseline", 0.0, 0.0},
                                   {"masking_only", 0.0, cfg.corruption.max_mask_ratio},
                                   {"latent_noise_only", cfg.corruption.gamma, 0.0},
                                   {"joint", cfg.corruption.gamma,
                                    cfg.corruption.max_mask_ratio}};

    nlohmann::json table = nlohmann::json::array();
    for (const auto& row : rows) {
        std::cout << "=== ablation row: " << row.name << " ===\n";
        auto row_cfg = cfg;
        row_cfg.corruption.gamma = row.gamma;
        row_cfg.corruption.max_mask_ratio = row.mask;
        row_cfg.io.out = cfg.io.out + "/" + row.name;
        fs::create_directories(row_cfg.io.out);

        auto trainer = make_tokenizer_trainer(row_cfg);
        trainer.run(train_data, row_cfg.io.out);
        auto tok = trainer.ema_tokenizer();
        auto metrics = reconstruction_eval(tok, val_data, extractor, cfg.eval.batch_size);

        auto stats = compute_latent_stats(tok, train_data, cfg.eval.batch_size);
        const std::string cache_file = row_cfg.io.out + "/latents.ckpt";
        cache_latents(tok, train_data, stats, row_cfg.tokenizer_hash(), cache_file,
                      cfg.eval.batch_size);
        auto cache = LatentCache::load(cache_file, row_cfg.tokenizer_hash());

        auto gen_recipe = default_gen_recipe();
        gen_recipe.epochs = cfg.recipe.epochs;
        gen_recipe.batch_size = cfg.recipe.batch_size;
        GenTrainer gen_trainer(gen_config_for(row_cfg), gen_recipe, cfg.seed);
        gen_trainer.run(cache, row_cfg.io.out);
        gen_trainer.apply_ema_weights();

        auto sampler =
            make_image_sampler(row_cfg, gen_trainer.flow(), gen_trainer.ar(), tok, stats);
        auto sweep = cfg_sweep(sampler, cfg.eval.cfg_scales, sampler_settings(cfg, 1.0),
                               reference, extractor, cfg.eval.fid_samples,
                               gen_config_for(cfg).num_classes,
                               derive_seed(cfg.seed, "ablate"), cfg.eval.batch_size);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [scale, score] : sweep.scores) {
            best = std::min(best, score);
        }
        table.push_back({{"name", row.name},
                         {"gamma", row.gamma},
                         {"max_mask_ratio", row.mask},
                         {"rfid_proxy", metrics.rfid_proxy},
                         {"fid_proxy", best},
                         {"best_cfg", sweep.best_scale}});
        std::cout << row.name << ": rfid-proxy " << metrics.rfid_proxy << ", fid-proxy "
                  << best << " @ cfg " << sweep.best_scale << "\n";
    }
    std::ofstream out(cfg.io.out + "/ablation_table.json");
    out << table.dump(2) << "\n";
    std::cout << "ablation table: " << cfg.io.out << "/ablation_table.json\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent-denoising tokenizer and generative-model lab"};
    app.require_subcommand(1);

    CommonArgs args;
    int64_t synth_classes = 6, synth_train = 200, synth_val = 50;
    int64_t sample_count = 16;
    double sample_cfg = 2.0;

    auto* synth = app.add_subcommand("synth-data", "generate a procedural image dataset");
    add_common(synth, args);
    synth->add_option("--classes", synth_classes, "number of classes");
    synth->add_option("--train-per-class", synth_train, "training images per class");
    synth->add_option("--val-per-class", synth_val, "validation images per class");

    auto* tt = app.add_subcommand("train-tokenizer", "train the denoising tokenizer");
    add_common(tt, args);
    auto* ft = app.add_subcommand("finetune-decoder", "decoder-only fine-tuning");
    add_common(ft, args);
    auto* cs = app.add_subcommand("compute-stats", "latent channel statistics");
    add_common(cs, args);
    auto* cl = app.add_subcommand("cache-latents", "cache posterior latents plus flips");
    add_common(cl, args);
    auto* tg = app.add_subcommand("train-gen", "train a generative model on cached latents");
    add_common(tg, args);
    auto* sa = app.add_subcommand("sample", "sample images from a generative checkpoint");
    add_common(sa, args);
    sa->add_option("--count", sample_count, "number of samples");
    sa->add_option("--cfg-scale", sample_cfg, "classifier-free guidance scale");
    auto* ev = app.add_subcommand("evaluate", "reconstruction metrics and grids");
    add_common(ev, args);
    auto* sw = app.add_subcommand("sweep", "FID-proxy versus CFG scale");
    add_common(sw, args);
    auto* ab = app.add_subcommand("ablate", "four-row corruption ablation table");
    add_common(ab, args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            return cmd_synth_data(args, synth_classes, synth_train, synth_val);
        }
        if (tt->parsed()) return cmd_train_tokenizer(args);
        if (ft->parsed()) return cmd_finetune_decoder(args);
        if (cs->parsed()) return cmd_compute_stats(args);
        if (cl->parsed()) return cmd_cache_latents(args);
        if (tg->parsed()) return cmd_train_gen(args);
        if (sa->parsed()) return cmd_sample(args, sample_count, sample_cfg);
        if (ev->parsed()) return cmd_evaluate(args);
        if (sw->parsed()) return cmd_sweep(args);
        if (ab->parsed()) return cmd_ablate(args);
    } catch (const c10::Error& e) {
        std::string msg = e.what_without_backtrace();
        const auto newline = msg.find('\n');
        if (newline != std::string::npos) {
            msg = msg.substr(0, newline);
        }
        if (msg.rfind("config:", 0) == 0) {
            std::cerr << "error: " << msg << "\n";
        } else {
            std::cerr << "error: runtime: " << msg << "\n";
        }
        return 1;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        const auto newline = msg.find('\n');
        if (newline != std::string::npos) {
            msg = msg.substr(0, newline);
        }
        std::cerr << "error: runtime: " << msg << "\n";
        return 1;
    }
    return 0;
}
