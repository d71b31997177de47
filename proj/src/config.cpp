#include "detok/config.hpp"

#include <fstream>
#include <sstream>

#include "detok/rng.hpp"

namespace detok {

namespace {

using nlohmann::json;

json size_spec_json(const SizeSpec& s) {
    return {{"hidden", s.hidden}, {"blocks", s.blocks}, {"heads", s.heads}};
}

json default_tree(bool gen_recipe_defaults) {
    const DatasetSpec data;
    const TokenizerConfig tok;
    const CorruptionConfig corr;
    const LossWeights losses;
    const GenModelConfig gen;
    const TrainRecipe recipe = gen_recipe_defaults ? default_gen_recipe() : TrainRecipe{};
    const EvalConfig eval;
    const IoConfig io;

    json j;
    j["data"] = {{"root", data.root},
                 {"split", data.split},
                 {"image_size", data.image_size},
                 {"augment_flip", data.augment_flip},
                 {"fail_fast", data.fail_fast}};
    j["tokenizer"] = {{"image_size", tok.image_size},
                      {"patch_size", tok.patch_size},
                      {"latent_dim", tok.latent_dim},
                      {"encoder", size_spec_json(tok.encoder)},
                      {"decoder", size_spec_json(tok.decoder)},
                      {"use_rope", tok.use_rope},
                      {"use_learned_pos", tok.use_learned_pos},
                      {"logvar_min", tok.logvar_min},
                      {"logvar_max", tok.logvar_max}};
    j["corruption"] = {{"gamma", corr.gamma},
                       {"max_mask_ratio", corr.max_mask_ratio},
                       {"mask_bias", corr.mask_bias},
                       {"additive_mode", corr.additive_mode}};
    j["losses"] = {{"lambda_kl", losses.lambda_kl},
                   {"lambda_percep", losses.lambda_percep},
                   {"lambda_gan", losses.lambda_gan},
                   {"gan_start_fraction", losses.gan_start_fraction}};
    j["gen_model"] = {{"family", to_string(gen.family)},
                      {"width", gen.width},
                      {"depth", gen.depth},
                      {"heads", gen.heads},
                      {"diffhead", {{"layers", gen.diffhead.layers},
                                    {"channels", gen.diffhead.channels}}},
                      {"num_classes", gen.num_classes},
                      {"n_tokens", gen.n_tokens},
                      {"latent_dim", gen.latent_dim},
                      {"cfg_all_channels", gen.cfg_all_channels},
                      {"class_drop_prob", gen.class_drop_prob}};
    j["recipe"] = {{"epochs", recipe.epochs},
                   {"batch_size", recipe.batch_size},
                   {"peak_lr", recipe.peak_lr},
                   {"lr_policy", recipe.lr_policy == LrPolicy::WarmupCosine ? "warmup_cosine"
                                                                            : "constant"},
                   {"warmup_fraction", recipe.warmup_fraction},
                   {"beta1", recipe.beta1},
                   {"beta2", recipe.beta2},
                   {"weight_decay", recipe.weight_decay},
                   {"ema_decay", recipe.ema_decay},
                   {"grad_clip", recipe.grad_clip ? json(*recipe.grad_clip) : json(nullptr)},
                   {"checkpoint_every_epochs", recipe.checkpoint_every_epochs},
                   {"log_every_steps", recipe.log_every_steps}};
    j["eval"] = {{"fid_samples", eval.fid_samples},
                 {"classifier_steps", eval.classifier_steps},
                 {"batch_size", eval.batch_size},
                 {"cfg_scales", eval.cfg_scales},
                 {"denoise_steps", eval.denoise_steps},
                 {"ar_steps", eval.ar_steps},
                 {"temperature", eval.temperature},
                 {"t_start", eval.t_start}};
    j["io"] = {{"out", io.out},
               {"tokenizer_ckpt", io.tokenizer_ckpt},
               {"gen_ckpt", io.gen_ckpt},
               {"cache", io.cache},
               {"extractor_ckpt", io.extractor_ckpt}};
    j["seed"] = 0;
    j["deterministic"] = false;
    return j;
}

bool types_compatible(const json& skeleton, const json& value) {
    if (skeleton.is_number() && value.is_number()) return true;
    if (skeleton.is_null() || value.is_null()) return true;  // optional slots
    if (skeleton.is_number() && value.is_null()) return true;
    return skeleton.type() == value.type();
}

void merge_checked(json& dst, const json& src, const std::string& path) {
    TORCH_CHECK(src.is_object(), "config: expected an object at '",
                path.empty() ? "<root>" : path, "'");
    for (const auto& [key, value] : src.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        TORCH_CHECK(dst.contains(key), "config: unknown key '", here, "'");
        auto& slot = dst[key];
        if (slot.is_object() && value.is_object()) {
            merge_checked(slot, value, here);
        } else {
            TORCH_CHECK(!slot.is_object() && !value.is_object(),
                        "config: type mismatch at '", here, "'");
            TORCH_CHECK(types_compatible(slot, value),
                        "config: type mismatch at '", here, "': expected ",
                        slot.type_name(), ", got ", value.type_name());
            slot = value;
        }
    }
}

// "small" / "base" shorthand for encoder/decoder size blocks.
void expand_presets(json& tree) {
    if (!tree.contains("tokenizer")) return;
    for (const char* side : {"encoder", "decoder"}) {
        if (tree["tokenizer"].contains(side) && tree["tokenizer"][side].is_string()) {
            tree["tokenizer"][side] =
                size_spec_json(SizeSpec::preset(tree["tokenizer"][side].get<std::string>()));
        }
    }
}

SizeSpec size_spec_from(const json& j) {
    return {j.at("hidden").get<int64_t>(), j.at("blocks").get<int64_t>(),
            j.at("heads").get<int64_t>()};
}

RunConfig extract(const json& j) {
    RunConfig cfg;
    const auto& d = j.at("data");
    cfg.data.root = d.at("root").get<std::string>();
    cfg.data.split = d.at("split").get<std::string>();
    cfg.data.image_size = d.at("image_size").get<int64_t>();
    cfg.data.augment_flip = d.at("augment_flip").get<bool>();
    cfg.data.fail_fast = d.at("fail_fast").get<bool>();

    const auto& t = j.at("tokenizer");
    cfg.tokenizer.image_size = t.at("image_size").get<int64_t>();
    cfg.tokenizer.patch_size = t.at("patch_size").get<int64_t>();
    cfg.tokenizer.latent_dim = t.at("latent_dim").get<int64_t>();
    cfg.tokenizer.encoder = size_spec_from(t.at("encoder"));
    cfg.tokenizer.decoder = size_spec_from(t.at("decoder"));
    cfg.tokenizer.use_rope = t.at("use_rope").get<bool>();
    cfg.tokenizer.use_learned_pos = t.at("use_learned_pos").get<bool>();
    cfg.tokenizer.logvar_min = t.at("logvar_min").get<double>();
    cfg.tokenizer.logvar_max = t.at("logvar_max").get<double>();

    const auto& c = j.at("corruption");
    cfg.corruption.gamma = c.at("gamma").get<double>();
    cfg.corruption.max_mask_ratio = c.at("max_mask_ratio").get<double>();
    cfg.corruption.mask_bias = c.at("mask_bias").get<double>();
    cfg.corruption.additive_mode = c.at("additive_mode").get<bool>();

    const auto& l = j.at("losses");
    cfg.losses.lambda_kl = l.at("lambda_kl").get<double>();
    cfg.losses.lambda_percep = l.at("lambda_percep").get<double>();
    cfg.losses.lambda_gan = l.at("lambda_gan").get<double>();
    cfg.losses.gan_start_fraction = l.at("gan_start_fraction").get<double>();

    const auto& g = j.at("gen_model");
    cfg.gen_model.family = gen_family_from_string(g.at("family").get<std::string>());
    cfg.gen_model.width = g.at("width").get<int64_t>();
    cfg.gen_model.depth = g.at("depth").get<int64_t>();
    cfg.gen_model.heads = g.at("heads").get<int64_t>();
    cfg.gen_model.diffhead.layers = g.at("diffhead").at("layers").get<int64_t>();
    cfg.gen_model.diffhead.channels = g.at("diffhead").at("channels").get<int64_t>();
    cfg.gen_model.num_classes = g.at("num_classes").get<int64_t>();
    cfg.gen_model.n_tokens = g.at("n_tokens").get<int64_t>();
    cfg.gen_model.latent_dim = g.at("latent_dim").get<int64_t>();
    cfg.gen_model.cfg_all_channels = g.at("cfg_all_channels").get<bool>();
    cfg.gen_model.class_drop_prob = g.at("class_drop_prob").get<double>();

    const auto& r = j.at("recipe");
    cfg.recipe.epochs = r.at("epochs").get<int64_t>();
    cfg.recipe.batch_size = r.at("batch_size").get<int64_t>();
    cfg.recipe.peak_lr = r.at("peak_lr").get<double>();
    const std::string policy = r.at("lr_policy").get<std::string>();
    TORCH_CHECK(policy == "warmup_cosine" || policy == "constant",
                "config: recipe.lr_policy must be warmup_cosine or constant, got ", policy);
    cfg.recipe.lr_policy =
        policy == "warmup_cosine" ? LrPolicy::WarmupCosine : LrPolicy::Constant;
    cfg.recipe.warmup_fraction = r.at("warmup_fraction").get<double>();
    cfg.recipe.beta1 = r.at("beta1").get<double>();
    cfg.recipe.beta2 = r.at("beta2").get<double>();
    cfg.recipe.weight_decay = r.at("weight_decay").get<double>();
    cfg.recipe.ema_decay = r.at("ema_decay").get<double>();
    cfg.recipe.grad_clip = r.at("grad_clip").is_null()
                               ? std::nullopt
                               : std::optional<double>(r.at("grad_clip").get<double>());
    cfg.recipe.checkpoint_every_epochs = r.at("checkpoint_every_epochs").get<int64_t>();
    cfg.recipe.log_every_steps = r.at("log_every_steps").get<int64_t>();

    const auto& e = j.at("eval");
    cfg.eval.fid_samples = e.at("fid_samples").get<int64_t>();
    cfg.eval.classifier_steps = e.at("classifier_steps").get<int64_t>();
    cfg.eval.batch_size = e.at("batch_size").get<int64_t>();
    cfg.eval.cfg_scales = e.at("cfg_scales").get<std::vector<double>>();
    cfg.eval.denoise_steps = e.at("denoise_steps").get<int64_t>();
    cfg.eval.ar_steps = e.at("ar_steps").get<int64_t>();
    cfg.eval.temperature = e.at("temperature").get<double>();
    cfg.eval.t_start = e.at("t_start").get<double>();

    const auto& io = j.at("io");
    cfg.io.out = io.at("out").get<std::string>();
    cfg.io.tokenizer_ckpt = io.at("tokenizer_ckpt").get<std::string>();
    cfg.io.gen_ckpt = io.at("gen_ckpt").get<std::string>();
    cfg.io.cache = io.at("cache").get<std::string>();
    cfg.io.extractor_ckpt = io.at("extractor_ckpt").get<std::string>();

    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.deterministic = j.at("deterministic").get<bool>();
    cfg.resolved = j;
    return cfg;
}

std::string hex_digest(uint64_t h) {
    std::ostringstream out;
    out << std::hex << h;
    return out.str();
}

}  // namespace

TrainRecipe default_gen_recipe() {
    TrainRecipe recipe;
    recipe.peak_lr = 2e-4;
    recipe.lr_policy = LrPolicy::Constant;
    recipe.warmup_fraction = 0.0;
    recipe.beta1 = 0.9;
    recipe.beta2 = 0.999;
    recipe.weight_decay = 0.0;
    recipe.grad_clip = std::nullopt;
    return recipe;
}

std::string RunConfig::hash() const {
    return hex_digest(fnv1a(resolved.dump()));
}

std::string RunConfig::tokenizer_hash() const {
    nlohmann::json sub;
    sub["tokenizer"] = resolved.at("tokenizer");
    sub["seed"] = resolved.at("seed");
    return hex_digest(fnv1a(sub.dump()));
}

void apply_override(nlohmann::json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    TORCH_CHECK(eq != std::string::npos && eq > 0,
                "config: override must look like dot.path=value, got '", assignment, "'");
    const std::string dotted = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
        value = raw;  // unquoted strings
    }

    nlohmann::json leaf = value;
    std::vector<std::string> parts;
    std::stringstream ss(dotted);
    for (std::string part; std::getline(ss, part, '.');) {
        TORCH_CHECK(!part.empty(), "config: empty path segment in '", dotted, "'");
        parts.push_back(part);
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        leaf = nlohmann::json{{*it, leaf}};
    }
    expand_presets(leaf);  // allows --set tokenizer.encoder=small
    merge_checked(tree, leaf, "");
}

RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides,
                         bool gen_recipe_defaults) {
    json tree = default_tree(gen_recipe_defaults);
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        TORCH_CHECK(in.is_open(), "config: cannot open ", config_path);
        json from_file;
        try {
            from_file = json::parse(in, nullptr, /*allow_exceptions=*/true,
                                    /*ignore_comments=*/true);
        } catch (const json::parse_error& e) {
            TORCH_CHECK(false, "config: parse error in ", config_path, ": ", e.what());
        }
        expand_presets(from_file);
        merge_checked(tree, from_file, "");
    }
    for (const auto& assignment : overrides) {
        apply_override(tree, assignment);
    }
    return extract(tree);
}

}  // namespace detok
