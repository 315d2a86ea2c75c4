#include "trace/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace trace {

const char* status_name(Status s) {
    switch (s) {
        case Status::ok: return "ok";
        case Status::invalid_argument: return "invalid_argument";
        case Status::io: return "io";
        case Status::format: return "format";
        case Status::numeric: return "numeric";
        case Status::gate: return "gate";
        case Status::state: return "state";
        case Status::internal: return "internal";
    }
    return "unknown";
}

const std::map<std::string, RunConfig::KeyInfo>& RunConfig::schema() {
    static const std::map<std::string, KeyInfo> s = {
        {"world.n_objects", {"4", "object concepts in the toy world (2..4)"}},
        {"world.n_styles", {"2", "style concepts (0..2)"}},
        {"world.synonyms_per_concept", {"1", "near-duplicate tokens per concept"}},
        {"world.d_text", {"32", "embedding width"}},
        {"world.corpus_n", {"2400", "corpus size [samples]"}},
        {"world.image_noise", {"0.05", "pixel noise sigma in [-1,1] units"}},
        {"world.jitter", {"2", "max shape offset [px]"}},

        {"model.d_h", {"64", "hidden width"}},
        {"model.d_k", {"32", "attention key width"}},
        {"model.d_v", {"32", "attention value width"}},
        {"model.n_blocks", {"3", "denoiser blocks"}},
        {"model.n_heads", {"1", "attention heads (1 or 2)"}},
        {"model.time_dim", {"32", "sinusoidal time feature width (even)"}},

        {"schedule.T", {"100", "diffusion steps"}},
        {"schedule.beta_min", {"0.0001", "linear beta at t=1"}},
        {"schedule.beta_max", {"0.02", "linear beta at t=T"}},

        {"base.epochs", {"60", "base training epochs"}},
        {"base.batch", {"32", "base batch size [samples]"}},
        {"base.lr", {"0.002", "base learning rate"}},
        {"base.optimizer", {"adam", "adam | sgd"}},
        {"base.uncond_dropout", {"0.1", "probability of replacing the prompt with u"}},
        {"base.gate_acc", {"0.90", "min per-concept sample accuracy after training"}},
        {"base.gate_n", {"32", "samples per concept for the gate"}},
        {"base.gate_guidance", {"cfg", "gate sampling mode, none | cfg"}},
        {"base.gate_scale", {"1.5", "cfg scale for gate sampling"}},
        {"base.max_retrain", {"2", "gate retries with a reseeded stream"}},

        {"classifier.epochs", {"40", "classifier training epochs"}},
        {"classifier.batch", {"64", "classifier batch size [samples]"}},
        {"classifier.lr", {"0.002", "classifier learning rate"}},
        {"classifier.holdout", {"0.2", "holdout fraction for the separability gate"}},
        {"classifier.noise_aug", {"0.05", "gaussian input augmentation sigma"}},
        {"classifier.gate_acc", {"0.95", "min per-head holdout accuracy"}},

        {"erase.concepts", {"disc", "comma-separated concept token names"}},
        {"erase.variant", {"lstsq", "lstsq | paper_rank1"}},
        {"erase.eta", {"1.0", "edit strength; 1 maps w fully onto u"}},

        {"ft.steps", {"1500", "finetune optimizer steps"}},
        {"ft.batch_concept", {"4", "concept-prompt rollouts per step"}},
        {"ft.batch_clean", {"4", "preservation rollouts per step"}},
        {"ft.lr", {"0.01", "adapter learning rate"}},
        {"ft.optimizer", {"adam", "adam | sgd"}},
        {"ft.rank", {"1", "LoRA rank"}},
        {"ft.t_late", {"40", "gate: adapter active iff t < t_late; T+1 = always"}},
        {"ft.scale", {"1.0", "adapter output scale"}},
        {"ft.init_sigma", {"0.01", "C-factor init sigma (B starts at zero)"}},
        {"ft.pool", {"48", "precomputed (prompt,seed) target pairs per concept"}},
        {"ft.clean_pool", {"48", "precomputed clean reference pairs"}},
        {"ft.log_every", {"10", "loss-curve row interval [steps]"}},
        {"ft.syn_targets", {"false", "also build suppression targets for synonym prompts"}},
        {"ft.pair_seeds", {"8", "precomputed seeds per concept pair for integration loss"}},
        {"ft.pair_batch", {"2", "pair seeds sampled per integration step"}},
        {"ft.shared", {"false", "one shared adapter for all concepts instead of one each"}},

        {"loss.t0", {"40", "suppressed segment is t <= t0 in the target"}},
        {"loss.alpha", {"1.0", "concept latent term weight"}},
        {"loss.lambda", {"0.5", "preservation term weight"}},
        {"loss.anchor_weight", {"0.1", "early-step eps anchor weight"}},
        {"loss.t_anchor", {"60", "anchor term covers t > t_anchor"}},
        {"loss.score_weight", {"1.0", "classifier logit term weight"}},
        {"loss.divergence", {"mse_mean", "mse_mean | mse_sum"}},
        {"loss.target_mode", {"negative", "negative | substitute"}},
        {"loss.neg_scale", {"1.0", "negative guidance scale for targets"}},

        {"multi.every", {"10", "integration loss interval [steps]"}},
        {"multi.weight", {"1.0", "integration loss weight"}},

        {"eval.n", {"64", "samples per prompt class (>=10; <50 warns)"}},
        {"eval.guidance", {"cfg", "none | cfg"}},
        {"eval.scale", {"1.5", "cfg scale when eval.guidance = cfg"}},
        {"eval.mmd_n", {"128", "feature samples per side for mmd"}},

        {"sample.prompt", {"photo disc", "space-separated token names"}},
        {"sample.kind", {"ddim", "ddim | ancestral"}},
        {"sample.n", {"4", "images to generate"}},
        {"sample.guidance", {"none", "none | cfg | negative"}},
        {"sample.scale", {"1.0", "guidance scale"}},
        {"sample.compare", {"none", "none | substitute: also sample the substituted prompt"}},
        {"sample.dump_latents", {"2", "intermediate latents dumped as pgm"}},

        {"sweep.scales", {"0.25,0.5,1,2", "edit scale multipliers"}},
        {"loc.prompts", {"20", "prompts for the locality check"}},
        {"loc.seeds", {"3", "seeds per prompt"}},

        {"run.seed", {"7", "root seed; every stream derives from it"}},
        {"run.threads", {"0", "worker threads; 0 = hardware"}},
    };
    return s;
}

RunConfig::RunConfig() {
    for (const auto& [k, info] : schema()) values[k] = info.def;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = schema().find(key);
    require(it != schema().end(), Status::invalid_argument, "unknown config key: " + key);
    require(!value.empty(), Status::invalid_argument, "empty value for config key: " + key);
    values[key] = value;
}

void RunConfig::apply_overrides(const std::vector<std::string>& assignments) {
    for (const auto& a : assignments) {
        auto eq = a.find('=');
        require(eq != std::string::npos, Status::invalid_argument,
                "override must be key=value: " + a);
        auto strip = [](std::string s) {
            size_t b = s.find_first_not_of(" \t");
            size_t e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        set(strip(a.substr(0, eq)), strip(a.substr(eq + 1)));
    }
}

const std::string& RunConfig::get_str(const std::string& key) const {
    auto it = values.find(key);
    require(it != values.end(), Status::invalid_argument, "unknown config key: " + key);
    return it->second;
}

int RunConfig::get_int(const std::string& key) const {
    const std::string& v = get_str(key);
    char* end = nullptr;
    long r = std::strtol(v.c_str(), &end, 10);
    require(end && *end == '\0', Status::invalid_argument,
            "config " + key + " is not an integer: " + v);
    return int(r);
}

double RunConfig::get_f(const std::string& key) const {
    const std::string& v = get_str(key);
    char* end = nullptr;
    double r = std::strtod(v.c_str(), &end);
    require(end && *end == '\0', Status::invalid_argument,
            "config " + key + " is not a number: " + v);
    return r;
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get_str(key);
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    fail(Status::invalid_argument, "config " + key + " is not a boolean: " + v);
}

std::vector<double> RunConfig::get_list(const std::string& key) const {
    const std::string& v = get_str(key);
    std::vector<double> out;
    std::string item;
    std::istringstream is(v);
    while (std::getline(is, item, ',')) {
        char* end = nullptr;
        double r = std::strtod(item.c_str(), &end);
        require(end && *end == '\0' && !item.empty(), Status::invalid_argument,
                "config " + key + " has a bad list item: " + item);
        out.push_back(r);
    }
    require(!out.empty(), Status::invalid_argument, "config " + key + " is an empty list");
    return out;
}

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        lineno++;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        size_t e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        auto eq = line.find('=');
        require(eq != std::string::npos, Status::format,
                "config line " + std::to_string(lineno) + " is not key = value");
        auto strip = [](std::string s) {
            size_t x = s.find_first_not_of(" \t");
            size_t y = s.find_last_not_of(" \t");
            return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
        };
        cfg.set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), Status::io, "cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_text(text);
}

std::string RunConfig::emit() const {
    std::string out;
    for (const auto& [k, v] : values) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

}  // namespace trace
