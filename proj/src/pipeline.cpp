#include "trace/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "trace/checkpoint.hpp"
#include "trace/rng.hpp"
#include "trace/sampler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace trace {

namespace artifact {
std::string adapter(const std::string& concept_name) {
    return "adapter_" + concept_name + ".trcl";
}
}  // namespace artifact

bool Workspace::has(const std::string& name) const { return fs::exists(path(name)); }

Workspace open_workspace(const std::string& out_dir, const RunConfig& cfg) {
    std::string dir = out_dir;
    if (dir.empty()) {
        const char* env = std::getenv("TRACE_OUT_DIR");
        dir = (env && *env) ? env : "trace_out";
    }
    fs::create_directories(dir);
    return Workspace{dir, cfg};
}

// ---- config -> module structs ----

WorldConfig world_config(const RunConfig& c) {
    WorldConfig w;
    w.n_objects = c.get_int("world.n_objects");
    w.n_styles = c.get_int("world.n_styles");
    w.synonyms_per_concept = c.get_int("world.synonyms_per_concept");
    w.d_text = c.get_int("world.d_text");
    w.corpus_n = c.get_int("world.corpus_n");
    w.image_noise = c.get_f("world.image_noise");
    w.jitter = c.get_int("world.jitter");
    return w;
}

ModelDims model_dims(const RunConfig& c) {
    ModelDims d;
    d.d_h = c.get_int("model.d_h");
    d.d_k = c.get_int("model.d_k");
    d.d_v = c.get_int("model.d_v");
    d.d_text = c.get_int("world.d_text");
    d.n_blocks = c.get_int("model.n_blocks");
    d.n_heads = c.get_int("model.n_heads");
    d.time_dim = c.get_int("model.time_dim");
    return d;
}

NoiseSchedule schedule_config(const RunConfig& c) {
    return NoiseSchedule::linear(c.get_int("schedule.T"), c.get_f("schedule.beta_min"),
                                 c.get_f("schedule.beta_max"));
}

static uint64_t root_seed(const RunConfig& c) { return uint64_t(c.get_int("run.seed")); }

ClassifierTrainConfig classifier_config(const RunConfig& c) {
    ClassifierTrainConfig k;
    k.epochs = c.get_int("classifier.epochs");
    k.batch = c.get_int("classifier.batch");
    k.lr = c.get_f("classifier.lr");
    k.holdout = c.get_f("classifier.holdout");
    k.noise_aug = c.get_f("classifier.noise_aug");
    k.gate_acc = c.get_f("classifier.gate_acc");
    k.seed = root_seed(c);
    return k;
}

static GuidanceMode cond_guidance_from(const RunConfig& c, const std::string& key) {
    const std::string& g = c.get_str(key);
    require(g == "none" || g == "cfg", Status::invalid_argument,
            key + " must be none or cfg, got " + g);
    return g == "cfg" ? GuidanceMode::cfg : GuidanceMode::none;
}

BaseTrainConfig base_config(const RunConfig& c) {
    BaseTrainConfig b;
    b.epochs = c.get_int("base.epochs");
    b.batch = c.get_int("base.batch");
    b.lr = c.get_f("base.lr");
    b.opt = opt_kind_from(c.get_str("base.optimizer"));
    b.uncond_dropout = c.get_f("base.uncond_dropout");
    b.gate_acc = c.get_f("base.gate_acc");
    b.gate_n = c.get_int("base.gate_n");
    b.gate_guidance = cond_guidance_from(c, "base.gate_guidance");
    b.gate_scale = c.get_f("base.gate_scale");
    b.max_retrain = c.get_int("base.max_retrain");
    b.seed = root_seed(c);
    return b;
}

ErasureLossConfig loss_config(const RunConfig& c) {
    ErasureLossConfig l;
    l.alpha = c.get_f("loss.alpha");
    l.lambda = c.get_f("loss.lambda");
    l.anchor_weight = c.get_f("loss.anchor_weight");
    l.t_anchor = c.get_int("loss.t_anchor");
    l.score_weight = c.get_f("loss.score_weight");
    l.t0 = c.get_int("loss.t0");
    const std::string& div = c.get_str("loss.divergence");
    require(div == "mse_mean" || div == "mse_sum", Status::invalid_argument,
            "loss.divergence must be mse_mean or mse_sum, got " + div);
    l.mse_sum = div == "mse_sum";
    return l;
}

static TargetMode target_mode_of(const RunConfig& c) {
    const std::string& m = c.get_str("loss.target_mode");
    if (m == "negative") return TargetMode::negative;
    if (m == "substitute") return TargetMode::substitute;
    fail(Status::invalid_argument, "loss.target_mode must be negative or substitute, got " + m);
}

FinetuneConfig finetune_config(const RunConfig& c) {
    FinetuneConfig f;
    f.steps = c.get_int("ft.steps");
    f.batch_concept = c.get_int("ft.batch_concept");
    f.batch_clean = c.get_int("ft.batch_clean");
    f.lr = c.get_f("ft.lr");
    f.opt = opt_kind_from(c.get_str("ft.optimizer"));
    f.rank = c.get_int("ft.rank");
    f.t_late = c.get_int("ft.t_late");
    f.adapter_scale = c.get_f("ft.scale");
    f.init_sigma = c.get_f("ft.init_sigma");
    f.pool = c.get_int("ft.pool");
    f.clean_pool = c.get_int("ft.clean_pool");
    f.syn_targets = c.get_bool("ft.syn_targets");
    f.multi_every = c.get_int("multi.every");
    f.multi_weight = c.get_f("multi.weight");
    f.pair_seeds = c.get_int("ft.pair_seeds");
    f.pair_batch = c.get_int("ft.pair_batch");
    f.shared_adapter = c.get_bool("ft.shared");
    f.target_mode = target_mode_of(c);
    f.neg_scale = c.get_f("loss.neg_scale");
    f.seed = root_seed(c);
    f.loss = loss_config(c);
    return f;
}

EvalConfig eval_config(const RunConfig& c) {
    EvalConfig e;
    e.n_per_class = c.get_int("eval.n");
    e.guidance = cond_guidance_from(c, "eval.guidance");
    e.scale = c.get_f("eval.scale");
    e.mmd_n = c.get_int("eval.mmd_n");
    e.seed = root_seed(c);
    return e;
}

EditVariant edit_variant(const RunConfig& c) {
    const std::string& v = c.get_str("erase.variant");
    if (v == "paper_rank1") return EditVariant::paper_rank1;
    if (v == "lstsq") return EditVariant::lstsq;
    fail(Status::invalid_argument, "erase.variant must be paper_rank1 or lstsq, got " + v);
}

static std::vector<std::string> split_names(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s + ",") {
        if (ch == ',') {
            size_t b = cur.find_first_not_of(" \t");
            if (b != std::string::npos) {
                size_t e = cur.find_last_not_of(" \t");
                out.push_back(cur.substr(b, e - b + 1));
            }
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    return out;
}

std::vector<uint16_t> erase_tokens(const Vocabulary& v, const RunConfig& c) {
    std::vector<uint16_t> toks;
    for (const std::string& name : split_names(c.get_str("erase.concepts"))) {
        int tok = -1;
        for (int i = 0; i < v.n_tokens(); ++i)
            if (v.names[i] == name) tok = i;
        require(tok >= 0, Status::invalid_argument, "erase.concepts: unknown token " + name);
        require(v.concept_id[tok] >= 0 && v.synonym_of[tok] == uint16_t(tok),
                Status::invalid_argument, "erase.concepts: " + name + " is not a canonical concept");
        toks.push_back(uint16_t(tok));
    }
    require(!toks.empty(), Status::invalid_argument, "erase.concepts is empty");
    return toks;
}

// ---- artifact plumbing ----

static double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

static std::string hex64(uint64_t v) {
    char b[19];
    std::snprintf(b, sizeof b, "0x%016llx", static_cast<unsigned long long>(v));
    return b;
}

static std::string fmt_g(double v) {
    char b[40];
    std::snprintf(b, sizeof b, "%.17g", v);
    return b;
}

static void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    require(bool(f), Status::io, "cannot open for write: " + path);
    f.write(text.data(), std::streamsize(text.size()));
    require(bool(f), Status::io, "short write: " + path);
}

static std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(bool(f), Status::io, "cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

static void write_manifest(const Workspace& ws, const std::string& cmd,
                           const std::vector<std::string>& inputs,
                           const std::vector<std::string>& outputs, double wall_ms, json extra) {
    json j;
    j["cmd"] = cmd;
    j["version"] = kVersion;
    j["config_hash"] = hex64(ws.cfg.hash());
    j["config"] = json::object();
    for (const auto& [k, v] : ws.cfg.values) j["config"][k] = v;
    auto files = [&](const std::vector<std::string>& names) {
        json a = json::array();
        for (const auto& n : names)
            a.push_back({{"name", n}, {"fnv1a64", hex64(file_digest(ws.path(n)))}});
        return a;
    };
    j["inputs"] = files(inputs);
    j["outputs"] = files(outputs);
    j["wall_ms"] = wall_ms;
    j["extra"] = std::move(extra);
    std::string name = cmd;
    for (char& ch : name)
        if (ch == ' ') ch = '-';
    write_text(ws.path("manifest_" + name + ".json"), j.dump(2) + "\n");
}

static void need(const Workspace& ws, const std::string& name, const std::string& producer) {
    require(ws.has(name), Status::state,
            ws.path(name) + " missing; run `" + producer + "` first");
}

static AdapterSet load_adapter_set(const Workspace& ws, const Vocabulary& v,
                                   std::vector<std::string>* files_out = nullptr) {
    AdapterSet set;
    for (uint16_t tok : erase_tokens(v, ws.cfg)) {
        std::string f = artifact::adapter(v.names[tok]);
        if (!ws.has(f)) continue;
        set.adapters.push_back(load_adapter(ws.path(f)));
        if (files_out) files_out->push_back(f);
    }
    set.canonicalize();
    return set;
}

// ---- stages ----

void stage_gen_world(Workspace& ws) {
    double t0 = now_ms();
    WorldConfig wc = world_config(ws.cfg);
    uint64_t seed = root_seed(ws.cfg);
    Vocabulary v = build_vocabulary(wc, seed);
    auto corpus = generate_corpus(v, wc, seed);
    save_corpus(ws.path(artifact::corpus), corpus);

    json extra;
    extra["n_samples"] = corpus.size();
    extra["n_tokens"] = v.n_tokens();
    extra["tokens"] = v.names;
    write_manifest(ws, "gen-world", {}, {artifact::corpus}, now_ms() - t0, extra);
}

void stage_train_classifier(Workspace& ws) {
    double t0 = now_ms();
    need(ws, artifact::corpus, "gen-world");
    auto corpus = load_corpus(ws.path(artifact::corpus));
    ClassifierStats stats;
    ConceptClassifier clf = train_classifier(corpus, classifier_config(ws.cfg), &stats);
    save_classifier(ws.path(artifact::classifier), clf);

    json extra;
    extra["obj_holdout_acc"] = stats.obj_holdout_acc;
    extra["sty_holdout_acc"] = stats.sty_holdout_acc;
    extra["final_loss"] = stats.final_loss;
    write_manifest(ws, "train-classifier", {artifact::corpus}, {artifact::classifier},
                   now_ms() - t0, extra);
}

void stage_train_base(Workspace& ws) {
    double t0 = now_ms();
    need(ws, artifact::corpus, "gen-world");
    need(ws, artifact::classifier, "train-classifier");
    auto corpus = load_corpus(ws.path(artifact::corpus));
    ConceptClassifier clf = load_classifier(ws.path(artifact::classifier));
    Vocabulary v = build_vocabulary(world_config(ws.cfg), root_seed(ws.cfg));

    std::vector<BaseLossRow> rows;
    BaseTrainStats stats;
    DenoiserModel m = train_base(corpus, model_dims(ws.cfg), schedule_config(ws.cfg), v,
                                 base_config(ws.cfg), &clf, &rows, &stats);
    m.config_hash = ws.cfg.hash();
    save_model(ws.path(artifact::base_model), m);

    std::string csv = "epoch,step,loss,wall_ms\n";
    for (const auto& r : rows) {
        char line[128];
        std::snprintf(line, sizeof line, "%d,%d,%.17g,%.3f\n", r.epoch, r.step, r.loss, r.wall_ms);
        csv += line;
    }
    write_text(ws.path(artifact::loss_base_csv), csv);

    json extra;
    extra["first_batch_loss"] = stats.first_batch_loss;
    extra["final_loss"] = stats.final_loss;
    extra["attempts"] = stats.attempts;
    extra["gate_accs"] = stats.gate_accs;
    write_manifest(ws, "train-base", {artifact::corpus, artifact::classifier},
                   {artifact::base_model, artifact::loss_base_csv}, now_ms() - t0, extra);
}

void stage_erase_closed_form(Workspace& ws) {
    double t0 = now_ms();
    need(ws, artifact::base_model, "train-base");
    DenoiserModel base = load_model(ws.path(artifact::base_model));
    std::vector<uint16_t> toks = erase_tokens(base.vocab, ws.cfg);

    std::vector<RankOneEdit> edits;
    DenoiserModel edited =
        apply_closed_form(base, toks, edit_variant(ws.cfg), ws.cfg.get_f("erase.eta"), &edits);
    save_model(ws.path(artifact::edited_model), edited);
    save_edits(ws.path(artifact::edits), edits);

    json extra;
    extra["concepts"] = json::array();
    for (uint16_t t : toks) extra["concepts"].push_back(base.vocab.names[t]);
    extra["variant"] = ws.cfg.get_str("erase.variant");
    extra["eta"] = ws.cfg.get_f("erase.eta");
    extra["n_edits"] = edits.size();
    extra["delta_frob"] = edits_fro_norm(edits);
    write_manifest(ws, "erase-closed-form", {artifact::base_model},
                   {artifact::edited_model, artifact::edits}, now_ms() - t0, extra);
}

void stage_finetune(Workspace& ws, bool with_integration) {
    double t0 = now_ms();
    need(ws, artifact::base_model, "train-base");
    need(ws, artifact::edited_model, "erase-closed-form");
    need(ws, artifact::classifier, "train-classifier");
    DenoiserModel base = load_model(ws.path(artifact::base_model));
    DenoiserModel edited = load_model(ws.path(artifact::edited_model));
    ConceptClassifier clf = load_classifier(ws.path(artifact::classifier));

    FinetuneConfig fc = finetune_config(ws.cfg);
    if (!with_integration) fc.multi_every = 0;
    std::vector<uint16_t> toks = erase_tokens(edited.vocab, ws.cfg);

    std::vector<FtLossRow> rows;
    AdapterSet set = train_multi(base, edited, toks, clf, fc, &rows);

    // stale adapters from a previous run with a different concept list or the
    // shared flag flipped must not survive
    for (const auto& e : fs::directory_iterator(ws.dir)) {
        std::string n = e.path().filename().string();
        if (n.rfind("adapter_", 0) == 0 && n.size() > 5 && n.substr(n.size() - 5) == ".trcl")
            fs::remove(e.path());
    }
    std::vector<std::string> adapter_files;
    for (const auto& a : set.adapters) {
        std::string f = artifact::adapter(edited.vocab.names[a.concept_token]);
        save_adapter(ws.path(f), a);
        adapter_files.push_back(f);
    }

    int log_every = std::max(1, ws.cfg.get_int("ft.log_every"));
    std::string csv = "step,concept,total,concept_term,score_term,preserve_term,anchor_term,integ,wall_ms\n";
    for (const auto& r : rows) {
        if (r.step % log_every != 0 && r.step != fc.steps - 1) continue;
        char line[320];
        std::snprintf(line, sizeof line, "%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n",
                      r.step, r.concept_name.c_str(), r.total, r.concept_term, r.score_term,
                      r.preserve_term, r.anchor_term, r.integ, r.wall_ms);
        csv += line;
    }
    write_text(ws.path(artifact::loss_ft_csv), csv);

    json extra;
    extra["steps"] = fc.steps;
    extra["shared"] = fc.shared_adapter;
    extra["integration_every"] = fc.multi_every;
    extra["adapters"] = adapter_files;
    if (!rows.empty()) extra["final_total"] = rows.back().total;
    std::vector<std::string> outputs = adapter_files;
    outputs.push_back(artifact::loss_ft_csv);
    write_manifest(ws, with_integration ? "erase-multi" : "finetune",
                   {artifact::base_model, artifact::edited_model, artifact::classifier}, outputs,
                   now_ms() - t0, extra);
}

void stage_merge(Workspace& ws, bool allow_gated) {
    double t0 = now_ms();
    need(ws, artifact::edited_model, "erase-closed-form");
    DenoiserModel m = load_model(ws.path(artifact::edited_model));
    std::vector<std::string> files;
    AdapterSet set = load_adapter_set(ws, m.vocab, &files);
    require(!set.adapters.empty(), Status::state, "no adapters found; run `finetune` first");
    merge_adapters(m, set, allow_gated);
    save_model(ws.path(artifact::merged_model), m);

    json extra;
    extra["allow_gated"] = allow_gated;
    extra["adapters"] = files;
    std::vector<std::string> inputs = files;
    inputs.insert(inputs.begin(), artifact::edited_model);
    write_manifest(ws, "merge", inputs, {artifact::merged_model}, now_ms() - t0, extra);
}

// The sample/eval/locality stages run the latest model in the workspace: the
// edited one (plus any saved adapters) once erasure has happened, the base
// model before that.
static DenoiserModel load_current(const Workspace& ws, bool* edited_out) {
    bool edited = ws.has(artifact::edited_model);
    if (edited_out) *edited_out = edited;
    need(ws, artifact::base_model, "train-base");
    return load_model(ws.path(edited ? artifact::edited_model : artifact::base_model));
}

void stage_sample(Workspace& ws) {
    double t0 = now_ms();
    bool edited = false;
    DenoiserModel m = load_current(ws, &edited);
    std::vector<std::string> adapter_files;
    AdapterSet set = edited ? load_adapter_set(ws, m.vocab, &adapter_files) : AdapterSet{};

    auto prompt = prompt_from_names(ws.cfg.get_str("sample.prompt"), m.vocab);
    PromptEmbedding pe = encode(prompt, m.vocab);

    const std::string& kind_s = ws.cfg.get_str("sample.kind");
    require(kind_s == "ddim" || kind_s == "ancestral", Status::invalid_argument,
            "sample.kind must be ddim or ancestral, got " + kind_s);
    const std::string& gmode = ws.cfg.get_str("sample.guidance");
    GuidanceSpec g;
    g.scale = ws.cfg.get_f("sample.scale");
    PromptEmbedding secondary;
    bool has_secondary = false;
    if (gmode == "cfg") {
        g.mode = GuidanceMode::cfg;
        secondary = encode({m.vocab.u_id}, m.vocab);
        has_secondary = true;
    } else if (gmode == "negative") {
        g.mode = GuidanceMode::negative;
        uint16_t w = erase_tokens(m.vocab, ws.cfg)[0];
        secondary = encode(substitute(prompt, w, m.vocab.u_id, m.vocab), m.vocab);
        has_secondary = true;
    } else {
        require(gmode == "none", Status::invalid_argument,
                "sample.guidance must be none, cfg or negative, got " + gmode);
    }

    const std::string& compare = ws.cfg.get_str("sample.compare");
    require(compare == "none" || compare == "substitute", Status::invalid_argument,
            "sample.compare must be none or substitute, got " + compare);

    fs::create_directories(ws.path("samples"));
    SampleOpts opts;
    opts.kind = kind_s == "ddim" ? SamplerKind::ddim : SamplerKind::ancestral;
    opts.record_eps = false;
    if (!set.adapters.empty()) opts.adapters = &set;

    int n = ws.cfg.get_int("sample.n");
    int dump = ws.cfg.get_int("sample.dump_latents");
    Rng seeds(root_seed(ws.cfg), "sample.traj");
    json files = json::array(), seed_list = json::array();
    std::vector<std::string> outputs;
    for (int i = 0; i < n; ++i) {
        uint64_t s = seeds.next_u64();
        seed_list.push_back(hex64(s));
        opts.seed = s;
        Trajectory traj = sample(m, pe, has_secondary ? &secondary : nullptr, g, opts);
        char name[64];
        std::snprintf(name, sizeof name, "samples/sample_%02d.pgm", i);
        write_pgm(ws.path(name), traj.latents[0]);
        outputs.push_back(name);
        if (i == 0) {
            int T = m.schedule.T;
            for (int j = 1; j <= dump; ++j) {
                int t = T * j / (dump + 1);
                std::snprintf(name, sizeof name, "samples/latent_t%03d.pgm", t);
                write_pgm(ws.path(name), traj.latents[t]);
                outputs.push_back(name);
            }
        }
        if (compare == "substitute") {
            uint16_t w = erase_tokens(m.vocab, ws.cfg)[0];
            PromptEmbedding pe2 = encode(substitute(prompt, w, m.vocab.u_id, m.vocab), m.vocab);
            Trajectory tr2 = sample(m, pe2, has_secondary ? &secondary : nullptr, g, opts);
            std::snprintf(name, sizeof name, "samples/compare_%02d.pgm", i);
            write_pgm(ws.path(name), tr2.latents[0]);
            outputs.push_back(name);
        }
    }
    for (const auto& f : outputs) files.push_back(f);

    json extra;
    extra["prompt"] = prompt_to_string(prompt, m.vocab);
    extra["model"] = edited ? artifact::edited_model : artifact::base_model;
    extra["adapters"] = adapter_files;
    extra["seeds"] = seed_list;
    extra["files"] = files;
    write_manifest(ws, "sample", {edited ? artifact::edited_model : artifact::base_model}, outputs,
                   now_ms() - t0, extra);
}

MetricsReport stage_eval(Workspace& ws) {
    double t0 = now_ms();
    need(ws, artifact::base_model, "train-base");
    need(ws, artifact::classifier, "train-classifier");
    DenoiserModel reference = load_model(ws.path(artifact::base_model));
    bool edited = false;
    DenoiserModel m = load_current(ws, &edited);
    ConceptClassifier clf = load_classifier(ws.path(artifact::classifier));
    std::vector<std::string> adapter_files;
    AdapterSet set = edited ? load_adapter_set(ws, m.vocab, &adapter_files) : AdapterSet{};

    MetricsReport rep = evaluate(m, set.adapters.empty() ? nullptr : &set, reference, clf,
                                 erase_tokens(m.vocab, ws.cfg), eval_config(ws.cfg));

    std::string csv = "name,value\n";
    csv += "acc_e," + fmt_g(rep.acc_e) + "\n";
    csv += "acc_s," + fmt_g(rep.acc_s) + "\n";
    csv += "acc_g," + fmt_g(rep.acc_g) + "\n";
    csv += "h_o," + fmt_g(rep.h_o) + "\n";
    csv += "feature_mmd," + fmt_g(rep.feature_mmd) + "\n";
    csv += "mmd_floor," + fmt_g(rep.mmd_floor) + "\n";
    for (const auto& r : rep.rows)
        csv += "acc:" + r.kind + ":" + r.prompt + "," + fmt_g(r.acc) + "\n";
    write_text(ws.path(artifact::metrics_csv), csv);

    json extra;
    extra["acc_e"] = rep.acc_e;
    extra["acc_s"] = rep.acc_s;
    extra["acc_g"] = rep.acc_g;
    extra["h_o"] = rep.h_o;
    extra["feature_mmd"] = rep.feature_mmd;
    extra["mmd_floor"] = rep.mmd_floor;
    extra["model"] = edited ? artifact::edited_model : artifact::base_model;
    extra["adapters"] = adapter_files;
    std::vector<std::string> inputs = {artifact::base_model, artifact::classifier};
    if (edited) inputs.push_back(artifact::edited_model);
    for (const auto& f : adapter_files) inputs.push_back(f);
    write_manifest(ws, "eval", inputs, {artifact::metrics_csv}, now_ms() - t0, extra);
    return rep;
}

std::vector<StabilityRow> stage_sweep_stability(Workspace& ws) {
    double t0 = now_ms();
    need(ws, artifact::base_model, "train-base");
    need(ws, artifact::edits, "erase-closed-form");
    need(ws, artifact::classifier, "train-classifier");
    DenoiserModel base = load_model(ws.path(artifact::base_model));
    auto edits = load_edits(ws.path(artifact::edits));
    ConceptClassifier clf = load_classifier(ws.path(artifact::classifier));
    std::vector<double> scales = ws.cfg.get_list("sweep.scales");
    require(!scales.empty(), Status::invalid_argument, "sweep.scales is empty");
    uint16_t w = erase_tokens(base.vocab, ws.cfg)[0];

    auto rows = stability_sweep(base, edits, scales, clf, w, eval_config(ws.cfg));

    std::string csv = "scale,delta_frob,strength,acc_w,floor\n";
    for (const auto& r : rows)
        csv += fmt_g(r.scale) + "," + fmt_g(r.delta_frob) + "," + fmt_g(r.strength) + "," +
               fmt_g(r.acc_w) + "," + fmt_g(r.floor) + "\n";
    write_text(ws.path(artifact::stability_csv), csv);

    json extra;
    extra["concept"] = base.vocab.names[w];
    extra["scales"] = scales;
    extra["floor"] = rows.empty() ? 0.0 : rows[0].floor;
    write_manifest(ws, "sweep-stability",
                   {artifact::base_model, artifact::edits, artifact::classifier},
                   {artifact::stability_csv}, now_ms() - t0, extra);
    return rows;
}

LocalityReport stage_check_locality(Workspace& ws) {
    double t0 = now_ms();
    bool edited = false;
    DenoiserModel m = load_current(ws, &edited);
    std::vector<std::string> adapter_files;
    AdapterSet set = load_adapter_set(ws, m.vocab, &adapter_files);
    require(!set.adapters.empty(), Status::state, "no adapters found; run `finetune` first");

    LocalityReport rep = locality_check(m, set, ws.cfg.get_int("loc.prompts"),
                                        ws.cfg.get_int("loc.seeds"), root_seed(ws.cfg));

    std::string csv = "prompts,seeds,gate_t,prefixes_identical,max_prefix_abs_diff,full_identical\n";
    csv += std::to_string(rep.prompts) + "," + std::to_string(rep.seeds) + "," +
           std::to_string(rep.gate_t) + "," + std::to_string(int(rep.prefixes_identical)) + "," +
           fmt_g(rep.max_prefix_abs_diff) + "," + std::to_string(int(rep.full_identical)) + "\n";
    write_text(ws.path(artifact::locality_csv), csv);

    json extra;
    extra["gate_t"] = rep.gate_t;
    extra["prefixes_identical"] = rep.prefixes_identical;
    extra["max_prefix_abs_diff"] = rep.max_prefix_abs_diff;
    extra["full_identical"] = rep.full_identical;
    extra["adapters"] = adapter_files;
    std::vector<std::string> inputs = adapter_files;
    inputs.insert(inputs.begin(), edited ? artifact::edited_model : artifact::base_model);
    write_manifest(ws, "check-locality", inputs, {artifact::locality_csv}, now_ms() - t0, extra);
    return rep;
}

GradCheckReport stage_grad_check(Workspace& ws) {
    double t0 = now_ms();
    need(ws, artifact::base_model, "train-base");
    need(ws, artifact::classifier, "train-classifier");
    DenoiserModel base = load_model(ws.path(artifact::base_model));
    bool edited_present = false;
    DenoiserModel edited = load_current(ws, &edited_present);
    ConceptClassifier clf = load_classifier(ws.path(artifact::classifier));

    FinetuneConfig fc = finetune_config(ws.cfg);
    std::vector<uint16_t> toks = erase_tokens(edited.vocab, ws.cfg);
    uint16_t w = toks[0];
    std::string w_name = edited.vocab.names[w];

    AdapterSet set;
    std::string adapter_source;
    if (ws.has(artifact::adapter(w_name))) {
        set.adapters.push_back(load_adapter(ws.path(artifact::adapter(w_name))));
        adapter_source = artifact::adapter(w_name);
    } else {
        const ModelDims& d = edited.dims;
        set.adapters.push_back(make_adapter(d.n_blocks, d.d_k, d.d_v, d.d_text, w, fc.rank,
                                            fc.t_late, fc.adapter_scale, fc.init_sigma,
                                            fc.seed ^ fnv1a64("adapter/" + w_name)));
        adapter_source = "fresh";
    }
    int t_late = set.adapters[0].t_late;

    const int pool_n = 4, coords = 3;
    TargetPool targets = build_target_pool(base, edited, w, pool_n, fc.loss, t_late,
                                           fc.target_mode, fc.neg_scale, false, fc.seed);
    CleanPool cleans =
        build_clean_pool(base, edited, toks, pool_n, fc.loss, t_late, fc.loss.t_anchor, fc.seed);
    ErasureBatch batch;
    batch.target_idx = {0, 1};
    batch.clean_idx = {0, 1};

    GradCheckReport rep =
        grad_check(edited, set, targets, cleans, batch, clf, fc.loss, coords, fc.seed, 1e-4);

    std::string csv = "block,max_rel_err,n_checked,pass\n";
    for (const auto& r : rep.rows)
        csv += r.block + "," + fmt_g(r.max_rel_err) + "," + std::to_string(r.n_checked) + "," +
               std::to_string(int(r.pass)) + "\n";
    write_text(ws.path(artifact::gradcheck_csv), csv);

    json extra;
    extra["pass"] = rep.pass;
    extra["tol"] = rep.tol;
    extra["adapter"] = adapter_source;
    extra["blocks"] = rep.rows.size();
    write_manifest(ws, "grad-check", {artifact::base_model, artifact::classifier},
                   {artifact::gradcheck_csv}, now_ms() - t0, extra);
    return rep;
}

static std::map<std::string, std::string> read_csv_pairs(const std::string& path) {
    std::map<std::string, std::string> out;
    std::istringstream ss(read_text(path));
    std::string line;
    while (std::getline(ss, line)) {
        auto comma = line.rfind(',');
        if (comma == std::string::npos) continue;
        out[line.substr(0, comma)] = line.substr(comma + 1);
    }
    return out;
}

MetricsReport stage_ablate(Workspace& ws, const std::string& preset) {
    double t0 = now_ms();
    bool known = false;
    for (const char* p : kAblationPresets) known = known || preset == p;
    require(known, Status::invalid_argument,
            "unknown ablation preset: " + preset +
                " (full, no-closed-form, no-gate, single-shared-adapter, no-integration-loss)");
    need(ws, artifact::base_model, "train-base");
    need(ws, artifact::classifier, "train-classifier");

    RunConfig acfg = ws.cfg;
    if (preset == "no-closed-form") {
        acfg.set("erase.eta", "0");
    } else if (preset == "no-gate") {
        acfg.set("ft.t_late", std::to_string(acfg.get_int("schedule.T") + 1));
        acfg.set("loss.alpha", "0");
        acfg.set("loss.t0", "0");
    } else if (preset == "single-shared-adapter") {
        acfg.set("ft.shared", "true");
    } else if (preset == "no-integration-loss") {
        acfg.set("multi.every", "0");
    }

    Workspace aws = open_workspace(ws.dir + "/ablate_" + preset, acfg);
    fs::copy_file(ws.path(artifact::base_model), aws.path(artifact::base_model),
                  fs::copy_options::overwrite_existing);
    fs::copy_file(ws.path(artifact::classifier), aws.path(artifact::classifier),
                  fs::copy_options::overwrite_existing);

    stage_erase_closed_form(aws);
    stage_finetune(aws, true);
    MetricsReport rep = stage_eval(aws);

    // one row per preset directory present, fixed order, rewritten wholesale
    std::string csv = "preset,acc_e,acc_s,acc_g,h_o,feature_mmd,mmd_floor\n";
    for (const char* p : kAblationPresets) {
        std::string mpath = ws.dir + "/ablate_" + p + "/" + artifact::metrics_csv;
        if (!fs::exists(mpath)) continue;
        auto kv = read_csv_pairs(mpath);
        csv += std::string(p) + "," + kv["acc_e"] + "," + kv["acc_s"] + "," + kv["acc_g"] + "," +
               kv["h_o"] + "," + kv["feature_mmd"] + "," + kv["mmd_floor"] + "\n";
    }
    write_text(ws.path(artifact::ablation_csv), csv);

    json extra;
    extra["preset"] = preset;
    extra["dir"] = "ablate_" + preset;
    extra["acc_e"] = rep.acc_e;
    extra["acc_s"] = rep.acc_s;
    extra["acc_g"] = rep.acc_g;
    extra["h_o"] = rep.h_o;
    extra["feature_mmd"] = rep.feature_mmd;
    extra["mmd_floor"] = rep.mmd_floor;
    write_manifest(ws, "ablate " + preset, {artifact::base_model, artifact::classifier},
                   {artifact::ablation_csv}, now_ms() - t0, extra);
    return rep;
}

ReproReport stage_repro_all(Workspace& ws) {
    double t0 = now_ms();
    for (const char* sub : {"repro_a", "repro_b"}) {
        fs::remove_all(ws.dir + "/" + sub);
        Workspace w = open_workspace(ws.dir + "/" + sub, ws.cfg);
        stage_gen_world(w);
        stage_train_classifier(w);
        stage_train_base(w);
        stage_erase_closed_form(w);
        stage_finetune(w, true);
        stage_sample(w);
        stage_eval(w);
        stage_sweep_stability(w);
        stage_check_locality(w);
        stage_grad_check(w);
    }

    // everything deterministic is compared; loss curves and manifests carry
    // wall-clock times and stay out
    std::vector<std::string> names = {artifact::corpus,       artifact::classifier,
                                      artifact::base_model,   artifact::edited_model,
                                      artifact::edits,        artifact::metrics_csv,
                                      artifact::stability_csv, artifact::locality_csv,
                                      artifact::gradcheck_csv};
    std::string a = ws.dir + "/repro_a", b = ws.dir + "/repro_b";
    for (const auto& e : fs::directory_iterator(a)) {
        std::string n = e.path().filename().string();
        if (n.rfind("adapter_", 0) == 0) names.push_back(n);
    }
    if (fs::exists(a + "/samples"))
        for (const auto& e : fs::directory_iterator(a + "/samples"))
            names.push_back("samples/" + e.path().filename().string());
    std::sort(names.begin(), names.end());

    ReproReport rep;
    rep.all_identical = true;
    for (const auto& n : names) {
        bool same = fs::exists(a + "/" + n) && fs::exists(b + "/" + n) &&
                    read_text(a + "/" + n) == read_text(b + "/" + n);
        rep.files.push_back({n, same});
        rep.all_identical = rep.all_identical && same;
    }

    json extra;
    extra["all_identical"] = rep.all_identical;
    extra["files"] = json::array();
    for (const auto& f : rep.files)
        extra["files"].push_back({{"name", f.name}, {"identical", f.identical}});
    write_text(ws.path("repro.json"), extra.dump(2) + "\n");
    write_manifest(ws, "repro-all", {}, {}, now_ms() - t0, extra);
    return rep;
}

}  // namespace trace
