// loraview command line: every stage of a view-transfer run, one subcommand
// each. Stages read and write the trial directory
//   <out>/<experiment_id>/seed-<s>-<background>/
// so they can be run one at a time or all together via `run`.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "loraview/experiments/experiments.hpp"

namespace fs = std::filesystem;
using namespace loraview;
using namespace loraview::experiments;

namespace {

struct Globals {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string background;
};

ExperimentManifest manifest_from(const Globals& g) {
    ExperimentManifest m = g.config.empty() ? ExperimentManifest{} : load_manifest(g.config);
    if (!g.out.empty()) m.output_dir = g.out;
    if (g.seed_set) m.seeds = {g.seed};
    if (!g.background.empty()) m.backgrounds = {g.background};
    return m;
}

TrialSetup trial_of(const ExperimentManifest& m) {
    if (m.seeds.empty()) throw ParameterError("manifest has no seeds");
    return resolve_trial(m, m.seeds.front(), scenegen::parse_background(m.backgrounds.at(0)));
}

fs::path trial_dir(const ExperimentManifest& m, const TrialSetup& t) {
    fs::path d = m.root() / t.id();
    fs::create_directories(d);
    return d;
}

template <class T>
T load_stage(const std::string& stage, const fs::path& path, T (*loader)(const fs::path&)) {
    return run_stage(stage, [&] {
        if (!fs::exists(path)) throw ContractError(path.string() + " not found; run the producing stage first");
        return loader(path);
    });
}

void print_progress(std::size_t it, double loss) {
    if (it % 1000 == 0) std::fprintf(stderr, "pretrain %6zu  loss %.5f\n", it, loss);
}

int cmd_generate(const ExperimentManifest& m) {
    const auto t = trial_of(m);
    const auto splits = run_stage("generate-data", [&] { return scenegen::make_splits(t.request); });
    const fs::path d = trial_dir(m, t) / "data";
    fs::create_directories(d);
    std::ofstream prompts(d / "prompts.txt");
    auto dump = [&](const scenegen::Dataset& ds, const std::string& name) {
        for (std::size_t i = 0; i < ds.items.size(); ++i) {
            const auto& it = ds.items[i];
            const std::string file = name + "-" + std::to_string(i);
            scenegen::write_pgm(d / (file + ".pgm"), it.scene.image);
            scenegen::write_pgm(d / (file + "-mask.pgm"), it.scene.mask);
            prompts << file << '\t' << it.scene.spec.view.name() << '\t' << scenegen::detokenize(it.prompt) << '\n';
        }
    };
    dump(splits.view_shot, "view");
    dump(splits.object_shots, "object");
    dump(splits.heldout, "heldout");
    prompts << "transfer\t" << t.request.target_view.name() << '\t' << scenegen::detokenize(splits.transfer_prompt) << '\n';
    std::printf("%s: view object %s, novel object %s, target view %s -> %s\n", t.id().c_str(),
                std::string(scenegen::to_string(t.request.view_object)).c_str(),
                std::string(scenegen::to_string(t.request.novel_object)).c_str(), t.request.target_view.name().c_str(),
                d.string().c_str());
    return 0;
}

int cmd_pretrain(const ExperimentManifest& m, bool force) {
    if (force && fs::exists(m.base_path())) fs::remove(m.base_path());
    ensure_base(m, print_progress);
    std::printf("base model: %s\n", m.base_path().string().c_str());
    return 0;
}

int cmd_train(const ExperimentManifest& m, bool view) {
    const auto base = ensure_base(m, print_progress);
    const auto t = trial_of(m);
    const auto splits = run_stage("generate-data", [&] { return scenegen::make_splits(t.request); });
    const fs::path d = trial_dir(m, t);
    if (view) stage_view(m, base, t, splits, d);
    else stage_object(m, base, t, splits, d);
    std::printf("%s\n", (d / (view ? "view.lvt" : "object.lvt")).string().c_str());
    return 0;
}

int cmd_merge(const ExperimentManifest& m, const std::string& mode, double w) {
    const auto t = trial_of(m);
    const fs::path d = trial_dir(m, t);
    const auto v = load_stage("merge", d / "view.lvt", lora::load_adapter);
    const auto o = load_stage("merge", d / "object.lvt", lora::load_adapter);
    if (run_stage("merge", [&] { return merge::parse_mode(mode); }) == merge::MergeMode::linear) {
        auto merged = run_stage("merge", [&] { return merge::merge_linear(v, o, w); });
        const fs::path p = d / (arm_name(w) + ".lvt");
        lora::save(merged, p);
        std::printf("%s\n", p.string().c_str());
        return 0;
    }
    const auto base = ensure_base(m, print_progress);
    const auto splits = scenegen::make_splits(t.request);
    auto gates = stage_merge(m, base, t, splits, v, o, d);
    std::printf("%s  final penalty %.6f\n", (d / "gates.lvt").string().c_str(), merge::cosine_penalty(gates));
    return 0;
}

/// Weights of one arm, from the artifacts in the trial directory.
denoiser::ModelWeights arm_weights(const ExperimentManifest& m, const denoiser::ModelWeights& base, const fs::path& d,
                                   const std::string& arm, double w) {
    if (arm == "base") return base;
    if (arm == "view" || arm == "object")
        return merge::compose_for_inference(base, load_stage("sample", d / (arm + ".lvt"), lora::load_adapter));
    const auto v = load_stage("sample", d / "view.lvt", lora::load_adapter);
    const auto o = load_stage("sample", d / "object.lvt", lora::load_adapter);
    if (arm == "linear") return merge::compose_for_inference(base, merge::merge_linear(v, o, w));
    if (arm == "gated")
        return merge::compose_for_inference(base, v, o, load_stage("sample", d / "gates.lvt", merge::load_gates));
    (void)m;
    throw ParameterError("unknown arm '" + arm + "' (base, view, object, linear, gated)");
}

int cmd_sample(const ExperimentManifest& m, const std::string& arm, double w, const std::string& prompt_text,
               std::size_t n) {
    const auto base = ensure_base(m, print_progress);
    const auto t = trial_of(m);
    const fs::path d = trial_dir(m, t);
    const auto splits = scenegen::make_splits(t.request);
    const auto weights = arm_weights(m, base, d, arm, w);
    const auto prompt = prompt_text.empty() ? splits.transfer_prompt
                                            : run_stage("sample", [&] { return scenegen::parse_prompt(prompt_text); });
    fs::create_directories(d / "samples");
    const std::string tag = arm == "linear" ? arm_name(w) : arm;
    for (std::size_t k = 0; k < n; ++k) {
        Matrix img = run_stage("sample", [&] {
            return denoiser::sample_ddim(weights, nullptr, prompt, t.seeds.sample + k, {m.sample_steps, true});
        });
        const fs::path p = d / "samples" / (tag + "-" + std::to_string(k) + ".pgm");
        scenegen::write_pgm(p, img);
        std::printf("%s\n", p.string().c_str());
    }
    return 0;
}

/// Scores every arm whose artifacts exist and writes evaluate.csv.
int cmd_evaluate(const ExperimentManifest& m) {
    const auto base = ensure_base(m, print_progress);
    const auto t = trial_of(m);
    const fs::path d = trial_dir(m, t);
    const auto splits = scenegen::make_splits(t.request);
    const auto& gt = splits.heldout.items.front().scene;
    const auto& vs = splits.view_shot.items.front().scene;
    std::vector<std::pair<std::string, denoiser::ModelWeights>> arms;
    const bool have_pair = fs::exists(d / "view.lvt") && fs::exists(d / "object.lvt");
    if (have_pair && fs::exists(d / "gates.lvt")) arms.emplace_back("gated", arm_weights(m, base, d, "gated", 0));
    if (have_pair)
        for (double w : {m.linear_w, m.leak_w}) arms.emplace_back(arm_name(w), arm_weights(m, base, d, "linear", w));
    if (fs::exists(d / "object.lvt")) arms.emplace_back("object-only", arm_weights(m, base, d, "object", 0));
    arms.emplace_back("base", base);

    std::ofstream out(d / "evaluate.csv");
    out << "trial-id,object,view,mode,psnr,ssim,masked_psnr,masked_ssim\n" << std::setprecision(9);
    std::printf("%-12s %8s %8s %8s %8s  %s\n", "mode", "psnr", "ssim", "m-psnr", "m-ssim", "m-ssim(view obj)");
    for (const auto& [name, weights] : arms) {
        auto s = run_stage("evaluate", [&] {
            return score_arm(name, weights, splits.transfer_prompt, gt, vs, m.n_samples, m.sample_steps, t.seeds.sample);
        });
        out << t.id() << ',' << scenegen::to_string(t.request.novel_object) << ',' << t.request.target_view.name()
            << ',' << name << ',' << s.vs_novel.psnr << ',' << s.vs_novel.ssim << ',' << s.vs_novel.masked_psnr << ','
            << s.vs_novel.masked_ssim << '\n';
        std::printf("%-12s %8.3f %8.4f %8.3f %8.4f  %.4f\n", name.c_str(), s.vs_novel.psnr, s.vs_novel.ssim,
                    s.vs_novel.masked_psnr, s.vs_novel.masked_ssim, s.masked_ssim_vs_view_object);
    }
    std::printf("%s\n", (d / "evaluate.csv").string().c_str());
    return 0;
}

int cmd_run(const ExperimentManifest& m) {
    const auto base = ensure_base(m, print_progress);
    auto rep = run_pipeline(m, base);
    for (const auto& r : rep.trials) {
        std::printf("%s", r.setup.id().c_str());
        for (const auto& a : r.arms) std::printf("  %s %.4f", a.arm.c_str(), a.vs_novel.masked_ssim);
        std::printf("\n");
    }
    std::printf("%s\n", (m.root() / "pipeline.csv").string().c_str());
    return 0;
}

int cmd_ablate(const ExperimentManifest& m, const std::string& which, const std::vector<std::string>& bgs) {
    const auto base = ensure_base(m, print_progress);
    if (which == "linear") {
        for (const auto& r : ablate_linear_weights(m, base))
            std::printf("seed %llu  w %.1f  vs-view-object %.4f  vs-novel %.4f\n", (unsigned long long)r.seed, r.w,
                        r.masked_ssim_vs_view_object, r.masked_ssim_vs_novel);
    } else if (which == "multiview") {
        auto rep = ablate_multiview(m, base);
        for (const auto& r : rep.rows)
            std::printf("seed %llu  views %zu  consistency %.4f\n", (unsigned long long)r.seed, r.views, r.consistency);
        std::printf("single view >= multi view: %s\n", rep.single_view_at_least_multi ? "yes" : "no");
    } else if (which == "background") {
        auto rep = ablate_background(m, base, bgs);
        for (const auto& r : rep.rows)
            std::printf("%-15s seed %llu  view recon %.4f  gated transfer %.4f\n", r.background.c_str(),
                        (unsigned long long)r.seed, r.view_reconstruction, r.gated_transfer);
        std::printf("table-edge >= plain: %s\n", rep.anchored_at_least_plain ? "yes" : "no");
    } else {
        throw ParameterError("unknown ablation '" + which + "'");
    }
    return 0;
}

int cmd_alignment(const ExperimentManifest& m, std::size_t trials) {
    const auto t = trial_of(m);
    const fs::path d = trial_dir(m, t);
    const auto v = load_stage("diagnose-alignment", d / "view.lvt", lora::load_adapter);
    const auto o = load_stage("diagnose-alignment", d / "object.lvt", lora::load_adapter);
    auto rep = run_stage("diagnose-alignment", [&] { return lora::alignment(v, o, trials); });
    for (const auto& l : rep.layers)
        std::printf("%-16s mean |cos| %.4f  max %.4f  (%zu columns)\n", l.key.c_str(), l.mean_abs_cos, l.max_abs_cos,
                    l.columns);
    std::printf("overall %.4f   random mean %.4f  p95 %.4f  (%zu draws)\n", rep.mean_abs_cos, rep.random_mean_abs_cos,
                rep.random_p95, rep.random_trials);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"loraview: view and object adapters for a toy diffusion model, merged with gated columns"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "experiment manifest (JSON)")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", g.seed, "trial seed (overrides the manifest's seed list)");
    app.add_option("--out", g.out, "output directory (overrides the manifest)");
    app.add_option("--background", g.background, "background of the trial");

    auto* gen = app.add_subcommand("generate-data", "render the trial's view scene, object shots and ground truth");
    bool force = false;
    auto* pre = app.add_subcommand("pretrain", "pretrain the base denoiser (skipped when the checkpoint exists)");
    pre->add_flag("--force", force, "retrain even if the checkpoint exists");
    auto* tv = app.add_subcommand("train-view", "train the view adapter on the single view scene");
    auto* to = app.add_subcommand("train-object", "train the object adapter on the object shots");
    std::string mode = "gated";
    double w = 0.5;
    auto* mg = app.add_subcommand("merge", "merge the two adapters");
    mg->add_option("--mode", mode, "gated or linear")->check(CLI::IsMember({"gated", "linear"}));
    mg->add_option("--w", w, "linear merge weight on the view adapter")->check(CLI::Range(0.0, 1.0));
    std::string arm = "gated", prompt;
    std::size_t n = 4;
    auto* sp = app.add_subcommand("sample", "DDIM samples of one arm");
    sp->add_option("--arm", arm, "base, view, object, linear or gated");
    sp->add_option("--w", w, "weight for --arm linear")->check(CLI::Range(0.0, 1.0));
    sp->add_option("--prompt", prompt, "prompt text (default: the transfer prompt)");
    sp->add_option("-n", n, "number of samples")->check(CLI::PositiveNumber);
    auto* ev = app.add_subcommand("evaluate", "score every available arm against the held-out ground truth");
    auto* run = app.add_subcommand("run", "all stages for every seed and background of the manifest");
    std::string which;
    std::vector<std::string> bgs = {"plain", "table-edge"};
    auto* ab = app.add_subcommand("ablate", "ablation studies");
    ab->add_option("study", which, "linear, multiview or background")
        ->required()
        ->check(CLI::IsMember({"linear", "multiview", "background"}));
    ab->add_option("--backgrounds", bgs, "backgrounds compared by the background study");
    std::size_t trials = 200;
    auto* al = app.add_subcommand("diagnose-alignment", "column alignment of the trial's view and object adapters");
    al->add_option("--trials", trials, "Gaussian baseline draws");

    CLI11_PARSE(app, argc, argv);
    g.seed_set = seed_opt->count() > 0;

    try {
        const ExperimentManifest m = manifest_from(g);
        if (gen->parsed()) return cmd_generate(m);
        if (pre->parsed()) return cmd_pretrain(m, force);
        if (tv->parsed()) return cmd_train(m, true);
        if (to->parsed()) return cmd_train(m, false);
        if (mg->parsed()) return cmd_merge(m, mode, w);
        if (sp->parsed()) return cmd_sample(m, arm, w, prompt, n);
        if (ev->parsed()) return cmd_evaluate(m);
        if (run->parsed()) return cmd_run(m);
        if (ab->parsed()) return cmd_ablate(m, which, bgs);
        if (al->parsed()) return cmd_alignment(m, trials);
    } catch (const StageError& e) {
        std::fprintf(stderr, "error [%s] %s\n", e.stage().c_str(), e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
