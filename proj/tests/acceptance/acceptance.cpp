// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oracles/oracles.hpp"
#include "pte/adapter/thought_encoding.hpp"
#include "pte/cache/kv_cache.hpp"
#include "pte/cli/checkpoint.hpp"
#include "pte/cli/commands.hpp"
#include "pte/grpo/grpo.hpp"
#include "pte/metrics/metrics.hpp"
#include "test_support.hpp"

namespace pte {
namespace {

namespace fs = std::filesystem;
using testing::random_bank;
using testing::random_model;
using testing::tiny_config;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

fs::path workdir() {
    const fs::path d = fs::temp_directory_path() / "pte_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
    std::vector<int> t(n);
    for (int& x : t) x = static_cast<int>(rng() % vocab);
    return t;
}

// ---------------------------------------------------------------------------

Outcome full_window_equivalence() {
    double worst = 0.0;
    for (std::uint64_t draw = 0; draw < 50; ++draw) {
        const ModelConfig cfg;
        const ModelParams p = random_model(cfg, 1000 + draw, 0.3);
        const AdapterBank bank = random_bank(PteConfig{}, cfg, 2000 + draw, 0.3);
        const BoundModel m = BoundModel::bind(p);
        const BoundAdapterBank b = BoundAdapterBank::bind(bank);
        Rng rng(draw);
        const std::vector<int> prompt = random_tokens(6, cfg.vocab_size, rng);
        SamplingConfig s;
        s.max_new_tokens = 16;
        s.window = prompt.size() + s.max_new_tokens;
        s.terminator = -1;
        s.seed = draw;
        const Trajectory tr = rollout(m, &b, prompt, s);

        std::vector<int> all = prompt;
        all.insert(all.end(), tr.generated.begin(), tr.generated.end());
        const Matrix ref = oracle::full_matrix_forward(all, p);

        // Per-step logits under the windowed policy, adapter session attached.
        ad::NoGradGuard no_grad;
        KVCache cache(cfg.n_layers, cfg.d_model, s.window, s.eviction_ratio);
        PteSession session(b, m);
        Matrix logits = prefill(prompt, cache, m, nullptr);
        std::vector<double> row(logits.row(logits.rows() - 1).begin(), logits.row(logits.rows() - 1).end());
        for (std::size_t t = 0; t < tr.generated.size(); ++t) {
            if (cache.saturated()) return {false, fmt("draw %llu evicted inside a full-length window", draw)};
            const std::size_t pos = prompt.size() - 1 + t;
            const auto ref_lp = log_softmax_row(std::vector<double>(ref.row(pos).begin(), ref.row(pos).end()));
            for (std::size_t v = 0; v < row.size(); ++v) worst = std::max(worst, std::abs(row[v] - ref(pos, v)));
            worst = std::max(worst, std::abs(tr.logprobs[t] - ref_lp[static_cast<std::size_t>(tr.generated[t])]));
            if (t + 1 == tr.generated.size()) break;
            const Matrix next = decode_step(tr.generated[t], TokenRole::thinking, cache, m, session.overlay());
            row.assign(next.row(0).begin(), next.row(0).end());
        }
        if (!tr.evictions.empty()) return {false, "full-length window recorded an eviction"};
    }
    return {worst <= 1e-12, fmt("max |logit - full-cache logit| = %.3e over 50 draws (tol 1e-12)", worst)};
}

// ---------------------------------------------------------------------------

Outcome cache_bounds() {
    Rng rng(7);
    std::size_t max_over = 0, violations = 0, evictions = 0;
    for (int schedule = 0; schedule < 1000; ++schedule) {
        const std::size_t window = 2 + rng() % 40;
        const double ratio = std::max(0.01, uniform01(rng));
        const std::size_t questions = 1 + rng() % (window - 1);
        KVCache cache(2, 1, window, ratio);
        auto push = [&](TokenRole role) {
            const double id = static_cast<double>(cache.appended());
            std::vector<ad::Var> k{ad::Var(Matrix(1, 1, id)), ad::Var(Matrix(1, 1, id))};
            std::vector<ad::Var> v = k;
            const std::vector<TokenRole> roles{role};
            cache.append(k, v, roles);
        };
        for (std::size_t i = 0; i < questions; ++i) push(TokenRole::question);
        const std::size_t steps = 1 + rng() % (4 * window);
        for (std::size_t t = 0; t < steps; ++t) {
            if (cache.saturated()) {
                cache.evict();
                ++evictions;
            }
            push(TokenRole::thinking);
            max_over = std::max(max_over, cache.size() > window ? cache.size() - window : 0);
            std::size_t q = 0;
            for (std::size_t i = 0; i < cache.size(); ++i) {
                if (cache.roles()[i] == TokenRole::question) {
                    // Question entries keep their original slots 0..questions-1.
                    if (cache.positions()[i] != q || cache.keys(0).value()(i, 0) != static_cast<double>(q)) ++violations;
                    ++q;
                }
            }
            if (q != questions) ++violations;
        }
    }
    const bool pass = max_over == 0 && violations == 0 && evictions > 0;
    return {pass, fmt("1000 schedules, %zu evictions: max overshoot %zu, question-token violations %zu", evictions,
                      max_over, violations)};
}

// ---------------------------------------------------------------------------

Outcome gradient_gate() {
    RunConfig c;
    c.model.n_layers = 1;
    const GradcheckReport r = run_gradcheck(c);
    double worst = 0.0;
    std::string groups;
    for (const auto& g : r.groups) {
        worst = std::max(worst, g.worst_relative_error);
        groups += (groups.empty() ? "" : ",") + g.name;
    }
    const bool complete = groups == "h_g,Wa_Q,Wa_K,Wa_V,A,B";
    return {r.passed && complete && worst < 1e-4 && r.eviction_events >= 1,
            fmt("1 layer, %zu parameters, %zu eviction events, groups {%s}, worst rel err %.3e (tol 1e-4)",
                r.trainable_parameters, r.eviction_events, groups.c_str(), worst)};
}

// ---------------------------------------------------------------------------

Outcome context_state_algebra() {
    Rng rng(11);
    double worst = 0.0;
    std::size_t empty_segments = 0;
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t d = 2 + rng() % 7, g = 1 + rng() % 4, dc = 1 + rng() % 4;
        const std::size_t m = inst % 10 == 0 ? 0 : 1 + rng() % 6;
        const AdapterParams a{random_normal(d, dc, 1.0, rng), random_normal(d, dc, 1.0, rng),
                              random_normal(d, dc, 1.0, rng), random_normal(d, g, 1.0, rng),
                              random_normal(dc, d, 1.0, rng)};
        const AdapterVars vars{ad::Var(a.proj_q), ad::Var(a.proj_k), ad::Var(a.proj_v), ad::Var(a.a), ad::Var(a.b)};
        const Matrix qg = random_normal(g, d, 1.0, rng), kg = random_normal(g, d, 1.0, rng),
                     vg = random_normal(g, d, 1.0, rng);
        const Matrix ke = random_normal(m, d, 1.0, rng), ve = random_normal(m, d, 1.0, rng);
        auto track = [&worst](const Matrix& ref, const Matrix& got) {
            worst = std::max(worst, oracle::compare(ref, got, 1e-12).max_abs_error);
        };

        const ad::Var s0 = init_context_state(vars, {ad::Var(qg), ad::Var(kg), ad::Var(vg)});
        track(oracle::triple_product(qg, a.proj_q, kg, a.proj_k, vg, a.proj_v), s0.value());

        const ad::Var seg = encode_evicted(vars, ke, ve, ad::Var(qg));
        const Matrix seg_ref = m == 0 ? Matrix(g, dc) : oracle::triple_product(qg, a.proj_q, ke, a.proj_k, ve, a.proj_v);
        track(seg_ref, seg.value());
        if (m == 0) {
            ++empty_segments;
            track(Matrix(g, dc), seg.value());
        }

        const std::size_t k = rng() % 5;
        const ad::Var rms = accumulate(s0, seg, NormalizeMode::row_rms, k);
        track(oracle::row_rms(s0.value() + seg_ref), rms.value());
        const ad::Var mean = accumulate(s0, seg, NormalizeMode::segment_mean, k);
        track(oracle::running_mean(s0.value(), seg_ref, k), mean.value());

        track(oracle::low_rank_delta(a.a, rms.value(), a.b), delta_weights(vars, rms).value());
    }
    return {worst <= 1e-12 && empty_segments > 0,
            fmt("100 instances (%zu with m = 0): max abs error %.3e (tol 1e-12)", empty_segments, worst)};
}

// ---------------------------------------------------------------------------

Outcome reward_normalization() {
    constexpr double eps = 1e-8;
    Rng rng(5);
    double worst_mean = 0.0, worst_std[2] = {0.0, 0.0}, min_var[2] = {INFINITY, INFINITY};
    std::size_t groups = 0, constant_nonzero = 0;
    while (groups < 1000) {
        const std::size_t n = 2 + rng() % 15;
        std::vector<double> s(n);
        // Binary verifier scores for most groups, continuous scores for the rest.
        const int kind = rng() % 4 != 0 ? 0 : 1;
        for (double& x : s) x = kind == 0 ? static_cast<double>(rng() % 2) : uniform01(rng);
        const double mu = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(n);
        double var = 0.0;
        for (double x : s) var += (x - mu) * (x - mu);
        var /= static_cast<double>(n);
        if (!(var > 10 * eps)) continue;
        ++groups;
        const auto r = normalize_rewards(s, eps);
        const double rm = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(n);
        double rv = 0.0;
        for (double x : r) rv += (x - rm) * (x - rm);
        worst_mean = std::max(worst_mean, std::abs(rm));
        worst_std[kind] = std::max(worst_std[kind], std::abs(std::sqrt(rv / static_cast<double>(n)) - 1.0));
        min_var[kind] = std::min(min_var[kind], var);
    }
    for (int i = 0; i < 100; ++i) {
        const std::vector<double> s(2 + i % 15, uniform01(rng));
        for (double x : normalize_rewards(s, eps)) constant_nonzero += x != 0.0;
    }
    // With eps inside the square root, std(r) = sqrt(var / (var + eps)), so
    // |std - 1| <= 1e-6 needs var >= ~eps / 2e-6.
    const double worst = std::max(worst_std[0], worst_std[1]);
    return {worst_mean <= 1e-12 && worst <= 1e-6 && constant_nonzero == 0,
            fmt("1000 groups: max |mean r| %.3e (tol 1e-12); max |std r - 1| %.3e (tol 1e-6): binary groups %.3e "
                "(min var %.3g), continuous groups %.3e (min var %.3g); all-equal groups: %zu non-zero rewards",
                worst_mean, worst, worst_std[0], min_var[0], worst_std[1], min_var[1], constant_nonzero)};
}

// ---------------------------------------------------------------------------

Outcome distributional_fidelity() {
    const ModelConfig cfg = tiny_config(2, 4, 2);
    const ModelParams p = random_model(cfg, 61, 0.8);
    const AdapterBank bank = random_bank(PteConfig{}, cfg, 62, 0.8);
    const BoundModel m = BoundModel::bind(p);
    const BoundAdapterBank b = BoundAdapterBank::bind(bank);
    const std::vector<int> prompt{0, 1};
    SamplingConfig s;
    s.window = 3;
    s.eviction_ratio = 0.34;
    s.max_new_tokens = 3;
    s.terminator = 1;  // sequences that stop early never evict

    const auto exact = oracle::enumerate_trajectory_distribution(p, &bank, prompt, s);
    constexpr std::size_t kRollouts = 100000;
    std::map<std::vector<int>, std::size_t> counts;
    std::size_t with_eviction = 0;
    for (std::size_t i = 0; i < kRollouts; ++i) {
        s.seed = derive_seed(6, "fidelity", i);
        const Trajectory t = rollout(m, &b, prompt, s);
        ++counts[t.generated];
        with_eviction += !t.evictions.empty();
    }
    double worst_z = 0.0;
    std::size_t unknown = 0;
    for (const auto& [seq, c] : counts) unknown += exact.count(seq) == 0;
    for (const auto& [seq, prob] : exact) {
        const double n = static_cast<double>(kRollouts);
        const double sigma = std::sqrt(n * prob * (1 - prob));
        const double dev = std::abs(static_cast<double>(counts[seq]) - n * prob);
        worst_z = std::max(worst_z, sigma > 0 ? dev / sigma : (dev > 0 ? INFINITY : 0.0));
    }
    const bool pass = worst_z <= 3.0 && unknown == 0 && with_eviction > 0 && with_eviction < kRollouts;
    return {pass, fmt("%zu sequences, 1e5 rollouts (%zu with evictions): worst deviation %.2f sigma (bound 3)",
                      exact.size(), with_eviction, worst_z)};
}

// ---------------------------------------------------------------------------

Outcome constant_footprint() {
    const ModelConfig cfg;
    const BoundModel m = BoundModel::bind(random_model(cfg, 71, 0.2));
    const std::vector<int> prompt{19, 3, 16, 4, 22};
    const std::size_t W = 16, P = prompt.size(), T = 10 * W;
    std::string detail;
    bool pass = true;
    for (double ratio : {1.0 / 16.0, 0.25}) {
        SamplingConfig s;
        s.window = W;
        s.eviction_ratio = ratio;
        // T generated tokens pass through the cache; the one sampled after
        // them is the last output and is never fed back.
        s.max_new_tokens = T + 1;
        s.terminator = -1;
        s.seed = 3;
        const Trajectory tr = rollout(m, nullptr, prompt, s);
        const DecodeSchedule win = DecodeSchedule::windowed(tr), full = DecodeSchedule::full(tr);
        const std::size_t sat = W - P;  // first step whose cache is full
        const std::size_t ne = eviction_count(W, ratio);

        bool constant = true;
        std::uint64_t running_flops = 0, running_cache = 0;
        for (std::size_t t = 0; t < win.lengths.size(); ++t) {
            const auto f = attention_flops_step(win.lengths[t], cfg);
            const auto c = cache_elements(win.lengths[t], cfg);
            running_flops = std::max(running_flops, f);
            running_cache = std::max(running_cache, c);
            if (t < sat) continue;
            // Peak footprint is pinned at W; with one-entry evictions every step attends exactly W.
            constant &= running_flops == attention_flops_step(W, cfg) && running_cache == cache_elements(W, cfg);
            if (ne == 1) constant &= win.lengths[t] == W;
            if (t >= sat + ne) constant &= win.lengths[t] == win.lengths[t - ne];
        }
        bool linear = true;
        for (std::size_t t = 1; t < full.lengths.size(); ++t) {
            linear &= attention_flops_step(full.lengths[t], cfg) - attention_flops_step(full.lengths[t - 1], cfg) ==
                      attention_flops_step(1, cfg);
            linear &= cache_elements(full.lengths[t], cfg) - cache_elements(full.lengths[t - 1], cfg) ==
                      cache_elements(1, cfg);
        }
        const EfficiencyReport rw = EfficiencyReport::aggregate(std::vector<DecodeSchedule>{win}, cfg);
        const EfficiencyReport rf = EfficiencyReport::aggregate(std::vector<DecodeSchedule>{full}, cfg);
        // max_w / max_f == W / (P + T), compared as integers.
        const bool ratio_exact = rw.max_flops * (P + T) == rf.max_flops * W;
        pass &= constant && linear && ratio_exact && !tr.evictions.empty();
        detail += fmt("%sratio %.4g: constant %s, linear %s, peak FLOPs %llu/%llu = %zu/%zu %s", detail.empty() ? "" : "; ",
                      ratio, constant ? "yes" : "no", linear ? "yes" : "no",
                      static_cast<unsigned long long>(rw.max_flops), static_cast<unsigned long long>(rf.max_flops), W,
                      P + T, ratio_exact ? "exactly" : "MISMATCH");
    }
    return {pass, fmt("W=16, P=5, T=160: %s", detail.c_str())};
}

// ---------------------------------------------------------------------------

// Depth-4 tasks; minimal response 23 tokens, prompt 11, W = ceil(0.6 * 34) = 21.
RunConfig training_claim_config(std::uint64_t seed) {
    RunConfig c;
    c.seed = seed;
    c.task.depth = 4;
    c.task.eval_size = 200;
    c.pretrain.iterations = 3000;
    c.sampling.window = 21;
    c.sampling.max_new_tokens = 40;
    c.train.iterations = 300;
    c.train.batch_size = 4;
    c.train.group_size = 8;
    c.train.learning_rate = 1e-2;
    c.train.kl_weight = 0.1;
    c.validate();
    return c;
}

Outcome directional_training_claim() {
    double pte_sum = 0.0, ablated_sum = 0.0;
    std::string per_seed;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        RunConfig c = training_claim_config(seed);
        const Checkpoint base = run_pretraining(c, "", nullptr);
        const auto tasks = eval_tasks(c);
        double rate[2];
        for (int arm = 0; arm < 2; ++arm) {
            RunConfig a = c;
            a.train.freeze_a = arm == 1;
            const Checkpoint trained = run_training(a, base, "", "", nullptr).final;
            rate[arm] = evaluate_checkpoint(trained, a, tasks, a.sampling.window, a.sampling.eviction_ratio).success_rate;
        }
        pte_sum += rate[0];
        ablated_sum += rate[1];
        per_seed += fmt("%s%.3f/%.3f", per_seed.empty() ? "" : " ", rate[0], rate[1]);
    }
    const double pte = pte_sum / 5, ablated = ablated_sum / 5;
    const bool pass = pte >= 1.10 * ablated && pte > 0.0;
    return {pass, fmt("W=21, 300 iterations, 5 seeds: PTE %.3f vs A frozen %.3f (ratio %s, need >= 1.10); per seed %s",
                      pte, ablated, ablated > 0 ? fmt("%.2f", pte / ablated).c_str() : "inf", per_seed.c_str())};
}

// ---------------------------------------------------------------------------

std::vector<std::string> csv_rows(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> rows;
    for (std::string l; std::getline(in, l);) rows.push_back(l);
    return rows;
}

Outcome ablation_harness(const fs::path& dir) {
    RunConfig c;
    c.seed = 9;
    c.task.depth = 2;
    c.task.eval_size = 16;
    c.sampling.window = 12;
    c.sampling.max_new_tokens = 20;
    c.train.iterations = 2;
    c.train.batch_size = 2;
    c.train.group_size = 4;
    save_checkpoint(initial_checkpoint(c), dir / "fixed.ckpt");

    std::ostringstream out, err;
    CommandOptions o;
    o.checkpoint = (dir / "fixed.ckpt").string();
    RunConfig ratio = c;
    ratio.out = (dir / "ratio").string();
    ratio.sweep = {"eviction_ratio", {0.25, 0.20, 0.15, 0.10, 0.05}};
    const int rc1 = cmd_sweep(ratio, o, out, err);
    const auto r1 = csv_rows(dir / "ratio" / "reports" / "sweep_eviction_ratio.csv");

    const double g = static_cast<double>(c.pte.global_tokens);
    RunConfig global = c;
    global.out = (dir / "global").string();
    global.sweep = {"global_tokens", {0.0, g / 2, g, 2 * g}};
    const int rc2 = cmd_sweep(global, {}, out, err);
    const auto r2 = csv_rows(dir / "global" / "reports" / "sweep_global_tokens.csv");

    bool windows_fixed = r1.size() == 6;
    for (std::size_t i = 1; i < r1.size(); ++i) windows_fixed &= r1[i].find(",12,") != std::string::npos;
    const bool pass = rc1 == 0 && rc2 == 0 && windows_fixed && r2.size() == 5 &&
                      r2[1].rfind("global_tokens=0 (zero-initialized state)", 0) == 0;
    return {pass, fmt("ratio sweep {0.25,0.2,0.15,0.1,0.05} at W=12: %zu rows; global-token sweep {0,%g,%g,%g}: %zu rows%s",
                      r1.empty() ? 0 : r1.size() - 1, g / 2, g, 2 * g, r2.empty() ? 0 : r2.size() - 1,
                      err.str().empty() ? "" : (" [" + err.str() + "]").c_str())};
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome persistence(const fs::path& dir) {
    RunConfig c;
    c.seed = 13;
    c.task.depth = 2;
    c.sampling.window = 12;
    c.sampling.max_new_tokens = 20;
    c.train.batch_size = 2;
    c.train.group_size = 4;
    c.train.iterations = 12;

    const TrainOutcome whole = run_training(c, initial_checkpoint(c), "", "", nullptr);

    RunConfig first = c;
    first.train.iterations = 2;
    const TrainOutcome head = run_training(first, initial_checkpoint(first), "", "", nullptr);
    save_checkpoint(head.final, dir / "a.ckpt");
    const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
    save_checkpoint(loaded, dir / "b.ckpt");
    const bool bytes = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt") && loaded == head.final;
    const TrainOutcome tail = run_training(c, loaded, "", "", nullptr);

    std::size_t matching = 0;
    bool all_match = tail.metrics.size() == 10;
    for (std::size_t i = 0; i < tail.metrics.size(); ++i) {
        const bool same = to_json(tail.metrics[i]).dump() == to_json(whole.metrics[i + 2]).dump();
        matching += same;
        all_match &= same;
    }
    const bool final_state = tail.final.model == whole.final.model && tail.final.bank == whole.final.bank &&
                             tail.final.adam == whole.final.adam;
    return {bytes && all_match && final_state,
            fmt("save-load-save byte-identical: %s; resumed iterations matching: %zu/10; final state equal: %s",
                bytes ? "yes" : "no", matching, final_state ? "yes" : "no")};
}

}  // namespace
}  // namespace pte

// With arguments, runs only the listed criterion numbers.
int main(int argc, char** argv) {
    using namespace pte;
    const fs::path dir = workdir();
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"full-window equivalence", full_window_equivalence},
        {"cache bounds", cache_bounds},
        {"gradient gate", gradient_gate},
        {"context-state oracle equivalence", context_state_algebra},
        {"group reward normalization", reward_normalization},
        {"distributional fidelity", distributional_fidelity},
        {"constant-footprint accounting", constant_footprint},
        {"directional training claim", directional_training_claim},
        {"ablation harness", [&] { return ablation_harness(dir); }},
        {"persistence", [&] { return persistence(dir); }},
    };
    int failed = 0;
    std::vector<bool> selected(criteria.size(), argc == 1);
    for (int a = 1; a < argc; ++a) {
        const std::size_t n = std::strtoul(argv[a], nullptr, 10);
        if (n >= 1 && n <= criteria.size()) selected[n - 1] = true;
    }
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected[i]) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("%s criterion %zu (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                    o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
