#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "expost/data.hpp"
#include "expost/engine.hpp"
#include "expost/masking.hpp"
#include "expost/metrics.hpp"
#include "expost/trainer.hpp"

namespace expost {

struct PropertyResult {
    int id = 0;
    std::string name;
    bool passed = false;
    double worst = 0;     // headline metric, meaning depends on the property
    std::string detail;
    double seconds = 0;
};

struct SuiteOptions {
    bool quick = false;
    /// "naive-reuse": run the equivalence checks on the stale-reuse strategy.
    /// "mask-bit": open one illegal bit in the gradient-visibility masks.
    std::string fault;
    std::uint64_t seed = 0;
};

namespace verify_detail {

inline ModelConfig small_model(PosScheme scheme, std::uint64_t seed, int layers = 2) {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = layers;
    c.d_ff = 32;
    c.vocab_size = 64;
    c.pos_scheme = scheme;
    c.max_position = 4096;
    c.seed = seed;
    return c;
}

inline std::vector<TokenId> random_tokens(CounterRng& rng, int n, int vocab = 64) {
    std::vector<TokenId> out;
    for (int i = 0; i < n; ++i) out.push_back(static_cast<TokenId>(rng.uniform_int(kFirstContentToken, vocab - 1)));
    return out;
}

inline PolicySpec random_policy(CounterRng& rng) {
    if (rng.bernoulli(0.5)) return PolicySpec::wait_k(static_cast<int>(rng.uniform_int(1, 9)));
    return PolicySpec::read_n(static_cast<int>(rng.uniform_int(1, 13)), static_cast<int>(rng.uniform_int(2, 16)));
}

template <typename F>
PropertyResult timed(int id, std::string name, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    PropertyResult r = body();
    r.id = id;
    r.name = std::move(name);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

/// Every target keeps the position it was given when emitted, in every later
/// cache snapshot; the first target position of each segment obeys the slot rule.
inline std::string target_position_violation(const StreamTrace& t, int slot_len) {
    std::vector<PositionId> assigned;
    std::vector<PositionId> prev_ctx_targets;
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const auto& s = t.steps[i];
        for (std::size_t e = 0; e < s.tags.size(); ++e) {
            if (s.tags[e] == Tag::AssistantRole && (e == 0 || s.tags[e - 1] != Tag::AssistantRole) && slot_len > 0) {
                if (s.positions[e] - s.slot_start != slot_len)
                    return "step " + std::to_string(i) + ": segment starts " + std::to_string(s.positions[e] - s.slot_start) +
                           " after its slot";
            }
        }
        if (s.action.kind != Action::Kind::Write) continue;
        std::vector<PositionId> ctx_targets;
        for (const auto& x : s.context.entries)
            if (x.tag == Tag::Target) ctx_targets.push_back(x.position);
        if (ctx_targets.size() < prev_ctx_targets.size() ||
            !std::equal(prev_ctx_targets.begin(), prev_ctx_targets.end(), ctx_targets.begin()))
            return "step " + std::to_string(i) + ": an earlier target changed position";
        for (std::size_t j = 0; j < ctx_targets.size(); ++j)
            if (j >= assigned.size() || ctx_targets[j] != assigned[j])
                return "step " + std::to_string(i) + ": target " + std::to_string(j + 1) + " encoded away from its assigned position";
        prev_ctx_targets = ctx_targets;
        assigned.push_back(s.emitted_position);
    }
    return {};
}

} // namespace verify_detail

/// Cached streaming logits equal a fresh uncached forward at every WRITE.
inline PropertyResult check_zero_recompute(const SuiteOptions& opt) {
    return verify_detail::timed(1, "zero-recomputation cache reuse", [&] {
        using namespace verify_detail;
        PropertyResult r;
        const int trials = opt.quick ? 24 : 100;
        CounterRng rng(opt.seed, "zero-recompute");
        double worst_f = 0, worst_d = 0;
        int recomputed = 0, oracle_mismatch = 0;
        for (int t = 0; t < trials; ++t) {
            const PosScheme scheme = t % 2 == 0 ? PosScheme::Rotary : PosScheme::Alibi;
            const Transformer<double> md(small_model(scheme, opt.seed * 1000 + static_cast<std::uint64_t>(t)));
            const Transformer<float> mf = md.cast<float>();
            const int len = static_cast<int>(rng.uniform_int(1, 64));
            const auto src = random_tokens(rng, len);
            const auto policy = random_policy(rng);
            const int L = static_cast<int>(rng.uniform_int(1, 32));
            const Strategy strat = opt.fault == "naive-reuse" ? Strategy::naive_reuse() : Strategy::expost(L);
            EngineOptions eo;
            eo.write_cap = len + 4;
            const auto td = run_stream(md, src, policy, strat, eo);
            const auto tf = run_stream(mf, src, policy, strat, eo);
            worst_d = std::max(worst_d, compare_traces(td, uncached_replay(td, md), 0).max_logit_diff);
            worst_f = std::max(worst_f, compare_traces(tf, uncached_replay(tf, mf), 0).max_logit_diff);
            for (const auto& s : td.steps) recomputed += s.recomputed_tokens;
            if (strat.kind == StrategyKind::Expost) {
                EngineOptions oo = eo;
                oo.recompute_oracle = true;
                const auto to = run_stream(md, src, policy, strat, oo);
                const auto c = compare_traces(td, to, 1e-10);
                if (!c.token_match || !c.structural_match || c.max_logit_diff > 1e-10) ++oracle_mismatch;
            }
        }
        r.passed = worst_f <= 1e-5 && worst_d <= 1e-10 && recomputed == 0 && oracle_mismatch == 0;
        r.worst = worst_f;
        std::ostringstream os;
        os << trials << " streams; max diff f32 " << worst_f << ", f64 " << worst_d << "; recomputed entries " << recomputed
           << "; recompute-oracle mismatches " << oracle_mismatch;
        r.detail = os.str();
        return r;
    });
}

/// Earlier target positions never move; every segment starts slot_len after its slot.
inline PropertyResult check_target_invariance(const SuiteOptions& opt) {
    return verify_detail::timed(2, "target-position invariance", [&] {
        using namespace verify_detail;
        PropertyResult r;
        int runs = 0;
        std::string first_bad;
        const Transformer<double> tiny(small_model(PosScheme::Rotary, opt.seed, 1));
        auto run_one = [&](const std::vector<TokenId>& src, const PolicySpec& p, int L, RoleLengths roles, int cap) {
            EngineOptions eo;
            eo.roles = roles;
            eo.write_cap = cap;
            const auto tr = run_stream(tiny, src, p, Strategy::expost(L), eo);
            ++runs;
            const auto bad = target_position_violation(tr, L);
            if (!bad.empty() && first_bad.empty())
                first_bad = "L=" + std::to_string(L) + " " + p.to_string() + " |S|=" + std::to_string(src.size()) + ": " + bad;
        };
        // exhaustive small instances
        CounterRng rng(opt.seed, "invariance");
        const int max_len = opt.quick ? 6 : 10;
        for (int L = 1; L <= 8; ++L)
            for (int n = 1; n <= max_len; ++n) {
                const auto src = random_tokens(rng, n);
                for (int k = 1; k <= 4; ++k) {
                    run_one(src, PolicySpec::wait_k(k), L, {0, 1, 1}, n + 3);
                    run_one(src, PolicySpec::read_n(k, 3), L, {2, 1, 2}, n + 3);
                }
            }
        // randomized larger instances
        const int trials = opt.quick ? 24 : 100;
        for (int t = 0; t < trials; ++t) {
            const int n = static_cast<int>(rng.uniform_int(1, 64));
            run_one(random_tokens(rng, n), random_policy(rng), static_cast<int>(rng.uniform_int(1, 64)),
                    {static_cast<int>(rng.uniform_int(0, 3)), static_cast<int>(rng.uniform_int(0, 2)), static_cast<int>(rng.uniform_int(1, 2))},
                    n + 4);
        }
        r.passed = first_bad.empty();
        r.worst = r.passed ? 0 : 1;
        r.detail = std::to_string(runs) + " streams" + (first_bad.empty() ? "" : "; first violation: " + first_bad);
        return r;
    });
}

/// Stale reuse drifts from recomputation once a source token lands mid-sequence.
inline PropertyResult check_dilemma(const SuiteOptions& opt) {
    return verify_detail::timed(3, "stale-reuse divergence", [&] {
        using namespace verify_detail;
        PropertyResult r;
        const int trials = opt.quick ? 200 : 1000;
        CounterRng rng(opt.seed, "dilemma");
        int diverged = 0, early_mismatch = 0;
        double min_diff = INFINITY;
        for (int t = 0; t < trials; ++t) {
            const PosScheme scheme = t % 2 == 0 ? PosScheme::Rotary : PosScheme::Alibi;
            const Transformer<double> m(small_model(scheme, 77000 + opt.seed * 10000 + static_cast<std::uint64_t>(t), 1));
            const int n = static_cast<int>(rng.uniform_int(3, 16));
            const auto src = random_tokens(rng, n);
            // k < |S| so at least one source token arrives after a WRITE
            const auto policy = PolicySpec::wait_k(static_cast<int>(rng.uniform_int(1, std::min(3, n - 1))));
            EngineOptions eo;
            eo.forced_output = random_tokens(rng, n + 2);
            eo.forced_output.back() = special::kEos;
            eo.record_context = false;
            const auto naive = run_stream(m, src, policy, Strategy::naive_reuse(), eo);
            const auto rec = run_stream(m, src, policy, Strategy::recompute(), eo);
            // first WRITE that follows a READ which itself followed a WRITE
            std::size_t insertion = naive.steps.size();
            bool wrote = false;
            for (std::size_t i = 0; i < naive.steps.size(); ++i) {
                const auto k = naive.steps[i].action.kind;
                if (k == Action::Kind::Write) wrote = true;
                if (k == Action::Kind::Read && wrote) {
                    insertion = i;
                    break;
                }
            }
            double before = 0, after = 0;
            for (std::size_t i = 0; i < naive.steps.size(); ++i) {
                if (naive.steps[i].action.kind != Action::Kind::Write) continue;
                double d = 0;
                for (std::size_t v = 0; v < naive.steps[i].logits.size(); ++v)
                    d = std::max(d, std::abs(naive.steps[i].logits[v] - rec.steps[i].logits[v]));
                (i < insertion ? before : after) = std::max(i < insertion ? before : after, d);
            }
            if (before > 1e-9) ++early_mismatch;
            if (after > 1e-3) ++diverged;
            min_diff = std::min(min_diff, after);
        }
        const double rate = static_cast<double>(diverged) / trials;
        r.passed = rate >= 0.99 && early_mismatch == 0;
        r.worst = rate;
        std::ostringstream os;
        os << diverged << "/" << trials << " trials diverge by > 1e-3 after the first insertion (smallest gap " << min_diff
           << "); mismatches before it: " << early_mismatch;
        r.detail = os.str();
        return r;
    });
}

/// build_policy_mask agrees with the entry-by-entry oracle.
inline PropertyResult check_mask_oracle(const SuiteOptions& opt) {
    return verify_detail::timed(4, "mask oracle equivalence", [&] {
        PropertyResult r;
        long layouts = 0, entries = 0, mismatches = 0, envelope = 0;
        auto compare = [&](const LayoutPlan& lp, const std::vector<int>& g, MaskOptions mo) {
            const auto m = build_policy_mask(lp, g, mo);
            ++layouts;
            if (!m.within_causal_envelope()) ++envelope;
            for (int i = 0; i < lp.size(); ++i)
                for (int j = 0; j < lp.size(); ++j) {
                    ++entries;
                    if (m.at(i, j) != visibility_oracle(lp, g, i, j, mo)) ++mismatches;
                }
        };
        std::vector<TokenId> toks(64, 7);
        // exhaustive: every slot/contiguous layout of at most 24 entries under wait-k, k <= 5
        for (int k = 1; k <= 5; ++k)
            for (int ns = 1; ns <= 22; ++ns)
                for (int nt = 1; nt <= 22; ++nt)
                    for (int L = 1; L <= 24; ++L)
                        for (int pr = 0; pr <= 1; ++pr)
                            for (int ru = 0; ru <= 1; ++ru)
                                for (int ra = 0; ra <= 1; ++ra) {
                                    std::vector<int> g;
                                    for (int j = 1; j <= nt; ++j) g.push_back(waitk_g(j, k, ns));
                                    const RoleLengths roles{pr, ru, ra};
                                    const std::span<const TokenId> src(toks.data(), static_cast<std::size_t>(ns));
                                    const std::span<const TokenId> tgt(toks.data(), static_cast<std::size_t>(nt));
                                    if (slot_layout_length(g.back(), nt, g, L, roles) <= 24) {
                                        const auto lp = slot_layout(src, tgt, g, L, roles);
                                        compare(lp, g, {});
                                        compare(lp, g, {true});
                                    }
                                    if (L == 1 && pr + ru + ns + ra + nt <= 24) {
                                        const auto lp = layout_recompute({src.begin(), src.end()}, {tgt.begin(), tgt.end()}, roles);
                                        compare(lp, g, {});
                                    }
                                }
        const long exhaustive = layouts;
        // randomized larger layouts with arbitrary monotone delays
        CounterRng rng(opt.seed, "mask-oracle");
        const int trials = opt.quick ? 1000 : 10000;
        for (int t = 0; t < trials; ++t) {
            const int ns = static_cast<int>(rng.uniform_int(1, 24));
            const int nt = static_cast<int>(rng.uniform_int(1, 24));
            std::vector<int> g(static_cast<std::size_t>(nt));
            int cur = static_cast<int>(rng.uniform_int(1, ns));
            for (auto& x : g) {
                cur = std::min(ns, cur + static_cast<int>(rng.uniform_int(0, 2)));
                x = cur;
            }
            const RoleLengths roles{static_cast<int>(rng.uniform_int(0, 3)), static_cast<int>(rng.uniform_int(0, 2)),
                                    static_cast<int>(rng.uniform_int(0, 2))};
            const std::span<const TokenId> src(toks.data(), static_cast<std::size_t>(ns));
            const std::span<const TokenId> tgt(toks.data(), static_cast<std::size_t>(nt));
            const int L = static_cast<int>(rng.uniform_int(1, 16));
            const auto lp = rng.bernoulli(0.8) ? slot_layout(src, tgt, g, L, roles)
                                               : layout_recompute({src.begin(), src.end()}, {tgt.begin(), tgt.end()}, roles);
            compare(lp, g, {rng.bernoulli(0.5)});
        }
        r.passed = mismatches == 0 && envelope == 0;
        r.worst = static_cast<double>(mismatches);
        std::ostringstream os;
        os << exhaustive << " exhaustive + " << trials << " random layouts, " << entries << " entries; mismatches " << mismatches
           << ", envelope violations " << envelope;
        r.detail = os.str();
        return r;
    });
}

/// No gradient flows from a target loss to source tokens the policy hides.
inline PropertyResult check_grad_visibility(const SuiteOptions& opt) {
    return verify_detail::timed(5, "gradient visibility", [&] {
        using namespace verify_detail;
        PropertyResult r;
        const int samples = opt.quick ? 12 : 50;
        CounterRng rng(opt.seed, "grad-visibility");
        int pairs = 0, violations = 0;
        double max_fd = 0;
        for (int t = 0; t < samples; ++t) {
            const Transformer<double> m(small_model(t % 2 ? PosScheme::Alibi : PosScheme::Rotary, 300 + static_cast<std::uint64_t>(t)));
            const int n = static_cast<int>(rng.uniform_int(3, 12));
            SentencePair p{random_tokens(rng, n), random_tokens(rng, n)};
            const auto policy = rng.bernoulli(0.7) ? PolicySpec::wait_k(static_cast<int>(rng.uniform_int(1, 4)))
                                                   : PolicySpec::read_n(static_cast<int>(rng.uniform_int(1, 4)));
            auto s = build_training_sequence(p, static_cast<int>(rng.uniform_int(2, 8)), policy, {1, 1, 1});
            if (opt.fault == "mask-bit") {
                // open one hidden source column to the first emitter row that should not see it
                const auto labels = s.labels;
                bool done = false;
                for (int row = 0; row < s.layout.size() && !done; ++row)
                    if (labels[static_cast<std::size_t>(row)] >= 0)
                        for (int c = 0; c < row && !done; ++c)
                            if (s.layout.entries[static_cast<std::size_t>(c)].tag == Tag::Source && !s.mask.at(row, c)) {
                                s.mask.set(row, c, true);
                                done = true;
                            }
            }
            const auto rep = grad_visibility_check(m, s, 1e-4, static_cast<std::uint64_t>(t));
            pairs += rep.constrained_pairs;
            violations += static_cast<int>(rep.violations.size());
            max_fd = std::max(max_fd, rep.max_fd);
        }
        r.passed = violations == 0 && max_fd <= 1e-6;
        r.worst = max_fd;
        std::ostringstream os;
        os << samples << " samples, " << pairs << " hidden (target, source) pairs; reverse-mode violations " << violations
           << "; max finite-difference slope " << max_fd;
        r.detail = os.str();
        return r;
    });
}

/// Training-mask logits at each emitter row equal the streaming logits of the same WRITE.
inline PropertyResult check_train_stream_alignment(const SuiteOptions& opt) {
    return verify_detail::timed(6, "training/streaming alignment", [&] {
        using namespace verify_detail;
        PropertyResult r;
        const int cases = opt.quick ? 12 : 50;
        CounterRng rng(opt.seed, "alignment");
        double worst = 0;
        int rows = 0;
        std::string problem;
        for (int t = 0; t < cases; ++t) {
            const Transformer<float> m(small_model(t % 2 ? PosScheme::Alibi : PosScheme::Rotary, 500 + static_cast<std::uint64_t>(t)));
            const int n = static_cast<int>(rng.uniform_int(2, 40));
            SentencePair p{random_tokens(rng, n), random_tokens(rng, n)};
            const auto policy = rng.bernoulli(0.6) ? PolicySpec::wait_k(static_cast<int>(rng.uniform_int(1, 7)))
                                                   : PolicySpec::read_n(static_cast<int>(rng.uniform_int(1, 9)));
            const int L = static_cast<int>(rng.uniform_int(1, 24));
            const RoleLengths roles{static_cast<int>(rng.uniform_int(0, 3)), static_cast<int>(rng.uniform_int(0, 2)),
                                    static_cast<int>(rng.uniform_int(1, 2))};
            const Strategy strat = opt.fault == "naive-reuse" ? Strategy::naive_reuse() : Strategy::expost(L);
            const auto s = build_training_sequence(p, L, policy, roles);
            const auto tokens = s.layout.tokens();
            const auto positions = s.layout.positions();
            const auto tags = s.layout.tags();
            ForwardInput<float> in{tokens, positions, tags, &s.mask, nullptr};
            const auto full = m.forward(in);

            EngineOptions eo;
            eo.roles = roles;
            eo.forced_output = streaming_target(p, policy);
            eo.record_context = false;
            const auto tr = run_stream(m, p.source, policy, strat, eo);
            std::size_t w = 0;
            for (int row = 0; row < s.layout.size(); ++row) {
                if (s.labels[static_cast<std::size_t>(row)] < 0) continue;
                while (w < tr.steps.size() && tr.steps[w].action.kind != Action::Kind::Write) ++w;
                if (w >= tr.steps.size()) {
                    problem = "stream wrote fewer tokens than the sample has targets";
                    worst = INFINITY;
                    break;
                }
                for (int v = 0; v < full.logits.cols(); ++v)
                    worst = std::max(worst, std::abs(static_cast<double>(full.logits(row, v)) - tr.steps[w].logits[static_cast<std::size_t>(v)]));
                ++rows;
                ++w;
            }
        }
        r.passed = worst <= 1e-5 && problem.empty();
        r.worst = worst;
        std::ostringstream os;
        os << cases << " cases, " << rows << " target rows; max |logit diff| " << worst << (problem.empty() ? "" : "; " + problem);
        r.detail = os.str();
        return r;
    });
}

struct FlopsStudy {
    double median_expost = 0, median_conv = 0, median_recompute = 0; // wait-3
    double median_expost_rn = 0, median_conv_rn = 0, median_recompute_rn = 0; // read-5
    double exponent_expost = 0, exponent_recompute = 0;
};

inline FlopsStudy flops_study(const SuiteOptions& opt) {
    using namespace verify_detail;
    FlopsStudy st;
    const Transformer<float> m(small_model(PosScheme::Rotary, opt.seed, 1));
    const FlopsModel fm = FlopsModel::llm_8b();
    ToyCorpusSpec corpus;
    corpus.seed = 11 + opt.seed;
    const int n_sent = opt.quick ? 50 : 200;
    const auto pairs = make_corpus(corpus, 0, n_sent);
    auto cost = [&](const SentencePair& p, const PolicySpec& pol, const Strategy& s) {
        EngineOptions eo;
        eo.forced_output = streaming_target(p, pol);
        eo.record_context = false;
        return cumulative_flops(run_stream(m, p.source, pol, s, eo), fm) / 1e9;
    };
    for (int which = 0; which < 2; ++which) {
        const PolicySpec pol = which == 0 ? PolicySpec::wait_k(3) : PolicySpec::read_n(5);
        std::vector<double> e, c, r;
        for (const auto& p : pairs) {
            e.push_back(cost(p, pol, Strategy::expost(16)));
            c.push_back(cost(p, pol, Strategy::conversational()));
            r.push_back(cost(p, pol, Strategy::recompute()));
        }
        (which == 0 ? st.median_expost : st.median_expost_rn) = median(e);
        (which == 0 ? st.median_conv : st.median_conv_rn) = median(c);
        (which == 0 ? st.median_recompute : st.median_recompute_rn) = median(r);
    }
    std::vector<double> xs, ye, yr;
    CounterRng rng(opt.seed, "flops-growth");
    for (int n : {16, 32, 64, 128, 256}) {
        double e = 0, r = 0;
        const int reps = opt.quick ? 1 : 3;
        for (int rep = 0; rep < reps; ++rep) {
            SentencePair p{random_tokens(rng, n), {}};
            p.target = random_tokens(rng, n);
            e += cost(p, PolicySpec::wait_k(3), Strategy::expost(16));
            r += cost(p, PolicySpec::wait_k(3), Strategy::recompute());
        }
        xs.push_back(n);
        ye.push_back(e / reps);
        yr.push_back(r / reps);
    }
    st.exponent_expost = fitted_exponent(xs, ye);
    st.exponent_recompute = fitted_exponent(xs, yr);
    return st;
}

inline PropertyResult check_flops_hierarchy(const SuiteOptions& opt) {
    return verify_detail::timed(7, "FLOPs hierarchy", [&] {
        PropertyResult r;
        const auto st = flops_study(opt);
        r.passed = st.median_expost < st.median_conv && st.median_conv < st.median_recompute &&
                   st.median_expost_rn < st.median_conv_rn && st.median_conv_rn < st.median_recompute_rn &&
                   st.exponent_recompute >= 1.8 && st.exponent_expost <= 1.3;
        r.worst = st.exponent_expost;
        std::ostringstream os;
        os << std::setprecision(4) << "median GFLOPs wait-3 expost " << st.median_expost << " < conv " << st.median_conv
           << " < recompute " << st.median_recompute << "; read-5 " << st.median_expost_rn << " < " << st.median_conv_rn << " < "
           << st.median_recompute_rn << "; growth exponent expost " << st.exponent_expost << ", recompute " << st.exponent_recompute;
        r.detail = os.str();
        return r;
    });
}

inline const std::vector<int>& slot_grid() {
    static const std::vector<int> grid{4, 8, 16, 32, 64, 128};
    return grid;
}

/// Materialized training length per slot length, cross-checked against the closed form.
inline PropertyResult check_slot_length_curve(const SuiteOptions& opt) {
    return verify_detail::timed(8, "slot-length curve", [&] {
        PropertyResult r;
        const ToyCorpusSpec corpus;
        const RoleLengths roles{2, 1, 1};
        const PolicySpec pol = PolicySpec::wait_k(3);
        const auto pairs = make_corpus(corpus, 0, opt.quick ? 500 : corpus.size);
        std::vector<double> avg;
        long mismatches = 0;
        for (int L : slot_grid()) {
            double total = 0;
            for (const auto& p : pairs) {
                const auto s = build_training_sequence(p, L, pol, roles);
                const int closed = slot_layout_length(s.g.back(), static_cast<int>(s.g.size()), s.g, L, roles);
                if (closed != s.layout.size()) ++mismatches;
                total += s.layout.size();
            }
            avg.push_back(total / static_cast<double>(pairs.size()));
        }
        const auto it = std::min_element(avg.begin(), avg.end());
        const auto idx = it - avg.begin();
        const bool strict = std::count(avg.begin(), avg.end(), *it) == 1;
        r.passed = mismatches == 0 && idx > 0 && idx + 1 < static_cast<long>(avg.size()) && strict;
        r.worst = static_cast<double>(mismatches);
        std::ostringstream os;
        os << std::setprecision(5);
        for (std::size_t i = 0; i < avg.size(); ++i) os << (i ? ", " : "") << "L=" << slot_grid()[i] << ": " << avg[i];
        os << "; minimum at L=" << slot_grid()[static_cast<std::size_t>(idx)] << "; closed-form mismatches " << mismatches;
        r.detail = os.str();
        return r;
    });
}

inline std::vector<PropertyResult> run_suite(const SuiteOptions& opt, const std::function<void(const PropertyResult&)>& on_result = {}) {
    std::vector<PropertyResult> out;
    for (auto f : {check_zero_recompute, check_target_invariance, check_dilemma, check_mask_oracle, check_grad_visibility,
                   check_train_stream_alignment, check_flops_hierarchy, check_slot_length_curve}) {
        out.push_back(f(opt));
        if (on_result) on_result(out.back());
    }
    return out;
}

// ---- toy training study -------------------------------------------------

struct StudyConfig {
    ModelConfig model;
    ToyCorpusSpec corpus;
    TrainConfig train;
    RoleLengths roles{2, 1, 1};
    PolicySpec policy = PolicySpec::wait_k(3);
    int train_slot = 16;
    int eval_pairs = 200;

    StudyConfig() {
        model.d_model = 64;
        model.n_heads = 4;
        model.n_layers = 2;
        model.d_ff = 128;
        model.vocab_size = 64;
        model.max_position = 1024;
        model.seed = 1;
    }
};

struct StudyResult {
    double acc_full = 0, acc_no_mask = 0, acc_no_slot = 0;
    std::vector<std::pair<int, double>> mismatch; // inference slot length -> accuracy of the full model
    double final_loss_full = 0, final_loss_no_mask = 0, final_loss_no_slot = 0;
};

inline StudyResult training_study(const StudyConfig& sc, const std::function<void(const std::string&)>& log = {}) {
    StudyResult res;
    const auto held_out = make_corpus(sc.corpus, sc.corpus.size, sc.eval_pairs);
    const Transformer<float> init(sc.model);
    auto run = [&](TrainVariant v, double& acc, double& loss) {
        const auto tr = train(init, sc.corpus, sc.train_slot, sc.policy, sc.roles, v, sc.train);
        loss = tr.losses.empty() ? 0 : tr.losses.back();
        acc = evaluate(tr.model, held_out, sc.policy, eval_strategy(v, sc.train_slot), sc.roles, eval_visibility(v)).accuracy;
        if (log) log(variant_name(v) + ": final loss " + std::to_string(loss) + ", accuracy " + std::to_string(acc));
        return tr.model;
    };
    const auto full = run(TrainVariant::Full, res.acc_full, res.final_loss_full);
    for (int L : {4, 8, 16, 32, 64}) {
        const double acc = evaluate(full, held_out, sc.policy, Strategy::expost(L), sc.roles).accuracy;
        res.mismatch.emplace_back(L, acc);
        if (log) log("full model at inference L_slot=" + std::to_string(L) + ": accuracy " + std::to_string(acc));
    }
    run(TrainVariant::NoMask, res.acc_no_mask, res.final_loss_no_mask);
    run(TrainVariant::NoSlot, res.acc_no_slot, res.final_loss_no_slot);
    return res;
}

inline PropertyResult check_training_efficacy(const StudyResult& s) {
    PropertyResult r;
    r.id = 9;
    r.name = "policy-consistent training efficacy";
    const double margin = std::min(s.acc_full - s.acc_no_mask, s.acc_full - s.acc_no_slot);
    r.passed = margin >= 0.05;
    r.worst = margin;
    std::ostringstream os;
    os << std::setprecision(4) << "accuracy full " << s.acc_full << ", without masking " << s.acc_no_mask << ", without slots "
       << s.acc_no_slot << "; smallest margin " << margin;
    r.detail = os.str();
    return r;
}

inline PropertyResult check_slot_mismatch(const StudyResult& s, int train_slot) {
    PropertyResult r;
    r.id = 10;
    r.name = "slot-length mismatch";
    double matched = -1, best_other = -1;
    std::ostringstream os;
    os << std::setprecision(4);
    for (const auto& [L, acc] : s.mismatch) {
        os << "L=" << L << ": " << acc << "  ";
        if (L == train_slot)
            matched = acc;
        else
            best_other = std::max(best_other, acc);
    }
    r.passed = matched >= 0 && matched >= best_other && s.mismatch.size() == 5;
    r.worst = matched - best_other;
    r.detail = os.str();
    return r;
}

} // namespace expost
