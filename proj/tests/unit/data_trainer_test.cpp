#include <gtest/gtest.h>

#include <numeric>

#include "helpers.hpp"

using namespace expost;
using namespace expost::test;

namespace {

ToyCorpusSpec small_corpus() {
    ToyCorpusSpec c;
    c.min_len = 4;
    c.max_len = 9;
    c.vocab_size = 40;
    c.size = 50;
    c.seed = 5;
    return c;
}

TrainConfig short_run(int steps) {
    TrainConfig t;
    t.steps = steps;
    t.batch = 4;
    t.warmup = 5;
    t.seed = 9;
    return t;
}

} // namespace

TEST(Segment, SplitsIntoSlots) {
    const auto six = iota_tokens(6);
    const auto a = segment_source(six, 3);
    ASSERT_EQ(a.size(), 2u);
    EXPECT_EQ(a[0], (std::vector<TokenId>{6, 7, 8}));
    EXPECT_EQ(a[1], (std::vector<TokenId>{9, 10, 11}));
    const auto seven = iota_tokens(7);
    std::vector<std::size_t> sizes;
    for (const auto& c : segment_source(seven, 3)) sizes.push_back(c.size());
    EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 1}));
    EXPECT_EQ(segment_source(seven, 7).size(), 1u);
    EXPECT_EQ(segment_source(seven, 50).size(), 1u);
    EXPECT_TRUE(segment_source(std::vector<TokenId>{}, 3).empty());
    EXPECT_THROW(segment_source(seven, 0), ConfigError);
}

TEST(Corpus, DeterministicAndMapped) {
    const auto spec = small_corpus();
    EXPECT_EQ(make_corpus(spec)[7].source, toy_pair(spec, 7).source);
    const auto perm = content_bijection(spec);
    std::vector<TokenId> img(perm.begin() + kFirstContentToken, perm.end());
    std::sort(img.begin(), img.end());
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(img[i], kFirstContentToken + static_cast<TokenId>(i));
    for (const auto& p : make_corpus(spec)) {
        ASSERT_EQ(p.source.size(), p.target.size());
        EXPECT_GE(static_cast<int>(p.source.size()), spec.min_len);
        EXPECT_LE(static_cast<int>(p.source.size()), spec.max_len);
        for (std::size_t i = 0; i < p.source.size(); ++i) EXPECT_EQ(p.target[i], perm[static_cast<std::size_t>(p.source[i])]);
    }
    auto other = spec;
    other.seed = 6;
    EXPECT_NE(make_corpus(spec)[0].source, make_corpus(other)[0].source);
}

TEST(Corpus, LocalReorderStaysInWindow) {
    auto spec = small_corpus();
    spec.task = ToyTask::LocalReorder;
    const auto perm = content_bijection(spec);
    for (const auto& p : make_corpus(spec)) {
        for (std::size_t w0 = 0; w0 < p.source.size(); w0 += 3) {
            const std::size_t w1 = std::min(p.source.size(), w0 + 3);
            std::vector<TokenId> want, got(p.target.begin() + static_cast<std::ptrdiff_t>(w0), p.target.begin() + static_cast<std::ptrdiff_t>(w1));
            for (std::size_t i = w0; i < w1; ++i) want.push_back(perm[static_cast<std::size_t>(p.source[i])]);
            std::sort(want.begin(), want.end());
            std::sort(got.begin(), got.end());
            EXPECT_EQ(want, got);
        }
    }
    EXPECT_THROW(parse_toy_task("sort"), ConfigError);
}

TEST(PolicyDelays, WaitKAndErrors) {
    SentencePair p{iota_tokens(5), iota_tokens(5, 20)};
    const auto t = streaming_target(p, PolicySpec::wait_k(2));
    ASSERT_EQ(t.size(), 6u);
    EXPECT_EQ(t.back(), special::kEos);
    EXPECT_EQ(policy_delays(PolicySpec::wait_k(2), 5, t), (std::vector<int>{2, 3, 4, 5, 5, 5}));
    const std::vector<TokenId> short_t{20, 21};
    EXPECT_THROW(policy_delays(PolicySpec::wait_k(2), 5, short_t), PolicyError);
    const std::vector<TokenId> early_eos{20, special::kEos, 21};
    EXPECT_THROW(policy_delays(PolicySpec::wait_k(2), 5, early_eos), PolicyError);
}

TEST(PolicyDelays, ReadNSegments) {
    SentencePair p{iota_tokens(5), iota_tokens(5, 20)};
    const auto t = streaming_target(p, PolicySpec::read_n(2));
    EXPECT_EQ(t, (std::vector<TokenId>{20, 21, special::kEndOfSegment, 22, 23, special::kEndOfSegment, 24, special::kEos}));
    EXPECT_EQ(policy_delays(PolicySpec::read_n(2), 5, t), (std::vector<int>{2, 2, 2, 4, 4, 4, 5, 5}));
}

TEST(TrainingSequence, FirstTargetPosition) {
    const RoleLengths roles{2, 1, 1};
    for (int L : {1, 3, 4, 8}) {
        const auto g = waitk_delays(6, 1, 6);
        const auto plan = slot_layout(iota_tokens(6), iota_tokens(6, 20), g, L, roles);
        const auto it = std::find_if(plan.entries.begin(), plan.entries.end(), [](const LayoutEntry& e) { return e.tag == Tag::Target; });
        ASSERT_NE(it, plan.entries.end());
        EXPECT_EQ(it->position, roles.prompt + roles.user + L + roles.assistant) << "L=" << L;
    }
}

TEST(TrainingSequence, PadsFillOnlyTheLastSlot) {
    const RoleLengths roles{1, 1, 1};
    for (int L : {2, 3, 5}) {
        const auto g = waitk_delays(7, 2, 7);
        const auto plan = slot_layout(iota_tokens(7), iota_tokens(7, 20), g, L, roles);
        const int chunks = (7 + L - 1) / L;
        EXPECT_EQ(plan.count(Tag::Pad), chunks * L - 7);
        EXPECT_EQ(plan.size(), slot_layout_length(7, 7, g, L, roles));
        // pads come right after the last source
        int last_src = -1;
        for (int i = 0; i < plan.size(); ++i)
            if (plan.entries[static_cast<std::size_t>(i)].tag == Tag::Source) last_src = i;
        for (int i = 1; i <= plan.count(Tag::Pad); ++i) EXPECT_EQ(plan.entries[static_cast<std::size_t>(last_src + i)].tag, Tag::Pad);
    }
}

TEST(TrainingSequence, OfflineSingleSlotIsRecomputeLayout) {
    const RoleLengths roles{2, 1, 1};
    const auto src = iota_tokens(6);
    const auto tgt = iota_tokens(4, 20);
    const std::vector<int> g(4, 6);
    const auto s = build_training_sequence(src, tgt, g, 6, roles);
    EXPECT_EQ(s.layout, layout_recompute(src, tgt, roles));
    EXPECT_EQ(s.mask, build_causal_mask(s.layout));
}

TEST(TrainingSequence, VariantsDifferWhereExpected) {
    const SentencePair p{iota_tokens(6), iota_tokens(6, 20)};
    const RoleLengths roles{1, 1, 1};
    const auto full = build_training_sequence(p, 4, PolicySpec::wait_k(2), roles, sample_options(TrainVariant::Full));
    const auto nomask = build_training_sequence(p, 4, PolicySpec::wait_k(2), roles, sample_options(TrainVariant::NoMask));
    const auto noslot = build_training_sequence(p, 4, PolicySpec::wait_k(2), roles, sample_options(TrainVariant::NoSlot));
    EXPECT_EQ(full.layout, nomask.layout);
    EXPECT_NE(full.mask, nomask.mask);
    EXPECT_EQ(nomask.mask, build_causal_mask(nomask.layout));
    EXPECT_EQ(noslot.layout.count(Tag::Pad), 0);
    EXPECT_EQ(noslot.layout.size(), 1 + 1 + 6 + 1 + 7);
    for (const auto& s : {full, nomask, noslot})
        EXPECT_EQ(std::count_if(s.labels.begin(), s.labels.end(), [](TokenId t) { return t >= 0; }), 7);
}

TEST(AvgSequenceLength, Extremes) {
    const auto spec = small_corpus();
    const auto pairs = make_corpus(spec);
    double plain = 0, wide = 0;
    const RoleLengths roles{2, 1, 1};
    const int L = 64;
    for (const auto& p : pairs) {
        const double n = static_cast<double>(p.source.size() + p.target.size() + 1);
        plain += n;
        wide += roles.prompt + roles.user + L + roles.assistant + static_cast<double>(p.target.size() + 1);
    }
    plain /= static_cast<double>(pairs.size());
    wide /= static_cast<double>(pairs.size());
    EXPECT_NEAR(avg_sequence_length(spec, 1, RoleLengths{}, PolicySpec::wait_k(1)), plain, 1e-9);
    EXPECT_NEAR(avg_sequence_length(spec, L, roles, PolicySpec::wait_k(3)), wide, 1e-9);
}

TEST(Train, ZeroStepsLeavesModelUnchanged) {
    const Transformer<float> init(tiny_config());
    const auto r = train(init, small_corpus(), 4, PolicySpec::wait_k(2), RoleLengths{1, 1, 1}, TrainVariant::Full, short_run(0));
    EXPECT_EQ(r.model.parameter_hash(), init.parameter_hash());
    EXPECT_TRUE(r.losses.empty());
}

TEST(Train, DeterministicGivenSeeds) {
    const Transformer<float> init(tiny_config());
    const auto a = train(init, small_corpus(), 4, PolicySpec::wait_k(2), RoleLengths{1, 1, 1}, TrainVariant::Full, short_run(6));
    const auto b = train(init, small_corpus(), 4, PolicySpec::wait_k(2), RoleLengths{1, 1, 1}, TrainVariant::Full, short_run(6));
    EXPECT_EQ(a.losses, b.losses);
    EXPECT_EQ(a.model.parameter_hash(), b.model.parameter_hash());
    auto other = short_run(6);
    other.seed = 10;
    const auto c = train(init, small_corpus(), 4, PolicySpec::wait_k(2), RoleLengths{1, 1, 1}, TrainVariant::Full, other);
    EXPECT_NE(a.losses, c.losses);
}

TEST(Train, LossDecreases) {
    const Transformer<float> init(tiny_config());
    auto cfg = short_run(150);
    cfg.batch = 8;
    const auto r = train(init, small_corpus(), 4, PolicySpec::wait_k(2), RoleLengths{1, 1, 1}, TrainVariant::Full, cfg);
    ASSERT_EQ(r.losses.size(), 150u);
    const double head = std::accumulate(r.losses.begin(), r.losses.begin() + 10, 0.0) / 10;
    const double tail = std::accumulate(r.losses.end() - 10, r.losses.end(), 0.0) / 10;
    EXPECT_LT(tail, 0.7 * head);
}

TEST(Train, RejectsOversizedCorpusVocabulary) {
    const Transformer<float> init(tiny_config());
    auto spec = small_corpus();
    spec.vocab_size = 64;
    EXPECT_THROW(train(init, spec, 4, PolicySpec::wait_k(2), RoleLengths{}, TrainVariant::Full, short_run(1)), ConfigError);
}

TEST(Train, CopyMapReachesHighAccuracy) {
    StudyConfig sc;
    const Transformer<float> init(sc.model);
    const auto r = train(init, sc.corpus, sc.train_slot, sc.policy, sc.roles, TrainVariant::Full, sc.train);
    const auto held_out = make_corpus(sc.corpus, sc.corpus.size, 40);
    const auto ev = evaluate(r.model, held_out, sc.policy, Strategy::expost(sc.train_slot), sc.roles);
    EXPECT_GE(ev.accuracy, 0.95);
}

TEST(GradVisibility, OfflineMaskIsVacuous) {
    const Transformer<double> m(tiny_config());
    const std::vector<int> g(3, 4);
    const auto s = build_training_sequence(iota_tokens(4), iota_tokens(3, 20), g, 4, RoleLengths{1, 1, 1});
    const auto rep = grad_visibility_check(m, s);
    EXPECT_EQ(rep.constrained_pairs, 0);
    EXPECT_TRUE(rep.passed());
}

TEST(GradVisibility, WaitOnePasses) {
    const Transformer<double> m(tiny_config());
    const auto g = waitk_delays(4, 1, 4);
    const auto s = build_training_sequence(iota_tokens(4), iota_tokens(4, 20), g, 4, RoleLengths{1, 1, 1});
    const auto rep = grad_visibility_check(m, s, 1e-4, 1);
    EXPECT_EQ(rep.constrained_pairs, 3 + 2 + 1);
    EXPECT_TRUE(rep.passed());
    EXPECT_EQ(rep.max_illegal_grad, 0.0);
    EXPECT_LE(rep.max_fd, 1e-6);
}

TEST(GradVisibility, OneOpenBitIsFlagged) {
    const Transformer<double> m(tiny_config());
    const auto g = waitk_delays(4, 1, 4);
    auto s = build_training_sequence(iota_tokens(4), iota_tokens(4, 20), g, 4, RoleLengths{1, 1, 1});
    int emitter = -1, second_src = -1;
    for (int r = 0, seen = 0; r < s.layout.size(); ++r) {
        if (s.layout.entries[static_cast<std::size_t>(r)].tag == Tag::Source && ++seen == 2) second_src = r;
        if (emitter < 0 && s.labels[static_cast<std::size_t>(r)] >= 0) emitter = r;
    }
    ASSERT_GE(emitter, 0);
    ASSERT_GE(second_src, 0);
    ASSERT_FALSE(s.mask.at(emitter, second_src));
    s.mask.set(emitter, second_src, true);
    const auto rep = grad_visibility_check(m, s);
    ASSERT_EQ(rep.violations.size(), 1u);
    EXPECT_EQ(rep.violations[0].target, 1);
    EXPECT_EQ(rep.violations[0].source, 2);
    EXPECT_GT(rep.violations[0].grad, 0.0);
}
