#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace expost;
using namespace expost::test;

namespace {

std::vector<int> index_of(const LayoutPlan& p, Tag t) {
    std::vector<int> out;
    for (int i = 0; i < p.size(); ++i)
        if (p.entries[static_cast<std::size_t>(i)].tag == t) out.push_back(i);
    return out;
}

} // namespace

TEST(PolicyMask, WaitOneTwoByTwo) {
    // roles 0,1,1 and L=2: U s1 s2 A t1 t2, g = (1, 2)
    const std::vector<int> g{1, 2};
    const auto plan = slot_layout(std::vector<TokenId>{6, 7}, std::vector<TokenId>{20, 21}, g, 2, RoleLengths{0, 1, 1});
    ASSERT_EQ(plan.size(), 4 + 2);
    const auto mask = build_policy_mask(plan, g);
    const auto src = index_of(plan, Tag::Source);
    const int a = index_of(plan, Tag::AssistantRole)[0];
    const auto tgt = index_of(plan, Tag::Target);
    // assistant role predicts t1: sees s1 only
    EXPECT_TRUE(mask.at(a, src[0]));
    EXPECT_FALSE(mask.at(a, src[1]));
    // t1 row predicts t2: sees both
    EXPECT_TRUE(mask.at(tgt[0], src[0]));
    EXPECT_TRUE(mask.at(tgt[0], src[1]));
    // a source row sees earlier sources and the user role
    EXPECT_TRUE(mask.at(src[1], src[0]));
    EXPECT_TRUE(mask.at(src[1], 0)); // user role
}

TEST(PolicyMask, LaterSlotSourceSkipsEarlierOutput) {
    const std::vector<int> g{1, 2};
    const auto plan = slot_layout(std::vector<TokenId>{6, 7}, std::vector<TokenId>{20, 21}, g, 1, RoleLengths{0, 1, 1});
    const auto src = index_of(plan, Tag::Source);
    const auto asst = index_of(plan, Tag::AssistantRole);
    const auto tgt = index_of(plan, Tag::Target);
    ASSERT_EQ(src.size(), 2u);
    ASSERT_GT(src[1], tgt[0]);
    const auto mask = build_policy_mask(plan, g);
    EXPECT_FALSE(mask.at(src[1], tgt[0]));
    EXPECT_FALSE(mask.at(src[1], asst[0]));
    EXPECT_TRUE(mask.at(src[1], src[0]));
    MaskOptions open;
    open.source_sees_targets = true;
    EXPECT_TRUE(build_policy_mask(plan, g, open).at(src[1], tgt[0]));
    // the second segment's assistant role predicts t2 and may see s2
    EXPECT_TRUE(mask.at(asst.back(), src[1]));
}

TEST(PolicyMask, OfflineDelaysGiveCausalMask) {
    const RoleLengths roles{2, 1, 1};
    const auto src = iota_tokens(5);
    const auto tgt = iota_tokens(4, 20);
    const auto plan = layout_recompute(src, tgt, roles);
    const std::vector<int> g(4, 5);
    MaskOptions opt;
    opt.source_sees_targets = true;
    EXPECT_EQ(build_policy_mask(plan, g, opt), build_causal_mask(plan));
    // sources precede every target here, so the default rule agrees too
    EXPECT_EQ(build_policy_mask(plan, g), build_causal_mask(plan));
}

TEST(PolicyMask, InsideCausalEnvelope) {
    CounterRng rng(11, "mask-envelope");
    for (int trial = 0; trial < 200; ++trial) {
        const int n_src = static_cast<int>(rng.uniform_int(1, 12));
        const int n_tgt = static_cast<int>(rng.uniform_int(1, 12));
        const int k = static_cast<int>(rng.uniform_int(1, 4));
        const int L = static_cast<int>(rng.uniform_int(1, 6));
        const auto g = waitk_delays(n_tgt, k, n_src);
        const auto plan = slot_layout(iota_tokens(n_src), iota_tokens(n_tgt, 20), g, L, RoleLengths{1, 1, 1});
        const auto pm = build_policy_mask(plan, g);
        const auto cm = build_causal_mask(plan);
        for (int r = 0; r < plan.size(); ++r) {
            const bool pad_r = plan.entries[static_cast<std::size_t>(r)].tag == Tag::Pad;
            EXPECT_EQ(pm.at(r, r), !pad_r);
            for (int c = 0; c < plan.size(); ++c) {
                EXPECT_TRUE(!pm.at(r, c) || cm.at(r, c));
                EXPECT_TRUE(plan.entries[static_cast<std::size_t>(c)].tag != Tag::Pad || !pm.at(r, c));
                EXPECT_EQ(pm.at(r, c), visibility_oracle(plan, g, r, c));
            }
        }
    }
}

TEST(PolicyMask, ShortDelaySequenceRejected) {
    const auto plan = layout_recompute({6, 7}, {20, 21}, RoleLengths{});
    EXPECT_THROW(build_policy_mask(plan, std::vector<int>{1}), std::invalid_argument);
    EXPECT_THROW(visibility_oracle(plan, std::vector<int>{1, 2}, 9, 0), std::out_of_range);
}

TEST(PredictionLabels, EmitterRows) {
    const auto plan = layout_recompute({6, 7}, {20, 21}, RoleLengths{1, 1, 2});
    // P U s s A A t t
    const auto labels = prediction_labels(plan);
    EXPECT_EQ(labels, (std::vector<TokenId>{-1, -1, -1, -1, -1, 20, 21, -1}));
}

TEST(StreamingMask, PolicyHidesAssistantSideFromSources) {
    const std::vector<Tag> cached{Tag::UserRole, Tag::Source, Tag::AssistantRole, Tag::Target, Tag::Pad};
    const std::vector<Tag> fresh{Tag::Source, Tag::Target};
    const auto m = streaming_mask(cached, fresh, VisibilityMode::Policy);
    EXPECT_EQ(m.rows(), 2);
    EXPECT_EQ(m.cols(), 7);
    EXPECT_TRUE(m.at(0, 0));
    EXPECT_TRUE(m.at(0, 1));
    EXPECT_FALSE(m.at(0, 2));
    EXPECT_FALSE(m.at(0, 3));
    EXPECT_FALSE(m.at(0, 4)); // pad
    EXPECT_TRUE(m.at(0, 5));
    EXPECT_FALSE(m.at(0, 6)); // future
    for (int c = 0; c < 7; ++c) EXPECT_EQ(m.at(1, c), c != 4);

    const auto causal = streaming_mask(cached, fresh, VisibilityMode::Causal);
    EXPECT_TRUE(causal.at(0, 2));
    EXPECT_TRUE(causal.at(0, 3));
    EXPECT_FALSE(causal.at(0, 4));
}
