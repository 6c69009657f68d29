#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace expost;
using namespace expost::test;

namespace {

/// Actions the scheduler takes for a given source length when every write
/// emits a content token, stopping after n_writes writes.
std::vector<Action> schedule(const PolicySpec& p, int src_len, int n_writes) {
    PolicyState st;
    st.src_len = src_len;
    std::vector<Action> out;
    int w = 0;
    while (true) {
        const Action a = next_action(p, st);
        out.push_back(a);
        if (a.kind == Action::Kind::Finish) break;
        if (a.kind == Action::Kind::Write && ++w == n_writes) {
            advance(st, a, special::kEos);
            continue;
        }
        advance(st, a, 10);
    }
    return out;
}

} // namespace

TEST(WaitK, DelayFunction) {
    EXPECT_EQ(waitk_g(1, 3, 10), 3);
    EXPECT_EQ(waitk_g(8, 3, 10), 10);
    EXPECT_EQ(waitk_g(1, 1, 1), 1);
    EXPECT_EQ(waitk_g(5, 1, 10), 5);
    EXPECT_THROW(waitk_g(0, 1, 1), std::invalid_argument);
}

TEST(WaitK, WaitTwoOrdering) {
    const auto acts = schedule(PolicySpec::wait_k(2), 4, 5);
    std::vector<std::string> names;
    for (const auto& a : acts) names.push_back(action_name(a));
    const std::vector<std::string> expect{"READ(1)", "READ(1)", "WRITE", "READ(1)", "WRITE", "READ(1)",
                                          "WRITE",   "WRITE",   "WRITE", "FINISH"};
    EXPECT_EQ(names, expect);
}

TEST(ReadN, ClampsToRemainingSource) {
    PolicyState st;
    st.src_len = 8;
    st.src_read = 5;
    st.last_emitted_is_eoseg = true;
    EXPECT_EQ(next_action(PolicySpec::read_n(5), st), Action::read(3));
}

TEST(ReadN, SegmentEndsAtEndOfSegmentOrCap) {
    const PolicySpec p = PolicySpec::read_n(3, 2);
    PolicyState st;
    st.src_len = 9;
    EXPECT_EQ(next_action(p, st), Action::read(3));
    advance(st, Action::read(3));
    EXPECT_EQ(next_action(p, st), Action::write());
    advance(st, Action::write(), 10);
    EXPECT_EQ(next_action(p, st), Action::write());
    advance(st, Action::write(), 11); // hits the per-segment cap
    EXPECT_EQ(next_action(p, st), Action::read(3));
    advance(st, Action::read(3));
    advance(st, Action::write(), special::kEndOfSegment);
    EXPECT_EQ(next_action(p, st), Action::read(3));
}

TEST(Policy, FinishIsAbsorbing) {
    PolicyState st;
    st.src_len = 3;
    advance(st, Action::finish());
    for (int i = 0; i < 3; ++i) EXPECT_EQ(next_action(PolicySpec::wait_k(1), st), Action::finish());
    PolicyState eos;
    eos.src_len = 3;
    eos.src_read = 1;
    advance(eos, Action::write(), special::kEos);
    EXPECT_EQ(next_action(PolicySpec::read_n(2), eos), Action::finish());
}

TEST(Policy, EmptySourceFinishesImmediately) {
    PolicyState st;
    EXPECT_EQ(next_action(PolicySpec::wait_k(3), st), Action::finish());
}

TEST(Policy, ParseAndPrint) {
    EXPECT_EQ(PolicySpec::parse("wait-k:5"), PolicySpec::wait_k(5));
    EXPECT_EQ(PolicySpec::parse("read-n:7"), PolicySpec::read_n(7));
    EXPECT_EQ(PolicySpec::parse("read-n:7,4"), PolicySpec::read_n(7, 4));
    EXPECT_EQ(PolicySpec::parse(PolicySpec::read_n(3, 9).to_string()), PolicySpec::read_n(3, 9));
    EXPECT_THROW(PolicySpec::parse("wait-k:0"), ConfigError);
    EXPECT_THROW(PolicySpec::parse("wait-k:x"), ConfigError);
    EXPECT_THROW(PolicySpec::parse("greedy"), ConfigError);
    EXPECT_THROW(Action::read(0), std::invalid_argument);
}

TEST(Delays, WaitKTraceMatchesDelayFunction) {
    const Transformer<double> m(tiny_config());
    for (int k : {1, 2, 4}) {
        EngineOptions eo;
        eo.forced_output = iota_tokens(12, 20);
        eo.forced_output.push_back(special::kEos);
        const auto src = iota_tokens(9);
        const auto tr = run_stream(m, src, PolicySpec::wait_k(k), Strategy::expost(4), eo);
        const auto g = delays_from_trace(tr);
        ASSERT_EQ(g.size(), 13u);
        for (std::size_t j = 0; j < g.size(); ++j) EXPECT_EQ(g[j], waitk_g(static_cast<int>(j) + 1, k, 9));
    }
}

TEST(Delays, OfflineTraceSeesWholeSource) {
    const Transformer<double> m(tiny_config());
    EngineOptions eo;
    eo.forced_output = {20, 21, special::kEos};
    const auto tr = run_stream(m, iota_tokens(5), PolicySpec::wait_k(50), Strategy::expost(8), eo);
    EXPECT_EQ(delays_from_trace(tr), (std::vector<int>{5, 5, 5}));
}

TEST(Delays, EmptyTrace) {
    StreamTrace t;
    EXPECT_TRUE(delays_from_trace(t).empty());
}

TEST(Delays, CheckRejectsNonMonotone) {
    EXPECT_THROW(check_delays({2, 1}, 3), PolicyError);
    EXPECT_THROW(check_delays({4}, 3), PolicyError);
    EXPECT_NO_THROW(check_delays({1, 1, 3}, 3));
}
