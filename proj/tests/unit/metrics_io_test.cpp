#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"

using namespace expost;
using namespace expost::test;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("expost_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" + name)).string();
}

} // namespace

TEST(Laal, Examples) {
    const std::vector<int> diag{1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(laal(diag, 4, 4, 4), 1.0);
    const std::vector<int> offline{5, 5, 5};
    EXPECT_DOUBLE_EQ(laal(offline, 5, 3, 3), 5.0);
    // wait-2 over 4 tokens: lags 2, 2, 2 then the source ends
    const std::vector<int> w2{2, 3, 4, 4};
    EXPECT_DOUBLE_EQ(laal(w2, 4, 4, 4), 2.0);
    EXPECT_THROW(laal(std::vector<int>{}, 3, 3, 3), std::invalid_argument);
}

TEST(Laal, LongerReferenceNeverLowersIt) {
    CounterRng rng(4, "laal");
    for (int t = 0; t < 200; ++t) {
        const int src = static_cast<int>(rng.uniform_int(1, 20));
        const int hyp = static_cast<int>(rng.uniform_int(1, 20));
        const int k = static_cast<int>(rng.uniform_int(1, 5));
        const auto g = waitk_delays(hyp, k, src);
        const int ref = static_cast<int>(rng.uniform_int(1, 40));
        EXPECT_GE(laal(g, src, hyp, ref) + 1e-12, average_lagging(g, src, hyp));
    }
}

TEST(Flops, ZeroAndDecomposition) {
    const FlopsModel fm{8, 16, 2, 30};
    EXPECT_EQ(flops_forward(fm, 10, 0), 0.0);
    for (int c : {0, 3, 17})
        for (int a : {1, 4})
            for (int b : {1, 5}) {
                // two calls cost the same as one over the union
                const double split = flops_forward(fm, c, a) + flops_forward(fm, c + a, b);
                EXPECT_NEAR(split, flops_forward(fm, c, a + b), 1e-6);
            }
    const double d = 8, dff = 16, L = 2, V = 30;
    EXPECT_DOUBLE_EQ(flops_forward(fm, 5, 2), 2 * (L * (4 * 2 * d * d + 3 * 2 * d * dff + 2 * d * (2 * 5 + 3)) + 2 * d * V));
    EXPECT_THROW(flops_forward(fm, -1, 1), std::invalid_argument);
}

TEST(Flops, MatchesOpCounter) {
    const ModelConfig c = tiny_config();
    const Transformer<double> m(c);
    auto cache = m.make_cache();
    const std::vector<TokenId> t1{6, 7, 8};
    const std::vector<PositionId> p1{0, 1, 2};
    cache.append(m.forward({t1, p1, {}, nullptr, &cache}).delta);
    OpCounter ops;
    const std::vector<TokenId> t2{9, 10};
    const std::vector<PositionId> p2{3, 4};
    m.forward({t2, p2, {}, nullptr, &cache}, &ops);
    EXPECT_NEAR(2.0 * static_cast<double>(ops.macs), flops_forward(FlopsModel::from(c), 3, 2),
                0.01 * flops_forward(FlopsModel::from(c), 3, 2));
}

TEST(Flops, EmptyTraceAndStrategyOrdering) {
    EXPECT_EQ(cumulative_flops(StreamTrace{}), 0.0);
    const Transformer<double> m(tiny_config());
    EngineOptions eo;
    eo.forced_output = iota_tokens(10, 20);
    eo.forced_output.push_back(special::kEos);
    std::vector<double> ex, cv, rc;
    for (int n : {10, 12, 14}) {
        const auto src = iota_tokens(n);
        ex.push_back(cumulative_flops(run_stream(m, src, PolicySpec::wait_k(3), Strategy::expost(4), eo)));
        cv.push_back(cumulative_flops(run_stream(m, src, PolicySpec::wait_k(3), Strategy::conversational(), eo)));
        rc.push_back(cumulative_flops(run_stream(m, src, PolicySpec::wait_k(3), Strategy::recompute(), eo)));
    }
    EXPECT_LT(median(ex), median(rc));
    EXPECT_LT(median(cv), median(rc));
}

TEST(Metrics, FittedExponentAndMedian) {
    std::vector<double> x{1, 2, 4, 8, 16}, y;
    for (double v : x) y.push_back(3 * v * v);
    EXPECT_NEAR(fitted_exponent(x, y), 2.0, 1e-12);
    EXPECT_THROW(fitted_exponent(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);
    EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2);
    EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
    EXPECT_THROW(median({}), std::invalid_argument);
}

TEST(Metrics, TokenAccuracy) {
    const std::vector<std::int32_t> ref{1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(token_accuracy(ref, ref), 1.0);
    EXPECT_DOUBLE_EQ(token_accuracy(std::vector<std::int32_t>{1, 2}, ref), 0.5);
    EXPECT_DOUBLE_EQ(token_accuracy(std::vector<std::int32_t>{1, 9, 3, 4, 5, 6}, ref), 0.75);
    EXPECT_DOUBLE_EQ(token_accuracy(std::vector<std::int32_t>{}, std::vector<std::int32_t>{}), 1.0);
}

TEST(Metrics, RunRowCsv) {
    RunRow r{"expost", "wait-k", 3, 2.5, 10.25, 0.5};
    EXPECT_EQ(RunRow::csv_header(), "strategy,policy,k_or_n,laal,cum_gflops,token_accuracy");
    EXPECT_EQ(r.csv(), "expost,wait-k,3,2.5,10.25,0.5");
}

TEST(Checkpoint, RoundTrip) {
    const Transformer<float> m(tiny_config(PosScheme::Alibi, 12));
    const auto path = temp_path("rt.ckpt");
    save_checkpoint(m, path);
    const auto back = load_checkpoint<float>(path);
    EXPECT_EQ(back.parameter_hash(), m.parameter_hash());
    EXPECT_EQ(back.config(), m.config());
    const auto wide = load_checkpoint<double>(path);
    EXPECT_EQ(wide.cast<float>().parameter_hash(), m.parameter_hash());
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadFiles) {
    const auto path = temp_path("bad.ckpt");
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOTACKPT........";
    }
    EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);
    save_checkpoint(Transformer<float>(tiny_config()), path);
    const auto full = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full / 2);
    EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);
}

TEST(JsonConfig, RoundTrips) {
    ModelConfig c = tiny_config(PosScheme::Alibi, 77);
    EXPECT_EQ(model_config_from_json(to_json(c)), c);
    ToyCorpusSpec s;
    s.task = ToyTask::LocalReorder;
    s.window = 4;
    EXPECT_EQ(corpus_from_json(to_json(s)), s);
    TrainConfig t;
    t.steps = 17;
    t.lr = 1e-4;
    EXPECT_EQ(train_config_from_json(to_json(t)), t);
    const RoleLengths r{3, 2, 1};
    EXPECT_EQ(roles_from_json(to_json(r)), r);
    // absent keys keep defaults
    EXPECT_EQ(model_config_from_json(json::object(), c), c);
}

TEST(TraceJson, OneLinePerStepPlusHeader) {
    const Transformer<double> m(tiny_config());
    EngineOptions eo;
    eo.forced_output = {20, 21, special::kEos};
    const auto tr = run_stream(m, iota_tokens(3), PolicySpec::wait_k(1), Strategy::expost(2), eo);
    const auto text = serialize_trace(tr);
    const auto lines = static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
    EXPECT_EQ(lines, tr.steps.size() + 1);
    const auto head = json::parse(text.substr(0, text.find('\n')));
    EXPECT_EQ(head["strategy"], "expost");
    EXPECT_EQ(head["output"].get<std::vector<int>>(), (std::vector<int>{20, 21, special::kEos}));
}
