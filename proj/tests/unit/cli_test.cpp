#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"

using namespace expost;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(EXPOST_CLI_PATH) + " " + args + " 2>/dev/null";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int st = pclose(p);
    r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    for (std::string l; std::getline(is, l);)
        if (!l.empty()) out.push_back(l);
    return out;
}

fs::path scratch(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("expost_cli_" + name);
    fs::remove_all(d);
    return d;
}

std::vector<std::string> csv_rows(const fs::path& p) {
    auto l = lines(slurp(p));
    if (!l.empty()) l.erase(l.begin());
    return l;
}

} // namespace

TEST(Cli, VerifyQuickPasses) {
    const auto d = scratch("verify");
    const auto r = cli("verify --quick --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(fs::exists(d / "manifest.json"));
}

TEST(Cli, VerifyDetectsInjectedFaults) {
    for (const std::string fault : {"naive-reuse", "mask-bit"}) {
        const auto r = cli("verify --quick --inject-fault " + fault + " --out " + scratch("fault").string());
        EXPECT_NE(r.code, 0) << fault;
        EXPECT_NE(r.out.find("FAIL"), std::string::npos) << fault;
    }
}

TEST(Cli, CompareSweeps) {
    const auto d = scratch("compare");
    ASSERT_EQ(cli("compare --quick --sweep wait-k --out " + d.string()).code, 0);
    const auto rows = csv_rows(d / "compare.csv");
    ASSERT_EQ(rows.size(), 12u);
    for (const std::string s : {"expost", "conversational", "recompute"})
        EXPECT_EQ(std::count_if(rows.begin(), rows.end(), [&](const std::string& l) { return l.rfind(s + ",", 0) == 0; }), 4) << s;

    const auto d2 = scratch("compare_readn");
    ASSERT_EQ(cli("compare --quick --sweep read-n --strategy expost --out " + d2.string()).code, 0);
    EXPECT_EQ(csv_rows(d2 / "compare.csv").size(), 6u);

    const auto d3 = scratch("compare_empty");
    ASSERT_EQ(cli("compare --quick --strategy \"\" --out " + d3.string()).code, 0);
    const auto l = lines(slurp(d3 / "compare.csv"));
    ASSERT_EQ(l.size(), 1u);
    EXPECT_EQ(l[0], RunRow::csv_header());
}

TEST(Cli, SlotSweepWithoutTraining) {
    const auto d = scratch("sweep");
    ASSERT_EQ(cli("slot-sweep --no-train --out " + d.string()).code, 0);
    const auto rows = csv_rows(d / "slot_sweep.csv");
    ASSERT_EQ(rows.size(), 6u);
    std::vector<double> len;
    for (const auto& r : rows) len.push_back(std::stod(r.substr(r.find(',') + 1)));
    const auto best = std::min_element(len.begin(), len.end()) - len.begin();
    EXPECT_GT(best, 0);
    EXPECT_LT(best, 5);

    const auto d2 = scratch("sweep1");
    ASSERT_EQ(cli("slot-sweep --no-train --grid 8 --out " + d2.string()).code, 0);
    EXPECT_EQ(csv_rows(d2 / "slot_sweep.csv").size(), 1u);
}

TEST(Cli, DemoMatchesGolden) {
    const auto d = scratch("demo");
    const auto r = cli("demo --lslot 3 --policy wait-k:2 --roles 0,1,1 --source \"6 7 8 9\" --target \"10 11 12 13\" --out " + d.string());
    ASSERT_EQ(r.code, 0);
    const auto golden = slurp(fs::path(EXPOST_GOLDEN_DIR) / "wait2_demo.txt");
    EXPECT_EQ(slurp(d / "demo.txt"), golden);
    EXPECT_EQ(lines(slurp(d / "trace.jsonl")).size(), 11u); // header + 10 steps
}

TEST(Cli, TrainIsDeterministic) {
    const auto a = scratch("train_a"), b = scratch("train_b"), z = scratch("train_zero");
    ASSERT_EQ(cli("train --steps 3 --seed 4 --out " + a.string()).code, 0);
    ASSERT_EQ(cli("train --steps 3 --seed 4 --out " + b.string()).code, 0);
    EXPECT_EQ(slurp(a / "model.ckpt"), slurp(b / "model.ckpt"));
    EXPECT_EQ(lines(slurp(a / "loss.csv")).size(), 4u);

    ASSERT_EQ(cli("train --steps 0 --out " + z.string()).code, 0);
    const auto m = load_checkpoint<float>((z / "model.ckpt").string());
    EXPECT_EQ(m.parameter_hash(), Transformer<float>(m.config()).parameter_hash());
    EXPECT_NE(slurp(a / "model.ckpt"), slurp(z / "model.ckpt"));
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("bogus").code, 2);
    EXPECT_EQ(cli("compare --lslot 0 --out " + scratch("u1").string()).code, 2);
    EXPECT_EQ(cli("compare --policy wait-k:x --out " + scratch("u2").string()).code, 2);
    EXPECT_EQ(cli("demo --out " + scratch("u3").string()).code, 2);
    EXPECT_EQ(cli("train --variant half --out " + scratch("u4").string()).code, 2);
}
