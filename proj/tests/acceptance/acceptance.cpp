// One PASS/FAIL line per acceptance criterion. Exit status 1 if any fails.
#include <cstdio>
#include <cstring>
#include <string>

#include "expost/expost.hpp"

using namespace expost;

static void print(const PropertyResult& r) {
    std::printf("CRITERION %d %s  %s (%.1fs): %s\n", r.id, r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    std::fflush(stdout);
}

int main(int argc, char** argv) {
    SuiteOptions opt;
    bool skip_training = false;
    for (int i = 1; i < argc; ++i) {
        if (!std::strcmp(argv[i], "--quick")) opt.quick = true;
        else if (!std::strcmp(argv[i], "--skip-training")) skip_training = true;
        else {
            std::fprintf(stderr, "usage: %s [--quick] [--skip-training]\n", argv[0]);
            return 2;
        }
    }
    bool ok = true;
    for (const auto& r : run_suite(opt, print)) ok = ok && r.passed;
    if (skip_training) return ok ? 0 : 1;

    const auto t0 = std::chrono::steady_clock::now();
    StudyConfig sc;
    if (opt.quick) {
        sc.train.steps = 200;
        sc.eval_pairs = 40;
    }
    const auto study = training_study(sc, [](const std::string& line) { std::printf("  %s\n", line.c_str()); std::fflush(stdout); });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto r9 = check_training_efficacy(study);
    auto r10 = check_slot_mismatch(study, sc.train_slot);
    r9.seconds = r10.seconds = secs;
    print(r9);
    print(r10);
    ok = ok && r9.passed && r10.passed;
    return ok ? 0 : 1;
}
