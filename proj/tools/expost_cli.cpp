// Command-line driver: verification suite, strategy comparison, slot sweep,
// toy training, traced demo and layout dumps.
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "expost/expost.hpp"

namespace fs = std::filesystem;
using namespace expost;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPropertyFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    ModelConfig model;
    ToyCorpusSpec corpus;
    TrainConfig train;
    RoleLengths roles{2, 1, 1};
    std::string strategy = "expost";
    PolicySpec policy = PolicySpec::wait_k(3);
    int train_slot = 16;
    std::optional<int> infer_slot;
    std::uint64_t seed = 1;
    std::string out;

    int inference_slot() const { return infer_slot.value_or(train_slot); }

    RunConfig() {
        model.d_model = 64;
        model.n_heads = 4;
        model.n_layers = 2;
        model.d_ff = 128;
        model.vocab_size = 64;
        model.max_position = 1024;
    }
};

/// "N" or "N,infer=M".
void parse_lslot(const std::string& s, RunConfig& rc) {
    const auto comma = s.find(',');
    try {
        std::size_t used = 0;
        const std::string head = s.substr(0, comma);
        rc.train_slot = std::stoi(head, &used);
        if (used != head.size()) throw UsageError("");
        if (comma != std::string::npos) {
            const std::string rest = s.substr(comma + 1);
            if (!rest.starts_with("infer=")) throw UsageError("");
            const std::string m = rest.substr(6);
            rc.infer_slot = std::stoi(m, &used);
            if (used != m.size()) throw UsageError("");
        }
    } catch (const std::exception&) {
        throw UsageError("--lslot expects N or N,infer=M, got '" + s + "'");
    }
    if (rc.train_slot < 1 || rc.inference_slot() < 1) throw UsageError("slot lengths must be >= 1");
}

std::vector<int> parse_int_list(const std::string& s, char sep) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("not an integer: '" + item + "'");
        }
    }
    return out;
}

std::vector<TokenId> parse_tokens(const std::string& s) {
    auto v = parse_int_list(s, ' ');
    if (v.size() == 1 && s.find(',') != std::string::npos) v = parse_int_list(s, ',');
    return {v.begin(), v.end()};
}

RoleLengths parse_roles(const std::string& s) {
    const auto v = parse_int_list(s, ',');
    if (v.size() != 3 || v[0] < 0 || v[1] < 0 || v[2] < 0) throw UsageError("--roles expects P,U,A with non-negative lengths");
    return {v[0], v[1], v[2]};
}

void load_config_file(const std::string& path, RunConfig& rc) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot read config file " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw UsageError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (j.contains("model")) rc.model = model_config_from_json(j["model"], rc.model);
    if (j.contains("corpus")) rc.corpus = corpus_from_json(j["corpus"], rc.corpus);
    if (j.contains("train")) rc.train = train_config_from_json(j["train"], rc.train);
    if (j.contains("roles")) rc.roles = roles_from_json(j["roles"], rc.roles);
    if (j.contains("strategy")) rc.strategy = j["strategy"].get<std::string>();
    if (j.contains("policy")) rc.policy = PolicySpec::parse(j["policy"].get<std::string>());
    if (j.contains("lslot")) parse_lslot(j["lslot"].get<std::string>(), rc);
    if (j.contains("seed")) rc.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("out")) rc.out = j["out"].get<std::string>();
}

json config_echo(const RunConfig& rc) {
    json j = {{"model", to_json(rc.model)}, {"corpus", to_json(rc.corpus)}, {"train", to_json(rc.train)},
              {"roles", to_json(rc.roles)}, {"strategy", rc.strategy},     {"policy", rc.policy.to_string()},
              {"train_slot", rc.train_slot}, {"infer_slot", rc.inference_slot()}, {"seed", rc.seed}};
    return j;
}

std::string git_revision() {
    std::array<char, 128> buf{};
    std::string out;
    std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen("git rev-parse HEAD 2>/dev/null", "r"), pclose);
    if (!pipe) return "unknown";
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe.get())) out += buf.data();
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

/// Writes `name` under the run directory when one was given.
void write_output(const RunConfig& rc, const std::string& name, const std::string& text) {
    if (rc.out.empty()) return;
    fs::create_directories(rc.out);
    std::ofstream os(fs::path(rc.out) / name, std::ios::binary);
    os << text;
    if (!os) throw std::runtime_error("cannot write " + (fs::path(rc.out) / name).string());
}

void write_manifest(const RunConfig& rc, const std::string& command, json extra = json::object()) {
    json m = {{"command", command}, {"config", config_echo(rc)}, {"git_revision", git_revision()}, {"seed", rc.seed}};
    for (auto& [k, v] : extra.items()) m[k] = v;
    write_output(rc, "manifest.json", m.dump(2) + "\n");
}

Transformer<float> model_for(const RunConfig& rc, const std::string& checkpoint) {
    if (!checkpoint.empty()) return load_checkpoint<float>(checkpoint);
    return Transformer<float>(rc.model);
}

std::vector<SentencePair> held_out(const RunConfig& rc, int n) { return make_corpus(rc.corpus, rc.corpus.size, n); }

// ---- subcommands --------------------------------------------------------

int cmd_verify(const RunConfig& rc, bool quick, const std::string& fault) {
    if (!fault.empty() && fault != "naive-reuse" && fault != "mask-bit")
        throw UsageError("unknown fault '" + fault + "' (known: naive-reuse, mask-bit)");
    SuiteOptions opt;
    opt.quick = quick;
    opt.fault = fault;
    opt.seed = rc.seed;
    std::ostringstream csv;
    csv << "id,property,passed,worst\n";
    bool ok = true;
    run_suite(opt, [&](const PropertyResult& r) {
        std::printf("%-4d %-38s %s  worst=%-12g %s\n", r.id, r.name.c_str(), r.passed ? "PASS" : "FAIL", r.worst, r.detail.c_str());
        std::fflush(stdout);
        csv << r.id << ',' << r.name << ',' << (r.passed ? 1 : 0) << ',' << std::setprecision(10) << r.worst << '\n';
        ok = ok && r.passed;
    });
    write_output(rc, "verify.csv", csv.str());
    write_manifest(rc, "verify", {{"quick", quick}, {"fault", fault}, {"passed", ok}});
    return ok ? kExitOk : kExitPropertyFailure;
}

int cmd_compare(const RunConfig& rc, const std::vector<std::string>& strategies_in, bool strategy_given,
                const std::vector<std::string>& policies_in, const std::string& sweep, const std::string& checkpoint, int pairs) {
    std::vector<std::string> strategies;
    for (const auto& s : strategies_in)
        if (!s.empty()) strategies.push_back(s);
    if (!strategy_given) strategies = {"expost", "conversational", "recompute"};
    std::vector<PolicySpec> policies;
    for (const auto& p : policies_in) policies.push_back(PolicySpec::parse(p));
    if (sweep == "wait-k")
        for (int k : {1, 3, 5, 7}) policies.push_back(PolicySpec::wait_k(k));
    else if (sweep == "read-n")
        for (int n : {3, 5, 7, 9, 11, 13}) policies.push_back(PolicySpec::read_n(n));
    else if (!sweep.empty())
        throw UsageError("--sweep must be wait-k or read-n");
    if (policies.empty()) policies.push_back(rc.policy);
    for (const auto& s : strategies) Strategy::parse(s, rc.inference_slot()); // reject typos before any work

    const auto model = model_for(rc, checkpoint);
    const auto data = held_out(rc, pairs);
    std::ostringstream csv;
    csv << RunRow::csv_header() << '\n';
    for (const auto& sname : strategies) {
        const Strategy strat = Strategy::parse(sname, rc.inference_slot());
        for (const auto& pol : policies) {
            const auto ev = evaluate(model, data, pol, strat, rc.roles);
            RunRow row{sname, pol.kind == PolicyKind::WaitK ? "wait-k" : "read-n", pol.parameter(), ev.laal, ev.cum_flops / 1e9,
                       ev.accuracy};
            csv << row.csv() << '\n';
        }
    }
    std::cout << csv.str();
    write_output(rc, "compare.csv", csv.str());
    write_manifest(rc, "compare", {{"checkpoint", checkpoint}, {"pairs", pairs}});
    return kExitOk;
}

int cmd_slot_sweep(const RunConfig& rc, const std::string& grid_s, bool no_train, int pairs) {
    const auto grid = parse_int_list(grid_s, ',');
    if (grid.empty()) throw UsageError("--grid needs at least one slot length");
    for (int L : grid)
        if (L < 1) throw UsageError("slot lengths must be >= 1");
    const auto data = held_out(rc, pairs);
    const Transformer<float> init(rc.model);
    std::ostringstream csv;
    csv << "L_slot,avg_len,accuracy\n" << std::setprecision(10);
    for (int L : grid) {
        csv << L << ',' << avg_sequence_length(rc.corpus, L, rc.roles, rc.policy) << ',';
        if (!no_train) {
            const auto tr = train(init, rc.corpus, L, rc.policy, rc.roles, TrainVariant::Full, rc.train);
            csv << evaluate(tr.model, data, rc.policy, Strategy::expost(L), rc.roles).accuracy;
        }
        csv << '\n';
        std::cerr << "L_slot=" << L << " done\n";
    }
    std::cout << csv.str();
    write_output(rc, "slot_sweep.csv", csv.str());
    write_manifest(rc, "slot-sweep", {{"grid", grid}, {"trained", !no_train}, {"pairs", pairs}});
    return kExitOk;
}

int cmd_train(const RunConfig& rc, const std::string& variant_s, int pairs) {
    TrainVariant v;
    if (variant_s == "full") v = TrainVariant::Full;
    else if (variant_s == "no-mask") v = TrainVariant::NoMask;
    else if (variant_s == "no-slot") v = TrainVariant::NoSlot;
    else throw UsageError("--variant must be full, no-mask or no-slot");
    const Transformer<float> init(rc.model);
    std::ostringstream loss_csv;
    loss_csv << "step,loss\n" << std::setprecision(10);
    const auto tr = train(init, rc.corpus, rc.train_slot, rc.policy, rc.roles, v, rc.train, [&](int step, double loss) {
        loss_csv << step << ',' << loss << '\n';
        if (step % 100 == 0) std::cerr << "step " << step << " loss " << loss << '\n';
    });
    const Strategy strat = v == TrainVariant::NoSlot ? Strategy::naive_reuse() : Strategy::expost(rc.inference_slot());
    const auto ev = evaluate(tr.model, held_out(rc, pairs), rc.policy, strat, rc.roles, eval_visibility(v));
    std::ostringstream eval_csv;
    eval_csv << "variant,train_slot,infer_slot,token_accuracy,laal,cum_gflops\n"
             << std::setprecision(10) << variant_s << ',' << rc.train_slot << ',' << rc.inference_slot() << ',' << ev.accuracy << ','
             << ev.laal << ',' << ev.cum_flops / 1e9 << '\n';
    std::cout << eval_csv.str();
    if (!rc.out.empty()) {
        fs::create_directories(rc.out);
        save_checkpoint(tr.model, (fs::path(rc.out) / "model.ckpt").string());
    }
    write_output(rc, "loss.csv", loss_csv.str());
    write_output(rc, "eval.csv", eval_csv.str());
    write_manifest(rc, "train", {{"variant", variant_s}, {"pairs", pairs}});
    return kExitOk;
}

int cmd_demo(const RunConfig& rc, const std::string& source_s, const std::string& target_s, const std::string& checkpoint) {
    const auto source = parse_tokens(source_s);
    if (source.empty()) throw UsageError("--source needs at least one token id");
    const auto model = model_for(rc, checkpoint);
    EngineOptions eo;
    eo.roles = rc.roles;
    eo.forced_output = parse_tokens(target_s);
    if (!eo.forced_output.empty() && eo.forced_output.back() != special::kEos) eo.forced_output.push_back(special::kEos);
    for (TokenId t : source)
        if (t < 0 || t >= model.config().vocab_size) throw UsageError("source token out of vocabulary: " + std::to_string(t));
    const auto trace = run_stream(model, source, rc.policy, Strategy::parse(rc.strategy, rc.inference_slot()), eo);
    const std::string text = render_trace(trace);
    std::cout << text;
    write_output(rc, "demo.txt", text);
    write_output(rc, "trace.jsonl", serialize_trace(trace));
    write_manifest(rc, "demo", {{"source", source}});
    return kExitOk;
}

int cmd_layout(const RunConfig& rc, const std::string& source_s, const std::string& target_s, bool contiguous, bool show_mask) {
    const auto source = parse_tokens(source_s);
    if (source.empty()) throw UsageError("--source needs at least one token id");
    SentencePair pair{source, target_s.empty() ? source : parse_tokens(target_s)};
    SampleOptions so;
    so.layout = contiguous ? TrainLayout::Contiguous : TrainLayout::Slot;
    const auto s = build_training_sequence(pair, rc.train_slot, rc.policy, rc.roles, so);
    std::string text = s.layout.serialize();
    if (show_mask) text += "\n" + s.mask.dump();
    std::cout << text;
    write_output(rc, "layout.txt", text);
    write_manifest(rc, "layout", {{"contiguous", contiguous}});
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Streaming decoder with pre-allocated position slots: verification and toy experiments"};
    app.require_subcommand(1);

    RunConfig rc;
    std::string config_path, strategy_flag, policy_flag, lslot_flag, roles_flag, out_flag;
    std::uint64_t seed_flag = 0;
    int steps_flag = -1;
    bool quick = false;
    std::string fault;

    auto common = [&](CLI::App* sc) {
        sc->add_option("--config", config_path, "JSON run config (model, corpus, train, roles, strategy, policy, lslot, seed, out)");
        sc->add_option("--policy", policy_flag, "wait-k:K or read-n:N[,cap]");
        sc->add_option("--lslot", lslot_flag, "training slot length N, optionally N,infer=M");
        sc->add_option("--roles", roles_flag, "role block lengths P,U,A");
        sc->add_option("--seed", seed_flag, "seed for model init and batch sampling");
        sc->add_option("--out", out_flag, "run directory for CSV, manifest and checkpoints");
        sc->add_option("--steps", steps_flag, "training steps");
        sc->add_flag("--quick", quick, "reduced trial counts and training budget");
    };

    auto* verify = app.add_subcommand("verify", "run the invariant suite");
    common(verify);
    verify->add_option("--inject-fault", fault, "naive-reuse or mask-bit");

    std::vector<std::string> strategies, policies;
    std::string sweep, checkpoint;
    int pairs = 200;
    auto* compare = app.add_subcommand("compare", "accuracy, LAAL and GFLOPs per strategy and policy");
    common(compare);
    compare->add_option("--strategy", strategies, "expost, recompute, naive-reuse, conversational, grouped")->delimiter(',');
    compare->add_option("--policies", policies, "extra policies, repeatable");
    compare->add_option("--sweep", sweep, "wait-k (k=1,3,5,7) or read-n (n=3..13)");
    compare->add_option("--checkpoint", checkpoint, "model checkpoint; default is a freshly initialised model");
    compare->add_option("--pairs", pairs, "held-out pairs");

    std::string grid = "4,8,16,32,64,128";
    bool no_train = false;
    auto* sweep_cmd = app.add_subcommand("slot-sweep", "average training length and accuracy per slot length");
    common(sweep_cmd);
    sweep_cmd->add_option("--grid", grid, "comma-separated slot lengths");
    sweep_cmd->add_flag("--no-train", no_train, "only count sequence lengths");
    sweep_cmd->add_option("--pairs", pairs, "held-out pairs");

    std::string variant = "full";
    auto* train_cmd = app.add_subcommand("train", "train on the toy corpus and write a checkpoint");
    common(train_cmd);
    train_cmd->add_option("--variant", variant, "full, no-mask or no-slot");
    train_cmd->add_option("--pairs", pairs, "held-out pairs for the final evaluation");

    std::string source, target;
    auto* demo = app.add_subcommand("demo", "print the step-by-step positions of one stream");
    common(demo);
    demo->add_option("--strategy", strategy_flag, "streaming strategy");
    demo->add_option("--source", source, "source token ids, space or comma separated")->required();
    demo->add_option("--target", target, "teacher-forced output token ids");
    demo->add_option("--checkpoint", checkpoint, "model checkpoint");

    bool contiguous = false, show_mask = false;
    auto* layout = app.add_subcommand("layout", "print a training layout as `index tag token position`");
    common(layout);
    layout->add_option("--source", source, "source token ids")->required();
    layout->add_option("--target", target, "target token ids (default: the source)");
    layout->add_flag("--contiguous", contiguous, "contiguous layout instead of slots");
    layout->add_flag("--mask", show_mask, "also print the attention mask");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (!config_path.empty()) load_config_file(config_path, rc);
        if (!policy_flag.empty()) rc.policy = PolicySpec::parse(policy_flag);
        if (!lslot_flag.empty()) parse_lslot(lslot_flag, rc);
        if (!roles_flag.empty()) rc.roles = parse_roles(roles_flag);
        if (!strategy_flag.empty()) rc.strategy = strategy_flag;
        if (!out_flag.empty()) rc.out = out_flag;
        for (auto* sc : app.get_subcommands())
            if (sc->count("--seed")) rc.seed = seed_flag;
        rc.model.seed = rc.seed;
        rc.train.seed = rc.seed;
        if (quick) {
            rc.train.steps = std::min(rc.train.steps, 200);
            pairs = std::min(pairs, 40);
        }
        if (steps_flag >= 0) rc.train.steps = steps_flag;
        rc.model.validate();
        rc.corpus.validate();
        if (rc.corpus.vocab_size > rc.model.vocab_size) throw UsageError("corpus vocabulary exceeds model vocabulary");
        if (pairs < 1) throw UsageError("--pairs must be >= 1");

        if (verify->parsed()) return cmd_verify(rc, quick, fault);
        if (compare->parsed()) return cmd_compare(rc, strategies, compare->count("--strategy") > 0, policies, sweep, checkpoint, pairs);
        if (sweep_cmd->parsed()) return cmd_slot_sweep(rc, grid, no_train, pairs);
        if (train_cmd->parsed()) return cmd_train(rc, variant, pairs);
        if (demo->parsed()) return cmd_demo(rc, source, target, checkpoint);
        if (layout->parsed()) return cmd_layout(rc, source, target, contiguous, show_mask);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const PolicyError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitPropertyFailure;
    }
    return kExitUsage;
}
