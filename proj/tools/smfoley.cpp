// smfoley: data generation, training, sampling and evaluation from one binary.
//
// Exit codes: 0 ok, 1 other failure, 2 configuration or shape error,
// 3 unreadable / malformed input or unwritable output, 4 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "smfoley/smfoley.hpp"

namespace {

using namespace smfoley;

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;

    RunConfig load() const {
        RunConfig rc;
        std::string path = config_path;
        if (path.empty()) {
            if (const char* env = std::getenv("SMFOLEY_CONFIG"); env && *env) path = env;
        }
        if (!path.empty()) {
            rc = parse_config(read_config_text(path));
        }
        if (seed) rc.seed = *seed;
        rc.resolve();
        return rc;
    }

    static std::string read_config_text(const std::string& path) {
        try {
            return read_file(path);
        } catch (const IoError&) {
            throw IoError("cannot read config file " + path);
        }
    }
};

void check_dataset_matches(const Dataset& ds, const RunConfig& rc) {
    const auto& d = ds.config;
    if (d.vocab != rc.model.vocab || !(d.geometry.F() == rc.model.F() && d.geometry.T() == rc.model.T()) ||
        d.feature_dim != rc.model.condition_dim) {
        throw ConfigError("dataset (vocab " + std::to_string(d.vocab) + ", feature dim " + std::to_string(d.feature_dim) +
                          ", grid " + std::to_string(d.geometry.F()) + "x" + std::to_string(d.geometry.T()) +
                          ") does not match the model configuration");
    }
}

BackboneParams load_backbone(const std::string& path, const RunConfig* rc) {
    auto ck = load_checkpoint(path);
    if (rc && !(ck.backbone.config == rc->model)) {
        throw ConfigError("backbone checkpoint " + path + " was trained with a different model configuration");
    }
    return std::move(ck.backbone);
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    int count = 2000;
    std::optional<std::uint64_t> data_seed;
};

int cmd_gen_data(const Common& common, const GenDataArgs& a) {
    auto rc = common.load();
    if (a.data_seed) rc.data.seed = *a.data_seed;
    const auto ds = make_dataset(rc.data, a.count);
    write_dataset(a.out, ds);
    std::cout << "records " << ds.records.size() << "\nconfig_hash " << std::hex << config_hash(rc) << std::dec << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string phase = "pretrain";
    std::string data;
    std::string out;
    std::string backbone;
    std::string resume;
    std::string log;
    long stop_at = -1;
    long progress_every = 500;
};

/// Keeps the header and the rows of steps before `step` from an existing loss log.
std::string truncated_log(const std::string& path, long step) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read loss log " + path + " to resume");
    std::string line;
    std::string out = loss_csv_header();
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stol(line.substr(0, line.find(','))) < step) out += line + '\n';
    }
    return out;
}

int cmd_train(const Common& common, const TrainArgs& a) {
    const auto rc = common.load();
    const Phase phase = phase_from_string(a.phase);
    const TrainConfig& tc = rc.train(phase);

    if (phase == Phase::train_controlnet && a.backbone.empty() && a.resume.empty()) {
        throw ConfigError("--phase controlnet needs --backbone (or --resume)");
    }
    const auto ds = read_dataset(a.data);
    check_dataset_matches(ds, rc);
    const TrainingSet set(ds);

    TrainState state;
    if (!a.resume.empty()) {
        state = state_from_checkpoint(load_checkpoint(a.resume), phase);
        if (!(state.backbone.config == rc.model)) throw ConfigError("resume checkpoint has a different model configuration");
    } else if (phase == Phase::pretrain_backbone) {
        state = init_pretrain_state(rc.model, tc.seed);
    } else {
        state = init_controlnet_state(load_backbone(a.backbone, &rc), rc.n_copy, rc.data.feature_dim, rc.conv_kernel, tc.seed);
    }

    std::ofstream log;
    if (!a.log.empty()) {
        const std::string head = a.resume.empty() ? loss_csv_header() : truncated_log(a.log, state.step());
        log.open(a.log, std::ios::binary | std::ios::trunc);
        if (!log) throw IoError("cannot write loss log " + a.log);
        log << head;
    }

    RunOptions opts;
    opts.stop_at = a.stop_at;
    opts.on_step = [&](const StepResult& r) {
        if (log.is_open()) log << loss_csv_row(r);
        if (a.progress_every > 0 && (r.step + 1) % a.progress_every == 0) {
            std::cerr << to_string(phase) << " step " << r.step + 1 << "/" << tc.total_steps << " loss " << r.loss << '\n';
        }
    };
    opts.on_checkpoint = [&](const TrainState& s) {
        log.flush();
        save_checkpoint(a.out, s.checkpoint());
    };
    run_training(set, tc, state, opts);
    if (log.is_open()) {
        log.flush();
        if (!log) throw IoError("failed writing loss log " + a.log);
    }
    save_checkpoint(a.out, state.checkpoint());
    std::cout << "phase " << to_string(phase) << "\nsteps " << state.step() << "\ncheckpoint " << a.out << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string backbone;
    std::string controlnet;
    std::string data;
    int record = 0;
    std::optional<int> steps;
    std::optional<double> cfg_max;
    std::optional<double> gumbel;
    bool greedy_final = false;
    std::string mode;
    std::string trace;
    std::string out;
};

struct LoadedModels {
    BackboneParams backbone;
    std::optional<ControlNetParams> controlnet;
};

LoadedModels load_models(const std::string& backbone_path, const std::string& controlnet_path) {
    LoadedModels m;
    if (backbone_path.empty() && controlnet_path.empty()) throw ConfigError("need --backbone and/or --controlnet");
    if (!backbone_path.empty()) {
        m.backbone = load_backbone(backbone_path, nullptr);
        if (!controlnet_path.empty()) m.controlnet = load_controlnet(controlnet_path, m.backbone);
    } else {
        auto ck = load_checkpoint(controlnet_path);
        if (!ck.controlnet) throw FormatError(controlnet_path + " has no controlnet section");
        m.backbone = std::move(ck.backbone);
        m.controlnet = std::move(ck.controlnet);
    }
    return m;
}

int cmd_sample(const Common& common, const SampleArgs& a) {
    const auto rc = common.load();
    auto models = load_models(a.backbone, a.controlnet);
    const auto& bb = models.backbone;
    const ControlNetParams* cn = models.controlnet ? &*models.controlnet : nullptr;

    SamplerConfig sc = rc.sampler;
    if (a.steps) sc.steps = *a.steps;
    if (a.cfg_max) sc.cfg_max = *a.cfg_max;
    if (a.gumbel) sc.gumbel_temp = *a.gumbel;
    if (a.greedy_final) sc.greedy_final = true;
    sc.validate();
    const Guidance mode = a.mode.empty() ? (cn ? Guidance::multi : Guidance::backbone_uncond) : guidance_from_string(a.mode);

    ConditionEmbedding prompt = bb.unconditional();
    std::optional<AlignedControlGrid> grid;
    if (!a.data.empty()) {
        const auto ds = read_dataset(a.data);
        if (a.record < 0 || a.record >= static_cast<int>(ds.records.size())) {
            throw ArgumentError("--data-record " + std::to_string(a.record) + " is out of range");
        }
        const auto& rec = ds.records[static_cast<std::size_t>(a.record)];
        if (rec.prompt.cols() != bb.config.condition_dim || ds.config.vocab != bb.config.vocab) {
            throw ConfigError("dataset does not match the checkpoint's model configuration");
        }
        prompt = ConditionEmbedding::prompt(rec.prompt);
        if (cn) grid = align_features(*cn, fuse_semantic(rec.sync, rec.semantic), bb.config.F());
    } else if (mode != Guidance::backbone_uncond) {
        throw ConfigError("guided sampling needs --data for the control features and prompt");
    }

    Rng rng(derive_seed(rc.seed, 0x5a3b, static_cast<std::uint64_t>(a.record)));
    std::vector<StepTrace> trace;
    const auto map = generate(bb, cn, prompt, grid ? &*grid : nullptr, sc, rng, mode, &trace);

    write_text_file(a.out + ".csv", to_csv(map));
    write_text_file(a.out + ".pgm", to_pgm(map));
    if (!a.trace.empty()) write_text_file(a.trace, trace_csv(trace));
    std::cout << "mode " << to_string(mode) << "\nsteps " << sc.steps << "\ntokens " << a.out << ".csv\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::vector<std::string> checkpoints;
    std::string data;
    std::string report;
    int clips = 200;
    bool sweep = false;
    bool ablation = false;
    std::optional<int> steps;
};

int cmd_eval(const Common& common, const EvalArgs& a) {
    const auto rc = common.load();
    const auto ds = read_dataset(a.data);
    std::vector<ReportRow> rows;
    for (const auto& path : a.checkpoints) {
        auto ck = load_checkpoint(path);
        if (ck.backbone.config.vocab != ds.config.vocab || ck.backbone.config.condition_dim != ds.config.feature_dim) {
            throw ConfigError("checkpoint " + path + " does not match the dataset");
        }
        AblationOptions o;
        o.sampler = rc.sampler;
        if (a.steps) o.sampler.steps = *a.steps;
        o.clips = a.clips;
        o.seed = rc.seed;
        const bool has_cn = ck.controlnet.has_value();
        o.include_backbone = !has_cn || a.ablation;
        o.include_controlnet = true;
        o.include_single_cfg = a.ablation;
        o.include_sweep = a.sweep;
        const ControlNetParams* cn = has_cn ? &*ck.controlnet : nullptr;
        for (auto r : ablation_report(ck.backbone, cn, ds, o)) rows.push_back(std::move(r));
    }
    const auto csv = report_csv(rows);
    std::cout << csv;
    if (!a.report.empty()) {
        write_text_file(a.report + ".csv", csv);
        write_text_file(a.report + ".json", report_json(rows, std::min<int>(a.clips, static_cast<int>(ds.records.size()))).dump(2) + "\n");
        if (a.sweep) write_text_file(a.report + "_sweep.csv", sweep_series_csv(rows));
    }
    return 0;
}

// ---------------------------------------------------------------------------

int run_guarded(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ArgumentError& e) {
        std::cerr << "argument error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const StateError& e) {
        std::cerr << "state error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const DegenerateInputError& e) {
        std::cerr << "degenerate input: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

std::string config_keys_help() {
    RunConfig rc;
    return "Configuration keys (INI file via --config or $SMFOLEY_CONFIG), with defaults:\n\n" + dump_config(rc);
}

}  // namespace

int main(int argc, char** argv) {
    smfoley::tune_allocator();
    CLI::App app{"Masked-token foley synthesis with a ControlNet branch: synthetic data, training, sampling, evaluation."};
    app.require_subcommand(1);
    app.footer(config_keys_help());
    app.option_defaults()->always_capture_default();

    Common common;
    app.add_option("--config", common.config_path, "INI run configuration (default: $SMFOLEY_CONFIG, else built-in defaults)");
    app.add_option("--seed", common.seed, "override run.seed (master seed for every derived generator)");

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset file");
    gen_cmd->add_option("--out", gen.out, "dataset file to write")->required();
    gen_cmd->add_option("--count", gen.count, "number of records")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--data-seed", gen.data_seed, "override data.seed (e.g. for a held-out split)");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "train the backbone (pretrain) or the controlnet branch with a frozen backbone");
    train_cmd->add_option("--phase", train.phase, "pretrain | controlnet")->check(CLI::IsMember({"pretrain", "controlnet"}));
    train_cmd->add_option("--data", train.data, "dataset file")->required();
    train_cmd->add_option("--out", train.out, "checkpoint to write")->required();
    train_cmd->add_option("--backbone", train.backbone, "pretrained backbone checkpoint (controlnet phase)");
    train_cmd->add_option("--resume", train.resume, "checkpoint to continue from (optimizer state included)");
    train_cmd->add_option("--log", train.log, "loss CSV (step,lr,loss,cond_dropped); truncated to the resume step");
    train_cmd->add_option("--stop-at", train.stop_at, "stop before this step and checkpoint (-1: run to the end)");
    train_cmd->add_option("--progress-every", train.progress_every, "print a progress line every N steps (0: never)");

    SampleArgs sample;
    auto* sample_cmd = app.add_subcommand("sample", "generate one token map");
    sample_cmd->add_option("--backbone", sample.backbone, "backbone checkpoint");
    sample_cmd->add_option("--controlnet", sample.controlnet, "controlnet checkpoint (its backbone hash must match)");
    sample_cmd->add_option("--data", sample.data, "dataset supplying control features and prompt");
    sample_cmd->add_option("--data-record", sample.record, "record index in --data");
    sample_cmd->add_option("--steps", sample.steps, "decoding steps (config default 12, as published)");
    sample_cmd->add_option("--cfg-max", sample.cfg_max, "final guidance scale; rises linearly from 0 (published: 3)");
    sample_cmd->add_option("--gumbel", sample.gumbel, "initial Gumbel temperature, annealed to 0 (published: 9)");
    sample_cmd->add_flag("--greedy-final", sample.greedy_final, "argmax instead of sampling at the last step");
    sample_cmd->add_option("--mode", sample.mode, "multi_cfg | cfg_without_video | cfg_without_text_video | backbone_uncond");
    sample_cmd->add_option("--trace", sample.trace, "per-step CSV trace (masked counts, guidance scale, temperature)");
    sample_cmd->add_option("--out", sample.out, "output prefix; writes PREFIX.csv and PREFIX.pgm")->required();

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "ablation / step-sweep report over held-out clips");
    eval_cmd->add_option("--checkpoints", eval.checkpoints, "backbone or controlnet checkpoints, one report row each")->required();
    eval_cmd->add_option("--data", eval.data, "held-out dataset")->required();
    eval_cmd->add_option("--report", eval.report, "output prefix; writes PREFIX.csv, PREFIX.json (and PREFIX_sweep.csv)");
    eval_cmd->add_option("--clips", eval.clips, "held-out clips to generate per row")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--steps", eval.steps, "override sampler.steps");
    eval_cmd->add_flag("--sweep", eval.sweep, "add multi-CFG rows for 1, 4, 6, 8, 12, 16 steps");
    eval_cmd->add_flag("--ablation", eval.ablation, "add backbone-only and single-delta guidance rows");

    auto* show_cmd = app.add_subcommand("show-config", "print the resolved configuration with notes on each default");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    return run_guarded([&] {
        if (*gen_cmd) return cmd_gen_data(common, gen);
        if (*train_cmd) return cmd_train(common, train);
        if (*sample_cmd) return cmd_sample(common, sample);
        if (*eval_cmd) return cmd_eval(common, eval);
        if (*show_cmd) {
            auto rc = common.load();
            std::cout << dump_config(rc);
            return 0;
        }
        return 1;
    });
}
