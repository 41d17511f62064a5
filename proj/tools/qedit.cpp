#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "cli_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qedit;
using namespace qedit::cli;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::string world = "world.json";
    std::string stream = "stream.jsonl";
    std::string checkpoint = "model.ckpt";
};

struct Overrides {
    std::optional<std::size_t> entities, relations, facts, edits, rephrases, locality;
    std::optional<double> chain_fraction;
    std::optional<std::size_t> layers, d_model, d_ff, heads, steps, batch_size;
    std::optional<double> lr;
    std::optional<double> noise;
    std::optional<std::size_t> noise_samples, trace_facts;
    std::optional<double> capacity_pct, eta_que, eta_deq;
    std::optional<std::size_t> top_k, edit_layers, eval_every;
    std::optional<std::string> layer_mode, distance_mode, dequeue_mode;
    bool no_queue = false, no_st = false, no_topk_random = false;
};

template <class T>
void set_if(const std::optional<T>& v, T& out) {
    if (v) out = *v;
}

CliConfig effective_config(const Common& c, const Overrides& o) {
    CliConfig cfg;
    if (!c.config.empty()) cfg = config_from_json(read_json_file(c.config));
    set_if(c.seed, cfg.seed);
    set_if(o.entities, cfg.world.n_entities);
    set_if(o.relations, cfg.world.n_relations);
    set_if(o.facts, cfg.world.n_facts);
    set_if(o.edits, cfg.stream.edits);
    set_if(o.rephrases, cfg.stream.n_rephrase);
    set_if(o.locality, cfg.stream.n_locality);
    set_if(o.chain_fraction, cfg.stream.chain_fraction);
    set_if(o.layers, cfg.model.n_layers);
    set_if(o.d_model, cfg.model.d_model);
    set_if(o.d_ff, cfg.model.d_ff);
    set_if(o.heads, cfg.model.n_heads);
    set_if(o.steps, cfg.pretrain.steps);
    set_if(o.batch_size, cfg.pretrain.batch_size);
    set_if(o.lr, cfg.pretrain.lr);
    set_if(o.noise, cfg.trace.noise_scale);
    set_if(o.noise_samples, cfg.trace.noise_samples);
    set_if(o.trace_facts, cfg.trace_facts);
    auto& run = cfg.run;
    set_if(o.capacity_pct, run.queue.capacity_pct);
    set_if(o.eta_que, run.queue.eta_que);
    set_if(o.eta_deq, run.queue.eta_deq);
    set_if(o.top_k, run.queue.top_k);
    set_if(o.edit_layers, run.edit_layers);
    set_if(o.eval_every, run.eval_every);
    try {
        if (o.layer_mode) run.layer_mode = layer_mode_from_string(*o.layer_mode);
        if (o.distance_mode) run.queue.distance_mode = distance_mode_from_string(*o.distance_mode);
        if (o.dequeue_mode) run.queue.dequeue_mode = dequeue_mode_from_string(*o.dequeue_mode);
    } catch (const Error& e) {
        throw Error(ErrorKind::config, e.what());
    }
    run.no_queue = run.no_queue || o.no_queue;
    run.no_st = run.no_st || o.no_st;
    run.no_topk_random = run.no_topk_random || o.no_topk_random;
    cfg.propagate_seed();
    cfg.validate();
    return cfg;
}

fs::path resolve(const Common& c, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::path(c.out_dir) / path;
}

void make_dirs(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    make_dirs(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::io, "cannot write " + path.string());
    os << text;
    if (!os) throw Error(ErrorKind::io, "failed writing " + path.string());
}

void echo_config(const fs::path& dir, const std::string& name, const CliConfig& cfg) {
    write_text(dir / (name + ".config.json"), to_json(cfg).dump(2) + "\n");
}

int cmd_gen_data(const Common& c, const Overrides& o) {
    const CliConfig cfg = effective_config(c, o);
    make_dirs(c.out_dir);
    const SyntheticWorld world = generate_world(cfg.seed, cfg.world);
    const EditStream stream = generate_edit_stream(world, cfg.stream);
    save_world(world, resolve(c, c.world));
    save_stream(stream, resolve(c, c.stream));
    echo_config(c.out_dir, "gen-data", cfg);
    std::cout << "entities " << world.entities.size() << "\nrelations " << world.relations.size() << "\nfacts "
              << world.facts.size() << "\nvocab " << world.vocab.size() << "\nedits " << stream.samples.size()
              << "\nchain links " << stream.chain_links().size() << "\n";
    return kExitOk;
}

int cmd_pretrain(const Common& c, const Overrides& o) {
    const CliConfig cfg = effective_config(c, o);
    const SyntheticWorld world = load_world(resolve(c, c.world));
    ModelConfig mc = cfg.model;
    mc.vocab_size = world.vocab.size();
    TransformerModel model(mc);
    PretrainOptions po = cfg.pretrain;
    const std::size_t every = std::max<std::size_t>(1, po.steps / 10);
    po.on_step = [&](std::size_t step, double loss) {
        if ((step + 1) % every == 0) std::cout << "step " << step + 1 << " loss " << loss << "\n" << std::flush;
    };
    const PretrainResult r = pretrain_base(model, pretraining_corpus(world, cfg.corpus), po);
    save_checkpoint(model, resolve(c, c.checkpoint));
    std::ostringstream curve;
    curve << "step,loss\n" << std::setprecision(10);
    for (std::size_t i = 0; i < r.loss_curve.size(); ++i) curve << i + 1 << ',' << r.loss_curve[i] << '\n';
    write_text(resolve(c, "loss_curve.csv"), curve.str());
    echo_config(c.out_dir, "pretrain", cfg);
    std::cout << "fact accuracy " << fact_accuracy(model, world) << "\n";
    return kExitOk;
}

int cmd_trace(const Common& c, const Overrides& o, const std::string& subject, const std::string& relation) {
    const CliConfig cfg = effective_config(c, o);
    const SyntheticWorld world = load_world(resolve(c, c.world));
    const TransformerModel model = load_checkpoint(resolve(c, c.checkpoint));
    echo_config(c.out_dir, "trace", cfg);
    if (subject.empty() != relation.empty()) throw Error(ErrorKind::config, "give both --subject and --relation");
    if (subject.empty()) {
        const TraceSummary t = trace_memorized(model, world, cfg.trace_facts, cfg.trace);
        std::ostringstream os;
        os << "layer,subject_ie\n" << std::setprecision(10);
        for (std::size_t l = 0; l < t.subject_ie.size(); ++l) os << l << ',' << t.subject_ie[l] << '\n';
        write_text(resolve(c, "trace_summary.csv"), os.str());
        std::cout << "facts " << t.facts << "\np_clean " << t.p_clean << "\np_corrupt " << t.p_corrupt
                  << "\nselected layer " << t.selected_layer << "\nrecovered " << t.recovered << "\n";
        return kExitOk;
    }
    const auto s = world.entity_index(subject);
    const auto r = world.relation_index(relation);
    if (!s) throw Error(ErrorKind::config, "unknown subject '" + subject + "'");
    if (!r) throw Error(ErrorKind::config, "unknown relation '" + relation + "'");
    const auto f = world.find(*s, *r);
    if (!f) throw Error(ErrorKind::config, "no fact for (" + subject + ", " + relation + ")");
    const Prompt p = world.render(*s, *r, 0);
    const Token answer = world.vocab.id(world.entities[world.facts[*f].object].name);
    const TraceResult t = causal_trace(model, p.tokens, p.subject, answer, cfg.trace, p.text);
    std::ostringstream os;
    os << "layer";
    for (Token tok : p.tokens) os << ',' << world.vocab.word(tok);
    os << '\n' << std::setprecision(10);
    for (std::size_t l = 0; l < t.ie_grid.rows(); ++l) {
        os << l;
        for (std::size_t i = 0; i < t.ie_grid.cols(); ++i) os << ',' << t.ie_grid(l, i);
        os << '\n';
    }
    write_text(resolve(c, "trace.csv"), os.str());
    std::cout << "prompt " << p.text << "\np_clean " << t.p_clean << "\np_corrupt " << t.p_corrupt
              << "\nselected layer " << t.selected_layer << "\n";
    return kExitOk;
}

void write_report(const fs::path& dir, const RunReport& r, const CliConfig& cfg) {
    write_text(dir / "report.csv", r.csv());
    write_text(dir / "report.json", r.summary().dump(2) + "\n");
    echo_config(dir, "run", cfg);
}

void print_row(const RunReport& r) {
    const auto& last = r.rows.back();
    std::cout << std::left << std::setw(16) << r.variant << std::fixed << std::setprecision(3) << " rel " << last.rel
              << " gen " << last.gen << " loc " << last.loc << " avg " << last.avg << " general "
              << last.general_acc << " corrections " << r.corrections << " failed " << r.failed_edits << "\n"
              << std::defaultfloat;
}

int cmd_edit(const Common& c, const Overrides& o) {
    const CliConfig cfg = effective_config(c, o);
    const SyntheticWorld world = load_world(resolve(c, c.world));
    const EditStream stream = load_stream(resolve(c, c.stream));
    TransformerModel model = load_checkpoint(resolve(c, c.checkpoint));
    const RunReport r = run_sme(model, world, stream, cfg.run);
    write_report(resolve(c, "runs") / r.variant, r, cfg);
    print_row(r);
    for (const auto& f : r.failures) std::cerr << f << "\n";
    return r.degraded ? kExitDegraded : kExitOk;
}

int cmd_ablate(const Common& c, const Overrides& o) {
    const CliConfig cfg = effective_config(c, o);
    const SyntheticWorld world = load_world(resolve(c, c.world));
    const EditStream stream = load_stream(resolve(c, c.stream));
    const TransformerModel model = load_checkpoint(resolve(c, c.checkpoint));
    const auto reports = run_ablations(model, world, stream, cfg.run);
    std::ostringstream os;
    os << "variant,rel,gen,loc,avg,general_acc,general_acc_delta,corrections,failed_edits\n" << std::setprecision(6)
       << std::fixed;
    bool degraded = false;
    for (const auto& r : reports) {
        write_report(resolve(c, "runs") / r.variant, r, cfg);
        const auto& last = r.rows.back();
        os << r.variant << ',' << last.rel << ',' << last.gen << ',' << last.loc << ',' << last.avg << ','
           << last.general_acc << ',' << last.general_acc - r.general_acc_t0 << ',' << r.corrections << ','
           << r.failed_edits << '\n';
        print_row(r);
        degraded = degraded || r.degraded;
    }
    write_text(resolve(c, "ablation.csv"), os.str());
    return degraded ? kExitDegraded : kExitOk;
}

int cmd_report(const Common& c, const std::string& runs_dir) {
    const fs::path dir = resolve(c, runs_dir);
    if (!fs::is_directory(dir)) throw Error(ErrorKind::io, "no run directory " + dir.string());
    std::map<std::string, json> runs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const fs::path summary = entry.path() / "report.json";
        if (entry.is_directory() && fs::exists(summary)) {
            try {
                runs[entry.path().filename().string()] = read_json_file(summary);
            } catch (const Error& e) {
                throw Error(ErrorKind::parse, e.what());
            }
        }
    }
    if (runs.empty()) throw Error(ErrorKind::io, "no reports under " + dir.string());

    std::ostringstream md, curves;
    md << std::setprecision(3) << std::fixed;
    curves << "run,t,rel,gen,loc,avg,general_acc,queue_len,corrections,failed_edits\n" << std::setprecision(6)
           << std::fixed;
    md << "| run | t | rel | gen | loc | avg | general | general delta | corrections | failed |\n"
       << "|---|---|---|---|---|---|---|---|---|---|\n";
    try {
        for (const auto& [name, j] : runs) {
            const auto& rows = j.at("rows");
            if (rows.empty()) throw Error(ErrorKind::parse, name + " has no rows");
            for (const auto& r : rows) {
                curves << name << ',' << r.at("t").get<std::size_t>() << ',' << r.at("rel").get<double>() << ','
                       << r.at("gen").get<double>() << ',' << r.at("loc").get<double>() << ','
                       << r.at("avg").get<double>() << ',' << r.at("general_acc").get<double>() << ','
                       << r.at("queue_len").get<std::size_t>() << ',' << r.at("corrections").get<std::size_t>()
                       << ',' << r.at("failed_edits").get<std::size_t>() << '\n';
            }
            const auto& last = rows.back();
            md << "| " << name << " | " << last.at("t").get<std::size_t>() << " | " << last.at("rel").get<double>()
               << " | " << last.at("gen").get<double>() << " | " << last.at("loc").get<double>() << " | "
               << last.at("avg").get<double>() << " | " << last.at("general_acc").get<double>() << " | "
               << j.at("general_acc_delta").get<double>() << " | " << j.at("corrections").get<std::size_t>()
               << " | " << j.at("failed_edits").get<std::size_t>() << " |\n";
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::parse, std::string("malformed report: ") + e.what());
    }
    write_text(dir / "report.md", md.str());
    write_text(dir / "curves.csv", curves.str());
    std::cout << md.str();
    return kExitOk;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("-c,--config", c.config, "JSON config file (see docs/config.md)");
    sub->add_option("--seed", c.seed, "Seed for every stage");
    sub->add_option("-o,--out-dir", c.out_dir, "Directory that relative paths resolve against")->capture_default_str();
}

void add_world_flags(CLI::App* sub, Common& c) {
    sub->add_option("--world", c.world, "World file")->capture_default_str();
}

void add_run_flags(CLI::App* sub, Common& c, Overrides& o) {
    add_world_flags(sub, c);
    sub->add_option("--stream", c.stream, "Edit stream file")->capture_default_str();
    sub->add_option("--checkpoint", c.checkpoint, "Model checkpoint")->capture_default_str();
    sub->add_option("--queue-capacity-pct", o.capacity_pct, "Queue capacity as a percentage of the stream length");
    sub->add_option("--eta-que", o.eta_que, "Distance threshold for self-correction candidates");
    sub->add_option("--eta-deq", o.eta_deq, "Distance threshold for dequeueing");
    sub->add_option("--top-k", o.top_k, "Candidates corrected per edit");
    sub->add_option("--distance-mode", o.distance_mode, "delta or snapshot");
    sub->add_option("--dequeue-mode", o.dequeue_mode, "rationale or literal");
    sub->add_option("--layer-mode", o.layer_mode, "fixed_last_k or traced");
    sub->add_option("--edit-layers", o.edit_layers, "Layers edited in fixed_last_k mode");
    sub->add_option("--eval-every", o.eval_every, "Evaluation cadence in edits (0: T/10)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sequential model editing with a weight queue on a small transformer"};
    app.require_subcommand(1);
    Common c;
    Overrides o;
    std::string subject, relation, runs_dir = "runs";

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic world and an edit stream");
    add_common(gen, c);
    add_world_flags(gen, c);
    gen->add_option("--stream", c.stream, "Edit stream file")->capture_default_str();
    gen->add_option("--entities", o.entities, "Number of entities");
    gen->add_option("--relations", o.relations, "Number of relations");
    gen->add_option("--facts", o.facts, "Number of facts");
    gen->add_option("--edits", o.edits, "Stream length");
    gen->add_option("--chain-fraction", o.chain_fraction, "Fraction of edits in chained pairs");
    gen->add_option("--rephrases", o.rephrases, "Rephrases per edit");
    gen->add_option("--locality", o.locality, "Locality probes per edit");

    auto* pre = app.add_subcommand("pretrain", "Train the base model on the world's facts");
    add_common(pre, c);
    add_world_flags(pre, c);
    pre->add_option("--checkpoint", c.checkpoint, "Checkpoint to write")->capture_default_str();
    pre->add_option("--steps", o.steps, "Optimizer steps");
    pre->add_option("--lr", o.lr, "Adam learning rate");
    pre->add_option("--batch-size", o.batch_size, "Examples per step");
    pre->add_option("--layers", o.layers, "Transformer blocks");
    pre->add_option("--d-model", o.d_model, "Residual width");
    pre->add_option("--d-ff", o.d_ff, "FFN width");
    pre->add_option("--heads", o.heads, "Attention heads");

    auto* trace = app.add_subcommand("trace", "Causal trace of one fact, or a summary over memorized facts");
    add_common(trace, c);
    add_world_flags(trace, c);
    trace->add_option("--checkpoint", c.checkpoint, "Model checkpoint")->capture_default_str();
    trace->add_option("--subject", subject, "Subject entity of the fact to trace");
    trace->add_option("--relation", relation, "Relation of the fact to trace");
    trace->add_option("--noise", o.noise, "Noise scale in embedding standard deviations");
    trace->add_option("--samples", o.noise_samples, "Corruptions averaged per fact");
    trace->add_option("--facts", o.trace_facts, "Facts in the summary");

    auto* edit = app.add_subcommand("edit", "Run the edit stream through the editor and queue");
    add_common(edit, c);
    add_run_flags(edit, c, o);
    edit->add_flag("--no-queue", o.no_queue, "Disable the weight queue");
    edit->add_flag("--no-st", o.no_st, "Use the mixed key without structural refinement");
    edit->add_flag("--no-topk-random", o.no_topk_random, "Correct a random K-subset instead of the nearest K");

    auto* ablate = app.add_subcommand("ablate", "Run the full method and its three ablations");
    add_common(ablate, c);
    add_run_flags(ablate, c, o);

    auto* report = app.add_subcommand("report", "Summarize the runs under a directory");
    add_common(report, c);
    report->add_option("--runs", runs_dir, "Directory holding one folder per run")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*gen) return cmd_gen_data(c, o);
        if (*pre) return cmd_pretrain(c, o);
        if (*trace) return cmd_trace(c, o, subject, relation);
        if (*edit) return cmd_edit(c, o);
        if (*ablate) return cmd_ablate(c, o);
        return cmd_report(c, runs_dir);
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    }
}
