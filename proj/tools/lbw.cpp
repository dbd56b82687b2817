// SPDX-License-Identifier: Apache-2.0
// lbw: data engine, training, agent, serving and protocol tools.

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "lbw/agent.hpp"
#include "lbw/data.hpp"
#include "lbw/log.hpp"
#include "lbw/pipeline.hpp"
#include "lbw/protocol.hpp"
#include "lbw/server.hpp"

using namespace lbw;
using json = nlohmann::json;

namespace {

std::vector<std::string> split(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<ClipRecord> load_shards(const std::vector<std::string>& paths) {
    std::vector<ClipRecord> clips;
    for (const auto& p : paths) {
        auto part = read_shard(p);
        clips.insert(clips.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    LBW_REQUIRE(!clips.empty(), ErrorCode::invalid_argument, "no clips in the given shards");
    return clips;
}

KvConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    KvConfig c = path.empty() ? KvConfig{} : KvConfig::load(path);
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        LBW_REQUIRE(eq != std::string::npos, ErrorCode::parse_error, "override '" + o + "' is not key=value");
        c.set(o.substr(0, eq), o.substr(eq + 1));
    }
    return c;
}

KvConfig merged(const KvConfig& a, const KvConfig& b) {
    KvConfig out = a;
    for (const auto& [k, v] : b.values()) out.set(k, v);
    return out;
}

void write_ppm(const std::string& path, const Frame& f) {
    std::ofstream os(path, std::ios::binary);
    LBW_REQUIRE(os.good(), ErrorCode::io_error, "cannot write " + path);
    os << "P6\n" << f.width << " " << f.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(f.rgb.data()), static_cast<std::streamsize>(f.rgb.size()));
}

Progress every(int n, const std::string& what, MetricsLog& metrics) {
    return [n, what, &metrics](int step, double loss) {
        metrics.write({{"stage", what}, {"step", step}, {"loss", loss}});
        if ((step + 1) % n == 0) log::info(what + " step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
    };
}

struct Common {
    std::string config;
    std::vector<std::string> set;
    std::string shards;
    std::string out;
    std::string metrics;
    std::uint64_t seed = 0;

    void add_to(CLI::App* app, bool needs_out = true) {
        app->add_option("--config", config, "key = value config file");
        app->add_option("--set", set, "config override key=value (repeatable)");
        app->add_option("--shards", shards, "comma-separated shard files")->required();
        auto* o = app->add_option("--out", out, "output checkpoint");
        if (needs_out) o->required();
        app->add_option("--metrics", metrics, "JSON-lines metrics log");
        app->add_option("--seed", seed, "seed");
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lbw: interactive world model toolkit"};
    app.require_subcommand(1);

    // ---- data
    auto* data = app.add_subcommand("data", "oracle-world data engine");
    data->require_subcommand(1);

    std::string gen_out, gen_kind = "waypoint";
    int gen_count = 16, gen_size = 64;
    std::uint64_t gen_seed = 0;
    bool gen_events = false;
    auto* gen = data->add_subcommand("gen", "generate clips into a shard");
    gen->add_option("--out", gen_out, "shard file")->required();
    gen->add_option("--count", gen_count, "number of clips");
    gen->add_option("--seed", gen_seed, "first seed");
    gen->add_option("--kind", gen_kind, "rect | rotation | waypoint");
    gen->add_option("--size", gen_size, "frame height and width");
    gen->add_flag("--events", gen_events, "add a day/night switch halfway through each clip");
    gen->callback([&] {
        std::vector<ClipRecord> clips;
        for (int i = 0; i < gen_count; ++i) {
            ClipSpec s;
            s.kind = trajectory_kind_from_string(gen_kind);
            s.seed = gen_seed + static_cast<std::uint64_t>(i);
            s.height = s.width = gen_size;
            if (gen_events) {
                ClipSpec probe = s;
                const int n = static_cast<int>(generate_clip(probe).frames.size());
                s.events.push_back({n / 2, SetTimeOfDay{TimeOfDay::night}});
            }
            clips.push_back(generate_clip(s));
        }
        const auto m = write_shard(clips, gen_out);
        std::cout << json{{"shard", gen_out}, {"clips", m.count}, {"version", m.version}}.dump() << "\n";
    });

    std::string prof_shard;
    FilterThresholds thresholds;
    auto* prof = data->add_subcommand("profile", "brightness, sharpness and motion attributes per clip");
    prof->add_option("--shard", prof_shard)->required();
    prof->add_option("--min-brightness", thresholds.min_brightness);
    prof->add_option("--max-brightness", thresholds.max_brightness);
    prof->add_option("--min-sharpness", thresholds.min_sharpness);
    prof->callback([&] {
        const auto clips = read_shard(prof_shard);
        for (size_t i = 0; i < clips.size(); ++i) {
            const auto d = filter_clip(clips[i].attributes, thresholds);
            std::cout << json{{"index", i}, {"attributes", to_json(clips[i].attributes)}, {"keep", d.keep}, {"reason", d.reason}}.dump()
                      << "\n";
        }
    });

    std::string cap_shard;
    int cap_index = -1;
    auto* cap = data->add_subcommand("caption", "hierarchical captions as JSON");
    cap->add_option("--shard", cap_shard)->required();
    cap->add_option("--index", cap_index, "one clip; all when omitted");
    cap->callback([&] {
        const auto clips = read_shard(cap_shard);
        for (size_t i = 0; i < clips.size(); ++i)
            if (cap_index < 0 || static_cast<size_t>(cap_index) == i)
                std::cout << json{{"index", i}, {"captions", to_json(clips[i].captions)}}.dump(2) << "\n";
    });

    // ---- training
    auto* train = app.add_subcommand("train", "teacher, causal adaptation, distillation");
    train->require_subcommand(1);

    Common tt;
    auto* teacher = train->add_subcommand("teacher", "bidirectional two-expert teacher");
    tt.add_to(teacher);
    teacher->callback([&] {
        const KvConfig cfg = load_config(tt.config, tt.set);
        const ModelConfig m = ModelConfig::from_kv(cfg);
        TeacherTrainConfig tc;
        tc.curriculum = Curriculum::from_kv(cfg);
        tc.mode = cfg.get<std::string>("train.mode", "i2v") == "v2v" ? TaskMode::v2v : TaskMode::i2v;
        tc.batch = cfg.get("train.batch", tc.batch);
        tc.lr = cfg.get("train.lr", tc.lr);
        MetricsLog metrics = tt.metrics.empty() ? MetricsLog{} : MetricsLog(tt.metrics);
        const auto clips = tensors_of<float>(load_shards(split(tt.shards)), m);
        ParamStore<float> store;
        MoE<float> moe(m, store, "teacher.", tt.seed);
        train_teacher(moe, store, clips, tc, tt.seed + 1, every(50, "teacher", metrics));
        save_checkpoint(tt.out, merged(cfg, m.to_kv()), store);
        log::info("wrote " + tt.out);
    });

    Common ta;
    std::string adapt_teacher;
    auto* adapt = train->add_subcommand("adapt", "block-causal student from the teacher");
    ta.add_to(adapt);
    adapt->add_option("--teacher", adapt_teacher, "teacher checkpoint")->required();
    adapt->callback([&] {
        const CheckpointData tck = read_checkpoint(adapt_teacher);
        const KvConfig cfg = merged(tck.config, load_config(ta.config, ta.set));
        const ModelConfig m = ModelConfig::from_kv(cfg);
        CausalTrainConfig cc;
        cc.chunks = cfg.get("adapt.chunks", cc.chunks);
        cc.steps = cfg.get("adapt.steps", cc.steps);
        cc.batch = cfg.get("adapt.batch", cc.batch);
        cc.lr = cfg.get("adapt.lr", cc.lr);
        cc.diffusion = DiffusionConfig::from_kv(cfg);
        MetricsLog metrics = ta.metrics.empty() ? MetricsLog{} : MetricsLog(ta.metrics);
        const auto clips = tensors_of<float>(load_shards(split(ta.shards)), m);
        ParamStore<float> store;
        Dit<float> student(m, store, "student.", ta.seed);
        load_params(tck, store, "teacher.high.", "student.");
        if (cfg.get("adapt.action_only", false)) set_action_finetune(store, "student.", m.blocks);
        train_causal(student, store, clips, cc, ta.seed + 1, every(50, "adapt", metrics));
        save_checkpoint(ta.out, cfg, store);
        log::info("wrote " + ta.out);
    });

    Common td;
    std::string distill_teacher, distill_student;
    int distill_steps = 100;
    auto* distill = train->add_subcommand("distill", "few-step student by self-rollout distillation");
    td.add_to(distill);
    distill->add_option("--teacher", distill_teacher, "teacher checkpoint")->required();
    distill->add_option("--student", distill_student, "causal student checkpoint (defaults to the teacher's high expert)");
    distill->add_option("--steps", distill_steps, "outer steps");
    distill->callback([&] {
        const CheckpointData tck = read_checkpoint(distill_teacher);
        const KvConfig cfg = merged(tck.config, load_config(td.config, td.set));
        const ModelConfig m = ModelConfig::from_kv(cfg);
        const DistillConfig dc = DistillConfig::from_kv(cfg);
        const auto clips = tensors_of<float>(load_shards(split(td.shards)), m);
        DistillState<float> s(m, dc, DiffusionConfig::from_kv(cfg), td.seed);
        load_params(tck, s.real_store, "teacher.", "teacher.");
        load_params(tck, s.fake_store, "teacher.", "fake.");
        if (!distill_student.empty())
            load_params(read_checkpoint(distill_student), s.student_store, "student.", "student.");
        else
            load_params(tck, s.student_store, "teacher.high.", "student.");
        MetricsLog metrics = td.metrics.empty() ? MetricsLog{} : MetricsLog(td.metrics);
        std::mt19937_64 rng(td.seed + 1);
        for (int step = 0; step < distill_steps; ++step) {
            const auto ws = detail::draw_windows(clips, dc.horizon, m.text_vocab, 1, rng);
            const DistillMetrics dm = self_rollout_train_step(s, ws[0], rng());
            metrics.write({{"stage", "distill"}, {"step", step}, {"dmd", dm.dmd}, {"g", dm.g}, {"d", dm.d}, {"fake", dm.fake},
                           {"student_steps", dm.student_steps}});
            if ((step + 1) % 10 == 0) log::info("distill step " + std::to_string(step + 1) + " dmd " + std::to_string(dm.dmd));
        }
        save_checkpoint(td.out, cfg, s.student_store);
        log::info("wrote " + td.out);
    });

    // ---- agent
    auto* agent = app.add_subcommand("agent", "action agent");
    agent->require_subcommand(1);

    Common at;
    int agent_steps = 300;
    auto* atrain = agent->add_subcommand("train", "behavior cloning on oracle trajectories");
    at.add_to(atrain);
    atrain->add_option("--steps", agent_steps);
    atrain->callback([&] {
        const KvConfig cfg = load_config(at.config, at.set);
        AgentConfig ac = AgentConfig::from_kv(cfg);
        const auto clips = load_shards(split(at.shards));
        ac.height = clips[0].frames[0].height;
        ac.width = clips[0].frames[0].width;
        ac.validate();
        std::vector<AgentExample> examples;
        for (const auto& c : clips)
            for (size_t f = 0; f < c.frames.size(); f += static_cast<size_t>(ac.frames_per_token()))
                examples.push_back({c.frames[f], actions_to_plan(c.trajectory.actions, static_cast<int>(f), ac)});
        ParamStore<float> store;
        Agent<float> net(ac, store, "agent.", at.seed);
        Adam<float> opt(ac.lr);
        MetricsLog metrics = at.metrics.empty() ? MetricsLog{} : MetricsLog(at.metrics);
        std::mt19937_64 rng(at.seed + 1);
        std::uniform_int_distribution<size_t> pick(0, examples.size() - 1);
        const int batch = cfg.get("agent.batch", 4);
        for (int step = 0; step < agent_steps; ++step) {
            std::vector<AgentExample> b;
            for (int i = 0; i < batch; ++i) b.push_back(examples[pick(rng)]);
            const double loss = agent_train_step(net, store, opt, b);
            metrics.write({{"stage", "agent"}, {"step", step}, {"loss", loss}});
            if ((step + 1) % 50 == 0) log::info("agent step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
        }
        save_checkpoint(at.out, ac.to_kv(), store);
        log::info("wrote " + at.out);
    });

    std::string drive_ckpt, drive_agent, drive_prompt, drive_frames;
    int drive_chunks = 8;
    std::uint64_t drive_seed = 0;
    auto* drive = agent->add_subcommand("drive", "closed-loop exploration of the world model");
    drive->add_option("--ckpt", drive_ckpt, "student checkpoint")->required();
    drive->add_option("--agent", drive_agent, "agent checkpoint")->required();
    drive->add_option("--prompt", drive_prompt);
    drive->add_option("--chunks", drive_chunks);
    drive->add_option("--seed", drive_seed);
    drive->add_option("--frames", drive_frames, "directory for PPM frames");
    drive->callback([&] {
        const CheckpointData ack = read_checkpoint(drive_agent);
        const AgentConfig ac = AgentConfig::from_kv(ack.config);
        ParamStore<float> store;
        Agent<float> net(ac, store, "agent.", 0);
        load_params(ack, store, "agent.", "agent.");
        auto session = start_session<float>(drive_ckpt, drive_prompt, drive_seed);
        const DriveRecord rec = agent_drive(*session, net, drive_chunks);
        json plans = json::array();
        for (const auto& p : rec.plans) {
            json one = json::array();
            for (const auto& t : p) one.push_back(to_string(t));
            plans.push_back(one);
        }
        if (!drive_frames.empty()) {
            std::filesystem::create_directories(drive_frames);
            for (size_t i = 0; i < rec.frames.size(); ++i) {
                char name[32];
                std::snprintf(name, sizeof name, "/%05zu.ppm", i);
                write_ppm(drive_frames + name, rec.frames[i]);
            }
        }
        std::cout << json{{"chunks", drive_chunks}, {"frames", rec.frames.size()}, {"plans", plans},
                          {"stats", session->stats().to_json()}}
                         .dump()
                  << "\n";
    });

    // ---- serve
    std::string serve_ckpt, serve_host = "127.0.0.1", serve_prompt;
    int serve_port = 7878, serve_cache = 8, serve_steps = 4;
    double serve_fps = 16;
    std::uint64_t serve_seed = 0;
    bool serve_lockstep = false, serve_flush = false;
    auto* serve = app.add_subcommand("serve", "host streaming sessions over TCP and WebSocket");
    serve->add_option("--ckpt", serve_ckpt, "student checkpoint")->required();
    serve->add_option("--port", serve_port);
    serve->add_option("--host", serve_host);
    serve->add_option("--fps", serve_fps, "target frame rate, 0 = unpaced");
    serve->add_option("--cache-chunks", serve_cache, "rolling KV cache capacity M");
    serve->add_option("--steps", serve_steps, "student steps per chunk");
    serve->add_option("--prompt", serve_prompt, "initial world prompt");
    serve->add_option("--seed", serve_seed);
    serve->add_flag("--lockstep", serve_lockstep, "generate only when a full chunk of actions is queued");
    serve->add_flag("--flush-on-swap", serve_flush, "drop cached history when the prompt changes");
    serve->callback([&] {
        SessionConfig sc;
        sc.cache_chunks = serve_cache;
        sc.steps = serve_steps;
        sc.fps = serve_fps > 0 ? serve_fps : sc.fps;
        sc.flush_on_swap = serve_flush;
        net::ServerConfig cfg;
        cfg.host = serve_host;
        cfg.port = serve_port;
        cfg.fps = serve_fps;
        cfg.pacing = serve_lockstep ? net::Pacing::lockstep : net::Pacing::realtime;
        cfg.prompt = serve_prompt;
        cfg.seed = serve_seed;
        static net::Server<float>* running = nullptr;
        net::Server<float> server(cfg, net::checkpoint_factory<float>(serve_ckpt, sc));
        const int port = server.bind();
        std::cout << json{{"listening", serve_host}, {"port", port}}.dump() << std::endl;
        running = &server;
        std::signal(SIGINT, [](int) { running->stop(); });
        std::signal(SIGTERM, [](int) { running->stop(); });
        server.run();
    });

    // ---- protocol
    auto* protocol = app.add_subcommand("proto", "wire protocol utilities");
    protocol->require_subcommand(1);
    std::string golden_out;
    auto* golden = protocol->add_subcommand("golden", "print the shared golden vectors");
    golden->add_option("--out", golden_out, "write to a file instead of stdout");
    golden->callback([&] {
        const std::string text = proto::golden_document().dump(2) + "\n";
        if (golden_out.empty()) {
            std::cout << text;
        } else {
            std::ofstream os(golden_out);
            LBW_REQUIRE(os.good(), ErrorCode::io_error, "cannot write " + golden_out);
            os << text;
        }
    });

    std::string dec_hex;
    auto* dec = protocol->add_subcommand("decode", "decode hex bytes into messages");
    dec->add_option("hex", dec_hex)->required();
    dec->callback([&] {
        for (const auto& r : proto::decode_all(proto::from_hex(dec_hex))) {
            if (r.status == proto::DecodeStatus::message)
                std::cout << json{{"type", proto::type_name(proto::type_of(r.message))}, {"fields", proto::fields_json(r.message)}}.dump()
                          << "\n";
            else
                std::cout << json{{"error", proto::to_string(r.error)}}.dump() << "\n";
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
