#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtx/checkpoint.hpp"
#include "mtx/config.hpp"
#include "mtx/data.hpp"
#include "mtx/error.hpp"
#include "mtx/eval.hpp"
#include "mtx/feedback.hpp"
#include "mtx/image_io.hpp"
#include "mtx/nets.hpp"
#include "mtx/objectives.hpp"
#include "mtx/text.hpp"
#include "mtx/train.hpp"
#include "mtx/util.hpp"

namespace fs = std::filesystem;
using namespace mtx;

namespace {

std::string fmt(real v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

struct CommonFlags {
    std::string config_path;
    std::string resume;
    std::string out;
    std::string feedback;
    uint64_t seed = 0;
    bool deterministic = false;
    int threads = 0;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "run configuration file (key=value sections)");
    cmd->add_option("--seed", f.seed, "override the [run] seed");
    cmd->add_option("--resume", f.resume, "checkpoint to load");
    cmd->add_option("--out", f.out, "override the [run] output directory");
    cmd->add_flag("--deterministic", f.deterministic, "single thread, conditioning code = mu");
    cmd->add_option("--feedback", f.feedback, "feedback head: word, tad, cd or none")
        ->check(CLI::IsMember({"word", "tad", "cd", "none"}));
    cmd->add_option("--threads", f.threads, "kernel worker threads")->check(CLI::PositiveNumber);
}

Config load_config(const CLI::App* cmd, const CommonFlags& f) {
    Config c = f.config_path.empty() ? Config{} : Config::load(f.config_path);
    if (cmd->count("--seed")) c.seed = f.seed;
    if (cmd->count("--out")) c.out_dir = f.out;
    if (cmd->count("--feedback")) c.train.head = feedback_from_str(f.feedback);
    if (cmd->count("--threads")) c.threads = f.threads;
    if (f.deterministic) c.deterministic = true;
    if (c.deterministic) {
        c.threads = 1;
        c.train.objective.deterministic = true;
    }
    c.validate();
    set_threads(c.threads);
    return c;
}

uint64_t train_split_seed(const Config& c) { return Rng::mix(c.seed, 1); }
uint64_t test_split_seed(const Config& c) { return Rng::mix(c.seed, 2); }

// Fixed draw order (generator, discriminator, then everything the run
// consumes), so pretraining artifacts and checkpoints line up bit-exactly
// with an uninterrupted run.
TrainSession build_session(const Config& c, const Vocabulary& vocab) {
    NetDims dims = c.dims;
    dims.resolution = c.resolution;
    dims.vocab_size = vocab.size();
    Rng rng(c.seed);
    TrainSession s;
    s.gen = GeneratorParams::init(dims, rng);
    s.disc = DiscriminatorParams::init(dims, rng);
    s.g_opt = AdamState::init(s.gen.trainable(), c.train.adam);
    s.d_opt = AdamState::init(s.disc.trainable(), c.train.adam);
    s.rng = rng;
    return s;
}

PretrainResult run_pretrain(TrainSession& s, const Config& c, const Vocabulary& vocab) {
    Dataset train = sample_batch(c.train_samples, true, train_split_seed(c), c.resolution);
    Dataset held = sample_batch(c.test_samples, true, test_split_seed(c), c.resolution);
    std::vector<GanBatchItem> train_items = prepare_items(train, vocab);
    std::vector<GanBatchItem> held_items = prepare_items(held, vocab);
    PretrainResult r = pretrain_matching(train_items, held_items, s.gen.text, s.gen.sem, c.pretrain, s.rng);
    log_line(LogLevel::kInfo, "pretraining: held-out retrieval " + fmt(r.retrieval) + " after " +
                                  std::to_string(r.epochs_run) + " epochs");
    return r;
}

// Load the cached encoder artifact when present, otherwise pretrain in place
// and cache it for the next run with this output directory.
void ensure_pretrained(TrainSession& s, const Config& c, const Vocabulary& vocab) {
    const std::string path = c.out_dir + "/pretrained.mtxt";
    if (fs::exists(path)) {
        load_pretrained(path, s, c.digest());
        log_line(LogLevel::kInfo, "loaded pretrained encoders from " + path);
        return;
    }
    run_pretrain(s, c, vocab);
    save_pretrained(path, s, c.digest());
    log_line(LogLevel::kInfo, "saved pretrained encoders to " + path);
}

std::vector<EvalItem> test_items(const Config& c, const Vocabulary& vocab) {
    Dataset test = sample_batch(c.test_samples, false, test_split_seed(c), c.resolution);
    return prepare_eval_items(test, vocab);
}

// Adversarial stage shared by train and ablate: assumes pretrained encoders
// are already in the session. Writes metrics.csv / eval.csv / checkpoints /
// report.json under c.out_dir and returns the final report.
EvalReport run_training(TrainSession& s, const Config& c, const Vocabulary& vocab) {
    // Matched pairs teach reconstruction; mismatched pairs supply edit
    // supervision where the reference image realizes the caption.
    const int n_mis = static_cast<int>(std::lround(static_cast<double>(c.mismatch) * c.train_samples));
    Dataset train = sample_batch(std::max(1, c.train_samples - n_mis), true, train_split_seed(c), c.resolution);
    if (n_mis > 0) {
        Dataset mis = sample_batch(n_mis, false, Rng::mix(c.seed, 3), c.resolution);
        train.samples.insert(train.samples.end(), mis.samples.begin(), mis.samples.end());
    }
    std::vector<GanBatchItem> items = prepare_items(train, vocab);
    std::vector<EvalItem> eval_set = test_items(c, vocab);

    std::string csv =
        "step,epoch,d_total,d_uncond,d_cond,d_word,g_total,g_uncond,g_cond,g_perceptual,g_word,g_damsm\n";
    std::string eval_csv = "epoch,fid_proxy,attr_accuracy,preservation_mse,mp\n";
    StepStats last;
    auto on_step = [&](const StepStats& st) {
        last = st;
        csv += std::to_string(st.step) + "," + std::to_string(st.epoch) + "," + fmt(st.d.total) + "," +
               fmt(st.d.uncond_adv) + "," + fmt(st.d.cond_adv) + "," + fmt(st.d.word) + "," +
               fmt(st.g.total) + "," + fmt(st.g.uncond_adv) + "," + fmt(st.g.cond_adv) + "," +
               fmt(st.g.perceptual) + "," + fmt(st.g.word) + "," + fmt(st.g.damsm) + "\n";
        log_line(LogLevel::kDebug, "step " + std::to_string(st.step) + ": d " + fmt(st.d.total) + ", g " +
                                       fmt(st.g.total));
    };

    for (int epoch = s.epoch; epoch < c.train.epochs; ++epoch) {
        train_epochs(s, items, c.train, epoch + 1, on_step);
        atomic_write(c.out_dir + "/metrics.csv", csv);
        log_line(LogLevel::kInfo, "epoch " + std::to_string(s.epoch) + "/" + std::to_string(c.train.epochs) +
                                      ": d " + fmt(last.d.total) + ", g " + fmt(last.g.total));
        const bool final_epoch = s.epoch == c.train.epochs;
        if (c.eval_every > 0 && s.epoch % c.eval_every == 0 && !final_epoch) {
            std::vector<EvalItem> subset(eval_set.begin(),
                                         eval_set.begin() + std::min<size_t>(eval_set.size(),
                                                                             static_cast<size_t>(c.eval_samples)));
            EvalReport r = evaluate(subset, s.gen, s.disc);
            eval_csv += std::to_string(s.epoch) + "," + fmt(r.fid) + "," + fmt(r.attr_accuracy) + "," +
                        fmt(r.preservation_mse) + "," + fmt(r.mp) + "\n";
            atomic_write(c.out_dir + "/eval.csv", eval_csv);
            log_line(LogLevel::kInfo, "eval at epoch " + std::to_string(s.epoch) + ": attr " +
                                          fmt(r.attr_accuracy) + ", preservation " + fmt(r.preservation_mse));
        }
        if (c.checkpoint_every > 0 && s.epoch % c.checkpoint_every == 0 && !final_epoch)
            save_session(c.out_dir + "/ckpt_epoch" + std::to_string(s.epoch) + ".mtxt", s, c.digest());
    }

    save_session(c.out_dir + "/checkpoint.mtxt", s, c.digest());
    EvalReport report = evaluate(eval_set, s.gen, s.disc, c.fid_samples);
    atomic_write(c.out_dir + "/report.json", report.to_json() + "\n");
    return report;
}

int cmd_pretrain(const Config& c) {
    fs::create_directories(c.out_dir);
    Vocabulary vocab = default_vocabulary();
    vocab.save(c.out_dir + "/vocab.tsv");
    TrainSession s = build_session(c, vocab);
    PretrainResult r = run_pretrain(s, c, vocab);
    const std::string path = c.out_dir + "/pretrained.mtxt";
    save_pretrained(path, s, c.digest());
    std::cout << "retrieval " << fmt(r.retrieval) << " after " << r.epochs_run << " epochs -> " << path
              << "\n";
    return 0;
}

int cmd_train(const Config& c, const std::string& resume) {
    fs::create_directories(c.out_dir);
    Vocabulary vocab = default_vocabulary();
    vocab.save(c.out_dir + "/vocab.tsv");
    TrainSession s;
    if (!resume.empty()) {
        s = load_session(resume, c, vocab.size());
        log_line(LogLevel::kInfo, "resumed from " + resume + " at epoch " + std::to_string(s.epoch));
    } else {
        s = build_session(c, vocab);
        ensure_pretrained(s, c, vocab);
    }
    EvalReport report = run_training(s, c, vocab);
    std::cout << report.to_json() << "\n";
    return 0;
}

int cmd_eval(const Config& c, const std::string& resume) {
    if (resume.empty()) throw ConfigError("eval needs --resume with a checkpoint path");
    Vocabulary vocab = default_vocabulary();
    TrainSession s = load_session(resume, c, vocab.size());
    EvalReport report = evaluate(test_items(c, vocab), s.gen, s.disc, c.fid_samples);
    fs::create_directories(c.out_dir);
    atomic_write(c.out_dir + "/report.json", report.to_json() + "\n");
    std::cout << report.to_json() << "\n";
    return 0;
}

int cmd_infer(const Config& c, const std::string& resume, const std::string& image_path,
              const std::string& caption) {
    if (resume.empty()) throw ConfigError("infer needs --resume with a checkpoint path");
    Vocabulary vocab = default_vocabulary();
    TrainSession s = load_session(resume, c, vocab.size());
    const Tensor input = load_ppm(image_path);
    const TokenSeq tokens = tokenize(caption, vocab);

    GenOptions opt;
    opt.deterministic = c.deterministic;
    Rng rng(c.seed);
    const GenResult out = generate_full(input, tokens, s.gen, rng, opt);
    fs::create_directories(c.out_dir);
    save_ppm(c.out_dir + "/output.ppm", out.image);
    std::cout << "wrote " << c.out_dir << "/output.ppm\n";

    // Word-level view of the output: attention row per word over the coarse
    // grid, and the presence distribution next to the noun/adjective labels.
    const ImageFeatures sem = encode_semantic(out.image, s.gen.sem);
    const TextFeatures text = encode_text(tokens, s.gen.text);
    const AttentionMaps maps = normalize_attention(correlate(text.words, sem.v));
    const Tensor delta = word_presence(sem.v, maps.beta);
    const Tensor labels = label_words(tokens, vocab);

    const int L = tokens.length();
    const int regions = sem.height * sem.width;
    std::span<const real> beta = maps.beta.data();
    for (int i = 0; i < L; ++i) {
        real peak = 0;
        for (int j = 0; j < regions; ++j) peak = std::max(peak, beta[static_cast<size_t>(i * regions + j)]);
        std::vector<real> map(static_cast<size_t>(regions));
        for (int j = 0; j < regions; ++j)
            map[static_cast<size_t>(j)] = beta[static_cast<size_t>(i * regions + j)] / peak;
        std::ostringstream name;
        name << c.out_dir << "/attn_" << std::setw(2) << std::setfill('0') << i << "_"
             << vocab.token(tokens.ids[static_cast<size_t>(i)]) << ".pgm";
        save_pgm(name.str(), Tensor::from({sem.height, sem.width}, std::move(map)));
        std::cout << "wrote " << name.str() << "\n";
    }

    std::cout << "\nword          label  presence\n";
    for (int i = 0; i < L; ++i) {
        std::cout << std::left << std::setw(14) << vocab.token(tokens.ids[static_cast<size_t>(i)])
                  << std::setw(7) << static_cast<int>(labels.data()[static_cast<size_t>(i)])
                  << fmt(delta.data()[static_cast<size_t>(i)]) << "\n";
    }
    return 0;
}

int cmd_ablate(const Config& c) {
    const FeedbackHead heads[] = {FeedbackHead::kWord, FeedbackHead::kNone, FeedbackHead::kTad,
                                  FeedbackHead::kCd};
    const int seeds = 3;
    fs::create_directories(c.out_dir + "/ablate");
    Vocabulary vocab = default_vocabulary();

    nlohmann::json runs = nlohmann::json::array();
    std::cout << std::left << std::setw(6) << "head" << std::setw(6) << "seed" << std::setw(14)
              << "fid_proxy" << std::setw(14) << "attr_acc" << std::setw(14) << "pres_mse" << "mp\n";
    for (int k = 0; k < seeds; ++k) {
        Config base = c;
        base.seed = c.seed + static_cast<uint64_t>(k);
        // One pretraining per seed; every head starts from the same encoders
        // and initial weights.
        const std::string pre = c.out_dir + "/ablate/pretrained_s" + std::to_string(base.seed) + ".mtxt";
        if (!fs::exists(pre)) {
            TrainSession s = build_session(base, vocab);
            run_pretrain(s, base, vocab);
            save_pretrained(pre, s, base.digest());
        }
        for (FeedbackHead head : heads) {
            Config rc = base;
            rc.train.head = head;
            rc.out_dir = c.out_dir + "/ablate/" + feedback_str(head) + "_s" + std::to_string(rc.seed);
            fs::create_directories(rc.out_dir);
            TrainSession s = build_session(rc, vocab);
            load_pretrained(pre, s, rc.digest());
            EvalReport r = run_training(s, rc, vocab);
            std::cout << std::left << std::setw(6) << feedback_str(head) << std::setw(6) << rc.seed
                      << std::setw(14) << fmt(r.fid) << std::setw(14) << fmt(r.attr_accuracy)
                      << std::setw(14) << fmt(r.preservation_mse) << fmt(r.mp) << "\n";
            runs.push_back({{"head", feedback_str(head)},
                            {"seed", rc.seed},
                            {"fid_proxy", r.fid},
                            {"attr_accuracy", r.attr_accuracy},
                            {"preservation_mse", r.preservation_mse},
                            {"mp", r.mp}});
        }
    }
    nlohmann::json doc{{"base_seed", c.seed}, {"seeds", seeds}, {"runs", runs}};
    atomic_write(c.out_dir + "/ablate.json", doc.dump(2) + "\n");
    std::cout << "wrote " << c.out_dir << "/ablate.json\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text-guided shape editing workbench"};
    app.require_subcommand(1);

    CommonFlags f;
    std::string image_path, caption;
    int rc = 0;

    CLI::App* pre = app.add_subcommand("pretrain", "train the text/image matching encoders");
    add_common(pre, f);
    pre->callback([&] { rc = cmd_pretrain(load_config(pre, f)); });

    CLI::App* train = app.add_subcommand("train", "adversarial training with periodic checkpoints");
    add_common(train, f);
    train->callback([&] { rc = cmd_train(load_config(train, f), f.resume); });

    CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on the mismatched test split");
    add_common(eval, f);
    eval->callback([&] { rc = cmd_eval(load_config(eval, f), f.resume); });

    CLI::App* infer = app.add_subcommand("infer", "edit one image to match a caption");
    add_common(infer, f);
    infer->add_option("image", image_path, "input image (binary PPM)")->required();
    infer->add_option("caption", caption, "target caption")->required();
    infer->callback([&] { rc = cmd_infer(load_config(infer, f), f.resume, image_path, caption); });

    CLI::App* ablate = app.add_subcommand("ablate", "compare the four feedback heads over three seeds");
    add_common(ablate, f);
    ablate->callback([&] { rc = cmd_ablate(load_config(ablate, f)); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
