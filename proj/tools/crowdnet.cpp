#include <iostream>

#include "CLI11.hpp"
#include "crowdnet/cli.hpp"

using namespace crowdnet;
using namespace crowdnet::cli;

int main(int argc, char** argv) {
    CLI::App app{"Crowd density estimation: synthetic data, ground truth, training, inference, evaluation"};
    app.require_subcommand(1);

    SynthOptions synth;
    std::string synth_size = "128x128";
    auto* s = app.add_subcommand("synth", "generate a synthetic annotated corpus");
    s->add_option("--out", synth.out, "output directory")->required();
    s->add_option("--scenes", synth.scenes, "number of scenes");
    s->add_option("--heads-min", synth.heads_min, "fewest heads per scene");
    s->add_option("--heads-max", synth.heads_max, "most heads per scene");
    s->add_option("--size", synth_size, "image size HxW");
    s->add_option("--seed", synth.seed, "random seed");

    GengtOptions gengt;
    std::optional<std::string> gengt_preset;
    auto* g = app.add_subcommand("gengt", "render density and attention ground truth");
    g->add_option("--data", gengt.data, "directory of img.ppm/img.csv pairs")->required();
    auto* g_sigma = g->add_option("--sigma", gengt.sigma, "Gaussian sigma in pixels");
    g->add_option("--preset", gengt_preset, "dataset preset for sigma (sha, shb, ucf50, we, brt, trancos)")
        ->excludes(g_sigma);
    g->add_option("--out", gengt.out, "output directory")->required();

    TrainOptions train;
    auto* t = app.add_subcommand("train", "train a model from a config file");
    t->add_option("--config", train.config, "key = value config file")->required();
    t->add_option("--data", train.data, "training corpus directory")->required();
    t->add_option("--out", train.out, "checkpoint path")->required();

    InferOptions infer;
    auto* i = app.add_subcommand("infer", "predict a density map for one image");
    i->add_option("--model", infer.model, "checkpoint")->required();
    i->add_option("--image", infer.image, "input PPM")->required();
    i->add_option("--out", infer.out, "output DMAP")->required();
    i->add_option("--viz", infer.viz, "optional PGM visualization");
    i->add_flag("--count", infer.count, "print the predicted count");

    EvalOptions eval;
    auto* e = app.add_subcommand("eval", "score one model or a two-model ensemble");
    e->add_option("--model", eval.model, "checkpoint")->required();
    e->add_option("--model2", eval.model2, "second checkpoint for ensemble averaging");
    e->add_option("--data", eval.data, "evaluation corpus directory")->required();
    e->add_option("--sigma", eval.sigma, "Gaussian sigma for ground truth");
    e->add_option("--roi", eval.roi, "full-resolution PGM mask");
    e->add_option("--game", eval.game, "highest GAME level (0..3)");

    BenchOptions bench;
    std::string bench_variant = "msfanet", bench_width = "1", bench_size = "224x224";
    auto* b = app.add_subcommand("bench", "parameter count, MACs and forward latency");
    b->add_option("--variant", bench_variant, "msfanet or msegnet");
    b->add_option("--width", bench_width, "width multiplier, e.g. 0.25 or 1/4");
    b->add_option("--size", bench_size, "input size HxW");
    b->add_option("--runs", bench.runs, "timed runs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*s) {
            synth.size = parse_size(synth_size);
            return cmd_synth(synth, std::cout);
        }
        if (*g) {
            if (gengt_preset) gengt.sigma = sigma_preset(*gengt_preset);
            return cmd_gengt(gengt, std::cout);
        }
        if (*t) return cmd_train(train, std::cout);
        if (*i) return cmd_infer(infer, std::cout, std::cerr);
        if (*e) return cmd_eval(eval, std::cout);
        if (*b) {
            bench.variant = parse_variant(bench_variant);
            bench.width = detail::parse_real("width", bench_width);
            bench.size = parse_size(bench_size);
            return cmd_bench(bench, std::cout);
        }
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kUsage;
    } catch (const NumericError& err) {
        std::cerr << "numeric error: " << err.what() << "\n";
        return kNumeric;
    } catch (const DataError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kData;
    } catch (const std::filesystem::filesystem_error& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kData;
    }
    return kUsage;
}
