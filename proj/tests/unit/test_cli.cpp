#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "json.hpp"
#include "sigstyle/cli.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/log.hpp"

using namespace sigstyle;
using sigstyle::testing::ScratchDir;

namespace {

const std::filesystem::path kData = SIGSTYLE_TEST_DATA;

struct Outcome {
    int code;
    std::string out, err;
};

Outcome cli(std::vector<std::string> args) {
    args.push_back("--log-level");
    args.push_back("error");
    std::ostringstream out, err;
    const int code = run(args, out, err);
    set_log_level("info");
    return {code, out.str(), err.str()};
}

Outcome cli_raw(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

nlohmann::json dry_run(std::vector<std::string> args) {
    args.push_back("--dry-run");
    const Outcome o = cli(args);
    REQUIRE(o.code == kExitOk);
    return nlohmann::json::parse(o.out);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Image solid(int w, int h, double v) { return Image(3, h, w, v); }

}  // namespace

TEST_CASE("grid: layout, caption strip and resizing") {
    const Image a = sigstyle::testing::stripes_image(32), b = sigstyle::testing::blob_image(32);

    const Image one = compose_grid({a}, {"content"});
    CHECK(one.width() == 32);
    CHECK(one.height() == 32 + kCaptionStrip);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) CHECK(one.at(c, y, x) == a.at(c, y, x));
        }
    }
    int dark = 0;
    for (int y = 32; y < one.height(); ++y) {
        for (int x = 0; x < 32; ++x) dark += one.at(0, y, x) == 0.0;
    }
    CHECK(dark > 0);
    const Image unlabeled = compose_grid({a}, {});
    for (int y = 32; y < unlabeled.height(); ++y) {
        for (int x = 0; x < 32; ++x) CHECK(unlabeled.at(1, y, x) == 1.0);
    }

    const Image three = compose_grid({a, b, a}, {"a", "b", "c"});
    CHECK(three.width() == 3 * 32);
    CHECK(three.height() == 32 + kCaptionStrip);
    CHECK(three.at(0, 5, 32 + 7) == b.at(0, 5, 7));

    const Image wrapped = compose_grid({a, b, a}, {}, 2);
    CHECK(wrapped.width() == 64);
    CHECK(wrapped.height() == 2 * (32 + kCaptionStrip));

    const Image mixed = compose_grid({a, solid(48, 20, 0.25), to_gray(b)}, {});
    CHECK(mixed.width() == 96);
    CHECK(mixed.at(2, 10, 40) == doctest::Approx(0.25));

    CHECK(encode_png(compose_grid({a, b}, {"x", "y"})) == encode_png(compose_grid({a, b}, {"x", "y"})));
    CHECK_THROWS_AS(compose_grid({}, {}), ConfigError);
}

TEST_CASE("draw_text clips to the image") {
    Image img(3, 9, 20, 1.0);
    CHECK(draw_text(img, 0, 1, "abcdef") == 3);
    CHECK(draw_text(img, 0, 1, "") == 0);
}

TEST_CASE("cli: usage errors exit 2 with usage text") {
    const Outcome none = cli_raw({});
    CHECK(none.code == kExitUsage);
    CHECK(none.err.find("Usage") != std::string::npos);

    const Outcome missing = cli({"transfer", "--content", (kData / "content.png").string(), "--out", "x.png"});
    CHECK(missing.code == kExitUsage);
    CHECK(missing.err.find("--style") != std::string::npos);
    CHECK(missing.err.find("Usage") != std::string::npos);

    CHECK(cli_raw({"bogus"}).code == kExitUsage);
    CHECK(cli_raw({"transfer", "--help"}).code == kExitOk);

    const std::vector<std::string> base{"transfer", "--content", (kData / "content.png").string(), "--style",
                                        (kData / "content.png").string(), "--out", "x.png"};
    auto with = [&](std::vector<std::string> extra) {
        auto a = base;
        a.insert(a.end(), extra.begin(), extra.end());
        return cli(a).code;
    };
    CHECK(with({"--k", "51"}) == kExitUsage);
    CHECK(with({"--eta", "0.5"}) == kExitUsage);
    CHECK(with({"--device", "cuda"}) == kExitUsage);
    CHECK(with({"--layers", "decoder.x.self"}) == kExitUsage);
    CHECK(with({"--swap-mode", "sideways"}) == kExitUsage);
    // A style path that is not a checkpoint fails at run time.
    CHECK(with({"--caption", "house"}) == kExitRuntime);
}

TEST_CASE("cli: resolved defaults, config file and flag precedence") {
    const std::vector<std::string> base{"transfer", "--content", (kData / "content.png").string(), "--style",
                                        (kData / "content.png").string(), "--out", "x.png"};
    const auto j = dry_run(base);
    CHECK(j["transfer"]["swap"]["k"] == 25);
    CHECK(j["transfer"]["sampler"]["num_steps"] == 50);
    CHECK(j["transfer"]["lambda"] == 1.0);
    CHECK(j["transfer"]["sampler"]["guidance_scale"] == 1.0);
    CHECK(j["transfer"]["sampler"]["seed"] == 0);
    CHECK(j["cli"]["backbone"].is_string());

    ScratchDir dir("cli_config");
    const auto cfg = dir.path / "run.json";
    std::ofstream(cfg) << R"({"transfer": {"swap": {"k": 10}, "sampler": {"seed": 3}}, "log_level": "warn"})";
    auto args = base;
    args.insert(args.end(), {"--config", cfg.string()});
    auto from_file = dry_run(args);
    CHECK(from_file["transfer"]["swap"]["k"] == 10);
    CHECK(from_file["transfer"]["sampler"]["seed"] == 3);
    args.insert(args.end(), {"--k", "12", "--seed", "7"});
    auto flags_win = dry_run(args);
    CHECK(flags_win["transfer"]["swap"]["k"] == 12);
    CHECK(flags_win["transfer"]["sampler"]["seed"] == 7);

    std::ofstream(dir.path / "bad.json") << R"({"transfer": {"swap": {"kk": 10}}})";
    auto bad = base;
    bad.insert(bad.end(), {"--config", (dir.path / "bad.json").string()});
    CHECK(cli(bad).code == kExitUsage);
    std::ofstream(dir.path / "bad_top.json") << R"({"transfr": {}})";
    bad = base;
    bad.insert(bad.end(), {"--config", (dir.path / "bad_top.json").string()});
    CHECK(cli(bad).code == kExitUsage);

    auto texture = dry_run({"texture", "--content", (kData / "content.png").string(), "--style",
                            (kData / "content.png").string(), "--mask", (kData / "mask_left.png").string(), "--out",
                            "x.png", "--backbone", "toy"});
    CHECK(texture["transfer"]["target_prompt_template"] == "{caption} in the appearance of *");

    auto gen = dry_run({"generate", "--prompt", "a * cat", "--style", (kData / "content.png").string(), "--out", "g.png",
                        "--backbone", "toy"});
    CHECK(gen["generate"]["sampler"]["guidance_scale"] == 1.0);
    auto tune = dry_run({"tune", "--style", (kData / "style_dots.png").string(), "--out", "s.sigstyle", "--mode",
                         "appearance", "--no-random-crop"});
    CHECK(tune["tune"]["learning_rate"] == 1e-6);
    CHECK(tune["tune"]["steps"] == 1500);
    CHECK(tune["tune"]["prompt_template"] == "a photo in the appearance of *");
    CHECK(tune["tune"]["augment"]["random_crop"] == false);
}

TEST_CASE("cli: tune then transfer twice gives identical bytes") {
    ScratchDir dir("cli_run");
    const auto style = dir.path / "dots.sigstyle";
    REQUIRE(cli({"tune", "--style", (kData / "style_dots.png").string(), "--out", style.string(), "--steps", "6",
                 "--learning-rate", "3e-3", "--seed", "4", "--backbone", "toy"})
                .code == kExitOk);
    REQUIRE(std::filesystem::exists(style));

    auto transfer = [&](const std::string& name) {
        return cli({"transfer", "--content", (kData / "content.png").string(), "--style", style.string(), "--seed", "7",
                    "--num-steps", "6", "--k", "3", "--caption", "a house", "--backbone", "toy", "--output-dir",
                    dir.path.string(), "--out", name + ".png", "--grid", name + "_grid.png"})
            .code;
    };
    REQUIRE(transfer("o1") == kExitOk);
    REQUIRE(transfer("o2") == kExitOk);
    const std::string o1 = slurp(dir.path / "o1.png");
    CHECK(!o1.empty());
    CHECK(o1 == slurp(dir.path / "o2.png"));
    CHECK(slurp(dir.path / "o1_grid.png") == slurp(dir.path / "o2_grid.png"));
    const Image grid = read_png(dir.path / "o1_grid.png");
    CHECK(grid.width() == 3 * 128);
    CHECK(grid.height() == 128 + kCaptionStrip);

    CHECK(cli({"grid", "--images", (kData / "content.png").string(), (kData / "style_dots.png").string(), "--labels",
               "content", "dots", "--out", (dir.path / "g.png").string()})
              .code == kExitOk);
    CHECK(read_png(dir.path / "g.png").width() == 256);
    CHECK(cli({"grid", "--images", (kData / "content.png").string(), "--labels", "a", "b", "--out",
               (dir.path / "g2.png").string()})
              .code == kExitUsage);
}
