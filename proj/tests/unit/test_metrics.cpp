#include <Eigen/Eigenvalues>

#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "json.hpp"
#include "sigstyle/digest.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/io/safetensors.hpp"
#include "sigstyle/metrics.hpp"
#include "sigstyle/rng.hpp"
#include "sigstyle/styletune.hpp"

using namespace sigstyle;
using sigstyle::testing::ScratchDir;

namespace {

const std::filesystem::path kData = SIGSTYLE_TEST_DATA;

const SafetensorsFile& probe() {
    static const SafetensorsFile f = read_safetensors(kData / "metrics_probe.safetensors");
    return f;
}

Image probe_image(int i) { return Image(probe().tensors.at("input." + std::to_string(i))); }

std::vector<std::pair<int, int>> probe_pairs() {
    std::vector<std::pair<int, int>> out;
    std::stringstream ss(probe().metadata.at("pairs"));
    for (std::string item; std::getline(ss, item, ';');) {
        const auto comma = item.find(',');
        out.emplace_back(std::stoi(item.substr(0, comma)), std::stoi(item.substr(comma + 1)));
    }
    return out;
}

double rel_err(double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 1e-300); }

Image random_image(Rng& rng, int size) {
    Image img(3, size, size);
    for (double& v : img.pixels.values()) v = rng.uniform();
    return img;
}

// Tiny network with the torchvision VGG16 parameter names.
void write_fake_vgg(const std::filesystem::path& dir, double lin_sign = 1.0) {
    Rng rng(3);
    std::map<std::string, Tensor> vgg, lin;
    const int idx[] = {0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28};
    const bool tap[] = {false, true, false, true, false, false, true, false, false, true, false, false, true};
    std::int64_t in = 3;
    int l = 0;
    for (int i = 0; i < 13; ++i) {
        const std::int64_t out = 2 + i / 3;
        vgg["features." + std::to_string(idx[i]) + ".weight"] = rng.normal_tensor({out, in, 3, 3}, 0.3);
        vgg["features." + std::to_string(idx[i]) + ".bias"] = rng.normal_tensor({out}, 0.01);
        if (tap[i]) {
            Tensor w({1, out, 1, 1}, lin_sign * 0.5);
            lin["lin" + std::to_string(l++) + ".model.1.weight"] = w;
        }
        in = out;
    }
    write_safetensors(dir / "vgg16.safetensors", vgg, StoredType::f32);
    write_safetensors(dir / "lpips_vgg.safetensors", lin, StoredType::f32);
}

}  // namespace

TEST_CASE("gram: hand case, constant map, symmetry, PSD, errors") {
    const Tensor g = gram(Tensor::matrix({{1, 1}, {0, 0}}));
    CHECK(g.bitwise_equal(Tensor::matrix({{0.5, 0}, {0, 0}})));

    const double c = 0.7;
    CHECK(gram(Tensor({1, 5}, c))[0] == doctest::Approx(c * c).epsilon(1e-15));

    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor f = rng.normal_tensor({6, 4, 5});
        const Tensor gm = gram(f);
        double asym = 0.0;
        for (int i = 0; i < 6; ++i) {
            for (int j = 0; j < 6; ++j) asym = std::max(asym, std::abs(gm.at(i, j) - gm.at(j, i)));
        }
        CHECK(asym == 0.0);
        Eigen::MatrixXd m(6, 6);
        for (int i = 0; i < 6; ++i) {
            for (int j = 0; j < 6; ++j) m(i, j) = gm.at(i, j);
        }
        CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues().minCoeff() >= -1e-6);
    }
    CHECK_THROWS_AS(gram(Tensor()), DimensionError);
    CHECK_THROWS_AS(gram(Tensor::vector({1, 2})), DimensionError);
}

TEST_CASE("toy extractor is fixed and matches the oracle dump") {
    const auto ex = ConvFeatureExtractor::toy();
    const auto layers = ex.layers();
    REQUIRE(layers.size() == 3);
    CHECK(layers[0].channels == 8);
    CHECK(layers[1].channels == 16);
    CHECK(layers[2].channels == 32);
    std::map<std::string, Tensor> weights;
    for (std::size_t i = 0; i < ex.convs().size(); ++i) {
        weights["conv" + std::to_string(i) + ".weight"] = ex.convs()[i].weight;
        weights["conv" + std::to_string(i) + ".bias"] = ex.convs()[i].bias;
    }
    CHECK(tensors_digest(weights) == probe().metadata.at("weights_digest"));

    const Image img = probe_image(0);
    const auto f1 = ex.features(img);
    const auto f2 = ConvFeatureExtractor::toy().features(img);
    REQUIRE(f1.size() == 3);
    for (std::size_t l = 0; l < f1.size(); ++l) CHECK(f1[l].bitwise_equal(f2[l]));
    CHECK(f1[0].shape() == Shape{8, 48, 48});
    CHECK(f1[2].shape() == Shape{32, 12, 12});
    CHECK_THROWS_AS(ex.features(to_gray(img)), DimensionError);
}

TEST_CASE("style loss and perceptual distance match the NumPy oracle") {
    const auto ex = ConvFeatureExtractor::toy();
    const auto pm = PerceptualModel::toy();
    for (int p : {1, 2}) {
        const auto grams = gram_matrices(probe_image(p), ex);
        for (std::size_t l = 0; l < grams.size(); ++l) {
            const Tensor& want = probe().tensors.at("gram." + std::to_string(p) + ".relu" + std::to_string(l + 1));
            REQUIRE(grams[l].shape() == want.shape());
            CHECK(max_abs_diff(grams[l], want) <= 1e-6 * want.max_abs());
        }
    }
    const auto pairs = probe_pairs();
    const Tensor& sl = probe().tensors.at("expected.style_loss");
    const Tensor& lp = probe().tensors.at("expected.lpips");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const Image a = probe_image(pairs[i].first), b = probe_image(pairs[i].second);
        CHECK(rel_err(style_loss(a, b, ex), sl[static_cast<std::int64_t>(i)]) <= 1e-6);
        CHECK(rel_err(perceptual_distance(a, b, pm), lp[static_cast<std::int64_t>(i)]) <= 1e-6);
    }
}

TEST_CASE("perceptual distance grows with added noise") {
    const auto pm = PerceptualModel::toy();
    const Tensor& noise = probe().tensors.at("noise");
    const Tensor& want = probe().tensors.at("expected.noise_lpips");
    const double sigmas[] = {0.01, 0.05, 0.1};
    for (int i = 0; i < 5; ++i) {
        const Image x = probe_image(i);
        double prev = 0.0;
        for (int s = 0; s < 3; ++s) {
            Image y = x;
            for (std::int64_t j = 0; j < y.pixels.numel(); ++j) y.pixels[j] += sigmas[s] * noise[j];
            const double d = perceptual_distance(x, y, pm);
            CHECK(rel_err(d, want[i * 3 + s]) <= 1e-6);
            CHECK(d >= prev);
            prev = d;
        }
    }
}

TEST_CASE("metric properties: self-zero, symmetry, non-negativity") {
    const auto ex = ConvFeatureExtractor::toy();
    const auto pm = PerceptualModel::toy();
    Rng rng(17);
    for (int trial = 0; trial < 6; ++trial) {
        const Image a = random_image(rng, 32), b = random_image(rng, 32);
        CHECK(style_loss(a, a, ex) == 0.0);
        CHECK(perceptual_distance(a, a, pm) == 0.0);
        const double s_ab = style_loss(a, b, ex), s_ba = style_loss(b, a, ex);
        const double d_ab = perceptual_distance(a, b, pm), d_ba = perceptual_distance(b, a, pm);
        CHECK(s_ab == s_ba);
        CHECK(std::abs(d_ab - d_ba) <= 1e-6);
        CHECK(s_ab >= 0.0);
        CHECK(d_ab > 0.0);
    }
    CHECK_THROWS_AS(style_loss(random_image(rng, 32), random_image(rng, 16), ex), DimensionError);
    CHECK_THROWS_AS(perceptual_distance(random_image(rng, 32), random_image(rng, 16), pm), DimensionError);
}

TEST_CASE("pretrained metric weights: loader and missing files") {
    ScratchDir dir("metrics_vgg");
    try {
        PerceptualModel::load(dir.path);
        FAIL("expected CapabilityError");
    } catch (const CapabilityError& e) {
        CHECK(std::string(e.what()).find("toy") != std::string::npos);
    }
    CHECK_THROWS_AS(MetricModels::make(dir.path.string()), CapabilityError);

    write_fake_vgg(dir.path);
    const auto models = MetricModels::make(dir.path.string());
    CHECK(models.style.name() == "vgg16");
    const auto layers = models.style.layers();
    REQUIRE(layers.size() == 5);
    CHECK(layers[0].name == "relu1_2");
    CHECK(layers[4].name == "relu5_3");
    Rng rng(8);
    const Image a = random_image(rng, 32), b = random_image(rng, 32);
    CHECK(perceptual_distance(a, a, models.perceptual) == 0.0);
    CHECK(perceptual_distance(a, b, models.perceptual) > 0.0);
    CHECK(style_loss(a, b, models.style) == style_loss(b, a, models.style));

    write_fake_vgg(dir.path, -1.0);
    CHECK_THROWS_AS(PerceptualModel::load(dir.path), ValidationError);
}

TEST_CASE("evaluate_suite: Cartesian rows, identity baseline, failures, resume") {
    Backbone model = sigstyle::testing::small_toy();
    const int size = model.image_size();
    std::vector<EvalContent> contents{{"blob", sigstyle::testing::blob_image(size), "a blob"},
                                      {"stripes", sigstyle::testing::stripes_image(size), "some stripes"}};
    std::vector<EvalStyle> styles;
    for (std::uint64_t s = 0; s < 3; ++s) {
        styles.push_back({"id" + std::to_string(s), identity_checkpoint(model, init_style_token(model, s), s),
                          sigstyle::testing::stripes_image(size + 16, 4 + static_cast<int>(s))});
    }
    const auto metrics = MetricModels::make("toy");
    EvalConfig cfg;
    cfg.transfer.sampler.num_steps = 4;
    cfg.transfer.swap.k = 4;
    cfg.transfer.target_prompt_template = "{caption} *";

    SUBCASE("row count and per-row metrics") {
        const auto report = evaluate_suite(model, contents, styles, metrics, cfg);
        REQUIRE(report.rows.size() == contents.size() * styles.size());
        CHECK(report.failures == 0);
        CHECK(report.rows[0].content_id == "blob");
        CHECK(report.rows[0].style_id == "id0");
        CHECK(report.rows[5].content_id == "stripes");
        CHECK(report.rows[5].style_id == "id2");
        for (const auto& r : report.rows) {
            CHECK(r.ok());
            CHECK(r.style_loss >= 0.0);
            CHECK(r.lpips >= 0.0);
        }
        const auto again = evaluate_suite(model, contents, styles, metrics, cfg);
        CHECK(report_csv(again) == report_csv(report));
    }

    SUBCASE("identity checkpoints reproduce the reconstruction baseline") {
        // Same prompt in both branches and k = T: the stylized run is the reconstruction.
        cfg.transfer.target_prompt = "plain";
        cfg.transfer.caption = "plain";
        for (auto& c : contents) c.caption = "plain";
        const auto report = evaluate_suite(model, contents, styles, metrics, cfg);
        for (const auto& r : report.rows) CHECK(r.lpips == r.reconstruction_lpips);
        CHECK(report.mean_lpips == report.mean_reconstruction_lpips);
    }

    SUBCASE("a failing pair is recorded and the run continues") {
        styles[1].checkpoint.token_embedding = Tensor({3});
        const auto report = evaluate_suite(model, contents, styles, metrics, cfg);
        REQUIRE(report.rows.size() == 6);
        CHECK(report.failures == 2);
        CHECK_FALSE(report.rows[1].ok());
        CHECK_FALSE(report.rows[4].ok());
        CHECK(report.rows[2].ok());
        CHECK(std::isfinite(report.mean_lpips));
    }

    SUBCASE("report files and resumption") {
        ScratchDir out("metrics_report");
        cfg.out_dir = out.path;
        const auto first = evaluate_suite(model, contents, styles, metrics, cfg);
        auto count_lines = [](const std::filesystem::path& p) {
            std::ifstream f(p);
            std::size_t n = 0;
            for (std::string line; std::getline(f, line);) ++n;
            return n;
        };
        CHECK(count_lines(out.path / "rows.jsonl") == 6);
        CHECK(count_lines(out.path / "report.csv") == 7);
        std::ifstream sf(out.path / "summary.json");
        const auto summary = nlohmann::json::parse(sf);
        CHECK(summary.at("pairs") == 6);
        CHECK(summary.at("published_reference").at("style_loss") == kPublishedStyleLoss);
        CHECK(summary.at("published_reference").at("lpips") == kPublishedLpips);

        const auto second = evaluate_suite(model, contents, styles, metrics, cfg);
        CHECK(count_lines(out.path / "rows.jsonl") == 6);
        CHECK(report_csv(second) == report_csv(first));

        cfg.transfer.swap.k = 2;
        evaluate_suite(model, contents, styles, metrics, cfg);
        CHECK(count_lines(out.path / "rows.jsonl") == 12);
    }

    SUBCASE("empty inputs") {
        CHECK_THROWS_AS(evaluate_suite(model, std::vector<EvalContent>{}, styles, metrics, cfg), ConfigError);
        CHECK_THROWS_AS(evaluate_suite(model, contents, {}, metrics, cfg), ConfigError);
    }
}

TEST_CASE("evaluation inputs from directories") {
    ScratchDir dir("metrics_inputs");
    Backbone model = sigstyle::testing::small_toy();
    write_png(dir.path / "b_house.png", sigstyle::testing::blob_image(16));
    write_png(dir.path / "a_tree.png", sigstyle::testing::blob_image(16));
    std::ofstream(dir.path / "a_tree.txt") << "a tall tree\n";
    const auto contents = load_eval_contents(dir.path);
    REQUIRE(contents.size() == 2);
    CHECK(contents[0].caption == "a tall tree");
    CHECK(contents[1].caption == "b house");

    save_checkpoint(dir.path / "s.sigstyle", identity_checkpoint(model, init_style_token(model, 1)));
    CHECK_THROWS_AS(load_eval_styles(dir.path, &model), IoError);
    write_png(dir.path / "s.png", sigstyle::testing::stripes_image(16));
    const auto styles = load_eval_styles(dir.path, &model);
    REQUIRE(styles.size() == 1);
    CHECK(styles[0].id == "s");
    CHECK_THROWS_AS(load_eval_contents(dir.path / "missing"), IoError);
}
