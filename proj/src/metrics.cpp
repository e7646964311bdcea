#include "sigstyle/metrics.hpp"

#include <Eigen/Core>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"
#include "sigstyle/config.hpp"
#include "sigstyle/digest.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/io/safetensors.hpp"
#include "sigstyle/log.hpp"
#include "sigstyle/rng.hpp"

namespace sigstyle {

namespace {

namespace fs = std::filesystem;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// [C, H, W] -> [C * 9, H * W] with zero padding 1.
RowMat im2col3(const Tensor& x) {
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    RowMat cols = RowMat::Zero(c * 9, h * w);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* plane = x.data() + ch * h * w;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                double* row = cols.data() + (ch * 9 + (dy + 1) * 3 + (dx + 1)) * h * w;
                for (std::int64_t y = 0; y < h; ++y) {
                    const auto sy = y + dy;
                    if (sy < 0 || sy >= h) continue;
                    for (std::int64_t xx = 0; xx < w; ++xx) {
                        const auto sx = xx + dx;
                        if (sx >= 0 && sx < w) row[y * w + xx] = plane[sy * w + sx];
                    }
                }
            }
        }
    }
    return cols;
}

Tensor conv3_relu(const Tensor& x, const ConvFeatureExtractor::Conv& conv) {
    const auto out_c = conv.weight.dim(0), h = x.dim(1), w = x.dim(2);
    const RowMat cols = im2col3(x);
    ConstMap wm(conv.weight.data(), out_c, conv.weight.numel() / out_c);
    Tensor y({out_c, h, w});
    MutMap ym(y.data(), out_c, h * w);
    ym.noalias() = wm * cols;
    for (std::int64_t o = 0; o < out_c; ++o) {
        ym.row(o).array() = (ym.row(o).array() + conv.bias[o]).max(0.0);
    }
    return y;
}

Tensor max_pool2(const Tensor& x) {
    const auto c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
    if (h == 0 || w == 0) throw DimensionError("feature map " + shape_str(x.shape()) + " too small to pool");
    const auto iw = x.dim(2), ih = x.dim(1);
    Tensor y({c, h, w});
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) {
                const double* p = x.data() + (ch * ih + 2 * i) * iw + 2 * j;
                y[(ch * h + i) * w + j] = std::max({p[0], p[1], p[iw], p[iw + 1]});
            }
        }
    }
    return y;
}

void require_same_size(const Image& a, const Image& b, const char* what) {
    if (a.pixels.shape() != b.pixels.shape()) {
        throw DimensionError(std::string(what) + " needs images of one size, got " + shape_str(a.pixels.shape()) +
                             " and " + shape_str(b.pixels.shape()));
    }
}

SafetensorsFile read_weights(const fs::path& path) {
    if (!fs::exists(path)) {
        throw CapabilityError("metric weights not found at " + path.string() +
                              "; use the toy stand-in (--metrics toy) instead");
    }
    return read_safetensors(path);
}

double mean_or_nan(double sum, std::size_t n) { return n ? sum / static_cast<double>(n) : std::nan(""); }

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

Image fit(const Image& img, int size) {
    if (img.width() == size && img.height() == size) return img;
    return resize_bilinear(img, size, size);
}

}  // namespace

ConvFeatureExtractor::ConvFeatureExtractor(std::string name, std::vector<Conv> convs, std::array<double, 3> shift,
                                           std::array<double, 3> scale)
    : name_(std::move(name)), convs_(std::move(convs)), shift_(shift), scale_(scale) {
    std::int64_t in = 3;
    for (const auto& c : convs_) {
        const auto& s = c.weight.shape();
        if (s.size() != 4 || s[1] != in || s[2] != 3 || s[3] != 3 || c.bias.numel() != s[0]) {
            throw DimensionError("conv weight " + shape_str(s) + " does not fit a 3x3 stack with " +
                                 std::to_string(in) + " input channels");
        }
        in = s[0];
    }
    if (layers().empty()) throw ConfigError("feature extractor '" + name_ + "' has no feature layers");
}

ConvFeatureExtractor ConvFeatureExtractor::toy(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Conv> convs;
    const std::array<std::pair<int, int>, 3> dims{{{3, 8}, {8, 16}, {16, 32}}};
    for (std::size_t i = 0; i < dims.size(); ++i) {
        const auto [in, out] = dims[i];
        Conv c;
        c.weight = rng.normal_tensor({out, in, 3, 3}, std::sqrt(2.0 / (9.0 * in)));
        c.bias = Tensor({out});
        c.pool_before = i > 0;
        c.tap = "relu" + std::to_string(i + 1);
        convs.push_back(std::move(c));
    }
    return ConvFeatureExtractor("toy-conv3", std::move(convs), {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5});
}

ConvFeatureExtractor ConvFeatureExtractor::vgg16(const fs::path& weights, std::array<double, 3> shift,
                                                 std::array<double, 3> scale) {
    const SafetensorsFile file = read_weights(weights);
    struct Slot {
        int index;
        bool pool_before;
        const char* tap;
    };
    static constexpr Slot kSlots[] = {{0, false, ""},        {2, false, "relu1_2"}, {5, true, ""},
                                      {7, false, "relu2_2"}, {10, true, ""},        {12, false, ""},
                                      {14, false, "relu3_3"}, {17, true, ""},       {19, false, ""},
                                      {21, false, "relu4_3"}, {24, true, ""},       {26, false, ""},
                                      {28, false, "relu5_3"}};
    std::vector<Conv> convs;
    for (const auto& slot : kSlots) {
        const std::string base = "features." + std::to_string(slot.index);
        auto w = file.tensors.find(base + ".weight");
        auto b = file.tensors.find(base + ".bias");
        if (w == file.tensors.end() || b == file.tensors.end()) {
            throw CapabilityError(weights.string() + " lacks " + base + " (expected torchvision VGG16 names)");
        }
        convs.push_back({w->second, b->second, slot.pool_before, slot.tap});
    }
    return ConvFeatureExtractor("vgg16", std::move(convs), shift, scale);
}

std::vector<FeatureLayer> ConvFeatureExtractor::layers() const {
    std::vector<FeatureLayer> out;
    for (const auto& c : convs_) {
        if (!c.tap.empty()) out.push_back({c.tap, static_cast<int>(c.weight.dim(0))});
    }
    return out;
}

std::vector<Tensor> ConvFeatureExtractor::features(const Image& image) const {
    if (image.channels() != 3) {
        throw DimensionError("feature extractor expects an RGB image, got " + std::to_string(image.channels()) +
                             " channels");
    }
    Tensor x = image.pixels;
    const auto plane = static_cast<std::int64_t>(image.height()) * image.width();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const auto c = static_cast<std::size_t>(i / plane);
        x[i] = (x[i] - shift_[c]) / scale_[c];
    }
    std::vector<Tensor> out;
    for (const auto& conv : convs_) {
        if (conv.pool_before) x = max_pool2(x);
        x = conv3_relu(x, conv);
        if (!conv.tap.empty()) out.push_back(x);
    }
    return out;
}

Tensor gram(const Tensor& features) {
    if (features.rank() < 2 || features.empty()) {
        throw DimensionError("gram needs a non-empty [C, N] feature map, got " + shape_str(features.shape()));
    }
    const auto c = features.dim(0);
    const auto n = features.numel() / c;
    ConstMap f(features.data(), c, n);
    Tensor g({c, c});
    MutMap gm(g.data(), c, c);
    gm.noalias() = f * f.transpose();
    gm /= static_cast<double>(c * n);
    for (std::int64_t i = 0; i < c; ++i) {
        for (std::int64_t j = i + 1; j < c; ++j) gm(j, i) = gm(i, j);
    }
    return g;
}

std::vector<Tensor> gram_matrices(const Image& image, const ConvFeatureExtractor& extractor) {
    std::vector<Tensor> out;
    for (const auto& f : extractor.features(image)) out.push_back(gram(f));
    return out;
}

double style_loss(const Image& a, const Image& b, const ConvFeatureExtractor& extractor) {
    require_same_size(a, b, "style_loss");
    const auto ga = gram_matrices(a, extractor);
    const auto gb = gram_matrices(b, extractor);
    double total = 0.0;
    for (std::size_t l = 0; l < ga.size(); ++l) {
        double sum = 0.0;
        for (std::int64_t i = 0; i < ga[l].numel(); ++i) {
            const double d = ga[l][i] - gb[l][i];
            sum += d * d;
        }
        total += sum / static_cast<double>(ga[l].numel());
    }
    return total;
}

PerceptualModel PerceptualModel::toy(std::uint64_t seed) {
    PerceptualModel m{ConvFeatureExtractor::toy(seed), {}};
    for (const auto& layer : m.extractor.layers()) m.channel_weights.emplace_back(Shape{layer.channels}, 1.0);
    return m;
}

PerceptualModel PerceptualModel::load(const fs::path& dir) {
    PerceptualModel m{ConvFeatureExtractor::vgg16(dir / "vgg16.safetensors"), {}};
    const SafetensorsFile lin = read_weights(dir / "lpips_vgg.safetensors");
    const auto layers = m.extractor.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string name = "lin" + std::to_string(i) + ".model.1.weight";
        auto it = lin.tensors.find(name);
        if (it == lin.tensors.end()) throw CapabilityError("lpips_vgg.safetensors lacks " + name);
        Tensor w = it->second.reshaped({it->second.numel()});
        if (w.numel() != layers[i].channels) {
            throw DimensionError(name + " has " + std::to_string(w.numel()) + " weights, layer " + layers[i].name +
                                 " has " + std::to_string(layers[i].channels) + " channels");
        }
        for (double v : w.values()) {
            if (v < 0.0) throw ValidationError(name + " holds a negative channel weight");
        }
        m.channel_weights.push_back(std::move(w));
    }
    return m;
}

double perceptual_distance(const Image& a, const Image& b, const PerceptualModel& model) {
    require_same_size(a, b, "perceptual_distance");
    const auto fa = model.extractor.features(a);
    const auto fb = model.extractor.features(b);
    constexpr double kEps = 1e-10;
    double total = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const auto c = fa[l].dim(0);
        const auto n = fa[l].numel() / c;
        const Tensor& w = model.channel_weights.at(l);
        double sum = 0.0;
        for (std::int64_t p = 0; p < n; ++p) {
            double na = 0.0, nb = 0.0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                na += fa[l][ch * n + p] * fa[l][ch * n + p];
                nb += fb[l][ch * n + p] * fb[l][ch * n + p];
            }
            na = std::sqrt(na) + kEps;
            nb = std::sqrt(nb) + kEps;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const double d = fa[l][ch * n + p] / na - fb[l][ch * n + p] / nb;
                sum += w[ch] * d * d;
            }
        }
        total += sum / static_cast<double>(n);
    }
    return total;
}

MetricModels MetricModels::make(const std::string& which) {
    if (which == "toy") return {ConvFeatureExtractor::toy(), PerceptualModel::toy()};
    const fs::path dir = which;
    return {ConvFeatureExtractor::vgg16(dir / "vgg16.safetensors"), PerceptualModel::load(dir)};
}

std::vector<EvalContent> load_eval_contents(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("content directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<EvalContent> out;
    for (const auto& f : files) {
        EvalContent c{f.stem().string(), read_png(f), {}};
        const fs::path txt = fs::path(f).replace_extension(".txt");
        if (fs::exists(txt)) {
            std::ifstream in(txt);
            std::getline(in, c.caption);
        }
        if (c.caption.empty()) {
            c.caption = c.id;
            std::replace(c.caption.begin(), c.caption.end(), '_', ' ');
        }
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<EvalStyle> load_eval_styles(const fs::path& dir, const Backbone* model) {
    if (!fs::is_directory(dir)) throw IoError("style directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".sigstyle") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<EvalStyle> out;
    for (const auto& f : files) {
        const fs::path png = fs::path(f).replace_extension(".png");
        if (!fs::exists(png)) throw IoError("style " + f.string() + " has no reference image " + png.string());
        out.push_back({f.stem().string(), load_checkpoint(f, model), read_png(png)});
    }
    return out;
}

MetricsReport evaluate_suite(Backbone& model, const std::vector<EvalContent>& contents,
                             const std::vector<EvalStyle>& styles, const MetricModels& metrics, const EvalConfig& cfg) {
    if (contents.empty()) throw ConfigError("evaluation needs at least one content image");
    if (styles.empty()) throw ConfigError("evaluation needs at least one style checkpoint");
    cfg.transfer.validate();

    nlohmann::ordered_json protocol;
    nlohmann::json transfer = to_json(cfg.transfer);
    transfer.erase("caption");
    transfer.erase("caption_source");
    transfer.erase("trace");
    protocol["model_id"] = model.model_id();
    protocol["image_size"] = model.image_size();
    protocol["transfer"] = transfer;
    protocol["style_extractor"] = metrics.style.name();
    protocol["perceptual_extractor"] = metrics.perceptual.extractor.name();
    const std::string text = protocol.dump();
    MetricsReport report;
    report.config_fingerprint = sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    protocol["contents"] = contents.size();
    protocol["styles"] = styles.size();
    report.protocol_json = protocol.dump();

    std::map<std::pair<std::string, std::string>, MetricsRow> done;
    std::ofstream rows_out;
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        const fs::path rows_path = cfg.out_dir / "rows.jsonl";
        if (cfg.resume && fs::exists(rows_path)) {
            std::ifstream in(rows_path);
            for (std::string line; std::getline(in, line);) {
                if (line.empty()) continue;
                const auto j = nlohmann::json::parse(line, nullptr, false);
                if (j.is_discarded() || j.value("fingerprint", "") != report.config_fingerprint) continue;
                if (!j.value("error", "").empty()) continue;
                MetricsRow r{j.at("content_id"), j.at("style_id"), j.at("style_loss"), j.at("lpips"),
                             j.at("reconstruction_lpips"), ""};
                done[{r.content_id, r.style_id}] = r;
            }
        }
        rows_out.open(rows_path, cfg.resume ? std::ios::app : std::ios::trunc);
        if (!rows_out) throw IoError("cannot write " + rows_path.string());
    }

    const int size = model.image_size();
    double sum_style = 0.0, sum_lpips = 0.0, sum_recon = 0.0;
    std::size_t ok = 0;
    for (const auto& content : contents) {
        for (const auto& style : styles) {
            MetricsRow row;
            if (auto it = done.find({content.id, style.id}); it != done.end()) {
                row = it->second;
                log().info("pair {} x {} already evaluated, skipping", content.id, style.id);
            } else {
                row.content_id = content.id;
                row.style_id = style.id;
                try {
                    TransferConfig tc = cfg.transfer;
                    tc.caption_source = CaptionSource::user;
                    tc.caption = content.caption;
                    const TransferOutput out = global_transfer(model, content.image, style.checkpoint, tc);
                    const Image reference = fit(content.image, size);
                    row.style_loss = style_loss(out.image, fit(style.image, size), metrics.style);
                    row.lpips = perceptual_distance(reference, out.image, metrics.perceptual);
                    row.reconstruction_lpips = perceptual_distance(reference, out.reconstruction, metrics.perceptual);
                } catch (const std::exception& e) {
                    row.error = e.what();
                    log().warn("pair {} x {} failed: {}", content.id, style.id, e.what());
                }
                if (rows_out.is_open()) {
                    nlohmann::ordered_json j{{"fingerprint", report.config_fingerprint},
                                             {"content_id", row.content_id},
                                             {"style_id", row.style_id},
                                             {"style_loss", row.style_loss},
                                             {"lpips", row.lpips},
                                             {"reconstruction_lpips", row.reconstruction_lpips},
                                             {"error", row.error}};
                    rows_out << j.dump() << '\n' << std::flush;
                }
            }
            if (row.ok()) {
                ++ok;
                sum_style += row.style_loss;
                sum_lpips += row.lpips;
                sum_recon += row.reconstruction_lpips;
            } else {
                ++report.failures;
            }
            report.rows.push_back(std::move(row));
        }
    }
    report.mean_style_loss = mean_or_nan(sum_style, ok);
    report.mean_lpips = mean_or_nan(sum_lpips, ok);
    report.mean_reconstruction_lpips = mean_or_nan(sum_recon, ok);
    if (!cfg.out_dir.empty()) write_report(report, cfg.out_dir);
    return report;
}

MetricsReport evaluate_suite(Backbone& model, const fs::path& contents_dir, const std::vector<EvalStyle>& styles,
                             const MetricModels& metrics, const EvalConfig& cfg) {
    return evaluate_suite(model, load_eval_contents(contents_dir), styles, metrics, cfg);
}

std::string report_csv(const MetricsReport& report) {
    std::string out = "content_id,style_id,style_loss,lpips,reconstruction_lpips,error\n";
    for (const auto& r : report.rows) {
        if (r.ok()) {
            out += fmt::format("{},{},{:.17g},{:.17g},{:.17g},\n", csv_field(r.content_id), csv_field(r.style_id),
                               r.style_loss, r.lpips, r.reconstruction_lpips);
        } else {
            out += fmt::format("{},{},,,,{}\n", csv_field(r.content_id), csv_field(r.style_id), csv_field(r.error));
        }
    }
    return out;
}

std::string report_summary_json(const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["pairs"] = report.rows.size();
    j["failures"] = report.failures;
    j["mean_style_loss"] = report.mean_style_loss;
    j["mean_lpips"] = report.mean_lpips;
    j["mean_reconstruction_lpips"] = report.mean_reconstruction_lpips;
    j["config_fingerprint"] = report.config_fingerprint;
    j["protocol"] = nlohmann::ordered_json::parse(report.protocol_json.empty() ? "{}" : report.protocol_json);
    j["published_reference"] = {
        {"style_loss", kPublishedStyleLoss},
        {"lpips", kPublishedLpips},
        {"note", "reported for the full-size pretrained model with unspecified feature layers; "
                 "absolute parity is not expected"}};
    return j.dump(1) + "\n";
}

void write_report(const MetricsReport& report, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "report.csv") << report_csv(report);
    std::ofstream(out_dir / "summary.json") << report_summary_json(report);
}

}  // namespace sigstyle
