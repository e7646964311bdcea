// Writes the toy feature-extractor weights and probe images (plus a fixed
// noise field) for the independent NumPy metrics oracle.
#include <iostream>

#include "sigstyle/digest.hpp"
#include "sigstyle/image.hpp"
#include "sigstyle/io/safetensors.hpp"
#include "sigstyle/metrics.hpp"
#include "sigstyle/rng.hpp"

using namespace sigstyle;

int main(int argc, char** argv) {
    if (argc != 3) {
        std::cerr << "usage: sigstyle_dump_metrics DATA_DIR OUT.safetensors\n";
        return 2;
    }
    const std::filesystem::path data = argv[1];
    const ConvFeatureExtractor ex = ConvFeatureExtractor::toy();
    std::map<std::string, Tensor> weights, out;
    for (std::size_t i = 0; i < ex.convs().size(); ++i) {
        weights["conv" + std::to_string(i) + ".weight"] = ex.convs()[i].weight;
        weights["conv" + std::to_string(i) + ".bias"] = ex.convs()[i].bias;
    }
    for (const auto& [k, v] : weights) out["extractor." + k] = v;

    constexpr int kSize = 48;
    const Image content = read_png(data / "content.png");
    const Image stripes = read_png(data / "style_stripes.png");
    const Image dots = read_png(data / "style_dots.png");
    const std::vector<Image> probes{resize_bilinear(content, kSize, kSize), resize_bilinear(stripes, kSize, kSize),
                                    resize_bilinear(dots, kSize, kSize),
                                    resize_bilinear(flip_horizontal(content), kSize, kSize),
                                    resize_bilinear(crop(dots, 16, 16, 128, 128), kSize, kSize)};
    for (std::size_t i = 0; i < probes.size(); ++i) out["input." + std::to_string(i)] = probes[i].pixels;
    Rng rng(2024);
    out["noise"] = rng.normal_tensor({3, kSize, kSize});
    write_safetensors(argv[2], out, StoredType::f64, {{"weights_digest", tensors_digest(weights)}});
    return 0;
}
