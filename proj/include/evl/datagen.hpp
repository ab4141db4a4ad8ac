// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "evl/tensor.hpp"

// Deterministic synthetic captioning data: colored shapes on a 32x32 canvas,
// optionally moving across frames, captioned by a closed grammar.
//
//   static, one shape:   "<color> <shape>"
//   static, two shapes:  "<color> <shape> above <color> <shape>"
//                        "<color> <shape> left of <color> <shape>"
//   video:               "<color> <shape> moves <left|right|up|down>"
//                        "<color> <shape> stays"
//
// Two-shape scenes use a 2x2 grid of 16x16 cells; the shape in the lower
// raster cell is mentioned first, so the relation is "left of" when both share
// a row and "above" otherwise.
namespace evl::datagen {

inline constexpr int kCanvas = 32;

enum class Color { red, green, blue };
enum class ShapeKind { circle, square, triangle };
enum class Motion { stays, left, right, up, down };
enum class Relation { above, left_of };

struct Placement {
    ShapeKind shape;
    Color color;
    int x = 0, y = 0;  // top-left corner at frame 0
    int size = 10;
    int dx = 0, dy = 0;  // pixels per frame
};

struct Scene {
    std::vector<Placement> objects;
    std::size_t frames = 1;
};

struct Image {
    int width = kCanvas;
    int height = kCanvas;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    bool operator==(const Image&) const = default;
};

struct Sample {
    std::string id;
    std::vector<Image> frames;  // one frame for still images
    std::string caption;
};

// Caption-level content of a scene; what a caption determines exactly.
struct SceneSummary {
    std::vector<std::pair<Color, ShapeKind>> objects;  // mention order
    std::optional<Relation> relation;
    std::optional<Motion> motion;

    bool operator==(const SceneSummary&) const = default;
};

Scene sample_image_scene(std::uint64_t seed);
Scene sample_video_scene(std::uint64_t seed, std::size_t frames);

Image render(const Scene& scene, std::size_t frame);
SceneSummary summarize(const Scene& scene);
std::string caption_for(const SceneSummary& summary);
// Inverse of caption_for; throws ParseError on text outside the grammar.
SceneSummary parse_caption(const std::string& caption);
bool scene_is_valid(const Scene& scene);

Sample gen_image_sample(std::uint64_t seed);
Sample gen_video_sample(std::uint64_t seed, std::size_t frames);

// Word-level vocabulary over the grammar, specials first.
class Vocabulary {
public:
    static constexpr int kPad = 0, kBos = 1, kEos = 2, kUnk = 3;

    static Vocabulary grammar();
    explicit Vocabulary(std::vector<std::string> words);

    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }
    int id(const std::string& word) const;
    // <bos> w1 ... wn <eos>
    std::vector<int> encode(const std::string& caption) const;
    // Skips specials.
    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> words_;
};

// [1, N, H, W, 3] with channel values scaled to [0, 1].
Tensor to_pixels(const std::vector<Image>& frames);

enum class CorpusKind { image, video };

struct Corpus {
    CorpusKind kind = CorpusKind::image;
    std::vector<Sample> samples;  // ascending id
    std::vector<std::string> vocabulary;
};

// Layout: images/<id>.ppm or videos/<id>/frame<k>.ppm, captions.tsv, vocab.txt.
void write_corpus(const std::vector<Sample>& samples, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

std::string format_id(std::size_t index);

}  // namespace evl::datagen
