// SPDX-License-Identifier: Apache-2.0
#include "evl/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "evl/random.hpp"

namespace evl::datagen {

namespace fs = std::filesystem;

namespace {

constexpr int kCell = 16;
constexpr int kStillSize = 10;
constexpr int kVideoSize = 8;
constexpr int kSpeed = 4;
// Placements snap to the encoder's 4-pixel patch grid, so a shape always
// covers the same patch footprint wherever it sits.
constexpr int kGrid = 4;

const char* const kColorWords[] = {"red", "green", "blue"};
const char* const kShapeWords[] = {"circle", "square", "triangle"};
const char* const kMotionWords[] = {"stays", "left", "right", "up", "down"};

std::pair<int, int> motion_vector(Motion m) {
    switch (m) {
        case Motion::left: return {-kSpeed, 0};
        case Motion::right: return {kSpeed, 0};
        case Motion::up: return {0, -kSpeed};
        case Motion::down: return {0, kSpeed};
        case Motion::stays: break;
    }
    return {0, 0};
}

Motion motion_of(int dx, int dy) {
    if (dx == 0 && dy == 0) return Motion::stays;
    if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? Motion::left : Motion::right;
    return dy < 0 ? Motion::up : Motion::down;
}

bool covers(ShapeKind shape, int size, int px, int py) {
    switch (shape) {
        case ShapeKind::square: return true;
        case ShapeKind::circle: {
            const double c = (size - 1) / 2.0;
            const double r = size / 2.0;
            return (px - c) * (px - c) + (py - c) * (py - c) <= r * r;
        }
        case ShapeKind::triangle: {
            // apex at the top, one more pixel of width per row
            const int w = py + 1;
            const int left = (size - w) / 2;
            return px >= left && px < left + w;
        }
    }
    return false;
}

template <typename Enum>
Enum pick(Rng& rng, std::size_t n) {
    return static_cast<Enum>(rng.index(n));
}

int word_index(const char* const* words, std::size_t n, const std::string& w) {
    for (std::size_t i = 0; i < n; ++i)
        if (w == words[i]) return static_cast<int>(i);
    return -1;
}

}  // namespace

Scene sample_image_scene(std::uint64_t seed) {
    Rng rng(seed);
    Scene scene;
    const std::size_t count = rng.index(4) == 0 ? 1 : 2;
    std::vector<int> cells{0, 1, 2, 3};
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = i + rng.index(cells.size() - i);
        std::swap(cells[i], cells[j]);
        Placement p;
        p.color = pick<Color>(rng, 3);
        p.shape = pick<ShapeKind>(rng, 3);
        p.size = kStillSize;
        const std::size_t slots = (kCell - kStillSize) / kGrid + 1;
        p.x = (cells[i] % 2) * kCell + kGrid * static_cast<int>(rng.index(slots));
        p.y = (cells[i] / 2) * kCell + kGrid * static_cast<int>(rng.index(slots));
        scene.objects.push_back(p);
    }
    return scene;
}

Scene sample_video_scene(std::uint64_t seed, std::size_t frames) {
    if (frames < 1) throw ContractError("a video needs at least one frame");
    Rng rng(seed);
    Placement p;
    p.color = pick<Color>(rng, 3);
    p.shape = pick<ShapeKind>(rng, 3);
    p.size = kVideoSize;
    const auto [dx, dy] = motion_vector(pick<Motion>(rng, 5));
    p.dx = dx;
    p.dy = dy;
    Scene scene{{p}, frames};
    // redraw the start until the whole trajectory stays on the canvas
    do {
        const std::size_t slots = (kCanvas - kVideoSize) / kGrid + 1;
        scene.objects[0].x = kGrid * static_cast<int>(rng.index(slots));
        scene.objects[0].y = kGrid * static_cast<int>(rng.index(slots));
    } while (!scene_is_valid(scene));
    return scene;
}

bool scene_is_valid(const Scene& scene) {
    for (std::size_t f = 0; f < scene.frames; ++f) {
        const int t = static_cast<int>(f);
        for (std::size_t i = 0; i < scene.objects.size(); ++i) {
            const auto& a = scene.objects[i];
            const int ax = a.x + a.dx * t, ay = a.y + a.dy * t;
            if (ax < 0 || ay < 0 || ax + a.size > kCanvas || ay + a.size > kCanvas) return false;
            for (std::size_t j = i + 1; j < scene.objects.size(); ++j) {
                const auto& b = scene.objects[j];
                const int bx = b.x + b.dx * t, by = b.y + b.dy * t;
                const bool apart = ax + a.size <= bx || bx + b.size <= ax || ay + a.size <= by || by + b.size <= ay;
                if (!apart) return false;
            }
        }
    }
    return true;
}

Image render(const Scene& scene, std::size_t frame) {
    Image img;
    img.rgb.assign(static_cast<std::size_t>(kCanvas * kCanvas * 3), 0);
    const int t = static_cast<int>(frame);
    for (const auto& o : scene.objects) {
        const int ox = o.x + o.dx * t, oy = o.y + o.dy * t;
        for (int py = 0; py < o.size; ++py) {
            for (int px = 0; px < o.size; ++px) {
                const int x = ox + px, y = oy + py;
                if (x < 0 || y < 0 || x >= kCanvas || y >= kCanvas || !covers(o.shape, o.size, px, py)) continue;
                auto* pixel = &img.rgb[static_cast<std::size_t>((y * kCanvas + x) * 3)];
                pixel[static_cast<int>(o.color)] = 255;
            }
        }
    }
    return img;
}

SceneSummary summarize(const Scene& scene) {
    SceneSummary s;
    std::vector<Placement> ordered = scene.objects;
    auto cell = [](const Placement& p) { return std::pair{p.y / kCell, p.x / kCell}; };
    std::stable_sort(ordered.begin(), ordered.end(),
                     [&](const Placement& a, const Placement& b) { return cell(a) < cell(b); });
    for (const auto& p : ordered) s.objects.emplace_back(p.color, p.shape);
    if (ordered.size() == 2) {
        s.relation = cell(ordered[0]).first == cell(ordered[1]).first ? Relation::left_of : Relation::above;
    }
    if (scene.frames > 1 && ordered.size() == 1) s.motion = motion_of(ordered[0].dx, ordered[0].dy);
    return s;
}

std::string caption_for(const SceneSummary& s) {
    std::ostringstream os;
    auto object = [&](std::size_t i) {
        os << kColorWords[static_cast<int>(s.objects[i].first)] << ' '
           << kShapeWords[static_cast<int>(s.objects[i].second)];
    };
    object(0);
    if (s.relation) {
        os << (*s.relation == Relation::above ? " above " : " left of ");
        object(1);
    }
    if (s.motion) {
        if (*s.motion == Motion::stays) {
            os << " stays";
        } else {
            os << " moves " << kMotionWords[static_cast<int>(*s.motion)];
        }
    }
    return os.str();
}

SceneSummary parse_caption(const std::string& caption) {
    std::istringstream is(caption);
    std::vector<std::string> w{std::istream_iterator<std::string>(is), std::istream_iterator<std::string>()};
    auto fail = [&](const std::string& why) { return ParseError("caption \"" + caption + "\": " + why); };
    std::size_t pos = 0;
    SceneSummary s;
    auto object = [&]() {
        if (pos + 2 > w.size()) throw fail("expected <color> <shape>");
        const int c = word_index(kColorWords, 3, w[pos]);
        const int k = word_index(kShapeWords, 3, w[pos + 1]);
        if (c < 0 || k < 0) throw fail("expected <color> <shape> at word " + std::to_string(pos));
        s.objects.emplace_back(static_cast<Color>(c), static_cast<ShapeKind>(k));
        pos += 2;
    };
    object();
    if (pos < w.size() && w[pos] == "above") {
        s.relation = Relation::above;
        ++pos;
        object();
    } else if (pos + 1 < w.size() && w[pos] == "left" && w[pos + 1] == "of") {
        s.relation = Relation::left_of;
        pos += 2;
        object();
    } else if (pos < w.size() && w[pos] == "stays") {
        s.motion = Motion::stays;
        ++pos;
    } else if (pos + 1 < w.size() && w[pos] == "moves") {
        const int m = word_index(kMotionWords, 5, w[pos + 1]);
        if (m <= 0) throw fail("unknown direction " + w[pos + 1]);
        s.motion = static_cast<Motion>(m);
        pos += 2;
    }
    if (pos != w.size()) throw fail("unexpected word " + w[pos]);
    return s;
}

Sample gen_image_sample(std::uint64_t seed) {
    const Scene scene = sample_image_scene(seed);
    return {format_id(seed), {render(scene, 0)}, caption_for(summarize(scene))};
}

Sample gen_video_sample(std::uint64_t seed, std::size_t frames) {
    const Scene scene = sample_video_scene(seed, frames);
    Sample s{format_id(seed), {}, caption_for(summarize(scene))};
    for (std::size_t f = 0; f < frames; ++f) s.frames.push_back(render(scene, f));
    return s;
}

Vocabulary Vocabulary::grammar() {
    return Vocabulary({"<pad>", "<bos>", "<eos>", "<unk>", "red", "green", "blue", "circle", "square", "triangle",
                       "above", "left", "of", "moves", "right", "up", "down", "stays"});
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 4 || words_[kPad] != "<pad>" || words_[kBos] != "<bos>" || words_[kEos] != "<eos>" ||
        words_[kUnk] != "<unk>") {
        throw ConfigError("vocabulary must start with <pad> <bos> <eos> <unk>");
    }
}

int Vocabulary::id(const std::string& word) const {
    const auto it = std::find(words_.begin(), words_.end(), word);
    return it == words_.end() ? kUnk : static_cast<int>(it - words_.begin());
}

std::vector<int> Vocabulary::encode(const std::string& caption) const {
    std::istringstream is(caption);
    std::vector<int> ids{kBos};
    for (std::string w; is >> w;) ids.push_back(id(w));
    ids.push_back(kEos);
    return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
        if (i < 4 || static_cast<std::size_t>(i) >= words_.size()) continue;
        if (!out.empty()) out += ' ';
        out += words_[static_cast<std::size_t>(i)];
    }
    return out;
}

Tensor to_pixels(const std::vector<Image>& frames) {
    if (frames.empty()) throw DimensionError("to_pixels: no frames");
    const auto h = static_cast<std::size_t>(frames[0].height), w = static_cast<std::size_t>(frames[0].width);
    std::vector<double> data;
    data.reserve(frames.size() * h * w * 3);
    for (const auto& f : frames) {
        if (static_cast<std::size_t>(f.height) != h || static_cast<std::size_t>(f.width) != w) {
            throw DimensionError("to_pixels: frames differ in size");
        }
        for (auto b : f.rgb) data.push_back(b / 255.0);
    }
    return Tensor::from({1, frames.size(), h, w, 3}, std::move(data));
}

std::string format_id(std::size_t index) {
    std::ostringstream os;
    os << std::setw(8) << std::setfill('0') << index;
    return os.str();
}

void write_ppm(const fs::path& path, const Image& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
}

Image read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(path.string() + ": cannot open");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    auto fail = [&](const std::string& why) { return ParseError(path.string() + ": " + why); };
    auto skip_space = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&](const char* what) {
        skip_space();
        std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw fail(std::string("malformed PPM header, missing ") + what);
        return std::stoi(bytes.substr(start, pos - start));
    };
    if (bytes.size() < 2 || bytes.compare(0, 2, "P6") != 0) throw fail("malformed PPM header, expected P6");
    pos = 2;
    Image img;
    img.width = number("width");
    img.height = number("height");
    const int maxval = number("maxval");
    if (maxval != 255) throw fail("unsupported maxval " + std::to_string(maxval));
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw fail("malformed PPM header, no separator before pixel data");
    }
    ++pos;
    const auto expected = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height) * 3;
    if (bytes.size() - pos != expected) {
        throw fail("expected " + std::to_string(expected) + " pixel bytes, found " + std::to_string(bytes.size() - pos));
    }
    img.rgb.assign(bytes.begin() + static_cast<long>(pos), bytes.end());
    return img;
}

void write_corpus(const std::vector<Sample>& samples, const fs::path& dir) {
    if (samples.empty()) throw ContractError("write_corpus: no samples");
    const bool video = samples[0].frames.size() > 1;
    fs::create_directories(dir / (video ? "videos" : "images"));
    std::vector<const Sample*> ordered;
    for (const auto& s : samples) ordered.push_back(&s);
    std::sort(ordered.begin(), ordered.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });

    std::ofstream captions(dir / "captions.tsv");
    for (const auto* s : ordered) {
        if ((s->frames.size() > 1) != video) throw ContractError("write_corpus: mixed image and video samples");
        if (video) {
            const fs::path clip = dir / "videos" / s->id;
            fs::create_directories(clip);
            for (std::size_t k = 0; k < s->frames.size(); ++k) {
                write_ppm(clip / ("frame" + std::to_string(k) + ".ppm"), s->frames[k]);
            }
        } else {
            write_ppm(dir / "images" / (s->id + ".ppm"), s->frames[0]);
        }
        captions << s->id << '\t' << s->caption << '\n';
    }
    std::ofstream vocab(dir / "vocab.txt");
    const Vocabulary grammar = Vocabulary::grammar();
    for (const auto& w : grammar.words()) vocab << w << '\n';
}

Corpus read_corpus(const fs::path& dir) {
    Corpus corpus;
    const bool video = fs::is_directory(dir / "videos");
    if (!video && !fs::is_directory(dir / "images")) {
        throw ParseError(dir.string() + ": no images/ or videos/ directory");
    }
    corpus.kind = video ? CorpusKind::video : CorpusKind::image;

    const fs::path caption_path = dir / "captions.tsv";
    std::ifstream in(caption_path);
    if (!in) throw ParseError(caption_path.string() + ": cannot open");
    std::map<std::string, std::string> captions;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size()) {
            throw ParseError(caption_path.string() + ":" + std::to_string(lineno) + ": malformed caption row");
        }
        const std::string id = line.substr(0, tab);
        if (!captions.emplace(id, line.substr(tab + 1)).second) {
            throw ParseError(caption_path.string() + ":" + std::to_string(lineno) + ": duplicate caption for id " + id);
        }
    }

    std::set<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir / (video ? "videos" : "images"))) {
        if (video && entry.is_directory()) ids.insert(entry.path().filename().string());
        if (!video && entry.path().extension() == ".ppm") ids.insert(entry.path().stem().string());
    }
    for (const auto& id : ids) {
        const auto it = captions.find(id);
        if (it == captions.end()) throw ParseError(caption_path.string() + ": missing caption row for id " + id);
        Sample s{id, {}, it->second};
        if (video) {
            for (std::size_t k = 0;; ++k) {
                const fs::path frame = dir / "videos" / id / ("frame" + std::to_string(k) + ".ppm");
                if (!fs::exists(frame)) break;
                s.frames.push_back(read_ppm(frame));
            }
            if (s.frames.empty()) throw ParseError((dir / "videos" / id).string() + ": no frames");
        } else {
            s.frames.push_back(read_ppm(dir / "images" / (id + ".ppm")));
        }
        corpus.samples.push_back(std::move(s));
        captions.erase(it);
    }
    if (!captions.empty()) {
        throw ParseError(caption_path.string() + ": caption row for id " + captions.begin()->first +
                         " has no matching sample");
    }

    std::ifstream vocab(dir / "vocab.txt");
    if (!vocab) throw ParseError((dir / "vocab.txt").string() + ": cannot open");
    for (std::string w; std::getline(vocab, w);) {
        if (!w.empty()) corpus.vocabulary.push_back(w);
    }
    return corpus;
}

}  // namespace evl::datagen
