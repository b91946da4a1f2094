#include "spurgen/image.hpp"

#include "spurgen/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace spurgen {

ImageTensor::ImageTensor(ag::Tensor pixels) : pixels_(std::move(pixels)) {
    if (pixels_.rank() != 3 || pixels_.dim(0) != 3) {
        throw ConfigError("image must have shape {3,H,W}, got " + ag::shape_str(pixels_.shape()));
    }
    for (double v : pixels_.data()) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw DataError("image values must be finite and within [0,1]");
    }
}

ImageTensor ImageTensor::filled(int height, int width, double r, double g, double b) {
    ag::Tensor t({3, height, width});
    const double rgb[3] = {r, g, b};
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (int c = 0; c < 3; ++c) std::fill_n(t.data().begin() + static_cast<std::ptrdiff_t>(c * plane), plane, rgb[c]);
    return ImageTensor(std::move(t));
}

ImageTensor ImageTensor::quantized() const { return to_image(pixels_); }

LatentTensor::LatentTensor(ag::Tensor values) : values_(std::move(values)) {
    if (values_.rank() != 3) throw ConfigError("latent must have shape {c,h,w}, got " + ag::shape_str(values_.shape()));
    if (!values_.all_finite()) throw DataError("latent contains non-finite values");
}

ImageTensor to_image(const ag::Tensor& chw) {
    ag::Tensor out = chw;
    for (auto& v : out.data()) {
        const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
        v = std::nearbyint(c * 255.0) / 255.0;
    }
    return ImageTensor(std::move(out));
}

void write_ppm(const std::filesystem::path& path, const ImageTensor& image) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    const int h = image.height(), w = image.width();
    os << "P6\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] = static_cast<unsigned char>(std::nearbyint(v * 255.0));
            }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw DataError("failed writing " + path.string());
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& is) {
    std::string tok;
    char ch;
    while (is.get(ch)) {
        if (ch == '#') {
            std::string skip;
            std::getline(is, skip);
        } else if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!tok.empty()) break;
        } else {
            tok.push_back(ch);
        }
    }
    return tok;
}

}  // namespace

ImageTensor read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image: " + path.string());
    if (ppm_token(is) != "P6") throw DataError("not a binary PPM (P6): " + path.string());
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(ppm_token(is));
        h = std::stoi(ppm_token(is));
        maxval = std::stoi(ppm_token(is));
    } catch (const std::exception&) {
        throw DataError("malformed PPM header: " + path.string());
    }
    if (w <= 0 || h <= 0 || maxval != 255) throw DataError("unsupported PPM geometry or maxval: " + path.string());
    std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() != static_cast<std::streamsize>(buf.size())) throw DataError("truncated PPM: " + path.string());
    ag::Tensor t({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                t[(static_cast<std::size_t>(c) * h + y) * w + x] = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    return ImageTensor(std::move(t));
}

ImageTensor contact_sheet(std::span<const ImageTensor> images, int columns) {
    if (images.empty() || columns <= 0) throw ConfigError("contact sheet needs images and a positive column count");
    const int h = images[0].height(), w = images[0].width();
    const int n = static_cast<int>(images.size());
    const int cols = std::min(columns, n);
    const int rows = (n + cols - 1) / cols;
    const int sh = rows * (h + 1) + 1, sw = cols * (w + 1) + 1;
    ag::Tensor sheet({3, sh, sw}, 1.0);
    for (int i = 0; i < n; ++i) {
        if (images[i].height() != h || images[i].width() != w) throw ConfigError("contact sheet images must share a size");
        const int oy = (i / cols) * (h + 1) + 1, ox = (i % cols) * (w + 1) + 1;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    sheet[(static_cast<std::size_t>(c) * sh + oy + y) * sw + ox + x] = images[i].at(c, y, x);
    }
    return ImageTensor(std::move(sheet));
}

}  // namespace spurgen
