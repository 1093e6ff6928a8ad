#include "fruitform/image.hpp"

#include "fruitform/common.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include <jerror.h>
#include <jpeglib.h>

namespace fruitform {

std::string to_string(DihedralTag t) {
    switch (t) {
        case DihedralTag::Identity: return "identity";
        case DihedralTag::Rot90: return "rot90";
        case DihedralTag::Rot180: return "rot180";
        case DihedralTag::Rot270: return "rot270";
        case DihedralTag::HFlip: return "hflip";
        case DihedralTag::VFlip: return "vflip";
        case DihedralTag::HFlipRot90: return "hflip_rot90";
        case DihedralTag::HFlipRot270: return "hflip_rot270";
    }
    return "identity";
}

DihedralTag dihedral_from_string(const std::string& name) {
    for (DihedralTag t : kDihedralTags)
        if (to_string(t) == name) return t;
    throw ValidationError("unknown transform tag: " + name);
}

DihedralTag dihedral_inverse(DihedralTag t) {
    // Rotations by 90 and 270 invert each other; every other element of the
    // group is an involution.
    if (t == DihedralTag::Rot90) return DihedralTag::Rot270;
    if (t == DihedralTag::Rot270) return DihedralTag::Rot90;
    return t;
}

ImageU8 apply_dihedral(const ImageU8& img, DihedralTag t) {
    ImageU8 out;
    for (int c = 0; c < 3; ++c) out.plane[c] = apply_dihedral(img.plane[c], t);
    return out;
}

PlaneF area_resize(const PlaneF& src, int out_w, int out_h) {
    const int in_w = static_cast<int>(src.cols());
    const int in_h = static_cast<int>(src.rows());
    if (in_w <= 0 || in_h <= 0 || out_w <= 0 || out_h <= 0)
        throw ValidationError("area_resize: empty input or output");
    if (in_w == out_w && in_h == out_h) return src;

    struct Taps {
        int first = 0;
        std::vector<double> w;
    };
    auto make_taps = [](int in_n, int out_n) {
        const double scale = static_cast<double>(in_n) / out_n;
        std::vector<Taps> taps(static_cast<std::size_t>(out_n));
        for (int o = 0; o < out_n; ++o) {
            const double s0 = o * scale;
            const double s1 = (o + 1) * scale;
            int i0 = static_cast<int>(std::floor(s0));
            int i1 = static_cast<int>(std::ceil(s1));
            i0 = std::max(0, i0);
            i1 = std::min(in_n, i1);
            Taps t;
            t.first = i0;
            double total = 0.0;
            for (int i = i0; i < i1; ++i) {
                const double overlap = std::min(s1, static_cast<double>(i + 1)) - std::max(s0, static_cast<double>(i));
                const double w = std::max(overlap, 0.0);
                t.w.push_back(w);
                total += w;
            }
            for (auto& w : t.w) w /= total;
            taps[static_cast<std::size_t>(o)] = std::move(t);
        }
        return taps;
    };

    const auto col_taps = make_taps(in_w, out_w);
    const auto row_taps = make_taps(in_h, out_h);

    // horizontal pass, double accumulation
    Eigen::ArrayXXd mid(in_h, out_w);
    for (int o = 0; o < out_w; ++o) {
        const auto& t = col_taps[static_cast<std::size_t>(o)];
        Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(in_h);
        for (std::size_t k = 0; k < t.w.size(); ++k)
            acc += src.col(t.first + static_cast<int>(k)).cast<double>() * t.w[k];
        mid.col(o) = acc;
    }
    // vertical pass
    PlaneF out(out_h, out_w);
    for (int o = 0; o < out_h; ++o) {
        const auto& t = row_taps[static_cast<std::size_t>(o)];
        Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(out_w);
        for (std::size_t k = 0; k < t.w.size(); ++k)
            acc += mid.row(t.first + static_cast<int>(k)).transpose() * t.w[k];
        out.row(o) = acc.cast<float>().transpose();
    }
    return out;
}

namespace {

bool has_png_magic(const unsigned char* p, std::size_t n) {
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    return n >= 8 && std::memcmp(p, sig, 8) == 0;
}

bool has_jpeg_magic(const unsigned char* p, std::size_t n) {
    return n >= 2 && p[0] == 0xff && p[1] == 0xd8;
}

ImageU8 from_interleaved_rgb(const std::vector<unsigned char>& buf, int w, int h) {
    ImageU8 img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = 3 * (static_cast<std::size_t>(y) * w + x);
            img.plane[0](y, x) = buf[i];
            img.plane[1](y, x) = buf[i + 1];
            img.plane[2](y, x) = buf[i + 2];
        }
    return img;
}

ImageU8 load_png_rgb(const std::filesystem::path& path) {
    png_image im;
    std::memset(&im, 0, sizeof(im));
    im.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&im, path.string().c_str()))
        throw IoError("png read failed: " + path.string() + ": " + im.message);
    im.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(im));
    if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&im);
        throw IoError("png decode failed: " + path.string() + ": " + im.message);
    }
    return from_interleaved_rgb(buf, static_cast<int>(im.width), static_cast<int>(im.height));
}

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
};

void jpeg_error_trampoline(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(mgr->jump, 1);
}

ImageU8 load_jpeg_rgb(const std::filesystem::path& path) {
    std::FILE* f = std::fopen(path.string().c_str(), "rb");
    if (!f) throw IoError("cannot open file: " + path.string());

    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_trampoline;

    // no non-trivial locals between here and the longjmp target
    std::vector<unsigned char> buf;
    int w = 0;
    int h = 0;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        std::fclose(f);
        throw IoError("jpeg decode failed: " + path.string());
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    w = static_cast<int>(cinfo.output_width);
    h = static_cast<int>(cinfo.output_height);
    buf.resize(static_cast<std::size_t>(w) * h * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    return from_interleaved_rgb(buf, w, h);
}

} // namespace

namespace {

// write-temp-then-rename so reruns replace rasters atomically
void write_png_atomic(const std::filesystem::path& path, const unsigned char* buf, int w, int h,
                      png_uint_32 format) {
    const auto tmp = path.string() + ".tmp";
    png_image im;
    std::memset(&im, 0, sizeof(im));
    im.version = PNG_IMAGE_VERSION;
    im.width = static_cast<png_uint_32>(w);
    im.height = static_cast<png_uint_32>(h);
    im.format = format;
    if (!png_image_write_to_file(&im, tmp.c_str(), 0, buf, 0, nullptr))
        throw IoError("png write failed: " + tmp + ": " + im.message);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + tmp + ": " + ec.message());
}

} // namespace

ImageU8 load_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path.string());
    unsigned char head[8] = {};
    in.read(reinterpret_cast<char*>(head), sizeof(head));
    const auto got = static_cast<std::size_t>(in.gcount());
    in.close();
    if (has_png_magic(head, got)) return load_png_rgb(path);
    if (has_jpeg_magic(head, got)) return load_jpeg_rgb(path);
    throw IoError("unsupported raster format (need PNG or JPEG): " + path.string());
}

void save_png(const std::filesystem::path& path, const ImageU8& img) {
    if (img.empty()) throw ValidationError("save_png: empty image");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const int w = img.width();
    const int h = img.height();
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = 3 * (static_cast<std::size_t>(y) * w + x);
            buf[i] = img.plane[0](y, x);
            buf[i + 1] = img.plane[1](y, x);
            buf[i + 2] = img.plane[2](y, x);
        }
    write_png_atomic(path, buf.data(), w, h, PNG_FORMAT_RGB);
}

PlaneU8 load_gray(const std::filesystem::path& path) {
    // Luma is intentionally not used: masks are stored 0/255 and mixed-channel
    // inputs should land on the mean before thresholding.
    const ImageU8 img = load_image(path);
    PlaneU8 gray(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            const int sum = img.plane[0](y, x) + img.plane[1](y, x) + img.plane[2](y, x);
            gray(y, x) = static_cast<std::uint8_t>((sum + 1) / 3);
        }
    return gray;
}

void save_gray_png(const std::filesystem::path& path, const PlaneU8& gray) {
    if (gray.size() == 0) throw ValidationError("save_gray_png: empty plane");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const int w = static_cast<int>(gray.cols());
    const int h = static_cast<int>(gray.rows());
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) buf[static_cast<std::size_t>(y) * w + x] = gray(y, x);
    write_png_atomic(path, buf.data(), w, h, PNG_FORMAT_GRAY);
}

} // namespace fruitform
