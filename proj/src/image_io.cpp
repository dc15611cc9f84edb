#include "styleshift/image_io.hpp"

#include "styleshift/checkpoint.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <stdexcept>

namespace styleshift {

std::optional<Tensor<float>> read_image(const fs::path& path, Index resolution) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) return std::nullopt;
  const int side = std::min(img.rows, img.cols);
  img = img(cv::Rect((img.cols - side) / 2, (img.rows - side) / 2, side, side));
  if (side != resolution) {
    cv::Mat resized;
    const int interp = side > resolution ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(img, resized, cv::Size(static_cast<int>(resolution), static_cast<int>(resolution)), 0, 0, interp);
    img = resized;
  }
  Tensor<float> out({3, resolution, resolution});
  for (int y = 0; y < img.rows; ++y) {
    const auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.cols; ++x)
      for (int c = 0; c < 3; ++c)  // OpenCV stores BGR
        out[(c * resolution + y) * resolution + x] = dequantize_pixel(row[x][2 - c]);
  }
  return out;
}

Tensor<float> load_image(const fs::path& path, Index resolution) {
  auto img = read_image(path, resolution);
  if (!img) throw std::runtime_error("cannot decode image " + path.string());
  return std::move(*img);
}

Tensor<float> load_images(const std::vector<fs::path>& paths, Index resolution) {
  const Index per = 3 * resolution * resolution;
  Tensor<float> out({static_cast<Index>(paths.size()), 3, resolution, resolution});
  for (std::size_t i = 0; i < paths.size(); ++i)
    out.array().segment(static_cast<Index>(i) * per, per) = load_image(paths[i], resolution).array();
  return out;
}

namespace {

cv::Mat to_mat(const Tensor<float>& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw std::invalid_argument("expected a (3, H, W) image, got " + shape_string(chw.shape()));
  const Index h = chw.dim(1), w = chw.dim(2);
  cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) row[x][2 - c] = quantize_pixel(chw[(c * h + y) * w + x]);
  }
  return img;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Tensor<float>& chw) {
  std::vector<std::uint8_t> bytes;
  if (!cv::imencode(".png", to_mat(chw), bytes)) throw std::runtime_error("png encoding failed");
  return bytes;
}

void write_png(const fs::path& path, const Tensor<float>& chw) {
  const auto bytes = encode_png(chw);
  atomic_write(path, std::string(bytes.begin(), bytes.end()));
}

}  // namespace styleshift
