// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "unir/color.hpp"
#include "unir/tensor.hpp"

namespace unir {

// Stacks same-size images into an N x 3 x H x W tensor scaled to [0, 1].
template <class T = float>
BasicTensor<T> images_to_tensor(const std::vector<const ImageU8*>& images) {
  if (images.empty()) throw Error("InvalidArgument", "no images to stack");
  const std::size_t h = images[0]->height, w = images[0]->width, plane = h * w;
  std::vector<T> values(images.size() * 3 * plane);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const ImageU8& img = *images[n];
    if (img.height != h || img.width != w) throw Error("ShapeMismatch", "batch images differ in size");
    T* dst = values.data() + n * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i)
      for (std::size_t c = 0; c < 3; ++c) dst[c * plane + i] = static_cast<T>(img.data[i * 3 + c]) / T(255);
  }
  return BasicTensor<T>({images.size(), 3, h, w}, std::move(values));
}

template <class T = float>
BasicTensor<T> image_to_tensor(const ImageU8& img) {
  return images_to_tensor<T>({&img});
}

// Image `n` of an N x 3 x H x W tensor: round(clamp(v, 0, 1) * 255).
template <class T>
ImageU8 tensor_to_image(const BasicTensor<T>& t, std::size_t n = 0) {
  if (t.rank() != 4 || t.dim(1) != 3 || n >= t.dim(0)) throw Error("ShapeMismatch", "expected N x 3 x H x W");
  const std::size_t h = t.dim(2), w = t.dim(3), plane = h * w;
  ImageU8 img(h, w);
  const T* src = t.data().data() + n * 3 * plane;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(src[c * plane + i]), 0.0, 1.0);
      img.data[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

}  // namespace unir
