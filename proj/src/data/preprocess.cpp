#include <algorithm>
#include <cmath>

#include <opencv2/imgproc.hpp>

#include "semdiff/data.hpp"
#include "semdiff/errors.hpp"

namespace semdiff {

namespace {

// Non-owning OpenCV headers over grid storage.
cv::Mat view(Image& g) { return cv::Mat(static_cast<int>(g.rows()), static_cast<int>(g.cols()), CV_32F, g.data()); }
cv::Mat view(const Image& g) { return view(const_cast<Image&>(g)); }
cv::Mat view(LabelMap& g) { return cv::Mat(static_cast<int>(g.rows()), static_cast<int>(g.cols()), CV_8U, g.data()); }
cv::Mat view(const LabelMap& g) { return view(const_cast<LabelMap&>(g)); }

}  // namespace

Image window_ct(const Image& hu, CtWindow window) {
    if (!(window.width > 0.0)) {
        throw ParameterError("window width must be positive");
    }
    const double lo = window.level - window.width / 2.0;
    Image out(hu.rows(), hu.cols());
    std::transform(hu.values().begin(), hu.values().end(), out.values().begin(), [&](float v) {
        const double unit = (static_cast<double>(v) - lo) / window.width;
        return static_cast<float>(std::clamp(unit, 0.0, 1.0));
    });
    return out;
}

int closing_radius_for(int64_t width, const BodyOptions& options) {
    return static_cast<int>(std::lround(options.closing_radius_at_256 * static_cast<double>(width) / 256.0));
}

BodyResult derive_body_class(const Image& windowed, const LabelMap& organ_mask, const BodyOptions& options) {
    if (!windowed.same_shape(organ_mask)) {
        throw ShapeError("derive_body_class: image and organ mask shapes differ");
    }
    BodyResult result;
    result.mask = organ_mask;

    cv::Mat candidate(static_cast<int>(windowed.rows()), static_cast<int>(windowed.cols()), CV_8U);
    bool any = false;
    for (int64_t r = 0; r < windowed.rows(); ++r) {
        for (int64_t c = 0; c < windowed.cols(); ++c) {
            const bool on = windowed(r, c) > options.threshold || organ_mask(r, c) > 0;
            candidate.at<uint8_t>(static_cast<int>(r), static_cast<int>(c)) = on ? 255 : 0;
            any = any || on;
        }
    }
    if (!any) {
        result.empty = true;
        return result;
    }

    const int radius = closing_radius_for(windowed.cols(), options);
    if (radius > 0) {
        const auto kernel = cv::getStructuringElement(cv::MORPH_ELLIPSE, cv::Size(2 * radius + 1, 2 * radius + 1));
        cv::morphologyEx(candidate, candidate, cv::MORPH_CLOSE, kernel);
    }

    cv::Mat labels, stats, centroids;
    const int count = cv::connectedComponentsWithStats(candidate, labels, stats, centroids, 8, CV_32S);
    int largest = 1;
    for (int i = 2; i < count; ++i) {
        if (stats.at<int>(i, cv::CC_STAT_AREA) > stats.at<int>(largest, cv::CC_STAT_AREA)) largest = i;
    }

    // Flood the outside from a zero border; whatever is not reached is body.
    cv::Mat padded = cv::Mat::zeros(candidate.rows + 2, candidate.cols + 2, CV_8U);
    cv::Mat inner = padded(cv::Rect(1, 1, candidate.cols, candidate.rows));
    inner.setTo(255, labels == largest);
    cv::floodFill(padded, cv::Point(0, 0), cv::Scalar(128), nullptr, cv::Scalar(), cv::Scalar(), 4);

    for (int r = 0; r < candidate.rows; ++r) {
        for (int c = 0; c < candidate.cols; ++c) {
            auto& label = result.mask(r, c);
            if (label == 0 && inner.at<uint8_t>(r, c) != 128) {
                label = static_cast<uint8_t>(LabelSchema::kBody);
            }
        }
    }
    return result;
}

torch::Tensor mask_to_onehot(const LabelMap& mask, int64_t classes) {
    if (classes < 1) {
        throw ParameterError("mask_to_onehot: class count must be positive");
    }
    const int64_t h = mask.rows();
    const int64_t w = mask.cols();
    auto out = torch::zeros({classes, h, w}, torch::kFloat32);
    auto acc = out.accessor<float, 3>();
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const int64_t label = mask(r, c);
            if (label >= classes) {
                throw DataError("label " + std::to_string(label) + " at (row " + std::to_string(r) + ", col " +
                                std::to_string(c) + ") is outside [0, " + std::to_string(classes) + ")");
            }
            acc[label][r][c] = 1.0f;
        }
    }
    return out;
}

LabelMap mask_to_edges(const LabelMap& mask) {
    const int64_t h = mask.rows();
    const int64_t w = mask.cols();
    LabelMap edges(h, w, 0);
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const auto label = mask(r, c);
            const bool differs = (r > 0 && mask(r - 1, c) != label) || (r + 1 < h && mask(r + 1, c) != label) ||
                                 (c > 0 && mask(r, c - 1) != label) || (c + 1 < w && mask(r, c + 1) != label);
            edges(r, c) = differs ? 1 : 0;
        }
    }
    return edges;
}

std::pair<Image, LabelMap> resize_pair(const Image& image, const LabelMap& mask, int64_t size) {
    if (size < 8) {
        throw ParameterError("resize_pair: size must be >= 8, got " + std::to_string(size));
    }
    if (!image.same_shape(mask)) {
        throw ShapeError("resize_pair: image and mask shapes differ");
    }
    if (image.rows() == size && image.cols() == size) {
        return {image, mask};
    }
    Image out_image(size, size);
    LabelMap out_mask(size, size);
    const cv::Size target(static_cast<int>(size), static_cast<int>(size));
    cv::Mat dst_image = view(out_image);
    cv::Mat dst_mask = view(out_mask);
    cv::resize(view(image), dst_image, target, 0, 0, cv::INTER_LINEAR);
    cv::resize(view(mask), dst_mask, target, 0, 0, cv::INTER_NEAREST);
    return {std::move(out_image), std::move(out_mask)};
}

}  // namespace semdiff
