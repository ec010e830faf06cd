#pragma once

#include "regiontok/geometry.hpp"

#include <optional>
#include <string>

namespace regiontok {

enum class RegionKind { Text, Face };

const char* to_string(RegionKind kind);
RegionKind region_kind_from_string(const std::string& s);

// A detected text line or face. Faces carry five landmarks; text may carry
// the ground-truth transcript used by the evaluation metrics.
struct RegionAnnotation {
    RegionKind kind = RegionKind::Text;
    geometry::BoundingBox box;
    std::optional<geometry::LandmarkSet> landmarks;
    std::optional<std::string> transcript;

    friend bool operator==(const RegionAnnotation&, const RegionAnnotation&) = default;
};

// Throws ValueError describing the first violated invariant.
void validate(const RegionAnnotation& region);

} // namespace regiontok
