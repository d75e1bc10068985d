#include <algorithm>

#include "semdiff/data.hpp"
#include "semdiff/errors.hpp"

namespace semdiff {

const std::vector<std::string>& LabelSchema::names() {
    static const std::vector<std::string> kNames{
        "background", "body",    "spleen",      "kidney_right", "kidney_left",        "gallbladder",
        "esophagus",  "liver",   "stomach",     "aorta",        "inferior_vena_cava", "pancreas",
        "adrenal_right", "adrenal_left", "duodenum", "bladder", "prostate_uterus",
    };
    return kNames;
}

const std::string& LabelSchema::name(int64_t index) {
    if (index < 0 || index >= kClassCount) {
        throw DataError("class index " + std::to_string(index) + " outside the label schema");
    }
    return names()[static_cast<std::size_t>(index)];
}

int64_t LabelSchema::index_of(std::string_view name) {
    const auto& all = names();
    const auto it = std::find(all.begin(), all.end(), name);
    if (it == all.end()) {
        throw DataError("unknown class name '" + std::string(name) + "'");
    }
    return it - all.begin();
}

const std::string& LabelSchema::abbreviation(int64_t index) {
    static const std::vector<std::string> kShort{
        "Bg.",   "Body", "Sple.",  "Kid_r", "Kid_l", "Gall_bld", "Espo.", "Liv.", "Stom.",
        "Aorta", "Cava.", "Panc.", "Adr_r.", "Adr_l.", "Duod.",   "Bladder", "Pros.",
    };
    if (index < 0 || index >= kClassCount) {
        throw DataError("class index " + std::to_string(index) + " outside the label schema");
    }
    return kShort[static_cast<std::size_t>(index)];
}

const std::vector<int64_t>& LabelSchema::report_order() {
    static const std::vector<int64_t> kOrder{2, 7, 4, 3, 11, 8, 9, 5, 6, 12, 13, 14, 10, 15, 1, 16};
    return kOrder;
}

std::string to_string(Split split) {
    return split == Split::Train ? "train" : "test";
}

Split split_from_string(const std::string& name) {
    if (name == "train" || name == "TRAIN") return Split::Train;
    if (name == "test" || name == "TEST") return Split::Test;
    throw DataError("unknown split '" + name + "' (expected train or test)");
}

}  // namespace semdiff
