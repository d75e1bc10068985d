#include "semdiff/data.hpp"
#include "semdiff/errors.hpp"

namespace semdiff {

IngestSummary ingest_manifest(const std::filesystem::path& raw_manifest, const std::filesystem::path& out_dir,
                              const IngestOptions& options) {
    if (options.size < 8) throw ParameterError("ingest size must be >= 8");
    if (options.label_offset < 0) throw ParameterError("label offset must be >= 0");

    DatasetOptions raw_opts;
    raw_opts.window = options.window;
    raw_opts.classes = 256;
    raw_opts.cache = false;
    const Dataset raw = Dataset::load_manifest(raw_manifest, raw_opts);

    IngestSummary summary;
    std::vector<SliceRecord> records;
    for (std::size_t i = 0; i < raw.entries().size(); ++i) {
        SliceRecord rec = raw.record(i);
        LabelMap organs = rec.mask;
        for (auto& v : organs.values()) {
            if (v == 0) continue;
            const int64_t mapped = v + options.label_offset;
            if (mapped >= LabelSchema::kClassCount) {
                throw DataError("label " + std::to_string(v) + " in " + raw.entries()[i].mask_path.string() +
                                " maps outside the organ classes");
            }
            v = static_cast<uint8_t>(mapped);
        }
        auto body = derive_body_class(rec.image, organs, options.body);
        if (body.empty) {
            summary.excluded.push_back(rec.stem());
            continue;
        }
        std::tie(rec.image, rec.mask) = resize_pair(rec.image, body.mask, options.size);
        records.push_back(std::move(rec));
    }
    summary.written = static_cast<int64_t>(records.size());
    summary.manifest = write_dataset(records, out_dir);
    return summary;
}

}  // namespace semdiff
