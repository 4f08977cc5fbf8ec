#ifndef MSHIFT_DATA_HPP
#define MSHIFT_DATA_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "mshift/image.hpp"
#include "mshift/stain.hpp"

namespace mshift::data {

struct PatchRecord {
    std::string image_path;
    int label = 0;  // 0 = normal, 1 = atypical
    std::string domain;
    int line = 0;  // manifest line, for error reporting
};

inline constexpr const char* kManifestHeader = "image_path,label,domain";

/// Strict CSV with header `image_path,label,domain`; every malformed row is
/// reported with its line number. Records keep file order.
std::vector<PatchRecord> load_manifest(const std::string& path);
std::vector<PatchRecord> parse_manifest(std::istream& in, const std::string& origin);

/// Records plus decoded images; image paths resolve relative to the
/// manifest location. Domain ids index into domain_names (sorted unique).
struct Dataset {
    std::vector<PatchRecord> records;
    std::vector<RgbPatch> images;
    std::vector<int> labels;
    std::vector<int> domain_ids;
    std::vector<std::string> domain_names;
};

Dataset load_dataset(const std::string& manifest_path);
Dataset dataset_from_memory(std::vector<RgbPatch> images, std::vector<int> labels,
                            std::vector<std::string> domains);

/// Precomputed feature vectors from an external frozen encoder.
/// Binary layout: magic "MSEMB01", u32 count, u32 dim, count*dim f64
/// little-endian, then the manifest CSV block.
struct EmbeddingSet {
    int dim = 0;
    Eigen::MatrixXd vectors;  // count x dim
    std::vector<PatchRecord> records;
};

void save_embeddings(const std::string& path, const EmbeddingSet& set);
EmbeddingSet load_embeddings(const std::string& path);

// ---- synthetic Beer-Lambert generator --------------------------------------

enum class Difficulty { Easy, Hard };

struct DomainSpec {
    std::uint64_t seed = 0;
    double angle_deg = 0.0;  // stain rotation within [0, 25] degrees
};

struct SynthConfig {
    std::uint64_t seed = 0;  // global seed, mixed into every domain stream
    int n_per_class_per_domain = 100;
    std::vector<DomainSpec> domains = {{0, 0.0}, {1, 10.0}};
    double noise_sigma = 0.0;  // channel units, added before quantization
    int side = 64;
    Difficulty difficulty = Difficulty::Easy;
};

struct SynthPatch {
    RgbPatch image;
    int label = 0;
    int domain = 0;
    std::vector<std::uint8_t> background;  // 1 = white background pixel
    Eigen::Matrix<double, 3, 2> stain;     // exact matrix used to render
};

/// Standard H&E columns rotated by angle_deg around their bisector; tiny
/// negative components from the rotation are clamped and the columns
/// renormalized, so the result is always a valid stain matrix.
Eigen::Matrix<double, 3, 2> domain_stain_matrix(double angle_deg);

/// Deterministic: the patch depends only on (config, domain, label, index).
/// Class 0 renders one smooth elliptical hematoxylin-dense blob, class 1
/// renders 2-3 overlapping lobed blobs; both sit on an eosin wash with a
/// white border.
SynthPatch gen_patch(const SynthConfig& cfg, int domain_idx, int label, int index);

/// Writes images/, manifest.csv and the domains.txt ground-truth sidecar.
void gen_synth(const SynthConfig& cfg, const std::string& out_dir);

std::vector<std::pair<std::string, stain::StainModel>> load_domains_sidecar(
    const std::string& path);

}  // namespace mshift::data

#endif
